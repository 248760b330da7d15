use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// Binary PGM (P5) for one channel, PPM (P6) for three; maxval 255.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::format("not a binary PGM/PPM file")),
    };
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("truncated PNM header"));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| Error::format("truncated PNM raster"))?;
    Image::from_pixels(width, height, channels, raster.to_vec()).map_err(|e| Error::format(e.to_string()))
}

pub fn write_pnm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pnm(image))?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&fs::read(path)?)
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated PNM header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("bad number in PNM header"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = Image::gray(3, 2, 9).unwrap();
        let bytes = encode_pnm(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(bytes.len(), 11 + 6);
    }

    #[test]
    fn accepts_comments_and_rejects_truncation() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels(), &[1, 2]);
        bytes.pop();
        assert!(matches!(decode_pnm(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), fill in prop::collection::vec(any::<u8>(), 243)) {
            let ch = if rgb { 3 } else { 1 };
            let img = Image::from_pixels(w, h, ch, fill[..w * h * ch].to_vec()).unwrap();
            let bytes = encode_pnm(&img);
            let back = decode_pnm(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_pnm(&back), bytes);
        }
    }
}
