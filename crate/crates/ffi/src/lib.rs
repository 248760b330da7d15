//! C ABI over the superocr toolkit.
//!
//! Handles are opaque and owned by the caller until passed to the
//! matching `*_free`. Every function returns a [`SocrStatus`]; on failure
//! [`socr_last_error_message`] describes the error for the calling thread.
//! Output strings are written NUL-terminated into caller buffers; when the
//! buffer is too small the required length (without the NUL) is still
//! stored in `out_len`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use superocr::decoder::{decode, Classifier, DecodeConfig};
use superocr::edgesim::{DeviceServer, QuantNetwork};
use superocr::nn::Network;
use superocr::supergen::meter_reading;
use superocr::train::checkpoint_from_bytes;
use superocr::{Alphabet, Error, GlyphFont, Image, LayoutSpec};

/// Result of every exported call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SocrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Shape = 4,
    Numeric = 5,
    Protocol = 6,
    Transport = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

enum Model {
    Float(Network),
    Quant(QuantNetwork),
}

/// A loaded model plus the decoding geometry.
pub struct SocrModel {
    model: Model,
    cfg: DecodeConfig,
}

/// An emulated coprocessor answering wire frames.
pub struct SocrDevice {
    server: DeviceServer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SocrStatus {
    match e.root() {
        Error::InvalidArgument(_) | Error::Capacity { .. } | Error::MissingGlyph(_) | Error::MissingClass(_) => SocrStatus::InvalidArgument,
        Error::Format(_) | Error::State(_) | Error::Contract(_) => SocrStatus::Format,
        Error::Shape(_) => SocrStatus::Shape,
        Error::Numeric(_) => SocrStatus::Numeric,
        Error::Protocol(_) | Error::Remote { .. } => SocrStatus::Protocol,
        Error::Transport(_) => SocrStatus::Transport,
        Error::Io(_) => SocrStatus::Io,
        Error::Scene { .. } | Error::Subset { .. } => SocrStatus::Format,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
    Small(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SocrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SocrStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            SocrStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Small(msg))) => {
            set_error(&msg);
            SocrStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic");
            SocrStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &'static str) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copy `s` plus a NUL into `buf`, storing the length in `out_len`.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    write_bytes_nul(s.as_bytes(), buf.cast(), cap, out_len, true)
}

unsafe fn write_bytes_nul(b: &[u8], buf: *mut u8, cap: usize, out_len: *mut usize, nul: bool) -> Result<(), Fail> {
    if !out_len.is_null() {
        *out_len = b.len();
    }
    let need = b.len() + usize::from(nul);
    if cap < need {
        return Err(Fail::Small(format!("buffer holds {cap} bytes, {need} needed")));
    }
    if buf.is_null() {
        return Err(Fail::Null("output buffer"));
    }
    ptr::copy_nonoverlapping(b.as_ptr(), buf, b.len());
    if nul {
        *buf.add(b.len()) = 0;
    }
    Ok(())
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn socr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn socr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a float checkpoint or quantized model (detected by magic) and
/// bind it to a layout preset and alphabet by name.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn socr_model_load(path: *const c_char, layout: *const c_char, alphabet: *const c_char, out: *mut *mut SocrModel) -> SocrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let path = text(path, "path")?;
        let layout = LayoutSpec::by_name(text(layout, "layout")?)?;
        let alphabet = Alphabet::by_name(text(alphabet, "alphabet")?)?;
        let raw = std::fs::read(Path::new(path)).map_err(Error::from)?;
        let model = if raw.starts_with(b"SOCQ") {
            Model::Quant(QuantNetwork::from_bytes(&raw)?)
        } else {
            Model::Float(checkpoint_from_bytes(&raw)?)
        };
        let classes = match &model {
            Model::Float(n) => n.class_count(),
            Model::Quant(q) => q.class_count(),
        };
        if classes != alphabet.class_count() {
            return Err(Error::InvalidArgument(format!("model has {classes} classes, alphabet {}", alphabet.class_count())).into());
        }
        let font = GlyphFont::builtin(&alphabet);
        let n = layout.string_len();
        let cfg = DecodeConfig::new(layout, font, alphabet, n)?;
        *out = Box::into_raw(Box::new(SocrModel { model, cfg }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`socr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn socr_model_free(model: *mut SocrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of characters [`socr_decode`] produces.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn socr_model_string_len(model: *const SocrModel, out: *mut usize) -> SocrStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = m.cfg.string_len;
        Ok(())
    })
}

/// Decode one scene (interleaved 8-bit pixels) into a UTF-8 string.
///
/// # Safety
/// `pixels` must hold `width * height * channels` bytes; `buf` must hold
/// `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn socr_decode(
    model: *const SocrModel,
    width: u32,
    height: u32,
    channels: u32,
    pixels: *const u8,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SocrStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let len = (width as usize)
            .checked_mul(height as usize)
            .and_then(|v| v.checked_mul(channels as usize))
            .ok_or_else(|| Error::InvalidArgument("image size overflows".into()))?;
        let px = bytes(pixels, len, "pixels")?;
        let image = Image::from_pixels(width as usize, height as usize, channels as usize, px.to_vec())?;
        let pred = match &m.model {
            Model::Float(n) => decode(&image, 0, &mut &*n as &mut dyn Classifier, &m.cfg)?,
            Model::Quant(q) => decode(&image, 0, &mut q.clone(), &m.cfg)?,
        };
        write_str(&pred.iter().collect::<String>(), buf, cap, out_len)
    })
}

/// Watermeter reading for five class indices, e.g. `01816.5`.
///
/// # Safety
/// `classes` must hold `count` values; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn socr_meter_reading(classes: *const u32, count: usize, buf: *mut c_char, cap: usize, out_len: *mut usize) -> SocrStatus {
    guard(|| {
        if classes.is_null() && count > 0 {
            return Err(Fail::Null("classes"));
        }
        let cls: Vec<usize> = if count == 0 { Vec::new() } else { std::slice::from_raw_parts(classes, count).iter().map(|&c| c as usize).collect() };
        write_str(&meter_reading(&cls)?, buf, cap, out_len)
    })
}

/// Load the device half of a quantized model.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn socr_device_load(path: *const c_char, out: *mut *mut SocrDevice) -> SocrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let q = QuantNetwork::load(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(SocrDevice { server: DeviceServer::new(q.device) }));
        Ok(())
    })
}

/// # Safety
/// `device` must come from [`socr_device_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn socr_device_free(device: *mut SocrDevice) {
    if !device.is_null() {
        drop(Box::from_raw(device));
    }
}

/// Answer one complete request frame with a response or error frame.
/// Request-level failures are reported inside the reply, not as a status.
///
/// # Safety
/// `frame` must hold `len` bytes; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn socr_device_handle_frame(device: *const SocrDevice, frame: *const u8, len: usize, buf: *mut u8, cap: usize, out_len: *mut usize) -> SocrStatus {
    guard(|| {
        let d = device.as_ref().ok_or(Fail::Null("device"))?;
        let reply = d.server.handle_bytes(bytes(frame, len, "frame")?);
        write_bytes_nul(&reply, buf, cap, out_len, false)
    })
}
