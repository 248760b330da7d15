use std::collections::HashMap;

use crate::error::{Error, Result};

/// Provinces used as the leading class group of the plate alphabet. They are
/// rendered with synthetic glyphs, not real CJK typography.
const PROVINCES: &str = "皖沪津渝冀晋蒙辽吉黑苏浙京闽赣鲁豫鄂湘粤桂琼川贵云藏陕甘青宁新";
const PLATE_LETTERS: &str = "ABCDEFGHJKLMNPQRSTUVWXYZ";
const DIGITS: &str = "0123456789";
/// Manifest characters for the ten watermeter mid-state classes (10..=19).
const MID_STATES: &str = "abcdefghij";

/// Ordered class set. Class index `i` maps to `symbols[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    name: String,
    symbols: Vec<char>,
    mid_state: Vec<bool>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(name: impl Into<String>, symbols: Vec<char>, mid_state: Vec<bool>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("empty alphabet"));
        }
        if symbols.len() != mid_state.len() {
            return Err(Error::invalid("mid-state flags do not match symbol count"));
        }
        if symbols.len() > u16::MAX as usize {
            return Err(Error::invalid("alphabet too large"));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &s) in symbols.iter().enumerate() {
            if s.is_whitespace() || s.is_control() {
                return Err(Error::invalid(format!("symbol {s:?} cannot be written to a manifest")));
            }
            if index.insert(s, i).is_some() {
                return Err(Error::invalid(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Alphabet {
            name: name.into(),
            symbols,
            mid_state,
            index,
        })
    }

    /// 16 symbols `0-9A-F`.
    pub fn desk16() -> Self {
        let symbols: Vec<char> = "0123456789ABCDEF".chars().collect();
        let n = symbols.len();
        Self::new("desk16", symbols, vec![false; n]).expect("valid preset")
    }

    /// 65-class license plate alphabet: 31 provinces, 24 letters, 10 digits.
    pub fn plate() -> Self {
        let symbols: Vec<char> = PROVINCES.chars().chain(PLATE_LETTERS.chars()).chain(DIGITS.chars()).collect();
        let n = symbols.len();
        Self::new("plate", symbols, vec![false; n]).expect("valid preset")
    }

    /// 20-class watermeter alphabet: digits, then the mid-states between
    /// `d` and `d+1` written as `a`..`j`.
    pub fn meter() -> Self {
        let symbols: Vec<char> = DIGITS.chars().chain(MID_STATES.chars()).collect();
        let mid_state = (0..20).map(|i| i >= 10).collect();
        Self::new("meter", symbols, mid_state).expect("valid preset")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk16" => Ok(Self::desk16()),
            "plate" => Ok(Self::plate()),
            "meter" => Ok(Self::meter()),
            other => Err(Error::invalid(format!("unknown alphabet preset {other:?}"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, class: usize) -> Option<char> {
        self.symbols.get(class).copied()
    }

    pub fn class_of(&self, symbol: char) -> Result<usize> {
        self.index.get(&symbol).copied().ok_or(Error::MissingClass(symbol))
    }

    pub fn is_mid_state(&self, class: usize) -> bool {
        self.mid_state.get(class).copied().unwrap_or(false)
    }

    pub fn encode(&self, label: &[char]) -> Result<Vec<usize>> {
        label.iter().map(|&c| self.class_of(c)).collect()
    }

    pub fn decode(&self, classes: &[usize]) -> Result<Vec<char>> {
        classes
            .iter()
            .map(|&c| {
                self.symbol(c)
                    .ok_or_else(|| Error::invalid(format!("class {c} outside alphabet of {}", self.class_count())))
            })
            .collect()
    }
}
