//! Sampling temperatures with one fractional digit.
//!
//! Temperatures are stored as an integer count of tenths so that grids built
//! by repeated stepping never drift (`0.1 + 0.2 != 0.3` in binary floats).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A non-negative sampling temperature, exact to one decimal digit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Temperature(u16);

#[derive(Debug, Error, PartialEq)]
pub enum TemperatureError {
    #[error("temperature must be finite and non-negative, got {0}")]
    OutOfRange(f64),
    #[error("temperature {0} has more than one fractional digit")]
    TooPrecise(String),
    #[error("cannot parse temperature from {0:?}")]
    Parse(String),
}

const MAX_TENTHS: f64 = u16::MAX as f64;

impl Temperature {
    pub const ZERO: Temperature = Temperature(0);

    pub const fn from_tenths(tenths: u16) -> Self {
        Temperature(tenths)
    }

    pub const fn tenths(self) -> u16 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Converts a float, accepting it only if it sits within 1e-9 of a
    /// multiple of 0.1.
    pub fn from_f64(value: f64) -> Result<Self, TemperatureError> {
        if !value.is_finite() || value < 0.0 {
            return Err(TemperatureError::OutOfRange(value));
        }
        let scaled = value * 10.0;
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-6 {
            return Err(TemperatureError::TooPrecise(value.to_string()));
        }
        if rounded > MAX_TENTHS {
            return Err(TemperatureError::OutOfRange(value));
        }
        Ok(Temperature(rounded as u16))
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl FromStr for Temperature {
    type Err = TemperatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || TemperatureError::Parse(s.to_string());
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        // trailing zeros beyond the first digit are harmless ("0.70")
        let significant = frac.trim_end_matches('0');
        if significant.len() > 1 {
            return Err(TemperatureError::TooPrecise(s.to_string()));
        }
        let whole: u32 = whole.parse().map_err(|_| bad())?;
        let tenth: u32 = significant.parse().unwrap_or(0);
        let tenths = whole
            .checked_mul(10)
            .and_then(|w| w.checked_add(tenth))
            .filter(|t| *t <= u32::from(u16::MAX))
            .ok_or_else(bad)?;
        Ok(Temperature(tenths as u16))
    }
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(v) => Temperature::from_f64(v as f64),
            Raw::Float(v) => Temperature::from_f64(v),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}
