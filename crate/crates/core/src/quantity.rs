//! CPU and memory quantities.
//!
//! CPU accepts integer cores (`8`, `"8"`) or milli-cores (`"500m"`).
//! Memory accepts integer bytes or integers with a binary suffix
//! (`Ki`, `Mi`, `Gi`). Fractions are rejected so arithmetic stays exact.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

pub(crate) const QUANTITY_ERROR_TAG: &str = "quantity: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct QuantityError(pub String);

fn parse_positive(digits: &str, what: &str, raw: &str) -> Result<u64, QuantityError> {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(QuantityError(format!("unparseable {what} quantity {raw:?}")));
    }
    let n: u64 = digits
        .parse()
        .map_err(|_| QuantityError(format!("{what} quantity {raw:?} overflows")))?;
    if n == 0 {
        return Err(QuantityError(format!("{what} quantity {raw:?} must be positive")));
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CpuQuantity {
    Cores(u64),
    Millis(u64),
}

impl CpuQuantity {
    pub fn millis(&self) -> u64 {
        match *self {
            CpuQuantity::Cores(c) => c * 1000,
            CpuQuantity::Millis(m) => m,
        }
    }

    pub fn from_cores(cores: u64) -> Result<Self, QuantityError> {
        if cores == 0 {
            return Err(QuantityError("cpu quantity must be positive".into()));
        }
        if cores > u64::MAX / 1000 {
            return Err(QuantityError(format!("cpu quantity {cores} overflows")));
        }
        Ok(CpuQuantity::Cores(cores))
    }
}

impl FromStr for CpuQuantity {
    type Err = QuantityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_suffix('m') {
            Some(digits) => Ok(CpuQuantity::Millis(parse_positive(digits, "cpu", s)?)),
            None => CpuQuantity::from_cores(parse_positive(s, "cpu", s)?),
        }
    }
}

impl fmt::Display for CpuQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CpuQuantity::Cores(c) => write!(f, "{c}"),
            CpuQuantity::Millis(m) => write!(f, "{m}m"),
        }
    }
}

impl Serialize for CpuQuantity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            CpuQuantity::Cores(c) => serializer.serialize_u64(*c),
            CpuQuantity::Millis(_) => serializer.collect_str(self),
        }
    }
}

struct CpuVisitor;

impl<'de> Visitor<'de> for CpuVisitor {
    type Value = CpuQuantity;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("integer cores or a \"<n>m\" milli-core string")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<CpuQuantity, E> {
        CpuQuantity::from_cores(v).map_err(|e| E::custom(format!("{QUANTITY_ERROR_TAG}{e}")))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<CpuQuantity, E> {
        Err(E::custom(format!("{QUANTITY_ERROR_TAG}cpu quantity {v} must be positive")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<CpuQuantity, E> {
        Err(E::custom(format!("{QUANTITY_ERROR_TAG}fractional cpu quantity {v} rejected")))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<CpuQuantity, E> {
        v.parse().map_err(|e| E::custom(format!("{QUANTITY_ERROR_TAG}{e}")))
    }
}

impl<'de> Deserialize<'de> for CpuQuantity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(CpuVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemoryUnit {
    Bytes,
    Ki,
    Mi,
    Gi,
}

impl MemoryUnit {
    pub fn multiplier(self) -> u64 {
        match self {
            MemoryUnit::Bytes => 1,
            MemoryUnit::Ki => 1 << 10,
            MemoryUnit::Mi => 1 << 20,
            MemoryUnit::Gi => 1 << 30,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            MemoryUnit::Bytes => "",
            MemoryUnit::Ki => "Ki",
            MemoryUnit::Mi => "Mi",
            MemoryUnit::Gi => "Gi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryQuantity {
    value: u64,
    unit: MemoryUnit,
}

impl MemoryQuantity {
    pub fn new(value: u64, unit: MemoryUnit) -> Result<Self, QuantityError> {
        if value == 0 {
            return Err(QuantityError("memory quantity must be positive".into()));
        }
        value
            .checked_mul(unit.multiplier())
            .ok_or_else(|| QuantityError(format!("memory quantity {value}{} overflows", unit.suffix())))?;
        Ok(Self { value, unit })
    }

    pub fn bytes(&self) -> u64 {
        self.value * self.unit.multiplier()
    }

    pub fn unit(&self) -> MemoryUnit {
        self.unit
    }

    pub fn value(&self) -> u64 {
        self.value
    }
}

impl FromStr for MemoryQuantity {
    type Err = QuantityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (digits, unit) = [("Ki", MemoryUnit::Ki), ("Mi", MemoryUnit::Mi), ("Gi", MemoryUnit::Gi)]
            .iter()
            .find_map(|(suffix, unit)| s.strip_suffix(suffix).map(|d| (d, *unit)))
            .unwrap_or((s, MemoryUnit::Bytes));
        MemoryQuantity::new(parse_positive(digits, "memory", s)?, unit)
    }
}

impl fmt::Display for MemoryQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, self.unit.suffix())
    }
}

impl Serialize for MemoryQuantity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.unit {
            MemoryUnit::Bytes => serializer.serialize_u64(self.value),
            _ => serializer.collect_str(self),
        }
    }
}

struct MemoryVisitor;

impl<'de> Visitor<'de> for MemoryVisitor {
    type Value = MemoryQuantity;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("integer bytes or an integer with a Ki/Mi/Gi suffix")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<MemoryQuantity, E> {
        MemoryQuantity::new(v, MemoryUnit::Bytes).map_err(|e| E::custom(format!("{QUANTITY_ERROR_TAG}{e}")))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<MemoryQuantity, E> {
        Err(E::custom(format!("{QUANTITY_ERROR_TAG}memory quantity {v} must be positive")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<MemoryQuantity, E> {
        Err(E::custom(format!("{QUANTITY_ERROR_TAG}fractional memory quantity {v} rejected")))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<MemoryQuantity, E> {
        v.parse().map_err(|e| E::custom(format!("{QUANTITY_ERROR_TAG}{e}")))
    }
}

impl<'de> Deserialize<'de> for MemoryQuantity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(MemoryVisitor)
    }
}
