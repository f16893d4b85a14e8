//! Token usage and exact cost metering.
//!
//! Costs are integer nano-dollars. A rate is stored as micro-dollars per
//! 1000 tokens, which is numerically the same as nano-dollars per token, so
//! `tokens * rate` is exact and sums never drift.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const NANOS_PER_USD: u64 = 1_000_000_000;

/// An exact USD amount in nano-dollars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cost(u64);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub const fn from_nanos(nanos: u64) -> Self {
        Cost(nanos)
    }

    pub const fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_usd(self) -> f64 {
        self.0 as f64 / NANOS_PER_USD as f64
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl fmt::Display for Cost {
    /// Decimal USD with trailing zeros trimmed, at least two fraction digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / NANOS_PER_USD;
        let frac = format!("{:09}", self.0 % NANOS_PER_USD);
        let trimmed = frac.trim_end_matches('0');
        let frac = if trimmed.len() < 2 { &frac[..2] } else { trimmed };
        write!(f, "{whole}.{frac}")
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_usd())
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let usd = f64::deserialize(d)?;
        if !usd.is_finite() || usd < 0.0 {
            return Err(serde::de::Error::custom("cost must be a non-negative number"));
        }
        Ok(Cost((usd * NANOS_PER_USD as f64).round() as u64))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PricingError {
    #[error("rate {0:?} is not a decimal number")]
    NotDecimal(String),
    #[error("rate {0:?} has more than 6 decimal places per 1K tokens")]
    TooPrecise(String),
    #[error("rates must be positive")]
    NonPositive,
    #[error("model_id must not be empty")]
    EmptyModel,
}

/// A price in USD per 1000 tokens, held as integer micro-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate {
    micros_per_1k: u64,
}

impl Rate {
    pub const fn from_micros_per_1k(micros_per_1k: u64) -> Self {
        Self { micros_per_1k }
    }

    pub const fn micros_per_1k(self) -> u64 {
        self.micros_per_1k
    }

    /// Exact cost of `tokens` at this rate.
    pub const fn cost_of(self, tokens: u64) -> Cost {
        Cost(tokens * self.micros_per_1k)
    }
}

impl FromStr for Rate {
    type Err = PricingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
        let digits_ok = |p: &str| p.chars().all(|c| c.is_ascii_digit());
        if (whole.is_empty() && frac.is_empty()) || !digits_ok(whole) || !digits_ok(frac) {
            return Err(PricingError::NotDecimal(s.to_string()));
        }
        let frac = frac.trim_end_matches('0');
        if frac.len() > 6 {
            return Err(PricingError::TooPrecise(s.to_string()));
        }
        let whole: u64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| PricingError::NotDecimal(s.to_string()))?
        };
        let frac_micros: u64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<6}").parse().expect("six ascii digits")
        };
        Ok(Rate {
            micros_per_1k: whole * 1_000_000 + frac_micros,
        })
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let frac = format!("{:06}", self.micros_per_1k % 1_000_000);
        let frac = frac.trim_end_matches('0');
        let frac = if frac.is_empty() { "0" } else { frac };
        write!(f, "{}.{}", self.micros_per_1k / 1_000_000, frac)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rate {
    /// Accepts `"0.03"` or `0.03`; the number form goes through its shortest
    /// decimal rendering so `0.03` is not read as `0.0299999...`.
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let text = match v {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(serde::de::Error::custom(format!("invalid rate {other}"))),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingTable {
    pub model_id: String,
    pub prompt_rate: Rate,
    pub completion_rate: Rate,
}

impl PricingTable {
    pub fn new(
        model_id: impl Into<String>,
        prompt_rate: Rate,
        completion_rate: Rate,
    ) -> Result<Self, PricingError> {
        let table = Self {
            model_id: model_id.into(),
            prompt_rate,
            completion_rate,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        if self.model_id.trim().is_empty() {
            return Err(PricingError::EmptyModel);
        }
        if self.prompt_rate.micros_per_1k == 0 || self.completion_rate.micros_per_1k == 0 {
            return Err(PricingError::NonPositive);
        }
        Ok(())
    }

    pub fn usage(&self, prompt_tokens: u64, completion_tokens: u64) -> Usage {
        Usage {
            prompt_tokens,
            completion_tokens,
            cost: self.prompt_rate.cost_of(prompt_tokens)
                + self.completion_rate.cost_of(completion_tokens),
        }
    }
}

impl Default for PricingTable {
    /// gpt-4-0613: $0.03 / 1K prompt tokens, $0.06 / 1K completion tokens.
    fn default() -> Self {
        Self {
            model_id: "gpt-4-0613".into(),
            prompt_rate: Rate::from_micros_per_1k(30_000),
            completion_rate: Rate::from_micros_per_1k(60_000),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: Cost,
}

impl Usage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
            cost: self.cost + rhs.cost,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

/// Componentwise sum of a session's usages.
pub fn meter_session(usages: &[Usage]) -> Usage {
    usages.iter().copied().sum()
}

/// The cost range any split of `total_tokens` can land in:
/// all-prompt at the low end, all-completion at the high end.
pub fn cost_band(pricing: &PricingTable, total_tokens: u64) -> (Cost, Cost) {
    let lo = pricing.prompt_rate.min(pricing.completion_rate);
    let hi = pricing.prompt_rate.max(pricing.completion_rate);
    (lo.cost_of(total_tokens), hi.cost_of(total_tokens))
}
