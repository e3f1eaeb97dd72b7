//! Fixed-point decimal quantities.
//!
//! Balance rules compare sums for exact equality, so every physical and
//! monetary quantity is an integer count of a fixed sub-unit. Text forms are
//! plain decimals (`"5.5"`, `"-0.25"`); the binary form is the raw integer.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFixedError {
    #[error("empty decimal")]
    Empty,
    #[error("invalid decimal `{0}`")]
    Invalid(String),
    #[error("`{0}` has more than {1} fractional digits")]
    TooPrecise(String, u32),
    #[error("`{0}` is out of range")]
    OutOfRange(String),
}

pub(crate) fn parse_decimal(s: &str, digits: u32) -> Result<i128, ParseFixedError> {
    let s = s.trim();
    if s.is_empty() {
        return Err(ParseFixedError::Empty);
    }
    let (neg, body) = match s.as_bytes()[0] {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (whole, frac) = match body.split_once('.') {
        Some((w, f)) => (w, f),
        None => (body, ""),
    };
    if (whole.is_empty() && frac.is_empty())
        || !whole.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(ParseFixedError::Invalid(s.to_string()));
    }
    if frac.len() as u32 > digits {
        return Err(ParseFixedError::TooPrecise(s.to_string(), digits));
    }
    let scale = 10i128.pow(digits);
    let overflow = || ParseFixedError::OutOfRange(s.to_string());
    let whole_v: i128 = if whole.is_empty() {
        0
    } else {
        whole.parse().map_err(|_| overflow())?
    };
    let mut frac_v: i128 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| overflow())? };
    frac_v *= 10i128.pow(digits - frac.len() as u32);
    let v = whole_v
        .checked_mul(scale)
        .and_then(|v| v.checked_add(frac_v))
        .ok_or_else(overflow)?;
    Ok(if neg { -v } else { v })
}

pub(crate) fn format_decimal(raw: i128, digits: u32, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let scale = 10u128.pow(digits);
    let mag = raw.unsigned_abs();
    let sign = if raw < 0 { "-" } else { "" };
    let whole = mag / scale;
    let frac = mag % scale;
    if frac == 0 {
        return write!(f, "{sign}{whole}");
    }
    let mut s = format!("{:0width$}", frac, width = digits as usize);
    while s.ends_with('0') {
        s.pop();
    }
    write!(f, "{sign}{whole}.{s}")
}

macro_rules! fixed_point {
    ($(#[$meta:meta])* $name:ident, $repr:ty, $digits:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub $repr);

        impl $name {
            /// Number of fractional decimal digits.
            pub const DIGITS: u32 = $digits;
            pub const ZERO: Self = Self(0);
            /// Raw sub-units per whole unit.
            pub const SCALE: $repr = (10 as $repr).pow($digits);

            pub const fn from_raw(raw: $repr) -> Self {
                Self(raw)
            }

            pub const fn raw(self) -> $repr {
                self.0
            }

            /// Whole units, e.g. `Power::units(5)` is five watts.
            pub const fn units(n: $repr) -> Self {
                Self(n * Self::SCALE)
            }

            pub fn checked_add(self, rhs: Self) -> Option<Self> {
                self.0.checked_add(rhs.0).map(Self)
            }

            pub fn checked_sub(self, rhs: Self) -> Option<Self> {
                self.0.checked_sub(rhs.0).map(Self)
            }

            pub fn is_zero(self) -> bool {
                self.0 == 0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                format_decimal(self.0 as i128, $digits, f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}(", stringify!($name))?;
                format_decimal(self.0 as i128, $digits, f)?;
                write!(f, ")")
            }
        }

        impl FromStr for $name {
            type Err = ParseFixedError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let v = parse_decimal(s, $digits)?;
                <$repr>::try_from(v)
                    .map(Self)
                    .map_err(|_| ParseFixedError::OutOfRange(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                if s.is_human_readable() {
                    s.collect_str(self)
                } else {
                    self.0.serialize(s)
                }
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                if d.is_human_readable() {
                    let s = String::deserialize(d)?;
                    s.parse().map_err(D::Error::custom)
                } else {
                    <$repr>::deserialize(d).map(Self)
                }
            }
        }
    };
}

fixed_point!(
    /// Non-negative power in watts, milliwatt resolution.
    Power, u64, 3
);
fixed_point!(
    /// Signed power in watts (milliwatt resolution); negative means net production.
    NetPower, i64, 3
);
fixed_point!(
    /// Non-negative currency amount with cent resolution.
    Amount, u64, 2
);
fixed_point!(
    /// Currency per watt per timestep.
    Price, u64, 4
);
fixed_point!(
    /// Signed currency used for bills. Resolution is exact for
    /// `NetPower * Price` products and for any `Amount`.
    Money, i128, 7
);

impl Money {
    pub fn from_amount(a: Amount) -> Self {
        Money(a.0 as i128 * 100_000)
    }

    /// `watts * price`, exact: milliwatts (1e-3) times 1e-4 gives 1e-7.
    pub fn energy_cost(watts: NetPower, price: Price) -> Self {
        Money(watts.0 as i128 * price.0 as i128)
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl std::ops::Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl Price {
    /// Cost of `power` held for `ticks` timesteps at this price, in cents,
    /// rounded up to the next cent.
    pub fn cost_of(self, power: Power, ticks: u64) -> Amount {
        // mW * 1e-4 = 1e-7 currency; cents are 1e-2.
        let raw = power.0 as u128 * ticks as u128 * self.0 as u128;
        Amount(raw.div_ceil(100_000) as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("5".parse::<Power>().unwrap(), Power(5000));
        assert_eq!("5.5".parse::<Power>().unwrap(), Power(5500));
        assert_eq!("0.001".parse::<Power>().unwrap(), Power(1));
        assert_eq!(".25".parse::<Price>().unwrap(), Price(2500));
        assert_eq!("-4".parse::<NetPower>().unwrap(), NetPower(-4000));
        assert_eq!(Power(5500).to_string(), "5.5");
        assert_eq!(NetPower(-250).to_string(), "-0.25");
        assert_eq!(Amount(300).to_string(), "3");
        assert_eq!(Money(-10_000_000).to_string(), "-1");
    }

    #[test]
    fn rejects_bad_input() {
        assert!("-1".parse::<Power>().is_err());
        assert!("1.0001".parse::<Power>().is_err());
        assert!("abc".parse::<Amount>().is_err());
        assert!("".parse::<Amount>().is_err());
        assert!(".".parse::<Amount>().is_err());
        assert!("99999999999999999999999".parse::<Power>().is_err());
    }

    #[test]
    fn bill_products_are_exact() {
        let e = NetPower::units(6);
        let p: Price = "0.5".parse().unwrap();
        assert_eq!(Money::energy_cost(e, p), Money::units(3));
        let e = NetPower::units(4);
        let p: Price = "0.25".parse().unwrap();
        assert_eq!(Money::energy_cost(e, p), Money::units(1));
        assert_eq!(Money::from_amount(Amount(250)).to_string(), "2.5");
    }

    #[test]
    fn cost_rounds_up_to_cents() {
        let p: Price = "0.05".parse().unwrap();
        assert_eq!(p.cost_of(Power::units(1), 30), Amount(150));
        let p: Price = "0.0001".parse().unwrap();
        assert_eq!(p.cost_of(Power(1), 1), Amount(1));
    }

    #[test]
    fn serde_forms() {
        let p = Power(1500);
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"1.5\"");
        let back: Power = serde_json::from_str("\"1.5\"").unwrap();
        assert_eq!(back, p);
        let bin = bincode::serialize(&p).unwrap();
        assert_eq!(bin, 1500u64.to_le_bytes());
    }
}
