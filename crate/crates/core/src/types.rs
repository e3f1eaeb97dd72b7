//! Timeline, assets and identifiers shared by every other module.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::fixed::{Amount, Power};

/// Default wall-clock length of one timestep.
pub const DEFAULT_TICK_SECONDS: u32 = 4;

/// Discrete timestep index.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestep(pub u64);

impl Timestep {
    /// Largest usable timestep. One below `u64::MAX` so that the exclusive
    /// bound `end + 1` of any interval is representable.
    pub const MAX: Timestep = Timestep(u64::MAX - 1);

    pub fn checked_add(self, ticks: u64) -> Option<Timestep> {
        self.0.checked_add(ticks).filter(|v| *v <= Self::MAX.0).map(Timestep)
    }

    /// Panicking add for schedule arithmetic on validated configs.
    pub fn plus(self, ticks: u64) -> Timestep {
        self.checked_add(ticks).expect("timestep overflow")
    }

    pub fn prev(self) -> Option<Timestep> {
        self.0.checked_sub(1).map(Timestep)
    }
}

impl fmt::Display for Timestep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for Timestep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssetError {
    #[error("interval start {start} is after end {end}")]
    InvertedInterval { start: Timestep, end: Timestep },
    #[error("interval end {0} exceeds the representable range")]
    OutOfRange(Timestep),
}

/// Energy production (EPA) or consumption (ECA) permission: `power` watts
/// in every timestep of the inclusive interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnergyAsset {
    pub power: Power,
    pub start: Timestep,
    pub end: Timestep,
}

impl EnergyAsset {
    pub fn new(power: Power, start: Timestep, end: Timestep) -> Result<Self, AssetError> {
        let a = EnergyAsset { power, start, end };
        a.check()?;
        Ok(a)
    }

    pub fn check(&self) -> Result<(), AssetError> {
        if self.start > self.end {
            return Err(AssetError::InvertedInterval { start: self.start, end: self.end });
        }
        if self.end > Timestep::MAX {
            return Err(AssetError::OutOfRange(self.end));
        }
        Ok(())
    }

    pub fn covers(&self, t: Timestep) -> bool {
        self.start <= t && t <= self.end
    }

    /// Number of timesteps in the interval.
    pub fn ticks(&self) -> u64 {
        self.end.0 - self.start.0 + 1
    }

    pub fn overlaps(&self, start: Timestep, end: Timestep) -> bool {
        self.start <= end && start <= self.end
    }
}

/// Power contributed by `asset` at timestep `t`: its power inside the
/// inclusive interval, zero outside.
pub fn coverage(asset: &EnergyAsset, t: Timestep) -> Power {
    if asset.covers(t) {
        asset.power
    } else {
        Power::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FinancialAsset {
    pub amount: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssetKind {
    Epa,
    Eca,
    Fa,
}

impl AssetKind {
    pub const ALL: [AssetKind; 3] = [AssetKind::Epa, AssetKind::Eca, AssetKind::Fa];

    pub fn code(self) -> &'static str {
        match self {
            AssetKind::Epa => "EPA",
            AssetKind::Eca => "ECA",
            AssetKind::Fa => "FA",
        }
    }
}

impl fmt::Display for AssetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Asset {
    Epa(EnergyAsset),
    Eca(EnergyAsset),
    Fa(FinancialAsset),
}

impl Asset {
    pub fn kind(&self) -> AssetKind {
        match self {
            Asset::Epa(_) => AssetKind::Epa,
            Asset::Eca(_) => AssetKind::Eca,
            Asset::Fa(_) => AssetKind::Fa,
        }
    }

    pub fn energy(&self) -> Option<&EnergyAsset> {
        match self {
            Asset::Epa(e) | Asset::Eca(e) => Some(e),
            Asset::Fa(_) => None,
        }
    }

    pub fn amount(&self) -> Option<Amount> {
        match self {
            Asset::Fa(f) => Some(f.amount),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<(), AssetError> {
        match self {
            Asset::Epa(e) | Asset::Eca(e) => e.check(),
            Asset::Fa(_) => Ok(()),
        }
    }

    pub fn epa(power: Power, start: u64, end: u64) -> Asset {
        Asset::Epa(EnergyAsset { power, start: Timestep(start), end: Timestep(end) })
    }

    pub fn eca(power: Power, start: u64, end: u64) -> Asset {
        Asset::Eca(EnergyAsset { power, start: Timestep(start), end: Timestep(end) })
    }

    pub fn fa(amount: Amount) -> Asset {
        Asset::Fa(FinancialAsset { amount })
    }
}

impl fmt::Display for Asset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Asset::Epa(e) => write!(f, "EPA{{{}W,[{},{}]}}", e.power, e.start, e.end),
            Asset::Eca(e) => write!(f, "ECA{{{}W,[{},{}]}}", e.power, e.start, e.end),
            Asset::Fa(a) => write!(f, "FA{{{}}}", a.amount),
        }
    }
}

macro_rules! bytes_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }

            /// First eight hex digits, for logs and transcripts.
            pub fn short(&self) -> String {
                hex::encode(&self.0[..4])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.short())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                if s.is_human_readable() {
                    s.serialize_str(&self.to_hex())
                } else {
                    self.0.serialize(s)
                }
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                if d.is_human_readable() {
                    let s = String::deserialize(d)?;
                    Self::from_hex(&s).map_err(D::Error::custom)
                } else {
                    <[u8; $len]>::deserialize(d).map(Self)
                }
            }
        }
    };
}

bytes_newtype!(
    /// Destination for asset transfers: SHA-256 fingerprint of a verification key.
    Address, 32
);
bytes_newtype!(
    /// Transaction identifier: hash of the canonical signing payload.
    TxId, 32
);
bytes_newtype!(
    /// Ed25519 verification key.
    PublicKey, 32
);
bytes_newtype!(
    /// Per-transaction uniqueness tag.
    Nonce, 16
);
bytes_newtype!(
    /// Opaque anonymous communication identifier used in asks and bids.
    ChannelId, 16
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeterId(pub u32);

impl fmt::Display for MeterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProsumerId(pub u32);

impl fmt::Display for ProsumerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epa(p: u64, s: u64, e: u64) -> EnergyAsset {
        EnergyAsset::new(Power::units(p), Timestep(s), Timestep(e)).unwrap()
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&epa(5, 2, 4), Timestep(3)), Power::units(5));
        assert_eq!(coverage(&epa(5, 2, 4), Timestep(5)), Power::ZERO);
        assert_eq!(coverage(&epa(0, 0, 0), Timestep(0)), Power::ZERO);
        assert_eq!(coverage(&epa(5, 2, 4), Timestep(2)), Power::units(5));
        assert_eq!(coverage(&epa(5, 2, 4), Timestep(4)), Power::units(5));
    }

    #[test]
    fn interval_invariants() {
        assert!(EnergyAsset::new(Power::units(1), Timestep(3), Timestep(2)).is_err());
        assert!(EnergyAsset::new(Power::units(1), Timestep(0), Timestep(u64::MAX)).is_err());
        assert!(EnergyAsset::new(Power::units(1), Timestep(0), Timestep::MAX).is_ok());
        assert_eq!(Timestep::MAX.checked_add(1), None);
    }

    #[test]
    fn hex_forms() {
        let a = Address([0xab; 32]);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json.len(), 66);
        assert_eq!(serde_json::from_str::<Address>(&json).unwrap(), a);
        assert_eq!(bincode::serialize(&a).unwrap(), vec![0xab; 32]);
    }
}
