use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Which branch representations join the shared features at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActivationConfig {
    pub use_phoneme: bool,
    pub use_viseme: bool,
}

impl ActivationConfig {
    pub const F: Self = Self { use_phoneme: false, use_viseme: false };
    pub const FP: Self = Self { use_phoneme: true, use_viseme: false };
    pub const FV: Self = Self { use_phoneme: false, use_viseme: true };
    pub const FPV: Self = Self { use_phoneme: true, use_viseme: true };
    pub const ALL: [Self; 4] = [Self::F, Self::FP, Self::FV, Self::FPV];

    pub fn label(self) -> &'static str {
        match (self.use_phoneme, self.use_viseme) {
            (false, false) => "f",
            (true, false) => "f+p",
            (false, true) => "f+v",
            (true, true) => "f+p+v",
        }
    }
}

impl fmt::Display for ActivationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ActivationConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(' ', "").as_str() {
            "f" => Ok(Self::F),
            "f+p" => Ok(Self::FP),
            "f+v" => Ok(Self::FV),
            "f+p+v" | "f+v+p" => Ok(Self::FPV),
            other => Err(format!("unknown activation {other:?} (expected f, f+p, f+v or f+p+v)")),
        }
    }
}

impl Serialize for ActivationConfig {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for ActivationConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
