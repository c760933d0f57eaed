use std::fmt;
use std::str::FromStr;

use super::FieldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpperAirVar {
    /// Geopotential.
    Z,
    /// Specific humidity.
    Q,
    /// Temperature.
    T,
    U,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PressureLevel {
    Hpa50,
    Hpa100,
    Hpa150,
}

impl PressureLevel {
    pub const ALL: [PressureLevel; 3] = [Self::Hpa50, Self::Hpa100, Self::Hpa150];

    pub fn hpa(self) -> u32 {
        match self {
            Self::Hpa50 => 50,
            Self::Hpa100 => 100,
            Self::Hpa150 => 150,
        }
    }
}

/// One of the 19 model channels, ordered surface first, then upper-air
/// variables level by level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariableId {
    U10,
    V10,
    T2m,
    Pr,
    Upper(UpperAirVar, PressureLevel),
}

impl VariableId {
    pub const COUNT: usize = 19;
    pub const SURFACE: [VariableId; 4] = [Self::U10, Self::V10, Self::T2m, Self::Pr];

    pub fn all() -> [VariableId; Self::COUNT] {
        let mut out = [Self::U10; Self::COUNT];
        out[..4].copy_from_slice(&Self::SURFACE);
        let mut i = 4;
        for var in [
            UpperAirVar::Z,
            UpperAirVar::Q,
            UpperAirVar::T,
            UpperAirVar::U,
            UpperAirVar::V,
        ] {
            for level in PressureLevel::ALL {
                out[i] = Self::Upper(var, level);
                i += 1;
            }
        }
        out
    }

    /// Position in the canonical channel order (also the on-disk id).
    pub fn index(self) -> usize {
        match self {
            Self::U10 => 0,
            Self::V10 => 1,
            Self::T2m => 2,
            Self::Pr => 3,
            Self::Upper(v, l) => 4 + 3 * v as usize + l as usize,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::all().get(i).copied()
    }

    pub fn is_surface(self) -> bool {
        !matches!(self, Self::Upper(..))
    }

    pub fn units(self) -> &'static str {
        match self {
            Self::U10 | Self::V10 => "m s-1",
            Self::T2m => "K",
            Self::Pr => "mm day-1",
            Self::Upper(UpperAirVar::Z, _) => "m2 s-2",
            Self::Upper(UpperAirVar::Q, _) => "kg kg-1",
            Self::Upper(UpperAirVar::T, _) => "K",
            Self::Upper(UpperAirVar::U | UpperAirVar::V, _) => "m s-1",
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::U10 => "u10".into(),
            Self::V10 => "v10".into(),
            Self::T2m => "t2m".into(),
            Self::Pr => "pr".into(),
            Self::Upper(v, l) => {
                let p = match v {
                    UpperAirVar::Z => "z",
                    UpperAirVar::Q => "q",
                    UpperAirVar::T => "t",
                    UpperAirVar::U => "u",
                    UpperAirVar::V => "v",
                };
                format!("{p}{}", l.hpa())
            }
        }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VariableId {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FieldError::UnknownVariable(s.to_string()))
    }
}

/// Which channels a model consumes and is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelMask {
    Surface,
    #[default]
    Full,
}

impl ChannelMask {
    pub fn variables(self) -> Vec<VariableId> {
        match self {
            Self::Surface => VariableId::SURFACE.to_vec(),
            Self::Full => VariableId::all().to_vec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Surface => "surface",
            Self::Full => "full",
        }
    }
}

impl FromStr for ChannelMask {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface" => Ok(Self::Surface),
            "full" => Ok(Self::Full),
            other => Err(FieldError::UnknownVariable(format!("channel mask {other}"))),
        }
    }
}
