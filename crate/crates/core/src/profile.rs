use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The two threshold presets used for mapping and localization: a strict one
/// and a permissive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Config1,
    Config2,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Config1 => "config1",
            Profile::Config2 => "config2",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "config1" | "1" => Ok(Profile::Config1),
            "config2" | "2" => Ok(Profile::Config2),
            _ => Err(format!("unknown profile `{s}` (expected config1 or config2)")),
        }
    }
}
