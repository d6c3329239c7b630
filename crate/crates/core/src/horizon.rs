use serde::{Deserialize, Serialize};

/// Prediction horizon in days after registration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u32", try_from = "u32")]
pub enum Horizon {
    D3,
    D7,
    D30,
}

impl Horizon {
    pub const ALL: [Horizon; 3] = [Horizon::D3, Horizon::D7, Horizon::D30];

    pub fn days(self) -> u32 {
        match self {
            Horizon::D3 => 3,
            Horizon::D7 => 7,
            Horizon::D30 => 30,
        }
    }

    /// Task index in the (3, 7, 30) ordering.
    pub fn index(self) -> usize {
        match self {
            Horizon::D3 => 0,
            Horizon::D7 => 1,
            Horizon::D30 => 2,
        }
    }
}

impl From<Horizon> for u32 {
    fn from(h: Horizon) -> u32 {
        h.days()
    }
}

impl TryFrom<u32> for Horizon {
    type Error = String;

    fn try_from(days: u32) -> Result<Self, String> {
        match days {
            3 => Ok(Horizon::D3),
            7 => Ok(Horizon::D7),
            30 => Ok(Horizon::D30),
            other => Err(format!("unsupported horizon {other}")),
        }
    }
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.days())
    }
}
