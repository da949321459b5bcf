use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three NLU tasks: intent detection, slot filling, domain classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ID", alias = "id")]
    Id,
    #[serde(rename = "SF", alias = "sf")]
    Sf,
    #[serde(rename = "DC", alias = "dc")]
    Dc,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Id, Task::Sf, Task::Dc];

    pub fn name(self) -> &'static str {
        match self {
            Task::Id => "ID",
            Task::Sf => "SF",
            Task::Dc => "DC",
        }
    }

    /// Slot filling predicts one label per token; the others one per utterance.
    pub fn is_token_level(self) -> bool {
        matches!(self, Task::Sf)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(Task::Id),
            "sf" => Ok(Task::Sf),
            "dc" => Ok(Task::Dc),
            other => Err(Error::Config(format!("unknown task '{other}' (expected id|sf|dc)"))),
        }
    }
}
