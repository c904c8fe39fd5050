use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which kind of explanation a generator produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationMode {
    /// Change irrelevant features as much as possible, keep the decision.
    Alterfactual,
    /// Change as little as possible, flip the decision.
    Counterfactual,
}

impl ExplanationMode {
    /// Target class for an input the classifier assigned to `decision`.
    pub fn target_class(self, decision: u8) -> u8 {
        match self {
            ExplanationMode::Alterfactual => decision,
            ExplanationMode::Counterfactual => 1 - decision,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExplanationMode::Alterfactual => "alterfactual",
            ExplanationMode::Counterfactual => "counterfactual",
        }
    }
}

impl fmt::Display for ExplanationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplanationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "alterfactual" => Ok(ExplanationMode::Alterfactual),
            "counterfactual" => Ok(ExplanationMode::Counterfactual),
            other => Err(Error::Validation(format!("unknown explanation mode `{other}`"))),
        }
    }
}
