//! Experiment orchestration for the SALT laboratory: configuration, artifact
//! layout and the stages behind the `salt` binary.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Error};

pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use pipeline::Workspace;

/// Which model a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// The small teacher model.
    Slm,
    Baseline,
    Salt,
    /// SALT with the distillation phase restricted to selected sequences.
    SaltDs,
    /// Distillation for the whole run.
    Rkd,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Slm, Role::Baseline, Role::Salt, Role::SaltDs, Role::Rkd];
    pub const LARGE: [Role; 4] = [Role::Baseline, Role::Salt, Role::SaltDs, Role::Rkd];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Slm => "slm",
            Role::Baseline => "baseline",
            Role::Salt => "salt",
            Role::SaltDs => "salt_ds",
            Role::Rkd => "rkd",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Role::Salt | Role::SaltDs | Role::Rkd)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match Role::ALL.iter().find(|r| r.as_str() == s) {
            Some(&r) => Ok(r),
            None => bail!("unknown role {s:?} (expected slm, baseline, salt, salt_ds or rkd)"),
        }
    }
}
