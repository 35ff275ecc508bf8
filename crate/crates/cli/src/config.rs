//! Experiment configuration: one TOML file, optionally patched by
//! `key.path=value` overrides from the command line.
//!
//! Every random stream is `derive_seed(seed, label)` with these labels:
//!
//! | label            | stream                                   |
//! |------------------|------------------------------------------|
//! | `source`         | Markov transition tables                 |
//! | `corpus-train`   | training sequences                       |
//! | `corpus-heldout` | held-out sequences                       |
//! | `train-slm`      | small model init, batches and probe set  |
//! | `train-llm`      | large model init, batches and probe set (shared by all roles) |
//! | `diagnose`       | diagnostics sample and Monte-Carlo draws |

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use salt_core::lm::LmConfig;
use salt_core::numcore::derive_seed;
use salt_core::select::MaskMode;
use salt_core::trainer::{AdamSettings, LrSchedule, Mode, TrainPlan, Transition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root; `SALT_OUT` or `--out` take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub source: SourceSpec,
    pub corpus: CorpusSpec,
    pub slm: ModelSpec,
    pub llm: ModelSpec,
    #[serde(default)]
    pub kd: KdSpec,
    #[serde(default)]
    pub roles: RoleOverrides,
    #[serde(default)]
    pub selection: SelectionSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Markov { order: usize, vocab_size: usize, concentration: f64 },
    /// Byte-level sequences cut from a UTF-8 or binary file.
    Text { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub prob_floor: f64,
    pub train: TrainSpec,
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_peak")]
    pub lr_peak: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "default_final")]
    pub lr_final: f64,
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default = "default_probe_every")]
    pub probe_every: usize,
    #[serde(default)]
    pub eval_every: usize,
    /// Adds per-step wall-clock fields to the metrics log.
    #[serde(default = "yes")]
    pub record_timing: bool,
}

fn default_peak() -> f64 {
    1e-3
}
fn default_final() -> f64 {
    1e-4
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_probe_size() -> usize {
    256
}
fn default_probe_every() -> usize {
    100
}
fn yes() -> bool {
    true
}

/// Distillation settings shared by the salt, salt_ds and rkd roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdSpec {
    pub omega: f64,
    pub rho: f64,
    pub kd_steps: usize,
    pub transition: Transition,
}

impl Default for KdSpec {
    fn default() -> Self {
        Self { omega: 0.667, rho: 0.25, kd_steps: 0, transition: Transition::Step }
    }
}

/// Per-role patches over [`KdSpec`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleSpec {
    pub omega: Option<f64>,
    pub rho: Option<f64>,
    pub kd_steps: Option<usize>,
    pub transition: Option<Transition>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleOverrides {
    pub baseline: RoleSpec,
    pub salt: RoleSpec,
    pub salt_ds: RoleSpec,
    pub rkd: RoleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSpec {
    pub k: usize,
    /// Defaults to exactly enough sequences for one pass of the KD phase.
    pub m: Option<usize>,
    /// Scoring checkpoint step as a fraction of the small model's run.
    pub early_fraction: f64,
    pub mask_mode: MaskMode,
    /// Passes over the selected subset allowed during the KD phase.
    pub subset_epochs: usize,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self { k: 10, m: None, early_fraction: 0.125, mask_mode: MaskMode::Exclude, subset_epochs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Role whose final checkpoint is the student.
    pub student: String,
    /// `slm` or `source` (the ground-truth table itself).
    pub teacher: String,
    pub seq_len: usize,
    /// Uniform floor mixed into the student so per-token losses stay bounded.
    pub floor: f64,
    pub omega_grid: Vec<f64>,
    pub delta: f64,
    /// Log-cardinality of the model class; defaults to 32 bits per parameter.
    pub log_card: Option<f64>,
    pub n_sequences: usize,
    pub mc_samples: usize,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            student: "salt".into(),
            teacher: "slm".into(),
            seq_len: 3,
            floor: 1e-3,
            omega_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            delta: 0.1,
            log_card: None,
            n_sequences: 500,
            mc_samples: 2000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("parsing config")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().context("config schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.train_sequences == 0 || self.corpus.heldout_sequences == 0 || self.corpus.seq_len == 0 {
            bail!("corpus sizes must be positive");
        }
        if !(0.0 < self.selection.early_fraction && self.selection.early_fraction <= 1.0) {
            bail!("selection.early_fraction must lie in (0, 1]");
        }
        if self.selection.subset_epochs == 0 {
            bail!("selection.subset_epochs must be at least 1");
        }
        if !matches!(self.diagnostics.teacher.as_str(), "slm" | "source") {
            bail!("diagnostics.teacher must be slm or source");
        }
        self.diagnostics.student.parse::<Role>()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn vocab_size(&self) -> usize {
        match &self.source {
            SourceSpec::Markov { vocab_size, .. } => *vocab_size,
            SourceSpec::Text { .. } => salt_core::synth::ByteVocab::SIZE,
        }
    }

    pub fn model_config(&self, role: Role) -> LmConfig {
        let m = if role == Role::Slm { &self.slm } else { &self.llm };
        LmConfig {
            vocab_size: self.vocab_size(),
            max_len: self.corpus.seq_len,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            prob_floor: m.prob_floor,
            init_std: m.init_std,
        }
    }

    /// Step of the small-model checkpoint used for scoring.
    pub fn early_step(&self) -> usize {
        ((self.slm.train.steps as f64 * self.selection.early_fraction).round() as usize).clamp(1, self.slm.train.steps)
    }

    /// Selected subset size.
    pub fn selection_m(&self) -> Result<usize> {
        match self.selection.m {
            Some(m) => Ok(m),
            None => {
                let plan = self.plan(Role::SaltDs)?;
                Ok((plan.kd_phase_end() * plan.batch_size).div_ceil(self.selection.subset_epochs))
            }
        }
    }

    fn role_spec(&self, role: Role) -> &RoleSpec {
        match role {
            Role::Baseline => &self.roles.baseline,
            Role::Salt => &self.roles.salt,
            Role::SaltDs => &self.roles.salt_ds,
            Role::Rkd => &self.roles.rkd,
            Role::Slm => unreachable!("the small model has no role overrides"),
        }
    }

    /// The training plan a role runs, after role-level checks.
    pub fn plan(&self, role: Role) -> Result<TrainPlan> {
        let spec = if role == Role::Slm { &self.slm.train } else { &self.llm.train };
        let steps = spec.steps;
        let (mode, omega, kd_steps, transition, rho) = match role {
            Role::Slm => (Mode::Baseline, 0.0, 0, Transition::Step, 1.0),
            Role::Baseline => {
                let o = self.role_spec(role);
                if o.omega.is_some_and(|w| w != 0.0) || o.kd_steps.is_some_and(|k| k != 0) {
                    bail!("role baseline trains without distillation; remove roles.baseline.omega / kd_steps");
                }
                (Mode::Baseline, 0.0, 0, Transition::Step, 1.0)
            }
            Role::Salt | Role::SaltDs | Role::Rkd => {
                let o = self.role_spec(role);
                let omega = o.omega.unwrap_or(self.kd.omega);
                let rho = o.rho.unwrap_or(self.kd.rho);
                let transition = o.transition.clone().unwrap_or_else(|| self.kd.transition.clone());
                let kd = o.kd_steps.unwrap_or(self.kd.kd_steps);
                if role == Role::Rkd {
                    if o.kd_steps.is_some_and(|k| k != steps) {
                        bail!("role rkd distills for all {steps} steps; roles.rkd.kd_steps must be absent or {steps}");
                    }
                    (Mode::Rkd, omega, steps, transition, rho)
                } else {
                    if kd == 0 || kd >= steps {
                        bail!("role {role} needs 0 < kd_steps < steps (got kd_steps = {kd}, steps = {steps})");
                    }
                    if omega <= 0.0 {
                        bail!("role {role} needs omega > 0");
                    }
                    (Mode::Salt, omega, kd, transition, rho)
                }
            }
        };
        let mut plan = TrainPlan::new(mode, omega, steps, kd_steps);
        plan.rho = rho;
        plan.transition = transition;
        plan.batch_size = spec.batch_size;
        plan.lr = LrSchedule { peak: spec.lr_peak, warmup_steps: spec.warmup_steps, final_lr: spec.lr_final };
        plan.adam = AdamSettings { clip: spec.clip, ..AdamSettings::default() };
        plan.seed = self.seed_for(if role == Role::Slm { "train-slm" } else { "train-llm" });
        plan.probe_size = spec.probe_size;
        plan.probe_every = spec.probe_every;
        plan.eval_every = spec.eval_every;
        plan.record_timing = spec.record_timing;
        plan.subset_epochs = self.selection.subset_epochs;
        plan.snapshot_steps = match role {
            Role::Slm => vec![self.early_step()],
            // every large-model role is snapshotted at the same step so the
            // early-phase comparison lines up
            _ if (1..=steps).contains(&self.kd.kd_steps) => vec![self.kd.kd_steps],
            _ => vec![],
        };
        plan.validate().map_err(|e| anyhow!("role {role}: {e}"))?;
        Ok(plan)
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal and falls back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("override {assignment:?} lacks '='"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| anyhow!("empty override key"))?;
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {path:?}: {k} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
