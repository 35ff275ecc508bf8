//! Pipeline stages and the on-disk layout of one experiment.
//!
//! ```text
//! <root>/corpus/{train,heldout}.saltcorp, manifest.json
//! <root>/models/<role>.ckpt, <role>_step<n>.ckpt, slm_early.ckpt
//! <root>/metrics/<role>.jsonl
//! <root>/select/scores.csv, selected.csv, selected.saltcorp
//! <root>/eval/<role>.json, <role>_buckets.csv, buckets.csv, comparison.csv, curve_<role>.csv
//! <root>/diagnostics/report.json, sweep.csv
//! ```
//!
//! JSON outputs carry `config_hash` and `corpus_hash` fields; every other
//! file gets a `<file>.meta.json` sidecar with the same two hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use salt_core::diagnostics::{diagnose as run_diagnostics, sweep_csv, DiagnoseSettings, DiagnosticsReport};
use salt_core::evalx::{bucket_partition, held_out_metrics, per_bucket_metrics, Bucket, BucketMetrics, HeldOutMetrics};
use salt_core::lm::{encode_checkpoint, load_checkpoint, Floored, LmModel};
use salt_core::select::{read_scores_csv, score_corpus, select_top_m, write_scores_csv, SelectionRecord};
use salt_core::synth::{ingest_text, Corpus, GroundTruthSource};
use salt_core::trainer::{train as run_training, MetricsLog, TrainInputs};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SourceSpec};
use crate::Role;

/// Default output root when neither a flag, `SALT_OUT` nor the config names one.
pub const DEFAULT_OUT: &str = "salt-out";
pub const OUT_ENV: &str = "SALT_OUT";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_hash: String,
}

/// What `gen-data` records about the corpus it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub source: SourceSpec,
    pub vocab_size: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub seq_len: usize,
    /// Markov order; absent for text.
    pub order: Option<usize>,
    pub master_seed: u64,
    pub source_seed: u64,
    pub train_seed: u64,
    pub heldout_seed: u64,
    pub config_hash: String,
    pub corpus_hash: String,
    pub heldout_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub role: String,
    pub steps: usize,
    pub final_heldout: Option<HeldOutMetrics>,
    pub aborted_at: Option<usize>,
    pub snapshot_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub step: usize,
    pub heldout: HeldOutMetrics,
    pub buckets: BucketMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleEval {
    pub role: String,
    #[serde(rename = "final")]
    pub final_model: ModelEval,
    pub snapshot: Option<ModelEval>,
    pub config_hash: String,
    pub corpus_hash: String,
}

/// One experiment's configuration bound to an output root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    /// Suppresses progress lines on stderr.
    pub quiet: bool,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Self {
        Self { cfg, root: root.into(), quiet: false }
    }

    /// Output root precedence: explicit flag, then `SALT_OUT`, then the
    /// config's `out_dir`, then [`DEFAULT_OUT`].
    pub fn resolve(cfg: ExperimentConfig, flag: Option<PathBuf>) -> Self {
        let root = flag
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Self::new(cfg, root)
    }

    fn path(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.root.clone(), |p, s| p.join(s))
    }

    pub fn train_corpus_path(&self) -> PathBuf {
        self.path(&["corpus", "train.saltcorp"])
    }
    pub fn heldout_corpus_path(&self) -> PathBuf {
        self.path(&["corpus", "heldout.saltcorp"])
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.path(&["corpus", "manifest.json"])
    }
    pub fn model_path(&self, role: Role) -> PathBuf {
        self.path(&["models", &format!("{role}.ckpt")])
    }
    pub fn snapshot_path(&self, role: Role, step: usize) -> PathBuf {
        self.path(&["models", &format!("{role}_step{step}.ckpt")])
    }
    pub fn early_teacher_path(&self) -> PathBuf {
        self.path(&["models", "slm_early.ckpt"])
    }
    pub fn metrics_path(&self, role: Role) -> PathBuf {
        self.path(&["metrics", &format!("{role}.jsonl")])
    }
    pub fn scores_path(&self) -> PathBuf {
        self.path(&["select", "scores.csv"])
    }
    pub fn selected_path(&self) -> PathBuf {
        self.path(&["select", "selected.csv"])
    }
    pub fn selected_corpus_path(&self) -> PathBuf {
        self.path(&["select", "selected.saltcorp"])
    }
    pub fn eval_path(&self, role: Role) -> PathBuf {
        self.path(&["eval", &format!("{role}.json")])
    }
    pub fn role_buckets_path(&self, role: Role) -> PathBuf {
        self.path(&["eval", &format!("{role}_buckets.csv")])
    }
    pub fn buckets_path(&self) -> PathBuf {
        self.path(&["eval", "buckets.csv"])
    }
    pub fn comparison_path(&self) -> PathBuf {
        self.path(&["eval", "comparison.csv"])
    }
    pub fn curve_path(&self, role: Role) -> PathBuf {
        self.path(&["eval", &format!("curve_{role}.csv")])
    }
    pub fn report_path(&self) -> PathBuf {
        self.path(&["diagnostics", "report.json"])
    }
    pub fn sweep_path(&self) -> PathBuf {
        self.path(&["diagnostics", "sweep.csv"])
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn provenance(&self) -> Result<Provenance> {
        let bytes = read_required(&self.train_corpus_path(), "gen-data")?;
        Ok(Provenance { config_hash: self.cfg.hash(), corpus_hash: sha256_hex(&bytes) })
    }

    fn write_with_sidecar(&self, path: &Path, bytes: &[u8], prov: &Provenance, extra: Value) -> Result<()> {
        write_file(path, bytes)?;
        let mut meta = serde_json::to_value(prov)?;
        merge(&mut meta, json!({ "file": file_name(path), "sha256": sha256_hex(bytes) }));
        merge(&mut meta, extra);
        write_file(&sidecar(path), &pretty(&meta)?)
    }

    fn write_json_with_provenance<T: Serialize>(&self, path: &Path, value: &T, prov: &Provenance) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        merge(&mut v, serde_json::to_value(prov)?);
        write_file(path, &pretty(&v)?)
    }

    pub fn load_train(&self) -> Result<Corpus> {
        read_required(&self.train_corpus_path(), "gen-data")?;
        Ok(Corpus::load(&self.train_corpus_path())?)
    }

    pub fn load_heldout(&self) -> Result<Corpus> {
        read_required(&self.heldout_corpus_path(), "gen-data")?;
        Ok(Corpus::load(&self.heldout_corpus_path())?)
    }

    pub fn load_model(&self, role: Role) -> Result<LmModel> {
        load_model_at(&self.model_path(role), &format!("train --role {role}"))
    }

    /// The synthetic source the corpus was drawn from.
    pub fn source(&self) -> Result<GroundTruthSource> {
        match &self.cfg.source {
            SourceSpec::Markov { order, vocab_size, concentration } => {
                Ok(GroundTruthSource::markov(*order, *vocab_size, *concentration, self.cfg.seed_for("source"))?)
            }
            SourceSpec::Text { .. } => bail!("a text source has no known conditionals"),
        }
    }

    // ---- stages -----------------------------------------------------------

    /// Writes the train and held-out corpora and the manifest.
    pub fn gen_data(&self) -> Result<SourceManifest> {
        let c = &self.cfg.corpus;
        let (train, heldout, order) = match &self.cfg.source {
            SourceSpec::Markov { order, .. } => {
                let src = self.source()?;
                let train = src.sample_corpus(c.train_sequences, c.seq_len, self.cfg.seed_for("corpus-train"))?;
                let heldout = src.sample_corpus(c.heldout_sequences, c.seq_len, self.cfg.seed_for("corpus-heldout"))?;
                (train, heldout, Some(*order))
            }
            SourceSpec::Text { path } => {
                let (all, _) = ingest_text(path, c.seq_len)?;
                let need = c.train_sequences + c.heldout_sequences;
                if all.len() < need {
                    bail!("{} holds {} sequences of length {}, need {need}", path.display(), all.len(), c.seq_len);
                }
                let idx: Vec<usize> = (0..need).collect();
                let (a, b) = idx.split_at(c.train_sequences);
                (all.subset(a)?, all.subset(b)?, None)
            }
        };
        let train_bytes = train.encode();
        let heldout_bytes = heldout.encode();
        let prov = Provenance { config_hash: self.cfg.hash(), corpus_hash: sha256_hex(&train_bytes) };
        self.write_with_sidecar(&self.train_corpus_path(), &train_bytes, &prov, json!({}))?;
        self.write_with_sidecar(&self.heldout_corpus_path(), &heldout_bytes, &prov, json!({}))?;
        let manifest = SourceManifest {
            source: self.cfg.source.clone(),
            vocab_size: self.cfg.vocab_size(),
            train_sequences: train.len(),
            heldout_sequences: heldout.len(),
            seq_len: c.seq_len,
            order,
            master_seed: self.cfg.seed,
            source_seed: self.cfg.seed_for("source"),
            train_seed: self.cfg.seed_for("corpus-train"),
            heldout_seed: self.cfg.seed_for("corpus-heldout"),
            config_hash: prov.config_hash.clone(),
            corpus_hash: prov.corpus_hash.clone(),
            heldout_hash: sha256_hex(&heldout_bytes),
        };
        write_file(&self.manifest_path(), &pretty(&manifest)?)?;
        self.say(format!("gen-data: {} train / {} held-out sequences", train.len(), heldout.len()));
        Ok(manifest)
    }

    pub fn read_manifest(&self) -> Result<SourceManifest> {
        let bytes = read_required(&self.manifest_path(), "gen-data")?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Trains one role and writes its checkpoint(s) and metrics log.
    pub fn train(&self, role: Role) -> Result<TrainSummary> {
        let plan = self.cfg.plan(role)?;
        let prov = self.provenance()?;
        let corpus = self.load_train()?;
        let heldout = self.load_heldout()?;
        let teacher = if role.needs_teacher() {
            Some(load_model_at(&self.model_path(Role::Slm), "train --role slm")?)
        } else {
            None
        };
        let subset = if role == Role::SaltDs { Some(self.selected_indices(&plan)?) } else { None };
        self.say(format!("train {role}: {} steps", plan.steps));
        let out = run_training(
            &plan,
            &corpus,
            &self.cfg.model_config(role),
            TrainInputs { teacher: teacher.as_ref(), kd_subset: subset.as_deref(), heldout: Some(&heldout) },
        )?;
        if let Some(step) = out.aborted_at {
            self.say(format!("train {role}: aborted at step {step}; keeping the last good parameters"));
        }
        let extra = json!({ "role": role.as_str(), "steps": plan.steps });
        self.write_with_sidecar(&self.model_path(role), &encode_checkpoint(&out.model)?, &prov, extra.clone())?;
        for (step, model) in &out.snapshots {
            let path = if role == Role::Slm { self.early_teacher_path() } else { self.snapshot_path(role, *step) };
            let meta = json!({ "role": role.as_str(), "step": step });
            self.write_with_sidecar(&path, &encode_checkpoint(model)?, &prov, meta)?;
        }
        self.write_with_sidecar(&self.metrics_path(role), &out.log.to_jsonl()?, &prov, extra)?;
        Ok(TrainSummary {
            role: role.to_string(),
            steps: plan.steps,
            final_heldout: out.log.last_heldout().copied(),
            aborted_at: out.aborted_at,
            snapshot_steps: out.snapshots.iter().map(|(s, _)| *s).collect(),
        })
    }

    fn selected_indices(&self, plan: &salt_core::trainer::TrainPlan) -> Result<Vec<usize>> {
        let text = read_required(&self.selected_path(), "select")?;
        let idx = parse_selected(&String::from_utf8(text)?)?;
        let need = plan.kd_phase_end() * plan.batch_size;
        let epochs = plan.subset_epochs;
        if idx.len() * epochs < need {
            bail!(
                "selected subset has m = {} sequences; the KD phase draws n_KD x B = {} x {} = {need} without \
                 replacement over {epochs} epoch(s), so m must be at least {}",
                idx.len(),
                plan.kd_phase_end(),
                plan.batch_size,
                need.div_ceil(epochs)
            );
        }
        Ok(idx)
    }

    /// Scores the training corpus with the early small-model checkpoint.
    pub fn score(&self) -> Result<Vec<SelectionRecord>> {
        let prov = self.provenance()?;
        let path = self.early_teacher_path();
        let bytes = read_required(&path, "train --role slm")?;
        let teacher = salt_core::lm::decode_checkpoint(&bytes)?;
        let id = format!("slm_early@{}:{}", self.cfg.early_step(), &sha256_hex(&bytes)[..12]);
        let corpus = self.load_train()?;
        let s = &self.cfg.selection;
        let records = score_corpus(&teacher, &corpus, s.k, s.mask_mode, &id)?;
        let mut buf = Vec::new();
        write_scores_csv(&records, &mut buf)?;
        let meta = json!({ "teacher_ckpt": id, "k": s.k, "mask_mode": s.mask_mode });
        self.write_with_sidecar(&self.scores_path(), &buf, &prov, meta)?;
        let unscored = records.iter().filter(|r| r.score.is_none()).count();
        self.say(format!("score: {} sequences, {unscored} without a score", records.len()));
        Ok(records)
    }

    /// Keeps the top-m scored sequences; the subset corpus is written best first.
    pub fn select(&self) -> Result<Vec<usize>> {
        let prov = self.provenance()?;
        let bytes = read_required(&self.scores_path(), "score")?;
        let records = read_scores_csv(&bytes[..])?;
        let m = self.cfg.selection_m()?;
        let chosen = select_top_m(&records, m)?;
        let mut csv = String::from("rank,index,score\n");
        for (rank, &i) in chosen.iter().enumerate() {
            let score = records[i].score.expect("selected records are scored");
            csv.push_str(&format!("{rank},{i},{score:?}\n"));
        }
        let teacher = records.first().map(|r| r.teacher_ckpt.clone()).unwrap_or_default();
        let meta = json!({ "m": m, "teacher_ckpt": teacher });
        self.write_with_sidecar(&self.selected_path(), csv.as_bytes(), &prov, meta.clone())?;
        let subset = self.load_train()?.subset(&chosen)?;
        self.write_with_sidecar(&self.selected_corpus_path(), &subset.encode(), &prov, meta)?;
        self.say(format!("select: kept {m} of {} sequences", records.len()));
        Ok(chosen)
    }

    /// Held-out and per-bucket metrics for every role with a checkpoint.
    /// Buckets come from the final small model.
    pub fn eval(&self, roles: &[Role]) -> Result<Vec<RoleEval>> {
        let prov = self.provenance()?;
        let heldout = self.load_heldout()?;
        let teacher = self.load_model(Role::Slm)?;
        let buckets = bucket_partition(&teacher, &heldout)?;
        self.write_with_sidecar(&self.buckets_path(), buckets.to_csv().as_bytes(), &prov, json!({ "scorer": "slm" }))?;
        let mut out = Vec::new();
        for &role in roles {
            if !self.model_path(role).exists() {
                if roles.len() == 1 {
                    bail!("no checkpoint at {}; run train --role {role} first", self.model_path(role).display());
                }
                continue;
            }
            let steps = self.cfg.plan(role)?.steps;
            let eval_one = |model: &LmModel, step| -> Result<ModelEval> {
                Ok(ModelEval {
                    step,
                    heldout: held_out_metrics(model, &heldout)?,
                    buckets: per_bucket_metrics(model, &heldout, &buckets)?,
                })
            };
            let final_model = eval_one(&self.load_model(role)?, steps)?;
            let snapshot = match self.cfg.plan(role)?.snapshot_steps.first() {
                Some(&s) if role != Role::Slm && self.snapshot_path(role, s).exists() => {
                    Some(eval_one(&load_checkpoint(&self.snapshot_path(role, s))?, s)?)
                }
                _ => None,
            };
            let ev = RoleEval {
                role: role.to_string(),
                final_model,
                snapshot,
                config_hash: prov.config_hash.clone(),
                corpus_hash: prov.corpus_hash.clone(),
            };
            write_file(&self.eval_path(role), &pretty(&ev)?)?;
            self.write_with_sidecar(&self.role_buckets_path(role), bucket_table(&ev).as_bytes(), &prov, json!({}))?;
            self.say(format!(
                "eval {role}: accuracy {:.4}, log-perplexity {:.4}",
                ev.final_model.heldout.accuracy, ev.final_model.heldout.log_perplexity
            ));
            out.push(ev);
        }
        Ok(out)
    }

    /// Comparison table over evaluated roles plus one curve file per role.
    pub fn report(&self) -> Result<String> {
        let prov = self.provenance()?;
        let mut table = String::from("role,step,accuracy,log_perplexity,snapshot_step,snapshot_accuracy,corpus_hash\n");
        for role in Role::ALL {
            let path = self.eval_path(role);
            if !path.exists() {
                continue;
            }
            let ev: RoleEval = serde_json::from_slice(&fs::read(&path)?)?;
            let (ss, sa) = match &ev.snapshot {
                Some(s) => (s.step.to_string(), format!("{:?}", s.heldout.accuracy)),
                None => (String::new(), String::new()),
            };
            table.push_str(&format!(
                "{role},{},{:?},{:?},{ss},{sa},{}\n",
                ev.final_model.step, ev.final_model.heldout.accuracy, ev.final_model.heldout.log_perplexity, ev.corpus_hash
            ));
            let metrics = self.metrics_path(role);
            if metrics.exists() {
                let log = MetricsLog::from_jsonl(&fs::read_to_string(&metrics)?)?;
                self.write_with_sidecar(&self.curve_path(role), curve_csv(&log).as_bytes(), &prov, json!({}))?;
            }
        }
        self.write_with_sidecar(&self.comparison_path(), table.as_bytes(), &prov, json!({}))?;
        self.say("report: comparison table written");
        Ok(table)
    }

    /// Diagnostics for the configured student against the small model or the
    /// source itself.
    pub fn diagnose(&self) -> Result<DiagnosticsReport> {
        let prov = self.provenance()?;
        let d = &self.cfg.diagnostics;
        let source = self.source()?;
        let role: Role = d.student.parse()?;
        let student_model = self.load_model(role)?;
        if d.seq_len > student_model.config().max_len {
            bail!("diagnostics.seq_len = {} exceeds the model context {}", d.seq_len, student_model.config().max_len);
        }
        let v = source.vocab_size() as f64;
        let settings = DiagnoseSettings {
            omega: self.cfg.kd.omega,
            rho: self.cfg.kd.rho,
            seq_len: d.seq_len,
            n_sequences: d.n_sequences,
            delta: d.delta,
            log_card: d.log_card.unwrap_or(student_model.param_count() as f64 * 32.0 * std::f64::consts::LN_2),
            m_bound: Some((v / d.floor).ln()),
            omega_grid: d.omega_grid.clone(),
            mc_samples: d.mc_samples,
            seed: self.cfg.seed_for("diagnose"),
        };
        let student = Floored { inner: &student_model, eps: d.floor };
        let report = if d.teacher == "source" {
            run_diagnostics(&source, &student, &source, &settings)?
        } else {
            let teacher = self.load_model(Role::Slm)?;
            run_diagnostics(&source, &student, &teacher, &settings)?
        };
        self.write_json_with_provenance(&self.report_path(), &report, &prov)?;
        self.write_with_sidecar(&self.sweep_path(), sweep_csv(&report.sweep).as_bytes(), &prov, json!({}))?;
        self.say(format!("diagnose: exact = {}, div_term = {:.6}", report.exact, report.div_term.value));
        Ok(report)
    }

    /// Every stage in order for the listed large-model roles.
    pub fn run_all(&self, roles: &[Role]) -> Result<()> {
        self.gen_data()?;
        self.train(Role::Slm)?;
        if roles.contains(&Role::SaltDs) {
            self.score()?;
            self.select()?;
        }
        for &r in roles {
            self.train(r)?;
        }
        let mut evaluated = vec![Role::Slm];
        evaluated.extend_from_slice(roles);
        self.eval(&evaluated)?;
        self.report()?;
        if matches!(self.cfg.source, SourceSpec::Markov { .. }) && roles.iter().any(|r| r.as_str() == self.cfg.diagnostics.student) {
            self.diagnose()?;
        }
        Ok(())
    }
}

/// Parses the `rank,index,score` selection file into indices, best first.
pub fn parse_selected(text: &str) -> Result<Vec<usize>> {
    let mut lines = text.lines();
    if lines.next() != Some("rank,index,score") {
        bail!("unexpected selection header");
    }
    lines
        .map(|l| {
            let idx = l.split(',').nth(1).ok_or_else(|| anyhow!("malformed selection row {l:?}"))?;
            Ok(idx.parse()?)
        })
        .collect()
}

/// Per-bucket rows for the final model and, when present, the snapshot.
pub fn bucket_table(ev: &RoleEval) -> String {
    let mut out = String::from("model,step,bucket,accuracy,log_perplexity,tokens\n");
    let rows = std::iter::once(("final", &ev.final_model)).chain(ev.snapshot.as_ref().map(|s| ("snapshot", s)));
    for (label, m) in rows {
        for b in Bucket::ALL {
            if let Some(x) = m.buckets.get(b) {
                out.push_str(&format!("{label},{},{b},{:?},{:?},{}\n", m.step, x.accuracy, x.log_perplexity, x.tokens));
            }
        }
    }
    out
}

/// Step-indexed training curve; empty cells where a value was not measured.
pub fn curve_csv(log: &MetricsLog) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut out = String::from("step,omega,train_acc,probe_acc,standard,distill,combined,heldout_accuracy\n");
    for r in log.records() {
        out.push_str(&format!(
            "{},{:?},{:?},{},{:?},{:?},{:?},{}\n",
            r.step,
            r.omega,
            r.train_acc,
            opt(r.probe_acc),
            r.standard,
            r.distill,
            r.combined,
            opt(r.heldout.map(|h| h.accuracy)),
        ));
    }
    out
}

fn load_model_at(path: &Path, producer: &str) -> Result<LmModel> {
    let bytes = read_required(path, producer)?;
    Ok(salt_core::lm::decode_checkpoint(&bytes)?)
}

fn read_required(path: &Path, producer: &str) -> Result<Vec<u8>> {
    if !path.exists() {
        bail!("missing {}; run `{producer}` first", path.display());
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}
