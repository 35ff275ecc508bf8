//! Two-stage training: distillation from a teacher for the first steps, then
//! plain next-token training. Baseline (never distill) and RKD (always
//! distill) are the same loop with a different ω schedule.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evalx::{held_out_metrics, HeldOutMetrics};
use crate::lm::{LmConfig, LmModel};
use crate::losses::{combined_loss_on_tape, teacher_targets};
use crate::numcore::{Rng, Tape, Tensor};
use crate::synth::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Salt,
    Rkd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Step,
    LinearDecay { start: usize, end: usize },
    LinearRatioDecay { start: usize, end: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub final_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { peak: 1e-3, warmup_steps: 4000, final_lr: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mode: Mode,
    pub omega: f64,
    pub rho: f64,
    pub steps: usize,
    pub kd_steps: usize,
    pub transition: Transition,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamSettings,
    pub seed: u64,
    /// Training sequences held fixed for the per-step accuracy probe.
    pub probe_size: usize,
    /// Probe every this many steps (0 disables periodic probing).
    pub probe_every: usize,
    /// Held-out evaluation every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Steps at which a copy of the student is kept; probed and evaluated too.
    pub snapshot_steps: Vec<usize>,
    /// Passes over a KD subset allowed during the distillation phase.
    pub subset_epochs: usize,
    /// Record per-step wall time (makes logs non-reproducible byte-wise).
    pub record_timing: bool,
}

impl TrainPlan {
    /// A plan with the given schedule and the remaining fields at defaults.
    pub fn new(mode: Mode, omega: f64, steps: usize, kd_steps: usize) -> Self {
        Self {
            mode,
            omega,
            rho: 1.0,
            steps,
            kd_steps,
            transition: Transition::Step,
            batch_size: 32,
            lr: LrSchedule::default(),
            adam: AdamSettings::default(),
            seed: 0,
            probe_size: 256,
            probe_every: 100,
            eval_every: 0,
            snapshot_steps: Vec::new(),
            subset_epochs: 1,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.omega) {
            return bad(format!("omega {} outside [0, 1]", self.omega));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return bad(format!("rho {} must be positive", self.rho));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be positive".into());
        }
        if self.kd_steps > self.steps {
            return bad(format!("kd_steps {} exceeds steps {}", self.kd_steps, self.steps));
        }
        match self.mode {
            Mode::Baseline if self.omega != 0.0 => return bad("baseline requires omega = 0".into()),
            Mode::Rkd if self.kd_steps != self.steps => {
                return bad("rkd distills throughout: kd_steps must equal steps".into())
            }
            _ => {}
        }
        match self.transition {
            Transition::Step => {}
            Transition::LinearDecay { start, end } | Transition::LinearRatioDecay { start, end } => {
                if !(start <= end && end <= self.steps) {
                    return bad(format!("decay window ({start}, {end}] must satisfy start <= end <= {}", self.steps));
                }
                if matches!(self.transition, Transition::LinearRatioDecay { .. }) && self.omega >= 1.0 {
                    return bad("ratio decay is undefined for omega = 1".into());
                }
            }
        }
        let lr = &self.lr;
        if !(lr.peak >= 0.0 && lr.final_lr >= 0.0 && lr.peak.is_finite() && lr.final_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if lr.warmup_steps > self.steps {
            return bad("warmup longer than training".into());
        }
        if self.adam.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive".into());
        }
        if self.subset_epochs == 0 {
            return bad("subset_epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Last step of the distillation phase (0 when there is none).
    pub fn kd_phase_end(&self) -> usize {
        match (self.mode, self.transition) {
            (Mode::Baseline, _) => 0,
            (Mode::Rkd, _) => self.steps,
            (Mode::Salt, Transition::Step) => self.kd_steps,
            (Mode::Salt, Transition::LinearDecay { end, .. } | Transition::LinearRatioDecay { end, .. }) => end,
        }
    }
}

fn check_step(plan: &TrainPlan, j: usize) -> Result<()> {
    if j == 0 || j > plan.steps {
        return Err(invalid(format!("step {j} outside [1, {}]", plan.steps)));
    }
    Ok(())
}

/// Effective distillation weight at step `j` (1-based).
pub fn omega_at_step(plan: &TrainPlan, j: usize) -> Result<f64> {
    check_step(plan, j)?;
    let w = plan.omega;
    Ok(match (plan.mode, plan.transition) {
        (Mode::Baseline, _) => 0.0,
        (Mode::Rkd, _) => w,
        (Mode::Salt, Transition::Step) => {
            if j <= plan.kd_steps {
                w
            } else {
                0.0
            }
        }
        (Mode::Salt, Transition::LinearDecay { start, end }) => {
            if j <= start {
                w
            } else if j <= end {
                w * (end - j) as f64 / (end - start) as f64
            } else {
                0.0
            }
        }
        (Mode::Salt, Transition::LinearRatioDecay { start, end }) => {
            if w >= 1.0 {
                return Err(invalid("ratio decay is undefined for omega = 1"));
            }
            if j <= start {
                w
            } else if j <= end {
                let r = w / (1.0 - w) * (end - j) as f64 / (end - start) as f64;
                r / (1.0 + r)
            } else {
                0.0
            }
        }
    })
}

/// Linear warmup to the peak, then cosine decay to the final rate at the last
/// step.
pub fn lr_at_step(plan: &TrainPlan, j: usize) -> Result<f64> {
    check_step(plan, j)?;
    let LrSchedule { peak, warmup_steps: w, final_lr } = plan.lr;
    if j <= w {
        return Ok(peak * j as f64 / w as f64);
    }
    let progress = (j - w) as f64 / (plan.steps - w) as f64;
    Ok(final_lr + (peak - final_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Self { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was non-finite; nothing changed.
    Skipped,
}

/// One Adam update with bias correction and optional global-norm clipping.
pub fn optimizer_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    lr: f64,
    settings: &AdamSettings,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid("parameter, gradient and state counts differ"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
            });
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::Skipped);
    }
    let mut scale = 1.0;
    if let Some(c) = settings.clip {
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if norm > c {
            scale = c / norm;
        }
    }
    state.t += 1;
    let (b1, b2) = (settings.beta1, settings.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi * scale;
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + settings.eps);
        }
    }
    Ok(StepOutcome::Applied)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub omega: f64,
    pub lr: f64,
    pub standard: f64,
    pub distill: f64,
    pub combined: f64,
    /// Next-token accuracy on the training batch.
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout: Option<HeldOutMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub teacher_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: usize,
    pub kind: String,
    pub detail: String,
}

/// Per-step training records plus out-of-band events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    records: Vec<StepRecord>,
    events: Vec<TrainEvent>,
}

impl MetricsLog {
    pub fn push(&mut self, rec: StepRecord) -> Result<()> {
        if self.records.last().is_some_and(|r| r.step >= rec.step) {
            return Err(invalid(format!("step {} does not follow the last record", rec.step)));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn event(&mut self, step: usize, kind: &str, detail: impl Into<String>) {
        self.events.push(TrainEvent { step, kind: kind.to_string(), detail: detail.into() });
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn events(&self) -> &[TrainEvent] {
        &self.events
    }

    pub fn at(&self, step: usize) -> Option<&StepRecord> {
        self.records.binary_search_by_key(&step, |r| r.step).ok().map(|i| &self.records[i])
    }

    pub fn last_heldout(&self) -> Option<&HeldOutMetrics> {
        self.records.iter().rev().find_map(|r| r.heldout.as_ref())
    }

    /// One JSON object per line: every step record, then every event (events
    /// carry `"event": true`).
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        for e in &self.events {
            let mut v = serde_json::to_value(e).map_err(|e| Error::Format(e.to_string()))?;
            v["event"] = serde_json::Value::Bool(true);
            serde_json::to_writer(&mut w, &v).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out)?;
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = MetricsLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
            if v.get("event").is_some() {
                log.events.push(serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))?);
            } else {
                log.push(serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))?)?;
            }
        }
        Ok(log)
    }
}

/// Seeded epoch-wise shuffling over a pool of sequence indices, wrapping into
/// a fresh permutation when a pass runs out.
#[derive(Debug, Clone)]
pub struct Batcher {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: Rng,
}

impl Batcher {
    pub fn new(pool: Vec<usize>, rng: Rng) -> Result<Self> {
        if pool.is_empty() {
            return Err(invalid("cannot batch from an empty pool"));
        }
        let mut b = Self { order: Vec::new(), pool, pos: 0, epoch: 0, rng };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.rng.fork_index("epoch", self.epoch).shuffle(&mut self.order);
        self.pos = 0;
    }

    /// Completed passes over the pool.
    pub fn epochs_completed(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LmModel,
    pub log: MetricsLog,
    pub snapshots: Vec<(usize, LmModel)>,
    /// Set when training stopped early; `model` is then the last good state.
    pub aborted_at: Option<usize>,
}

/// Inputs beyond the plan.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainInputs<'a> {
    pub teacher: Option<&'a LmModel>,
    /// Restricts distillation-phase batches to these sequences.
    pub kd_subset: Option<&'a [usize]>,
    pub heldout: Option<&'a Corpus>,
}

fn batch_accuracy(logp: &Tensor, targets: &[u32]) -> f64 {
    let v = logp.cols();
    let mut hits = 0;
    for (row, &tok) in logp.data().chunks(v).zip(targets) {
        let mut best = 0;
        for i in 1..v {
            if row[i] > row[best] {
                best = i;
            }
        }
        hits += usize::from(best == tok as usize);
    }
    hits as f64 / targets.len() as f64
}

fn probe_accuracy(model: &LmModel, corpus: &Corpus, probe: &[usize]) -> Result<f64> {
    Ok(crate::evalx::subset_metrics(model, corpus, probe)?.accuracy)
}

/// Runs the training loop.
pub fn train(plan: &TrainPlan, corpus: &Corpus, student: &LmConfig, inputs: TrainInputs<'_>) -> Result<TrainOutcome> {
    plan.validate()?;
    student.validate()?;
    if student.vocab_size != corpus.vocab_size() {
        return Err(Error::InvalidConfig("student vocabulary differs from corpus".into()));
    }
    if student.max_len < corpus.seq_len() {
        return Err(Error::InvalidConfig("corpus sequences exceed the student context".into()));
    }
    match (plan.mode, inputs.teacher) {
        (Mode::Baseline, Some(_)) => return Err(Error::InvalidConfig("baseline takes no teacher".into())),
        (Mode::Salt | Mode::Rkd, None) => return Err(Error::InvalidConfig("distillation needs a teacher".into())),
        (_, Some(t)) if t.vocab_size() != student.vocab_size => {
            return Err(Error::InvalidConfig("teacher vocabulary differs from student".into()))
        }
        (_, Some(t)) if t.config().max_len < corpus.seq_len() => {
            return Err(Error::InvalidConfig("corpus sequences exceed the teacher context".into()))
        }
        _ => {}
    }
    let kd_end = plan.kd_phase_end();
    if let Some(sub) = inputs.kd_subset {
        if plan.mode != Mode::Salt {
            return Err(Error::InvalidConfig("a KD subset only applies to salt".into()));
        }
        if let Some(&i) = sub.iter().find(|&&i| i >= corpus.len()) {
            return Err(Error::InvalidConfig(format!("KD subset index {i} out of range")));
        }
        let need = kd_end * plan.batch_size;
        if sub.len() * plan.subset_epochs < need {
            return Err(Error::InvalidConfig(format!(
                "KD subset of {} sequences covers {} draws over {} epoch(s); the KD phase needs {kd_end} x {} = {need}",
                sub.len(),
                sub.len() * plan.subset_epochs,
                plan.subset_epochs,
                plan.batch_size
            )));
        }
    }

    let mut model = LmModel::init(student.clone(), &mut Rng::derive(plan.seed, "init"))?;
    let mut full = Batcher::new((0..corpus.len()).collect(), Rng::derive(plan.seed, "batches"))?;
    let mut subset = match inputs.kd_subset {
        Some(s) => Some(Batcher::new(s.to_vec(), Rng::derive(plan.seed, "kd-subset"))?),
        None => None,
    };
    let probe: Vec<usize> = {
        let mut all: Vec<usize> = (0..corpus.len()).collect();
        Rng::derive(plan.seed, "probe").shuffle(&mut all);
        all.truncate(plan.probe_size.min(corpus.len()));
        all
    };

    let mut adam = AdamState::new(&model.params().iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut log = MetricsLog::default();
    let mut snapshots = Vec::new();

    for j in 1..=plan.steps {
        let started = Instant::now();
        let omega = omega_at_step(plan, j)?;
        let lr = lr_at_step(plan, j)?;
        let idx = match subset.as_mut() {
            Some(b) if j <= kd_end => b.next_batch(plan.batch_size),
            _ => full.next_batch(plan.batch_size),
        };
        let batch: Vec<&[u32]> = idx.iter().map(|&i| corpus.get(i)).collect();
        let targets: Vec<u32> = batch.iter().flat_map(|s| s.iter().copied()).collect();

        let mut teacher_ms = None;
        let q = if omega > 0.0 {
            let t0 = Instant::now();
            let teacher = inputs.teacher.expect("checked above");
            let q = teacher_targets(&teacher.forward_log_probs_batch(&batch)?, plan.rho)?;
            teacher_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
            Some(q)
        } else {
            None
        };

        let mut tape = Tape::new();
        let built = (|| {
            let p = model.place(&mut tape, true)?;
            let logp = model.forward_on_tape(&mut tape, &p, &batch)?;
            let nodes = combined_loss_on_tape(&mut tape, logp, &targets, q.as_ref(), omega)?;
            Ok::<_, Error>((p, logp, nodes))
        })();
        let (p, logp, nodes) = match built {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                log.event(j, "abort", format!("non-finite value in {op}"));
                return Ok(TrainOutcome { model, log, snapshots, aborted_at: Some(j) });
            }
            Err(e) => return Err(e),
        };
        let standard = tape.value(nodes.standard).item();
        let distill = nodes.distill.map(|d| tape.value(d).item()).unwrap_or(0.0);
        let combined = tape.value(nodes.combined).item();
        let train_acc = batch_accuracy(tape.value(logp), &targets);

        let grads = tape.backward(nodes.combined)?;
        let glist: Vec<&Tensor> = p.ids.iter().map(|&id| grads.get(id).expect("every param has a gradient")).collect();
        let mut plist: Vec<&mut Tensor> = model.params_mut().collect();
        if optimizer_step(&mut adam, &mut plist, &glist, lr, &plan.adam)? == StepOutcome::Skipped {
            log.event(j, "skip", "non-finite gradient");
        }
        drop(tape);

        let snap = plan.snapshot_steps.contains(&j);
        let probe_acc = if !probe.is_empty() && (snap || (plan.probe_every > 0 && j % plan.probe_every == 0)) {
            Some(probe_accuracy(&model, corpus, &probe)?)
        } else {
            None
        };
        let heldout = match inputs.heldout {
            Some(h) if snap || j == plan.steps || (plan.eval_every > 0 && j % plan.eval_every == 0) => {
                Some(held_out_metrics(&model, h)?)
            }
            _ => None,
        };
        if snap {
            snapshots.push((j, model.clone()));
        }
        log.push(StepRecord {
            step: j,
            omega,
            lr,
            standard,
            distill,
            combined,
            train_acc,
            probe_acc,
            heldout,
            wall_ms: plan.record_timing.then(|| started.elapsed().as_secs_f64() * 1e3),
            teacher_ms: if plan.record_timing { teacher_ms } else { None },
        })?;
    }
    Ok(TrainOutcome { model, log, snapshots, aborted_at: None })
}
