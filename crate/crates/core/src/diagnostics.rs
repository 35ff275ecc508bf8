//! Exact and Monte-Carlo evaluation of the quantities that govern how a
//! distilled student generalizes: teacher/source total-variation terms,
//! martingale differences of the sequence loss, sample variances, the
//! token-level generalization bound, the surrogate risk gap and the
//! cross-entropy calibration function.
//!
//! Exact quantities come from [`ExactTree`], which enumerates every prefix of
//! length below `T` under a [`GroundTruthSource`] and stores, per prefix, the
//! conditional expectation of the standard and distillation parts of the
//! sequence loss.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lm::{temperature_scale, Distribution, NextTokenModel};
use crate::numcore::Rng;
use crate::synth::GroundTruthSource;

/// Largest number of length-`T` sequences an exact computation may enumerate.
pub const EXACT_CAP: u128 = 1 << 20;

/// A value with its Monte-Carlo standard error (`None` when exact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: Option<f64>,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_err: None }
    }

    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 { (sample_variance(xs) / n).sqrt() } else { f64::INFINITY };
        Self { value: mean, std_err: Some(se) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Half the L1 distance.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch { op: "tv_distance", shapes: vec![vec![p.len()], vec![q.len()]] });
    }
    Ok(0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Teacher distribution raised to `rho` and renormalized. Zero entries stay
/// zero.
pub fn scale_teacher(d: &Distribution, rho: f64) -> Result<Distribution> {
    if rho == 1.0 {
        return Ok(d.clone());
    }
    if d.probs().iter().all(|&p| p > 0.0) {
        return temperature_scale(d, rho);
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(invalid(format!("temperature {rho} must be positive")));
    }
    Distribution::from_weights(d.probs().iter().map(|p| p.powf(rho)).collect())
}

fn enumeration_size(v: usize, len: usize) -> u128 {
    (v as u128).checked_pow(len as u32).unwrap_or(u128::MAX)
}

fn check_cap(v: usize, len: usize) -> Result<()> {
    let n = enumeration_size(v, len);
    if n > EXACT_CAP {
        return Err(Error::EnumerationCap { requested: n, cap: EXACT_CAP });
    }
    Ok(())
}

fn check_vocab(models: &[usize], source: usize) -> Result<()> {
    if models.iter().any(|&v| v != source) {
        return Err(invalid("model and source vocabularies differ"));
    }
    Ok(())
}

fn student_nll(d: &Distribution) -> Result<Vec<f64>> {
    if d.probs().iter().any(|&p| p <= 0.0) {
        return Err(Error::NonFinite { op: "student log-loss" });
    }
    Ok(d.probs().iter().map(|p| -p.ln()).collect())
}

/// Student distribution, its log-loss for each next token, the distillation
/// cross-entropy and the scaled teacher at one prefix.
fn position_terms<M: NextTokenModel, Z: NextTokenModel>(
    student: &M,
    teacher: &Z,
    prefix: &[u32],
    rho: f64,
) -> Result<(Distribution, Vec<f64>, f64, Distribution)> {
    let s = student.next_distribution(prefix)?;
    let nll = student_nll(&s)?;
    let q = scale_teacher(&teacher.next_distribution(prefix)?, rho)?;
    let kd = q.probs().iter().zip(&nll).map(|(a, b)| a * b).sum();
    Ok((s, nll, kd, q))
}

/// `ℓ^ω(x)`: mean over positions of `(1-ω)·(-log P_student(x_t|x_<t)) +
/// ω·CE(scaled teacher, student)`.
pub fn sequence_loss<M: NextTokenModel, Z: NextTokenModel>(
    student: &M,
    teacher: &Z,
    x: &[u32],
    omega: f64,
    rho: f64,
) -> Result<f64> {
    if x.is_empty() {
        return Err(invalid("empty sequence"));
    }
    let ctx = &x[..x.len() - 1];
    let s = student.path_distributions(ctx)?;
    let q = teacher.path_distributions(ctx)?;
    let mut total = 0.0;
    for (t, &tok) in x.iter().enumerate() {
        let nll = student_nll(&s[t])?;
        let q = scale_teacher(&q[t], rho)?;
        let kd: f64 = q.probs().iter().zip(&nll).map(|(a, b)| a * b).sum();
        total += (1.0 - omega) * nll[tok as usize] + omega * kd;
    }
    Ok(total / x.len() as f64)
}

/// Exhaustive table of conditional expected losses over all prefixes.
#[derive(Debug, Clone)]
pub struct ExactTree {
    vocab: usize,
    seq_len: usize,
    /// `prob[d][n]`: source probability of prefix `n` of length `d`.
    prob: Vec<Vec<f64>>,
    /// Conditional expectation of the standard / distillation parts.
    w_std: Vec<Vec<f64>>,
    w_kd: Vec<Vec<f64>>,
    /// Per prefix of length `d < T`, flattened `[V^d, V]`.
    src: Vec<Vec<f64>>,
    nll: Vec<Vec<f64>>,
    /// Per prefix of length `d < T`.
    kd: Vec<Vec<f64>>,
    /// Expected standard loss from position `d` on, given a length-`d` prefix.
    fut_std: Vec<Vec<f64>>,
    /// Expected distillation loss from position `d + 1` on. Kept apart from
    /// the current position's term so differences between siblings are exact.
    beyond_kd: Vec<Vec<f64>>,
    tv: Vec<Vec<f64>>,
    miss: Vec<Vec<f64>>,
    entropy: Vec<Vec<f64>>,
}

impl ExactTree {
    pub fn build<M: NextTokenModel, Z: NextTokenModel>(
        source: &GroundTruthSource,
        student: &M,
        teacher: &Z,
        seq_len: usize,
        rho: f64,
    ) -> Result<Self> {
        let v = source.vocab_size();
        check_vocab(&[student.vocab_size(), teacher.vocab_size()], v)?;
        if seq_len == 0 {
            return Err(invalid("sequence length must be positive"));
        }
        check_cap(v, seq_len)?;
        let width = |d: usize| v.pow(d as u32);
        let mut tree = Self {
            vocab: v,
            seq_len,
            prob: (0..=seq_len).map(|d| vec![0.0; width(d)]).collect(),
            w_std: (0..=seq_len).map(|d| vec![0.0; width(d)]).collect(),
            w_kd: (0..=seq_len).map(|d| vec![0.0; width(d)]).collect(),
            src: (0..seq_len).map(|d| vec![0.0; width(d + 1)]).collect(),
            nll: (0..seq_len).map(|d| vec![0.0; width(d + 1)]).collect(),
            kd: (0..seq_len).map(|d| vec![0.0; width(d)]).collect(),
            fut_std: (0..=seq_len).map(|d| vec![0.0; width(d)]).collect(),
            beyond_kd: (0..seq_len).map(|d| vec![0.0; width(d)]).collect(),
            tv: (0..seq_len).map(|d| vec![0.0; width(d)]).collect(),
            miss: (0..seq_len).map(|d| vec![0.0; width(d)]).collect(),
            entropy: (0..seq_len).map(|d| vec![0.0; width(d)]).collect(),
        };
        tree.prob[0][0] = 1.0;
        let mut prefix = Vec::with_capacity(seq_len);
        tree.fill(source, student, teacher, rho, &mut prefix, 0, 0.0, 0.0)?;
        for d in (0..seq_len).rev() {
            for n in 0..width(d) {
                let row = &tree.src[d][n * v..(n + 1) * v];
                let (mut s, mut k) = (0.0, 0.0);
                for (c, p) in row.iter().enumerate() {
                    s += p * tree.w_std[d + 1][n * v + c];
                    k += p * tree.w_kd[d + 1][n * v + c];
                }
                tree.w_std[d][n] = s;
                tree.w_kd[d][n] = k;
                let (mut fs, mut bk) = (0.0, 0.0);
                for c in 0..v {
                    let (std_c, kd_c) = tree.child_terms(d, n * v + c);
                    fs += row[c] * std_c;
                    bk += row[c] * kd_c;
                }
                tree.fut_std[d][n] = fs;
                tree.beyond_kd[d][n] = bk;
            }
        }
        Ok(tree)
    }

    #[allow(clippy::too_many_arguments)]
    fn fill<M: NextTokenModel, Z: NextTokenModel>(
        &mut self,
        source: &GroundTruthSource,
        student: &M,
        teacher: &Z,
        rho: f64,
        prefix: &mut Vec<u32>,
        node: usize,
        acc_std: f64,
        acc_kd: f64,
    ) -> Result<()> {
        let d = prefix.len();
        if d == self.seq_len {
            self.w_std[d][node] = acc_std;
            self.w_kd[d][node] = acc_kd;
            return Ok(());
        }
        let v = self.vocab;
        let t = self.seq_len as f64;
        let src = source.true_conditional(prefix)?;
        let (s, nll, kd, q) = position_terms(student, teacher, prefix, rho)?;
        self.kd[d][node] = kd;
        self.tv[d][node] = tv_distance(&q, &src)?;
        self.miss[d][node] = 1.0 - src.prob(s.argmax());
        self.entropy[d][node] = src.entropy();
        for c in 0..v {
            let child = node * v + c;
            self.src[d][child] = src.prob(c);
            self.nll[d][child] = nll[c];
            self.prob[d + 1][child] = self.prob[d][node] * src.prob(c);
            prefix.push(c as u32);
            self.fill(source, student, teacher, rho, prefix, child, acc_std + nll[c] / t, acc_kd + kd / t)?;
            prefix.pop();
        }
        Ok(())
    }

    /// Expected standard and distillation loss from position `d` on once the
    /// token there is fixed to `child`'s last token.
    fn child_terms(&self, d: usize, child: usize) -> (f64, f64) {
        let t = self.seq_len as f64;
        let std_c = self.nll[d][child] / t + self.fut_std[d + 1][child];
        let kd_c = if d + 1 < self.seq_len { self.kd[d + 1][child] / t + self.beyond_kd[d + 1][child] } else { 0.0 };
        (std_c, kd_c)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn node(&self, prefix: &[u32]) -> Result<usize> {
        if prefix.len() > self.seq_len {
            return Err(Error::SequenceTooLong { len: prefix.len(), max: self.seq_len });
        }
        prefix.iter().try_fold(0usize, |acc, &tok| {
            if tok as usize >= self.vocab {
                return Err(Error::TokenOutOfRange { id: tok, vocab: self.vocab });
            }
            Ok(acc * self.vocab + tok as usize)
        })
    }

    /// `E[ℓ^ω(z) | z_{≤|prefix|} = prefix]`.
    pub fn expected_loss(&self, prefix: &[u32], omega: f64) -> Result<f64> {
        let n = self.node(prefix)?;
        let d = prefix.len();
        Ok((1.0 - omega) * self.w_std[d][n] + omega * self.w_kd[d][n])
    }

    /// Population risk `E[ℓ^ω]`; `omega = 0` gives the standard risk.
    pub fn risk(&self, omega: f64) -> f64 {
        (1.0 - omega) * self.w_std[0][0] + omega * self.w_kd[0][0]
    }

    /// Source probability of a prefix.
    pub fn prefix_prob(&self, prefix: &[u32]) -> Result<f64> {
        Ok(self.prob[prefix.len()][self.node(prefix)?])
    }

    /// Martingale difference at position `t` (1-based) for sequence `x`; only
    /// `x[..t]` is read.
    pub fn xi(&self, x: &[u32], t: usize, omega: f64) -> Result<f64> {
        if t == 0 || t > self.seq_len || x.len() < t {
            return Err(invalid(format!("position {t} invalid for a sequence of length {}", x.len())));
        }
        let (_, xi) = self.children_xi(&x[..t - 1], omega)?;
        xi.get(x[t - 1] as usize).copied().ok_or(Error::TokenOutOfRange { id: x[t - 1], vocab: self.vocab })
    }

    /// `E_{x_{<t}}[TV(scaled teacher, source)]` for `t = 1..=T`.
    pub fn expected_tv(&self) -> Vec<f64> {
        (0..self.seq_len).map(|d| self.prob[d].iter().zip(&self.tv[d]).map(|(p, tv)| p * tv).sum()).collect()
    }

    /// `ω · Σ_t E[TV]`.
    pub fn div_term(&self, omega: f64) -> f64 {
        omega * self.expected_tv().iter().sum::<f64>()
    }

    /// Greedy next-token error rate of the student, averaged over positions.
    pub fn zero_one_risk(&self) -> f64 {
        let total: f64 =
            (0..self.seq_len).map(|d| self.prob[d].iter().zip(&self.miss[d]).map(|(p, m)| p * m).sum::<f64>()).sum();
        total / self.seq_len as f64
    }

    /// Standard risk of the source itself (the smallest achievable).
    pub fn entropy_rate(&self) -> f64 {
        let total: f64 = (0..self.seq_len)
            .map(|d| self.prob[d].iter().zip(&self.entropy[d]).map(|(p, h)| p * h).sum::<f64>())
            .sum();
        total / self.seq_len as f64
    }

    /// Largest per-token student log-loss anywhere in the tree.
    pub fn max_token_loss(&self) -> f64 {
        self.nll.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// All prefixes of length `d` with positive probability, with their
    /// probabilities.
    pub fn support(&self, d: usize) -> Vec<(Vec<u32>, f64)> {
        let v = self.vocab;
        (0..self.prob[d].len())
            .filter(|&n| self.prob[d][n] > 0.0)
            .map(|n| {
                let mut p = vec![0u32; d];
                let mut r = n;
                for slot in p.iter_mut().rev() {
                    *slot = (r % v) as u32;
                    r /= v;
                }
                (p, self.prob[d][n])
            })
            .collect()
    }

    fn children_xi(&self, prefix: &[u32], omega: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = prefix.len();
        if d >= self.seq_len {
            return Err(invalid("prefix must be shorter than the sequence length"));
        }
        let n = self.node(prefix)?;
        let v = self.vocab;
        let w = (0..v)
            .map(|c| {
                let (std_c, kd_c) = self.child_terms(d, n * v + c);
                (1.0 - omega) * (self.fut_std[d][n] - std_c) + omega * (self.beyond_kd[d][n] - kd_c)
            })
            .collect();
        Ok((self.src[d][n * v..(n + 1) * v].to_vec(), w))
    }

    /// `E[ξ_t² | x_{<t} = prefix]` with `t = |prefix| + 1`.
    pub fn conditional_second_moment(&self, prefix: &[u32], omega: f64) -> Result<f64> {
        let (p, xi) = self.children_xi(prefix, omega)?;
        Ok(p.iter().zip(&xi).map(|(p, x)| p * x * x).sum())
    }

    /// `Var[(1/T) log P_student(x_T | prefix)]` under the source, for a prefix
    /// of length `T - 1`.
    pub fn last_token_variance(&self, prefix: &[u32]) -> Result<f64> {
        if prefix.len() + 1 != self.seq_len {
            return Err(invalid("last-token variance needs a prefix of length T - 1"));
        }
        let n = self.node(prefix)?;
        let v = self.vocab;
        let d = prefix.len();
        let t = self.seq_len as f64;
        let p = &self.src[d][n * v..(n + 1) * v];
        let f: Vec<f64> = self.nll[d][n * v..(n + 1) * v].iter().map(|l| -l / t).collect();
        let mean: f64 = p.iter().zip(&f).map(|(p, f)| p * f).sum();
        Ok(p.iter().zip(&f).map(|(p, f)| p * (f - mean) * (f - mean)).sum())
    }

    /// Per-position `(C_t, V_t)` estimates: the largest `|ξ_t|` and the largest
    /// conditional second moment over supported prefixes.
    pub fn xi_bounds(&self, omega: f64) -> Result<Vec<XiBound>> {
        (1..=self.seq_len)
            .map(|t| {
                let mut b = XiBound { t, c_t: 0.0, v_t: 0.0 };
                for (prefix, _) in self.support(t - 1) {
                    let (p, xi) = self.children_xi(&prefix, omega)?;
                    for (p, x) in p.iter().zip(&xi) {
                        if *p > 0.0 {
                            b.c_t = b.c_t.max(x.abs());
                        }
                    }
                    b.v_t = b.v_t.max(p.iter().zip(&xi).map(|(p, x)| p * x * x).sum());
                }
                Ok(b)
            })
            .collect()
    }

    /// `|R − R^ω|` against `(4Mω/T)·Σ_t E[TV]`.
    pub fn risk_gap(&self, omega: f64, m_bound: f64) -> RiskGap {
        let lhs = (self.risk(0.0) - self.risk(omega)).abs();
        let rhs = 4.0 * m_bound * omega / self.seq_len as f64 * self.expected_tv().iter().sum::<f64>();
        RiskGap { lhs, rhs, holds: lhs <= rhs + 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiBound {
    pub t: usize,
    pub c_t: f64,
    pub v_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskGap {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Builds the exact tree and evaluates the risk gap.
#[allow(clippy::too_many_arguments)]
pub fn risk_gap_check<M: NextTokenModel, Z: NextTokenModel>(
    student: &M,
    teacher: &Z,
    source: &GroundTruthSource,
    seq_len: usize,
    omega: f64,
    rho: f64,
    m_bound: f64,
) -> Result<RiskGap> {
    Ok(ExactTree::build(source, student, teacher, seq_len, rho)?.risk_gap(omega, m_bound))
}

/// Depth-first walk over every positive-probability prefix shorter than
/// `seq_len`.
fn walk_prefixes<F>(source: &GroundTruthSource, seq_len: usize, visit: &mut F) -> Result<()>
where
    F: FnMut(&[u32], f64, &Distribution) -> Result<()>,
{
    fn go<F>(source: &GroundTruthSource, seq_len: usize, prefix: &mut Vec<u32>, prob: f64, visit: &mut F) -> Result<()>
    where
        F: FnMut(&[u32], f64, &Distribution) -> Result<()>,
    {
        if prefix.len() == seq_len {
            return Ok(());
        }
        let row = source.true_conditional(prefix)?;
        visit(prefix, prob, &row)?;
        for (c, &p) in row.probs().iter().enumerate() {
            if p > 0.0 {
                prefix.push(c as u32);
                go(source, seq_len, prefix, prob * p, visit)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    go(source, seq_len, &mut Vec::with_capacity(seq_len), 1.0, visit)
}

/// `ω · Σ_t E_{x_{<t}}[TV(scaled teacher(·|x_{<t}), source(·|x_{<t}))]`.
pub fn div_term<Z: NextTokenModel>(
    teacher: &Z,
    source: &GroundTruthSource,
    seq_len: usize,
    omega: f64,
    rho: f64,
    mode: EvalMode,
) -> Result<Estimate> {
    check_vocab(&[teacher.vocab_size()], source.vocab_size())?;
    match mode {
        EvalMode::Exact => {
            check_cap(source.vocab_size(), seq_len)?;
            let mut total = 0.0;
            walk_prefixes(source, seq_len, &mut |prefix, prob, row| {
                total += prob * tv_distance(&scale_teacher(&teacher.next_distribution(prefix)?, rho)?, row)?;
                Ok(())
            })?;
            Ok(Estimate::exact(omega * total))
        }
        EvalMode::MonteCarlo { samples, seed } => {
            let xs = sample_prefix_paths(source, seq_len, samples, seed)?;
            let sums = xs
                .iter()
                .map(|x| {
                    let q = teacher.path_distributions(x)?;
                    let mut s = 0.0;
                    for (d, qd) in q.iter().enumerate() {
                        s += tv_distance(&scale_teacher(qd, rho)?, &source.true_conditional(&x[..d])?)?;
                    }
                    Ok(omega * s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Estimate::from_samples(&sums))
        }
    }
}

/// Samples `n` source sequences of length `seq_len - 1` (the contexts seen by
/// positions `1..=T`).
fn sample_prefix_paths(source: &GroundTruthSource, seq_len: usize, n: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if n < 2 || seq_len == 0 {
        return Err(invalid("Monte-Carlo estimates need at least two samples and T >= 1"));
    }
    let base = Rng::derive(seed, "diagnostics-mc");
    Ok((0..n).map(|i| source.sample_continuation(&[], seq_len - 1, &mut base.fork_index("path", i as u64))).collect())
}

/// Greedy next-token error rate of `student`, averaged over positions.
pub fn zero_one_risk<M: NextTokenModel>(
    student: &M,
    source: &GroundTruthSource,
    seq_len: usize,
    mode: EvalMode,
) -> Result<Estimate> {
    check_vocab(&[student.vocab_size()], source.vocab_size())?;
    match mode {
        EvalMode::Exact => {
            check_cap(source.vocab_size(), seq_len)?;
            let mut total = 0.0;
            walk_prefixes(source, seq_len, &mut |prefix, prob, row| {
                total += prob * (1.0 - row.prob(student.greedy(prefix)? as usize));
                Ok(())
            })?;
            Ok(Estimate::exact(total / seq_len as f64))
        }
        EvalMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(invalid("Monte-Carlo estimates need at least two samples"));
            }
            let base = Rng::derive(seed, "zero-one-mc");
            let rates = (0..samples)
                .map(|i| {
                    let x = source.sample_continuation(&[], seq_len, &mut base.fork_index("seq", i as u64));
                    let dists = student.path_distributions(&x[..seq_len - 1])?;
                    let misses = dists.iter().zip(&x).filter(|(d, &tok)| d.argmax() != tok as usize).count();
                    Ok(misses as f64 / seq_len as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Estimate::from_samples(&rates))
        }
    }
}

/// `E[ℓ^ω(z) | z_{≤|prefix|} = prefix]`, by enumerating completions
/// (`Exact`) or sampling them.
#[allow(clippy::too_many_arguments)]
pub fn conditional_loss<M: NextTokenModel, Z: NextTokenModel>(
    source: &GroundTruthSource,
    student: &M,
    teacher: &Z,
    seq_len: usize,
    omega: f64,
    rho: f64,
    prefix: &[u32],
    mode: EvalMode,
) -> Result<Estimate> {
    check_vocab(&[student.vocab_size(), teacher.vocab_size()], source.vocab_size())?;
    if prefix.len() > seq_len {
        return Err(Error::SequenceTooLong { len: prefix.len(), max: seq_len });
    }
    let rest = seq_len - prefix.len();
    match mode {
        EvalMode::Exact => {
            check_cap(source.vocab_size(), rest)?;
            let v = source.vocab_size();
            let mut x = prefix.to_vec();
            x.resize(seq_len, 0);
            let mut total = 0.0;
            for code in 0..v.pow(rest as u32) {
                let mut r = code;
                for slot in x[prefix.len()..].iter_mut().rev() {
                    *slot = (r % v) as u32;
                    r /= v;
                }
                let p: f64 = (prefix.len()..seq_len).map(|t| source.prob(&x[..t], x[t])).product();
                if p > 0.0 {
                    total += p * sequence_loss(student, teacher, &x, omega, rho)?;
                }
            }
            Ok(Estimate::exact(total))
        }
        EvalMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(invalid("Monte-Carlo estimates need at least two samples"));
            }
            let base = Rng::derive(seed, "conditional-loss-mc");
            let losses = (0..samples)
                .map(|i| {
                    let x = source.sample_continuation(prefix, rest, &mut base.fork_index("completion", i as u64));
                    sequence_loss(student, teacher, &x, omega, rho)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Estimate::from_samples(&losses))
        }
    }
}

/// Martingale difference `ξ_t(x)`: expected loss given `x_{<t}` minus
/// expected loss given `x_{≤t}`.
#[allow(clippy::too_many_arguments)]
pub fn xi_t<M: NextTokenModel, Z: NextTokenModel>(
    source: &GroundTruthSource,
    student: &M,
    teacher: &Z,
    seq_len: usize,
    omega: f64,
    rho: f64,
    x: &[u32],
    t: usize,
    mode: EvalMode,
) -> Result<Estimate> {
    if t == 0 || t > seq_len || x.len() < t {
        return Err(invalid(format!("position {t} invalid for a sequence of length {}", x.len())));
    }
    let (mode_a, mode_b) = match mode {
        EvalMode::Exact => (mode, mode),
        EvalMode::MonteCarlo { samples, seed } => (
            EvalMode::MonteCarlo { samples, seed: crate::numcore::derive_seed(seed, "before") },
            EvalMode::MonteCarlo { samples, seed: crate::numcore::derive_seed(seed, "after") },
        ),
    };
    let a = conditional_loss(source, student, teacher, seq_len, omega, rho, &x[..t - 1], mode_a)?;
    let b = conditional_loss(source, student, teacher, seq_len, omega, rho, &x[..t], mode_b)?;
    let se = match (a.std_err, b.std_err) {
        (Some(x), Some(y)) => Some((x * x + y * y).sqrt()),
        _ => None,
    };
    Ok(Estimate { value: a.value - b.value, std_err: se })
}

/// Closed form of the last martingale difference:
/// `(1-ω)·(E_v[-(1/T) log P(v|x_{<T})] + (1/T) log P(x_T|x_{<T}))`.
pub fn xi_last_closed_form<M: NextTokenModel>(
    source: &GroundTruthSource,
    student: &M,
    x: &[u32],
    omega: f64,
) -> Result<f64> {
    let t = x.len();
    if t == 0 {
        return Err(invalid("empty sequence"));
    }
    let ctx = &x[..t - 1];
    let nll = student_nll(&student.next_distribution(ctx)?)?;
    let src = source.true_conditional(ctx)?;
    let expected: f64 = src.probs().iter().zip(&nll).map(|(p, l)| p * l).sum();
    Ok((1.0 - omega) * (expected - nll[x[t - 1] as usize]) / t as f64)
}

/// Unbiased sample variance by the one-pass mean/M2 recurrence.
fn sample_variance(values: &[f64]) -> f64 {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    m2 / (values.len() - 1) as f64
}

/// Sample variance `V_N`; equals the mean squared pairwise difference over
/// two.
pub fn sample_variance_vn(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(invalid(format!("sample variance needs N >= 2, got {}", values.len())));
    }
    Ok(sample_variance(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Inputs {
    /// Empirical distillation risk `R_N^ω`.
    pub empirical_risk: f64,
    pub v_t: Vec<f64>,
    pub c: f64,
    /// Per-token log-loss bound.
    pub m: f64,
    pub omega: f64,
    /// `Σ_t E[TV]` (without the ω factor).
    pub expected_tv_sum: f64,
    pub seq_len: usize,
    pub n: usize,
    /// Natural log of the hypothesis-class size.
    pub log_card: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Bound {
    pub value: f64,
    pub empirical_risk: f64,
    pub variance_term: f64,
    pub range_term: f64,
    pub divergence_term: f64,
}

/// `R_N^ω + sqrt(2·ΣV_t/N·log(|Θ|/δ)) + 2C/(3N)·log(|Θ|/δ) + (4Mω/T)·ΣE[TV]`.
pub fn theorem2_bound(inp: &Theorem2Inputs) -> Result<Theorem2Bound> {
    if !(inp.delta > 0.0 && inp.delta < 1.0) {
        return Err(invalid(format!("delta {} outside (0, 1)", inp.delta)));
    }
    if inp.n == 0 || inp.seq_len == 0 {
        return Err(invalid("N and T must be positive"));
    }
    let finite = [inp.empirical_risk, inp.c, inp.m, inp.omega, inp.expected_tv_sum, inp.log_card]
        .iter()
        .chain(&inp.v_t)
        .all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite { op: "theorem2_bound" });
    }
    let log_term = inp.log_card - inp.delta.ln();
    let n = inp.n as f64;
    let variance_term = (2.0 * inp.v_t.iter().sum::<f64>() / n * log_term).sqrt();
    let range_term = 2.0 * inp.c / (3.0 * n) * log_term;
    let divergence_term = 4.0 * inp.m * inp.omega / inp.seq_len as f64 * inp.expected_tv_sum;
    Ok(Theorem2Bound {
        value: inp.empirical_risk + variance_term + range_term + divergence_term,
        empirical_risk: inp.empirical_risk,
        variance_term,
        range_term,
        divergence_term,
    })
}

/// Calibration function of the cross-entropy loss,
/// `½((1-ε)log(1-ε) + (1+ε)log(1+ε))`, with `g(1) = log 2`.
pub fn calibration_g(eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(invalid(format!("calibration argument {eps} outside [0, 1]")));
    }
    let xlogx = |x: f64| if x == 0.0 { 0.0 } else { x * x.ln() };
    Ok(0.5 * (xlogx(1.0 - eps) + xlogx(1.0 + eps)))
}

/// Inverse of [`calibration_g`] on `[0, log 2)`, by bisection.
pub fn calibration_g_inv(y: f64) -> Result<f64> {
    if !(0.0..LN_2).contains(&y) {
        return Err(invalid(format!("calibration value {y} outside [0, log 2)")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if calibration_g(mid)? < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub omega: f64,
    /// Average `E[ξ_T² | x_{<T}]`.
    pub second_moment: f64,
    /// Average `(1-ω)²·Var[(1/T) log P(x_T|·)]`.
    pub reference: f64,
    /// Average `(1-ω)·Var[...]`, the first-power variant, for comparison.
    pub first_power_reference: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    pub non_increasing: bool,
}

/// Conditional second moment of the last martingale difference across a grid
/// of ω, next to its closed-form reference. `prefixes = None` averages over
/// every supported prefix weighted by its probability; otherwise a plain mean
/// over the given prefixes.
pub fn variance_reduction_check(
    tree: &ExactTree,
    omega_grid: &[f64],
    prefixes: Option<&[Vec<u32>]>,
) -> Result<VarianceReport> {
    let weighted: Vec<(Vec<u32>, f64)> = match prefixes {
        None => tree.support(tree.seq_len() - 1),
        Some(ps) => {
            if ps.is_empty() {
                return Err(invalid("no prefixes given"));
            }
            ps.iter().map(|p| (p.clone(), 1.0 / ps.len() as f64)).collect()
        }
    };
    let mut rows = Vec::with_capacity(omega_grid.len());
    for &omega in omega_grid {
        if !(0.0..=1.0).contains(&omega) {
            return Err(invalid(format!("omega {omega} outside [0, 1]")));
        }
        let (mut sm, mut var) = (0.0, 0.0);
        for (p, w) in &weighted {
            sm += w * tree.conditional_second_moment(p, omega)?;
            var += w * tree.last_token_variance(p)?;
        }
        let reference = (1.0 - omega).powi(2) * var;
        rows.push(VarianceRow {
            omega,
            second_moment: sm,
            reference,
            first_power_reference: (1.0 - omega) * var,
            agrees: (sm - reference).abs() <= 1e-9 * reference.max(1e-300).max(1.0),
        });
    }
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    let non_increasing = sorted.windows(2).all(|w| w[1].second_moment <= w[0].second_moment + 1e-15);
    Ok(VarianceReport { rows, non_increasing })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSettings {
    pub omega: f64,
    pub rho: f64,
    pub seq_len: usize,
    /// Sequences in the empirical sample behind `R_N^ω` and `V_N`.
    pub n_sequences: usize,
    pub delta: f64,
    pub log_card: f64,
    /// Per-token loss bound; defaults to the largest student log-loss seen.
    pub m_bound: Option<f64>,
    pub omega_grid: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for DiagnoseSettings {
    fn default() -> Self {
        Self {
            omega: 0.667,
            rho: 1.0,
            seq_len: 3,
            n_sequences: 500,
            delta: 0.1,
            log_card: 0.0,
            m_bound: None,
            omega_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            mc_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    pub div_term: f64,
    pub risk_gap_lhs: Option<f64>,
    pub risk_gap_rhs: Option<f64>,
    pub second_moment: Option<f64>,
    pub reference: Option<f64>,
    /// `second_moment / second_moment(ω = 0)`.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicTerm {
    pub name: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// False when enumeration exceeded the cap and Monte-Carlo substitutes
    /// were used; exact-only fields are then absent.
    pub exact: bool,
    pub omega: f64,
    pub rho: f64,
    pub seq_len: usize,
    pub div_term: Estimate,
    pub expected_tv: Option<Vec<f64>>,
    pub empirical_risk: f64,
    pub v_n: f64,
    pub n_sequences: usize,
    pub m_bound: f64,
    pub per_t: Option<Vec<XiBound>>,
    pub theorem2_bound: Option<Theorem2Bound>,
    pub risk_gap: Option<RiskGap>,
    pub variance_identity: Option<VarianceReport>,
    pub zero_one_risk: Estimate,
    /// Calibration bound on the excess greedy error over the source's own
    /// predictor; `None` when the surrogate excess is too large to invert.
    pub excess01_bound: Option<f64>,
    pub sweep: Vec<SweepRow>,
    pub symbolic: Vec<SymbolicTerm>,
    pub notes: Vec<String>,
}

/// Top-level keys of a serialized [`DiagnosticsReport`].
pub const REPORT_KEYS: [&str; 19] = [
    "exact",
    "omega",
    "rho",
    "seq_len",
    "div_term",
    "expected_tv",
    "empirical_risk",
    "v_n",
    "n_sequences",
    "m_bound",
    "per_t",
    "theorem2_bound",
    "risk_gap",
    "variance_identity",
    "zero_one_risk",
    "excess01_bound",
    "sweep",
    "symbolic",
    "notes",
];

fn symbolic_terms() -> Vec<SymbolicTerm> {
    vec![
        SymbolicTerm {
            name: "growth_function".into(),
            note: "covering term of the sequence-level bound for infinite classes; not computed".into(),
        },
        SymbolicTerm { name: "c1".into(), note: "universal constant; not computed".into() },
        SymbolicTerm { name: "c2".into(), note: "universal constant; not computed".into() },
    ]
}

/// Full report for one student/teacher pair against a synthetic source.
pub fn diagnose<M: NextTokenModel, Z: NextTokenModel>(
    source: &GroundTruthSource,
    student: &M,
    teacher: &Z,
    s: &DiagnoseSettings,
) -> Result<DiagnosticsReport> {
    let v = source.vocab_size();
    let t = s.seq_len;
    let exact = enumeration_size(v, t) <= EXACT_CAP;
    let sample = source.sample_corpus(s.n_sequences.max(2), t, crate::numcore::derive_seed(s.seed, "diagnose-sample"))?;
    let mut notes = Vec::new();
    let symbolic = symbolic_terms();
    let mc = EvalMode::MonteCarlo { samples: s.mc_samples, seed: s.seed };

    if !exact {
        notes.push(format!("V^T = {v}^{t} exceeds the enumeration cap; Monte-Carlo substitutes used"));
        let losses =
            sample.iter().map(|x| sequence_loss(student, teacher, x, s.omega, s.rho)).collect::<Result<Vec<_>>>()?;
        let sweep = s
            .omega_grid
            .iter()
            .map(|&w| {
                Ok(SweepRow {
                    omega: w,
                    div_term: div_term(teacher, source, t, w, s.rho, mc)?.value,
                    risk_gap_lhs: None,
                    risk_gap_rhs: None,
                    second_moment: None,
                    reference: None,
                    ratio: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(DiagnosticsReport {
            exact,
            omega: s.omega,
            rho: s.rho,
            seq_len: t,
            div_term: div_term(teacher, source, t, s.omega, s.rho, mc)?,
            expected_tv: None,
            empirical_risk: losses.iter().sum::<f64>() / losses.len() as f64,
            v_n: sample_variance_vn(&losses)?,
            n_sequences: losses.len(),
            m_bound: s.m_bound.unwrap_or(f64::NAN),
            per_t: None,
            theorem2_bound: None,
            risk_gap: None,
            variance_identity: None,
            zero_one_risk: zero_one_risk(student, source, t, mc)?,
            excess01_bound: None,
            sweep,
            symbolic,
            notes,
        });
    }

    let tree = ExactTree::build(source, student, teacher, t, s.rho)?;
    let m_bound = s.m_bound.unwrap_or_else(|| tree.max_token_loss());
    let losses = sample.iter().map(|x| tree.expected_loss(x, s.omega)).collect::<Result<Vec<_>>>()?;
    let empirical_risk = losses.iter().sum::<f64>() / losses.len() as f64;
    let per_t = tree.xi_bounds(s.omega)?;
    let tv = tree.expected_tv();
    let bound = theorem2_bound(&Theorem2Inputs {
        empirical_risk,
        v_t: per_t.iter().map(|b| b.v_t).collect(),
        c: per_t.iter().map(|b| b.c_t).fold(0.0, f64::max),
        m: m_bound,
        omega: s.omega,
        expected_tv_sum: tv.iter().sum(),
        seq_len: t,
        n: losses.len(),
        log_card: s.log_card,
        delta: s.delta,
    })?;
    let variance = variance_reduction_check(&tree, &s.omega_grid, None)?;
    let base = variance_reduction_check(&tree, &[0.0], None)?.rows[0].second_moment;
    let sweep = s
        .omega_grid
        .iter()
        .zip(&variance.rows)
        .map(|(&w, row)| {
            let gap = tree.risk_gap(w, m_bound);
            SweepRow {
                omega: w,
                div_term: tree.div_term(w),
                risk_gap_lhs: Some(gap.lhs),
                risk_gap_rhs: Some(gap.rhs),
                second_moment: Some(row.second_moment),
                reference: Some(row.reference),
                ratio: (base > 0.0).then(|| row.second_moment / base),
            }
        })
        .collect();
    let excess = tree.risk(0.0) - tree.entropy_rate();
    let excess01_bound = calibration_g_inv(excess.max(0.0)).ok();
    notes.push(
        "the last martingale difference has conditional second moment (1-omega)^2 times the last-token \
         log-loss variance; first_power_reference shows the (1-omega) variant, which is also non-increasing"
            .into(),
    );
    notes.push("excess01_bound compares against the source's own predictor, not the best model in a class".into());
    Ok(DiagnosticsReport {
        exact,
        omega: s.omega,
        rho: s.rho,
        seq_len: t,
        div_term: Estimate::exact(tree.div_term(s.omega)),
        expected_tv: Some(tv),
        empirical_risk,
        v_n: sample_variance_vn(&losses)?,
        n_sequences: losses.len(),
        m_bound,
        per_t: Some(per_t),
        theorem2_bound: Some(bound),
        risk_gap: Some(tree.risk_gap(s.omega, m_bound)),
        variance_identity: Some(variance),
        zero_one_risk: Estimate::exact(tree.zero_one_risk()),
        excess01_bound,
        sweep,
        symbolic,
        notes,
    })
}

/// ω-sweep table as CSV.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut out = String::from("omega,div_term,risk_gap_lhs,risk_gap_rhs,second_moment,reference,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{:?},{},{},{},{},{}\n",
            r.omega,
            r.div_term,
            opt(r.risk_gap_lhs),
            opt(r.risk_gap_rhs),
            opt(r.second_moment),
            opt(r.reference),
            opt(r.ratio)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_examples() {
        let p = Distribution::new(vec![0.7, 0.3]).unwrap();
        let q = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!((tv_distance(&p, &q).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_distance(&Distribution::onehot(3, 0), &Distribution::onehot(3, 2)).unwrap(), 1.0);
    }

    #[test]
    fn vn_examples() {
        assert_eq!(sample_variance_vn(&[3.0; 5]).unwrap(), 0.0);
        assert_eq!(sample_variance_vn(&[0.0, 2.0]).unwrap(), 2.0);
        assert!(sample_variance_vn(&[1.0]).is_err());
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibration_g(0.0).unwrap(), 0.0);
        assert!((calibration_g(1.0).unwrap() - LN_2).abs() < 1e-15);
        let y = calibration_g(0.3).unwrap();
        assert!((calibration_g_inv(y).unwrap() - 0.3).abs() < 1e-8);
        assert!(calibration_g_inv(LN_2).is_err());
        assert!(calibration_g_inv(-0.1).is_err());
    }

    #[test]
    fn bound_degenerate_cases() {
        let base = Theorem2Inputs {
            empirical_risk: 1.5,
            v_t: vec![0.0; 3],
            c: 0.0,
            m: 4.0,
            omega: 0.0,
            expected_tv_sum: 0.7,
            seq_len: 3,
            n: 100,
            log_card: 2.0,
            delta: 0.1,
        };
        let b = theorem2_bound(&base).unwrap();
        assert_eq!(b.divergence_term, 0.0);
        assert_eq!(b.value, 1.5);
        assert!(theorem2_bound(&Theorem2Inputs { delta: 1.0, ..base }).is_err());
    }

    #[test]
    fn cap_is_enforced() {
        let src = GroundTruthSource::markov(1, 32, 1.0, 0).unwrap();
        let r = ExactTree::build(&src, &src, &src, 5, 1.0);
        assert!(matches!(r, Err(Error::EnumerationCap { .. })));
    }

    #[test]
    fn uniform_source_zero_one() {
        let src = GroundTruthSource::markov(0, 4, 1.0, 0).unwrap();
        let uni = GroundTruthSource::from_tables(0, 4, vec![vec![0.25; 4]]).unwrap();
        let r = zero_one_risk(&src, &uni, 3, EvalMode::Exact).unwrap();
        assert!((r.value - 0.75).abs() < 1e-15);
    }
}
