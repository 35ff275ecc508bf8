//! Training objectives: next-token cross-entropy, token-level distillation
//! against a temperature-scaled teacher, their ω-weighted combination, top-k
//! distillation and the one-hot/teacher mixture target.
//!
//! Student inputs are `[T, V]` matrices of log-probabilities (rows are
//! positions). Teachers are per-position [`Distribution`]s and are always
//! treated as constants.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::lm::{apply_floor, temperature_scale, Distribution};
use crate::numcore::{NodeId, Tape, Tensor};

/// Floor mixed into every teacher row before temperature scaling.
pub const TEACHER_FLOOR: f64 = 1e-12;

/// Large negative logit offset used to exclude tokens from a restricted
/// softmax while keeping every value finite.
const EXCLUDED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub standard: f64,
    pub distill: f64,
    pub combined: f64,
    pub per_token_standard: Vec<f64>,
    pub per_token_distill: Vec<f64>,
}

fn check_rows(student: &Tensor, rows: usize, what: &'static str) -> Result<usize> {
    if student.rank() != 2 || student.shape()[0] != rows {
        return Err(Error::ShapeMismatch { op: what, shapes: vec![student.shape().to_vec(), vec![rows]] });
    }
    Ok(student.cols())
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(invalid(format!("distillation weight {omega} outside [0, 1]")));
    }
    Ok(())
}

/// Teacher row as used by distillation: floored by [`TEACHER_FLOOR`], then
/// raised to the power `rho` and renormalized.
pub fn scaled_teacher(teacher: &Distribution, rho: f64) -> Result<Distribution> {
    temperature_scale(&apply_floor(teacher, TEACHER_FLOOR)?, rho)
}

fn per_token_ce(student: &Tensor, x: &[u32]) -> Result<Vec<f64>> {
    let v = check_rows(student, x.len(), "ce_loss")?;
    x.iter()
        .enumerate()
        .map(|(t, &tok)| {
            if tok as usize >= v {
                return Err(Error::TokenOutOfRange { id: tok, vocab: v });
            }
            Ok(-student.row(t)[tok as usize])
        })
        .collect()
}

fn per_token_kd(teacher: &[Distribution], student: &Tensor, rho: f64) -> Result<Vec<f64>> {
    let v = check_rows(student, teacher.len(), "kd_loss")?;
    teacher
        .iter()
        .enumerate()
        .map(|(t, d)| {
            if d.len() != v {
                return Err(Error::ShapeMismatch { op: "kd_loss", shapes: vec![vec![d.len()], vec![v]] });
            }
            Ok(scaled_teacher(d, rho)?.cross_entropy_logp(student.row(t)))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(1/T) Σ_t -log P(x_t | x_{<t})`.
pub fn ce_loss(student_logprobs: &Tensor, x: &[u32]) -> Result<f64> {
    Ok(mean(&per_token_ce(student_logprobs, x)?))
}

/// `(1/T) Σ_t CE(teacher_t^ρ / Z, student_t)`.
pub fn kd_loss(teacher: &[Distribution], student_logprobs: &Tensor, rho: f64) -> Result<f64> {
    Ok(mean(&per_token_kd(teacher, student_logprobs, rho)?))
}

/// `(1-ω)·ce_loss + ω·kd_loss` with the per-token terms.
pub fn combined_loss(
    x: &[u32],
    student_logprobs: &Tensor,
    teacher: &[Distribution],
    omega: f64,
    rho: f64,
) -> Result<LossBreakdown> {
    check_omega(omega)?;
    let per_token_standard = per_token_ce(student_logprobs, x)?;
    let per_token_distill = per_token_kd(teacher, student_logprobs, rho)?;
    let standard = mean(&per_token_standard);
    let distill = mean(&per_token_distill);
    Ok(LossBreakdown {
        standard,
        distill,
        combined: (1.0 - omega) * standard + omega * distill,
        per_token_standard,
        per_token_distill,
    })
}

/// `(1-ω)·onehot(x_t) + ω·teacher_scaled`.
pub fn mixture_dist(x_t: u32, teacher_scaled: &Distribution, omega: f64) -> Result<Distribution> {
    check_omega(omega)?;
    let v = teacher_scaled.len();
    if x_t as usize >= v {
        return Err(Error::TokenOutOfRange { id: x_t, vocab: v });
    }
    let mut p: Vec<f64> = teacher_scaled.probs().iter().map(|q| omega * q).collect();
    p[x_t as usize] += 1.0 - omega;
    Distribution::new(p)
}

/// Distillation restricted to the teacher's top-k tokens (ties to the smaller
/// id): both teacher and student are renormalized over that set. Averaged over
/// positions like the other losses.
pub fn topk_kd_loss(teacher: &[Distribution], student_logprobs: &Tensor, k: usize) -> Result<f64> {
    let v = check_rows(student_logprobs, teacher.len(), "topk_kd_loss")?;
    if k == 0 || k > v {
        return Err(invalid(format!("k = {k} outside [1, {v}]")));
    }
    let mut total = 0.0;
    for (t, d) in teacher.iter().enumerate() {
        let set = d.top_k(k);
        let row = student_logprobs.row(t);
        let tz: f64 = set.iter().map(|&i| d.prob(i)).sum();
        let sel: Vec<f64> = set.iter().map(|&i| row[i]).collect();
        let lz = crate::numcore::log_sum_exp(&sel);
        total -= set.iter().zip(&sel).map(|(&i, lq)| d.prob(i) / tz * (lq - lz)).sum::<f64>();
    }
    Ok(total / teacher.len() as f64)
}

/// Teacher targets for a batch: `[rows, V]` matrix of scaled teacher
/// probabilities from a `[rows, V]` matrix of teacher log-probabilities.
pub fn teacher_targets(teacher_logprobs: &Tensor, rho: f64) -> Result<Tensor> {
    let v = teacher_logprobs.cols();
    let mut out = Vec::with_capacity(teacher_logprobs.len());
    for row in teacher_logprobs.data().chunks(v) {
        out.extend(scaled_teacher(&Distribution::from_log_probs(row)?, rho)?.into_probs());
    }
    Tensor::new(teacher_logprobs.shape().to_vec(), out)
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub standard: NodeId,
    pub distill: Option<NodeId>,
    pub combined: NodeId,
}

/// Records the batch objective on `tape`: the mean over all rows of the
/// ω-combined loss. With `teacher = None` only the standard term is built and
/// it is returned as the combined node.
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    logp: NodeId,
    targets: &[u32],
    teacher: Option<&Tensor>,
    omega: f64,
) -> Result<LossNodes> {
    check_omega(omega)?;
    let picked = tape.gather_logp(logp, targets)?;
    let m = tape.reduce_mean(picked)?;
    let standard = tape.scale(m, -1.0)?;
    let Some(q) = teacher else {
        return Ok(LossNodes { standard, distill: None, combined: standard });
    };
    let v = tape.value(logp).cols() as f64;
    let qn = tape.constant(q.clone())?;
    let prod = tape.mul(logp, qn)?;
    let m = tape.reduce_mean(prod)?;
    let distill = tape.scale(m, -v)?;
    let a = tape.scale(standard, 1.0 - omega)?;
    let b = tape.scale(distill, omega)?;
    let combined = tape.add(a, b)?;
    Ok(LossNodes { standard, distill: Some(distill), combined })
}

/// Records top-k distillation of `logp` (student log-probabilities) against
/// per-row teacher distributions.
pub fn topk_kd_on_tape(tape: &mut Tape, logp: NodeId, teacher: &[Distribution], k: usize) -> Result<NodeId> {
    let lv = tape.value(logp);
    let (rows, v) = (lv.rows(), lv.cols());
    if teacher.len() != rows {
        return Err(Error::ShapeMismatch { op: "topk_kd_loss", shapes: vec![lv.shape().to_vec(), vec![teacher.len()]] });
    }
    if k == 0 || k > v {
        return Err(invalid(format!("k = {k} outside [1, {v}]")));
    }
    let mut mask = vec![EXCLUDED; rows * v];
    let mut q = vec![0.0; rows * v];
    for (r, d) in teacher.iter().enumerate() {
        let set = d.top_k(k);
        let z: f64 = set.iter().map(|&i| d.prob(i)).sum();
        for i in set {
            mask[r * v + i] = 0.0;
            q[r * v + i] = d.prob(i) / z;
        }
    }
    let mask = tape.constant(Tensor::new(vec![rows, v], mask)?)?;
    let q = tape.constant(Tensor::new(vec![rows, v], q)?)?;
    let masked = tape.add(logp, mask)?;
    let restricted = tape.row_log_softmax(masked)?;
    let prod = tape.mul(restricted, q)?;
    let m = tape.reduce_mean(prod)?;
    tape.scale(m, -(v as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logp_rows(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Tensor::new(vec![rows.len(), rows[0].len()], data).unwrap()
    }

    #[test]
    fn ce_examples() {
        let uni = logp_rows(&[&[0.25; 4], &[0.25; 4]]);
        assert!((ce_loss(&uni, &[1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let one = Tensor::new(vec![2, 2], vec![0.0, -50.0, -50.0, 0.0]).unwrap();
        assert_eq!(ce_loss(&one, &[0, 1]).unwrap(), 0.0);
        let q = logp_rows(&[&[0.25, 0.75]]);
        assert!((ce_loss(&q, &[0]).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert!(ce_loss(&q, &[0, 1]).is_err());
    }

    #[test]
    fn kd_examples() {
        let t = vec![Distribution::new(vec![0.7, 0.3]).unwrap()];
        let s = logp_rows(&[&[0.5, 0.5]]);
        assert!((kd_loss(&t, &s, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(kd_loss(&t, &s, 0.0).is_err());

        // teacher (0.8, 0.2) at rho = 0.5 is (2/3, 1/3)
        let t = vec![Distribution::new(vec![0.8, 0.2]).unwrap()];
        let s = logp_rows(&[&[0.4, 0.6]]);
        let want = -(2.0 / 3.0) * 0.4f64.ln() - (1.0 / 3.0) * 0.6f64.ln();
        assert!((kd_loss(&t, &s, 0.5).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn omega_range_enforced() {
        let s = logp_rows(&[&[0.5, 0.5]]);
        let t = vec![Distribution::uniform(2)];
        assert!(combined_loss(&[0], &s, &t, 1.5, 1.0).is_err());
        assert!(combined_loss(&[0], &s, &t, -0.1, 1.0).is_err());
    }

    #[test]
    fn mixture_endpoints() {
        let q = Distribution::new(vec![0.1, 0.6, 0.3]).unwrap();
        assert_eq!(mixture_dist(2, &q, 0.0).unwrap(), Distribution::onehot(3, 2));
        assert_eq!(mixture_dist(2, &q, 1.0).unwrap(), q);
    }

    #[test]
    fn topk_examples() {
        // teacher (0.5, 0.3, 0.2), k = 2 keeps {0, 1} with (0.625, 0.375)
        let t = vec![Distribution::new(vec![0.5, 0.3, 0.2]).unwrap()];
        let s = logp_rows(&[&[0.2, 0.2, 0.6]]);
        let want = -(0.625 * 0.5f64.ln() + 0.375 * 0.5f64.ln());
        assert!((topk_kd_loss(&t, &s, 2).unwrap() - want).abs() < 1e-12);

        let t = vec![Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap()];
        let s = logp_rows(&[&[0.25; 4]]);
        assert!((topk_kd_loss(&t, &s, 2).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(topk_kd_loss(&t, &s, 0).is_err());
        assert!(topk_kd_loss(&t, &s, 5).is_err());
    }
}
