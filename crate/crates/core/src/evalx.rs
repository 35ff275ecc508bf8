//! Held-out evaluation and difficulty buckets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lm::LmModel;
use crate::synth::Corpus;

/// Sequences per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub accuracy: f64,
    pub log_perplexity: f64,
    pub tokens: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn metrics_over(model: &LmModel, seqs: &[&[u32]]) -> Result<HeldOutMetrics> {
    if seqs.is_empty() {
        return Err(invalid("cannot evaluate an empty corpus"));
    }
    let v = model.vocab_size();
    let (mut correct, mut nll, mut tokens) = (0usize, 0.0, 0usize);
    model.for_each_log_probs(seqs, EVAL_CHUNK, |i, rows| {
        for (t, &tok) in seqs[i].iter().enumerate() {
            let row = &rows[t * v..(t + 1) * v];
            correct += usize::from(argmax(row) == tok as usize);
            nll -= row[tok as usize];
            tokens += 1;
        }
        Ok(())
    })?;
    Ok(HeldOutMetrics { accuracy: correct as f64 / tokens as f64, log_perplexity: nll / tokens as f64, tokens })
}

/// Greedy next-token accuracy and mean per-token cross-entropy.
pub fn held_out_metrics(model: &LmModel, corpus: &Corpus) -> Result<HeldOutMetrics> {
    let seqs: Vec<&[u32]> = corpus.iter().collect();
    metrics_over(model, &seqs)
}

/// Same as [`held_out_metrics`] restricted to the listed sequences.
pub fn subset_metrics(model: &LmModel, corpus: &Corpus, indices: &[usize]) -> Result<HeldOutMetrics> {
    let seqs: Vec<&[u32]> = indices.iter().map(|&i| corpus.get(i)).collect();
    metrics_over(model, &seqs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Easy,
    Medium,
    Hard,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Easy, Bucket::Medium, Bucket::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Easy => "easy",
            Bucket::Medium => "medium",
            Bucket::Hard => "hard",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAssignment {
    /// Indexed by sequence.
    pub bucket: Vec<Bucket>,
    /// Teacher mean per-token cross-entropy (the ranking score).
    pub score: Vec<f64>,
    /// Teacher sequence log-likelihood (the tie-break key).
    pub log_likelihood: Vec<f64>,
}

impl BucketAssignment {
    pub fn members(&self, b: Bucket) -> Vec<usize> {
        (0..self.bucket.len()).filter(|&i| self.bucket[i] == b).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,score,bucket\n");
        for (i, (s, b)) in self.score.iter().zip(&self.bucket).enumerate() {
            out.push_str(&format!("{i},{s:?},{b}\n"));
        }
        out
    }
}

/// Tertile sizes; remainders go to easier buckets first.
pub fn tertile_sizes(n: usize) -> [usize; 3] {
    let (q, r) = (n / 3, n % 3);
    [q + usize::from(r >= 1), q + usize::from(r >= 2), q]
}

/// Assigns buckets given per-sequence scores and tie-break keys.
pub fn partition_by_score(score: Vec<f64>, log_likelihood: Vec<f64>) -> Result<BucketAssignment> {
    let n = score.len();
    if n == 0 || log_likelihood.len() != n {
        return Err(invalid("bucket partition needs one score and key per sequence"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        score[a]
            .total_cmp(&score[b])
            .then(log_likelihood[b].total_cmp(&log_likelihood[a]))
            .then(a.cmp(&b))
    });
    let [e, m, _] = tertile_sizes(n);
    let mut bucket = vec![Bucket::Hard; n];
    for (rank, &i) in order.iter().enumerate() {
        bucket[i] = if rank < e {
            Bucket::Easy
        } else if rank < e + m {
            Bucket::Medium
        } else {
            Bucket::Hard
        };
    }
    Ok(BucketAssignment { bucket, score, log_likelihood })
}

/// Ranks sequences by teacher per-token cross-entropy (low is easy) and
/// splits the ranking into tertiles.
pub fn bucket_partition(teacher: &LmModel, corpus: &Corpus) -> Result<BucketAssignment> {
    let seqs: Vec<&[u32]> = corpus.iter().collect();
    let v = teacher.vocab_size();
    let mut score = vec![0.0; seqs.len()];
    let mut ll = vec![0.0; seqs.len()];
    teacher.for_each_log_probs(&seqs, EVAL_CHUNK, |i, rows| {
        let s: f64 = seqs[i].iter().enumerate().map(|(t, &tok)| rows[t * v + tok as usize]).sum();
        ll[i] = s;
        score[i] = -s / seqs[i].len() as f64;
        Ok(())
    })?;
    partition_by_score(score, ll)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub easy: Option<HeldOutMetrics>,
    pub medium: Option<HeldOutMetrics>,
    pub hard: Option<HeldOutMetrics>,
}

impl BucketMetrics {
    pub fn get(&self, b: Bucket) -> Option<&HeldOutMetrics> {
        match b {
            Bucket::Easy => self.easy.as_ref(),
            Bucket::Medium => self.medium.as_ref(),
            Bucket::Hard => self.hard.as_ref(),
        }
    }
}

/// Held-out metrics per bucket; empty buckets are `None`.
pub fn per_bucket_metrics(model: &LmModel, corpus: &Corpus, buckets: &BucketAssignment) -> Result<BucketMetrics> {
    if buckets.bucket.len() != corpus.len() {
        return Err(invalid("bucket assignment does not match corpus size"));
    }
    let one = |b| -> Result<Option<HeldOutMetrics>> {
        let idx = buckets.members(b);
        if idx.is_empty() {
            return Ok(None);
        }
        subset_metrics(model, corpus, &idx).map(Some)
    };
    Ok(BucketMetrics { easy: one(Bucket::Easy)?, medium: one(Bucket::Medium)?, hard: one(Bucket::Hard)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numcore::Rng;

    fn uniform_model(v: usize) -> LmModel {
        let cfg = LmConfig {
            vocab_size: v,
            max_len: 8,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            prob_floor: 0.0,
            init_std: 0.0,
        };
        LmModel::init(cfg, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn tertiles() {
        assert_eq!(tertile_sizes(10), [4, 3, 3]);
        assert_eq!(tertile_sizes(11), [4, 4, 3]);
        assert_eq!(tertile_sizes(3), [1, 1, 1]);
        assert_eq!(tertile_sizes(1), [1, 0, 0]);
    }

    #[test]
    fn distinct_scores_one_per_bucket() {
        let a = partition_by_score(vec![2.0, 0.5, 1.0], vec![0.0; 3]).unwrap();
        assert_eq!(a.bucket, vec![Bucket::Hard, Bucket::Easy, Bucket::Medium]);
    }

    #[test]
    fn ties_fall_back_to_likelihood_then_index() {
        let a = partition_by_score(vec![1.0; 4], vec![-3.0, -1.0, -3.0, -2.0]).unwrap();
        assert_eq!(a.bucket, vec![Bucket::Medium, Bucket::Easy, Bucket::Hard, Bucket::Easy]);
        let b = partition_by_score(vec![1.0; 5], vec![0.0; 5]).unwrap();
        assert_eq!(b.bucket, vec![Bucket::Easy, Bucket::Easy, Bucket::Medium, Bucket::Medium, Bucket::Hard]);
    }

    #[test]
    fn uniform_model_metrics() {
        let m = uniform_model(5);
        let c = Corpus::from_sequences(5, &[vec![0, 1, 2, 3], vec![4, 4, 4, 4]]).unwrap();
        let h = held_out_metrics(&m, &c).unwrap();
        assert!((h.log_perplexity - 5f64.ln()).abs() < 1e-12);
        // greedy is token 0 under ties
        assert_eq!(h.accuracy, 1.0 / 8.0);
        assert_eq!(h.tokens, 8);
    }

    #[test]
    fn csv_layout() {
        let a = partition_by_score(vec![0.25, 0.5], vec![0.0, 0.0]).unwrap();
        assert_eq!(a.to_csv(), "index,score,bucket\n0,0.25,easy\n1,0.5,medium\n");
    }
}
