//! Teacher-scored data selection: rank training sequences by the median of
//! the teacher's per-token losses over positions it finds plausible, and keep
//! the highest-scoring ones for the distillation phase.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lm::LmModel;
use crate::synth::Corpus;

/// Sequences per teacher forward pass while scoring.
pub const SCORE_CHUNK: usize = 64;

/// How positions outside the teacher's top-k enter the median.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masked positions are dropped before taking the median.
    #[default]
    Exclude,
    /// Masked positions contribute a loss of zero.
    Zero,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(MaskMode::Exclude),
            "zero" => Ok(MaskMode::Zero),
            _ => Err(invalid(format!("unknown mask mode {s:?} (expected exclude or zero)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub index: usize,
    /// `None` when every position was masked.
    pub score: Option<f64>,
    pub kept_tokens: usize,
    pub teacher_ckpt: String,
}

/// Median with the mean of the middle pair for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Whether `tok` is among the `k` most likely entries of `row` (ties go to the
/// smaller id).
pub fn in_top_k(row: &[f64], tok: usize, k: usize) -> bool {
    let p = row[tok];
    let ahead = row.iter().enumerate().filter(|&(i, &q)| q > p || (q == p && i < tok)).count();
    ahead < k
}

/// Scores one sequence from its `[T, V]` teacher log-probability rows.
/// Returns the score and the number of kept positions.
pub fn score_from_log_probs(rows: &[f64], x: &[u32], k: usize, mode: MaskMode) -> Result<(Option<f64>, usize)> {
    if x.is_empty() || rows.len() % x.len() != 0 {
        return Err(invalid("log-probability rows do not match the sequence"));
    }
    let v = rows.len() / x.len();
    if k == 0 || k > v {
        return Err(invalid(format!("k = {k} outside [1, {v}]")));
    }
    let mut losses = Vec::with_capacity(x.len());
    let mut kept = 0;
    for (t, &tok) in x.iter().enumerate() {
        if tok as usize >= v {
            return Err(Error::TokenOutOfRange { id: tok, vocab: v });
        }
        let row = &rows[t * v..(t + 1) * v];
        if in_top_k(row, tok as usize, k) {
            kept += 1;
            losses.push(-row[tok as usize]);
        } else if mode == MaskMode::Zero {
            losses.push(0.0);
        }
    }
    if kept == 0 {
        return Ok((None, 0));
    }
    Ok((median(&mut losses), kept))
}

pub fn score_sequence(teacher: &LmModel, x: &[u32], k: usize, mode: MaskMode) -> Result<(Option<f64>, usize)> {
    score_from_log_probs(teacher.forward_log_probs(x)?.data(), x, k, mode)
}

/// One record per sequence, in corpus order.
pub fn score_corpus(
    teacher: &LmModel,
    corpus: &Corpus,
    k: usize,
    mode: MaskMode,
    teacher_ckpt: &str,
) -> Result<Vec<SelectionRecord>> {
    if k == 0 || k > teacher.vocab_size() {
        return Err(invalid(format!("k = {k} outside [1, {}]", teacher.vocab_size())));
    }
    let seqs: Vec<&[u32]> = corpus.iter().collect();
    let mut out = Vec::with_capacity(seqs.len());
    teacher.for_each_log_probs(&seqs, SCORE_CHUNK, |i, rows| {
        let (score, kept_tokens) = score_from_log_probs(rows, seqs[i], k, mode)?;
        out.push(SelectionRecord { index: i, score, kept_tokens, teacher_ckpt: teacher_ckpt.to_string() });
        Ok(())
    })?;
    Ok(out)
}

/// Indices of the `m` highest-scoring records, best first; equal scores go to
/// the smaller index and unscored records are never chosen.
pub fn select_top_m(records: &[SelectionRecord], m: usize) -> Result<Vec<usize>> {
    let mut scored: Vec<(f64, usize)> = records.iter().filter_map(|r| r.score.map(|s| (s, r.index))).collect();
    if scored.len() < m {
        return Err(Error::NotEnoughScored { requested: m, available: scored.len() });
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored[..m].iter().map(|&(_, i)| i).collect())
}

/// Text written for an unscored record.
pub const NO_SCORE: &str = "none";

pub fn write_scores_csv<W: Write>(records: &[SelectionRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["index", "score", "kept_tokens", "teacher_ckpt"]).map_err(csv_err)?;
    for r in records {
        let score = r.score.map(|s| format!("{s:?}")).unwrap_or_else(|| NO_SCORE.to_string());
        wr.write_record([r.index.to_string(), score, r.kept_tokens.to_string(), r.teacher_ckpt.clone()])
            .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<SelectionRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?;
    if header != vec!["index", "score", "kept_tokens", "teacher_ckpt"] {
        return Err(Error::Format(format!("unexpected scores header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| rec[i].parse::<usize>().map_err(|e| Error::Format(format!("{e}: {:?}", &rec[i])));
        let score = match &rec[1] {
            NO_SCORE => None,
            s => Some(s.parse::<f64>().map_err(|e| Error::Format(format!("{e}: {s:?}")))?),
        };
        out.push(SelectionRecord { index: num(0)?, score, kept_tokens: num(2)?, teacher_ckpt: rec[3].to_string() });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(probs: &[&[f64]]) -> Vec<f64> {
        probs.iter().flat_map(|r| r.iter().map(|p: &f64| p.ln())).collect()
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [1.0, 0.2]), Some(0.6));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn masked_position_is_excluded() {
        let a = (-0.2f64).exp();
        let b = (-1.0f64).exp();
        // third token sits outside the teacher's top-2
        let r = rows(&[&[a, (1.0 - a) / 2.0, (1.0 - a) / 2.0], &[b, 0.6, 0.4 - b], &[0.5, 0.4, 0.1]]);
        let (s, kept) = score_from_log_probs(&r, &[0, 0, 2], 2, MaskMode::Exclude).unwrap();
        assert_eq!(kept, 2);
        assert!((s.unwrap() - 0.6).abs() < 1e-15);
        let (z, _) = score_from_log_probs(&r, &[0, 0, 2], 2, MaskMode::Zero).unwrap();
        assert!((z.unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn all_masked_has_no_score() {
        let r = rows(&[&[0.9, 0.1], &[0.8, 0.2]]);
        for mode in [MaskMode::Exclude, MaskMode::Zero] {
            assert_eq!(score_from_log_probs(&r, &[1, 1], 1, mode).unwrap(), (None, 0));
        }
    }

    #[test]
    fn top_k_ties_go_to_smaller_id() {
        let row = [0.25f64.ln(); 4];
        assert!(in_top_k(&row, 1, 2));
        assert!(!in_top_k(&row, 2, 2));
    }

    #[test]
    fn k_range() {
        let r = rows(&[&[0.5, 0.5]]);
        assert!(score_from_log_probs(&r, &[0], 0, MaskMode::Exclude).is_err());
        assert!(score_from_log_probs(&r, &[0], 3, MaskMode::Exclude).is_err());
    }

    fn rec(index: usize, score: Option<f64>) -> SelectionRecord {
        SelectionRecord { index, score, kept_tokens: 1, teacher_ckpt: "t".into() }
    }

    #[test]
    fn top_m_examples() {
        let r = vec![rec(0, Some(3.0)), rec(1, Some(1.0)), rec(2, Some(2.0))];
        assert_eq!(select_top_m(&r, 2).unwrap(), vec![0, 2]);
        let tie = vec![rec(0, Some(1.0)), rec(1, Some(2.0)), rec(2, Some(2.0)), rec(3, None)];
        assert_eq!(select_top_m(&tie, 1).unwrap(), vec![1]);
        assert!(matches!(select_top_m(&tie, 4), Err(Error::NotEnoughScored { requested: 4, available: 3 })));
    }

    #[test]
    fn csv_roundtrip() {
        let r = vec![rec(0, Some(0.1 + 0.2)), rec(1, None)];
        let mut buf = Vec::new();
        write_scores_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("index,score,kept_tokens,teacher_ckpt\n"));
        assert_eq!(read_scores_csv(&buf[..]).unwrap(), r);
    }
}
