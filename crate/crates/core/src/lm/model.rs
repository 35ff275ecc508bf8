//! Decoder-only transformer: pre-LayerNorm blocks, learned absolute positions,
//! multi-head causal attention, GELU MLP and an untied output head.
//!
//! Token id `V` (one past the last output class) is the begin-of-sequence
//! marker. It only ever appears as an input: the model reads
//! `[BOS, x_1, .., x_{T-1}]` and row `t` of the output is the distribution of
//! `x_t` given `x_{<t}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Rng, Tape, Tensor};

use super::distribution::{floor_log_row, Distribution};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Uniform mixing floor applied to emitted distributions (0 = none).
    #[serde(default)]
    pub prob_floor: f64,
    pub init_std: f64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.max_len < 1 {
            return bad("max_len must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..=0.01).contains(&self.prob_floor) {
            return bad("prob_floor must lie in [0, 0.01]");
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return bad("init_std must be a finite non-negative number");
        }
        if self.vocab_size >= u32::MAX as usize {
            return bad("vocab_size too large");
        }
        Ok(())
    }

    pub fn bos_id(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Names and shapes of every parameter in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![v + 1, d]), ("pos_emb".to_string(), vec![self.max_len, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_o"), vec![d, d]),
                (p("attn.b_o"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w_in"), vec![d, f]),
                (p("mlp.b_in"), vec![f]),
                (p("mlp.w_out"), vec![f, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.extend([("ln_f.g".to_string(), vec![d]), ("ln_f.b".to_string(), vec![d]), ("head.w".to_string(), vec![d, v])]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    config: LmConfig,
    params: Vec<(String, Tensor)>,
}

enum InitKind {
    Normal,
    One,
    Zero,
}

fn init_kind(name: &str) -> InitKind {
    if name.ends_with(".g") {
        InitKind::One
    } else if name.ends_with(".b") || name.contains(".b_") {
        InitKind::Zero
    } else {
        InitKind::Normal
    }
}

/// Parameter node ids of one model placed on a tape.
pub struct TapeParams {
    pub ids: Vec<NodeId>,
}

impl LmModel {
    /// Weight matrices and embeddings ~ N(0, init_std²); LayerNorm gains 1;
    /// all biases 0.
    pub fn init(config: LmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let mut t = Tensor::zeros(&shape);
            match init_kind(&name) {
                InitKind::One => t.data_mut().fill(1.0),
                InitKind::Zero => {}
                InitKind::Normal => {
                    for x in t.data_mut() {
                        *x = config.init_std * rng.normal();
                    }
                }
            }
            params.push((name, t));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_params(config: LmConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&params) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Format(format!("tensor {n} {:?} does not match {en} {es:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "checkpoint" });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Copy with a different evaluation floor.
    pub fn with_floor(&self, eps: f64) -> Result<Self> {
        let mut m = self.clone();
        m.config.prob_floor = eps;
        m.config.validate()?;
        Ok(m)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn place(&self, tape: &mut Tape, trainable: bool) -> Result<TapeParams> {
        let ids = self
            .params
            .iter()
            .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        Ok(TapeParams { ids })
    }

    fn check_sequence(&self, x: &[u32]) -> Result<()> {
        if x.len() > self.config.max_len {
            return Err(Error::SequenceTooLong { len: x.len(), max: self.config.max_len });
        }
        if let Some(&id) = x.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Records the forward pass for a batch of equal-length sequences and
    /// returns the `[B·T, V]` log-probability node (rows sequence-major).
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &TapeParams, batch: &[&[u32]]) -> Result<NodeId> {
        let b = batch.len();
        let t = batch.first().map(|s| s.len()).unwrap_or(0);
        if b == 0 || t == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.iter().any(|s| s.len() != t) {
            return Err(Error::InvalidArgument("batch sequences must share one length".into()));
        }
        for s in batch {
            self.check_sequence(s)?;
        }
        let cfg = &self.config;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let dh = d / h;
        let bos = cfg.bos_id();

        let mut inputs = Vec::with_capacity(b * t);
        let mut positions = Vec::with_capacity(b * t);
        for s in batch {
            inputs.push(bos);
            inputs.extend_from_slice(&s[..t - 1]);
            positions.extend(0..t as u32);
        }

        let mut it = p.ids.iter().copied();
        let mut next = || it.next().expect("parameter list matches config");
        let (tok_emb, pos_emb) = (next(), next());
        let te = tape.embedding(tok_emb, &inputs)?;
        let pe = tape.embedding(pos_emb, &positions)?;
        let mut x = tape.add(te, pe)?;

        for _ in 0..cfg.n_layers {
            let (g1, b1, w_qkv, b_qkv, w_o, b_o) = (next(), next(), next(), next(), next(), next());
            let (g2, b2, w_in, b_in, w_out, b_out) = (next(), next(), next(), next(), next(), next());

            let n1 = tape.layer_norm(x, LN_EPS)?;
            let n1 = tape.mul(n1, g1)?;
            let n1 = tape.add(n1, b1)?;
            let qkv = tape.matmul(n1, w_qkv)?;
            let qkv = tape.add(qkv, b_qkv)?;
            let heads = |tape: &mut Tape, off: usize| -> Result<NodeId> {
                let part = tape.slice(qkv, 1, off, d)?;
                let part = tape.reshape(part, &[b, t, h, dh])?;
                let part = tape.permute(part, &[0, 2, 1, 3])?;
                tape.reshape(part, &[b * h, t, dh])
            };
            let q = heads(tape, 0)?;
            let k = heads(tape, d)?;
            let v = heads(tape, 2 * d)?;
            let scores = tape.matmul_bt(q, k)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.causal_softmax(scores)?;
            let o = tape.matmul(attn, v)?;
            let o = tape.reshape(o, &[b, h, t, dh])?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let o = tape.reshape(o, &[b * t, d])?;
            let o = tape.matmul(o, w_o)?;
            let o = tape.add(o, b_o)?;
            x = tape.add(x, o)?;

            let n2 = tape.layer_norm(x, LN_EPS)?;
            let n2 = tape.mul(n2, g2)?;
            let n2 = tape.add(n2, b2)?;
            let f = tape.matmul(n2, w_in)?;
            let f = tape.add(f, b_in)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w_out)?;
            let f = tape.add(f, b_out)?;
            x = tape.add(x, f)?;
        }

        let (gf, bf, head) = (next(), next(), next());
        let nf = tape.layer_norm(x, LN_EPS)?;
        let nf = tape.mul(nf, gf)?;
        let nf = tape.add(nf, bf)?;
        let logits = tape.matmul(nf, head)?;
        tape.row_log_softmax(logits)
    }

    /// `[B·T, V]` log-probabilities for a batch, floored by `prob_floor`.
    pub fn forward_log_probs_batch(&self, batch: &[&[u32]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.place(&mut tape, false)?;
        let out = self.forward_on_tape(&mut tape, &p, batch)?;
        let mut lp = tape.value(out).clone();
        if self.config.prob_floor > 0.0 {
            let v = lp.cols();
            for row in lp.data_mut().chunks_mut(v) {
                floor_log_row(row, self.config.prob_floor);
            }
        }
        Ok(lp)
    }

    /// Runs `f(i, rows)` for every sequence, where `rows` is the flattened
    /// `[T, V]` log-probability matrix of `seqs[i]`, evaluating `chunk`
    /// sequences per forward pass.
    pub fn for_each_log_probs<F>(&self, seqs: &[&[u32]], chunk: usize, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[f64]) -> Result<()>,
    {
        let chunk = chunk.max(1);
        for (c, part) in seqs.chunks(chunk).enumerate() {
            let lp = self.forward_log_probs_batch(part)?;
            let per = lp.len() / part.len();
            for (j, rows) in lp.data().chunks(per).enumerate() {
                f(c * chunk + j, rows)?;
            }
        }
        Ok(())
    }

    /// `[T, V]` matrix of `log P(v | x_{<t})`.
    pub fn forward_log_probs(&self, x: &[u32]) -> Result<Tensor> {
        self.forward_log_probs_batch(&[x])
    }

    /// Next-token distribution after `prefix` (possibly empty).
    pub fn next_distribution(&self, prefix: &[u32]) -> Result<Distribution> {
        if prefix.len() >= self.config.max_len {
            return Err(Error::SequenceTooLong { len: prefix.len() + 1, max: self.config.max_len });
        }
        // Row t only sees inputs up to t, so any filler token works for the
        // final position.
        let mut x = prefix.to_vec();
        x.push(0);
        let lp = self.forward_log_probs(&x)?;
        Distribution::from_log_probs(lp.row(prefix.len()))
    }

    /// Greedy next token (ties to the smallest id).
    pub fn greedy_next(&self, prefix: &[u32]) -> Result<u32> {
        Ok(self.next_distribution(prefix)?.argmax() as u32)
    }

    /// `Σ_t log P(x_t | x_{<t})`.
    pub fn sequence_log_likelihood(&self, x: &[u32]) -> Result<f64> {
        let lp = self.forward_log_probs(x)?;
        Ok(x.iter().enumerate().map(|(t, &tok)| lp.row(t)[tok as usize]).sum())
    }
}
