//! The transformer forward pass and its gradients checked against code that
//! shares nothing with the tape: plain loops over `Vec<f64>` and central
//! finite differences.

use salt_core::losses::{combined_loss_on_tape, teacher_targets};
use salt_core::lm::{LmConfig, LmModel};
use salt_core::numcore::{grad_check, NodeId, Rng, Tape, Tensor};

fn cfg(v: usize, t: usize, d: usize, layers: usize, heads: usize, ff: usize) -> LmConfig {
    LmConfig {
        vocab_size: v,
        max_len: t,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff: ff,
        prob_floor: 0.0,
        init_std: 0.3,
    }
}

/// Row-major matrix helpers for the reference forward.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(r, bb)| *r += bb);
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let s = (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mu) / s * g[i] + b[i]));
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Independent single-sequence forward returning `[T][V]` log-probabilities.
fn reference_forward(model: &LmModel, x: &[u32]) -> Vec<Vec<f64>> {
    let c = model.config();
    let (t, d, v, h) = (x.len(), c.d_model, c.vocab_size, c.n_heads);
    let dh = d / h;
    let p = |n: &str| model.param(n).unwrap().data().to_vec();
    let (tok, pos) = (p("tok_emb"), p("pos_emb"));
    let mut inputs = vec![v as u32];
    inputs.extend_from_slice(&x[..t - 1]);
    let mut hcur: Vec<f64> = Vec::with_capacity(t * d);
    for (i, &id) in inputs.iter().enumerate() {
        for j in 0..d {
            hcur.push(tok[id as usize * d + j] + pos[i * d + j]);
        }
    }
    for l in 0..c.n_layers {
        let q = |s: &str| p(&format!("h{l}.{s}"));
        let n1 = layer_norm(&hcur, &q("ln1.g"), &q("ln1.b"));
        let mut qkv = matmul(&n1, &q("attn.w_qkv"), t, d, 3 * d);
        add_bias(&mut qkv, &q("attn.b_qkv"));
        let mut att = vec![0.0; t * d];
        for head in 0..h {
            for i in 0..t {
                let qi = |k: usize| qkv[i * 3 * d + head * dh + k];
                let mut w: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|k| qi(k) * qkv[j * 3 * d + d + head * dh + k]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                w.iter_mut().for_each(|s| *s = (*s - mx).exp());
                let z: f64 = w.iter().sum();
                for k in 0..dh {
                    att[i * d + head * dh + k] =
                        (0..=i).map(|j| w[j] / z * qkv[j * 3 * d + 2 * d + head * dh + k]).sum();
                }
            }
        }
        let mut o = matmul(&att, &q("attn.w_o"), t, d, d);
        add_bias(&mut o, &q("attn.b_o"));
        hcur.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let n2 = layer_norm(&hcur, &q("ln2.g"), &q("ln2.b"));
        let f = c.d_ff;
        let mut a = matmul(&n2, &q("mlp.w_in"), t, d, f);
        add_bias(&mut a, &q("mlp.b_in"));
        a.iter_mut().for_each(|z| *z = gelu(*z));
        let mut m = matmul(&a, &q("mlp.w_out"), t, f, d);
        add_bias(&mut m, &q("mlp.b_out"));
        hcur.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
    }
    let nf = layer_norm(&hcur, &p("ln_f.g"), &p("ln_f.b"));
    let logits = matmul(&nf, &p("head.w"), t, d, v);
    logits
        .chunks(v)
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            row.iter().map(|z| z - lz).collect()
        })
        .collect()
}

#[test]
fn forward_matches_straight_line_reference() {
    for seed in 0..3 {
        let model = LmModel::init(cfg(7, 5, 8, 2, 2, 12), &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::new(100 + seed);
        let x: Vec<u32> = (0..5).map(|_| rng.below(7) as u32).collect();
        let got = model.forward_log_probs(&x).unwrap();
        let want = reference_forward(&model, &x);
        for (t, row) in want.iter().enumerate() {
            for (a, b) in got.row(t).iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "seed {seed} row {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn parameter_count_closed_form() {
    let (v, t, d, l, f) = (11, 8, 16, 2, 32);
    let c = cfg(v, t, d, l, 2, f);
    let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
    let want = (v + 1) * d + t * d + l * per_layer + 2 * d + d * v;
    assert_eq!(want, 4976);
    assert_eq!(c.param_count(), want);
    assert_eq!(LmModel::init(c, &mut Rng::new(0)).unwrap().param_count(), want);
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Contracts an op's output with fixed random weights so every output
/// component reaches the scalar.
fn probe(tape: &mut Tape, out: NodeId, seed: u64) -> salt_core::Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random_tensor(&shape, &mut Rng::new(seed)))?;
    let prod = tape.mul(out, w)?;
    tape.reduce_mean(prod)
}

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[NodeId]) -> salt_core::Result<NodeId>) {
    let r = grad_check(|tape, ids| { let o = f(tape, ids)?; probe(tape, o, 99) }, &inputs, 1e-5, 1e-6).unwrap();
    assert!(r.pass, "{name}: {r:?}");
}

#[test]
fn every_primitive_vjp_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let mut r = |s: &[usize]| random_tensor(s, &mut rng);
    check("matmul", vec![r(&[3, 4]), r(&[4, 2])], |t, i| t.matmul(i[0], i[1]));
    check("matmul batched", vec![r(&[2, 3, 4]), r(&[2, 4, 2])], |t, i| t.matmul(i[0], i[1]));
    check("matmul_bt", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |t, i| t.matmul_bt(i[0], i[1]));
    check("add broadcast", vec![r(&[3, 4]), r(&[4])], |t, i| t.add(i[0], i[1]));
    check("mul broadcast", vec![r(&[3, 4]), r(&[4])], |t, i| t.mul(i[0], i[1]));
    check("scale", vec![r(&[5])], |t, i| t.scale(i[0], -1.7));
    check("row_log_softmax", vec![r(&[3, 5])], |t, i| t.row_log_softmax(i[0]));
    check("causal_softmax", vec![r(&[2, 4, 4])], |t, i| t.causal_softmax(i[0]));
    check("layer_norm", vec![r(&[3, 6])], |t, i| t.layer_norm(i[0], 1e-5));
    check("gelu", vec![r(&[10])], |t, i| t.gelu(i[0]));
    check("embedding", vec![r(&[5, 3])], |t, i| t.embedding(i[0], &[4, 0, 4, 2]));
    check("slice", vec![r(&[3, 6])], |t, i| t.slice(i[0], 1, 2, 3));
    check("concat", vec![r(&[2, 3]), r(&[2, 2])], |t, i| t.concat(&[i[0], i[1]], 1));
    check("gather_logp", vec![r(&[3, 4])], |t, i| t.gather_logp(i[0], &[1, 3, 0]));
    check("reshape", vec![r(&[2, 6])], |t, i| t.reshape(i[0], &[3, 4]));
    check("permute", vec![r(&[2, 3, 4, 2])], |t, i| t.permute(i[0], &[0, 2, 1, 3]));
    check("reduce_mean", vec![r(&[7])], |t, i| {
        let m = t.reduce_mean(i[0])?;
        t.scale(m, 3.0)
    });
}

#[test]
fn combined_loss_gradient_small_model() {
    let c = cfg(7, 5, 8, 2, 2, 12);
    let model = LmModel::init(c.clone(), &mut Rng::new(11)).unwrap();
    let teacher = LmModel::init(c, &mut Rng::new(12)).unwrap();
    let x: Vec<u32> = vec![3, 1, 6, 0, 2];
    let q = teacher_targets(&teacher.forward_log_probs(&x).unwrap(), 0.25).unwrap();
    let params: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |tape, ids| {
            let p = salt_core::lm::TapeParams { ids: ids.to_vec() };
            let lp = model.forward_on_tape(tape, &p, &[&x])?;
            Ok(combined_loss_on_tape(tape, lp, &x, Some(&q), 0.667)?.combined)
        },
        &params,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}
