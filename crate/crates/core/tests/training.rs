use salt_core::evalx::held_out_metrics;
use salt_core::lm::{LmConfig, LmModel};
use salt_core::numcore::Rng;
use salt_core::synth::{Corpus, GroundTruthSource};
use salt_core::trainer::{train, LrSchedule, Mode, TrainInputs, TrainPlan};

fn cfg(v: usize, t: usize, d: usize, layers: usize) -> LmConfig {
    LmConfig {
        vocab_size: v,
        max_len: t,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        prob_floor: 0.0,
        init_std: 0.02,
    }
}

fn plan(mode: Mode, omega: f64, steps: usize, kd: usize) -> TrainPlan {
    let mut p = TrainPlan::new(mode, omega, steps, kd);
    p.batch_size = 8;
    p.lr = LrSchedule { peak: 1e-2, warmup_steps: 2, final_lr: 1e-3 };
    p.probe_size = 16;
    p.probe_every = 5;
    p.seed = 21;
    p
}

fn fixture() -> (Corpus, LmModel) {
    let src = GroundTruthSource::markov(1, 6, 0.3, 1).unwrap();
    let corpus = src.sample_corpus(64, 8, 2).unwrap();
    let teacher = LmModel::init(cfg(6, 8, 8, 1), &mut Rng::new(3)).unwrap();
    (corpus, teacher)
}

#[test]
fn zero_init_starts_at_uniform_and_is_stationary() {
    let src = GroundTruthSource::markov(1, 16, 0.3, 4).unwrap();
    let corpus = src.sample_corpus(256, 16, 5).unwrap();
    let mut student = cfg(16, 16, 32, 2);
    student.init_std = 0.0;
    let mut p = TrainPlan::new(Mode::Baseline, 0.0, 5, 0);
    p.lr = LrSchedule { peak: 1e-2, warmup_steps: 1, final_lr: 1e-3 };
    p.probe_every = 0;
    let out = train(&p, &corpus, &student, TrainInputs::default()).unwrap();
    // all-zero weights are a critical point: every gradient vanishes
    for r in out.log.records() {
        assert!((r.standard - 16f64.ln()).abs() < 1e-12, "step {}: {}", r.step, r.standard);
    }
    assert_eq!(out.model, LmModel::init(student, &mut Rng::new(0)).unwrap());
}

#[test]
fn smoke_run_lowers_training_loss() {
    let src = GroundTruthSource::markov(1, 16, 0.3, 4).unwrap();
    let corpus = src.sample_corpus(4096, 16, 5).unwrap();
    let mut p = TrainPlan::new(Mode::Baseline, 0.0, 2000, 0);
    p.lr = LrSchedule { peak: 1e-2, warmup_steps: 100, final_lr: 1e-3 };
    p.probe_every = 0;
    let out = train(&p, &corpus, &cfg(16, 16, 32, 2), TrainInputs::default()).unwrap();
    let recs = out.log.records();
    assert!((recs[0].standard - 16f64.ln()).abs() < 1e-2, "initial CE {}", recs[0].standard);
    let tail: f64 = recs[recs.len() - 50..].iter().map(|r| r.standard).sum::<f64>() / 50.0;
    assert!(tail < recs[0].standard - 0.3, "final CE {tail}");
}

#[test]
fn baseline_is_salt_without_kd_phase() {
    let (corpus, teacher) = fixture();
    let s = cfg(6, 8, 8, 1);
    let a = train(&plan(Mode::Baseline, 0.0, 20, 0), &corpus, &s, TrainInputs::default()).unwrap();
    let inputs = TrainInputs { teacher: Some(&teacher), ..Default::default() };
    let b = train(&plan(Mode::Salt, 0.667, 20, 0), &corpus, &s, inputs).unwrap();
    assert_eq!(a.model, b.model);
    let std = |o: &salt_core::trainer::TrainOutcome| o.log.records().iter().map(|r| r.standard).collect::<Vec<_>>();
    assert_eq!(std(&a), std(&b));
}

#[test]
fn rkd_is_salt_distilling_throughout() {
    let (corpus, teacher) = fixture();
    let s = cfg(6, 8, 8, 1);
    let inputs = TrainInputs { teacher: Some(&teacher), ..Default::default() };
    let a = train(&plan(Mode::Rkd, 0.667, 20, 20), &corpus, &s, inputs).unwrap();
    let b = train(&plan(Mode::Salt, 0.667, 20, 20), &corpus, &s, inputs).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
}

#[test]
fn step_transition_zeroes_distillation_after_phase() {
    let (corpus, teacher) = fixture();
    let before = teacher.clone();
    let inputs = TrainInputs { teacher: Some(&teacher), ..Default::default() };
    let out = train(&plan(Mode::Salt, 0.667, 20, 8), &corpus, &cfg(6, 8, 8, 1), inputs).unwrap();
    for r in out.log.records() {
        if r.step <= 8 {
            assert!(r.distill > 0.0 && r.omega == 0.667, "step {}", r.step);
        } else {
            assert_eq!((r.distill, r.omega), (0.0, 0.0), "step {}", r.step);
        }
    }
    assert_eq!(teacher, before);
}

#[test]
fn identical_plans_give_identical_logs() {
    let (corpus, teacher) = fixture();
    let inputs = TrainInputs { teacher: Some(&teacher), heldout: Some(&corpus), ..Default::default() };
    let mut p = plan(Mode::Salt, 0.5, 15, 5);
    p.eval_every = 5;
    let a = train(&p, &corpus, &cfg(6, 8, 8, 1), inputs).unwrap();
    let b = train(&p, &corpus, &cfg(6, 8, 8, 1), inputs).unwrap();
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    // the logged final held-out record is the evaluator's output
    assert_eq!(a.log.last_heldout().unwrap(), &held_out_metrics(&a.model, &corpus).unwrap());
}

#[test]
fn memorizes_a_deterministic_binary_source() {
    let x = vec![0u32, 1, 0, 1, 0, 1];
    let corpus = Corpus::from_sequences(2, &vec![x.clone(); 8]).unwrap();
    let mut p = TrainPlan::new(Mode::Baseline, 0.0, 4000, 0);
    p.batch_size = 8;
    p.lr = LrSchedule { peak: 5e-2, warmup_steps: 10, final_lr: 5e-2 };
    p.adam.clip = None;
    p.probe_every = 0;
    let out = train(&p, &corpus, &cfg(2, 6, 8, 1), TrainInputs::default()).unwrap();
    let ll = out.model.sequence_log_likelihood(&x).unwrap();
    assert!(ll > -1e-6 && ll <= 0.0, "{ll}");
}

#[test]
fn fitted_model_follows_the_cycle() {
    let src = GroundTruthSource::deterministic_cycle(5).unwrap();
    let corpus = src.sample_corpus(64, 6, 2).unwrap();
    let mut p = TrainPlan::new(Mode::Baseline, 0.0, 300, 0);
    p.batch_size = 16;
    p.lr = LrSchedule { peak: 1e-2, warmup_steps: 10, final_lr: 1e-3 };
    p.probe_every = 0;
    let out = train(&p, &corpus, &cfg(5, 6, 16, 1), TrainInputs::default()).unwrap();
    for a in 0..5u32 {
        assert_eq!(out.model.greedy_next(&[a]).unwrap(), (a + 1) % 5);
    }
}

#[test]
fn kd_subset_capacity_is_checked() {
    let (corpus, teacher) = fixture();
    let small: Vec<usize> = (0..10).collect();
    let inputs = TrainInputs { teacher: Some(&teacher), kd_subset: Some(&small), ..Default::default() };
    let err = train(&plan(Mode::Salt, 0.667, 20, 5), &corpus, &cfg(6, 8, 8, 1), inputs).unwrap_err().to_string();
    assert!(err.contains("5 x 8 = 40"), "{err}");
    let enough: Vec<usize> = (0..40).collect();
    let inputs = TrainInputs { teacher: Some(&teacher), kd_subset: Some(&enough), ..Default::default() };
    assert!(train(&plan(Mode::Salt, 0.667, 20, 5), &corpus, &cfg(6, 8, 8, 1), inputs).is_ok());
}
