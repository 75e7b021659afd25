use std::sync::atomic::{AtomicUsize, Ordering};

use groundiff::autodiff::Mat;
use groundiff::config::RunConfig;
use groundiff::diffusion::DiffusionSchedule;
use groundiff::engine::{evaluate, infer, train, Denoiser, EvalConfig, InferConfig, Sampler, SceneInput, TrainConfig};
use groundiff::geometry::{signal_scale, ScaledBox};
use groundiff::model::{DecoderConfig, DecoderParams};
use groundiff::synthetic::{gen_dataset, sample_rng, GroundingSample, InstanceMode, SceneConfig, Vocabulary};
use groundiff::Result;

fn schedule() -> DiffusionSchedule {
    RunConfig::default().diffusion.schedule().unwrap()
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        box_hidden: 16,
        dim: 8,
        heads: 2,
        ffn_hidden: 16,
        reg_hidden: 8,
        ..DecoderConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        proposals: 8,
        warmup_epochs: 1,
        cooldown_epochs: 0,
        ..TrainConfig::default()
    }
}

/// Predicts the ground truth exactly: proposal `i` goes to GT box
/// `i mod total`, with similarity 1 to its own phrase only.
struct Oracle;

impl Denoiser for Oracle {
    fn denoise(&self, input: &SceneInput<'_>, noisy: &[ScaledBox], _t: i64, signal: f64) -> Result<(Vec<ScaledBox>, Mat)> {
        let flat: Vec<_> = input
            .sample
            .gt
            .iter()
            .enumerate()
            .flat_map(|(p, set)| set.iter().map(move |b| (p, *b)))
            .collect();
        let mut sim = Mat::zeros(noisy.len(), input.mask.len());
        let boxes = (0..noisy.len())
            .map(|i| {
                let (p, b) = flat[i % flat.len()];
                sim.set(i, p, 1.0);
                signal_scale(b, signal)
            })
            .collect();
        Ok((boxes, sim))
    }
}

/// Counts calls and returns its input unchanged.
#[derive(Default)]
struct Counter(AtomicUsize);

impl Denoiser for Counter {
    fn denoise(&self, input: &SceneInput<'_>, noisy: &[ScaledBox], _t: i64, _signal: f64) -> Result<(Vec<ScaledBox>, Mat)> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok((noisy.to_vec(), Mat::zeros(noisy.len(), input.mask.len())))
    }
}

fn scenes(cfg: &SceneConfig, n: usize) -> Vec<GroundingSample> {
    gen_dataset(cfg, 11, n).unwrap()
}

#[test]
fn oracle_denoiser_scores_perfectly() {
    let cfg = SceneConfig {
        instances: InstanceMode::Mixed { multi_prob: 0.5 },
        ..SceneConfig::default()
    };
    let data = scenes(&cfg, 40);
    assert!(data.iter().any(GroundingSample::is_one_to_many));
    for ensemble in [false, true] {
        let infer_cfg = InferConfig {
            proposals: 30,
            ensemble,
            ..InferConfig::default()
        };
        let r = evaluate(&Oracle, &data, &Vocabulary::new(&cfg), &schedule(), &infer_cfg, &EvalConfig::default()).unwrap();
        for (k, v) in r.acc.iter().chain(&r.pair_acc) {
            assert_eq!(*v, 1.0, "{k} with ensemble={ensemble}");
        }
        assert_eq!(r.one_to_many_rate, Some(1.0));
        assert_eq!(r.one_to_many_rate_threshold, Some(1.0));
    }
}

#[test]
fn one_step_is_a_single_model_call() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 1);
    let vocab = Vocabulary::new(&cfg);
    let input = SceneInput::new(&data[0], &vocab).unwrap();
    for steps in [1, 3, 5] {
        let c = Counter::default();
        let infer_cfg = InferConfig {
            n_steps: steps,
            proposals: 7,
            ..InferConfig::default()
        };
        let r = infer(&c, &input, &schedule(), &infer_cfg, &mut sample_rng(0, 0)).unwrap();
        assert_eq!(c.0.load(Ordering::SeqCst), steps);
        assert_eq!(r.trajectory.len(), steps);
        assert_eq!(r.trajectory.last().unwrap().t_next, -1);
        assert_eq!(r.boxes.len(), 7);
    }
}

#[test]
fn ensemble_pools_every_step_and_plain_keeps_the_last() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 1);
    let vocab = Vocabulary::new(&cfg);
    let input = SceneInput::new(&data[0], &vocab).unwrap();
    let model = DecoderParams::new(small_decoder()).unwrap();
    let run = |ensemble| {
        let c = InferConfig {
            proposals: 9,
            ensemble,
            ..InferConfig::default()
        };
        infer(&model, &input, &schedule(), &c, &mut sample_rng(3, 0)).unwrap()
    };
    let plain = run(false);
    let pooled = run(true);
    assert_eq!(plain.boxes, plain.trajectory.last().unwrap().boxes);
    assert_eq!(pooled.boxes.len(), 5 * 9);
    let flat: Vec<_> = pooled.trajectory.iter().flat_map(|s| s.boxes.clone()).collect();
    assert_eq!(pooled.boxes, flat);
    assert_eq!(plain.trajectory, pooled.trajectory);
}

#[test]
fn trajectories_are_reproducible() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 2);
    let vocab = Vocabulary::new(&cfg);
    let model = DecoderParams::new(small_decoder()).unwrap();
    for sampler in [Sampler::Ddim, Sampler::Ancestral] {
        let c = InferConfig {
            proposals: 12,
            sampler,
            ..InferConfig::default()
        };
        let input = SceneInput::new(&data[1], &vocab).unwrap();
        let a = infer(&model, &input, &schedule(), &c, &mut sample_rng(c.seed, 1)).unwrap();
        let b = infer(&model, &input, &schedule(), &c, &mut sample_rng(c.seed, 1)).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.sim, b.sim);
        let other = infer(&model, &input, &schedule(), &c, &mut sample_rng(c.seed + 1, 1)).unwrap();
        assert_ne!(a.trajectory, other.trajectory);
    }
}

#[test]
fn accuracy_never_rises_with_the_threshold() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 20);
    let model = DecoderParams::new(small_decoder()).unwrap();
    let zetas: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let eval = EvalConfig {
        zetas: zetas.clone(),
        ..EvalConfig::default()
    };
    let infer_cfg = InferConfig {
        proposals: 40,
        ..InferConfig::default()
    };
    let r = evaluate(&model, &data, &Vocabulary::new(&cfg), &schedule(), &infer_cfg, &eval).unwrap();
    let acc: Vec<f64> = zetas.iter().map(|&z| r.acc_at(z).unwrap()).collect();
    let pair: Vec<f64> = zetas.iter().map(|&z| r.pair_acc_at(z).unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[0] >= w[1]), "{acc:?}");
    assert!(pair.windows(2).all(|w| w[0] >= w[1]), "{pair:?}");
    assert!(acc[0] > 0.0, "random boxes should clear IoU 0.05 sometimes");
}

#[test]
fn evaluation_ignores_thread_count() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 9);
    let model = DecoderParams::new(small_decoder()).unwrap();
    let vocab = Vocabulary::new(&cfg);
    let infer_cfg = InferConfig {
        proposals: 10,
        ..InferConfig::default()
    };
    let run = |threads| {
        let e = EvalConfig {
            threads,
            ..EvalConfig::default()
        };
        evaluate(&model, &data, &vocab, &schedule(), &infer_cfg, &e).unwrap().without_timing()
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn training_replays_exactly() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 10);
    let vocab = Vocabulary::new(&cfg);
    let tc = tiny_train();
    let run = |tc: &TrainConfig| train(small_decoder(), &data, &vocab, &schedule(), tc, |_, _| Ok(())).unwrap();
    let a = run(&tc);
    let b = run(&tc);
    assert_eq!(a.curve, b.curve);
    for id in a.params.store.ids() {
        assert_eq!(a.params.store.value(id), b.params.store.value(id), "{}", a.params.store.name(id));
    }
    assert_eq!(a.curve.len(), 2);
    let c = run(&TrainConfig { seed: 7, ..tc });
    assert_ne!(a.curve, c.curve);
}

#[test]
fn zero_lambda_drops_the_similarity_term() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 8);
    let vocab = Vocabulary::new(&cfg);
    let mut tc = tiny_train();
    tc.loss.lambda = 0.0;
    let out = train(small_decoder(), &data, &vocab, &schedule(), &tc, |_, _| Ok(())).unwrap();
    for log in &out.curve {
        let l = &log.loss;
        assert!(l.sim_term > 0.0, "the similarity term is still reported");
        let expect = tc.loss.alpha * l.l1_term + tc.loss.beta * l.giou_term;
        assert!((l.total - expect).abs() < 1e-9 * expect.max(1.0), "{l:?}");
    }
}

#[test]
fn empty_datasets_are_rejected() {
    let vocab = Vocabulary::new(&SceneConfig::default());
    let model = DecoderParams::new(small_decoder()).unwrap();
    assert!(train(small_decoder(), &[], &vocab, &schedule(), &tiny_train(), |_, _| Ok(())).is_err());
    let e = evaluate(&model, &[], &vocab, &schedule(), &InferConfig::default(), &EvalConfig::default());
    assert!(e.is_err());
    let bad = EvalConfig {
        zetas: vec![1.0],
        ..EvalConfig::default()
    };
    let data = scenes(&SceneConfig::default(), 1);
    assert!(evaluate(&model, &data, &vocab, &schedule(), &InferConfig::default(), &bad).is_err());
}

#[test]
fn masked_padding_phrases_change_nothing() {
    let cfg = SceneConfig::default();
    let data = scenes(&cfg, 3);
    let vocab = Vocabulary::new(&cfg);
    let model = DecoderParams::new(small_decoder()).unwrap();
    let sched = schedule();
    let s = &data[2];
    let input = SceneInput::new(s, &vocab).unwrap();
    let p = s.num_phrases();
    let d = input.phrases.cols;
    let mut padded = Mat::zeros(p + 2, d);
    for r in 0..p {
        padded.row_mut(r).copy_from_slice(input.phrases.row(r));
    }
    padded.row_mut(p).fill(0.7);
    let mut mask = vec![1.0; p];
    mask.extend([0.0, 0.0]);
    let noisy = groundiff::proposals::gaussian_proposals(10, sched.scale(), &mut sample_rng(1, 1));
    let (b1, s1) = model.denoise(&noisy, &input.scene, &input.phrases, &input.mask, 400, sched.scale()).unwrap();
    let (b2, s2) = model.denoise(&noisy, &input.scene, &padded, &mask, 400, sched.scale()).unwrap();
    for (a, b) in b1.iter().zip(&b2) {
        for k in 0..4 {
            assert!((a.0[k] - b.0[k]).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }
    for r in 0..10 {
        for c in 0..p {
            assert!((s1.get(r, c) - s2.get(r, c)).abs() < 1e-12);
        }
    }
}
