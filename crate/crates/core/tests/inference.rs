mod common;

use common::*;
use l2d_core::base_lm::BaseLm;
use l2d_core::diffusion_core::Schedule;
use l2d_core::diffusion_path::{build_vocab, DiffusionPath, PathQuery};
use l2d_core::inference::{
    guided_logits, integrate, predict_xhat, sample_base_sequence, write_trace, GenerationConfig, GenerationRng,
    Generator, GuidanceForm, GuidanceSpec, Prediction, PredictionKind, PredictionMode, SolverKind, SolverSpec,
};
use l2d_core::numerics::Tensor;
use l2d_core::L2dError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// dx_i/dt = a_i cos(2t) x_i, solved by x_i(t) = x_i(0) exp(a_i sin(2t) / 2).
struct Field {
    a: Vec<f64>,
}

impl Field {
    fn new() -> Self {
        Self {
            a: vec![1.5, -0.8, 0.6],
        }
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        x.iter().zip(&self.a).map(|(xi, a)| a * (2.0 * t).cos() * xi).collect()
    }

    /// The prediction whose implied velocity is the field.
    fn eval(&self) -> impl FnMut(&[f64], f64) -> l2d_core::Result<Prediction> + '_ {
        move |x, t| {
            let v = self.velocity(x, t);
            Ok(x.iter()
                .zip(&v)
                .map(|(xi, vi)| xi + (1.0 - t) * vi)
                .collect::<Vec<_>>()
                .into())
        }
    }

    fn exact(&self, x0: &[f64], t: f64) -> Vec<f64> {
        x0.iter()
            .zip(&self.a)
            .map(|(x, a)| x * (a * (2.0 * t).sin() / 2.0).exp())
            .collect()
    }
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Least-squares slope of log(err) against log(h).
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[test]
fn fixed_step_solvers_converge_at_their_order() {
    let field = Field::new();
    let schedule = Schedule::default();
    let x0 = vec![1.0, 2.0, -1.5];
    for (kind, order) in [
        (SolverKind::Euler, 1.0),
        (SolverKind::Midpoint, 2.0),
        (SolverKind::Rk4, 4.0),
    ] {
        let mut points = Vec::new();
        for k in 3..=6 {
            let spec = SolverSpec::fixed(kind, (1 << k) + 1);
            let run = integrate(&spec, field.eval(), x0.clone(), &schedule).unwrap();
            let stop = spec.stop_time(&schedule);
            assert_eq!(run.t, stop);
            points.push((stop / (1 << k) as f64, max_err(&run.x, &field.exact(&x0, stop))));
        }
        let s = slope(&points);
        assert!((s - order).abs() <= 0.3, "{kind:?}: slope {s}, errors {points:?}");
    }
}

#[test]
fn euler_follows_a_constant_prediction_exactly() {
    let xh = vec![3.0, -2.0, 0.5, 16.0];
    let x0 = vec![-40.0, 70.0, 12.0, -3.0];
    for e in [2, 3, 8, 50] {
        let spec = SolverSpec::fixed(SolverKind::Euler, e);
        let run = integrate(&spec, |_, _| Ok(xh.clone().into()), x0.clone(), &Schedule::default()).unwrap();
        assert_eq!(run.t, 1.0);
        assert!(max_err(&run.x, &xh) <= 1e-6, "{e}: {:?}", run.x);
    }
}

#[test]
fn eval_counts_follow_the_stage_law() {
    let field = Field::new();
    for (kind, s) in [(SolverKind::Euler, 1), (SolverKind::Midpoint, 2), (SolverKind::Rk4, 4)] {
        for e in [2, 5, 8] {
            let spec = SolverSpec::fixed(kind, e);
            let run = integrate(&spec, field.eval(), vec![1.0; 3], &Schedule::default()).unwrap();
            assert_eq!(run.evals, (e - 1) * s);
            assert_eq!(run.steps, e - 1);
            assert_eq!(spec.evals_per_token(), Some((e - 1) * s + 1));
        }
    }
    let midpoint = SolverSpec::fixed(SolverKind::Midpoint, 8);
    let run = integrate(&midpoint, field.eval(), vec![1.0; 3], &Schedule::default()).unwrap();
    assert_eq!(run.evals, 14);
}

#[test]
fn adaptive_matches_a_dense_reference() {
    let field = Field::new();
    let schedule = Schedule::default();
    let x0 = vec![1.0, 2.0, -1.5];
    let tol = 3e-4;
    let reference = integrate(
        &SolverSpec::fixed(SolverKind::Rk4, 10_001),
        field.eval(),
        x0.clone(),
        &schedule,
    )
    .unwrap();
    assert!(max_err(&reference.x, &field.exact(&x0, reference.t)) < 1e-12);
    let run = integrate(&SolverSpec::adaptive(tol, tol), field.eval(), x0, &schedule).unwrap();
    assert_eq!(run.t, reference.t);
    for (a, r) in run.x.iter().zip(&reference.x) {
        assert!((a - r).abs() <= 10.0 * (tol + tol * r.abs()), "{a} vs {r}");
    }
    assert!(run.steps > 2 && run.evals == 2 * (run.steps + run.rejected));
}

#[test]
fn adaptive_underflow_and_bad_specs_are_errors() {
    // a field that jumps with every evaluation never passes the error test
    let mut flip = 1.0;
    let rough = |x: &[f64], _t: f64| {
        flip = -flip;
        Ok(x.iter().map(|v| v + flip * 1e3).collect::<Vec<_>>().into())
    };
    let res = integrate(
        &SolverSpec::adaptive(1e-9, 1e-9),
        rough,
        vec![0.0],
        &Schedule::default(),
    );
    assert!(matches!(res, Err(L2dError::StepUnderflow { .. })), "{res:?}");

    assert!(SolverSpec::fixed(SolverKind::Euler, 1).validate().is_err());
    assert!(SolverSpec::adaptive(0.0, 1e-3).validate().is_err());
    let nan = integrate(
        &SolverSpec::fixed(SolverKind::Euler, 3),
        |_, _| Ok(vec![f64::NAN].into()),
        vec![0.0],
        &Schedule::default(),
    );
    assert!(nan.is_err());
}

#[test]
fn rk4_without_early_stop_hits_the_singularity() {
    let field = Field::new();
    let spec = SolverSpec {
        early_stop: false,
        ..SolverSpec::fixed(SolverKind::Rk4, 5)
    };
    assert!(matches!(
        integrate(&spec, field.eval(), vec![1.0; 3], &Schedule::default()),
        Err(L2dError::Singularity(_))
    ));
}

fn small_vocab() -> l2d_core::diffusion_path::DiffusionVocab {
    let emb = Tensor::<f64>::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    build_vocab(&emb, &Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 })).unwrap()
}

#[test]
fn prediction_modes() {
    let vocab = small_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let peaked = [0.0, 800.0, 0.0];
    let sample = PredictionMode::default();
    let expect = PredictionMode {
        kind: PredictionKind::Expectation,
        ..sample
    };
    let a = predict_xhat(&peaked, &sample, 0.3, &mut rng, &vocab).unwrap();
    let b = predict_xhat(&peaked, &expect, 0.3, &mut rng, &vocab).unwrap();
    assert_eq!(a.x_hat, vocab.embedding(1));
    assert_eq!(a.token, Some(1));
    assert!(max_err(&a.x_hat, &b.x_hat) < 1e-12);

    let two = [0.0, 0.0, f64::NEG_INFINITY];
    assert!(predict_xhat(&two, &expect, 0.0, &mut rng, &vocab).is_err());
    let two = [0.0, 0.0, -1e4];
    let mid = predict_xhat(&two, &expect, 0.0, &mut rng, &vocab).unwrap();
    let want: Vec<f64> = vocab
        .embedding(0)
        .iter()
        .zip(vocab.embedding(1))
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    assert!(max_err(&mid.x_hat, &want) < 1e-12);

    // annealed to zero temperature the draw is the argmax
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = predict_xhat(&[0.1, 0.3, 0.2], &sample, 1.0, &mut r, &vocab).unwrap();
        assert_eq!(p.token, Some(1));
    }
}

#[test]
fn guidance_identities_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = Tensor::<f64>::randn(&[64], 5.0, &mut rng).into_vec();
    let u = Tensor::<f64>::randn(&[64], 5.0, &mut rng).into_vec();
    assert_eq!(guided_logits(&c, &u, 1.0, GuidanceForm::Interpolate), c);
    assert_eq!(guided_logits(&c, &u, 0.0, GuidanceForm::Interpolate), u);
    assert_eq!(guided_logits(&c, &u, 1.0, GuidanceForm::Printed), c);
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    assert_eq!(guided_logits(&c, &u, 0.0, GuidanceForm::Printed), neg);
    assert_eq!(
        guided_logits(&[2.0f64, 0.0], &[1.0, 1.0], 2.0, GuidanceForm::Interpolate),
        vec![3.0, -1.0]
    );
}

fn setup(seed: u64) -> (BaseLm<f64>, DiffusionPath<f64>) {
    let base = random_base::<f64>(tiny_base_config(), seed);
    let path = random_path(&base, tiny_path_config(), seed + 1);
    (base, path)
}

#[test]
fn midpoint_with_eight_endpoints_costs_fifteen_evaluations() {
    let (base, path) = setup(20);
    let gen = Generator::new(&base, &path).unwrap();
    let (_, cache) = base.forward_sequence(&[1, 2, 3]).unwrap();
    let mut cfg = GenerationConfig::with_budget(15).unwrap();
    assert_eq!((cfg.solver.kind, cfg.solver.endpoints), (SolverKind::Midpoint, 8));
    let mut rng = GenerationRng::new(0);
    path.reset_counters();
    let out = gen.generate_token(&cache, &cfg, &mut rng).unwrap();
    assert_eq!(out.evals, 15);
    assert_eq!(path.forward_calls(), 15);

    cfg.guidance = Some(GuidanceSpec {
        class_id: 1,
        w_g: 2.0,
        form: GuidanceForm::Interpolate,
    });
    path.reset_counters();
    let out = gen.generate_token(&cache, &cfg, &mut rng).unwrap();
    assert_eq!((out.evals, path.forward_calls(), path.rows_evaluated()), (15, 15, 30));
}

#[test]
fn one_main_forward_per_token_for_any_budget() {
    let (base, path) = setup(21);
    let gen = Generator::new(&base, &path).unwrap();
    let prompt = [1u32, 4, 2];
    for budget in [1, 15, 127] {
        let cfg = GenerationConfig::with_budget(budget).unwrap();
        base.reset_counters();
        path.reset_counters();
        let out = gen
            .generate_sequence(&prompt, 6, &cfg, None, &mut GenerationRng::new(5))
            .unwrap();
        assert_eq!(out.tokens.len(), 6);
        assert_eq!(base.positions_processed(), prompt.len() + 6);
        assert!(out.evals.iter().all(|&e| e == budget));
        assert_eq!(path.forward_calls(), 6 * budget);
    }
}

#[test]
fn single_step_generation_is_base_sampling() {
    let (base, path) = setup(22);
    let gen = Generator::new(&base, &path).unwrap();
    for temperature in [0.0, 0.7, 1.0] {
        let cfg = GenerationConfig {
            temperature,
            class_id: 1,
            ..GenerationConfig::with_budget(1).unwrap()
        };
        for seed in 0..4 {
            let ours = gen
                .generate_sequence(&[3, 1], 10, &cfg, None, &mut GenerationRng::new(seed))
                .unwrap();
            let plain =
                sample_base_sequence(&base, &[3, 1], 10, temperature, None, &mut GenerationRng::new(seed)).unwrap();
            assert_eq!(ours.tokens, plain);
        }
    }
}

#[test]
fn unit_guidance_reproduces_the_conditional_run() {
    let (base, path) = setup(23);
    let gen = Generator::new(&base, &path).unwrap();
    let plain = GenerationConfig {
        class_id: 2,
        temperature: 1.0,
        ..GenerationConfig::with_budget(7).unwrap()
    };
    let guided = GenerationConfig {
        guidance: Some(GuidanceSpec {
            class_id: 2,
            w_g: 1.0,
            form: GuidanceForm::Interpolate,
        }),
        ..plain.clone()
    };
    let (_, cache) = base.forward_sequence(&[5, 5, 1]).unwrap();
    for seed in 0..5 {
        let a = gen
            .generate_token(&cache, &plain, &mut GenerationRng::new(seed))
            .unwrap();
        let b = gen
            .generate_token(&cache, &guided, &mut GenerationRng::new(seed))
            .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn cached_generation_matches_recompute() {
    let (base, path) = setup(24);
    let gen = Generator::new(&base, &path).unwrap();
    let cfg = GenerationConfig {
        class_id: 1,
        ..GenerationConfig::with_budget(5).unwrap()
    };
    let prompt = vec![2u32, 7, 1];
    let cached = gen
        .generate_sequence(&prompt, 8, &cfg, None, &mut GenerationRng::new(9))
        .unwrap();

    let mut rng = GenerationRng::new(9);
    let mut ctx = prompt.clone();
    for _ in 0..8 {
        let (_, cache) = base.forward_sequence(&ctx).unwrap();
        ctx.push(gen.generate_token(&cache, &cfg, &mut rng).unwrap().token);
    }
    assert_eq!(cached.tokens, ctx[prompt.len()..]);
}

#[test]
fn generation_errors_and_stops() {
    let (base, path) = setup(25);
    let gen = Generator::new(&base, &path).unwrap();
    let cfg = GenerationConfig::with_budget(3).unwrap();
    let max = base.config().max_seq_len;
    assert!(matches!(
        gen.generate_sequence(&[1, 2], max - 1, &cfg, None, &mut GenerationRng::new(0)),
        Err(L2dError::ContextOverflow { .. })
    ));
    assert!(gen
        .generate_token(&base.new_cache(), &cfg, &mut GenerationRng::new(0))
        .is_err());

    let full = gen
        .generate_sequence(&[1, 2], 10, &cfg, None, &mut GenerationRng::new(4))
        .unwrap();
    let eos = full.tokens[3];
    let cut = gen
        .generate_sequence(&[1, 2], 10, &cfg, Some(eos), &mut GenerationRng::new(4))
        .unwrap();
    let first = full.tokens.iter().position(|&t| t == eos).unwrap();
    assert_eq!(cut.tokens, full.tokens[..=first]);

    let other = random_base::<f64>(tiny_base_config(), 99);
    assert!(Generator::new(&other, &path).is_err());
}

#[test]
fn trace_lines_are_json() {
    let (base, path) = setup(26);
    let gen = Generator::new(&base, &path).unwrap();
    let (_, cache) = base.forward_sequence(&[1]).unwrap();
    let cfg = GenerationConfig::with_budget(9).unwrap();
    let out = gen.generate_token(&cache, &cfg, &mut GenerationRng::new(1)).unwrap();
    assert_eq!(out.trace.len(), 4);
    let mut buf = Vec::new();
    write_trace(&mut buf, 1, &out.trace).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["evals"], 8);
    assert!(lines.iter().all(|l| l["y_t"].is_u64()));
}

#[test]
fn guidance_needs_a_real_class() {
    let (base, path) = setup(27);
    let gen = Generator::new(&base, &path).unwrap();
    let (_, cache) = base.forward_sequence(&[1]).unwrap();
    let cfg = GenerationConfig {
        guidance: Some(GuidanceSpec {
            class_id: 0,
            w_g: 3.0,
            form: GuidanceForm::Interpolate,
        }),
        ..GenerationConfig::with_budget(3).unwrap()
    };
    assert!(matches!(
        gen.generate_token(&cache, &cfg, &mut GenerationRng::new(0)),
        Err(L2dError::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000, budget in 1usize..9) {
        let (base, path) = setup(30);
        let gen = Generator::new(&base, &path).unwrap();
        let cfg = GenerationConfig { temperature: 1.0, class_id: 1, ..GenerationConfig::with_budget(budget).unwrap() };
        let a = gen.generate_sequence(&[2, 3], 4, &cfg, None, &mut GenerationRng::new(seed)).unwrap();
        let b = gen.generate_sequence(&[2, 3], 4, &cfg, None, &mut GenerationRng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn budget_law_holds(budget in 1usize..64) {
        let spec = SolverSpec::for_budget(budget).unwrap();
        prop_assert_eq!(spec.evals_per_token(), Some(budget));
        prop_assert!(spec.validate().is_ok());
    }

    /// The first step's prediction only depends on the path at t = 0.
    #[test]
    fn path_at_zero_time_ignores_x(seed in 0u64..200) {
        let (base, path) = setup(31);
        let (logits, cache) = base.forward_sequence(&[4, 1, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[8], 4.0, &mut rng).into_vec();
        let out = path.forward(&base, &cache, &[PathQuery { x, t: 0.0, class_id: 1, target: 3 }]).unwrap();
        prop_assert!(max_err(out.row(0), logits.row(2)) <= 1e-12);
    }
}
