//! Exact-match evaluation of the main path, the baseline and diffusion arms.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use l2d_core::base_lm::BaseLm;
use l2d_core::data::TokenId;
use l2d_core::diffusion_path::DiffusionPath;
use l2d_core::inference::{
    sample_base_sequence, write_trace, GenerationConfig, GenerationRng, Generator, GuidanceForm, GuidanceSpec,
    PredictionMode, SolverKind, SolverSpec,
};
use l2d_core::numerics::Scalar;
use l2d_core::{L2dError, Result};
use serde::{Deserialize, Serialize};

use crate::tasks::{exact_match, Example, Task};

/// One scored configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub arm: String,
    pub seed: u64,
    /// Solver label, empty for main-path arms.
    pub solver: String,
    /// Evaluation budget for fixed-step solvers.
    pub budget: Option<usize>,
    pub w_g: Option<f64>,
    pub sigma: Option<f64>,
    pub n_examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Diffusion-path evaluations per generated token.
    pub mean_evals: f64,
    /// Accepted solver steps per generated token.
    pub mean_steps: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

const COLUMNS: [&str; 13] = [
    "task",
    "arm",
    "seed",
    "solver",
    "budget",
    "w_g",
    "sigma",
    "n_examples",
    "correct",
    "accuracy",
    "mean_evals",
    "mean_steps",
    "wallclock_s",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn csv_err(e: csv::Error) -> L2dError {
    L2dError::Io(std::io::Error::other(e.to_string()))
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// Rows matching `arm` and `budget`.
    pub fn select<'a>(
        &'a self,
        task: &'a str,
        arm: &'a str,
        budget: Option<usize>,
    ) -> impl Iterator<Item = &'a EvalRow> {
        self.rows
            .iter()
            .filter(move |r| r.task == task && r.arm == arm && (budget.is_none() || r.budget == budget))
    }

    /// Seed-mean accuracy of the matching rows.
    pub fn mean_accuracy(&self, task: &str, arm: &str, budget: Option<usize>) -> Option<f64> {
        let accs: Vec<f64> = self.select(task, arm, budget).map(|r| r.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Headered CSV; without `wallclock` the output depends only on the
    /// configuration and seeds.
    pub fn write_csv<W: Write>(&self, w: W, wallclock: bool) -> Result<()> {
        let mut out = csv_writer(w);
        let n = if wallclock { COLUMNS.len() } else { COLUMNS.len() - 1 };
        out.write_record(&COLUMNS[..n]).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.task.clone(),
                r.arm.clone(),
                r.seed.to_string(),
                r.solver.clone(),
                opt(r.budget),
                opt(r.w_g),
                opt(r.sigma),
                r.n_examples.to_string(),
                r.correct.to_string(),
                format!("{:.6}", r.accuracy),
                format!("{:.4}", r.mean_evals),
                format!("{:.4}", r.mean_steps),
            ];
            if wallclock {
                rec.push(format!("{:.3}", r.wallclock_s));
            }
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, wallclock: bool) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), wallclock)
    }
}

/// Seed for the generation streams of one example.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64
}

pub fn solver_label(s: &SolverSpec) -> String {
    match s.kind {
        SolverKind::Direct => "direct".into(),
        SolverKind::AdaptiveRk2 => format!("adaptive_rk2:{}:{}", s.abs_tol, s.rel_tol),
        SolverKind::Euler => format!("euler:{}", s.endpoints),
        SolverKind::Midpoint => format!("midpoint:{}", s.endpoints),
        SolverKind::Rk4 => format!("rk4:{}", s.endpoints),
    }
}

/// One arm of a sweep against a trained diffusion path.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub solver: SolverSpec,
    pub w_g: Option<f64>,
    pub form: GuidanceForm,
    pub mode: PredictionMode,
    pub temperature: f64,
}

impl ArmSpec {
    pub fn generation_config(&self, class_id: usize) -> GenerationConfig {
        GenerationConfig {
            solver: self.solver,
            mode: self.mode,
            guidance: self.w_g.map(|w_g| GuidanceSpec {
                class_id,
                w_g,
                form: self.form,
            }),
            class_id,
            temperature: self.temperature,
        }
    }
}

fn limit(examples: &[Example], max: Option<usize>) -> &[Example] {
    &examples[..max.unwrap_or(examples.len()).min(examples.len())]
}

fn check_vocab<F: Scalar>(base: &BaseLm<F>, task: &Task) -> Result<()> {
    if base.config().vocab_size != task.sizes.vocab_size() {
        return Err(L2dError::Config(format!(
            "model vocabulary {} does not match task vocabulary {}",
            base.config().vocab_size,
            task.sizes.vocab_size()
        )));
    }
    Ok(())
}

/// Greedy or sampled main-path answers, as used by the base and baseline arms.
pub fn eval_main_path<F: Scalar>(
    model: &BaseLm<F>,
    task: &Task,
    arm: &str,
    seed: u64,
    temperature: f64,
    max_examples: Option<usize>,
) -> Result<EvalRow> {
    check_vocab(model, task)?;
    let clock = Instant::now();
    let examples = limit(&task.test, max_examples);
    let mut correct = 0;
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = GenerationRng::new(example_seed(seed, i));
        let out = sample_base_sequence(model, &ex.prompt, ex.answer.len(), temperature, None, &mut rng)?;
        correct += exact_match(&out, &ex.answer) as usize;
    }
    Ok(EvalRow {
        task: task.kind.name().into(),
        arm: arm.into(),
        seed,
        solver: String::new(),
        budget: None,
        w_g: None,
        sigma: None,
        n_examples: examples.len(),
        correct,
        accuracy: correct as f64 / examples.len().max(1) as f64,
        mean_evals: 0.0,
        mean_steps: 0.0,
        wallclock_s: clock.elapsed().as_secs_f64(),
    })
}

/// Answers generated through the diffusion path. `trace` receives one JSON
/// line per solver step when given.
pub fn eval_l2d<F: Scalar>(
    base: &BaseLm<F>,
    path: &DiffusionPath<F>,
    task: &Task,
    spec: &ArmSpec,
    seed: u64,
    max_examples: Option<usize>,
    mut trace: Option<&mut dyn Write>,
) -> Result<EvalRow> {
    check_vocab(base, task)?;
    let gen = Generator::new(base, path)?;
    let clock = Instant::now();
    let examples = limit(&task.test, max_examples);
    let cfg = spec.generation_config(task.kind.class_id());
    let (mut correct, mut evals, mut steps, mut tokens) = (0, 0usize, 0usize, 0usize);
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = GenerationRng::new(example_seed(seed, i));
        let out = gen.generate_sequence(&ex.prompt, ex.answer.len(), &cfg, None, &mut rng)?;
        if let Some(w) = trace.as_deref_mut() {
            for (j, tr) in out.traces.iter().enumerate() {
                write_trace(&mut *w, ex.prompt.len() + j, tr)?;
            }
        }
        correct += exact_match(&out.tokens, &ex.answer) as usize;
        evals += out.evals.iter().sum::<usize>();
        steps += out.steps.iter().sum::<usize>();
        tokens += out.tokens.len();
    }
    let per_token = |v: usize| v as f64 / tokens.max(1) as f64;
    Ok(EvalRow {
        task: task.kind.name().into(),
        arm: "l2d".into(),
        seed,
        solver: solver_label(&spec.solver),
        budget: spec.solver.evals_per_token(),
        w_g: spec.w_g,
        sigma: Some(path.config().sigma),
        n_examples: examples.len(),
        correct,
        accuracy: correct as f64 / examples.len().max(1) as f64,
        mean_evals: per_token(evals),
        mean_steps: per_token(steps),
        wallclock_s: clock.elapsed().as_secs_f64(),
    })
}

/// Scores every trained path on every arm: one row per (arm, seed).
pub fn evaluate<F: Scalar>(
    base: &BaseLm<F>,
    paths: &[(u64, &DiffusionPath<F>)],
    task: &Task,
    arms: &[ArmSpec],
    max_examples: Option<usize>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for spec in arms {
        for &(seed, path) in paths {
            report
                .rows
                .push(eval_l2d(base, path, task, spec, seed, max_examples, None)?);
        }
    }
    Ok(report)
}

/// Tokens as a space-separated string.
pub fn format_tokens(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}
