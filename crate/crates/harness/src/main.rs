use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use l2d_core::diffusion_core::TimestepSampling;
use l2d_core::inference::{
    GenerationConfig, GenerationRng, Generator, GuidanceForm, GuidanceSpec, PredictionKind, PredictionMode, SolverKind,
    SolverSpec,
};
use l2d_core::{L2dError, Result};
use l2d_harness::config::{artifact_dir, ExperimentConfig};
use l2d_harness::eval::{eval_l2d, format_tokens, ArmSpec, EvalReport};
use l2d_harness::experiment::Experiment;
use l2d_harness::tasks::TaskKind;

#[derive(Parser)]
#[command(
    name = "l2d",
    version,
    about = "Diffusion-path finetuning of small language models on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment TOML; the built-in toy configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory; defaults to $L2D_ARTIFACT_ROOT/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    class_dropout: Option<f64>,
    #[arg(long, value_enum)]
    timestep_sampling: Option<Sampling>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    Uniform,
    Cosmap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Euler,
    Midpoint,
    Rk4,
    AdaptiveRk2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Interpolate,
    Printed,
}

#[derive(Args, Clone)]
struct GenFlags {
    /// Path evaluations per token; picks Euler or midpoint on a uniform grid.
    #[arg(long, conflicts_with = "solver")]
    budget: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<Solver>,
    #[arg(long, default_value_t = 8)]
    endpoints: usize,
    #[arg(long, default_value_t = 3e-4)]
    abs_tol: f64,
    #[arg(long, default_value_t = 3e-4)]
    rel_tol: f64,
    /// Override the solver's default early stop at 1 - 1/sigma.
    #[arg(long)]
    early_stop: Option<bool>,
    /// Guidance strength; unguided when omitted.
    #[arg(long)]
    w_g: Option<f64>,
    #[arg(long, value_enum, default_value = "interpolate")]
    guidance_form: Form,
    /// Use the probability-weighted embedding instead of a sampled one.
    #[arg(long)]
    expectation: bool,
    #[arg(long)]
    base_temperature: Option<f64>,
    #[arg(long)]
    no_anneal: bool,
    /// Final token temperature; defaults to the config value.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the built-in toy configuration.
    Config,
    /// Run every stage of an experiment, resuming from existing checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the main path on the task mixture.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train a diffusion path on one task.
    TrainL2d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        sigma: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the main-path LoRA baseline on one task.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generate answers for test examples or a raw prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        /// Test example indices to answer.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        examples: Vec<usize>,
        /// Space-separated token ids; overrides --examples.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 1)]
        max_new: usize,
        #[arg(long)]
        eos: Option<u32>,
        /// Write per-step solver records here as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Score one solver/guidance setting on a task across all seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Accuracy against evaluation budget, loss profile and arm comparison.
    SweepSteps {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy against guidance strength.
    SweepGuidance {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain and score at each configured noise scale.
    SweepSigma {
        #[command(flatten)]
        common: Common,
    },
    /// Compare solvers, with per-task adaptive step counts.
    SolverBench {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::toy()),
    }
}

fn open(common: &Common, tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<Experiment> {
    let mut cfg = load_config(common)?;
    tweak(&mut cfg);
    let dir = common.out.clone().unwrap_or_else(|| artifact_dir(&cfg.name));
    Experiment::open(cfg, &dir)
}

fn apply_train(t: &TrainFlags, cfg: &mut l2d_core::training::TrainConfig) {
    if let Some(v) = t.lr_peak {
        cfg.lr_peak = v;
    }
    if let Some(v) = t.lr_floor {
        cfg.lr_floor = v;
    }
    if let Some(v) = t.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.epochs {
        cfg.epochs = v;
        cfg.max_steps = None;
    }
    if let Some(v) = t.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = t.class_dropout {
        cfg.class_dropout = v;
    }
    if let Some(v) = t.timestep_sampling {
        cfg.timestep_sampling = match v {
            Sampling::Uniform => TimestepSampling::Uniform,
            Sampling::Cosmap => TimestepSampling::Cosmap,
        };
    }
    if let Some(v) = t.grad_clip {
        cfg.grad_clip = Some(v);
    }
}

fn arm_spec(g: &GenFlags, cfg: &ExperimentConfig) -> Result<ArmSpec> {
    let mut solver = match (g.budget, g.solver) {
        (Some(b), _) => SolverSpec::for_budget(b)?,
        (None, Some(Solver::AdaptiveRk2)) => SolverSpec::adaptive(g.abs_tol, g.rel_tol),
        (None, Some(s)) => SolverSpec::fixed(
            match s {
                Solver::Euler => SolverKind::Euler,
                Solver::Midpoint => SolverKind::Midpoint,
                _ => SolverKind::Rk4,
            },
            g.endpoints,
        ),
        (None, None) => SolverSpec::for_budget(15)?,
    };
    if let Some(e) = g.early_stop {
        solver.early_stop = e;
    }
    solver.validate()?;
    let mut mode: PredictionMode = cfg.eval.mode;
    if g.expectation {
        mode.kind = PredictionKind::Expectation;
    }
    if let Some(t) = g.base_temperature {
        mode.base_temperature = t;
    }
    if g.no_anneal {
        mode.anneal = false;
    }
    Ok(ArmSpec {
        solver,
        w_g: g.w_g,
        form: match g.guidance_form {
            Form::Interpolate => GuidanceForm::Interpolate,
            Form::Printed => GuidanceForm::Printed,
        },
        mode,
        temperature: g.temperature.unwrap_or(cfg.eval.temperature),
    })
}

fn print_report(report: &EvalReport) -> Result<()> {
    report.write_csv(std::io::stdout().lock(), true)
}

fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| L2dError::Config(format!("bad token id '{t}'"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config => {
            print!("{}", ExperimentConfig::toy().to_toml());
        }
        Command::Run { common } => {
            let exp = open(&common, |_| {})?;
            let summary = exp.run()?;
            print!("{}", std::fs::read_to_string(&summary)?);
            eprintln!("artifacts in {}", exp.dir.display());
        }
        Command::Pretrain { common } => {
            let exp = open(&common, |_| {})?;
            let base = exp.base()?;
            for kind in TaskKind::ALL {
                print_report(&exp.base_rows(&base, kind)?)?;
            }
        }
        Command::TrainL2d {
            common,
            task,
            seed,
            sigma,
            train,
        } => {
            let kind = TaskKind::parse(&task)?;
            let exp = open(&common, |c| apply_train(&train, &mut c.l2d))?;
            let base = exp.base()?;
            let path = exp.l2d(&base, kind, seed, sigma)?;
            println!(
                "trained {} parameters",
                path.params()
                    .iter()
                    .filter(|(_, p)| p.trainable)
                    .map(|(_, p)| p.value.len())
                    .sum::<usize>()
            );
        }
        Command::TrainBaseline {
            common,
            task,
            seed,
            train,
        } => {
            let kind = TaskKind::parse(&task)?;
            let exp = open(&common, |c| {
                if let Some(b) = c.baseline.as_mut() {
                    apply_train(&train, &mut b.lora.train);
                }
            })?;
            let base = exp.base()?;
            let model = exp.baseline(&base, kind, seed)?;
            let val = exp.task(kind).sequences(l2d_harness::tasks::Split::Val);
            println!(
                "val_ce base {:.6} lora {:.6}",
                base.lm_loss(&val)?,
                model.lm_loss(&val)?
            );
        }
        Command::Generate {
            common,
            task,
            seed,
            examples,
            prompt,
            max_new,
            eos,
            trace,
            gen,
        } => {
            let kind = TaskKind::parse(&task)?;
            let exp = open(&common, |_| {})?;
            let spec = arm_spec(&gen, &exp.cfg)?;
            let base = exp.base()?;
            let path = exp.l2d(&base, kind, seed, None)?;
            let generator = Generator::new(&base, &path)?;
            let cfg: GenerationConfig = spec.generation_config(kind.class_id());
            if let Some(gs) = &cfg.guidance {
                GuidanceSpec::validate(gs)?;
            }
            let mut trace_out = match &trace {
                Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
                None => None,
            };
            let jobs: Vec<(Vec<u32>, usize, Option<Vec<u32>>)> = match &prompt {
                Some(p) => vec![(parse_tokens(p)?, max_new, None)],
                None => examples
                    .iter()
                    .map(|&i| {
                        let ex = exp.task(kind).test.get(i).ok_or_else(|| {
                            L2dError::Config(format!("test split has {} examples", exp.task(kind).test.len()))
                        })?;
                        Ok((ex.prompt.clone(), ex.answer.len(), Some(ex.answer.clone())))
                    })
                    .collect::<Result<_>>()?,
            };
            for (i, (p, n, answer)) in jobs.into_iter().enumerate() {
                let mut rng = GenerationRng::new(l2d_harness::eval::example_seed(seed, i));
                let out = generator.generate_sequence(&p, n, &cfg, eos, &mut rng)?;
                if let Some(w) = trace_out.as_mut() {
                    for (j, tr) in out.traces.iter().enumerate() {
                        l2d_core::inference::write_trace(&mut *w, p.len() + j, tr)?;
                    }
                }
                let verdict = match answer {
                    Some(a) if a == out.tokens => " correct",
                    Some(_) => " wrong",
                    None => "",
                };
                println!(
                    "prompt [{}] -> [{}] evals {:?}{verdict}",
                    format_tokens(&p),
                    format_tokens(&out.tokens),
                    out.evals
                );
            }
            if let Some(mut w) = trace_out {
                w.flush()?;
            }
        }
        Command::Eval { common, task, gen } => {
            let kind = TaskKind::parse(&task)?;
            let exp = open(&common, |_| {})?;
            let spec = arm_spec(&gen, &exp.cfg)?;
            let base = exp.base()?;
            let mut report = exp.base_rows(&base, kind)?;
            for &seed in &exp.cfg.seeds {
                let path = exp.l2d(&base, kind, seed, None)?;
                report.rows.push(eval_l2d(
                    &base,
                    &path,
                    exp.task(kind),
                    &spec,
                    seed,
                    exp.cfg.eval.max_examples,
                    None,
                )?);
            }
            report.save(&exp.eval_path(&format!("eval_{kind}")), true)?;
            print_report(&report)?;
        }
        Command::SweepSteps { common } => {
            let exp = open(&common, |_| {})?;
            let base = exp.base()?;
            let paths = exp.l2d_all(&base)?;
            let steps = exp.step_sweep(&base, &paths)?;
            exp.loss_profile(&base, &paths)?;
            let comparison = exp.comparison(&base, &steps)?;
            let summary = exp.write_summary(&steps, &comparison)?;
            print!("{}", std::fs::read_to_string(summary)?);
        }
        Command::SweepGuidance { common } => {
            let exp = open(&common, |_| {})?;
            let base = exp.base()?;
            let paths = exp.l2d_all(&base)?;
            print_report(&exp.guidance_sweep(&base, &paths)?)?;
        }
        Command::SweepSigma { common } => {
            let exp = open(&common, |_| {})?;
            let base = exp.base()?;
            print_report(&exp.sigma_sweep(&base)?)?;
        }
        Command::SolverBench { common } => {
            let exp = open(&common, |_| {})?;
            let base = exp.base()?;
            let paths = exp.l2d_all(&base)?;
            let report = exp.solver_bench(&base, &paths)?;
            print_report(&report)?;
            for (task, steps) in Experiment::adaptive_step_means(&report) {
                eprintln!("adaptive mean steps per token, {task}: {steps:.2}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
