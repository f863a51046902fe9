//! Experiment driver: artifact layout, resumable stages and reports.
//!
//! Layout under the artifact directory:
//! `config.toml`, `checkpoints/*.ckpt`, `metrics/*.csv`, `eval/*.csv`,
//! `traces/*.jsonl` and `summary.csv`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use l2d_core::base_lm::{pretrain, BaseLm, PretrainRecord};
use l2d_core::data::LmSequence;
use l2d_core::diffusion_path::DiffusionPath;
use l2d_core::inference::{GuidanceForm, SolverKind, SolverSpec};
use l2d_core::training::{baseline_lora_finetune, train_l2d, validation_loss, TrainOutputs};
use l2d_core::{L2dError, Result};

use crate::config::ExperimentConfig;
use crate::eval::{csv_err, csv_writer, eval_l2d, eval_main_path, ArmSpec, EvalReport};
use crate::tasks::{make_task, Split, Task, TaskKind};

pub type Model = BaseLm<f32>;
pub type Path32 = DiffusionPath<f32>;

/// Timesteps of the validation loss profile.
pub const LOSS_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Noise draws for validation losses come from this seed.
const PROFILE_SEED: u64 = 0x7072_6f66;

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    tasks: BTreeMap<TaskKind, Task>,
}

/// Loss of a trained path at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPoint {
    pub task: TaskKind,
    pub seed: u64,
    pub t: f64,
    pub loss: f64,
}

/// One row of the arm comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub task: TaskKind,
    pub arm: String,
    pub n_seeds: usize,
    pub accuracy: f64,
    pub val_ce: Option<f64>,
}

fn fmt_sigma(s: f64) -> String {
    format!("{s}").replace('.', "p")
}

impl Experiment {
    /// Opens (or resumes) an experiment directory. A directory that already
    /// holds a different configuration is refused.
    pub fn open(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        for sub in ["checkpoints", "metrics", "eval", "traces"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let snapshot = dir.join("config.toml");
        if snapshot.exists() {
            let previous = ExperimentConfig::load(&snapshot)?;
            if previous != cfg {
                return Err(L2dError::Config(format!(
                    "{} holds a different configuration; use a fresh directory",
                    dir.display()
                )));
            }
        } else {
            std::fs::write(&snapshot, cfg.to_toml())?;
        }
        let mut tasks = BTreeMap::new();
        for kind in TaskKind::ALL {
            tasks.insert(kind, make_task(kind, &cfg.sizes, cfg.data_seed)?);
        }
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
            tasks,
        })
    }

    pub fn task(&self, kind: TaskKind) -> &Task {
        &self.tasks[&kind]
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn metrics(&self, name: &str) -> PathBuf {
        self.dir.join("metrics").join(format!("{name}.csv"))
    }

    pub fn eval_path(&self, name: &str) -> PathBuf {
        self.dir.join("eval").join(format!("{name}.csv"))
    }

    pub fn trace_path(&self, name: &str) -> PathBuf {
        self.dir.join("traces").join(format!("{name}.jsonl"))
    }

    fn mixture(&self, split: Split) -> Vec<LmSequence> {
        self.tasks.values().flat_map(|t| t.sequences(split)).collect()
    }

    /// The frozen main path, pretrained on all task kinds.
    pub fn base(&self) -> Result<Model> {
        let ck = self.checkpoint("base");
        if ck.exists() {
            let base = Model::load(&ck)?;
            if base.config() != &self.cfg.base {
                return Err(L2dError::Checkpoint(format!(
                    "{} was trained with another config",
                    ck.display()
                )));
            }
            return Ok(base);
        }
        let (mut base, log) = pretrain::<f32>(
            &self.cfg.base,
            &self.mixture(Split::Train),
            &self.mixture(Split::Val),
            &self.cfg.pretrain,
        )?;
        base.freeze();
        write_pretrain_csv(&self.metrics("pretrain"), &log)?;
        base.save(&ck)?;
        Ok(base)
    }

    fn l2d_name(kind: TaskKind, seed: u64, sigma: Option<f64>) -> String {
        match sigma {
            None => format!("l2d_{kind}_s{seed}"),
            Some(s) => format!("l2d_{kind}_s{seed}_sigma{}", fmt_sigma(s)),
        }
    }

    /// A diffusion path trained on one task; `sigma` overrides the noise scale.
    pub fn l2d(&self, base: &Model, kind: TaskKind, seed: u64, sigma: Option<f64>) -> Result<Path32> {
        let name = Self::l2d_name(kind, seed, sigma);
        let ck = self.checkpoint(&name);
        if ck.exists() {
            return Path32::load(&ck, base);
        }
        let mut pcfg = self.cfg.path.clone();
        if let Some(s) = sigma {
            pcfg.sigma = s;
        }
        let mut path = Path32::init_from_main(base, pcfg, seed)?;
        let mut tcfg = self.cfg.l2d.clone();
        tcfg.seed = seed;
        let task = self.task(kind);
        let outputs = TrainOutputs {
            metrics_csv: Some(self.metrics(&name)),
            checkpoint: Some(ck),
            checkpoint_every: 0,
        };
        train_l2d(
            &tcfg,
            base,
            &mut path,
            &task.sequences(Split::Train),
            &task.sequences(Split::Val),
            &outputs,
        )?;
        Ok(path)
    }

    /// Every L2D path of the experiment, keyed by task and seed.
    pub fn l2d_all(&self, base: &Model) -> Result<BTreeMap<(TaskKind, u64), Path32>> {
        let mut out = BTreeMap::new();
        for &kind in &self.cfg.tasks {
            for &seed in &self.cfg.seeds {
                out.insert((kind, seed), self.l2d(base, kind, seed, None)?);
            }
        }
        Ok(out)
    }

    /// The main path with merged LoRA adapters trained on one task.
    pub fn baseline(&self, base: &Model, kind: TaskKind, seed: u64) -> Result<Model> {
        let arm = self
            .cfg
            .baseline
            .as_ref()
            .ok_or_else(|| L2dError::Config("the experiment has no baseline arm".into()))?;
        let name = format!("baseline_{kind}_s{seed}");
        let ck = self.checkpoint(&name);
        if ck.exists() {
            return Model::load(&ck);
        }
        let mut cfg = arm.lora.clone();
        cfg.train.seed = seed;
        let task = self.task(kind);
        let (merged, _) = baseline_lora_finetune(
            &cfg,
            base,
            &task.sequences(Split::Train),
            &task.sequences(Split::Val),
            Some(&self.metrics(&name)),
        )?;
        merged.save(&ck)?;
        Ok(merged)
    }

    fn step_arms(&self) -> Result<Vec<ArmSpec>> {
        self.cfg
            .eval
            .budgets
            .iter()
            .map(|&b| {
                Ok(ArmSpec {
                    solver: SolverSpec::for_budget(b)?,
                    w_g: None,
                    form: GuidanceForm::Interpolate,
                    mode: self.cfg.eval.mode,
                    temperature: self.cfg.eval.temperature,
                })
            })
            .collect()
    }

    /// Main-path accuracy, one row per seed.
    pub fn base_rows(&self, base: &Model, kind: TaskKind) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        for &seed in &self.cfg.seeds {
            report.rows.push(eval_main_path(
                base,
                self.task(kind),
                "base",
                seed,
                self.cfg.eval.temperature,
                self.cfg.eval.max_examples,
            )?);
        }
        Ok(report)
    }

    /// Accuracy against the evaluation budget for every task and seed.
    pub fn step_sweep(&self, base: &Model, paths: &BTreeMap<(TaskKind, u64), Path32>) -> Result<EvalReport> {
        let arms = self.step_arms()?;
        let mut report = EvalReport::default();
        for &kind in &self.cfg.tasks {
            report.extend(self.base_rows(base, kind)?);
            for spec in &arms {
                for &seed in &self.cfg.seeds {
                    let path = &paths[&(kind, seed)];
                    let row = eval_l2d(
                        base,
                        path,
                        self.task(kind),
                        spec,
                        seed,
                        self.cfg.eval.max_examples,
                        None,
                    )?;
                    report.rows.push(row);
                }
            }
        }
        report.save(&self.eval_path("steps"), true)?;
        Ok(report)
    }

    /// Validation diffusion loss over `LOSS_GRID` for every task and seed.
    pub fn loss_profile(&self, base: &Model, paths: &BTreeMap<(TaskKind, u64), Path32>) -> Result<Vec<LossPoint>> {
        let mut points = Vec::new();
        for (&(task, seed), path) in paths {
            let val = self.task(task).sequences(Split::Val);
            for &t in &LOSS_GRID {
                let loss = validation_loss(path, base, &val, t, PROFILE_SEED)?;
                points.push(LossPoint { task, seed, t, loss });
            }
        }
        let file = std::fs::File::create(self.eval_path("loss_vs_t"))?;
        let mut w = csv_writer(std::io::BufWriter::new(file));
        w.write_record(["task", "seed", "t", "loss"]).map_err(csv_err)?;
        for p in &points {
            w.write_record([
                p.task.name().to_string(),
                p.seed.to_string(),
                p.t.to_string(),
                format!("{:.6}", p.loss),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(points)
    }

    /// Main path, LoRA baseline and L2D arms side by side, seed means.
    pub fn comparison(&self, base: &Model, steps: &EvalReport) -> Result<Vec<ComparisonRow>> {
        let mut kinds: Vec<TaskKind> = self.cfg.tasks.clone();
        if let Some(arm) = &self.cfg.baseline {
            kinds.extend(arm.tasks.iter().copied());
        }
        kinds.sort();
        kinds.dedup();
        let mut rows = Vec::new();
        for kind in kinds {
            let task = self.task(kind);
            let val = task.sequences(Split::Val);
            let base_acc = match steps.mean_accuracy(kind.name(), "base", None) {
                Some(a) => a,
                None => self
                    .base_rows(base, kind)?
                    .mean_accuracy(kind.name(), "base", None)
                    .unwrap_or(0.0),
            };
            rows.push(ComparisonRow {
                task: kind,
                arm: "base".into(),
                n_seeds: self.cfg.seeds.len(),
                accuracy: base_acc,
                val_ce: Some(base.lm_loss(&val)?),
            });
            if let Some(arm) = &self.cfg.baseline {
                if arm.tasks.contains(&kind) {
                    let (mut acc, mut ce) = (0.0, 0.0);
                    let seeds = &self.cfg.seeds[..arm.n_seeds];
                    for &seed in seeds {
                        let model = self.baseline(base, kind, seed)?;
                        acc += eval_main_path(
                            &model,
                            task,
                            "lora",
                            seed,
                            self.cfg.eval.temperature,
                            self.cfg.eval.max_examples,
                        )?
                        .accuracy;
                        ce += model.lm_loss(&val)?;
                    }
                    let n = seeds.len() as f64;
                    rows.push(ComparisonRow {
                        task: kind,
                        arm: "lora".into(),
                        n_seeds: seeds.len(),
                        accuracy: acc / n,
                        val_ce: Some(ce / n),
                    });
                }
            }
            if self.cfg.tasks.contains(&kind) {
                for &b in &self.cfg.eval.budgets {
                    if let Some(acc) = steps.mean_accuracy(kind.name(), "l2d", Some(b)) {
                        rows.push(ComparisonRow {
                            task: kind,
                            arm: format!("l2d_T{b}"),
                            n_seeds: self.cfg.seeds.len(),
                            accuracy: acc,
                            val_ce: None,
                        });
                    }
                }
            }
        }
        let file = std::fs::File::create(self.eval_path("comparison"))?;
        let mut w = csv_writer(std::io::BufWriter::new(file));
        w.write_record(["task", "arm", "n_seeds", "accuracy", "val_ce"])
            .map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                r.task.name().to_string(),
                r.arm.clone(),
                r.n_seeds.to_string(),
                format!("{:.6}", r.accuracy),
                r.val_ce.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(rows)
    }

    /// Accuracy against guidance strength at the configured budget.
    pub fn guidance_sweep(&self, base: &Model, paths: &BTreeMap<(TaskKind, u64), Path32>) -> Result<EvalReport> {
        let solver = SolverSpec::for_budget(self.cfg.sweeps.guidance_budget)?;
        let mut report = EvalReport::default();
        for &w in &self.cfg.sweeps.guidance {
            let spec = ArmSpec {
                solver,
                w_g: Some(w),
                form: GuidanceForm::Interpolate,
                mode: self.cfg.eval.mode,
                temperature: self.cfg.eval.temperature,
            };
            for (&(kind, seed), path) in paths {
                report.rows.push(eval_l2d(
                    base,
                    path,
                    self.task(kind),
                    &spec,
                    seed,
                    self.cfg.eval.max_examples,
                    None,
                )?);
            }
        }
        report.save(&self.eval_path("guidance"), true)?;
        Ok(report)
    }

    /// Retrains the first seed's path at each noise scale and scores it.
    pub fn sigma_sweep(&self, base: &Model) -> Result<EvalReport> {
        let seed = self.cfg.seeds[0];
        let spec = ArmSpec {
            solver: SolverSpec::for_budget(self.cfg.sweeps.sigma_budget)?,
            w_g: None,
            form: GuidanceForm::Interpolate,
            mode: self.cfg.eval.mode,
            temperature: self.cfg.eval.temperature,
        };
        let mut report = EvalReport::default();
        for &sigma in &self.cfg.sweeps.sigma {
            for &kind in &self.cfg.tasks {
                let path = self.l2d(base, kind, seed, Some(sigma))?;
                report.rows.push(eval_l2d(
                    base,
                    &path,
                    self.task(kind),
                    &spec,
                    seed,
                    self.cfg.eval.max_examples,
                    None,
                )?);
            }
        }
        report.save(&self.eval_path("sigma"), true)?;
        Ok(report)
    }

    /// Compares solvers, recording evaluations and steps per token. Adaptive
    /// runs also write per-step traces.
    pub fn solver_bench(&self, base: &Model, paths: &BTreeMap<(TaskKind, u64), Path32>) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        for solver in &self.cfg.sweeps.solvers {
            let spec = ArmSpec {
                solver: *solver,
                w_g: None,
                form: GuidanceForm::Interpolate,
                mode: self.cfg.eval.mode,
                temperature: self.cfg.eval.temperature,
            };
            for (&(kind, seed), path) in paths {
                let row = if solver.kind == SolverKind::AdaptiveRk2 {
                    let file = std::fs::File::create(self.trace_path(&format!("adaptive_{kind}_s{seed}")))?;
                    let mut w = std::io::BufWriter::new(file);
                    let row = eval_l2d(
                        base,
                        path,
                        self.task(kind),
                        &spec,
                        seed,
                        self.cfg.eval.max_examples,
                        Some(&mut w),
                    )?;
                    w.flush()?;
                    row
                } else {
                    eval_l2d(
                        base,
                        path,
                        self.task(kind),
                        &spec,
                        seed,
                        self.cfg.eval.max_examples,
                        None,
                    )?
                };
                report.rows.push(row);
            }
        }
        report.save(&self.eval_path("solvers"), true)?;
        Ok(report)
    }

    /// Per-task mean adaptive steps per token, from a solver bench report.
    pub fn adaptive_step_means(report: &EvalReport) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in report.rows.iter().filter(|r| r.solver.starts_with("adaptive")) {
            let e = acc.entry(r.task.clone()).or_default();
            e.0 += r.mean_steps;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// The step-sweep table: one row per task and seed plus a seed mean, one
    /// accuracy column per budget. Contains no timing, so reruns reproduce it
    /// byte for byte.
    pub fn write_summary(&self, steps: &EvalReport, comparison: &[ComparisonRow]) -> Result<PathBuf> {
        let out = self.dir.join("summary.csv");
        let file = std::fs::File::create(&out)?;
        let mut w = csv_writer(std::io::BufWriter::new(file));
        let mut header = vec!["task".to_string(), "seed".into(), "base".into(), "lora".into()];
        header.extend(self.cfg.eval.budgets.iter().map(|b| format!("T{b}")));
        w.write_record(&header).map_err(csv_err)?;
        let lora = |kind: TaskKind| {
            comparison
                .iter()
                .find(|r| r.task == kind && r.arm == "lora")
                .map(|r| format!("{:.6}", r.accuracy))
                .unwrap_or_default()
        };
        for &kind in &self.cfg.tasks {
            let name = kind.name();
            for &seed in &self.cfg.seeds {
                let pick = |arm: &str, budget: Option<usize>| {
                    steps
                        .select(name, arm, budget)
                        .find(|r| r.seed == seed)
                        .map(|r| format!("{:.6}", r.accuracy))
                        .unwrap_or_default()
                };
                let mut rec = vec![name.to_string(), seed.to_string(), pick("base", None), String::new()];
                rec.extend(self.cfg.eval.budgets.iter().map(|&b| pick("l2d", Some(b))));
                w.write_record(&rec).map_err(csv_err)?;
            }
            let mean = |arm: &str, budget: Option<usize>| {
                steps
                    .mean_accuracy(name, arm, budget)
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_default()
            };
            let mut rec = vec![name.to_string(), "mean".into(), mean("base", None), lora(kind)];
            rec.extend(self.cfg.eval.budgets.iter().map(|&b| mean("l2d", Some(b))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(out)
    }

    /// Runs every stage, reusing checkpoints already on disk.
    pub fn run(&self) -> Result<PathBuf> {
        let base = self.base()?;
        let paths = self.l2d_all(&base)?;
        let steps = self.step_sweep(&base, &paths)?;
        self.loss_profile(&base, &paths)?;
        let comparison = self.comparison(&base, &steps)?;
        if !self.cfg.sweeps.guidance.is_empty() {
            self.guidance_sweep(&base, &paths)?;
        }
        if !self.cfg.sweeps.sigma.is_empty() {
            self.sigma_sweep(&base)?;
        }
        if !self.cfg.sweeps.solvers.is_empty() {
            self.solver_bench(&base, &paths)?;
        }
        self.write_summary(&steps, &comparison)
    }
}

fn write_pretrain_csv(path: &Path, log: &[PretrainRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv_writer(std::io::BufWriter::new(file));
    w.write_record(["step", "lr", "train_loss", "val_loss"])
        .map_err(csv_err)?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.lr),
            format!("{:.6}", r.train_loss),
            r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
