use std::collections::HashSet;
use std::path::Path;
use std::process::Command;

use l2d_core::base_lm::{BaseLmConfig, PositionEncoding, PretrainConfig};
use l2d_core::data::TokenId;
use l2d_core::diffusion_path::PathConfig;
use l2d_core::inference::{SolverKind, SolverSpec};
use l2d_core::training::{BaselineConfig, TrainConfig};
use l2d_core::L2dError;
use l2d_harness::config::{BaselineArm, EvalConfig, ExperimentConfig, SweepConfig};
use l2d_harness::eval::{eval_l2d, eval_main_path, ArmSpec};
use l2d_harness::experiment::{Experiment, Path32};
use l2d_harness::tasks::{exact_match, make_task, solve, Split, TaskKind, TaskSizes, BOS, FIRST_SYMBOL, SEP};

fn tiny() -> ExperimentConfig {
    let sizes = TaskSizes {
        n_train: 200,
        n_val: 16,
        n_test: 12,
        n_symbols: 10,
        payload_len: 3,
        n_operands: 2,
        n_pairs: 3,
        prime: 5,
    };
    let train = TrainConfig {
        lr_peak: 3e-3,
        lr_floor: 1e-4,
        warmup: 2,
        batch_size: 8,
        max_steps: Some(6),
        eval_every: 3,
        ..TrainConfig::default()
    };
    ExperimentConfig {
        name: "tiny".into(),
        seeds: vec![1, 2],
        data_seed: 3,
        tasks: vec![TaskKind::KeyedRecall, TaskKind::ModularSum],
        base: BaseLmConfig {
            vocab_size: sizes.vocab_size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            position_encoding: PositionEncoding::Rotary,
            mlp_ratio: 2,
            rope_base: 10_000.0,
        },
        sizes,
        pretrain: PretrainConfig {
            steps: 20,
            batch_size: 8,
            warmup: 2,
            eval_every: 10,
            ..PretrainConfig::default()
        },
        path: PathConfig {
            diffusion_dim: 8,
            time_dim: 8,
            cond_hidden: 16,
            lora_rank: 2,
            lora_alpha: 4.0,
            n_classes: 4,
            ..PathConfig::default()
        },
        l2d: train.clone(),
        baseline: Some(BaselineArm {
            tasks: vec![TaskKind::Copy, TaskKind::KeyedRecall],
            n_seeds: 1,
            lora: BaselineConfig {
                train,
                ..BaselineConfig::default()
            },
        }),
        eval: EvalConfig {
            budgets: vec![1, 2, 4, 8, 15, 31],
            temperature: 0.0,
            mode: Default::default(),
            max_examples: Some(6),
        },
        sweeps: SweepConfig {
            guidance: vec![0.0, 1.0],
            guidance_budget: 4,
            sigma: vec![],
            sigma_budget: 4,
            solvers: vec![SolverSpec::fixed(SolverKind::Rk4, 3), SolverSpec::adaptive(1e-2, 1e-2)],
        },
    }
}

fn sym(i: usize) -> TokenId {
    FIRST_SYMBOL + i as TokenId
}

#[test]
fn tasks_are_deterministic_with_disjoint_splits() {
    let sizes = tiny().sizes;
    for kind in TaskKind::ALL {
        let a = make_task(kind, &sizes, 9).unwrap();
        let b = make_task(kind, &sizes, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, make_task(kind, &sizes, 10).unwrap().train);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (200, 16, 12));
        let prompts = |s: Split| a.split(s).iter().map(|e| e.prompt.clone()).collect::<HashSet<_>>();
        let (tr, va, te) = (prompts(Split::Train), prompts(Split::Val), prompts(Split::Test));
        assert!(
            tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te),
            "{kind}"
        );
        for ex in a.train.iter().chain(&a.test) {
            assert_eq!(ex.class_id, kind.class_id());
            assert!(ex.prompt.len() + ex.answer.len() <= sizes.max_len());
            let seq = ex.to_sequence();
            let mask = seq.target_mask.unwrap();
            assert_eq!(mask.iter().filter(|&&m| m).count(), ex.answer.len());
        }
    }
}

/// Reads the symbol payload back out of a prompt without the library's parser.
fn oracle(kind: TaskKind, sizes: &TaskSizes, prompt: &[TokenId]) -> Vec<TokenId> {
    let syms: Vec<usize> = prompt
        .iter()
        .filter(|&&t| t >= FIRST_SYMBOL)
        .map(|&t| (t - FIRST_SYMBOL) as usize)
        .collect();
    match kind {
        TaskKind::Copy => syms.into_iter().map(sym).collect(),
        TaskKind::Reverse => syms.into_iter().rev().map(sym).collect(),
        TaskKind::ModularSum => {
            let mut acc = 0;
            for s in syms {
                if s < sizes.prime {
                    acc = (acc + s) % sizes.prime;
                }
            }
            vec![sym(acc)]
        }
        TaskKind::KeyedRecall => {
            let query = *syms.last().unwrap();
            let mut value = None;
            let mut i = 0;
            while i + 1 < syms.len() - 1 {
                if syms[i] == query {
                    value = Some(syms[i + 1]);
                }
                i += 2;
            }
            vec![sym(value.unwrap())]
        }
    }
}

#[test]
fn answers_match_an_independent_oracle() {
    let sizes = TaskSizes {
        n_train: 100,
        ..TaskSizes::default()
    };
    for kind in TaskKind::ALL {
        let task = make_task(kind, &sizes, 4).unwrap();
        assert_eq!(task.train.len(), 100);
        for ex in &task.train {
            let want = oracle(kind, &sizes, &ex.prompt);
            assert_eq!(ex.answer, want, "{kind} {:?}", ex.prompt);
            assert!(exact_match(&want, &ex.answer));
            let mut wrong = want.clone();
            wrong[0] = if wrong[0] == sym(0) { sym(1) } else { sym(0) };
            assert!(!exact_match(&wrong, &ex.answer));
        }
    }
}

#[test]
fn modular_sum_ignores_distractors() {
    let sizes = TaskSizes::default();
    let prompt = [BOS, TaskKind::ModularSum.marker(), sym(3), sym(12), sym(5), SEP];
    assert_eq!(solve(TaskKind::ModularSum, &sizes, &prompt), Some(vec![sym(1)]));
    let recall = [
        BOS,
        TaskKind::KeyedRecall.marker(),
        sym(2),
        sym(9),
        sym(4),
        sym(11),
        SEP,
        sym(4),
    ];
    assert_eq!(solve(TaskKind::KeyedRecall, &sizes, &recall), Some(vec![sym(11)]));
    assert_eq!(
        solve(TaskKind::Copy, &sizes, &[BOS, TaskKind::Reverse.marker(), sym(1), SEP]),
        None
    );
}

#[test]
fn too_small_vocabulary_is_a_config_error() {
    let sizes = TaskSizes {
        n_symbols: 6,
        n_pairs: 4,
        ..TaskSizes::default()
    };
    let err = make_task(TaskKind::KeyedRecall, &sizes, 0).unwrap_err();
    assert!(
        matches!(&err, L2dError::Config(m) if m.contains("needs at least 8 symbols")),
        "{err}"
    );
    let err = make_task(TaskKind::ModularSum, &sizes, 0).unwrap_err();
    assert!(matches!(err, L2dError::Config(_)));
    let mut cfg = tiny();
    cfg.sizes.n_symbols = 4;
    assert!(matches!(cfg.validate(), Err(L2dError::Config(_))));
}

#[test]
fn toml_round_trip_and_field_errors() {
    let cfg = ExperimentConfig::toy();
    let text = cfg.to_toml();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);

    let missing: String = text
        .lines()
        .filter(|l| !l.starts_with("data_seed"))
        .map(|l| format!("{l}\n"))
        .collect();
    let err = ExperimentConfig::from_toml(&missing).unwrap_err().to_string();
    assert!(err.contains("data_seed"), "{err}");

    let unknown = text.replacen("data_seed", "dataseed", 1);
    let err = ExperimentConfig::from_toml(&unknown).unwrap_err().to_string();
    assert!(err.contains("dataseed"), "{err}");

    let mut bad = cfg.clone();
    bad.base.vocab_size += 1;
    assert!(ExperimentConfig::from_toml(&bad.to_toml()).is_err());
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn experiment_is_reproducible_and_resumable() {
    let cfg = tiny();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let e1 = Experiment::open(cfg.clone(), d1.path()).unwrap();
    let s1 = read(&e1.run().unwrap());
    let e2 = Experiment::open(cfg.clone(), d2.path()).unwrap();
    let s2 = read(&e2.run().unwrap());
    assert_eq!(s1, s2);

    let header = s1.lines().next().unwrap();
    assert_eq!(header, "task,seed,base,lora,T1,T2,T4,T8,T15,T31");
    // two seeds plus a mean row per task
    assert_eq!(s1.lines().count(), 1 + 2 * 3);
    // T=1 is a single prediction at t=0, which is the main path's own answer
    for line in s1.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], f[4], "{line}");
    }

    let steps = read(&d1.path().join("eval/steps.csv"));
    let l2d_rows = steps.lines().filter(|l| l.contains(",l2d,")).count();
    assert_eq!(l2d_rows, cfg.tasks.len() * cfg.eval.budgets.len() * cfg.seeds.len());
    for name in ["loss_vs_t", "comparison", "guidance", "solvers"] {
        assert!(d1.path().join(format!("eval/{name}.csv")).exists(), "{name}");
    }
    let comparison = read(&d1.path().join("eval/comparison.csv"));
    assert!(comparison.contains("copy,lora,1,"));
    assert!(comparison.contains("keyed_recall,l2d_T15,2,"));
    let trace = read(&d1.path().join("traces/adaptive_keyed_recall_s1.jsonl"));
    assert!(trace.lines().next().unwrap().starts_with('{'));
    assert!(d1.path().join("metrics/pretrain.csv").exists());
    assert!(d1.path().join("metrics/l2d_modular_sum_s2.csv").exists());

    // resuming reuses every checkpoint, so the files are untouched
    let ck = d1.path().join("checkpoints/l2d_keyed_recall_s1.ckpt");
    let before = std::fs::metadata(&ck).unwrap().modified().unwrap();
    let e1 = Experiment::open(cfg.clone(), d1.path()).unwrap();
    assert_eq!(read(&e1.run().unwrap()), s1);
    assert_eq!(std::fs::metadata(&ck).unwrap().modified().unwrap(), before);

    let mut other = cfg.clone();
    other.seeds = vec![7];
    assert!(matches!(Experiment::open(other, d1.path()), Err(L2dError::Config(_))));

    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let base = e1.base().unwrap();
    let err = e1.l2d(&base, TaskKind::KeyedRecall, 1, None).unwrap_err();
    assert!(matches!(err, L2dError::Checkpoint(_) | L2dError::Io(_)), "{err}");
}

#[test]
fn budget_one_reproduces_the_main_path() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::open(cfg.clone(), dir.path()).unwrap();
    let base = exp.base().unwrap();
    let path = Path32::init_from_main(&base, cfg.path.clone(), 5).unwrap();
    for kind in TaskKind::ALL {
        let task = exp.task(kind);
        let base_row = eval_main_path(&base, task, "base", 5, 0.0, None).unwrap();
        for budget in [1, 8] {
            let spec = ArmSpec {
                solver: SolverSpec::for_budget(budget).unwrap(),
                w_g: None,
                form: Default::default(),
                mode: cfg.eval.mode,
                temperature: 0.0,
            };
            let row = eval_l2d(&base, &path, task, &spec, 5, None, None).unwrap();
            // an untrained path has a zero merge at every t
            assert_eq!(row.correct, base_row.correct, "{kind} T={budget}");
            assert_eq!(row.budget, Some(budget));
            assert_eq!(row.mean_evals, budget as f64);
        }
    }
}

fn l2d() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l2d"))
}

#[test]
fn cli_smoke() {
    let out = l2d().arg("config").output().unwrap();
    assert!(out.status.success());
    let toy = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(toy, ExperimentConfig::toy());

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.baseline = None;
    cfg.sweeps = SweepConfig {
        guidance: vec![],
        guidance_budget: 4,
        sigma: vec![],
        sigma_budget: 4,
        solvers: vec![],
    };
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out_dir = dir.path().join("out");
    let common = [
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];

    let out = l2d().arg("run").args(common).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout, read(&out_dir.join("summary.csv")));

    let trace = dir.path().join("trace.jsonl");
    let out = l2d()
        .args(["generate", "--task", "keyed_recall", "--seed", "1", "--examples", "0,1"])
        .args([
            "--solver",
            "adaptive-rk2",
            "--abs-tol",
            "1e-2",
            "--rel-tol",
            "1e-2",
            "--trace",
        ])
        .arg(&trace)
        .args(common)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    assert!(read(&trace).lines().count() >= 2);

    let out = l2d()
        .args(["eval", "--task", "modular_sum", "--budget", "3", "--w-g", "1.5"])
        .args(common)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.lines().any(|l| l.contains(",l2d,1,midpoint:2,3,1.5,")), "{csv}");

    let out = l2d().args(["eval", "--task", "sorting"]).args(common).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sorting"));

    let out = l2d()
        .args(["generate", "--task", "copy", "--seed", "1", "--budget", "0"])
        .args(common)
        .output()
        .unwrap();
    assert!(!out.status.success());
}
