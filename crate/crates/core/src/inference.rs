//! Next-token generation by integrating the diffusion ODE, with fixed-step
//! and adaptive solvers, classifier-free guidance and cache reuse.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::{argmax, sample_categorical, sample_token, BaseLm, KvCache};
use crate::data::TokenId;
use crate::diffusion_core::{sample_noise, velocity, DiffusionState, Schedule};
use crate::diffusion_path::{DiffusionPath, DiffusionVocab, PathQuery};
use crate::error::{L2dError, Result};
use crate::numerics::{softmax_row, Scalar};

/// Smallest step the adaptive controller may take.
pub const MIN_ADAPTIVE_STEP: f64 = 1e-6;

const MAX_ADAPTIVE_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// No integration: a single prediction at `t = 0`.
    Direct,
    Euler,
    Midpoint,
    Rk4,
    AdaptiveRk2,
}

impl SolverKind {
    /// Model evaluations per fixed subinterval.
    pub fn stages(self) -> usize {
        match self {
            SolverKind::Direct => 0,
            SolverKind::Euler => 1,
            SolverKind::Midpoint => 2,
            SolverKind::Rk4 => 4,
            SolverKind::AdaptiveRk2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Grid points for fixed-step kinds, endpoints included.
    #[serde(default)]
    pub endpoints: usize,
    #[serde(default = "default_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_tol")]
    pub rel_tol: f64,
    /// Stop at `1 - 1/sigma` instead of 1.
    pub early_stop: bool,
}

fn default_tol() -> f64 {
    3e-4
}

impl SolverSpec {
    pub fn direct() -> Self {
        Self {
            kind: SolverKind::Direct,
            endpoints: 1,
            abs_tol: default_tol(),
            rel_tol: default_tol(),
            early_stop: false,
        }
    }

    /// A fixed-step solver; early stopping defaults on for RK4 only.
    pub fn fixed(kind: SolverKind, endpoints: usize) -> Self {
        Self {
            kind,
            endpoints,
            abs_tol: default_tol(),
            rel_tol: default_tol(),
            early_stop: kind == SolverKind::Rk4,
        }
    }

    pub fn adaptive(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            kind: SolverKind::AdaptiveRk2,
            endpoints: 0,
            abs_tol,
            rel_tol,
            early_stop: true,
        }
    }

    /// The fixed-step solver spending exactly `budget` path evaluations per
    /// token (final prediction included): midpoint for odd budgets of at
    /// least 3, Euler otherwise, and a single direct prediction for 1.
    pub fn for_budget(budget: usize) -> Result<Self> {
        match budget {
            0 => Err(L2dError::Config("the diffusion budget must be at least 1".into())),
            1 => Ok(Self::direct()),
            b if b % 2 == 1 => Ok(Self::fixed(SolverKind::Midpoint, b.div_ceil(2))),
            b => Ok(Self::fixed(SolverKind::Euler, b)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Direct => Ok(()),
            SolverKind::AdaptiveRk2 => {
                if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
                    return Err(L2dError::Config("adaptive tolerances must be positive".into()));
                }
                Ok(())
            }
            _ if self.endpoints < 2 => Err(L2dError::Config(format!(
                "fixed-step solvers need at least 2 endpoints, got {}",
                self.endpoints
            ))),
            _ => Ok(()),
        }
    }

    /// Path evaluations per token for fixed-step kinds: `(E - 1) s + 1`.
    pub fn evals_per_token(&self) -> Option<usize> {
        match self.kind {
            SolverKind::Direct => Some(1),
            SolverKind::AdaptiveRk2 => None,
            k => Some((self.endpoints - 1) * k.stages() + 1),
        }
    }

    pub fn stop_time(&self, schedule: &Schedule) -> f64 {
        match self.kind {
            SolverKind::Direct => 0.0,
            _ if self.early_stop => schedule.early_stop_time(),
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceForm {
    /// `w cond + (1 - w) uncond`.
    #[default]
    Interpolate,
    /// `w cond - (1 - w) uncond`.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub class_id: usize,
    pub w_g: f64,
    #[serde(default)]
    pub form: GuidanceForm,
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_g >= 0.0 && self.w_g.is_finite()) {
            return Err(L2dError::Config(format!("guidance strength {} must be >= 0", self.w_g)));
        }
        if self.class_id == 0 && self.w_g != 1.0 {
            return Err(L2dError::Config("guidance needs a real class id".into()));
        }
        Ok(())
    }
}

/// Combines conditional and unconditional logits.
pub fn guided_logits<F: Scalar>(cond: &[F], uncond: &[F], w_g: f64, form: GuidanceForm) -> Vec<F> {
    let w = F::lit(w_g);
    let u = match form {
        GuidanceForm::Interpolate => F::lit(1.0 - w_g),
        GuidanceForm::Printed => F::lit(-(1.0 - w_g)),
    };
    cond.iter().zip(uncond).map(|(&c, &n)| w * c + u * n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    #[default]
    Sample,
    Expectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionMode {
    pub kind: PredictionKind,
    pub base_temperature: f64,
    /// Temperature `base (1 - t)` instead of `base`.
    pub anneal: bool,
}

impl Default for PredictionMode {
    fn default() -> Self {
        Self {
            kind: PredictionKind::Sample,
            base_temperature: 1.0,
            anneal: true,
        }
    }
}

impl PredictionMode {
    pub fn temperature(&self, t: f64) -> f64 {
        if self.anneal {
            self.base_temperature * (1.0 - t)
        } else {
            self.base_temperature
        }
    }
}

/// A prediction of the clean token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x_hat: Vec<f64>,
    /// The token behind `x_hat` when it was sampled.
    pub token: Option<TokenId>,
}

impl From<Vec<f64>> for Prediction {
    fn from(x_hat: Vec<f64>) -> Self {
        Self { x_hat, token: None }
    }
}

/// `V_y` for `y ~ softmax(logits / tau(t))`, or `sum_y p_y V_y`.
pub fn predict_xhat<F: Scalar, R: Rng + ?Sized>(
    logits: &[F],
    mode: &PredictionMode,
    t: f64,
    rng: &mut R,
    vocab: &DiffusionVocab,
) -> Result<Prediction> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(L2dError::NonFinite("logits".into()));
    }
    if logits.len() != vocab.len() {
        return Err(L2dError::Shape(format!(
            "{} logits for {} embeddings",
            logits.len(),
            vocab.len()
        )));
    }
    if !(mode.base_temperature >= 0.0) {
        return Err(L2dError::Config(format!(
            "temperature {} must be >= 0",
            mode.base_temperature
        )));
    }
    match mode.kind {
        PredictionKind::Sample => {
            let tau = mode.temperature(t);
            let y = if tau <= 0.0 {
                argmax(logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / tau).collect();
                sample_categorical(&softmax_row(&scaled), rng)
            };
            Ok(Prediction {
                x_hat: vocab.embedding(y).to_vec(),
                token: Some(y as TokenId),
            })
        }
        PredictionKind::Expectation => {
            let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
            let p = softmax_row(&l);
            let mut x = vec![0.0; vocab.dim()];
            for (y, &py) in p.iter().enumerate() {
                if py == 0.0 {
                    continue;
                }
                for (xi, vi) in x.iter_mut().zip(vocab.embedding(y)) {
                    *xi += py * vi;
                }
            }
            Ok(Prediction { x_hat: x, token: None })
        }
    }
}

/// One accepted integration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub h: f64,
    /// Evaluations spent so far, this step included.
    pub evals: usize,
    pub y_t: Option<TokenId>,
    pub x_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Integration {
    pub x: Vec<f64>,
    /// Time actually reached.
    pub t: f64,
    pub evals: usize,
    pub steps: usize,
    pub rejected: usize,
    pub trace: Vec<TraceStep>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn axpy(x: &[f64], h: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + h * b).collect()
}

/// Integrates `dx/dt = (x_hat(x, t) - x) / (1 - t)` from `x0` at `t = 0`.
pub fn integrate<E>(solver: &SolverSpec, mut eval: E, x0: Vec<f64>, schedule: &Schedule) -> Result<Integration>
where
    E: FnMut(&[f64], f64) -> Result<Prediction>,
{
    solver.validate()?;
    let stop = solver.stop_time(schedule);
    let mut out = Integration {
        x: x0,
        t: 0.0,
        evals: 0,
        steps: 0,
        rejected: 0,
        trace: Vec::new(),
    };
    let mut field = |x: &[f64], t: f64, evals: &mut usize| -> Result<(Vec<f64>, Option<TokenId>)> {
        let p = eval(x, t)?;
        *evals += 1;
        let v = velocity(&p.x_hat, &DiffusionState { x: x.to_vec(), t })?;
        Ok((v, p.token))
    };
    match solver.kind {
        SolverKind::Direct => {}
        SolverKind::AdaptiveRk2 => {
            let mut h = (stop / 8.0).max(MIN_ADAPTIVE_STEP);
            let mut attempts = 0;
            while out.t < stop {
                attempts += 1;
                if attempts > MAX_ADAPTIVE_ATTEMPTS {
                    return Err(L2dError::StepUnderflow { t: out.t, h });
                }
                h = h.min(stop - out.t);
                let (k1, y) = field(&out.x, out.t, &mut out.evals)?;
                let euler = axpy(&out.x, h, &k1);
                let (k2, _) = field(&euler, out.t + h, &mut out.evals)?;
                let heun: Vec<f64> = out
                    .x
                    .iter()
                    .zip(k1.iter().zip(&k2))
                    .map(|(x, (a, b))| x + 0.5 * h * (a + b))
                    .collect();
                let err = heun
                    .iter()
                    .zip(&euler)
                    .zip(&out.x)
                    .map(|((a, b), x0)| {
                        let scale = solver.abs_tol + solver.rel_tol * a.abs().max(x0.abs());
                        (a - b).abs() / scale
                    })
                    .fold(0.0, f64::max);
                if !err.is_finite() {
                    return Err(L2dError::NonFinite(format!("adaptive error estimate at t={}", out.t)));
                }
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.5)).clamp(0.2, 5.0)
                };
                if err <= 1.0 {
                    out.trace.push(TraceStep {
                        t: out.t,
                        h,
                        evals: out.evals,
                        y_t: y,
                        x_norm: norm(&out.x),
                    });
                    out.x = heun;
                    out.t = if stop - (out.t + h) < 1e-12 { stop } else { out.t + h };
                    out.steps += 1;
                } else {
                    out.rejected += 1;
                }
                h *= factor;
                if h < MIN_ADAPTIVE_STEP && out.t < stop {
                    return Err(L2dError::StepUnderflow { t: out.t, h });
                }
            }
        }
        kind => {
            let n = solver.endpoints - 1;
            for i in 0..n {
                let t = stop * i as f64 / n as f64;
                let t_next = stop * (i + 1) as f64 / n as f64;
                let h = t_next - t;
                let x = &out.x;
                let (next, y) = match kind {
                    SolverKind::Euler => {
                        let (v, y) = field(x, t, &mut out.evals)?;
                        (axpy(x, h, &v), y)
                    }
                    SolverKind::Midpoint => {
                        let (v1, y) = field(x, t, &mut out.evals)?;
                        let xm = axpy(x, 0.5 * h, &v1);
                        let (v2, _) = field(&xm, t + 0.5 * h, &mut out.evals)?;
                        (axpy(x, h, &v2), y)
                    }
                    SolverKind::Rk4 => {
                        let (k1, y) = field(x, t, &mut out.evals)?;
                        let (k2, _) = field(&axpy(x, 0.5 * h, &k1), t + 0.5 * h, &mut out.evals)?;
                        let (k3, _) = field(&axpy(x, 0.5 * h, &k2), t + 0.5 * h, &mut out.evals)?;
                        let (k4, _) = field(&axpy(x, h, &k3), t_next, &mut out.evals)?;
                        let next = (0..x.len())
                            .map(|j| x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
                            .collect();
                        (next, y)
                    }
                    _ => unreachable!("handled above"),
                };
                out.trace.push(TraceStep {
                    t,
                    h,
                    evals: out.evals,
                    y_t: y,
                    x_norm: norm(&out.x),
                });
                out.x = next;
                out.t = t_next;
                out.steps += 1;
            }
        }
    }
    if out.x.iter().any(|v| !v.is_finite()) {
        return Err(L2dError::NonFinite(format!("diffusion state at t={}", out.t)));
    }
    Ok(out)
}

/// Independent random streams for the emitted tokens and for the diffusion
/// process, so the token stream matches plain ancestral sampling.
#[derive(Debug, Clone)]
pub struct GenerationRng {
    pub token: ChaCha8Rng,
    pub diffusion: ChaCha8Rng,
}

impl GenerationRng {
    pub fn new(seed: u64) -> Self {
        let token = ChaCha8Rng::seed_from_u64(seed);
        let mut diffusion = ChaCha8Rng::seed_from_u64(seed);
        diffusion.set_stream(1);
        Self { token, diffusion }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub solver: SolverSpec,
    #[serde(default)]
    pub mode: PredictionMode,
    #[serde(default)]
    pub guidance: Option<GuidanceSpec>,
    /// Class label used without guidance; 0 is the null class.
    #[serde(default)]
    pub class_id: usize,
    /// Temperature of the final token draw; 0 is greedy.
    pub temperature: f64,
}

impl GenerationConfig {
    pub fn with_budget(budget: usize) -> Result<Self> {
        Ok(Self {
            solver: SolverSpec::for_budget(budget)?,
            mode: PredictionMode::default(),
            guidance: None,
            class_id: 0,
            temperature: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutcome {
    pub token: TokenId,
    /// Path evaluations spent on this token, final prediction included.
    pub evals: usize,
    pub steps: usize,
    pub trace: Vec<TraceStep>,
}

/// Generation against a frozen main path and a trained diffusion path.
pub struct Generator<'a, F: Scalar> {
    base: &'a BaseLm<F>,
    path: &'a DiffusionPath<F>,
    vocab: DiffusionVocab,
}

impl<'a, F: Scalar> Generator<'a, F> {
    pub fn new(base: &'a BaseLm<F>, path: &'a DiffusionPath<F>) -> Result<Self> {
        path.check_base(base)?;
        let vocab = path.vocab(base)?;
        Ok(Self { base, path, vocab })
    }

    pub fn vocab(&self) -> &DiffusionVocab {
        &self.vocab
    }

    /// Guided (or plain conditional) logits for the token after `cache`.
    fn logits(&self, cache: &KvCache<F>, x: &[f64], t: f64, cfg: &GenerationConfig) -> Result<Vec<F>> {
        let target = cache.len();
        let query = |class_id| PathQuery {
            x: x.to_vec(),
            t,
            class_id,
            target,
        };
        match &cfg.guidance {
            None => Ok(self
                .path
                .forward(self.base, cache, &[query(cfg.class_id)])?
                .row(0)
                .to_vec()),
            Some(gs) => {
                let out = self.path.forward(self.base, cache, &[query(gs.class_id), query(0)])?;
                Ok(guided_logits(out.row(0), out.row(1), gs.w_g, gs.form))
            }
        }
    }

    /// Draws the token following the context held in `cache`.
    pub fn generate_token(
        &self,
        cache: &KvCache<F>,
        cfg: &GenerationConfig,
        rng: &mut GenerationRng,
    ) -> Result<TokenOutcome> {
        if cache.is_empty() {
            return Err(L2dError::MissingCache {
                target: 0,
                needed: 1,
                available: 0,
            });
        }
        if let Some(gs) = &cfg.guidance {
            gs.validate()?;
        }
        let schedule = self.path.schedule();
        let x0 = sample_noise(self.vocab.dim(), &schedule, &mut rng.diffusion);
        let diffusion_rng = &mut rng.diffusion;
        let run = integrate(
            &cfg.solver,
            |x, t| {
                let logits = self.logits(cache, x, t, cfg)?;
                predict_xhat(&logits, &cfg.mode, t, diffusion_rng, &self.vocab)
            },
            x0,
            &schedule,
        )?;
        let logits = self.logits(cache, &run.x, run.t, cfg)?;
        let token = sample_token(&logits, cfg.temperature, &mut rng.token)?;
        Ok(TokenOutcome {
            token,
            evals: run.evals + 1,
            steps: run.steps,
            trace: run.trace,
        })
    }

    /// Autoregressive generation; every emitted token costs exactly one
    /// main-path forward regardless of the diffusion budget.
    pub fn generate_sequence(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        cfg: &GenerationConfig,
        eos: Option<TokenId>,
        rng: &mut GenerationRng,
    ) -> Result<Generated> {
        let needed = prompt.len() + max_new;
        if needed > self.base.config().max_seq_len {
            return Err(L2dError::ContextOverflow {
                needed,
                max: self.base.config().max_seq_len,
            });
        }
        let mut cache = self.base.new_cache();
        self.base.forward_with_cache(prompt, &mut cache)?;
        let mut out = Generated::default();
        for _ in 0..max_new {
            let step = self.generate_token(&cache, cfg, rng)?;
            self.base.forward_with_cache(&[step.token], &mut cache)?;
            out.tokens.push(step.token);
            out.evals.push(step.evals);
            out.steps.push(step.steps);
            out.traces.push(step.trace);
            if Some(step.token) == eos {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generated {
    pub tokens: Vec<TokenId>,
    /// Path evaluations per emitted token.
    pub evals: Vec<usize>,
    pub steps: Vec<usize>,
    pub traces: Vec<Vec<TraceStep>>,
}

/// Plain ancestral sampling from the main path, drawing from the same token
/// stream as [`Generator::generate_sequence`].
pub fn sample_base_sequence<F: Scalar>(
    base: &BaseLm<F>,
    prompt: &[TokenId],
    max_new: usize,
    temperature: f64,
    eos: Option<TokenId>,
    rng: &mut GenerationRng,
) -> Result<Vec<TokenId>> {
    let needed = prompt.len() + max_new;
    if needed > base.config().max_seq_len {
        return Err(L2dError::ContextOverflow {
            needed,
            max: base.config().max_seq_len,
        });
    }
    let mut cache = base.new_cache();
    let mut logits = base.forward_with_cache(prompt, &mut cache)?;
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let last = logits.row(logits.rows() - 1).to_vec();
        let tok = sample_token(&last, temperature, &mut rng.token)?;
        out.push(tok);
        logits = base.forward_with_cache(&[tok], &mut cache)?;
        if Some(tok) == eos {
            break;
        }
    }
    Ok(out)
}

/// Writes one JSON object per trace step.
pub fn write_trace<W: Write>(mut w: W, position: usize, steps: &[TraceStep]) -> Result<()> {
    for s in steps {
        let line = serde_json::json!({
            "position": position,
            "t": s.t,
            "h": s.h,
            "evals": s.evals,
            "y_t": s.y_t,
            "x_norm": s.x_norm,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_mapping() {
        let s = SolverSpec::for_budget(15).unwrap();
        assert_eq!(
            (s.kind, s.endpoints, s.evals_per_token()),
            (SolverKind::Midpoint, 8, Some(15))
        );
        for b in [1, 2, 4, 8, 15, 31, 127] {
            assert_eq!(SolverSpec::for_budget(b).unwrap().evals_per_token(), Some(b));
        }
        assert!(SolverSpec::for_budget(0).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let g = guided_logits(&[2.0f64, 0.0], &[1.0, 1.0], 2.0, GuidanceForm::Interpolate);
        assert_eq!(g, vec![3.0, -1.0]);
    }
}
