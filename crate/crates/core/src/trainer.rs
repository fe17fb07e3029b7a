//! Empirical minimax loss and the doubly smoothed gradient descent-ascent loop.
//!
//! `L = Fit + lambda * R + (r1/2)|theta - p|^2 - (r2/2)|phi - q|^2`, minimized
//! over the generator parameters `theta` and maximized over the potential
//! parameters `phi`. `p` and `q` are exponentially averaged anchors.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condcdf::ConditionalCdf;
use crate::data::{Dataset, Normalizer};
use crate::diffnet::{flat, read_f64_vec, read_u32, read_u64, write_f64_slice, write_u32, MlpArch, MlpNet};
use crate::eotreg::{regularizer_estimate, GradRequest, PairDraw};
use crate::error::{check_len, Error, Result};
use crate::metrics::{w2_squared, EmpiricalSample};
use crate::pairgraph::{build_pair_set, DirectedPairSet};
use crate::scalar::Real;

pub const STATE_MAGIC: &[u8; 8] = b"CDOTSTAT";
pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    #[serde(alias = "h")]
    pub bandwidth: f64,
    pub r1: f64,
    pub r2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Hidden widths shared by the generator and the potential.
    pub hidden_widths: Vec<usize>,
    /// History is recorded every `log_every` iterations (and at the last one).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            epsilon: 1.0,
            bandwidth: 0.3,
            r1: 3.0,
            r2: 2.0,
            alpha: 0.001,
            beta: 0.001,
            gamma: 0.5,
            delta: 0.7,
            batch_size: 64,
            mc_samples: 32,
            iterations: 20_000,
            seed: 0,
            hidden_widths: vec![64; 6],
            log_every: 100,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be nonnegative and finite, got {v}")))
    }
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in (0, 1], got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        nonnegative("lambda", self.lambda)?;
        positive("epsilon", self.epsilon)?;
        positive("bandwidth", self.bandwidth)?;
        nonnegative("r1", self.r1)?;
        nonnegative("r2", self.r2)?;
        if self.r1 != 0.0 && self.r1 == self.r2 {
            return Err(Error::config("r2", "must differ from r1 when both are nonzero"));
        }
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        // The anchors may be frozen outright (rate 0).
        if self.gamma != 0.0 {
            unit_interval("gamma", self.gamma)?;
        }
        if self.delta != 0.0 {
            unit_interval("delta", self.delta)?;
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples", "must be at least 1"));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden_widths", "widths must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets a hyperparameter by name; used by sweeps and CLI overrides.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(key, format!("expected a positive integer, got {v}")))
            }
        };
        match key {
            "lambda" => self.lambda = value,
            "epsilon" | "eps" => self.epsilon = value,
            "bandwidth" | "h" => self.bandwidth = value,
            "r1" => self.r1 = value,
            "r2" => self.r2 = value,
            "alpha" => self.alpha = value,
            "beta" => self.beta = value,
            "gamma" => self.gamma = value,
            "delta" => self.delta = value,
            "batch_size" => self.batch_size = as_count(value)?,
            "mc_samples" => self.mc_samples = as_count(value)?,
            _ => return Err(Error::config(key, "unknown hyperparameter")),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Drops the pairwise regularizer (`lambda = 0`).
    NoReg,
    /// Drops the proximal smoothing (`r1 = r2 = 0`).
    NoSmooth,
}

impl Ablation {
    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            Ablation::NoReg => config.lambda = 0.0,
            Ablation::NoSmooth => {
                config.r1 = 0.0;
                config.r2 = 0.0;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoReg => "no-reg",
            Ablation::NoSmooth => "no-smooth",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-reg" => Ok(Ablation::NoReg),
            "no-smooth" => Ok(Ablation::NoSmooth),
            _ => Err(Error::invalid(format!("unknown ablation `{s}` (expected no-reg or no-smooth)"))),
        }
    }
}

/// Everything derived once from the training split.
#[derive(Clone, Debug)]
pub struct TrainProblem<S> {
    /// Normalized distinct covariates.
    pub covariates: Vec<Vec<S>>,
    pub cdfs: Vec<ConditionalCdf<S>>,
    pub pairs: DirectedPairSet,
    pub heads: Vec<Option<usize>>,
    pub normalizer: Normalizer,
}

impl<S: Real> TrainProblem<S> {
    pub fn new(train: &Dataset, bandwidth: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training split has no covariates".into()));
        }
        let covariates = train.normalized_covariates::<S>()?;
        let cdfs = train
            .groups
            .iter()
            .map(|g| {
                let ys = g.responses.iter().map(|&y| S::lit(y)).collect();
                ConditionalCdf::new(ys, S::lit(bandwidth))
            })
            .collect::<Result<Vec<_>>>()?;
        let counts: Vec<usize> = train.groups.iter().map(|g| g.count()).collect();
        let pairs = build_pair_set(&covariates, &counts)?;
        let heads = pairs.head_table();
        Ok(Self {
            covariates,
            cdfs,
            pairs,
            heads,
            normalizer: train.normalizer.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normalizer.dim()
    }
}

/// Uniform draw in the open interval (0, 1).
pub fn open_uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// `U_k = (k - 0.5) / K`, `k = 1..K`.
pub fn grid_uniforms(k: usize) -> Vec<f64> {
    (1..=k).map(|i| (i as f64 - 0.5) / k as f64).collect()
}

/// One minibatch: nodes, one fitness draw per node, and `M` draws for every
/// node that is the tail of a pair.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub nodes: Vec<usize>,
    pub fit_uniforms: Vec<S>,
    pub pair_draws: Vec<PairDraw<S>>,
}

#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub generator: MlpNet<S>,
    pub potential: MlpNet<S>,
    pub p: Vec<S>,
    pub q: Vec<S>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<S: Real> TrainState<S> {
    /// He-uniform networks from `seed`; anchors start at the initial parameters.
    pub fn init(n_nodes: usize, dim: usize, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = MlpNet::he_uniform(MlpArch::new(dim + 1, config.hidden_widths.clone())?, &mut rng)?;
        let potential = MlpNet::he_uniform(MlpArch::new(dim + 1, config.hidden_widths.clone())?, &mut rng)?;
        let mut order: Vec<usize> = (0..n_nodes).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            p: generator.params().to_vec(),
            q: potential.params().to_vec(),
            generator,
            potential,
            iteration: 0,
            rng,
            order,
            cursor: 0,
        })
    }

    /// Uniform sampling of `min(B, n)` distinct nodes; reshuffles when the
    /// current epoch cannot fill a whole batch.
    pub fn next_batch(&mut self, problem: &TrainProblem<S>, config: &TrainConfig) -> Result<Batch<S>> {
        check_len("batch sampler", problem.len(), self.order.len())?;
        let b = config.batch_size.min(self.order.len());
        if self.cursor + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let nodes = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        let fit_uniforms = (0..b).map(|_| S::lit(open_uniform(&mut self.rng))).collect();
        let mut pair_draws = Vec::new();
        for &node in &nodes {
            if let Some(head) = problem.heads[node] {
                pair_draws.push(PairDraw {
                    tail: node,
                    head,
                    uniforms: (0..config.mc_samples)
                        .map(|_| S::lit(open_uniform(&mut self.rng)))
                        .collect(),
                });
            }
        }
        Ok(Batch {
            nodes,
            fit_uniforms,
            pair_draws,
        })
    }
}

fn generator_inputs<S: Real>(covariates: &[Vec<S>], nodes: &[usize], uniforms: &[S]) -> Array2<S> {
    let d = covariates.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(nodes.len() * (d + 1));
    for (&n, &u) in nodes.iter().zip(uniforms) {
        data.extend_from_slice(&covariates[n]);
        data.push(u);
    }
    Array2::from_shape_vec((nodes.len(), d + 1), data).expect("row count matches")
}

/// `(1/B) sum_b (U_b - F_{x_b}(T(x_b, U_b)))^2` and its generator gradient.
pub fn fit_estimate<S: Real>(
    generator: &MlpNet<S>,
    cdfs: &[ConditionalCdf<S>],
    covariates: &[Vec<S>],
    nodes: &[usize],
    uniforms: &[S],
    want_grad: bool,
) -> Result<(S, Option<Vec<S>>)> {
    check_len("fit_estimate uniforms", nodes.len(), uniforms.len())?;
    if nodes.is_empty() {
        return Err(Error::invalid("fit_estimate needs a nonempty batch"));
    }
    if let Some(&bad) = nodes.iter().find(|&&n| n >= cdfs.len() || n >= covariates.len()) {
        return Err(Error::Contract(format!("batch node {bad} has no conditional CDF")));
    }
    if uniforms.iter().any(|&u| !(u > S::zero() && u < S::one())) {
        return Err(Error::invalid("uniform draws must lie in (0, 1)"));
    }
    let inputs = generator_inputs(covariates, nodes, uniforms);
    let tape = generator.forward_batch(inputs.view())?;
    let out = tape.outputs();
    let inv_b = S::one() / S::lit(nodes.len() as f64);
    let mut value = S::zero();
    let mut upstream = Vec::with_capacity(nodes.len());
    for (k, &n) in nodes.iter().enumerate() {
        let (f, density) = cdfs[n].eval_with_density(out[k]);
        let r = uniforms[k] - f;
        value += r * r;
        upstream.push(-S::lit(2.0) * r * density * inv_b);
    }
    let grad = if want_grad {
        let mut g = vec![S::zero(); generator.param_count()];
        generator.backward_batch(&tape, &upstream, &mut g, false)?;
        Some(g)
    } else {
        None
    };
    Ok((value * inv_b, grad))
}

#[derive(Clone, Debug)]
pub struct LossEstimate<S> {
    pub loss: S,
    pub fit: S,
    /// Pair sum normalized by `M * B` (the root contributes nothing).
    pub reg: S,
    pub grad_theta: Option<Vec<S>>,
    pub grad_phi: Option<Vec<S>>,
}

/// `Fit + lambda R` without the proximal terms, evaluated at the current
/// network parameters. When `lambda = 0` and gradients are requested the
/// regularizer is skipped and reported as zero.
pub fn data_loss<S: Real>(
    problem: &TrainProblem<S>,
    generator: &MlpNet<S>,
    potential: &MlpNet<S>,
    config: &TrainConfig,
    batch: &Batch<S>,
    want: GradRequest,
) -> Result<LossEstimate<S>> {
    let (fit, mut grad_theta) = fit_estimate(
        generator,
        &problem.cdfs,
        &problem.covariates,
        &batch.nodes,
        &batch.fit_uniforms,
        want.generator,
    )?;
    let lambda = S::lit(config.lambda);
    let mut reg = S::zero();
    let mut grad_phi = want.potential.then(|| vec![S::zero(); potential.param_count()]);
    let evaluating = want == GradRequest::NONE;
    if !batch.pair_draws.is_empty() && (config.lambda != 0.0 || evaluating) {
        let est = regularizer_estimate(
            generator,
            potential,
            &problem.covariates,
            &problem.pairs,
            &batch.pair_draws,
            S::lit(config.epsilon),
            want,
        )?;
        let share = S::lit(batch.pair_draws.len() as f64 / batch.nodes.len() as f64);
        reg = est.value * share;
        let w = lambda * share;
        if let (Some(g), Some(r)) = (grad_theta.as_mut(), est.grad_generator) {
            flat::axpy_in_place(w, &r, g)?;
        }
        if let (Some(g), Some(r)) = (grad_phi.as_mut(), est.grad_potential) {
            flat::axpy_in_place(w, &r, g)?;
        }
    }
    Ok(LossEstimate {
        loss: fit + lambda * reg,
        fit,
        reg,
        grad_theta,
        grad_phi,
    })
}

/// Full minimax objective including the proximal anchors.
pub fn loss_estimate<S: Real>(
    problem: &TrainProblem<S>,
    state: &TrainState<S>,
    config: &TrainConfig,
    batch: &Batch<S>,
    want: GradRequest,
) -> Result<LossEstimate<S>> {
    let mut est = data_loss(problem, &state.generator, &state.potential, config, batch, want)?;
    let theta = state.generator.params();
    let phi = state.potential.params();
    let (r1, r2) = (S::lit(config.r1), S::lit(config.r2));
    let half = S::lit(0.5);
    est.loss += half * r1 * flat::squared_distance(theta, &state.p)? - half * r2 * flat::squared_distance(phi, &state.q)?;
    if let Some(g) = est.grad_theta.as_mut() {
        for ((gi, &t), &p) in g.iter_mut().zip(theta).zip(&state.p) {
            *gi += r1 * (t - p);
        }
    }
    if let Some(g) = est.grad_phi.as_mut() {
        for ((gi, &f), &q) in g.iter_mut().zip(phi).zip(&state.q) {
            *gi -= r2 * (f - q);
        }
    }
    Ok(est)
}

/// Gradients of the unsmoothed part of a minimax objective. The proximal
/// terms are added by [`dsgda_update`].
pub trait MinimaxObjective<S> {
    fn grad_theta(&mut self, theta: &[S], phi: &[S]) -> Result<Vec<S>>;
    fn grad_phi(&mut self, theta: &[S], phi: &[S]) -> Result<Vec<S>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsgdaRates {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub r1: f64,
    pub r2: f64,
}

impl From<&TrainConfig> for DsgdaRates {
    fn from(c: &TrainConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            delta: c.delta,
            r1: c.r1,
            r2: c.r2,
        }
    }
}

/// One descent-ascent step; the ascent gradient is taken at the updated `theta`.
pub fn dsgda_update<S: Real, O: MinimaxObjective<S> + ?Sized>(
    objective: &mut O,
    theta: &mut [S],
    phi: &mut [S],
    p: &mut [S],
    q: &mut [S],
    rates: &DsgdaRates,
    iteration: u64,
) -> Result<()> {
    check_len("anchor p", theta.len(), p.len())?;
    check_len("anchor q", phi.len(), q.len())?;
    let (alpha, beta) = (S::lit(rates.alpha), S::lit(rates.beta));
    let (r1, r2) = (S::lit(rates.r1), S::lit(rates.r2));

    let g = objective.grad_theta(theta, phi)?;
    check_len("theta gradient", theta.len(), g.len())?;
    if !flat::all_finite(&g) {
        return Err(Error::NonFinite {
            quantity: "generator gradient",
            iteration,
        });
    }
    for ((t, &gi), &pi) in theta.iter_mut().zip(&g).zip(p.iter()) {
        *t -= alpha * (gi + r1 * (*t - pi));
    }

    let h = objective.grad_phi(theta, phi)?;
    check_len("phi gradient", phi.len(), h.len())?;
    if !flat::all_finite(&h) {
        return Err(Error::NonFinite {
            quantity: "potential gradient",
            iteration,
        });
    }
    for ((f, &hi), &qi) in phi.iter_mut().zip(&h).zip(q.iter()) {
        *f += beta * (hi - r2 * (*f - qi));
    }

    flat::move_toward(p, theta, S::lit(rates.gamma))?;
    flat::move_toward(q, phi, S::lit(rates.delta))?;
    if !flat::all_finite(theta) || !flat::all_finite(phi) {
        return Err(Error::NonFinite {
            quantity: "parameters",
            iteration,
        });
    }
    Ok(())
}

/// The network objective for a fixed minibatch.
struct BatchObjective<'a, S> {
    problem: &'a TrainProblem<S>,
    config: &'a TrainConfig,
    batch: &'a Batch<S>,
    generator: MlpNet<S>,
    potential: MlpNet<S>,
    /// Fit and regularizer seen by the descent evaluation.
    last: Option<(S, S)>,
}

impl<S: Real> MinimaxObjective<S> for BatchObjective<'_, S> {
    fn grad_theta(&mut self, theta: &[S], phi: &[S]) -> Result<Vec<S>> {
        self.generator.set_params(theta)?;
        self.potential.set_params(phi)?;
        let want = GradRequest {
            generator: true,
            potential: false,
        };
        let est = data_loss(self.problem, &self.generator, &self.potential, self.config, self.batch, want)?;
        self.last = Some((est.fit, est.reg));
        Ok(est.grad_theta.expect("requested"))
    }

    fn grad_phi(&mut self, theta: &[S], phi: &[S]) -> Result<Vec<S>> {
        if self.config.lambda == 0.0 {
            return Ok(vec![S::zero(); phi.len()]);
        }
        self.generator.set_params(theta)?;
        self.potential.set_params(phi)?;
        let want = GradRequest {
            generator: false,
            potential: true,
        };
        let est = data_loss(self.problem, &self.generator, &self.potential, self.config, self.batch, want)?;
        Ok(est.grad_phi.expect("requested"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub fit: f64,
    pub reg: f64,
    pub loss: f64,
}

pub fn write_history<W: Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One step on a fresh batch. Returns the loss terms seen by the descent half.
pub fn dsgda_step<S: Real>(state: &mut TrainState<S>, problem: &TrainProblem<S>, config: &TrainConfig) -> Result<HistoryRow> {
    let batch = state.next_batch(problem, config)?;
    let mut objective = BatchObjective {
        problem,
        config,
        batch: &batch,
        generator: state.generator.clone(),
        potential: state.potential.clone(),
        last: None,
    };
    let mut theta = state.generator.params().to_vec();
    let mut phi = state.potential.params().to_vec();
    let (r1, r2) = (S::lit(config.r1), S::lit(config.r2));
    let half = S::lit(0.5);
    let prox = half * r1 * flat::squared_distance(&theta, &state.p)? - half * r2 * flat::squared_distance(&phi, &state.q)?;
    dsgda_update(
        &mut objective,
        &mut theta,
        &mut phi,
        &mut state.p,
        &mut state.q,
        &DsgdaRates::from(config),
        state.iteration,
    )?;
    state.generator.set_params(&theta)?;
    state.potential.set_params(&phi)?;
    state.iteration += 1;
    let (fit, reg) = objective.last.expect("descent ran");
    let loss = fit + S::lit(config.lambda) * reg + prox;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            quantity: "loss",
            iteration: state.iteration,
        });
    }
    Ok(HistoryRow {
        iteration: state.iteration,
        fit: fit.to_f64_lossy(),
        reg: reg.to_f64_lossy(),
        loss: loss.to_f64_lossy(),
    })
}

/// Runs until `config.iterations` total steps. A raised `stop` flag ends the
/// loop early with [`Error::Interrupted`]; the state stays consistent, so the
/// caller can still checkpoint it.
pub fn train_until<S: Real>(
    state: &mut TrainState<S>,
    problem: &TrainProblem<S>,
    config: &TrainConfig,
    stop: Option<&AtomicBool>,
    history: &mut Vec<HistoryRow>,
) -> Result<()> {
    config.validate()?;
    while state.iteration < config.iterations {
        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            return Err(Error::Interrupted(state.iteration));
        }
        let row = dsgda_step(state, problem, config)?;
        if row.iteration % config.log_every == 0 || row.iteration == config.iterations {
            history.push(row);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub state: TrainState<S>,
    pub problem: TrainProblem<S>,
    pub history: Vec<HistoryRow>,
}

impl<S: Real> TrainOutcome<S> {
    pub fn model(&self) -> ConditionalSampler<S> {
        ConditionalSampler {
            generator: self.state.generator.clone(),
            normalizer: self.problem.normalizer.clone(),
        }
    }
}

pub fn train<S: Real>(train_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let problem = TrainProblem::<S>::new(train_set, config.bandwidth)?;
    let mut state = TrainState::init(problem.len(), problem.dim(), config)?;
    let mut history = Vec::new();
    train_until(&mut state, &problem, config, None, &mut history)?;
    Ok(TrainOutcome { state, problem, history })
}

/// Trained generator plus the covariate normalization it expects.
#[derive(Clone, Debug)]
pub struct ConditionalSampler<S> {
    pub generator: MlpNet<S>,
    pub normalizer: Normalizer,
}

impl<S: Real> ConditionalSampler<S> {
    /// `T(x, u)` for a raw (unnormalized) covariate and each `u`.
    pub fn sample(&self, x: &[f64], uniforms: &[f64]) -> Result<Vec<f64>> {
        let xn: Vec<S> = self.normalizer.apply_as(x)?;
        let d = xn.len();
        check_len("generator covariate", self.generator.arch().input_dim, d + 1)?;
        if uniforms.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(uniforms.len() * (d + 1));
        for &u in uniforms {
            data.extend_from_slice(&xn);
            data.push(S::lit(u));
        }
        let inputs = Array2::from_shape_vec((uniforms.len(), d + 1), data).expect("row count matches");
        let out = self.generator.predict_batch(inputs.view())?;
        Ok(out.iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn sample_iid<R: RngCore + ?Sized>(&self, x: &[f64], k: usize, rng: &mut R) -> Result<Vec<f64>> {
        let u: Vec<f64> = (0..k).map(|_| open_uniform(rng)).collect();
        self.sample(x, &u)
    }

    pub fn sample_grid(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        self.sample(x, &grid_uniforms(k))
    }
}

/// Mean over covariates of W2^2 between `k` grid-mode samples and the held-out
/// responses.
pub fn mean_validation_w2<S: Real>(model: &ConditionalSampler<S>, holdout: &Dataset, k: usize) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::config("validation", "validation split is empty"));
    }
    let mut total = 0.0;
    for g in &holdout.groups {
        let gen = EmpiricalSample::new(model.sample_grid(&g.x, k)?)?;
        let truth = EmpiricalSample::new(g.responses.clone())?;
        total += w2_squared(&gen, &truth);
    }
    Ok(total / holdout.len() as f64)
}

// ---- sweeps ------------------------------------------------------------------

/// Cartesian grid over named hyperparameters; the first key varies slowest.
/// Text form: `h=0.1,0.3;lambda=0.4`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub axes: Vec<(String, Vec<f64>)>,
}

impl std::str::FromStr for SweepGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::config("grid", format!("`{part}` is not key=v1,v2,...")))?;
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config("grid", format!("`{v}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            axes.push((key.trim().to_string(), values));
        }
        let grid = Self { axes };
        if grid.is_empty() {
            return Err(Error::config("grid", "grid has no points"));
        }
        Ok(grid)
    }
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.axes.is_empty() || self.axes.iter().any(|(_, v)| v.is_empty())
    }

    pub fn points(&self) -> Vec<Vec<(String, f64)>> {
        let mut points = vec![Vec::new()];
        for (key, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push((key.clone(), v));
                        p
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub point: Vec<(String, f64)>,
    pub iterations: u64,
    pub val_w2_squared: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best_index: usize,
    pub best_config: TrainConfig,
}

pub const SWEEP_BUDGET_FRACTION: f64 = 0.1;
pub const VALIDATION_SAMPLES: usize = 1000;

/// Short-budget training per grid point; argmin of mean validation W2^2,
/// ties resolved to the earliest point.
pub fn sweep<S: Real>(train_set: &Dataset, val_set: &Dataset, base: &TrainConfig, grid: &SweepGrid) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::config("grid", "grid has no points"));
    }
    if val_set.is_empty() {
        return Err(Error::config("validation", "validation split is empty"));
    }
    let budget = ((base.iterations as f64) * SWEEP_BUDGET_FRACTION).ceil() as u64;
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, TrainConfig)> = None;
    for (index, point) in grid.points().into_iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &point {
            cfg.set(k, *v)?;
        }
        cfg.iterations = budget;
        cfg.validate()?;
        let outcome = train::<S>(train_set, &cfg)?;
        let w2 = mean_validation_w2(&outcome.model(), val_set, VALIDATION_SAMPLES)?;
        if best.as_ref().is_none_or(|(_, b, _)| w2 < *b) {
            let mut full = cfg.clone();
            full.iterations = base.iterations;
            best = Some((index, w2, full));
        }
        rows.push(SweepRow {
            point,
            iterations: budget,
            val_w2_squared: w2,
        });
    }
    let (best_index, _, best_config) = best.expect("grid is nonempty");
    Ok(SweepOutcome {
        rows,
        best_index,
        best_config,
    })
}

// ---- checkpoints -------------------------------------------------------------

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_usizes<W: Write>(w: &mut W, xs: &[usize]) -> Result<()> {
    write_u64(w, xs.len() as u64)?;
    for &x in xs {
        write_u64(w, x as u64)?;
    }
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_len<R: Read>(r: &mut R, limit: usize) -> Result<usize> {
    let n = read_u64(r)?;
    if n as usize > limit {
        return Err(Error::Checkpoint(format!("length {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

fn read_f64_block<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_len(r, 1 << 32)?;
    read_f64_vec(r, n)
}

/// A training checkpoint: both networks, anchors, sampler and PRNG state,
/// normalizer, and the config that produced it. Contains no timestamps, so
/// identical runs produce identical bytes.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub state: TrainState<S>,
    pub normalizer: Normalizer,
    pub config: TrainConfig,
}

impl<S: Real> Checkpoint<S> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = &self.state;
        w.write_all(STATE_MAGIC)?;
        write_u32(w, STATE_VERSION as usize)?;
        write_u64(w, s.iteration)?;
        w.write_all(&s.rng.get_seed())?;
        write_u64(w, s.rng.get_stream())?;
        w.write_all(&s.rng.get_word_pos().to_le_bytes())?;
        write_usizes(w, &s.order)?;
        write_u64(w, s.cursor as u64)?;
        s.generator.write_to(w)?;
        s.potential.write_to(w)?;
        write_f64_slice(w, &s.p)?;
        write_f64_slice(w, &s.q)?;
        write_f64_slice(w, &self.normalizer.mean)?;
        write_f64_slice(w, &self.normalizer.std)?;
        let cfg = serde_json::to_vec(&self.config)?;
        write_u64(w, cfg.len() as u64)?;
        w.write_all(&cfg)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_bytes(r, 8)?;
        if magic != STATE_MAGIC {
            return Err(Error::Checkpoint("not a training checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported training checkpoint version {version}")));
        }
        let iteration = read_u64(r)?;
        let seed: [u8; 32] = read_bytes(r, 32)?.try_into().expect("32 bytes");
        let stream = read_u64(r)?;
        let word_pos = u128::from_le_bytes(read_bytes(r, 16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let n = read_len(r, 1 << 32)?;
        let order = (0..n).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let cursor = read_u64(r)? as usize;
        if cursor > order.len() || order.iter().any(|&i| i >= order.len()) {
            return Err(Error::Checkpoint("corrupt batch sampler state".into()));
        }
        let generator = MlpNet::read_from(r)?;
        let potential = MlpNet::read_from(r)?;
        let p: Vec<S> = read_f64_block(r)?.into_iter().map(S::lit).collect();
        let q: Vec<S> = read_f64_block(r)?.into_iter().map(S::lit).collect();
        if p.len() != generator.param_count() || q.len() != potential.param_count() {
            return Err(Error::Checkpoint("anchor lengths do not match the networks".into()));
        }
        let mean = read_f64_block(r)?;
        let std = read_f64_block(r)?;
        if mean.len() != std.len() {
            return Err(Error::Checkpoint("normalizer lengths differ".into()));
        }
        let len = read_len(r, 1 << 20)?;
        let config: TrainConfig = serde_json::from_slice(&read_bytes(r, len)?)?;
        Ok(Self {
            state: TrainState {
                generator,
                potential,
                p,
                q,
                iteration,
                rng,
                order,
                cursor,
            },
            normalizer: Normalizer { mean, std },
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn sampler(&self) -> ConditionalSampler<S> {
        ConditionalSampler {
            generator: self.state.generator.clone(),
            normalizer: self.normalizer.clone(),
        }
    }
}

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
mod oracles;
