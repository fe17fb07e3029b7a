//! Semi-dual entropic optimal transport with squared cost on the line.
//!
//! Convention: the entropic problem is
//! `min_P <C, P> + eps * KL(P || mu x nu)`, whose semi-dual
//! `sup_v sum_a mu_a v^eps(a) + sum_b nu_b v(b)` holds with no additive
//! constant. `v^eps` is the smoothed c-transform
//! `v^eps(y) = -eps * log sum_b nu_b exp((v(b) - (y - b)^2) / eps)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffnet::MlpNet;
use crate::error::{check_len, Error, Result};
use crate::pairgraph::DirectedPairSet;
use crate::scalar::Real;

pub const SINKHORN_TOL: f64 = 1e-9;
pub const SINKHORN_MAX_ITER: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EotConfig {
    pub epsilon: f64,
    pub mc_samples: usize,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            mc_samples: 32,
        }
    }
}

impl EotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// Max-shifted `log(sum_k exp(a_k))`; `-inf` entries are ignored.
fn log_sum_exp<S: Real>(a: &[S]) -> S {
    let max = a.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = a.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Monte-Carlo smoothed c-transform with uniform weights `1/M`:
/// `-eps * log((1/M) sum_m exp((v_m - (y - s_m)^2) / eps))`.
pub fn c_transform<S: Real>(v_values: &[S], samples: &[S], y: S, eps: S) -> Result<S> {
    check_len("c_transform", v_values.len(), samples.len())?;
    if samples.is_empty() {
        return Err(Error::invalid("c_transform needs at least one sample"));
    }
    let mut scratch = Vec::with_capacity(samples.len());
    Ok(soft_min(v_values, samples, y, eps, &mut scratch))
}

/// Uniform-weight soft-min; leaves the softmax weights in `weights`.
fn soft_min<S: Real>(v: &[S], s: &[S], y: S, eps: S, weights: &mut Vec<S>) -> S {
    weights.clear();
    weights.extend(v.iter().zip(s).map(|(&vk, &sk)| {
        let d = y - sk;
        (vk - d * d) / eps
    }));
    let lse = log_sum_exp(weights);
    for w in weights.iter_mut() {
        *w = (*w - lse).exp();
    }
    -eps * (lse - S::lit(v.len() as f64).ln())
}

/// Smoothed c-transform against a weighted discrete measure.
pub fn c_transform_weighted<S: Real>(v: &[S], target: &DiscreteMeasure<S>, y: S, eps: S) -> Result<S> {
    check_len("c_transform_weighted", target.len(), v.len())?;
    let exps: Vec<S> = v
        .iter()
        .zip(target.atoms.iter().zip(&target.weights))
        .map(|(&vb, (&b, &w))| {
            let d = y - b;
            w.ln() + (vb - d * d) / eps
        })
        .collect();
    Ok(-eps * log_sum_exp(&exps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure<S> {
    pub atoms: Vec<S>,
    pub weights: Vec<S>,
}

impl<S: Real> DiscreteMeasure<S> {
    pub fn new(atoms: Vec<S>, weights: Vec<S>) -> Result<Self> {
        check_len("DiscreteMeasure", atoms.len(), weights.len())?;
        if atoms.is_empty() {
            return Err(Error::invalid("discrete measure needs at least one atom"));
        }
        if weights.iter().any(|&w| !(w >= S::zero()) || !w.is_finite()) {
            return Err(Error::invalid("weights must be nonnegative and finite"));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("atoms must be finite"));
        }
        let total: S = weights.iter().copied().sum();
        if (total - S::one()).abs() > S::lit(1e-12).max(S::epsilon() * S::lit(8.0)) {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<S>) -> Result<Self> {
        let w = S::one() / S::lit(atoms.len().max(1) as f64);
        let weights = vec![w; atoms.len()];
        Self::new(atoms, weights)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Dense transport plan, rows indexed by source atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix<S> {
    pub plan: Array2<S>,
}

impl<S: Real> CouplingMatrix<S> {
    pub fn row_sums(&self) -> Vec<S> {
        self.plan.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<S> {
        self.plan.columns().into_iter().map(|c| c.sum()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornSolution<S> {
    /// `<C, P> + eps * KL(P || mu x nu)` at the returned plan.
    pub primal: S,
    /// Potential on the source atoms.
    pub u: Vec<S>,
    /// Potential on the target atoms.
    pub v: Vec<S>,
    pub coupling: CouplingMatrix<S>,
    pub iterations: usize,
    pub residual: S,
}

/// Log-domain Sinkhorn iterations for squared cost. Stops when the L1 row
/// marginal violation (columns are exact after each sweep) drops below `tol`.
pub fn sinkhorn<S: Real>(
    mu: &DiscreteMeasure<S>,
    nu: &DiscreteMeasure<S>,
    eps: S,
    max_iter: usize,
    tol: S,
) -> Result<SinkhornSolution<S>> {
    if !(eps > S::zero()) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let (n, m) = (mu.len(), nu.len());
    let cost = Array2::from_shape_fn((n, m), |(a, b)| {
        let d = mu.atoms[a] - nu.atoms[b];
        d * d
    });
    let log_mu: Vec<S> = mu.weights.iter().map(|w| w.ln()).collect();
    let log_nu: Vec<S> = nu.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![S::zero(); n];
    let mut g = vec![S::zero(); m];
    let mut buf = Vec::with_capacity(n.max(m));
    let mut residual = S::infinity();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        for a in 0..n {
            buf.clear();
            buf.extend((0..m).map(|b| log_nu[b] + (g[b] - cost[[a, b]]) / eps));
            f[a] = -eps * log_sum_exp(&buf);
        }
        for b in 0..m {
            buf.clear();
            buf.extend((0..n).map(|a| log_mu[a] + (f[a] - cost[[a, b]]) / eps));
            g[b] = -eps * log_sum_exp(&buf);
        }
        residual = (0..n)
            .map(|a| {
                if mu.weights[a] == S::zero() {
                    return S::zero();
                }
                let row: S = (0..m)
                    .map(|b| {
                        (log_mu[a] + log_nu[b] + (f[a] + g[b] - cost[[a, b]]) / eps).exp()
                    })
                    .sum();
                (row - mu.weights[a]).abs()
            })
            .sum();
        if residual < tol {
            break;
        }
    }
    if !(residual < tol) {
        return Err(Error::Convergence {
            iterations,
            residual: residual.to_f64_lossy(),
        });
    }

    let mut plan = Array2::zeros((n, m));
    let mut primal = S::zero();
    for a in 0..n {
        for b in 0..m {
            if mu.weights[a] == S::zero() || nu.weights[b] == S::zero() {
                continue;
            }
            let log_ratio = (f[a] + g[b] - cost[[a, b]]) / eps;
            let p = (log_mu[a] + log_nu[b] + log_ratio).exp();
            plan[[a, b]] = p;
            primal += p * (cost[[a, b]] + eps * log_ratio);
        }
    }
    Ok(SinkhornSolution {
        primal,
        u: f,
        v: g,
        coupling: CouplingMatrix { plan },
        iterations,
        residual,
    })
}

/// Semi-dual objective `sum_a mu_a v^eps(a) + sum_b nu_b v(b)` for a potential
/// `v` given on the atoms of `nu`. Never exceeds the entropic primal.
pub fn semidual_value<S: Real>(
    v_on_nu: &[S],
    mu: &DiscreteMeasure<S>,
    nu: &DiscreteMeasure<S>,
    eps: S,
) -> Result<S> {
    check_len("semidual_value", nu.len(), v_on_nu.len())?;
    let mut total = S::zero();
    for (&a, &wa) in mu.atoms.iter().zip(&mu.weights) {
        if wa > S::zero() {
            total += wa * c_transform_weighted(v_on_nu, nu, a, eps)?;
        }
    }
    for (&vb, &wb) in v_on_nu.iter().zip(&nu.weights) {
        total += wb * vb;
    }
    Ok(total)
}

/// One oriented pair `(tail, head)` with its `M` uniform draws.
#[derive(Clone, Debug)]
pub struct PairDraw<S> {
    pub tail: usize,
    pub head: usize,
    pub uniforms: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub generator: bool,
    pub potential: bool,
}

impl GradRequest {
    pub const NONE: Self = Self {
        generator: false,
        potential: false,
    };
    pub const BOTH: Self = Self {
        generator: true,
        potential: true,
    };
}

#[derive(Clone, Debug)]
pub struct RegEstimate<S> {
    /// Mean over pairs and draws.
    pub value: S,
    pub grad_generator: Option<Vec<S>>,
    pub grad_potential: Option<Vec<S>>,
}

fn stack_inputs<S: Real>(rows: impl Iterator<Item = (usize, S)>, covariates: &[Vec<S>], n: usize, d: usize) -> Array2<S> {
    let mut data = Vec::with_capacity(n * (d + 1));
    for (node, last) in rows {
        data.extend_from_slice(&covariates[node]);
        data.push(last);
    }
    Array2::from_shape_vec((n, d + 1), data).expect("row count matches")
}

/// Monte-Carlo estimate of the pairwise semi-dual regularizer
///
/// `(1/(M P)) sum_{p, m} [ v^eps(x_i, T(x_j, U_pm)) + v(x_i, T(x_i, U_pm)) ]`
///
/// where pair `p = (i, j)` is an edge of `pairs`, and the inner c-transform
/// integral over the pushforward of `x_i` reuses the same draws
/// `T(x_i, U_p1..U_pM)`. Gradients flow through every occurrence of the
/// generator and potential parameters.
///
/// Network inputs are the covariate followed by one scalar: `[x, u]` for
/// the generator and `[x, y]` for the potential.
pub fn regularizer_estimate<S: Real>(
    generator: &MlpNet<S>,
    potential: &MlpNet<S>,
    covariates: &[Vec<S>],
    pairs: &DirectedPairSet,
    draws: &[PairDraw<S>],
    eps: S,
    want: GradRequest,
) -> Result<RegEstimate<S>> {
    if draws.is_empty() {
        return Err(Error::invalid("regularizer batch is empty"));
    }
    if !(eps > S::zero()) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let m = draws[0].uniforms.len();
    if m == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo draw per pair"));
    }
    let d = covariates.first().map_or(0, Vec::len);
    check_len("regularizer generator input", generator.arch().input_dim, d + 1)?;
    check_len("regularizer potential input", potential.arch().input_dim, d + 1)?;
    for p in draws {
        if p.tail >= covariates.len() || p.head >= covariates.len() || !pairs.contains(p.tail, p.head) {
            return Err(Error::Contract(format!(
                "pair ({}, {}) is not an edge of the directed pair set",
                p.tail, p.head
            )));
        }
        check_len("regularizer draws per pair", m, p.uniforms.len())?;
        if p.uniforms.iter().any(|&u| !(u > S::zero() && u < S::one())) {
            return Err(Error::invalid("uniform draws must lie in (0, 1)"));
        }
    }
    let n_pairs = draws.len();
    let rows = n_pairs * m;

    // Generator rows: first the inner block T(x_i, U), then the outer block T(x_j, U).
    let gen_in = stack_inputs(
        draws
            .iter()
            .flat_map(|p| p.uniforms.iter().map(move |&u| (p.tail, u)))
            .chain(
                draws
                    .iter()
                    .flat_map(|p| p.uniforms.iter().map(move |&u| (p.head, u))),
            ),
        covariates,
        2 * rows,
        d,
    );
    let gen_tape = generator.forward_batch(gen_in.view())?;
    let gen_out = gen_tape.outputs();
    let (inner, outer) = (
        gen_out.slice(ndarray::s![..rows]),
        gen_out.slice(ndarray::s![rows..]),
    );

    let pot_in = stack_inputs(
        draws
            .iter()
            .enumerate()
            .flat_map(|(k, p)| (0..m).map(move |r| (p.tail, k * m + r)))
            .map(|(node, r)| (node, inner[r])),
        covariates,
        rows,
        d,
    );
    let pot_tape = potential.forward_batch(pot_in.view())?;
    let pot_out = pot_tape.outputs();

    let scale = S::one() / S::lit(rows as f64);
    let two = S::lit(2.0);
    let mut total = S::zero();
    let need_grad = want.generator || want.potential;
    let mut up_inner = vec![S::zero(); rows];
    let mut up_outer = vec![S::zero(); rows];
    let mut up_pot = vec![S::zero(); rows];
    let mut weights = Vec::with_capacity(m);

    for k in 0..n_pairs {
        let base = k * m;
        let s = inner.slice(ndarray::s![base..base + m]).to_vec();
        let v = pot_out.slice(ndarray::s![base..base + m]).to_vec();
        for r in 0..m {
            let t = outer[base + r];
            total += soft_min(&v, &s, t, eps, &mut weights) + v[r];
            if need_grad {
                for q in 0..m {
                    let w = weights[q];
                    let slope = two * (t - s[q]);
                    up_outer[base + r] += w * slope;
                    up_inner[base + q] -= w * slope;
                    up_pot[base + q] -= w;
                }
                up_pot[base + r] += S::one();
            }
        }
    }

    let mut grad_potential = None;
    let mut grad_generator = None;
    if need_grad {
        for g in up_pot.iter_mut() {
            *g *= scale;
        }
        let mut phi_grad = vec![S::zero(); potential.param_count()];
        let pot_input_grad =
            potential.backward_batch(&pot_tape, &up_pot, &mut phi_grad, want.generator)?;
        if want.potential {
            grad_potential = Some(phi_grad);
        }
        if want.generator {
            let dy = pot_input_grad.expect("requested");
            let mut upstream = Vec::with_capacity(2 * rows);
            upstream.extend((0..rows).map(|r| up_inner[r] * scale + dy[[r, d]]));
            upstream.extend(up_outer.iter().map(|&g| g * scale));
            let mut theta_grad = vec![S::zero(); generator.param_count()];
            generator.backward_batch(&gen_tape, &upstream, &mut theta_grad, false)?;
            grad_generator = Some(theta_grad);
        }
    }

    Ok(RegEstimate {
        value: total * scale,
        grad_generator,
        grad_potential,
    })
}

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
mod oracles;
