//! Bayesian multilayer perceptron for binary responses.
//!
//! Weights carry hierarchical Gaussian priors whose precisions are resampled
//! by conjugate Gibbs updates; the weights themselves are sampled with
//! Hamiltonian Monte Carlo. The likelihood is Bernoulli with a logistic link
//! on the network output.
//!
//! Prior groups:
//! * one group per input unit (its outgoing first-layer weights), whose
//!   precision has a gamma prior with a shared, itself random, mean;
//! * one group per bias row;
//! * one group per hidden-to-hidden layer and one for the output layer, all
//!   with fixed hyperparameters.

use std::f64::consts::PI;

use log::warn;
use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from_seed};
use crate::stats::{sigmoid, softplus};

pub const DEFAULT_MAX_WEIGHTS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `h` and input `a`.
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnnArchitecture {
    pub input: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
}

impl BnnArchitecture {
    /// Five tanh hidden layers of width `3N`.
    pub fn paper(input: usize) -> Self {
        BnnArchitecture { input, hidden_layers: 5, hidden_width: 3 * input, activation: Activation::Tanh }
    }

    /// Unit counts per layer, input first, output (1) last.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(1);
        w
    }

    /// `(rows, cols)` of every weight matrix; the last row holds biases.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[0] + 1, w[1])).collect()
    }

    pub fn n_weights(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.shapes()
            .iter()
            .map(|(r, c)| {
                let o = acc;
                acc += r * c;
                o
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// All weight matrices, flattened row-major in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub arch: BnnArchitecture,
    pub data: Vec<f64>,
}

impl WeightSet {
    pub fn zeros(arch: BnnArchitecture) -> Self {
        WeightSet { data: vec![0.0; arch.n_weights()], arch }
    }

    pub fn from_flat(arch: BnnArchitecture, data: Vec<f64>) -> Result<Self> {
        if data.len() != arch.n_weights() {
            return Err(Error::Shape(format!("{} weights for an architecture of {}", data.len(), arch.n_weights())));
        }
        Ok(WeightSet { arch, data })
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        let shapes = self.arch.shapes();
        let off = self.arch.offsets()[l];
        let (r, c) = shapes[l];
        ArrayView2::from_shape((r, c), &self.data[off..off + r * c]).expect("layer slice")
    }
}

fn layer_view<'a>(arch: &BnnArchitecture, data: &'a [f64], l: usize) -> ArrayView2<'a, f64> {
    let (r, c) = arch.shapes()[l];
    let off = arch.offsets()[l];
    ArrayView2::from_shape((r, c), &data[off..off + r * c]).expect("layer slice")
}

/// Pre-link output `f(W, x)` for every row of `x`, with the per-layer
/// pre-activations and activations when `keep` is set.
fn forward_batch(
    arch: &BnnArchitecture,
    w: &[f64],
    x: &Array2<f64>,
    keep: bool,
) -> (Array1<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let n_layers = arch.shapes().len();
    let mut pre = Vec::new();
    let mut acts = Vec::new();
    let mut h = x.clone();
    for l in 0..n_layers {
        let m = layer_view(arch, w, l);
        let rows = m.nrows() - 1;
        let mut a = Array2::<f64>::zeros((h.nrows(), m.ncols()));
        a.assign(&m.row(rows));
        general_mat_mul(1.0, &h, &m.slice(s![..rows, ..]), 1.0, &mut a);
        if l + 1 == n_layers {
            if keep {
                acts.push(h);
            }
            return (a.column(0).to_owned(), pre, acts);
        }
        let next = a.mapv(|v| arch.activation.apply(v));
        if keep {
            pre.push(a);
            acts.push(std::mem::replace(&mut h, next));
        } else {
            h = next;
        }
    }
    unreachable!("architecture has an output layer")
}

pub fn forward(weights: &WeightSet, x: &[f64]) -> Result<f64> {
    if x.len() != weights.arch.input {
        return Err(Error::Shape(format!("input of length {} for width {}", x.len(), weights.arch.input)));
    }
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row");
    Ok(forward_batch(&weights.arch, &weights.data, &row, false).0[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    /// First-layer weights of one input unit; the prior mean precision is the
    /// shared input scale.
    Input,
    /// Fixed hyperparameters.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorGroup {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub kind: GroupKind,
    /// Gamma shape hyperparameter α.
    pub alpha: f64,
    /// Prior mean precision for fixed groups.
    pub scale: f64,
    /// Current precision τ = σ⁻².
    pub precision: f64,
    /// Per-weight prior scale multipliers (output units); empty means 1.
    pub unit_scales: Vec<f64>,
}

impl PriorGroup {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn unit_scale(&self, k: usize) -> f64 {
        self.unit_scales.get(k).copied().unwrap_or(1.0)
    }

    /// Σ (w / σ_a)² over the group.
    fn sum_sq(&self, w: &[f64]) -> f64 {
        w[self.start..self.end]
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let u = v / self.unit_scale(k);
                u * u
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub groups: Vec<PriorGroup>,
    /// Shared mean precision of the input groups (resampled).
    pub input_scale: f64,
    /// Second-level hyperparameters for `input_scale`.
    pub input_alpha0: f64,
    pub input_scale0: f64,
}

impl PriorSpec {
    /// Default hierarchy: α = 2 and mean precision 0.5 everywhere, output
    /// unit scales σ_a = 1.
    pub fn new(arch: &BnnArchitecture) -> Self {
        let (alpha, scale) = (2.0, 0.5);
        let shapes = arch.shapes();
        let offsets = arch.offsets();
        let last = shapes.len() - 1;
        let mut groups = Vec::new();
        let fixed = |name: String, start: usize, end: usize| PriorGroup {
            name,
            start,
            end,
            kind: GroupKind::Fixed,
            alpha,
            scale,
            precision: scale,
            unit_scales: Vec::new(),
        };
        for (l, (&(r, c), &off)) in shapes.iter().zip(&offsets).enumerate() {
            let body = off + (r - 1) * c;
            if l == 0 {
                for i in 0..r - 1 {
                    groups.push(PriorGroup {
                        kind: GroupKind::Input,
                        ..fixed(format!("input[{i}]"), off + i * c, off + (i + 1) * c)
                    });
                }
            } else if l == last {
                groups.push(PriorGroup { unit_scales: vec![1.0; r - 1], ..fixed("output".into(), off, body) });
            } else {
                groups.push(fixed(format!("hidden[{l}]"), off, body));
            }
            groups.push(fixed(format!("bias[{l}]"), body, body + c));
        }
        PriorSpec { groups, input_scale: scale, input_alpha0: alpha, input_scale0: scale }
    }

    fn group_mean(&self, g: &PriorGroup) -> f64 {
        match g.kind {
            GroupKind::Input => self.input_scale,
            GroupKind::Fixed => g.scale,
        }
    }

    /// Gaussian log-prior of the weights under the current precisions.
    pub fn log_prior(&self, w: &[f64]) -> f64 {
        self.groups
            .iter()
            .map(|g| {
                let norm: f64 = (0..g.len())
                    .map(|k| 0.5 * (g.precision / (2.0 * PI * g.unit_scale(k).powi(2))).ln())
                    .sum();
                norm - 0.5 * g.precision * g.sum_sq(w)
            })
            .sum()
    }
}

/// Binary training data.
#[derive(Debug, Clone, Copy)]
pub struct BnnData<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a [u8],
}

fn log_likelihood(f: &Array1<f64>, y: &[u8]) -> f64 {
    f.iter().zip(y).map(|(&v, &t)| t as f64 * v - softplus(v)).sum()
}

pub fn log_posterior(weights: &WeightSet, prior: &PriorSpec, data: BnnData) -> Result<f64> {
    let (f, _, _) = forward_batch(&weights.arch, &weights.data, data.x, false);
    let lp = log_likelihood(&f, data.y) + prior.log_prior(&weights.data);
    if lp.is_finite() {
        Ok(lp)
    } else {
        Err(Error::Numerical("non-finite log posterior".into()))
    }
}

/// Log posterior and its gradient by reverse-mode differentiation.
fn value_and_grad(arch: &BnnArchitecture, prior: &PriorSpec, data: BnnData, w: &[f64]) -> (f64, Vec<f64>) {
    let (f, pre, acts) = forward_batch(arch, w, data.x, true);
    let mut value = log_likelihood(&f, data.y) + prior.log_prior(w);
    let mut grad = vec![0.0; w.len()];
    for g in &prior.groups {
        for k in 0..g.len() {
            let i = g.start + k;
            grad[i] = -g.precision * w[i] / g.unit_scale(k).powi(2);
        }
    }
    let shapes = arch.shapes();
    let offsets = arch.offsets();
    // d loglik / d f
    let mut delta = Array2::from_shape_fn((f.len(), 1), |(i, _)| data.y[i] as f64 - sigmoid(f[i]));
    for l in (0..shapes.len()).rev() {
        let (r, c) = shapes[l];
        let h = &acts[l];
        let mut gw = Array2::<f64>::zeros((r - 1, c));
        general_mat_mul(1.0, &h.t(), &delta, 0.0, &mut gw);
        let gb = delta.sum_axis(Axis(0));
        let off = offsets[l];
        for (k, v) in gw.iter().enumerate() {
            grad[off + k] += v;
        }
        for (k, v) in gb.iter().enumerate() {
            grad[off + (r - 1) * c + k] += v;
        }
        if l > 0 {
            let m = layer_view(arch, w, l);
            let mut back = Array2::<f64>::zeros((delta.nrows(), r - 1));
            general_mat_mul(1.0, &delta, &m.slice(s![..r - 1, ..]).t(), 0.0, &mut back);
            let (a, hh) = (&pre[l - 1], &acts[l]);
            ndarray::Zip::from(&mut back).and(a).and(hh).for_each(|b, &a, &hv| *b *= arch.activation.derivative(a, hv));
            delta = back;
        }
    }
    if !value.is_finite() {
        value = f64::NEG_INFINITY;
    }
    (value, grad)
}

pub fn grad_log_posterior(weights: &WeightSet, prior: &PriorSpec, data: BnnData) -> WeightSet {
    let (_, g) = value_and_grad(&weights.arch, prior, data, &weights.data);
    WeightSet { arch: weights.arch, data: g }
}

/// Conjugate update of every group precision given the weights, then of the
/// shared input scale given the input-group precisions.
pub fn gibbs_update_hyperparams(weights: &WeightSet, prior: &PriorSpec, rng: &mut ChaCha8Rng) -> PriorSpec {
    let mut next = prior.clone();
    for g in next.groups.iter_mut() {
        let mean = prior.group_mean(g);
        let shape = g.alpha / 2.0 + g.len() as f64 / 2.0;
        let rate = g.alpha / (2.0 * mean) + g.sum_sq(&weights.data) / 2.0;
        g.precision = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng);
    }
    let inputs: Vec<&PriorGroup> = next.groups.iter().filter(|g| g.kind == GroupKind::Input).collect();
    if !inputs.is_empty() {
        let alpha = inputs[0].alpha;
        let shape = next.input_alpha0 / 2.0 + inputs.len() as f64 * alpha / 2.0;
        let rate = next.input_alpha0 * next.input_scale0 / 2.0
            + alpha / 2.0 * inputs.iter().map(|g| g.precision).sum::<f64>();
        // the conjugate variable is the inverse of the mean precision
        let inv: f64 = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng);
        next.input_scale = 1.0 / inv;
    }
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcOutcome {
    pub position: Vec<f64>,
    pub accepted: bool,
    /// `H(end) - H(start)`; `NaN` for a non-finite trajectory.
    pub delta_h: f64,
    pub non_finite: bool,
}

/// Leapfrog integration with unit mass. `target` returns the log density and
/// its gradient.
pub fn leapfrog<F>(target: &F, q: &[f64], p: &[f64], step: f64, length: usize) -> (Vec<f64>, Vec<f64>, f64)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let (_, mut g) = target(&q);
    let mut logp = f64::NAN;
    for i in 0..length {
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * step * gi;
        }
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += step * pi;
        }
        let (lp, gn) = target(&q);
        logp = lp;
        g = gn;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * step * gi;
        }
        if !lp.is_finite() && i + 1 < length {
            break;
        }
    }
    if length == 0 {
        logp = target(&q).0;
    }
    (q, p, logp)
}

/// One HMC transition: fresh momentum, leapfrog, Metropolis correction.
pub fn hmc_step<F>(target: &F, q: &[f64], step: f64, length: usize, rng: &mut ChaCha8Rng) -> HmcOutcome
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let p0: Vec<f64> = (0..q.len()).map(|_| rng.sample(StandardNormal)).collect();
    let (lp0, _) = target(q);
    let h0 = -lp0 + 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
    let (q1, p1, lp1) = leapfrog(target, q, &p0, step, length);
    let h1 = -lp1 + 0.5 * p1.iter().map(|v| v * v).sum::<f64>();
    let u: f64 = rng.random();
    if !h1.is_finite() || q1.iter().any(|v| !v.is_finite()) {
        return HmcOutcome { position: q.to_vec(), accepted: false, delta_h: f64::NAN, non_finite: true };
    }
    let delta_h = h1 - h0;
    if u.ln() < -delta_h {
        HmcOutcome { position: q1, accepted: true, delta_h, non_finite: false }
    } else {
        HmcOutcome { position: q.to_vec(), accepted: false, delta_h, non_finite: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub leapfrog_length: usize,
    pub step_size: f64,
    pub chain_length: usize,
    /// Target upper bound on the trailing rejection rate during adaptation.
    pub target_rejection: f64,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
    pub max_weights: usize,
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            leapfrog_length: 100,
            step_size: 0.1,
            chain_length: 2000,
            target_rejection: 0.3,
            thin: 1,
            max_weights: DEFAULT_MAX_WEIGHTS,
            init_sd: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub arch: BnnArchitecture,
    pub draws: Vec<Vec<f64>>,
    /// Input-scale trajectory, one value per iteration.
    pub input_scale_trace: Vec<f64>,
    pub burn_in: usize,
    pub final_step_size: f64,
    /// Acceptance rate over the post-burn-in iterations.
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    pub non_finite_trajectories: usize,
    pub final_prior: PriorSpec,
}

impl PosteriorSamples {
    pub fn rejection_rate(&self) -> f64 {
        1.0 - self.acceptance_rate
    }
}

const WINDOW: usize = 100;
const MIN_WINDOW: usize = 20;
const SHRINK: f64 = 0.8;
const GROW: f64 = 1.1;

/// Alternates a Gibbs hyperparameter sweep with an HMC weight update. During
/// burn-in (the first half of the chain) the step size shrinks by 0.8 while
/// the trailing rejection rate is at or above the target and grows by 1.1
/// when a full window rejects less than 10%; it is frozen afterwards.
pub fn train_bnn(x: &Array2<f64>, y: &[u8], arch: &BnnArchitecture, prior: &PriorSpec, hmc: &HmcConfig) -> Result<PosteriorSamples> {
    arch.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows and {} labels", x.nrows(), y.len())));
    }
    if x.ncols() != arch.input {
        return Err(Error::Shape(format!("{} columns for input width {}", x.ncols(), arch.input)));
    }
    if arch.n_weights() > hmc.max_weights {
        return Err(Error::Config(format!(
            "capacity: {} weights exceed the limit of {}",
            arch.n_weights(),
            hmc.max_weights
        )));
    }
    if !(hmc.step_size > 0.0) || hmc.chain_length == 0 || hmc.thin == 0 {
        return Err(Error::Config("step size, chain length and thinning must be positive".into()));
    }
    let data = BnnData { x, y };
    let mut rng = rng_from_seed(hmc.seed);
    let mut init_rng = derived_rng(hmc.seed, &[1]);
    let mut q: Vec<f64> = (0..arch.n_weights())
        .map(|_| hmc.init_sd * init_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut prior = prior.clone();
    let burn_in = hmc.chain_length / 2;
    let mut step = hmc.step_size;
    let mut window: Vec<bool> = Vec::with_capacity(WINDOW);
    let (mut acc_burn, mut acc_post, mut non_finite) = (0usize, 0usize, 0usize);
    let mut draws = Vec::new();
    let mut trace = Vec::with_capacity(hmc.chain_length);
    let mut adapted = false;
    for it in 0..hmc.chain_length {
        let ws = WeightSet { arch: *arch, data: q };
        prior = gibbs_update_hyperparams(&ws, &prior, &mut rng);
        q = ws.data;
        trace.push(prior.input_scale);
        let target = |w: &[f64]| value_and_grad(arch, &prior, data, w);
        let out = hmc_step(&target, &q, step, hmc.leapfrog_length, &mut rng);
        non_finite += usize::from(out.non_finite);
        q = out.position;
        if it < burn_in {
            acc_burn += usize::from(out.accepted);
            window.push(out.accepted);
            let rejection = window.iter().filter(|a| !**a).count() as f64 / window.len() as f64;
            if window.len() >= MIN_WINDOW && rejection >= hmc.target_rejection {
                step *= SHRINK;
                window.clear();
            } else if window.len() == WINDOW {
                if rejection < 0.1 {
                    step *= GROW;
                } else {
                    adapted = true;
                }
                window.clear();
            }
        } else {
            acc_post += usize::from(out.accepted);
            if (it - burn_in) % hmc.thin == 0 {
                draws.push(q.clone());
            }
        }
    }
    if !adapted && burn_in >= WINDOW {
        warn!("step size adaptation did not settle during burn-in; final step {step:.3e}");
    }
    let post = hmc.chain_length - burn_in;
    Ok(PosteriorSamples {
        arch: *arch,
        draws,
        input_scale_trace: trace,
        burn_in,
        final_step_size: step,
        acceptance_rate: acc_post as f64 / post as f64,
        burn_in_acceptance_rate: if burn_in > 0 { acc_burn as f64 / burn_in as f64 } else { 0.0 },
        non_finite_trajectories: non_finite,
        final_prior: prior,
    })
}

/// Posterior-predictive probability of class 1 for every row.
pub fn predict_bnn(samples: &PosteriorSamples, x: &Array2<f64>) -> Result<Vec<f64>> {
    if samples.draws.is_empty() {
        return Err(Error::InvalidArgument("no retained posterior draws".into()));
    }
    if x.ncols() != samples.arch.input {
        return Err(Error::Shape(format!("{} columns for input width {}", x.ncols(), samples.arch.input)));
    }
    let mut acc = Array1::<f64>::zeros(x.nrows());
    for d in &samples.draws {
        let (f, _, _) = forward_batch(&samples.arch, d, x, false);
        acc += &f.mapv(sigmoid);
    }
    Ok((acc / samples.draws.len() as f64).to_vec())
}

pub fn classify(probabilities: &[f64]) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub acceptance_rate: f64,
    pub final_step_size: f64,
    pub probabilities: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};

    fn small(input: usize, layers: usize, width: usize) -> BnnArchitecture {
        BnnArchitecture { input, hidden_layers: layers, hidden_width: width, activation: Activation::Tanh }
    }

    fn random_weights(arch: BnnArchitecture, seed: u64, sd: f64) -> WeightSet {
        let mut rng = derived_rng(seed, &[]);
        let data = (0..arch.n_weights()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        WeightSet { arch, data }
    }

    #[test]
    fn paper_architecture_shapes() {
        let a = BnnArchitecture::paper(4);
        assert_eq!(a.widths(), vec![4, 12, 12, 12, 12, 12, 1]);
        assert_eq!(a.shapes().len(), 6);
        assert_eq!(a.n_weights(), 5 * 12 + 4 * 13 * 12 + 13);
        let prior = PriorSpec::new(&a);
        let covered: usize = prior.groups.iter().map(PriorGroup::len).sum();
        assert_eq!(covered, a.n_weights());
        assert_eq!(prior.groups.iter().filter(|g| g.kind == GroupKind::Input).count(), 4);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let w = WeightSet::zeros(BnnArchitecture::paper(3));
        assert_eq!(forward(&w, &[1.0, -2.0, 0.5]).unwrap(), 0.0);
        assert!(forward(&w, &[1.0]).is_err());
    }

    #[test]
    fn single_hidden_unit_by_hand() {
        let arch = small(2, 1, 1);
        // layer 0: [w1, w2, b1]; layer 1: [v, c]
        let w = WeightSet::from_flat(arch, vec![0.5, -1.0, 0.2, 2.0, -0.3]).unwrap();
        let x = [1.5, 0.25];
        let expected = 2.0 * (0.5 * 1.5 - 1.0 * 0.25 + 0.2f64).tanh() - 0.3;
        assert!((forward(&w, &x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn tanh_network_is_odd_without_biases() {
        let arch = small(3, 2, 4);
        let mut w = random_weights(arch, 1, 0.7);
        let prior = PriorSpec::new(&arch);
        for g in prior.groups.iter().filter(|g| g.name.starts_with("bias")) {
            w.data[g.start..g.end].fill(0.0);
        }
        let neg = WeightSet { arch, data: w.data.iter().map(|v| -v).collect() };
        let x = [0.3, -1.2, 2.0];
        assert!((forward(&w, &x).unwrap() + forward(&neg, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn log_posterior_at_zero() {
        let arch = small(2, 2, 3);
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-1.0, -1.0]];
        let y = [0, 1, 0, 1];
        let prior = PriorSpec::new(&arch);
        let lp = log_posterior(&WeightSet::zeros(arch), &prior, BnnData { x: &x, y: &y }).unwrap();
        let norm: f64 = prior.groups.iter().map(|g| g.len() as f64 * 0.5 * (g.precision / (2.0 * PI)).ln()).sum();
        assert!((lp - (4.0 * 0.5f64.ln() + norm)).abs() < 1e-12);
    }

    #[test]
    fn log_posterior_falls_for_huge_weights() {
        let arch = small(2, 1, 2);
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let y = [0, 1];
        let prior = PriorSpec::new(&arch);
        let data = BnnData { x: &x, y: &y };
        let base = log_posterior(&random_weights(arch, 2, 0.1), &prior, data).unwrap();
        for i in 0..arch.n_weights() {
            for sign in [-1.0, 1.0] {
                let mut w = random_weights(arch, 2, 0.1);
                w.data[i] = sign * 1e3;
                assert!(log_posterior(&w, &prior, data).unwrap() < base);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = derived_rng(77, &[]);
        for case in 0..10 {
            let input = 1 + case % 5;
            let arch = BnnArchitecture {
                input,
                hidden_layers: 1 + case % 3,
                hidden_width: 2 + case % 4,
                activation: Activation::Tanh,
            };
            let x = Array2::from_shape_fn((7, input), |_| rng.sample::<f64, _>(StandardNormal));
            let y: Vec<u8> = (0..7).map(|_| rng.random_range(0..2)).collect();
            let mut prior = PriorSpec::new(&arch);
            for g in prior.groups.iter_mut() {
                g.precision = rng.random_range(0.2..3.0);
            }
            let w = random_weights(arch, case as u64, 0.8);
            let data = BnnData { x: &x, y: &y };
            let g = grad_log_posterior(&w, &prior, data);
            for _ in 0..10 {
                let i = rng.random_range(0..arch.n_weights());
                let h = 1e-5;
                let mut up = w.clone();
                up.data[i] += h;
                let mut down = w.clone();
                down.data[i] -= h;
                let num = (log_posterior(&up, &prior, data).unwrap() - log_posterior(&down, &prior, data).unwrap())
                    / (2.0 * h);
                let rel = (num - g.data[i]).abs() / num.abs().max(g.data[i].abs()).max(1e-3);
                assert!(rel < 1e-5, "case {case} coord {i}: {num} vs {}", g.data[i]);
            }
        }
    }

    #[test]
    fn prior_gradient_is_minus_tau_w() {
        let arch = small(2, 1, 2);
        let x = Array2::<f64>::zeros((0, 2));
        let prior = PriorSpec::new(&arch);
        let w = random_weights(arch, 3, 1.0);
        let g = grad_log_posterior(&w, &prior, BnnData { x: &x, y: &[] });
        for grp in &prior.groups {
            for i in grp.start..grp.end {
                assert!((g.data[i] + grp.precision * w.data[i]).abs() < 1e-15);
            }
        }
    }

    fn gaussian(q: &[f64]) -> (f64, Vec<f64>) {
        (-0.5 * q.iter().map(|v| v * v).sum::<f64>(), q.iter().map(|v| -v).collect())
    }

    #[test]
    fn leapfrog_is_reversible() {
        let (q1, p1, _) = leapfrog(&gaussian, &[1.0, -0.5], &[0.3, 0.9], 0.1, 50);
        let neg: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (q0, _, _) = leapfrog(&gaussian, &q1, &neg, 0.1, 50);
        assert!((q0[0] - 1.0).abs() < 1e-10 && (q0[1] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn small_steps_conserve_energy() {
        let mut rng = rng_from_seed(4);
        let out = hmc_step(&gaussian, &[0.7, -0.2, 1.1], 1e-5, 10, &mut rng);
        assert!(out.delta_h.abs() < 1e-6);
    }

    /// Energy error of a fixed-time trajectory on a 1D Gaussian.
    fn energy_error(step: f64) -> f64 {
        let length = (std::f64::consts::FRAC_PI_4 / step).round() as usize;
        let (q, p, lp) = leapfrog(&gaussian, &[1.0], &[0.0], step, length);
        let h0 = 0.5;
        (-lp + 0.5 * p[0] * p[0] - h0).abs() + 0.0 * q[0]
    }

    #[test]
    fn leapfrog_error_is_second_order() {
        for step in [0.1, 0.05, 0.02] {
            let ratio = energy_error(step) / energy_error(step / 2.0);
            assert!((3.0..=5.0).contains(&ratio), "step {step}: ratio {ratio}");
        }
    }

    #[test]
    fn gradient_vanishes_at_toy_maximum() {
        // zero-input network with only the output bias free: the prior alone
        // puts the maximum at 0 for balanced labels
        let arch = small(1, 0, 1);
        let x = array![[0.0], [0.0]];
        let prior = PriorSpec::new(&arch);
        let w = WeightSet::zeros(arch);
        let g = grad_log_posterior(&w, &prior, BnnData { x: &x, y: &[0, 1] });
        assert!(g.data.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn correlated_gaussian_covariance() {
        // precision matrix of a 2D Gaussian with variances 1, 2 and covariance 0.6
        let cov = [[1.0, 0.6], [0.6, 2.0]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let prec = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let target = |q: &[f64]| {
            let g0 = -(prec[0][0] * q[0] + prec[0][1] * q[1]);
            let g1 = -(prec[1][0] * q[0] + prec[1][1] * q[1]);
            (0.5 * (q[0] * g0 + q[1] * g1), vec![g0, g1])
        };
        let mut rng = rng_from_seed(8);
        let mut q = vec![0.0, 0.0];
        let n = 50_000;
        let mut acc = [[0.0; 2]; 2];
        let mut mean = [0.0; 2];
        for _ in 0..n {
            q = hmc_step(&target, &q, 0.4, 4, &mut rng).position;
            for i in 0..2 {
                mean[i] += q[i] / n as f64;
                for j in 0..2 {
                    acc[i][j] += q[i] * q[j] / n as f64;
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let est = acc[i][j] - mean[i] * mean[j];
                assert!((est - cov[i][j]).abs() <= 0.1 * cov[i][j].abs(), "{i}{j}: {est}");
            }
        }
    }

    #[test]
    fn gaussian_target_mean_is_zero() {
        let mut rng = rng_from_seed(5);
        let mut q = vec![0.0];
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            q = hmc_step(&gaussian, &q, 0.3, 5, &mut rng).position;
            sum += q[0];
        }
        // HMC draws on a Gaussian are close to independent at this setting
        assert!((sum / n as f64).abs() < 3.0 / (n as f64).sqrt() * 1.5);
    }

    #[test]
    fn gibbs_zero_weights_keep_quadratic_term() {
        let arch = small(1, 1, 1);
        let w = WeightSet::zeros(arch);
        let prior = PriorSpec::new(&arch);
        // posterior shape α/2 + k/2 = 1.5, rate α/(2τ) = 2: mean 0.75
        let mut rng = rng_from_seed(6);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| gibbs_update_hyperparams(&w, &prior, &mut rng).groups.iter().find(|g| g.name == "output").unwrap().precision)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.75).abs() < 0.03, "{mean}");
    }

    #[test]
    fn gibbs_precision_falls_with_weight_energy() {
        let arch = small(1, 1, 3);
        let prior = PriorSpec::new(&arch);
        let g = prior.groups.iter().find(|g| g.name == "output").unwrap().clone();
        let mut last = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut w = WeightSet::zeros(arch);
            w.data[g.start..g.end].fill(scale);
            let shape = g.alpha / 2.0 + g.len() as f64 / 2.0;
            let rate = g.alpha / (2.0 * g.scale) + g.sum_sq(&w.data) / 2.0;
            let mean = shape / rate;
            assert!(mean < last);
            last = mean;
        }
    }

    /// Kolmogorov–Smirnov check of 10,000 Gibbs draws against the closed-form
    /// gamma posterior; `sqrt(n) D < 1.628` corresponds to p > 0.01.
    #[test]
    fn gibbs_draws_follow_closed_form() {
        let arch = small(2, 1, 3);
        let prior = PriorSpec::new(&arch);
        let w = random_weights(arch, 9, 0.8);
        let g = prior.groups.iter().find(|g| g.name == "hidden[1]").cloned().unwrap_or_else(|| {
            prior.groups.iter().find(|g| g.name == "output").unwrap().clone()
        });
        let shape = g.alpha / 2.0 + g.len() as f64 / 2.0;
        let rate = g.alpha / (2.0 * g.scale) + g.sum_sq(&w.data) / 2.0;
        let dist = GammaDist::new(shape, rate).unwrap();
        let mut rng = rng_from_seed(10);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| gibbs_update_hyperparams(&w, &prior, &mut rng).groups.iter().find(|h| h.name == g.name).unwrap().precision)
            .collect();
        draws.sort_by(f64::total_cmp);
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = dist.cdf(v);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max);
        assert!((n as f64).sqrt() * d < 1.628, "D = {d}");
    }

    #[test]
    fn prediction_averages_draws() {
        let arch = small(1, 1, 1);
        let x = array![[0.0]];
        let mut s = PosteriorSamples {
            arch,
            draws: vec![vec![0.0; 4]],
            input_scale_trace: vec![],
            burn_in: 0,
            final_step_size: 0.1,
            acceptance_rate: 1.0,
            burn_in_acceptance_rate: 1.0,
            non_finite_trajectories: 0,
            final_prior: PriorSpec::new(&arch),
        };
        assert_eq!(predict_bnn(&s, &x).unwrap(), vec![0.5]);
        // output bias only: logits ln(0.25) and ln(4) give 0.2 and 0.8
        s.draws = vec![vec![0.0, 0.0, 0.0, 0.25f64.ln()], vec![0.0, 0.0, 0.0, 4f64.ln()]];
        let p = predict_bnn(&s, &x).unwrap()[0];
        assert!((p - 0.5).abs() < 1e-12);
        s.draws.reverse();
        assert_eq!(predict_bnn(&s, &x).unwrap()[0], p);
        assert_eq!(classify(&[0.5, 0.49]), vec![1, 0]);
    }

    #[test]
    fn capacity_guard() {
        let arch = BnnArchitecture::paper(10);
        let x = Array2::<f64>::zeros((2, 10));
        let hmc = HmcConfig { max_weights: 100, ..Default::default() };
        let err = train_bnn(&x, &[0, 1], &arch, &PriorSpec::new(&arch), &hmc).unwrap_err();
        assert!(err.to_string().contains("capacity"));
    }

    #[test]
    fn short_chain_retains_half() {
        let arch = small(2, 1, 2);
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]];
        let hmc = HmcConfig { chain_length: 41, leapfrog_length: 10, ..Default::default() };
        let s = train_bnn(&x, &[1, 0, 1, 0], &arch, &PriorSpec::new(&arch), &hmc).unwrap();
        assert_eq!(s.burn_in, 20);
        assert_eq!(s.draws.len(), 21);
        assert!((0.0..=1.0).contains(&s.acceptance_rate));
    }
}
