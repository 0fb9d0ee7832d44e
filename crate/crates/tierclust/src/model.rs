//! Core distributions: truncated stick-breaking, Poisson-log-normal, probit
//! dropout, ZIPLN sampling, and the hyperparameter record shared by the
//! sampler, the prior tools, and the simulator.
//!
//! Everything here is stateless apart from the caller-supplied RNG, so the
//! functions are safe to use concurrently as long as each logical task owns
//! its own stream (see [`crate::rng`]).

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};

/// Poisson rates above this are rejected instead of sampled; a rate this
/// large means e^theta has blown up in a divergent chain and silently
/// saturating would hide the bug.
pub const MAX_POISSON_RATE: f64 = 1e7;

/// Stick proportions are clamped into `[GEM_CLAMP, 1 - GEM_CLAMP]` so later
/// log/logit transforms stay finite.
pub const GEM_CLAMP: f64 = 1e-12;

/// Floor for Dirichlet shapes assembled from stick weights; a fully
/// underflowed stick must not turn into an invalid zero shape.
pub const MIN_DIRICHLET_SHAPE: f64 = 1e-300;

const SQRT_PI: f64 = 1.772_453_850_905_515_9;

// Cody's rational Chebyshev approximation of erf/erfc (double precision;
// absolute error of the resulting CDF is ~1e-16 on [-8.5, 8.5]).
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_56e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_47e3,
    1.857_777_061_846_031_53e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_09e1,
    2.440_246_379_344_441_73e2,
    1.282_616_526_077_372_28e3,
    2.844_236_833_439_170_62e3,
];
const ERFC_C: [f64; 9] = [
    5.641_884_969_886_700_89e-1,
    8.883_149_794_388_375_94e0,
    6.611_919_063_714_162_95e1,
    2.986_351_381_974_001_31e2,
    8.819_522_212_417_690_9e2,
    1.712_047_612_634_070_58e3,
    2.051_078_377_826_071_47e3,
    1.230_339_354_797_997_25e3,
    2.153_115_354_744_038_46e-8,
];
const ERFC_D: [f64; 8] = [
    1.574_492_611_070_983_47e1,
    1.176_939_508_913_124_99e2,
    5.371_811_018_620_098_58e2,
    1.621_389_574_566_690_19e3,
    3.290_799_235_733_459_63e3,
    4.362_619_090_143_247_16e3,
    3.439_367_674_143_721_64e3,
    1.230_339_354_803_749_42e3,
];
const ERFC_P: [f64; 6] = [
    3.053_266_349_612_323_44e-1,
    3.603_448_999_498_044_39e-1,
    1.257_817_261_112_292_46e-1,
    1.608_378_514_874_227_66e-2,
    6.587_491_615_298_378_03e-4,
    1.631_538_713_730_209_78e-2,
];
const ERFC_Q: [f64; 5] = [
    2.568_520_192_289_822_42e0,
    1.872_952_849_923_460_47e0,
    5.279_051_029_514_284_12e-1,
    6.051_834_131_244_131_91e-2,
    2.335_204_976_268_691_85e-3,
];
const INV_SQRT_PI: f64 = 5.641_895_835_477_562_87e-1;

fn erfc_cody(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        let z = y * y;
        let mut num = ERF_A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + ERF_A[i]) * z;
            den = (den + ERF_B[i]) * z;
        }
        let erf = x * (num + ERF_A[3]) / (den + ERF_B[3]);
        return 1.0 - erf;
    }
    let result = if y <= 4.0 {
        let mut num = ERFC_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERFC_C[i]) * y;
            den = (den + ERFC_D[i]) * y;
        }
        let r = (num + ERFC_C[7]) / (den + ERFC_D[7]);
        let ysq = (y * 16.0).floor() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else {
        let ysq = 1.0 / (y * y);
        let mut num = ERFC_P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + ERFC_P[i]) * ysq;
            den = (den + ERFC_Q[i]) * ysq;
        }
        let mut r = ysq * (num + ERFC_P[4]) / (den + ERFC_Q[4]);
        r = (INV_SQRT_PI - r) / y;
        let yaint = (y * 16.0).floor() / 16.0;
        let del = (y - yaint) * (y + yaint);
        ((-yaint * yaint).exp() * (-del).exp() * r).max(0.0)
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc_cody(-x / std::f64::consts::SQRT_2)
}

/// Log density of N(mean, var) at `x`.
pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln())
}

// ---------------------------------------------------------------------------
// Stick breaking
// ---------------------------------------------------------------------------

/// Weights of a truncated stick-breaking process together with the stick
/// proportions that produced them.
///
/// `weights` has length `T`, sums to one, and satisfies
/// `weights[t] = proportions[t] * prod_{s<t}(1 - proportions[s])`; the last
/// weight is the leftover stick.
#[derive(Debug, Clone, PartialEq)]
pub struct StickWeights {
    pub weights: Vec<f64>,
    pub proportions: Vec<f64>,
}

impl StickWeights {
    pub fn truncation(&self) -> usize {
        self.weights.len()
    }
}

/// Deterministically turn `T - 1` stick proportions into `T` weights.
pub fn stick_break(proportions: &[f64], truncation: usize) -> Result<StickWeights> {
    if truncation < 2 {
        return Err(Error::Domain(format!(
            "stick truncation must be at least 2, got {truncation}"
        )));
    }
    if proportions.len() != truncation - 1 {
        return Err(Error::Domain(format!(
            "expected {} stick proportions for truncation {truncation}, got {}",
            truncation - 1,
            proportions.len()
        )));
    }
    for (t, &p) in proportions.iter().enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "stick proportion {t} is {p}, outside (0, 1)"
            )));
        }
    }
    let mut weights = Vec::with_capacity(truncation);
    let mut remaining = 1.0_f64;
    for &p in proportions {
        weights.push(p * remaining);
        remaining *= 1.0 - p;
    }
    // The leftover piece. The running product equals 1 - sum(weights)
    // algebraically but stays positive where the subtraction would round to
    // zero.
    weights.push(remaining.max(0.0));
    Ok(StickWeights {
        weights,
        proportions: proportions.to_vec(),
    })
}

/// Draw truncated-GEM weights: proportions i.i.d. Beta(1, concentration),
/// weights by stick breaking.
pub fn sample_gem<R: Rng>(
    concentration: f64,
    truncation: usize,
    rng: &mut R,
) -> Result<StickWeights> {
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Domain(format!(
            "GEM concentration must be positive, got {concentration}"
        )));
    }
    let beta = Beta::new(1.0, concentration)
        .map_err(|e| Error::Domain(format!("Beta(1, {concentration}): {e}")))?;
    let proportions: Vec<f64> = (0..truncation.saturating_sub(1))
        .map(|_| beta.sample(rng).clamp(GEM_CLAMP, 1.0 - GEM_CLAMP))
        .collect();
    stick_break(&proportions, truncation)
}

// ---------------------------------------------------------------------------
// Dropout and counts
// ---------------------------------------------------------------------------

/// Probability that a true count `y` drops out to an observed zero:
/// `Phi(lambda0 + lambda1 * log2(y + 1))`, strictly decreasing in `y`.
pub fn dropout_probability(y: u64, lambda0: f64, lambda1: f64) -> Result<f64> {
    if !(lambda1 < 0.0) {
        return Err(Error::Domain(format!(
            "dropout slope lambda1 must be negative, got {lambda1}"
        )));
    }
    Ok(normal_cdf(lambda0 + lambda1 * (y as f64 + 1.0).log2()))
}

/// Draw a Poisson count, guarding against runaway rates.
pub fn sample_poisson<R: Rng>(rate: f64, rng: &mut R) -> Result<u64> {
    if !rate.is_finite() || rate > MAX_POISSON_RATE {
        return Err(Error::RateOverflow { rate });
    }
    if rate <= 0.0 {
        return Ok(0);
    }
    let y: f64 = Poisson::new(rate)
        .map_err(|e| Error::Domain(format!("Poisson({rate}): {e}")))?
        .sample(rng);
    Ok(y as u64)
}

/// A Poisson-log-normal draw: the count and the latent log rate offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlnDraw {
    pub y: u64,
    pub theta: f64,
}

/// Draw `Y ~ Poi(s * e^theta)` with `theta ~ N(eta, sigma2)`.
///
/// The latent `theta` is returned so the sampler and the simulator can reuse
/// it as the augmentation variable.
pub fn sample_pln<R: Rng>(s: f64, eta: f64, sigma2: f64, rng: &mut R) -> Result<PlnDraw> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("scaling factor must be positive, got {s}")));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {sigma2}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    let theta = eta + sigma2.sqrt() * z;
    let y = sample_poisson(s * theta.exp(), rng)?;
    Ok(PlnDraw { y, theta })
}

/// A zero-inflated PLN draw with its latent truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZiplnDraw {
    /// Observed count (0 if the draw dropped out).
    pub x: u64,
    /// True underlying count.
    pub y: u64,
    /// Latent log rate offset.
    pub theta: f64,
    pub dropped: bool,
}

/// Draw an observed count from the zero-inflated PLN model: the true count
/// from [`sample_pln`], then dropout with probability
/// [`dropout_probability`].
pub fn sample_zipln<R: Rng>(
    lambda0: f64,
    lambda1: f64,
    s: f64,
    eta: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<ZiplnDraw> {
    let pln = sample_pln(s, eta, sigma2, rng)?;
    let p = dropout_probability(pln.y, lambda0, lambda1)?;
    let dropped = rng.random::<f64>() < p;
    Ok(ZiplnDraw {
        x: if dropped { 0 } else { pln.y },
        y: pln.y,
        theta: pln.theta,
        dropped,
    })
}

// ---------------------------------------------------------------------------
// ZIPLN zero-probability quadrature
// ---------------------------------------------------------------------------

/// Latent counts above this are ignored by the quadrature oracle.
pub const ZERO_PROB_Y_CAP: u64 = 1000;

/// Gauss–Hermite nodes and weights for `int f(x) e^{-x^2} dx`.
///
/// Newton iteration on the orthonormal Hermite recurrence; good to ~1e-14
/// for the orders used here.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one quadrature node");
    const EPS: f64 = 1e-14;
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0_f64; n];
    let mut w = vec![0.0_f64; n];
    // Roots found largest-first on the positive half axis.
    let mut roots = vec![0.0_f64; n.div_ceil(2)];
    let mut z = 0.0_f64;
    for i in 0..roots.len() {
        z = match i {
            0 => {
                let an = 2.0 * n as f64 + 1.0;
                an.sqrt() - 1.85575 * an.powf(-1.0 / 6.0)
            }
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * roots[0],
            3 => 1.91 * z - 0.91 * roots[1],
            _ => 2.0 * z - roots[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = (j + 1) as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= EPS {
                break;
            }
        }
        roots[i] = z;
        // Ascending output, symmetric weights.
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `P(X = 0)` under the ZIPLN model, by Gauss–Hermite quadrature over the
/// latent log rate and a truncated sum over latent counts `y <=`
/// [`ZERO_PROB_Y_CAP`].
///
/// Independent of the sampling path, so it serves as the oracle for
/// [`sample_zipln`] and for generated-data zero rates.
pub fn zipln_zero_probability(
    lambda0: f64,
    lambda1: f64,
    s: f64,
    eta: f64,
    sigma2: f64,
) -> Result<f64> {
    if !(lambda1 < 0.0) {
        return Err(Error::Domain(format!(
            "dropout slope lambda1 must be negative, got {lambda1}"
        )));
    }
    if !(s > 0.0 && sigma2 > 0.0) {
        return Err(Error::Domain(
            "scaling factor and variance must be positive".into(),
        ));
    }
    let (nodes, weights) = gauss_hermite(61);
    let sd = sigma2.sqrt();
    let keep0 = 1.0 - normal_cdf(lambda0);
    let mut total = 0.0;
    for (&xq, &wq) in nodes.iter().zip(&weights) {
        let theta = eta + std::f64::consts::SQRT_2 * sd * xq;
        let rate = s * theta.exp();
        // P(Y=0, kept) + sum_y P(Y=y) p(y); underflow of e^{-rate} only
        // happens at nodes whose Gaussian weight is already negligible.
        let mut pmf = (-rate).exp();
        let mut inner = pmf * keep0;
        for y in 0..=ZERO_PROB_Y_CAP {
            inner += pmf * normal_cdf(lambda0 + lambda1 * (y as f64 + 1.0).log2());
            pmf *= rate / (y as f64 + 1.0);
        }
        total += wq * inner;
    }
    Ok(total / SQRT_PI)
}

// ---------------------------------------------------------------------------
// Shared sampling helpers
// ---------------------------------------------------------------------------

/// Draw a category from unnormalised log weights (max-subtraction before
/// exponentiation).
pub fn sample_categorical_log<R: Rng>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "all categorical log weights are -inf or NaN".into(),
        ));
    }
    let mut total = 0.0;
    let mut cdf = Vec::with_capacity(log_weights.len());
    for &lw in log_weights {
        total += (lw - max).exp();
        cdf.push(total);
    }
    let u: f64 = rng.random::<f64>() * total;
    Ok(cdf.iter().position(|&c| u < c).unwrap_or(log_weights.len() - 1))
}

/// Dirichlet draw by normalised Gamma variables.
///
/// Entries are floored at 1e-300 so logarithms stay finite; shapes far below
/// one underflow to that floor, which is the correct magnitude anyway.
pub fn sample_dirichlet<R: Rng>(alphas: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut draws = Vec::with_capacity(alphas.len());
    for &a in alphas {
        if !(a > 0.0) {
            return Err(Error::Domain(format!(
                "Dirichlet parameters must be positive, got {a}"
            )));
        }
        let g = Gamma::new(a, 1.0)
            .map_err(|e| Error::Domain(format!("Gamma({a}, 1): {e}")))?
            .sample(rng);
        draws.push(g);
    }
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // Every shape underflowed; put the mass on the largest one.
        let arg = alphas
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut out = vec![1e-300; alphas.len()];
        out[arg] = 1.0;
        return Ok(out);
    }
    Ok(draws.iter().map(|&g| (g / sum).max(1e-300)).collect())
}

/// Inverse-Gamma(shape, rate) draw.
pub fn sample_inv_gamma<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) {
        return Err(Error::Domain(format!(
            "inverse gamma parameters must be positive, got ({shape}, {rate})"
        )));
    }
    let g: f64 = Gamma::new(shape, 1.0)
        .map_err(|e| Error::Domain(format!("Gamma({shape}, 1): {e}")))?
        .sample(rng);
    Ok(rate / g.max(1e-300))
}

/// Gamma(shape, rate) draw.
pub fn sample_gamma<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) {
        return Err(Error::Domain(format!(
            "gamma parameters must be positive, got ({shape}, {rate})"
        )));
    }
    Ok(Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Domain(format!("Gamma({shape}, rate {rate}): {e}")))?
        .sample(rng))
}

/// Standard normal conditioned on exceeding `lower`.
///
/// Plain rejection when the cut is mild, Robert's exponential rejection in
/// the tail.
pub fn sample_truncnorm_std_above<R: Rng>(lower: f64, rng: &mut R) -> f64 {
    if lower < 0.45 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > lower {
                return z;
            }
        }
    }
    let lambda = 0.5 * (lower + (lower * lower + 4.0).sqrt());
    loop {
        let e = -rng.random::<f64>().ln() / lambda;
        let x = lower + e;
        let d = x - lambda;
        if rng.random::<f64>() <= (-0.5 * d * d).exp() {
            return x;
        }
    }
}

/// N(mean, 1) conditioned positive.
pub fn sample_utility_positive<R: Rng>(mean: f64, rng: &mut R) -> f64 {
    mean + sample_truncnorm_std_above(-mean, rng)
}

/// N(mean, 1) conditioned negative.
pub fn sample_utility_negative<R: Rng>(mean: f64, rng: &mut R) -> f64 {
    mean - sample_truncnorm_std_above(mean, rng)
}

/// Normal(mean, var) draw.
pub fn sample_normal<R: Rng>(mean: f64, var: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + var.sqrt() * z
}

pub fn sample_beta<R: Rng>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    Ok(Beta::new(a, b)
        .map_err(|e| Error::Domain(format!("Beta({a}, {b}): {e}")))?
        .sample(rng))
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

/// Gamma(shape, rate) prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Inverse-Gamma(shape, rate) prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Hyper-priors of an effect family: its mean gets
/// `N(location, location_variance)`, its variance gets
/// `InvGamma(variance_shape, variance_rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectHyperPrior {
    pub location: f64,
    pub location_variance: f64,
    pub variance_shape: f64,
    pub variance_rate: f64,
}

/// Per-gene normal prior (mean, variance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenePrior {
    pub mean: f64,
    pub variance: f64,
}

/// Fixed constants and hyper-prior parameters of the truncated model.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Concentration over cell-type weights within a subgroup.
    pub gamma: f64,
    /// Concentration over subgroup weights.
    pub nu: f64,
    /// Cell-type truncation level K.
    pub max_cell_types: usize,
    /// Subgroup truncation level L.
    pub max_subgroups: usize,
    /// Prior of the shared-weight concentration alpha.
    pub alpha_prior: GammaPrior,
    /// Hyper-priors of the cell-type effect family.
    pub mu_hyper: EffectHyperPrior,
    /// Hyper-priors of the subgroup effect family.
    pub beta_hyper: EffectHyperPrior,
    /// Prior of the per-gene log-scale variances.
    pub sigma2_prior: InvGammaPrior,
    /// Per-gene prior of the dropout intercept.
    pub lambda0_prior: Vec<GenePrior>,
    /// Per-gene prior of the dropout slope, truncated to negatives.
    pub lambda1_prior: Vec<GenePrior>,
}

impl Hyperparameters {
    /// Documented defaults: concentrations 0.5, truncation levels 15, weakly
    /// informative hyper-priors, broadcast to `n_genes`.
    pub fn default_for(n_genes: usize) -> Self {
        Self {
            gamma: 0.5,
            nu: 0.5,
            max_cell_types: 15,
            max_subgroups: 15,
            alpha_prior: GammaPrior { shape: 1.0, rate: 1.0 },
            mu_hyper: EffectHyperPrior {
                location: 0.0,
                location_variance: 25.0,
                variance_shape: 2.0,
                variance_rate: 2.0,
            },
            beta_hyper: EffectHyperPrior {
                location: 0.0,
                location_variance: 25.0,
                variance_shape: 2.0,
                variance_rate: 2.0,
            },
            sigma2_prior: InvGammaPrior { shape: 3.0, rate: 1.0 },
            lambda0_prior: vec![GenePrior { mean: 0.0, variance: 1.0 }; n_genes],
            lambda1_prior: vec![GenePrior { mean: -1.0, variance: 1.0 }; n_genes],
        }
    }

    pub fn n_genes(&self) -> usize {
        self.lambda0_prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        fn pos(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        }
        pos("gamma", self.gamma)?;
        pos("nu", self.nu)?;
        if self.max_cell_types < 2 {
            return Err(Error::Config(format!(
                "cell-type truncation K must be at least 2, got {}",
                self.max_cell_types
            )));
        }
        if self.max_subgroups < 2 {
            return Err(Error::Config(format!(
                "subgroup truncation L must be at least 2, got {}",
                self.max_subgroups
            )));
        }
        pos("alpha prior shape", self.alpha_prior.shape)?;
        pos("alpha prior rate", self.alpha_prior.rate)?;
        for (name, h) in [("mu", &self.mu_hyper), ("beta", &self.beta_hyper)] {
            if !h.location.is_finite() {
                return Err(Error::Config(format!("{name} hyper location must be finite")));
            }
            pos(&format!("{name} hyper location variance"), h.location_variance)?;
            pos(&format!("{name} hyper variance shape"), h.variance_shape)?;
            pos(&format!("{name} hyper variance rate"), h.variance_rate)?;
        }
        pos("sigma2 prior shape", self.sigma2_prior.shape)?;
        pos("sigma2 prior rate", self.sigma2_prior.rate)?;
        if self.lambda0_prior.len() != self.lambda1_prior.len() {
            return Err(Error::Config(
                "lambda prior vectors must have equal length".into(),
            ));
        }
        if self.lambda0_prior.is_empty() {
            return Err(Error::Config("lambda priors must cover at least one gene".into()));
        }
        for g in &self.lambda0_prior {
            if !g.mean.is_finite() {
                return Err(Error::Config("lambda0 prior mean must be finite".into()));
            }
            pos("lambda0 prior variance", g.variance)?;
        }
        for g in &self.lambda1_prior {
            if !g.mean.is_finite() {
                return Err(Error::Config("lambda1 prior mean must be finite".into()));
            }
            pos("lambda1 prior variance", g.variance)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKey};
    use approx::assert_relative_eq;

    fn test_rng(unit: u64) -> rand_chacha::ChaCha8Rng {
        stream(0xDEADBEEF, StreamKey::new(0, 999, unit))
    }

    mod stick {
        use super::*;

        #[test]
        fn telescoping_product() {
            let w = stick_break(&[0.5, 0.5], 3).unwrap();
            assert_relative_eq!(w.weights[0], 0.5, max_relative = 1e-15);
            assert_relative_eq!(w.weights[1], 0.25, max_relative = 1e-15);
            assert_relative_eq!(w.weights[2], 0.25, max_relative = 1e-15);

            let w = stick_break(&[0.2, 0.3, 0.4], 4).unwrap();
            let expect = [0.2, 0.24, 0.224, 0.336];
            for (a, b) in w.weights.iter().zip(expect) {
                assert_relative_eq!(*a, b, max_relative = 1e-14);
            }
        }

        #[test]
        fn boundary_limit() {
            let w = stick_break(&[1.0 - 1e-12], 2).unwrap();
            assert!((w.weights[0] - 1.0).abs() < 1e-11);
            assert!(w.weights[1] >= 0.0 && w.weights[1] < 1e-11);
        }

        #[test]
        fn domain_errors() {
            assert!(stick_break(&[0.0], 2).is_err());
            assert!(stick_break(&[1.0], 2).is_err());
            assert!(stick_break(&[-0.1], 2).is_err());
            assert!(stick_break(&[f64::NAN], 2).is_err());
            assert!(stick_break(&[0.5, 0.5], 2).is_err()); // length mismatch
            assert!(stick_break(&[], 1).is_err());
        }

        #[test]
        fn gem_is_reproducible_and_structured() {
            let a = sample_gem(1.3, 6, &mut test_rng(1)).unwrap();
            let b = sample_gem(1.3, 6, &mut test_rng(1)).unwrap();
            assert_eq!(a, b);

            let w = sample_gem(2.0, 2, &mut test_rng(2)).unwrap();
            assert_eq!(w.weights.len(), 2);
            assert_relative_eq!(w.weights[0], w.proportions[0], max_relative = 1e-15);
            assert_relative_eq!(w.weights[0] + w.weights[1], 1.0, epsilon = 1e-12);
        }

        #[test]
        fn gem_first_weight_mean_matches_beta_mean() {
            let nu = 2.5;
            let n = 100_000;
            let mut rng = test_rng(3);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let w = sample_gem(nu, 4, &mut rng).unwrap().weights[0];
                sum += w;
                sumsq += w * w;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            let expect = 1.0 / (1.0 + nu);
            assert!(
                (mean - expect).abs() < 3.0 * se,
                "mean {mean} vs {expect} (3se {})",
                3.0 * se
            );
        }
    }

    mod dropout {
        use super::*;

        #[test]
        fn frozen_values() {
            assert_relative_eq!(dropout_probability(0, 0.0, -1.0).unwrap(), 0.5, epsilon = 1e-15);
            // Phi(-1)
            assert_relative_eq!(
                dropout_probability(1, 0.0, -1.0).unwrap(),
                0.158_655_253_931_457_05,
                epsilon = 1e-12
            );
            // log2(4) = 2, 1 - 0.5*2 = 0
            assert_relative_eq!(dropout_probability(3, 1.0, -0.5).unwrap(), 0.5, epsilon = 1e-15);
        }

        #[test]
        fn rejects_nonnegative_slope() {
            assert!(dropout_probability(1, 0.0, 0.0).is_err());
            assert!(dropout_probability(1, 0.0, 0.5).is_err());
        }

        #[test]
        fn monotone_nonincreasing_in_y() {
            for &(l0, l1) in &[(0.0, -1.0), (2.0, -0.3), (-1.5, -2.0)] {
                let mut prev = f64::INFINITY;
                for y in 0..200 {
                    let p = dropout_probability(y, l0, l1).unwrap();
                    assert!(p <= prev + 1e-15, "not monotone at y={y}");
                    prev = p;
                }
            }
        }
    }

    mod cdf {
        use super::*;

        #[test]
        fn matches_reference_within_1e14() {
            // Reference values from mpmath (30 digits).
            let cases = [
                (-8.0, 6.220_960_574_271_784_1e-16),
                (-3.0, 1.349_898_031_630_094_526_7e-3),
                (-1.0, 0.158_655_253_931_457_051_41),
                (-0.5, 0.308_537_538_725_986_896_36),
                (0.0, 0.5),
                (0.5, 0.691_462_461_274_013_103_64),
                (1.0, 0.841_344_746_068_542_948_59),
                (1.96, 0.975_002_104_851_779_563_79),
                (3.0, 0.998_650_101_968_369_905_47),
                (8.0, 0.999_999_999_999_999_377_9),
            ];
            for (x, expect) in cases {
                assert!(
                    (normal_cdf(x) - expect).abs() < 1e-14,
                    "Phi({x}) = {} vs {expect}",
                    normal_cdf(x)
                );
            }
        }
    }

    mod pln {
        use super::*;

        #[test]
        fn moments_match_lognormal_identities() {
            let (s, eta, sigma2) = (1.5, 0.3, 0.8);
            let n = 100_000usize;
            let mut rng = test_rng(10);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let y = sample_pln(s, eta, sigma2, &mut rng).unwrap().y as f64;
                sum += y;
                sumsq += y * y;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let expect_mean = s * (eta + sigma2 / 2.0).exp();
            let expect_var = expect_mean + expect_mean * expect_mean * (sigma2.exp_m1());
            let se_mean = (var / n as f64).sqrt();
            assert!(
                (mean - expect_mean).abs() < 3.0 * se_mean,
                "mean {mean} vs {expect_mean}"
            );
            // Variance of the variance estimator is roughly 2 var^2 / n plus
            // kurtosis terms; use a generous 10% band instead.
            assert!(
                (var - expect_var).abs() < 0.1 * expect_var,
                "var {var} vs {expect_var}"
            );
            // Over-dispersion.
            assert!(var > mean);
        }

        #[test]
        fn degenerates_to_poisson_as_variance_vanishes() {
            let (s, eta, sigma2) = (2.0, 0.5, 1e-12);
            let n = 100_000usize;
            let mut rng = test_rng(11);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let y = sample_pln(s, eta, sigma2, &mut rng).unwrap().y as f64;
                sum += y;
                sumsq += y * y;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            assert!((var / mean - 1.0).abs() < 0.05, "ratio {}", var / mean);
        }

        #[test]
        fn rate_overflow_is_loud() {
            let err = sample_pln(1.0, 25.0, 1e-18, &mut test_rng(12)).unwrap_err();
            assert!(matches!(err, Error::RateOverflow { .. }));
        }
    }

    mod zipln {
        use super::*;

        #[test]
        fn dropout_limits() {
            let mut rng = test_rng(20);
            for _ in 0..500 {
                let d = sample_zipln(-1e3, -1.0, 1.0, 1.0, 0.5, &mut rng).unwrap();
                assert!(!d.dropped);
                assert_eq!(d.x, d.y);
            }
            for _ in 0..500 {
                let d = sample_zipln(1e3, -1.0, 1.0, 1.0, 0.5, &mut rng).unwrap();
                assert!(d.dropped);
                assert_eq!(d.x, 0);
            }
        }

        #[test]
        fn zero_rate_matches_quadrature_oracle() {
            let (l0, l1, s, eta, sigma2) = (-1.0, -0.7, 1.0, 0.0, 0.25);
            let p = zipln_zero_probability(l0, l1, s, eta, sigma2).unwrap();
            let n = 100_000usize;
            let mut rng = test_rng(21);
            let mut zeros = 0usize;
            for _ in 0..n {
                if sample_zipln(l0, l1, s, eta, sigma2, &mut rng).unwrap().x == 0 {
                    zeros += 1;
                }
            }
            let phat = zeros as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((phat - p).abs() < 3.0 * se, "{phat} vs {p} (3se {})", 3.0 * se);
        }

        #[test]
        fn quadrature_matches_independent_reference() {
            // scipy.integrate.quad + scipy.stats frozen references.
            let p1 = zipln_zero_probability(-1.0, -0.7, 1.0, 0.0, 0.25).unwrap();
            assert!((p1 - 0.388_380_504_890_144).abs() < 1e-7, "{p1}");
            let p2 = zipln_zero_probability(0.5, -1.2, 2.0, 1.0, 1.0).unwrap();
            assert!((p2 - 0.098_902_492_976_819_8).abs() < 1e-7, "{p2}");
        }
    }

    mod quadrature {
        use super::*;

        #[test]
        fn nodes_match_reference_order_five() {
            let (x, w) = gauss_hermite(5);
            let xr = [
                -2.020_182_870_456_085_1,
                -0.958_572_464_613_818_51,
                0.0,
                0.958_572_464_613_818_51,
                2.020_182_870_456_085_1,
            ];
            let wr = [
                0.019_953_242_059_045_882,
                0.393_619_323_152_241_07,
                0.945_308_720_482_941_68,
                0.393_619_323_152_241_07,
                0.019_953_242_059_045_882,
            ];
            for i in 0..5 {
                assert!((x[i] - xr[i]).abs() < 1e-12, "node {i}: {} vs {}", x[i], xr[i]);
                assert!((w[i] - wr[i]).abs() < 1e-12, "weight {i}");
            }
        }

        #[test]
        fn high_order_moments() {
            let (x, w) = gauss_hermite(61);
            let total: f64 = w.iter().sum();
            assert_relative_eq!(total, SQRT_PI, epsilon = 1e-10);
            let second: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi * xi).sum();
            assert_relative_eq!(second, SQRT_PI / 2.0, epsilon = 1e-9);
        }
    }

    mod helpers {
        use super::*;

        #[test]
        fn categorical_log_frequencies() {
            let lw = [0.2_f64.ln(), 0.3_f64.ln(), 0.5_f64.ln()];
            let n = 100_000usize;
            let mut counts = [0usize; 3];
            let mut rng = test_rng(30);
            for _ in 0..n {
                counts[sample_categorical_log(&lw, &mut rng).unwrap()] += 1;
            }
            for (c, p) in counts.iter().zip([0.2, 0.3, 0.5]) {
                let phat = *c as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((phat - p).abs() < 4.0 * se, "{phat} vs {p}");
            }
        }

        #[test]
        fn categorical_log_shift_invariant() {
            let lw = [-1.0, -2.0, -0.5];
            let shifted: Vec<f64> = lw.iter().map(|x| x + 1000.0).collect();
            let mut r1 = test_rng(31);
            let mut r2 = test_rng(31);
            for _ in 0..1000 {
                assert_eq!(
                    sample_categorical_log(&lw, &mut r1).unwrap(),
                    sample_categorical_log(&shifted, &mut r2).unwrap()
                );
            }
        }

        #[test]
        fn categorical_log_all_neg_inf_is_error() {
            let lw = [f64::NEG_INFINITY, f64::NEG_INFINITY];
            assert!(sample_categorical_log(&lw, &mut test_rng(32)).is_err());
        }

        #[test]
        fn dirichlet_mean() {
            let n = 20_000usize;
            let mut rng = test_rng(33);
            let mut sums = [0.0; 2];
            for _ in 0..n {
                let d = sample_dirichlet(&[3.0, 1.0], &mut rng).unwrap();
                sums[0] += d[0];
                sums[1] += d[1];
            }
            assert!((sums[0] / n as f64 - 0.75).abs() < 0.005);
            assert!((sums[1] / n as f64 - 0.25).abs() < 0.005);
        }

        #[test]
        fn inv_gamma_mean() {
            let n = 100_000usize;
            let mut rng = test_rng(34);
            let mut sum = 0.0;
            for _ in 0..n {
                sum += sample_inv_gamma(3.0, 2.0, &mut rng).unwrap();
            }
            // Mean = rate / (shape - 1) = 1, sd of the estimator ~ 0.0032.
            assert!((sum / n as f64 - 1.0).abs() < 0.012);
        }

        #[test]
        fn truncated_normal_tail_means() {
            let n = 200_000usize;
            let mut rng = test_rng(35);
            let mean_a: f64 =
                (0..n).map(|_| sample_truncnorm_std_above(0.5, &mut rng)).sum::<f64>() / n as f64;
            assert!((mean_a - 1.141_077_770_368_064_6).abs() < 0.01, "{mean_a}");
            let mean_b: f64 =
                (0..n).map(|_| sample_truncnorm_std_above(-1.0, &mut rng)).sum::<f64>() / n as f64;
            assert!((mean_b - 0.287_599_970_939_178_4).abs() < 0.01, "{mean_b}");
            // Far tail exercises the exponential-rejection branch.
            let mean_c: f64 =
                (0..n).map(|_| sample_truncnorm_std_above(4.0, &mut rng)).sum::<f64>() / n as f64;
            assert!(mean_c > 4.0 && mean_c < 4.5, "{mean_c}");
            // N(1, 1) conditioned negative.
            let mean_d: f64 =
                (0..n).map(|_| sample_utility_negative(1.0, &mut rng)).sum::<f64>() / n as f64;
            assert!((mean_d - (-0.525_135_276_160_981_1)).abs() < 0.01, "{mean_d}");
        }
    }

    mod hyper {
        use super::*;

        #[test]
        fn defaults_are_valid() {
            let h = Hyperparameters::default_for(10);
            h.validate().unwrap();
            assert_eq!(h.n_genes(), 10);
            assert_eq!((h.gamma, h.nu), (0.5, 0.5));
            assert_eq!((h.max_cell_types, h.max_subgroups), (15, 15));
        }

        #[test]
        fn validation_rejects_bad_fields() {
            let mut h = Hyperparameters::default_for(3);
            h.gamma = 0.0;
            assert!(h.validate().is_err());

            let mut h = Hyperparameters::default_for(3);
            h.max_cell_types = 1;
            assert!(h.validate().is_err());

            let mut h = Hyperparameters::default_for(3);
            h.lambda1_prior.pop();
            assert!(h.validate().is_err());

            let mut h = Hyperparameters::default_for(3);
            h.sigma2_prior.rate = -1.0;
            assert!(h.validate().is_err());
        }
    }
}
