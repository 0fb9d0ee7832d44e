//! The two-level prior: closed-form moments of distributions drawn from it,
//! a truncated Monte-Carlo sampler to verify those moments, and the
//! truncation error bound that justifies the finite approximation the Gibbs
//! sampler fits.
//!
//! The prior nests two stick-breaking stages: a shared discrete base measure
//! `G0 ~ DP(alpha, H)` supplies the cell-type atoms, candidate cell-type
//! distributions arise by Dirichlet-tilting `G0`'s weights with concentration
//! `gamma`, and each subject picks a candidate through a second
//! stick-breaking process with concentration `nu`. Because `G0` is discrete,
//! a draw from `DP(gamma, G0)` restricted to `G0`'s support is exactly
//! Dirichlet-weighted, which keeps the Monte-Carlo sampler free of any
//! truncation error beyond `G0`'s own level and the subject-level cap.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{sample_categorical_log, sample_dirichlet, sample_gem};
use crate::rng::{stream, StreamKey};

/// RNG block id for prior Monte-Carlo replicates.
pub const BLOCK_PRIOR_MC: u64 = 90;

/// Specification of the hybrid prior plus the base-measure moments needed
/// for closed forms and for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPriorSpec {
    pub alpha: f64,
    pub gamma: f64,
    pub nu: f64,
    /// Mean vector of the base measure H (length D).
    pub base_mean: Vec<f64>,
    /// Variance vector of H.
    pub base_variance: Vec<f64>,
    /// Correlation matrix R_H of H (D x D, symmetric, unit diagonal).
    pub base_correlation: Array2<f64>,
    /// Cell-side truncation used by the Monte-Carlo sampler.
    pub k_trunc: usize,
    /// Subject-side truncation used by the Monte-Carlo sampler.
    pub l_trunc: usize,
}

impl HybridPriorSpec {
    /// D = 1, H = standard normal.
    pub fn univariate_standard_normal(
        alpha: f64,
        gamma: f64,
        nu: f64,
        k_trunc: usize,
        l_trunc: usize,
    ) -> Self {
        Self {
            alpha,
            gamma,
            nu,
            base_mean: vec![0.0],
            base_variance: vec![1.0],
            base_correlation: Array2::eye(1),
            k_trunc,
            l_trunc,
        }
    }

    pub fn dim(&self) -> usize {
        self.base_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        for &c in &[self.alpha, self.gamma, self.nu] {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "concentrations must be positive, got {c}"
                )));
            }
        }
        let d = self.dim();
        if d == 0 || self.base_variance.len() != d {
            return Err(Error::Config("base moment vectors must agree and be non-empty".into()));
        }
        if self.base_correlation.shape() != [d, d] {
            return Err(Error::Config("base correlation must be D x D".into()));
        }
        for &v in &self.base_variance {
            if !(v > 0.0) {
                return Err(Error::Config("base variances must be positive".into()));
            }
        }
        for i in 0..d {
            if (self.base_correlation[[i, i]] - 1.0).abs() > 1e-12 {
                return Err(Error::Config("base correlation diagonal must be 1".into()));
            }
            for j in 0..d {
                let diff =
                    (self.base_correlation[[i, j]] - self.base_correlation[[j, i]]).abs();
                if diff > 1e-12 {
                    return Err(Error::Config("base correlation must be symmetric".into()));
                }
            }
        }
        if self.k_trunc < 2 || self.l_trunc < 2 {
            return Err(Error::Config("Monte-Carlo truncations must be at least 2".into()));
        }
        Ok(())
    }
}

/// The closed-form prior moments for a set A with base mass `H(A) = h_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorMoments {
    /// `E[G_j(A)] = H(A)`.
    pub mean: f64,
    /// `V[G_j(A)]`.
    pub variance: f64,
    /// Correlation of `G_j(A)` and `G_j'(A)` across subjects; undefined when
    /// the variance is zero (`h_a` in {0, 1}).
    pub distribution_correlation: Option<f64>,
    /// Correlation of two atom draws from the same subject's distribution.
    pub within_subject_draw_correlation: f64,
    /// Correlation of atom draws from two different subjects.
    pub between_subject_draw_correlation: f64,
}

/// Evaluate the closed-form moments.
pub fn prior_moments(spec: &HybridPriorSpec, h_a: f64) -> Result<PriorMoments> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&h_a) {
        return Err(Error::Domain(format!("H(A) must lie in [0, 1], got {h_a}")));
    }
    let (a, g, n) = (spec.alpha, spec.gamma, spec.nu);
    let variance = (a + g + 1.0) * h_a * (1.0 - h_a) / ((a + 1.0) * (g + 1.0));
    let distribution_correlation = if variance > 0.0 {
        Some((n * g + a + g + n + 1.0) / ((1.0 + n) * (a + g + 1.0)))
    } else {
        None
    };
    Ok(PriorMoments {
        mean: h_a,
        variance,
        distribution_correlation,
        within_subject_draw_correlation: (a + g + 1.0) / ((a + 1.0) * (g + 1.0)),
        between_subject_draw_correlation: (n * g + a + g + n + 1.0)
            / ((n + 1.0) * (a + 1.0) * (g + 1.0)),
    })
}

/// For `D >= 2` the draw correlations scale the base correlation matrix
/// entrywise.
pub fn draw_correlation_matrix(spec: &HybridPriorSpec, between_subjects: bool) -> Result<Array2<f64>> {
    let m = prior_moments(spec, 0.5)?;
    let factor = if between_subjects {
        m.between_subject_draw_correlation
    } else {
        m.within_subject_draw_correlation
    };
    Ok(spec.base_correlation.mapv(|r| factor * r))
}

// ---------------------------------------------------------------------------
// Truncation bound
// ---------------------------------------------------------------------------

/// The total-variation bound on the error of truncating the prior at `K`
/// cell types and `L` subgroups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationBound {
    pub nu: f64,
    pub gamma: f64,
    pub k: usize,
    pub l: usize,
    pub subjects: usize,
    pub total_cells: usize,
    /// `{1 - (nu/(nu+1))^(L-1)}^m`.
    pub subject_factor: f64,
    /// `{1 - (gamma/(gamma+1))^(K-1)}^(total cells)`.
    pub cell_factor: f64,
    /// `1 - subject_factor * cell_factor`, clamped to [0, 1].
    pub bound: f64,
}

/// Evaluate the truncation bound; computed through `ln_1p`/`exp_m1` so the
/// tiny values at realistic truncation levels keep full precision.
pub fn truncation_bound(
    nu: f64,
    gamma: f64,
    k: usize,
    l: usize,
    subjects: usize,
    total_cells: usize,
) -> Result<TruncationBound> {
    for (name, v) in [("nu", nu), ("gamma", gamma)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    if k < 2 || l < 2 {
        return Err(Error::Domain(format!(
            "truncation levels must be at least 2, got K={k}, L={l}"
        )));
    }
    if subjects < 1 || total_cells < 1 {
        return Err(Error::Domain(
            "subject and cell counts must be at least 1".into(),
        ));
    }
    let subject_tail = ((l - 1) as f64 * (nu / (nu + 1.0)).ln()).exp();
    let cell_tail = ((k - 1) as f64 * (gamma / (gamma + 1.0)).ln()).exp();
    let log_subject_factor = subjects as f64 * (-subject_tail).ln_1p();
    let log_cell_factor = total_cells as f64 * (-cell_tail).ln_1p();
    let bound = (-(log_subject_factor + log_cell_factor).exp_m1()).clamp(0.0, 1.0);
    Ok(TruncationBound {
        nu,
        gamma,
        k,
        l,
        subjects,
        total_cells,
        subject_factor: log_subject_factor.exp(),
        cell_factor: log_cell_factor.exp(),
        bound,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo sampler
// ---------------------------------------------------------------------------

/// One draw of the truncated prior structure plus per-subject atom draws.
#[derive(Debug, Clone)]
pub struct HybridPriorDraw {
    /// Atom coordinates, (4 * k_trunc) x D.
    pub atoms: Array2<f64>,
    /// Candidate distributions as rows of weights over the atoms.
    pub candidate_weights: Array2<f64>,
    /// Stick-breaking weights over candidates.
    pub subgroup_weights: Vec<f64>,
    /// Candidate index chosen by each subject.
    pub subject_candidate: Vec<usize>,
    /// Per subject, the atom index of each draw.
    pub draw_indices: Vec<Vec<usize>>,
}

impl HybridPriorDraw {
    /// `G_j(A)` for `A = (-inf, threshold]` on coordinate `coord`, computed
    /// exactly from the candidate weights.
    pub fn measure_below(&self, subject: usize, coord: usize, threshold: f64) -> f64 {
        let cand = self.subject_candidate[subject];
        let mut total = 0.0;
        for k in 0..self.atoms.nrows() {
            if self.atoms[[k, coord]] <= threshold {
                total += self.candidate_weights[[cand, k]];
            }
        }
        total
    }

    /// Coordinate `coord` of draw `i` from subject `subject`.
    pub fn draw_value(&self, subject: usize, i: usize, coord: usize) -> f64 {
        self.atoms[[self.draw_indices[subject][i], coord]]
    }
}

fn cholesky_lower(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut sum = cov[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numerical(
                        "base covariance is not positive definite".into(),
                    ));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Sample the truncated prior and draw `n_per_subject` atoms for each of `m`
/// subjects.
///
/// Preconditions: the truncation bound at `(k_trunc, l_trunc, m,
/// m * n_per_subject)` must be below 1e-3, so the Monte-Carlo truncation
/// error is negligible next to the quantities under test. The shared base
/// measure uses its own deeper level `4 * k_trunc`.
pub fn sample_hybrid_prior<R: Rng>(
    spec: &HybridPriorSpec,
    m: usize,
    n_per_subject: usize,
    rng: &mut R,
) -> Result<HybridPriorDraw> {
    spec.validate()?;
    if m < 1 || n_per_subject < 1 {
        return Err(Error::Config("need at least one subject and one draw".into()));
    }
    let b = truncation_bound(
        spec.nu,
        spec.gamma,
        spec.k_trunc,
        spec.l_trunc,
        m,
        m * n_per_subject,
    )?;
    if b.bound >= 1e-3 {
        return Err(Error::Config(format!(
            "Monte-Carlo truncations (K={}, L={}) give bound {:.3e} >= 1e-3; raise them",
            spec.k_trunc, spec.l_trunc, b.bound
        )));
    }

    let d = spec.dim();
    let k0 = 4 * spec.k_trunc;

    // Atoms from H.
    let cov = {
        let mut c = spec.base_correlation.clone();
        for i in 0..d {
            for j in 0..d {
                c[[i, j]] *= (spec.base_variance[i] * spec.base_variance[j]).sqrt();
            }
        }
        c
    };
    let chol = cholesky_lower(&cov)?;
    let mut atoms = Array2::<f64>::zeros((k0, d));
    for k in 0..k0 {
        let z: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for i in 0..d {
            let mut v = spec.base_mean[i];
            for j in 0..=i {
                v += chol[[i, j]] * z[j];
            }
            atoms[[k, i]] = v;
        }
    }

    // G0 weights, then exact Dirichlet tilting for each candidate.
    let g0 = sample_gem(spec.alpha, k0, rng)?;
    let dir_shapes: Vec<f64> = g0
        .weights
        .iter()
        .map(|w| (spec.gamma * w).max(crate::model::MIN_DIRICHLET_SHAPE))
        .collect();
    let mut candidate_weights = Array2::<f64>::zeros((spec.l_trunc, k0));
    for l in 0..spec.l_trunc {
        let row = sample_dirichlet(&dir_shapes, rng)?;
        for k in 0..k0 {
            candidate_weights[[l, k]] = row[k];
        }
    }

    let phi = sample_gem(spec.nu, spec.l_trunc, rng)?;
    let log_phi: Vec<f64> = phi.weights.iter().map(|w| w.ln()).collect();
    let mut subject_candidate = Vec::with_capacity(m);
    let mut draw_indices = Vec::with_capacity(m);
    for _ in 0..m {
        let cand = sample_categorical_log(&log_phi, rng)?;
        subject_candidate.push(cand);
        let log_w: Vec<f64> = (0..k0).map(|k| candidate_weights[[cand, k]].ln()).collect();
        let mut draws = Vec::with_capacity(n_per_subject);
        for _ in 0..n_per_subject {
            draws.push(sample_categorical_log(&log_w, rng)?);
        }
        draw_indices.push(draws);
    }

    Ok(HybridPriorDraw {
        atoms,
        candidate_weights,
        subgroup_weights: phi.weights,
        subject_candidate,
        draw_indices,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo verification of the closed forms
// ---------------------------------------------------------------------------

/// An estimate with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.value - target).abs() <= n_se * self.se
    }
}

/// Monte-Carlo estimates of all five closed-form quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimates {
    pub mean: Estimate,
    pub variance: Estimate,
    pub distribution_correlation: Estimate,
    pub within_subject_draw_correlation: Estimate,
    pub between_subject_draw_correlation: Estimate,
}

fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Estimate the five prior moments for `A = (-inf, threshold]` under a
/// univariate spec, by independent replicates split into batches; each
/// statistic's standard error comes from the batch spread.
///
/// Replicates run in parallel, each on its own counter-keyed stream, so the
/// result depends only on `seed`.
pub fn monte_carlo_moments(
    spec: &HybridPriorSpec,
    threshold: f64,
    replicates: usize,
    batches: usize,
    seed: u64,
) -> Result<MomentEstimates> {
    if spec.dim() != 1 {
        return Err(Error::Config("moment verification expects a univariate spec".into()));
    }
    if batches < 2 || replicates < 2 * batches {
        return Err(Error::Config("need at least two batches and a few replicates per batch".into()));
    }

    // (G1(A), G2(A), x = draw 1 of subj 1, x' = draw 2 of subj 1, y = draw 1 of subj 2)
    let rows: Vec<[f64; 5]> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, StreamKey::new(r as u64, BLOCK_PRIOR_MC, 0));
            let draw = sample_hybrid_prior(spec, 2, 2, &mut rng)?;
            Ok([
                draw.measure_below(0, 0, threshold),
                draw.measure_below(1, 0, threshold),
                draw.draw_value(0, 0, 0),
                draw.draw_value(0, 1, 0),
                draw.draw_value(1, 0, 0),
            ])
        })
        .collect::<Result<_>>()?;

    let per_batch = replicates / batches;
    let mut stats: [Vec<f64>; 5] = Default::default();
    for b in 0..batches {
        let chunk = &rows[b * per_batch..(b + 1) * per_batch];
        let u1: Vec<f64> = chunk.iter().map(|r| r[0]).collect();
        let u2: Vec<f64> = chunk.iter().map(|r| r[1]).collect();
        let x: Vec<f64> = chunk.iter().map(|r| r[2]).collect();
        let xp: Vec<f64> = chunk.iter().map(|r| r[3]).collect();
        let y: Vec<f64> = chunk.iter().map(|r| r[4]).collect();
        let n = per_batch as f64;
        let mean = u1.iter().sum::<f64>() / n;
        let var = u1.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        stats[0].push(mean);
        stats[1].push(var);
        stats[2].push(correlation(&u1, &u2));
        stats[3].push(correlation(&x, &xp));
        stats[4].push(correlation(&x, &y));
    }

    let summarize = |vals: &Vec<f64>| {
        let kept: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let nb = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / nb;
        let var = kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nb - 1.0);
        Estimate {
            value: mean,
            se: (var / nb).sqrt(),
        }
    };

    Ok(MomentEstimates {
        mean: summarize(&stats[0]),
        variance: summarize(&stats[1]),
        distribution_correlation: summarize(&stats[2]),
        within_subject_draw_correlation: summarize(&stats[3]),
        between_subject_draw_correlation: summarize(&stats[4]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_forms_at_unit_concentrations() {
        let spec = HybridPriorSpec::univariate_standard_normal(1.0, 1.0, 1.0, 4, 4);
        let m = prior_moments(&spec, 0.5).unwrap();
        assert_relative_eq!(m.mean, 0.5);
        assert_relative_eq!(m.variance, 0.1875, max_relative = 1e-15);
        assert_relative_eq!(m.distribution_correlation.unwrap(), 5.0 / 6.0, max_relative = 1e-15);
        assert_relative_eq!(m.within_subject_draw_correlation, 0.75, max_relative = 1e-15);
        assert_relative_eq!(m.between_subject_draw_correlation, 0.625, max_relative = 1e-15);
    }

    #[test]
    fn endpoint_mass_has_zero_variance() {
        let spec = HybridPriorSpec::univariate_standard_normal(2.0, 0.7, 1.3, 4, 4);
        for h in [0.0, 1.0] {
            let m = prior_moments(&spec, h).unwrap();
            assert_eq!(m.variance, 0.0);
            assert!(m.distribution_correlation.is_none());
        }
        assert!(prior_moments(&spec, -0.1).is_err());
        assert!(prior_moments(&spec, 1.1).is_err());
    }

    #[test]
    fn large_alpha_limits() {
        // As alpha grows the prior degenerates to its purely nested form.
        let nu = 0.7;
        let gamma = 0.4;
        let spec = HybridPriorSpec::univariate_standard_normal(1e12, gamma, nu, 4, 4);
        let m = prior_moments(&spec, 0.3).unwrap();
        assert_relative_eq!(
            m.between_subject_draw_correlation,
            1.0 / ((nu + 1.0) * (gamma + 1.0)),
            max_relative = 1e-9
        );
        assert_relative_eq!(
            m.variance,
            0.3 * 0.7 / (gamma + 1.0),
            max_relative = 1e-9
        );
        let spec = HybridPriorSpec::univariate_standard_normal(0.9, 1e12, nu, 4, 4);
        let m = prior_moments(&spec, 0.3).unwrap();
        assert_relative_eq!(m.variance, 0.3 * 0.7 / 1.9, max_relative = 1e-9);
    }

    #[test]
    fn draw_correlation_matrix_scales_base() {
        let mut spec = HybridPriorSpec::univariate_standard_normal(1.0, 1.0, 1.0, 4, 4);
        spec.base_mean = vec![0.0, 1.0];
        spec.base_variance = vec![1.0, 4.0];
        spec.base_correlation =
            Array2::from_shape_vec((2, 2), vec![1.0, 0.3, 0.3, 1.0]).unwrap();
        let within = draw_correlation_matrix(&spec, false).unwrap();
        assert_relative_eq!(within[[0, 0]], 0.75);
        assert_relative_eq!(within[[0, 1]], 0.75 * 0.3);
        let between = draw_correlation_matrix(&spec, true).unwrap();
        assert_relative_eq!(between[[1, 1]], 0.625);
    }

    mod bound {
        use super::*;

        #[test]
        fn hand_derived_case() {
            let b = truncation_bound(0.5, 0.5, 2, 2, 1, 1).unwrap();
            assert_relative_eq!(b.bound, 5.0 / 9.0, max_relative = 1e-15);
            assert_relative_eq!(b.subject_factor, 2.0 / 3.0, max_relative = 1e-15);
            assert_relative_eq!(b.cell_factor, 2.0 / 3.0, max_relative = 1e-15);
        }

        #[test]
        fn vanishes_at_deep_truncation() {
            let b = truncation_bound(0.5, 0.5, 200, 200, 10, 10_000).unwrap();
            assert!(b.bound < 1e-40, "{}", b.bound);
        }

        #[test]
        fn realistic_levels() {
            let b = truncation_bound(0.5, 0.5, 15, 15, 14, 1028).unwrap();
            assert!((b.bound - 2.18e-4).abs() < 1e-6, "{}", b.bound);
        }

        #[test]
        fn rejects_bad_arguments() {
            assert!(truncation_bound(0.0, 0.5, 2, 2, 1, 1).is_err());
            assert!(truncation_bound(0.5, 0.5, 1, 2, 1, 1).is_err());
            assert!(truncation_bound(0.5, 0.5, 2, 2, 0, 1).is_err());
        }

        #[test]
        fn monotone_in_each_argument() {
            let base = truncation_bound(0.8, 0.6, 8, 8, 5, 50).unwrap().bound;
            assert!(truncation_bound(0.8, 0.6, 12, 8, 5, 50).unwrap().bound <= base);
            assert!(truncation_bound(0.8, 0.6, 8, 12, 5, 50).unwrap().bound <= base);
            assert!(truncation_bound(0.8, 0.6, 8, 8, 9, 50).unwrap().bound >= base);
            assert!(truncation_bound(0.8, 0.6, 8, 8, 5, 90).unwrap().bound >= base);
        }
    }

    mod sampler {
        use super::*;

        #[test]
        fn reproducible_given_stream() {
            let spec = HybridPriorSpec::univariate_standard_normal(1.0, 0.8, 0.6, 15, 15);
            let mut r1 = stream(1, StreamKey::new(0, BLOCK_PRIOR_MC, 7));
            let mut r2 = stream(1, StreamKey::new(0, BLOCK_PRIOR_MC, 7));
            let a = sample_hybrid_prior(&spec, 3, 4, &mut r1).unwrap();
            let b = sample_hybrid_prior(&spec, 3, 4, &mut r2).unwrap();
            assert_eq!(a.subject_candidate, b.subject_candidate);
            assert_eq!(a.draw_indices, b.draw_indices);
            assert_eq!(a.atoms, b.atoms);
        }

        #[test]
        fn shallow_truncation_is_a_configuration_error() {
            let spec = HybridPriorSpec::univariate_standard_normal(1.0, 3.0, 3.0, 2, 2);
            let mut rng = stream(1, StreamKey::new(0, BLOCK_PRIOR_MC, 0));
            assert!(matches!(
                sample_hybrid_prior(&spec, 5, 5, &mut rng),
                Err(Error::Config(_))
            ));
        }

        #[test]
        fn tiny_nu_shares_one_candidate() {
            let spec = HybridPriorSpec::univariate_standard_normal(1.0, 0.5, 1e-6, 15, 15);
            let mut shared = 0;
            let total = 200;
            for r in 0..total {
                let mut rng = stream(42, StreamKey::new(r, BLOCK_PRIOR_MC, 1));
                let draw = sample_hybrid_prior(&spec, 5, 1, &mut rng).unwrap();
                if draw.subject_candidate.iter().all(|&c| c == draw.subject_candidate[0]) {
                    shared += 1;
                }
            }
            assert!(shared as f64 / total as f64 >= 0.99, "{shared}/{total}");
        }

        #[test]
        fn monte_carlo_matches_closed_forms() {
            let spec = HybridPriorSpec::univariate_standard_normal(1.5, 0.8, 0.6, 15, 15);
            let truth = prior_moments(&spec, 0.5).unwrap();
            let est = monte_carlo_moments(&spec, 0.0, 10_000, 100, 2024).unwrap();
            assert!(est.mean.within(truth.mean, 3.0), "mean {:?}", est.mean);
            assert!(est.variance.within(truth.variance, 3.0), "var {:?}", est.variance);
            assert!(
                est.distribution_correlation
                    .within(truth.distribution_correlation.unwrap(), 3.0),
                "distn corr {:?} vs {:?}",
                est.distribution_correlation,
                truth.distribution_correlation
            );
            assert!(
                est.within_subject_draw_correlation
                    .within(truth.within_subject_draw_correlation, 3.0),
                "within {:?} vs {}",
                est.within_subject_draw_correlation,
                truth.within_subject_draw_correlation
            );
            assert!(
                est.between_subject_draw_correlation
                    .within(truth.between_subject_draw_correlation, 3.0),
                "between {:?} vs {}",
                est.between_subject_draw_correlation,
                truth.between_subject_draw_correlation
            );
        }
    }
}
