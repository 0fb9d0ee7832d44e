//! Blocked Gibbs sampler for the truncated two-level model, with
//! Metropolis-within-Gibbs steps for the non-conjugate blocks.
//!
//! One sweep updates, in fixed order: the auxiliary variables (latent log
//! rates, latent counts, dropout flags), the cell and subject labels, the
//! mixture weights, the shared stick weights and their concentration, the
//! effect matrices, the variances and effect hyper-parameters, and the
//! per-gene dropout parameters. Burn-in is the first half of the
//! iterations; every `thin`-th state of the second half is snapshotted.
//!
//! Reproducibility: every coordinate update draws from a stream keyed by
//! `(seed, iteration, block, unit)` ([`crate::rng::stream`]), coordinate
//! loops write only their own slots, and cross-thread reductions are
//! integer-only, so a fixed seed gives bit-identical traces at any thread
//! count. The same property makes checkpoint resume exact.

use ndarray::Array2;
use rand::Rng;

use crate::data::CountData;
use crate::error::{Error, Result};
use crate::model::{
    normal_cdf, sample_categorical_log, sample_dirichlet, sample_gamma, sample_gem,
    sample_inv_gamma, sample_normal, Hyperparameters, StickWeights, GEM_CLAMP,
};
use crate::rng::{stream, StreamKey};

mod blocks;
mod checkpoint;
pub mod geweke;
mod logpost;

pub use blocks::{cell_label_log_weights, subject_label_log_weights, UpdateBlock};
pub use checkpoint::{read_chain, write_chain, CHECKPOINT_VERSION};
pub use logpost::{complete_log_likelihood, complete_log_posterior};

// RNG block ids (stable across releases; checkpoints depend on them).
pub(crate) const BLOCK_INIT: u64 = 0;
pub(crate) const BLOCK_THETA: u64 = 1;
pub(crate) const BLOCK_LATENT: u64 = 2;
pub(crate) const BLOCK_CELL_LABELS: u64 = 3;
pub(crate) const BLOCK_SUBJECT_LABELS: u64 = 4;
pub(crate) const BLOCK_PI: u64 = 5;
pub(crate) const BLOCK_PHI: u64 = 6;
pub(crate) const BLOCK_XI: u64 = 7;
pub(crate) const BLOCK_ALPHA: u64 = 8;
pub(crate) const BLOCK_MU: u64 = 9;
pub(crate) const BLOCK_BETA: u64 = 10;
pub(crate) const BLOCK_SIGMA2: u64 = 11;
pub(crate) const BLOCK_HYPER_EFFECTS: u64 = 12;
pub(crate) const BLOCK_LAMBDA: u64 = 13;

/// One full state of the Markov chain, including the augmentation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Shared stick weights over cell types (length K).
    pub xi: StickWeights,
    /// Concentration of the shared sticks.
    pub alpha: f64,
    /// Stick weights over subgroups (length L).
    pub phi: StickWeights,
    /// Subgroup-specific cell-type proportions, L x K (row = subgroup).
    pub pi: Array2<f64>,
    /// Subgroup label of each subject (0-based).
    pub s_labels: Vec<usize>,
    /// Cell-type label of every cell, per subject (0-based).
    pub c_labels: Vec<Vec<usize>>,
    /// Cell-type effects, D x K.
    pub mu: Array2<f64>,
    /// Subgroup effects, D x L; column 0 is pinned at zero.
    pub beta: Array2<f64>,
    /// Per-gene variances of the latent log rates.
    pub sigma2: Vec<f64>,
    /// Per-gene dropout intercepts.
    pub lambda0: Vec<f64>,
    /// Per-gene dropout slopes, all negative.
    pub lambda1: Vec<f64>,
    pub eta_mu: f64,
    pub tau2_mu: f64,
    pub eta_beta: f64,
    pub tau2_beta: f64,
    /// Latent log rates, per subject D x n_j.
    pub theta: Vec<Array2<f64>>,
    /// Latent true counts; equal to the data wherever the data is positive.
    pub latent_counts: Vec<Array2<u32>>,
    /// Dropout flags; can be true only where the observed count is zero.
    pub dropped: Vec<Array2<bool>>,
}

impl ChainState {
    pub fn n_genes(&self) -> usize {
        self.mu.nrows()
    }

    pub fn max_cell_types(&self) -> usize {
        self.mu.ncols()
    }

    pub fn max_subgroups(&self) -> usize {
        self.beta.ncols()
    }

    /// Verify every structural invariant against the data.
    pub fn check_invariants(&self, data: &CountData) -> Result<()> {
        let k = self.max_cell_types();
        let l = self.max_subgroups();
        let simplex = |w: &[f64], what: &str| -> Result<()> {
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || w.iter().any(|&x| x < 0.0) {
                return Err(Error::Numerical(format!("{what} is off the simplex (sum {sum})")));
            }
            Ok(())
        };
        simplex(&self.xi.weights, "xi")?;
        simplex(&self.phi.weights, "phi")?;
        for row in 0..l {
            let r: Vec<f64> = (0..k).map(|c| self.pi[[row, c]]).collect();
            simplex(&r, &format!("pi row {row}"))?;
        }
        for g in 0..self.n_genes() {
            if self.beta[[g, 0]] != 0.0 {
                return Err(Error::Numerical(format!("beta[{g}, 0] = {}", self.beta[[g, 0]])));
            }
            if !(self.lambda1[g] < 0.0) {
                return Err(Error::Numerical(format!("lambda1[{g}] = {}", self.lambda1[g])));
            }
            if !(self.sigma2[g] > 0.0) {
                return Err(Error::Numerical(format!("sigma2[{g}] = {}", self.sigma2[g])));
            }
        }
        for (j, s) in data.subjects.iter().enumerate() {
            if self.s_labels[j] >= l {
                return Err(Error::Numerical(format!("subject {j} label out of range")));
            }
            for i in 0..s.n_cells() {
                if self.c_labels[j][i] >= k {
                    return Err(Error::Numerical(format!("cell ({j}, {i}) label out of range")));
                }
                for g in 0..self.n_genes() {
                    let x = s.counts[[g, i]];
                    if x > 0 {
                        if self.latent_counts[j][[g, i]] != x {
                            return Err(Error::Numerical(format!(
                                "latent count differs from observed positive at ({j}, {g}, {i})"
                            )));
                        }
                        if self.dropped[j][[g, i]] {
                            return Err(Error::Numerical(format!(
                                "dropout flag set on a positive observation at ({j}, {g}, {i})"
                            )));
                        }
                    } else if !self.dropped[j][[g, i]] && self.latent_counts[j][[g, i]] != 0 {
                        return Err(Error::Numerical(format!(
                            "kept zero with a positive latent count at ({j}, {g}, {i})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n_iter: u64,
    pub thin: u64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter < 2 {
            return Err(Error::Config(format!("need at least 2 iterations, got {}", self.n_iter)));
        }
        if self.thin < 1 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }

    /// Burn-in is the first half (rounded up for odd totals).
    pub fn burn_in(&self) -> u64 {
        self.n_iter - self.n_iter / 2
    }
}

/// Proposal/acceptance tallies of one Metropolis block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AcceptanceCounter {
    pub proposals: u64,
    pub accepted: u64,
}

impl AcceptanceCounter {
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Tallies of every Metropolis block in the sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockCounters {
    pub theta: AcceptanceCounter,
    pub xi: AcceptanceCounter,
    pub lambda_fallback: AcceptanceCounter,
    /// Genes whose dropout parameters kept their previous value after the
    /// truncation rejection and the fallback both failed.
    pub lambda_flagged: u64,
}

/// Random-walk scales, adapted during burn-in and frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    /// Per-coordinate log proposal scales for the latent log rates.
    pub theta_log_scale: Vec<Array2<f64>>,
    /// Per-stick log proposal scales for the shared weights (logit space).
    pub xi_log_scale: Vec<f64>,
    pub enabled: bool,
}

pub(crate) const TARGET_ACCEPT: f64 = 0.38;

impl Adaptation {
    pub fn new(data: &CountData, k: usize) -> Self {
        let theta_log_scale = data
            .subjects
            .iter()
            .map(|s| Array2::from_elem((data.n_genes(), s.n_cells()), (0.5_f64).ln()))
            .collect();
        Self {
            theta_log_scale,
            xi_log_scale: vec![(0.8_f64).ln(); k.saturating_sub(1)],
            enabled: true,
        }
    }

    /// Diminishing Robbins-Monro gain.
    pub fn gain(iteration: u64) -> f64 {
        (iteration as f64 + 1.0).powf(-0.6)
    }
}

/// Parameter part of a retained state (the augmentation layer is dropped to
/// bound memory; the complete-data log posterior is recorded in its place).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: u64,
    pub log_posterior: f64,
    pub xi: StickWeights,
    pub alpha: f64,
    pub phi: StickWeights,
    pub pi: Array2<f64>,
    pub s_labels: Vec<usize>,
    pub c_labels: Vec<Vec<usize>>,
    pub mu: Array2<f64>,
    pub beta: Array2<f64>,
    pub sigma2: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub eta_mu: f64,
    pub tau2_mu: f64,
    pub eta_beta: f64,
    pub tau2_beta: f64,
}

impl Snapshot {
    fn of(state: &ChainState, iteration: u64, log_posterior: f64) -> Self {
        Self {
            iteration,
            log_posterior,
            xi: state.xi.clone(),
            alpha: state.alpha,
            phi: state.phi.clone(),
            pi: state.pi.clone(),
            s_labels: state.s_labels.clone(),
            c_labels: state.c_labels.clone(),
            mu: state.mu.clone(),
            beta: state.beta.clone(),
            sigma2: state.sigma2.clone(),
            lambda0: state.lambda0.clone(),
            lambda1: state.lambda1.clone(),
            eta_mu: state.eta_mu,
            tau2_mu: state.tau2_mu,
            eta_beta: state.eta_beta,
            tau2_beta: state.tau2_beta,
        }
    }
}

/// Thinned post-burn-in snapshots plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub snapshots: Vec<Snapshot>,
    pub iteration_count: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    pub acceptance: BlockCounters,
    pub gene_ids: Vec<String>,
    pub subject_ids: Vec<String>,
    pub cells_per_subject: Vec<usize>,
}

impl ChainTrace {
    pub fn max_cell_types(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.mu.ncols())
    }

    pub fn max_subgroups(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.beta.ncols())
    }
}

pub(crate) struct BlockCtx<'a> {
    pub data: &'a CountData,
    pub hyper: &'a Hyperparameters,
    pub seed: u64,
    pub iteration: u64,
}

/// A resumable sampler run: state, adaptation, tallies, and the snapshots
/// collected so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub(crate) data: CountData,
    pub(crate) hyper: Hyperparameters,
    pub(crate) config: SamplerConfig,
    pub(crate) state: ChainState,
    pub(crate) adapt: Adaptation,
    pub(crate) counters: BlockCounters,
    pub(crate) completed: u64,
    pub(crate) snapshots: Vec<Snapshot>,
}

impl Chain {
    pub fn new(data: &CountData, hyper: &Hyperparameters, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        hyper.validate()?;
        validate_fit_inputs(data, hyper)?;
        let state = init_chain(data, hyper, config.seed)?;
        let adapt = Adaptation::new(data, hyper.max_cell_types);
        Ok(Self {
            data: data.clone(),
            hyper: hyper.clone(),
            config,
            state,
            adapt,
            counters: BlockCounters::default(),
            completed: 0,
        snapshots: Vec::new(),
        })
    }

    pub fn completed_iterations(&self) -> u64 {
        self.completed
    }

    pub fn config(&self) -> SamplerConfig {
        self.config
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn data(&self) -> &CountData {
        &self.data
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn acceptance(&self) -> BlockCounters {
        self.counters
    }

    /// Advance at most `iters` further iterations (clamped to the configured
    /// total).
    pub fn advance(&mut self, iters: u64) -> Result<()> {
        let target = self.completed.saturating_add(iters).min(self.config.n_iter);
        let burn = self.config.burn_in();
        while self.completed < target {
            let t = self.completed + 1;
            self.adapt.enabled = t <= burn;
            let ctx = BlockCtx {
                data: &self.data,
                hyper: &self.hyper,
                seed: self.config.seed,
                iteration: t,
            };
            blocks::sweep(&mut self.state, &ctx, &mut self.adapt, &mut self.counters)?;
            self.completed = t;
            if t > burn && (t - burn) % self.config.thin == 0 {
                let lp = complete_log_posterior(&self.state, &self.data, &self.hyper);
                self.snapshots.push(Snapshot::of(&self.state, t, lp));
            }
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.advance(self.config.n_iter - self.completed)
    }

    pub fn is_finished(&self) -> bool {
        self.completed == self.config.n_iter
    }

    pub fn finish(self) -> Result<ChainTrace> {
        if !self.is_finished() {
            return Err(Error::Config(format!(
                "chain has {} of {} iterations",
                self.completed, self.config.n_iter
            )));
        }
        Ok(ChainTrace {
            snapshots: self.snapshots,
            iteration_count: self.config.n_iter,
            burn_in: self.config.burn_in(),
            thin: self.config.thin,
            seed: self.config.seed,
            acceptance: self.counters,
            gene_ids: self.data.gene_ids.clone(),
            subject_ids: self.data.subjects.iter().map(|s| s.subject_id.clone()).collect(),
            cells_per_subject: self.data.cells_per_subject(),
        })
    }
}

/// Run a full chain: init from the priors, sweep the blocks, keep every
/// `thin`-th state of the second half.
pub fn run_chain(
    data: &CountData,
    hyper: &Hyperparameters,
    config: SamplerConfig,
) -> Result<ChainTrace> {
    let mut chain = Chain::new(data, hyper, config)?;
    chain.run_to_end()?;
    chain.finish()
}

fn validate_fit_inputs(data: &CountData, hyper: &Hyperparameters) -> Result<()> {
    if hyper.n_genes() != data.n_genes() {
        return Err(Error::Config(format!(
            "hyperparameters cover {} genes but the data has {}",
            hyper.n_genes(),
            data.n_genes()
        )));
    }
    for s in &data.subjects {
        for (i, &sf) in s.scaling_factors.iter().enumerate() {
            if !(sf > 0.0 && sf.is_finite()) {
                return Err(Error::Validation(format!(
                    "subject {} cell {i} has scaling factor {sf}; run QC first",
                    s.subject_id
                )));
            }
        }
    }
    Ok(())
}

/// Draw a fresh state: every stochastic component from its prior, labels
/// from their prior weights, latent log rates at `ln((x + 0.5) / s)`, latent
/// counts equal to the data where positive, and dropout flags at zero
/// entries from their prior probability.
pub fn init_chain(data: &CountData, hyper: &Hyperparameters, seed: u64) -> Result<ChainState> {
    hyper.validate()?;
    validate_fit_inputs(data, hyper)?;
    let d = data.n_genes();
    let k = hyper.max_cell_types;
    let l = hyper.max_subgroups;
    let key = |unit: u64| stream(seed, StreamKey::new(0, BLOCK_INIT, unit));

    let mut rng = key(0);
    let alpha = sample_gamma(hyper.alpha_prior.shape, hyper.alpha_prior.rate, &mut rng)?;
    let xi = sample_gem(alpha, k, &mut rng)?;

    let mut rng = key(1);
    let dir_shapes: Vec<f64> = xi
        .weights
        .iter()
        .map(|w| (hyper.gamma * w).max(crate::model::MIN_DIRICHLET_SHAPE))
        .collect();
    let mut pi = Array2::<f64>::zeros((l, k));
    for row in 0..l {
        let w = sample_dirichlet(&dir_shapes, &mut rng)?;
        for c in 0..k {
            pi[[row, c]] = w[c];
        }
    }

    let mut rng = key(2);
    let phi = sample_gem(hyper.nu, l, &mut rng)?;
    let log_phi: Vec<f64> = phi.weights.iter().map(|w| w.ln()).collect();
    let s_labels: Vec<usize> = (0..data.n_subjects())
        .map(|_| sample_categorical_log(&log_phi, &mut rng))
        .collect::<Result<_>>()?;

    let mut rng = key(3);
    let mut c_labels = Vec::with_capacity(data.n_subjects());
    for (j, s) in data.subjects.iter().enumerate() {
        let row = s_labels[j];
        let log_pi: Vec<f64> = (0..k).map(|c| pi[[row, c]].ln()).collect();
        let labels: Vec<usize> = (0..s.n_cells())
            .map(|_| sample_categorical_log(&log_pi, &mut rng))
            .collect::<Result<_>>()?;
        c_labels.push(labels);
    }

    let mut rng = key(4);
    let eta_mu = sample_normal(hyper.mu_hyper.location, hyper.mu_hyper.location_variance, &mut rng);
    let tau2_mu =
        sample_inv_gamma(hyper.mu_hyper.variance_shape, hyper.mu_hyper.variance_rate, &mut rng)?;
    let eta_beta =
        sample_normal(hyper.beta_hyper.location, hyper.beta_hyper.location_variance, &mut rng);
    let tau2_beta =
        sample_inv_gamma(hyper.beta_hyper.variance_shape, hyper.beta_hyper.variance_rate, &mut rng)?;

    let mut rng = key(5);
    let mut mu = Array2::<f64>::zeros((d, k));
    for g in 0..d {
        for c in 0..k {
            mu[[g, c]] = sample_normal(eta_mu, tau2_mu, &mut rng);
        }
    }

    let mut rng = key(6);
    let mut beta = Array2::<f64>::zeros((d, l));
    for g in 0..d {
        for c in 1..l {
            beta[[g, c]] = sample_normal(eta_beta, tau2_beta, &mut rng);
        }
    }

    let mut rng = key(7);
    let sigma2: Vec<f64> = (0..d)
        .map(|_| sample_inv_gamma(hyper.sigma2_prior.shape, hyper.sigma2_prior.rate, &mut rng))
        .collect::<Result<_>>()?;

    let mut rng = key(8);
    let mut lambda0 = Vec::with_capacity(d);
    let mut lambda1 = Vec::with_capacity(d);
    for g in 0..d {
        lambda0.push(sample_normal(
            hyper.lambda0_prior[g].mean,
            hyper.lambda0_prior[g].variance,
            &mut rng,
        ));
        lambda1.push(sample_negative_normal(
            hyper.lambda1_prior[g].mean,
            hyper.lambda1_prior[g].variance,
            &mut rng,
        )?);
    }

    let mut theta = Vec::with_capacity(data.n_subjects());
    let mut latent_counts = Vec::with_capacity(data.n_subjects());
    let mut dropped = Vec::with_capacity(data.n_subjects());
    for (j, s) in data.subjects.iter().enumerate() {
        let n = s.n_cells();
        let mut th = Array2::<f64>::zeros((d, n));
        let mut y = Array2::<u32>::zeros((d, n));
        let mut z = Array2::<bool>::from_elem((d, n), false);
        let mut rng = key(100 + j as u64);
        for g in 0..d {
            for i in 0..n {
                let x = s.counts[[g, i]];
                th[[g, i]] = ((x as f64 + 0.5) / s.scaling_factors[i]).ln();
                if x > 0 {
                    y[[g, i]] = x;
                } else {
                    z[[g, i]] = rng.random::<f64>() < normal_cdf(lambda0[g]);
                }
            }
        }
        theta.push(th);
        latent_counts.push(y);
        dropped.push(z);
    }

    Ok(ChainState {
        xi,
        alpha,
        phi,
        pi,
        s_labels,
        c_labels,
        mu,
        beta,
        sigma2,
        lambda0,
        lambda1,
        eta_mu,
        tau2_mu,
        eta_beta,
        tau2_beta,
        theta,
        latent_counts,
        dropped,
    })
}

/// Truncated-negative normal draw by rejection; errors loudly if the prior
/// puts essentially no mass below zero.
pub(crate) fn sample_negative_normal<R: rand::Rng>(
    mean: f64,
    variance: f64,
    rng: &mut R,
) -> Result<f64> {
    for _ in 0..10_000 {
        let v = sample_normal(mean, variance, rng);
        if v < 0.0 {
            return Ok(v);
        }
    }
    Err(Error::Config(format!(
        "normal({mean}, {variance}) truncated to negatives is numerically empty"
    )))
}

pub(crate) fn clamp_stick(p: f64) -> f64 {
    p.clamp(GEM_CLAMP, 1.0 - GEM_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectBlock;

    pub(crate) fn tiny_data() -> CountData {
        let a = Array2::from_shape_vec((3, 4), vec![5, 0, 2, 1, 0, 3, 1, 0, 2, 2, 0, 4]).unwrap();
        let b = Array2::from_shape_vec((3, 3), vec![1, 0, 7, 0, 2, 3, 4, 1, 0]).unwrap();
        CountData::with_recomputed_factors(
            vec!["g1".into(), "g2".into(), "g3".into()],
            vec![("A".into(), a), ("B".into(), b)],
        )
        .unwrap()
    }

    fn tiny_hyper() -> Hyperparameters {
        let mut h = Hyperparameters::default_for(3);
        h.max_cell_types = 3;
        h.max_subgroups = 2;
        h
    }

    #[test]
    fn init_satisfies_invariants_and_is_deterministic() {
        let data = tiny_data();
        let hyper = tiny_hyper();
        let s1 = init_chain(&data, &hyper, 11).unwrap();
        s1.check_invariants(&data).unwrap();
        let s2 = init_chain(&data, &hyper, 11).unwrap();
        assert_eq!(s1, s2);
        let s3 = init_chain(&data, &hyper, 12).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn init_concentrates_under_tight_hyper_priors() {
        let data = tiny_data();
        let mut hyper = tiny_hyper();
        hyper.mu_hyper.location = 2.5;
        hyper.mu_hyper.location_variance = 1e-12;
        hyper.mu_hyper.variance_shape = 100.0;
        hyper.mu_hyper.variance_rate = 1e-10;
        let s = init_chain(&data, &hyper, 5).unwrap();
        for v in s.mu.iter() {
            assert!((v - 2.5).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn trace_length_is_floor_half_over_thin() {
        let data = tiny_data();
        let hyper = tiny_hyper();
        for (n_iter, thin, expect) in [(10u64, 1u64, 5usize), (10, 3, 1), (11, 2, 2), (5, 1, 2)] {
            let trace = run_chain(&data, &hyper, SamplerConfig { n_iter, thin, seed: 3 }).unwrap();
            assert_eq!(trace.snapshots.len(), expect, "n_iter={n_iter} thin={thin}");
            assert_eq!(trace.iteration_count, n_iter);
        }
    }

    #[test]
    fn fixed_seed_reproduces_trace_and_resume_is_exact() {
        let data = tiny_data();
        let hyper = tiny_hyper();
        let cfg = SamplerConfig { n_iter: 12, thin: 1, seed: 77 };
        let full = run_chain(&data, &hyper, cfg).unwrap();
        let again = run_chain(&data, &hyper, cfg).unwrap();
        assert_eq!(full, again);

        let mut split = Chain::new(&data, &hyper, cfg).unwrap();
        split.advance(5).unwrap();
        split.advance(u64::MAX).unwrap();
        assert_eq!(split.finish().unwrap(), full);
    }

    #[test]
    fn invariants_hold_along_the_chain() {
        let data = tiny_data();
        let hyper = tiny_hyper();
        let mut chain = Chain::new(&data, &hyper, SamplerConfig { n_iter: 20, thin: 1, seed: 9 }).unwrap();
        for _ in 0..20 {
            chain.advance(1).unwrap();
            chain.state().check_invariants(&data).unwrap();
        }
    }
}
