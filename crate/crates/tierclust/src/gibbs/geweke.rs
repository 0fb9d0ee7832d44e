//! Geweke joint-distribution tests for the sampler blocks.
//!
//! Two ways to sample the same joint distribution of (parameters, data):
//!
//! * **forward**: draw the block's components and their descendants from the
//!   model, independently each cycle;
//! * **successive**: keep the block's components across cycles, regenerate
//!   their descendants from the model, then apply the block's transition
//!   kernel.
//!
//! Both condition on one shared draw of the block's fixed ancestors. If the
//! kernel targets its full conditional correctly, every functional of the
//! two streams has the same distribution; a Kolmogorov-Smirnov comparison
//! catches mismatches. Adaptation is disabled throughout (an adapting kernel
//! is not a fixed transition).

use ndarray::Array2;
use rand::Rng;

use crate::data::{CountData, SubjectBlock};
use crate::diagnostics::{two_sample_ks, KsResult};
use crate::error::Result;
use crate::model::{
    dropout_probability, sample_categorical_log, sample_dirichlet, sample_gamma,
    sample_gem, sample_inv_gamma, sample_normal, sample_poisson, EffectHyperPrior, GammaPrior,
    GenePrior, Hyperparameters, InvGammaPrior,
};
use crate::rng::{stream, StreamKey};

use super::blocks::{sweep, UpdateBlock};
use super::{
    sample_negative_normal, Adaptation, BlockCounters, BlockCtx, ChainState,
};

const BLOCK_GEWEKE_BASE: u64 = 80;
const BLOCK_GEWEKE_FORWARD: u64 = 81;
const BLOCK_GEWEKE_REGEN: u64 = 82;

/// Settings of one Geweke run.
#[derive(Debug, Clone)]
pub struct GewekeConfig {
    /// The block under test, or `None` for the composed full sweep.
    pub block: Option<UpdateBlock>,
    pub cycles: usize,
    /// Record every `thin`-th successive cycle.
    pub thin: usize,
    pub seed: u64,
    pub n_genes: usize,
    pub cells_per_subject: Vec<usize>,
    pub hyper: Hyperparameters,
}

impl GewekeConfig {
    /// The two-gene, two-subject, three-cell toy with priors tight enough to
    /// keep Poisson rates sane.
    pub fn toy(block: Option<UpdateBlock>, cycles: usize, seed: u64) -> Self {
        let n_genes = 2;
        let hyper = Hyperparameters {
            gamma: 1.0,
            nu: 1.0,
            max_cell_types: 3,
            max_subgroups: 2,
            alpha_prior: GammaPrior { shape: 2.0, rate: 2.0 },
            mu_hyper: EffectHyperPrior {
                location: 0.0,
                location_variance: 0.25,
                variance_shape: 5.0,
                variance_rate: 1.0,
            },
            beta_hyper: EffectHyperPrior {
                location: 0.0,
                location_variance: 0.25,
                variance_shape: 5.0,
                variance_rate: 1.0,
            },
            sigma2_prior: InvGammaPrior { shape: 5.0, rate: 1.0 },
            lambda0_prior: vec![GenePrior { mean: -0.5, variance: 0.5 }; n_genes],
            lambda1_prior: vec![GenePrior { mean: -1.0, variance: 0.25 }; n_genes],
        };
        Self {
            block,
            cycles,
            thin: 5,
            seed,
            n_genes,
            cells_per_subject: vec![2, 1],
            hyper,
        }
    }
}

/// One functional's two sample streams and their KS comparison.
#[derive(Debug, Clone)]
pub struct FunctionalSamples {
    pub name: &'static str,
    pub forward: Vec<f64>,
    pub successive: Vec<f64>,
    pub ks: KsResult,
}

#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub functionals: Vec<FunctionalSamples>,
}

impl GewekeReport {
    pub fn min_p(&self) -> f64 {
        self.functionals.iter().map(|f| f.ks.p_value).fold(f64::INFINITY, f64::min)
    }

    /// One line per functional: name, KS statistic, p-value.
    pub fn summary(&self) -> String {
        self.functionals
            .iter()
            .map(|f| format!("{}: D={:.4} p={:.4}", f.name, f.ks.statistic, f.ks.p_value))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn empty_data(n_genes: usize, cells: &[usize]) -> CountData {
    let subjects = cells
        .iter()
        .enumerate()
        .map(|(j, &n)| SubjectBlock {
            subject_id: format!("s{j}"),
            counts: Array2::zeros((n_genes, n)),
            scaling_factors: vec![1.0; n],
            library_sizes: vec![0; n],
        })
        .collect();
    CountData::from_raw_parts((0..n_genes).map(|g| format!("g{g}")).collect(), subjects)
        .expect("toy data")
}

// --- ancestral draws ------------------------------------------------------

fn draw_shared_weights<R: Rng>(state: &mut ChainState, h: &Hyperparameters, rng: &mut R) -> Result<()> {
    state.alpha = sample_gamma(h.alpha_prior.shape, h.alpha_prior.rate, rng)?;
    state.xi = sample_gem(state.alpha, h.max_cell_types, rng)?;
    Ok(())
}

fn draw_pi<R: Rng>(state: &mut ChainState, h: &Hyperparameters, rng: &mut R) -> Result<()> {
    let shapes: Vec<f64> = state
        .xi
        .weights
        .iter()
        .map(|w| (h.gamma * w).max(crate::model::MIN_DIRICHLET_SHAPE))
        .collect();
    for row in 0..h.max_subgroups {
        let w = sample_dirichlet(&shapes, rng)?;
        for c in 0..h.max_cell_types {
            state.pi[[row, c]] = w[c];
        }
    }
    Ok(())
}

fn draw_phi<R: Rng>(state: &mut ChainState, h: &Hyperparameters, rng: &mut R) -> Result<()> {
    state.phi = sample_gem(h.nu, h.max_subgroups, rng)?;
    Ok(())
}

fn draw_labels<R: Rng>(state: &mut ChainState, rng: &mut R) -> Result<()> {
    let log_phi: Vec<f64> = state.phi.weights.iter().map(|w| w.ln()).collect();
    for j in 0..state.s_labels.len() {
        state.s_labels[j] = sample_categorical_log(&log_phi, rng)?;
        let row = state.s_labels[j];
        let log_pi: Vec<f64> = (0..state.pi.ncols()).map(|c| state.pi[[row, c]].ln()).collect();
        for i in 0..state.c_labels[j].len() {
            state.c_labels[j][i] = sample_categorical_log(&log_pi, rng)?;
        }
    }
    Ok(())
}

fn draw_effect_hypers<R: Rng>(state: &mut ChainState, h: &Hyperparameters, rng: &mut R) -> Result<()> {
    state.eta_mu = sample_normal(h.mu_hyper.location, h.mu_hyper.location_variance, rng);
    state.tau2_mu = sample_inv_gamma(h.mu_hyper.variance_shape, h.mu_hyper.variance_rate, rng)?;
    state.eta_beta = sample_normal(h.beta_hyper.location, h.beta_hyper.location_variance, rng);
    state.tau2_beta = sample_inv_gamma(h.beta_hyper.variance_shape, h.beta_hyper.variance_rate, rng)?;
    Ok(())
}

fn draw_effects<R: Rng>(state: &mut ChainState, rng: &mut R) {
    let (d, k, l) = (state.mu.nrows(), state.mu.ncols(), state.beta.ncols());
    for g in 0..d {
        for c in 0..k {
            state.mu[[g, c]] = sample_normal(state.eta_mu, state.tau2_mu, rng);
        }
        state.beta[[g, 0]] = 0.0;
        for c in 1..l {
            state.beta[[g, c]] = sample_normal(state.eta_beta, state.tau2_beta, rng);
        }
    }
}

fn draw_scales<R: Rng>(state: &mut ChainState, h: &Hyperparameters, rng: &mut R) -> Result<()> {
    for g in 0..state.sigma2.len() {
        state.sigma2[g] = sample_inv_gamma(h.sigma2_prior.shape, h.sigma2_prior.rate, rng)?;
    }
    Ok(())
}

fn draw_dropout_params<R: Rng>(
    state: &mut ChainState,
    h: &Hyperparameters,
    rng: &mut R,
) -> Result<()> {
    for g in 0..state.lambda0.len() {
        state.lambda0[g] = sample_normal(h.lambda0_prior[g].mean, h.lambda0_prior[g].variance, rng);
        state.lambda1[g] =
            sample_negative_normal(h.lambda1_prior[g].mean, h.lambda1_prior[g].variance, rng)?;
    }
    Ok(())
}

/// Draw latent log rates from their model conditional, then counts and
/// dropout flags, writing the observed matrix into `data`.
fn regen_latents_full<R: Rng>(
    state: &mut ChainState,
    data: &mut CountData,
    rng: &mut R,
) -> Result<()> {
    let d = state.mu.nrows();
    for j in 0..data.subjects.len() {
        let s_row = state.s_labels[j];
        for g in 0..d {
            for i in 0..state.theta[j].ncols() {
                let mean = state.mu[[g, state.c_labels[j][i]]] + state.beta[[g, s_row]];
                state.theta[j][[g, i]] = sample_normal(mean, state.sigma2[g], rng);
            }
        }
    }
    regen_counts_given_theta(state, data, rng)
}

/// Draw counts and dropout flags given the current latent log rates.
fn regen_counts_given_theta<R: Rng>(
    state: &mut ChainState,
    data: &mut CountData,
    rng: &mut R,
) -> Result<()> {
    let d = state.mu.nrows();
    for (j, subj) in data.subjects.iter_mut().enumerate() {
        for g in 0..d {
            for i in 0..subj.counts.ncols() {
                let rate = subj.scaling_factors[i] * state.theta[j][[g, i]].exp();
                let y = sample_poisson(rate, rng)?;
                let p = dropout_probability(y, state.lambda0[g], state.lambda1[g])?;
                let dropped = rng.random::<f64>() < p;
                state.latent_counts[j][[g, i]] = y as u32;
                state.dropped[j][[g, i]] = dropped;
                subj.counts[[g, i]] = if dropped { 0 } else { y as u32 };
            }
        }
    }
    Ok(())
}

/// Full ancestral draw of parameters, latents, and data.
fn prior_joint_draw<R: Rng>(
    state: &mut ChainState,
    data: &mut CountData,
    h: &Hyperparameters,
    rng: &mut R,
) -> Result<()> {
    draw_shared_weights(state, h, rng)?;
    draw_pi(state, h, rng)?;
    draw_phi(state, h, rng)?;
    draw_labels(state, rng)?;
    draw_effect_hypers(state, h, rng)?;
    draw_effects(state, rng);
    draw_scales(state, h, rng)?;
    draw_dropout_params(state, h, rng)?;
    regen_latents_full(state, data, rng)
}

fn blank_state(h: &Hyperparameters, cells: &[usize]) -> ChainState {
    let d = h.n_genes();
    let (k, l) = (h.max_cell_types, h.max_subgroups);
    ChainState {
        xi: crate::model::StickWeights {
            weights: vec![1.0 / k as f64; k],
            proportions: vec![0.5; k - 1],
        },
        alpha: 1.0,
        phi: crate::model::StickWeights {
            weights: vec![1.0 / l as f64; l],
            proportions: vec![0.5; l - 1],
        },
        pi: Array2::from_elem((l, k), 1.0 / k as f64),
        s_labels: vec![0; cells.len()],
        c_labels: cells.iter().map(|&n| vec![0; n]).collect(),
        mu: Array2::zeros((d, k)),
        beta: Array2::zeros((d, l)),
        sigma2: vec![1.0; d],
        lambda0: vec![0.0; d],
        lambda1: vec![-1.0; d],
        eta_mu: 0.0,
        tau2_mu: 1.0,
        eta_beta: 0.0,
        tau2_beta: 1.0,
        theta: cells.iter().map(|&n| Array2::zeros((d, n))).collect(),
        latent_counts: cells.iter().map(|&n| Array2::zeros((d, n))).collect(),
        dropped: cells.iter().map(|&n| Array2::from_elem((d, n), false)).collect(),
    }
}

// --- per-block redraw / regen schedules -----------------------------------

/// Forward draw of the tested block's own components plus its descendants.
fn forward_redraw<R: Rng>(
    block: Option<UpdateBlock>,
    state: &mut ChainState,
    data: &mut CountData,
    h: &Hyperparameters,
    rng: &mut R,
) -> Result<()> {
    match block {
        None => prior_joint_draw(state, data, h, rng),
        Some(UpdateBlock::Augmentation) => regen_latents_full(state, data, rng),
        Some(UpdateBlock::Labels) => {
            draw_labels(state, rng)?;
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::MixtureWeights) => {
            draw_pi(state, h, rng)?;
            draw_phi(state, h, rng)?;
            draw_labels(state, rng)?;
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::SharedWeights) => {
            draw_shared_weights(state, h, rng)?;
            draw_pi(state, h, rng)?;
            draw_labels(state, rng)?;
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::Effects) => {
            draw_effects(state, rng);
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::Scales) => {
            draw_scales(state, h, rng)?;
            draw_effect_hypers(state, h, rng)?;
            draw_effects(state, rng);
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::DropoutParams) => {
            draw_dropout_params(state, h, rng)?;
            regen_latents_full(state, data, rng)
        }
    }
}

/// Successive-chain regeneration of the tested block's descendants, leaving
/// the block's own components to the transition kernel.
fn successive_regen<R: Rng>(
    block: Option<UpdateBlock>,
    state: &mut ChainState,
    data: &mut CountData,
    h: &Hyperparameters,
    rng: &mut R,
) -> Result<()> {
    match block {
        // The sweep (and the augmentation block itself) move the latent log
        // rates; only the counts and flags are data here.
        None | Some(UpdateBlock::Augmentation) => regen_counts_given_theta(state, data, rng),
        Some(UpdateBlock::Labels)
        | Some(UpdateBlock::Effects)
        | Some(UpdateBlock::DropoutParams) => regen_latents_full(state, data, rng),
        Some(UpdateBlock::MixtureWeights) => {
            draw_labels(state, rng)?;
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::SharedWeights) => {
            draw_pi(state, h, rng)?;
            draw_labels(state, rng)?;
            regen_latents_full(state, data, rng)
        }
        Some(UpdateBlock::Scales) => {
            draw_effects(state, rng);
            regen_latents_full(state, data, rng)
        }
    }
}

// --- functionals ------------------------------------------------------------

const ALL_FUNCTIONALS: &[&str] = &[
    "alpha", "xi1", "phi1", "pi11", "mu11", "beta12", "sigma2_1", "lambda0_1", "lambda1_1",
    "eta_mu", "tau2_mu", "eta_beta", "tau2_beta", "theta_mean", "theta_11", "y_sum",
    "dropped_frac", "x_zero_frac", "c1_frac", "s1",
];

fn functional_names(block: Option<UpdateBlock>) -> Vec<&'static str> {
    match block {
        None => vec![
            "alpha", "xi1", "phi1", "pi11", "mu11", "beta12", "sigma2_1", "lambda0_1",
            "lambda1_1", "theta_mean", "dropped_frac",
        ],
        Some(UpdateBlock::Augmentation) => {
            vec!["theta_mean", "theta_11", "y_sum", "dropped_frac", "x_zero_frac"]
        }
        Some(UpdateBlock::Labels) => vec!["c1_frac", "s1", "theta_mean", "x_zero_frac"],
        Some(UpdateBlock::MixtureWeights) => vec!["pi11", "phi1", "c1_frac", "s1"],
        Some(UpdateBlock::SharedWeights) => vec!["xi1", "alpha", "pi11", "c1_frac"],
        Some(UpdateBlock::Effects) => vec!["mu11", "beta12", "theta_mean", "x_zero_frac"],
        Some(UpdateBlock::Scales) => {
            vec!["sigma2_1", "eta_mu", "tau2_mu", "eta_beta", "tau2_beta", "theta_mean"]
        }
        Some(UpdateBlock::DropoutParams) => {
            vec!["lambda0_1", "lambda1_1", "dropped_frac", "x_zero_frac"]
        }
    }
}

fn evaluate(name: &str, state: &ChainState, data: &CountData) -> f64 {
    let total_cells = data.total_cells() as f64;
    let d = state.mu.nrows();
    match name {
        "alpha" => state.alpha,
        "xi1" => state.xi.weights[0],
        "phi1" => state.phi.weights[0],
        "pi11" => state.pi[[0, 0]],
        "mu11" => state.mu[[0, 0]],
        "beta12" => state.beta[[0, 1]],
        "sigma2_1" => state.sigma2[0],
        "lambda0_1" => state.lambda0[0],
        "lambda1_1" => state.lambda1[0],
        "eta_mu" => state.eta_mu,
        "tau2_mu" => state.tau2_mu,
        "eta_beta" => state.eta_beta,
        "tau2_beta" => state.tau2_beta,
        "theta_mean" => {
            let mut acc = 0.0;
            for th in &state.theta {
                acc += th.iter().sum::<f64>();
            }
            acc / (total_cells * d as f64)
        }
        "theta_11" => state.theta[0][[0, 0]],
        "y_sum" => state
            .latent_counts
            .iter()
            .map(|y| y.iter().map(|&v| v as f64).sum::<f64>())
            .sum(),
        "dropped_frac" => {
            let mut acc = 0.0;
            for z in &state.dropped {
                acc += z.iter().filter(|&&b| b).count() as f64;
            }
            acc / (total_cells * d as f64)
        }
        "x_zero_frac" => {
            let mut acc = 0.0;
            for s in &data.subjects {
                acc += s.counts.iter().filter(|&&v| v == 0).count() as f64;
            }
            acc / (total_cells * d as f64)
        }
        "c1_frac" => {
            let mut acc = 0.0;
            for c in &state.c_labels {
                acc += c.iter().filter(|&&v| v == 0).count() as f64;
            }
            acc / total_cells
        }
        "s1" => state.s_labels[0] as f64,
        other => unreachable!("unknown functional {other}"),
    }
}

/// Run the forward and successive streams and compare them.
pub fn run_geweke(cfg: &GewekeConfig) -> Result<GewekeReport> {
    cfg.hyper.validate()?;
    assert!(
        ALL_FUNCTIONALS.len() >= functional_names(cfg.block).len(),
        "functional list mismatch"
    );
    let names = functional_names(cfg.block);
    let mut fwd: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.cycles); names.len()];
    let mut succ: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.cycles / cfg.thin); names.len()];

    // Shared fixed ancestors.
    let mut base_state = blank_state(&cfg.hyper, &cfg.cells_per_subject);
    let mut base_data = empty_data(cfg.n_genes, &cfg.cells_per_subject);
    {
        let mut rng = stream(cfg.seed, StreamKey::new(0, BLOCK_GEWEKE_BASE, 0));
        prior_joint_draw(&mut base_state, &mut base_data, &cfg.hyper, &mut rng)?;
    }

    // Forward stream.
    {
        let mut state = base_state.clone();
        let mut data = base_data.clone();
        for cycle in 0..cfg.cycles {
            let mut rng =
                stream(cfg.seed, StreamKey::new(cycle as u64 + 1, BLOCK_GEWEKE_FORWARD, 0));
            forward_redraw(cfg.block, &mut state, &mut data, &cfg.hyper, &mut rng)?;
            for (idx, name) in names.iter().enumerate() {
                fwd[idx].push(evaluate(name, &state, &data));
            }
        }
    }

    // Successive stream.
    {
        let mut state = base_state.clone();
        let mut data = base_data.clone();
        let mut adapt = Adaptation::new(&data, cfg.hyper.max_cell_types);
        adapt.enabled = false;
        let mut counters = BlockCounters::default();
        for cycle in 0..cfg.cycles {
            let iteration = cycle as u64 + 1;
            {
                let mut rng =
                    stream(cfg.seed, StreamKey::new(iteration, BLOCK_GEWEKE_REGEN, 0));
                successive_regen(cfg.block, &mut state, &mut data, &cfg.hyper, &mut rng)?;
            }
            let ctx = BlockCtx {
                data: &data,
                hyper: &cfg.hyper,
                seed: cfg.seed,
                iteration,
            };
            match cfg.block {
                Some(b) => b.apply(&mut state, &ctx, &mut adapt, &mut counters)?,
                None => sweep(&mut state, &ctx, &mut adapt, &mut counters)?,
            }
            if (cycle + 1) % cfg.thin == 0 {
                for (idx, name) in names.iter().enumerate() {
                    succ[idx].push(evaluate(name, &state, &data));
                }
            }
        }
    }

    let functionals = names
        .iter()
        .zip(fwd.into_iter().zip(succ))
        .map(|(name, (forward, successive))| {
            let ks = two_sample_ks(&forward, &successive);
            FunctionalSamples { name, forward, successive, ks }
        })
        .collect();
    Ok(GewekeReport { functionals })
}
