//! The sweep's update blocks.
//!
//! Parallel loops only ever write the slots they own and reduce integers, so
//! execution is bit-identical at any thread count; every parallel unit draws
//! from its own `(iteration, block, unit)` stream.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{
    normal_cdf, sample_beta, sample_categorical_log, sample_dirichlet, sample_gamma,
    sample_inv_gamma, sample_normal, sample_utility_negative, sample_utility_positive,
    stick_break, MAX_POISSON_RATE,
};
use crate::rng::{stream, StreamKey};

use super::{
    clamp_stick, Adaptation, BlockCounters, BlockCtx, ChainState, BLOCK_ALPHA, BLOCK_BETA,
    BLOCK_CELL_LABELS, BLOCK_HYPER_EFFECTS, BLOCK_LAMBDA, BLOCK_LATENT, BLOCK_MU, BLOCK_PHI,
    BLOCK_PI, BLOCK_SIGMA2, BLOCK_SUBJECT_LABELS, BLOCK_THETA, BLOCK_XI, TARGET_ACCEPT,
};

/// The blocks of one sweep, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateBlock {
    Augmentation,
    Labels,
    MixtureWeights,
    SharedWeights,
    Effects,
    Scales,
    DropoutParams,
}

pub const SWEEP_ORDER: [UpdateBlock; 7] = [
    UpdateBlock::Augmentation,
    UpdateBlock::Labels,
    UpdateBlock::MixtureWeights,
    UpdateBlock::SharedWeights,
    UpdateBlock::Effects,
    UpdateBlock::Scales,
    UpdateBlock::DropoutParams,
];

impl UpdateBlock {
    pub(crate) fn apply(
        self,
        state: &mut ChainState,
        ctx: &BlockCtx<'_>,
        adapt: &mut Adaptation,
        counters: &mut BlockCounters,
    ) -> Result<()> {
        match self {
            UpdateBlock::Augmentation => {
                update_theta(state, ctx, adapt, counters)?;
                update_latent_counts(state, ctx)
            }
            UpdateBlock::Labels => {
                update_cell_labels(state, ctx)?;
                update_subject_labels(state, ctx)
            }
            UpdateBlock::MixtureWeights => update_mixture_weights(state, ctx),
            UpdateBlock::SharedWeights => update_shared_weights(state, ctx, adapt, counters),
            UpdateBlock::Effects => update_effects(state, ctx),
            UpdateBlock::Scales => update_scales(state, ctx),
            UpdateBlock::DropoutParams => update_dropout_params(state, ctx, counters),
        }
    }
}

pub(crate) fn sweep(
    state: &mut ChainState,
    ctx: &BlockCtx<'_>,
    adapt: &mut Adaptation,
    counters: &mut BlockCounters,
) -> Result<()> {
    for block in SWEEP_ORDER {
        block.apply(state, ctx, adapt, counters)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation: latent log rates
// ---------------------------------------------------------------------------

fn update_theta(
    state: &mut ChainState,
    ctx: &BlockCtx<'_>,
    adapt: &mut Adaptation,
    counters: &mut BlockCounters,
) -> Result<()> {
    let d = state.mu.nrows();
    let gain = Adaptation::gain(ctx.iteration);
    let adapt_on = adapt.enabled;
    let mu = &state.mu;
    let beta = &state.beta;
    let sigma2 = &state.sigma2;
    let mut totals = (0u64, 0u64);

    for (j, subj) in ctx.data.subjects.iter().enumerate() {
        let n = subj.n_cells();
        let s_row = state.s_labels[j];
        let c_j: &[usize] = &state.c_labels[j];
        let sf: &[f64] = &subj.scaling_factors;
        let y_slice = state.latent_counts[j].as_slice().expect("contiguous");
        let theta_slice = state.theta[j].as_slice_mut().expect("contiguous");
        let scale_slice = adapt.theta_log_scale[j].as_slice_mut().expect("contiguous");

        let (p, a) = theta_slice
            .par_chunks_mut(n)
            .zip(scale_slice.par_chunks_mut(n))
            .zip(y_slice.par_chunks(n))
            .enumerate()
            .map(|(g, ((th_row, sc_row), y_row))| {
                let mut rng = stream(
                    ctx.seed,
                    StreamKey::new(ctx.iteration, BLOCK_THETA, (j * d + g) as u64),
                );
                let var = sigma2[g];
                let base = beta[[g, s_row]];
                let mut props = 0u64;
                let mut accs = 0u64;
                for i in 0..n {
                    let mean = mu[[g, c_j[i]]] + base;
                    let y = y_row[i] as f64;
                    let cur = th_row[i];
                    let z: f64 = rng.sample(StandardNormal);
                    let prop = cur + sc_row[i].exp() * z;
                    let dc = cur - mean;
                    let dp = prop - mean;
                    let delta = y * (prop - cur) - sf[i] * (prop.exp() - cur.exp())
                        - (dp * dp - dc * dc) / (2.0 * var);
                    props += 1;
                    let accept = delta >= 0.0 || rng.random::<f64>().ln() < delta;
                    if accept {
                        th_row[i] = prop;
                        accs += 1;
                    }
                    if adapt_on {
                        let ind = if accept { 1.0 } else { 0.0 };
                        sc_row[i] = (sc_row[i] + gain * (ind - TARGET_ACCEPT)).clamp(-12.0, 6.0);
                    }
                }
                (props, accs)
            })
            .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
        totals.0 += p;
        totals.1 += a;
    }
    counters.theta.proposals += totals.0;
    counters.theta.accepted += totals.1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation: latent counts and dropout flags at observed zeros
// ---------------------------------------------------------------------------

/// Smallest `q` with `P(Poisson(rate) > q) <= 1e-8` (a safe upper estimate
/// for large rates).
pub(crate) fn poisson_upper_quantile(rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    if rate <= 500.0 {
        let mut pmf = (-rate).exp();
        let mut cdf = pmf;
        let mut y = 0u64;
        let cap = (10.0 * rate + 200.0) as u64;
        while cdf < 1.0 - 1e-8 && y < cap {
            y += 1;
            pmf *= rate / y as f64;
            cdf += pmf;
        }
        y
    } else {
        (rate + 8.0 * rate.sqrt() + 30.0).ceil() as u64
    }
}

/// Resolve one observed zero: keep it (no dropout, true count zero) or
/// attribute it to dropout of a latent count.
///
/// `table[y]` must hold the dropout probability at count `y` for this gene,
/// covering at least the 1e-8 upper Poisson quantile of `rate`.
pub(crate) fn sample_zero_entry<R: Rng>(
    rate: f64,
    table: &[f64],
    scratch: &mut Vec<f64>,
    rng: &mut R,
) -> (bool, u32) {
    scratch.clear();
    let keep_weight;
    if rate <= 500.0 {
        let mut pmf = (-rate).exp();
        keep_weight = pmf * (1.0 - table[0]);
        let mut total = 0.0;
        for (y, &p) in table.iter().enumerate() {
            let w = pmf * p;
            scratch.push(w);
            total += w;
            pmf *= rate / (y as f64 + 1.0);
            if y as f64 > rate && w < 1e-16 * total {
                break;
            }
        }
    } else {
        // Log space, shifted by the mode so the weights stay representable.
        let ln_rate = rate.ln();
        let mut logs = Vec::with_capacity(table.len());
        let log_keep = (1.0 - table[0]).max(1e-300).ln() - rate;
        let mut max_log = log_keep;
        for (y, &p) in table.iter().enumerate() {
            let lw = y as f64 * ln_rate - ln_gamma(y as f64 + 1.0) - rate
                + p.max(1e-300).ln();
            logs.push(lw);
            if lw > max_log {
                max_log = lw;
            }
        }
        keep_weight = (log_keep - max_log).exp();
        for lw in logs {
            scratch.push((lw - max_log).exp());
        }
    }
    let total_drop: f64 = scratch.iter().sum();
    let u = rng.random::<f64>() * (keep_weight + total_drop);
    if u < keep_weight || total_drop <= 0.0 {
        return (false, 0);
    }
    let mut acc = keep_weight;
    for (y, &w) in scratch.iter().enumerate() {
        acc += w;
        if u < acc {
            return (true, y as u32);
        }
    }
    (true, (scratch.len() - 1) as u32)
}

fn update_latent_counts(state: &mut ChainState, ctx: &BlockCtx<'_>) -> Result<()> {
    let d = state.mu.nrows();
    let lambda0 = &state.lambda0;
    let lambda1 = &state.lambda1;
    let iteration = ctx.iteration;

    for (j, subj) in ctx.data.subjects.iter().enumerate() {
        let n = subj.n_cells();
        let sf: &[f64] = &subj.scaling_factors;
        let x_slice = subj.counts.as_slice().expect("contiguous");
        let theta_slice = state.theta[j].as_slice().expect("contiguous");
        let y_slice = state.latent_counts[j].as_slice_mut().expect("contiguous");
        let z_slice = state.dropped[j].as_slice_mut().expect("contiguous");

        y_slice
            .par_chunks_mut(n)
            .zip(z_slice.par_chunks_mut(n))
            .zip(x_slice.par_chunks(n))
            .zip(theta_slice.par_chunks(n))
            .enumerate()
            .map(|(g, (((y_row, z_row), x_row), th_row))| {
                let mut max_rate = 0.0_f64;
                let mut has_zero = false;
                for i in 0..n {
                    if x_row[i] == 0 {
                        has_zero = true;
                        let rate = sf[i] * th_row[i].exp();
                        if !rate.is_finite() || rate > MAX_POISSON_RATE {
                            return Err(Error::Divergence {
                                iteration,
                                subject: j,
                                gene: g,
                                cell: i,
                                rate,
                            });
                        }
                        max_rate = max_rate.max(rate);
                    }
                }
                if !has_zero {
                    return Ok(());
                }
                let cap = poisson_upper_quantile(max_rate);
                let table: Vec<f64> = (0..=cap)
                    .map(|y| normal_cdf(lambda0[g] + lambda1[g] * (y as f64 + 1.0).log2()))
                    .collect();
                let mut rng = stream(
                    ctx.seed,
                    StreamKey::new(iteration, BLOCK_LATENT, (j * d + g) as u64),
                );
                let mut scratch = Vec::with_capacity(table.len());
                for i in 0..n {
                    if x_row[i] != 0 {
                        continue;
                    }
                    let rate = sf[i] * th_row[i].exp();
                    let (dropped, y) = sample_zero_entry(rate, &table, &mut scratch, &mut rng);
                    z_row[i] = dropped;
                    y_row[i] = y;
                }
                Ok(())
            })
            .collect::<Result<()>>()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

fn cell_type_quadratic(state: &ChainState) -> Vec<f64> {
    let (d, k) = (state.mu.nrows(), state.mu.ncols());
    let mut a = vec![0.0; k];
    for g in 0..d {
        let v = 1.0 / state.sigma2[g];
        for c in 0..k {
            let m = state.mu[[g, c]];
            a[c] += v * m * m;
        }
    }
    a
}

fn cell_label_log_weights_with(
    state: &ChainState,
    quad: &[f64],
    subject: usize,
    cell: usize,
) -> Vec<f64> {
    let (d, k) = (state.mu.nrows(), state.mu.ncols());
    let s_row = state.s_labels[subject];
    let theta = &state.theta[subject];
    let mut w: Vec<f64> = (0..k)
        .map(|c| state.pi[[s_row, c]].ln() - 0.5 * quad[c])
        .collect();
    for g in 0..d {
        let resid =
            (theta[[g, cell]] - state.beta[[g, s_row]]) / state.sigma2[g];
        for c in 0..k {
            w[c] += resid * state.mu[[g, c]];
        }
    }
    w
}

/// Unnormalised log weights of the cell-label full conditional (diagnostic
/// surface; the sampler draws from exactly these weights).
pub fn cell_label_log_weights(state: &ChainState, subject: usize, cell: usize) -> Vec<f64> {
    let quad = cell_type_quadratic(state);
    cell_label_log_weights_with(state, &quad, subject, cell)
}

/// Unnormalised log weights of the subject-label full conditional.
pub fn subject_label_log_weights(state: &ChainState, subject: usize) -> Vec<f64> {
    let (d, k, l) = (
        state.mu.nrows(),
        state.mu.ncols(),
        state.beta.ncols(),
    );
    let theta = &state.theta[subject];
    let n = theta.ncols();
    let c_j = &state.c_labels[subject];

    // Per-gene residual totals against the cell effects.
    let mut t = vec![0.0; d];
    for g in 0..d {
        let mut acc = 0.0;
        for i in 0..n {
            acc += theta[[g, i]] - state.mu[[g, c_j[i]]];
        }
        t[g] = acc;
    }
    let mut label_counts = vec![0u64; k];
    for &c in c_j {
        label_counts[c] += 1;
    }

    (0..l)
        .map(|row| {
            let mut w = state.phi.weights[row].ln();
            for (c, &cnt) in label_counts.iter().enumerate() {
                if cnt > 0 {
                    w += cnt as f64 * state.pi[[row, c]].ln();
                }
            }
            for g in 0..d {
                let b = state.beta[[g, row]];
                let v = 1.0 / state.sigma2[g];
                w += v * (b * t[g] - 0.5 * n as f64 * b * b);
            }
            w
        })
        .collect()
}

fn update_cell_labels(state: &mut ChainState, ctx: &BlockCtx<'_>) -> Result<()> {
    let quad = cell_type_quadratic(state);
    let (d, k) = (state.mu.nrows(), state.mu.ncols());
    let mu = &state.mu;
    let beta = &state.beta;
    let sigma2 = &state.sigma2;
    let pi = &state.pi;
    let theta = &state.theta;
    let s_labels = &state.s_labels;

    let mut offset = 0u64;
    for (j, subj) in ctx.data.subjects.iter().enumerate() {
        let n = subj.n_cells();
        let s_row = s_labels[j];
        let log_pi_quad: Vec<f64> =
            (0..k).map(|c| pi[[s_row, c]].ln() - 0.5 * quad[c]).collect();
        let th = &theta[j];
        let start = offset;
        state.c_labels[j]
            .par_iter_mut()
            .enumerate()
            .map(|(i, label)| {
                let mut w = log_pi_quad.clone();
                for g in 0..d {
                    let resid = (th[[g, i]] - beta[[g, s_row]]) / sigma2[g];
                    for (c, wc) in w.iter_mut().enumerate() {
                        *wc += resid * mu[[g, c]];
                    }
                }
                let mut rng = stream(
                    ctx.seed,
                    StreamKey::new(ctx.iteration, BLOCK_CELL_LABELS, start + i as u64),
                );
                *label = sample_categorical_log(&w, &mut rng)?;
                Ok(())
            })
            .collect::<Result<()>>()?;
        offset += n as u64;
    }
    Ok(())
}

fn update_subject_labels(state: &mut ChainState, ctx: &BlockCtx<'_>) -> Result<()> {
    for j in 0..ctx.data.n_subjects() {
        let w = subject_label_log_weights(state, j);
        let mut rng = stream(
            ctx.seed,
            StreamKey::new(ctx.iteration, BLOCK_SUBJECT_LABELS, j as u64),
        );
        state.s_labels[j] = sample_categorical_log(&w, &mut rng)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mixture weights
// ---------------------------------------------------------------------------

fn update_mixture_weights(state: &mut ChainState, ctx: &BlockCtx<'_>) -> Result<()> {
    let k = state.mu.ncols();
    let l = state.beta.ncols();

    // Cell-type counts per subgroup.
    let mut counts = vec![vec![0u64; k]; l];
    for (j, labels) in state.c_labels.iter().enumerate() {
        let row = state.s_labels[j];
        for &c in labels {
            counts[row][c] += 1;
        }
    }
    for row in 0..l {
        let shapes: Vec<f64> = (0..k)
            .map(|c| {
                (ctx.hyper.gamma * state.xi.weights[c]).max(crate::model::MIN_DIRICHLET_SHAPE)
                    + counts[row][c] as f64
            })
            .collect();
        let mut rng = stream(ctx.seed, StreamKey::new(ctx.iteration, BLOCK_PI, row as u64));
        let w = sample_dirichlet(&shapes, &mut rng)?;
        for c in 0..k {
            state.pi[[row, c]] = w[c];
        }
    }

    // Subgroup stick posteriors.
    let mut m_l = vec![0u64; l];
    for &s in &state.s_labels {
        m_l[s] += 1;
    }
    let mut rng = stream(ctx.seed, StreamKey::new(ctx.iteration, BLOCK_PHI, 0));
    let mut props = Vec::with_capacity(l - 1);
    for row in 0..l - 1 {
        let tail: u64 = m_l[row + 1..].iter().sum();
        let p = sample_beta(1.0 + m_l[row] as f64, ctx.hyper.nu + tail as f64, &mut rng)?;
        props.push(clamp_stick(p));
    }
    state.phi = stick_break(&props, l)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared weights and their concentration
// ---------------------------------------------------------------------------

fn xi_log_target(
    proportions: &[f64],
    alpha: f64,
    gamma: f64,
    ln_pi: &Array2<f64>,
) -> Result<f64> {
    let k = proportions.len() + 1;
    let xi = stick_break(proportions, k)?;
    let mut t = 0.0;
    for &p in proportions {
        t += (alpha - 1.0) * (1.0 - p).ln();
    }
    for row in 0..ln_pi.nrows() {
        for c in 0..k {
            let a = (gamma * xi.weights[c]).max(crate::model::MIN_DIRICHLET_SHAPE);
            t += -ln_gamma(a) + (a - 1.0) * ln_pi[[row, c]];
        }
    }
    Ok(t)
}

fn update_shared_weights(
    state: &mut ChainState,
    ctx: &BlockCtx<'_>,
    adapt: &mut Adaptation,
    counters: &mut BlockCounters,
) -> Result<()> {
    let k = state.mu.ncols();
    let ln_pi = state.pi.mapv(f64::ln);
    let gain = Adaptation::gain(ctx.iteration);
    let adapt_on = adapt.enabled;

    let mut props = state.xi.proportions.clone();
    let mut current = xi_log_target(&props, state.alpha, ctx.hyper.gamma, &ln_pi)?;
    for c in 0..k - 1 {
        let mut rng = stream(ctx.seed, StreamKey::new(ctx.iteration, BLOCK_XI, c as u64));
        let p = props[c];
        let z = (p / (1.0 - p)).ln();
        let noise: f64 = rng.sample(StandardNormal);
        let zp = z + adapt.xi_log_scale[c].exp() * noise;
        let pp = clamp_stick(1.0 / (1.0 + (-zp).exp()));
        let old = props[c];
        props[c] = pp;
        let proposed = xi_log_target(&props, state.alpha, ctx.hyper.gamma, &ln_pi)?;
        // Logit-scale random walk: include the transform Jacobian.
        let delta = proposed - current + (pp * (1.0 - pp)).ln() - (old * (1.0 - old)).ln();
        counters.xi.proposals += 1;
        let accept = delta >= 0.0 || rng.random::<f64>().ln() < delta;
        if accept {
            counters.xi.accepted += 1;
            current = proposed;
        } else {
            props[c] = old;
        }
        if adapt_on {
            let ind = if accept { 1.0 } else { 0.0 };
            adapt.xi_log_scale[c] =
                (adapt.xi_log_scale[c] + gain * (ind - TARGET_ACCEPT)).clamp(-12.0, 6.0);
        }
    }
    state.xi = stick_break(&props, k)?;

    // Conjugate concentration update given the stick proportions.
    let mut rng = stream(ctx.seed, StreamKey::new(ctx.iteration, BLOCK_ALPHA, 0));
    let shape = ctx.hyper.alpha_prior.shape + (k - 1) as f64;
    let log_terms: f64 = state.xi.proportions.iter().map(|&p| (1.0 - p).ln()).sum();
    let rate = ctx.hyper.alpha_prior.rate - log_terms;
    state.alpha = sample_gamma(shape, rate, &mut rng)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Effects
// ---------------------------------------------------------------------------

fn update_effects(state: &mut ChainState, ctx: &BlockCtx<'_>) -> Result<()> {
    let k = state.mu.ncols();
    let l = state.beta.ncols();
    let data = ctx.data;

    let mut cell_counts = vec![0u64; k];
    for labels in &state.c_labels {
        for &c in labels {
            cell_counts[c] += 1;
        }
    }

    // Cell-type effects given the subgroup effects.
    {
        let beta = &state.beta;
        let theta = &state.theta;
        let c_labels = &state.c_labels;
        let s_labels = &state.s_labels;
        let sigma2 = &state.sigma2;
        let eta_mu = state.eta_mu;
        let tau2_mu = state.tau2_mu;
        let seed = ctx.seed;
        let iteration = ctx.iteration;
        state
            .mu
            .as_slice_mut()
            .expect("contiguous")
            .par_chunks_mut(k)
            .enumerate()
            .for_each(|(g, mu_row)| {
                let mut rsum = vec![0.0; k];
                for (j, subj) in data.subjects.iter().enumerate() {
                    let n = subj.n_cells();
                    let th = theta[j].as_slice().expect("contiguous");
                    let row = &th[g * n..(g + 1) * n];
                    let b = beta[[g, s_labels[j]]];
                    let labels = &c_labels[j];
                    for i in 0..n {
                        rsum[labels[i]] += row[i] - b;
                    }
                }
                let mut rng =
                    stream(seed, StreamKey::new(iteration, BLOCK_MU, g as u64));
                let v = sigma2[g];
                for c in 0..k {
                    let prec = 1.0 / tau2_mu + cell_counts[c] as f64 / v;
                    let mean = (eta_mu / tau2_mu + rsum[c] / v) / prec;
                    mu_row[c] = sample_normal(mean, 1.0 / prec, &mut rng);
                }
            });
    }

    // Subgroup effects given the new cell-type effects; column 0 stays zero.
    let mut subgroup_cells = vec![0u64; l];
    for (j, subj) in data.subjects.iter().enumerate() {
        subgroup_cells[state.s_labels[j]] += subj.n_cells() as u64;
    }
    {
        let mu = &state.mu;
        let theta = &state.theta;
        let c_labels = &state.c_labels;
        let s_labels = &state.s_labels;
        let sigma2 = &state.sigma2;
        let eta_beta = state.eta_beta;
        let tau2_beta = state.tau2_beta;
        let seed = ctx.seed;
        let iteration = ctx.iteration;
        state
            .beta
            .as_slice_mut()
            .expect("contiguous")
            .par_chunks_mut(l)
            .enumerate()
            .for_each(|(g, beta_row)| {
                let mut rsum = vec![0.0; l];
                for (j, subj) in data.subjects.iter().enumerate() {
                    let n = subj.n_cells();
                    let th = theta[j].as_slice().expect("contiguous");
                    let row = &th[g * n..(g + 1) * n];
                    let labels = &c_labels[j];
                    let sl = s_labels[j];
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += row[i] - mu[[g, labels[i]]];
                    }
                    rsum[sl] += acc;
                }
                let mut rng =
                    stream(seed, StreamKey::new(iteration, BLOCK_BETA, g as u64));
                let v = sigma2[g];
                beta_row[0] = 0.0;
                for c in 1..l {
                    let prec = 1.0 / tau2_beta + subgroup_cells[c] as f64 / v;
                    let mean = (eta_beta / tau2_beta + rsum[c] / v) / prec;
                    beta_row[c] = sample_normal(mean, 1.0 / prec, &mut rng);
                }
            });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scales and effect hyper-parameters
// ---------------------------------------------------------------------------

fn update_scales(state: &mut ChainState, ctx: &BlockCtx<'_>) -> Result<()> {
    let data = ctx.data;
    let hyper = ctx.hyper;
    let n_total: u64 = data.total_cells() as u64;
    let d = state.mu.nrows();
    let k = state.mu.ncols();
    let l = state.beta.ncols();

    {
        let mu = &state.mu;
        let beta = &state.beta;
        let theta = &state.theta;
        let c_labels = &state.c_labels;
        let s_labels = &state.s_labels;
        let seed = ctx.seed;
        let iteration = ctx.iteration;
        let results: Vec<f64> = (0..d)
            .into_par_iter()
            .map(|g| {
                let mut ssq = 0.0;
                for (j, subj) in data.subjects.iter().enumerate() {
                    let n = subj.n_cells();
                    let th = theta[j].as_slice().expect("contiguous");
                    let row = &th[g * n..(g + 1) * n];
                    let b = beta[[g, s_labels[j]]];
                    let labels = &c_labels[j];
                    for i in 0..n {
                        let r = row[i] - mu[[g, labels[i]]] - b;
                        ssq += r * r;
                    }
                }
                let mut rng =
                    stream(seed, StreamKey::new(iteration, BLOCK_SIGMA2, g as u64));
                sample_inv_gamma(
                    hyper.sigma2_prior.shape + n_total as f64 / 2.0,
                    hyper.sigma2_prior.rate + 0.5 * ssq,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        state.sigma2 = results;
    }

    // Effect hyper-parameters by normal / inverse-gamma conjugacy.
    let mut rng = stream(ctx.seed, StreamKey::new(ctx.iteration, BLOCK_HYPER_EFFECTS, 0));

    let n_mu = (d * k) as f64;
    let sum_mu: f64 = state.mu.iter().sum();
    let h = &hyper.mu_hyper;
    let prec = 1.0 / h.location_variance + n_mu / state.tau2_mu;
    let mean = (h.location / h.location_variance + sum_mu / state.tau2_mu) / prec;
    state.eta_mu = sample_normal(mean, 1.0 / prec, &mut rng);
    let ssq_mu: f64 = state.mu.iter().map(|&v| (v - state.eta_mu) * (v - state.eta_mu)).sum();
    state.tau2_mu = sample_inv_gamma(
        h.variance_shape + n_mu / 2.0,
        h.variance_rate + 0.5 * ssq_mu,
        &mut rng,
    )?;

    let n_beta = (d * (l - 1)) as f64;
    let mut sum_beta = 0.0;
    for g in 0..d {
        for c in 1..l {
            sum_beta += state.beta[[g, c]];
        }
    }
    let h = &hyper.beta_hyper;
    let prec = 1.0 / h.location_variance + n_beta / state.tau2_beta;
    let mean = (h.location / h.location_variance + sum_beta / state.tau2_beta) / prec;
    state.eta_beta = sample_normal(mean, 1.0 / prec, &mut rng);
    let mut ssq_beta = 0.0;
    for g in 0..d {
        for c in 1..l {
            let r = state.beta[[g, c]] - state.eta_beta;
            ssq_beta += r * r;
        }
    }
    state.tau2_beta = sample_inv_gamma(
        h.variance_shape + n_beta / 2.0,
        h.variance_rate + 0.5 * ssq_beta,
        &mut rng,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dropout parameters
// ---------------------------------------------------------------------------

fn ln_normal_cdf(x: f64) -> f64 {
    normal_cdf(x).max(1e-300).ln()
}

fn lambda_log_posterior(
    l0: f64,
    l1: f64,
    prior0: (f64, f64),
    prior1: (f64, f64),
    obs: &[(f64, bool)],
) -> f64 {
    let mut t = crate::model::ln_normal_pdf(l0, prior0.0, prior0.1)
        + crate::model::ln_normal_pdf(l1, prior1.0, prior1.1);
    for &(w, z) in obs {
        let m = l0 + l1 * w;
        t += if z { ln_normal_cdf(m) } else { ln_normal_cdf(-m) };
    }
    t
}

fn update_dropout_params(
    state: &mut ChainState,
    ctx: &BlockCtx<'_>,
    counters: &mut BlockCounters,
) -> Result<()> {
    let d = state.mu.nrows();
    let data = ctx.data;
    let hyper = ctx.hyper;
    let lambda0 = &state.lambda0;
    let lambda1 = &state.lambda1;
    let latent = &state.latent_counts;
    let dropped = &state.dropped;

    struct GeneOut {
        l0: f64,
        l1: f64,
        fallback_props: u64,
        fallback_acc: u64,
        flagged: bool,
    }

    let results: Vec<GeneOut> = (0..d)
        .into_par_iter()
        .map(|g| {
            let mut rng = stream(
                ctx.seed,
                StreamKey::new(ctx.iteration, BLOCK_LAMBDA, g as u64),
            );
            let prior0 = (hyper.lambda0_prior[g].mean, hyper.lambda0_prior[g].variance);
            let prior1 = (hyper.lambda1_prior[g].mean, hyper.lambda1_prior[g].variance);
            let (l0_cur, l1_cur) = (lambda0[g], lambda1[g]);

            // Probit data augmentation: a latent utility per cell whose sign
            // encodes the dropout flag.
            let mut s_w = 0.0;
            let mut s_ww = 0.0;
            let mut s_u = 0.0;
            let mut s_wu = 0.0;
            let mut n_obs = 0.0;
            let mut obs = Vec::with_capacity(data.total_cells());
            for (j, subj) in data.subjects.iter().enumerate() {
                let n = subj.n_cells();
                for i in 0..n {
                    let w = (latent[j][[g, i]] as f64 + 1.0).log2();
                    let z = dropped[j][[g, i]];
                    let mean = l0_cur + l1_cur * w;
                    let u = if z {
                        sample_utility_positive(mean, &mut rng)
                    } else {
                        sample_utility_negative(mean, &mut rng)
                    };
                    s_w += w;
                    s_ww += w * w;
                    s_u += u;
                    s_wu += w * u;
                    n_obs += 1.0;
                    obs.push((w, z));
                }
            }

            // Bivariate normal conditional on the utilities.
            let p00 = 1.0 / prior0.1 + n_obs;
            let p01 = s_w;
            let p11 = 1.0 / prior1.1 + s_ww;
            let h0 = prior0.0 / prior0.1 + s_u;
            let h1 = prior1.0 / prior1.1 + s_wu;
            // Cholesky of the precision.
            let c00 = p00.sqrt();
            let c10 = p01 / c00;
            let c11 = (p11 - c10 * c10).max(1e-12).sqrt();
            // Mean: solve (C C^T) m = h.
            let t0 = h0 / c00;
            let t1 = (h1 - c10 * t0) / c11;
            let m1 = t1 / c11;
            let m0 = (t0 - c10 * m1) / c00;

            for _ in 0..100 {
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                // lambda = mean + C^{-T} z has covariance P^{-1}.
                let v1 = z1 / c11;
                let v0 = (z0 - c10 * v1) / c00;
                let l0 = m0 + v0;
                let l1 = m1 + v1;
                if l1 < 0.0 {
                    return Ok(GeneOut {
                        l0,
                        l1,
                        fallback_props: 0,
                        fallback_acc: 0,
                        flagged: false,
                    });
                }
            }

            // The truncated region kept rejecting; one Metropolis step on the
            // marginal Bernoulli-probit posterior instead.
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let cand0 = l0_cur + 0.1 * z0;
            let cand1 = l1_cur + 0.1 * z1;
            if cand1 < 0.0 {
                let cur = lambda_log_posterior(l0_cur, l1_cur, prior0, prior1, &obs);
                let prop = lambda_log_posterior(cand0, cand1, prior0, prior1, &obs);
                let delta = prop - cur;
                if delta >= 0.0 || rng.random::<f64>().ln() < delta {
                    return Ok(GeneOut {
                        l0: cand0,
                        l1: cand1,
                        fallback_props: 1,
                        fallback_acc: 1,
                        flagged: false,
                    });
                }
            }
            Ok(GeneOut {
                l0: l0_cur,
                l1: l1_cur,
                fallback_props: 1,
                fallback_acc: 0,
                flagged: true,
            })
        })
        .collect::<Result<_>>()?;

    for (g, out) in results.into_iter().enumerate() {
        state.lambda0[g] = out.l0;
        state.lambda1[g] = out.l1;
        counters.lambda_fallback.proposals += out.fallback_props;
        counters.lambda_fallback.accepted += out.fallback_acc;
        if out.flagged {
            counters.lambda_flagged += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StickWeights;

    fn simplex(v: Vec<f64>) -> StickWeights {
        let mut proportions = Vec::new();
        let mut rem = 1.0;
        for &w in &v[..v.len() - 1] {
            proportions.push(w / rem);
            rem -= w;
        }
        StickWeights { weights: v, proportions }
    }

    // A hand-built one-gene state for label-weight checks.
    fn toy_state(k: usize, mu_vals: &[f64], theta: f64) -> ChainState {
        ChainState {
            xi: simplex(vec![1.0 / k as f64; k]),
            alpha: 1.0,
            phi: simplex(vec![1.0]),
            pi: Array2::from_shape_fn((1, k), |_| 1.0 / k as f64),
            s_labels: vec![0],
            c_labels: vec![vec![0]],
            mu: Array2::from_shape_vec((1, k), mu_vals.to_vec()).unwrap(),
            beta: Array2::zeros((1, 1)),
            sigma2: vec![1.0],
            lambda0: vec![0.0],
            lambda1: vec![-1.0],
            eta_mu: 0.0,
            tau2_mu: 1.0,
            eta_beta: 0.0,
            tau2_beta: 1.0,
            theta: vec![Array2::from_elem((1, 1), theta)],
            latent_counts: vec![Array2::zeros((1, 1))],
            dropped: vec![Array2::from_elem((1, 1), false)],
        }
    }

    #[test]
    fn single_component_gets_probability_one() {
        let state = toy_state(1, &[0.3], 0.5);
        let w = cell_label_log_weights(&state, 0, 0);
        assert_eq!(w.len(), 1);
        let mut rng = stream(0, StreamKey::new(0, 99, 0));
        assert_eq!(sample_categorical_log(&w, &mut rng).unwrap(), 0);
    }

    #[test]
    fn well_separated_components_dominate() {
        // Component 1 sits 10 sigma from the observation, component 0 on it.
        let state = toy_state(2, &[0.0, 10.0], 0.0);
        let w = cell_label_log_weights(&state, 0, 0);
        let p0 = 1.0 / (1.0 + (w[1] - w[0]).exp());
        assert!(p0 > 0.99, "{p0}");
    }

    #[test]
    fn poisson_quantile_is_an_upper_tail_bound() {
        assert_eq!(poisson_upper_quantile(0.0), 0);
        for &rate in &[0.1, 1.0, 7.3, 60.0, 400.0] {
            let q = poisson_upper_quantile(rate);
            // CDF at q must reach 1 - 1e-8.
            let mut pmf = (-rate).exp();
            let mut cdf = pmf;
            for y in 1..=q {
                pmf *= rate / y as f64;
                cdf += pmf;
            }
            assert!(cdf >= 1.0 - 1.1e-8, "rate {rate}: cdf {cdf} at q {q}");
        }
        // Large-rate branch stays comfortably above the mean.
        assert!(poisson_upper_quantile(1e4) > 10_000);
    }

    #[test]
    fn zero_entry_limits() {
        // Dropout probability ~0 forces a kept zero.
        let table_none = vec![1e-12; 40];
        let mut scratch = Vec::new();
        let mut rng = stream(3, StreamKey::new(0, 98, 0));
        for _ in 0..200 {
            let (dropped, y) = sample_zero_entry(2.0, &table_none, &mut scratch, &mut rng);
            assert!(!dropped);
            assert_eq!(y, 0);
        }
        // Dropout probability ~1 with a sizeable rate: almost surely dropout
        // of a positive latent count.
        let table_all = vec![1.0 - 1e-12; 80];
        let mut positives = 0;
        for _ in 0..200 {
            let (dropped, y) = sample_zero_entry(20.0, &table_all, &mut scratch, &mut rng);
            assert!(dropped || y == 0);
            if dropped && y > 0 {
                positives += 1;
            }
        }
        assert!(positives > 190, "{positives}");
    }

    #[test]
    fn zero_entry_log_branch_matches_linear_shape() {
        // At a rate just under/over the branch cut the sampled latent counts
        // should have the same distribution; compare means loosely.
        let l0 = 0.0;
        let l1 = -0.3;
        let cap = poisson_upper_quantile(520.0);
        let table: Vec<f64> = (0..=cap)
            .map(|y| normal_cdf(l0 + l1 * (y as f64 + 1.0).log2()))
            .collect();
        let mut scratch = Vec::new();
        let mut rng = stream(9, StreamKey::new(0, 97, 0));
        let mean_at = |rate: f64, rng: &mut rand_chacha::ChaCha8Rng, scratch: &mut Vec<f64>| {
            let n = 3000;
            let mut acc = 0.0;
            for _ in 0..n {
                let (_, y) = sample_zero_entry(rate, &table, scratch, rng);
                acc += y as f64;
            }
            acc / n as f64
        };
        let lin = mean_at(499.0, &mut rng, &mut scratch);
        let log = mean_at(501.0, &mut rng, &mut scratch);
        assert!(
            (lin - log).abs() < 0.02 * lin,
            "linear {lin} vs log-space {log}"
        );
    }
}
