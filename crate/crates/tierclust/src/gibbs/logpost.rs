//! Complete-data log likelihood and log posterior of a chain state.

use statrs::function::gamma::ln_gamma;

use crate::data::CountData;
use crate::model::{ln_normal_pdf, normal_cdf, Hyperparameters};

use super::ChainState;

fn ln_clamped(x: f64) -> f64 {
    x.max(1e-300).ln()
}

/// Log density of everything below the parameters: labels given weights,
/// latent log rates, latent counts, dropout flags, and the observed zeros'
/// consistency. Invariant under consistent component relabeling, which the
/// post-hoc tests rely on.
pub fn complete_log_likelihood(state: &ChainState, data: &CountData) -> f64 {
    let d = state.n_genes();
    let mut total = 0.0;
    for (j, subj) in data.subjects.iter().enumerate() {
        let s_row = state.s_labels[j];
        total += ln_clamped(state.phi.weights[s_row]);
        let n = subj.n_cells();
        for i in 0..n {
            total += ln_clamped(state.pi[[s_row, state.c_labels[j][i]]]);
        }
        for g in 0..d {
            let var = state.sigma2[g];
            let l0 = state.lambda0[g];
            let l1 = state.lambda1[g];
            for i in 0..n {
                let th = state.theta[j][[g, i]];
                let mean = state.mu[[g, state.c_labels[j][i]]] + state.beta[[g, s_row]];
                total += ln_normal_pdf(th, mean, var);
                let rate = subj.scaling_factors[i] * th.exp();
                let y = state.latent_counts[j][[g, i]] as f64;
                total += y * ln_clamped(rate) - rate - ln_gamma(y + 1.0);
                let p = normal_cdf(l0 + l1 * (y + 1.0).log2());
                total += if state.dropped[j][[g, i]] {
                    ln_clamped(p)
                } else {
                    ln_clamped(1.0 - p)
                };
            }
        }
    }
    total
}

/// Complete-data log posterior: the likelihood plus every prior and
/// hyper-prior term of the model.
pub fn complete_log_posterior(
    state: &ChainState,
    data: &CountData,
    hyper: &Hyperparameters,
) -> f64 {
    let d = state.n_genes();
    let k = state.max_cell_types();
    let l = state.max_subgroups();
    let mut total = complete_log_likelihood(state, data);

    // alpha ~ Gamma(shape, rate)
    let ap = &hyper.alpha_prior;
    total += ap.shape * ap.rate.ln() - ln_gamma(ap.shape) + (ap.shape - 1.0) * state.alpha.ln()
        - ap.rate * state.alpha;

    // Stick proportions: Beta(1, concentration).
    for &p in &state.xi.proportions {
        total += state.alpha.ln() + (state.alpha - 1.0) * (1.0 - p).ln();
    }
    for &p in &state.phi.proportions {
        total += hyper.nu.ln() + (hyper.nu - 1.0) * (1.0 - p).ln();
    }

    // pi rows ~ Dirichlet(gamma * xi).
    for row in 0..l {
        total += ln_gamma(hyper.gamma);
        for c in 0..k {
            let a = (hyper.gamma * state.xi.weights[c]).max(1e-300);
            total += -ln_gamma(a) + (a - 1.0) * ln_clamped(state.pi[[row, c]]);
        }
    }

    // Effects and their hyper-priors.
    for g in 0..d {
        for c in 0..k {
            total += ln_normal_pdf(state.mu[[g, c]], state.eta_mu, state.tau2_mu);
        }
        for c in 1..l {
            total += ln_normal_pdf(state.beta[[g, c]], state.eta_beta, state.tau2_beta);
        }
    }
    let ln_inv_gamma = |x: f64, shape: f64, rate: f64| {
        shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
    };
    let mh = &hyper.mu_hyper;
    total += ln_normal_pdf(state.eta_mu, mh.location, mh.location_variance);
    total += ln_inv_gamma(state.tau2_mu, mh.variance_shape, mh.variance_rate);
    let bh = &hyper.beta_hyper;
    total += ln_normal_pdf(state.eta_beta, bh.location, bh.location_variance);
    total += ln_inv_gamma(state.tau2_beta, bh.variance_shape, bh.variance_rate);

    for g in 0..d {
        total += ln_inv_gamma(state.sigma2[g], hyper.sigma2_prior.shape, hyper.sigma2_prior.rate);
        let p0 = &hyper.lambda0_prior[g];
        total += ln_normal_pdf(state.lambda0[g], p0.mean, p0.variance);
        let p1 = &hyper.lambda1_prior[g];
        // Normal truncated to negatives; the normaliser is the prior mass below zero.
        total += ln_normal_pdf(state.lambda1[g], p1.mean, p1.variance)
            - ln_clamped(normal_cdf(-p1.mean / p1.variance.sqrt()));
    }
    total
}
