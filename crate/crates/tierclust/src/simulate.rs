//! Synthetic data generation from the fitted model's own generative process,
//! plus a fit-and-score benchmark loop with a k-means baseline.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountData;
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, SamplerConfig};
use crate::model::{sample_categorical_log, sample_zipln, Hyperparameters};
use crate::posthoc::{adjusted_rand_index, point_estimates, relabel_chain};
use crate::rng::{stream, StreamKey};

const BLOCK_SIM: u64 = 70;
const BLOCK_SIM_STRUCT: u64 = 71;
const BLOCK_BENCH: u64 = 72;

/// Per-cell scaling factors used at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalingDistribution {
    /// Every cell gets the same factor.
    Constant(f64),
    /// `exp(sigma * z)` with standard normal `z`.
    LogNormal { sigma: f64 },
}

/// Ground-truth generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cells_per_subject: Vec<usize>,
    pub n_genes: usize,
    /// True number of subgroups (L*).
    pub n_subgroups: usize,
    /// True number of cell types (K*).
    pub n_cell_types: usize,
    /// True subgroup weights, length L*.
    pub phi: Vec<f64>,
    /// True cell-type proportions per subgroup, L* x K*.
    pub pi: Array2<f64>,
    /// Cell-type effects; drawn at random with enforced column separation
    /// when absent.
    pub mu: Option<Array2<f64>>,
    /// Minimum pairwise Euclidean distance between random mu columns.
    pub mu_separation: f64,
    /// Subgroup effects (column 0 zero); random +-`beta_shift` entries when
    /// absent.
    pub beta: Option<Array2<f64>>,
    pub beta_shift: f64,
    pub sigma2: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub scaling: ScalingDistribution,
    pub seed: u64,
}

impl SimConfig {
    /// The documented default scenario: 20 subjects of 50 cells, 100 genes,
    /// 3 subgroups, 4 cell types, well-separated effects, mild dropout.
    /// Desk-scale: a fit runs in minutes and exercises both clustering
    /// levels.
    pub fn default_scenario(seed: u64) -> Self {
        let d = 100;
        let pi = Array2::from_shape_vec(
            (3, 4),
            vec![
                0.4, 0.3, 0.2, 0.1, //
                0.1, 0.2, 0.3, 0.4, //
                0.25, 0.25, 0.25, 0.25,
            ],
        )
        .expect("static shape");
        Self {
            cells_per_subject: vec![50; 20],
            n_genes: d,
            n_subgroups: 3,
            n_cell_types: 4,
            phi: vec![0.4, 0.35, 0.25],
            pi,
            mu: None,
            mu_separation: 2.0,
            beta: None,
            beta_shift: 0.8,
            sigma2: vec![0.25; d],
            lambda0: vec![-1.0; d],
            lambda1: vec![-0.7; d],
            scaling: ScalingDistribution::Constant(1.0),
            seed,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.cells_per_subject.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_genes;
        if d == 0 || self.cells_per_subject.is_empty() {
            return Err(Error::Config("need at least one gene and one subject".into()));
        }
        if self.cells_per_subject.iter().any(|&n| n == 0) {
            return Err(Error::Config("every subject needs at least one cell".into()));
        }
        if self.phi.len() != self.n_subgroups || self.n_subgroups == 0 {
            return Err(Error::Config("phi must have length L*".into()));
        }
        let sum: f64 = self.phi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.phi.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("phi must be a probability vector".into()));
        }
        if self.pi.shape() != [self.n_subgroups, self.n_cell_types] {
            return Err(Error::Config("pi must be L* x K*".into()));
        }
        for row in 0..self.n_subgroups {
            let s: f64 = (0..self.n_cell_types).map(|c| self.pi[[row, c]]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("pi row {row} must sum to one")));
            }
        }
        if let Some(mu) = &self.mu {
            if mu.shape() != [d, self.n_cell_types] {
                return Err(Error::Config("mu must be D x K*".into()));
            }
        }
        if let Some(beta) = &self.beta {
            if beta.shape() != [d, self.n_subgroups] {
                return Err(Error::Config("beta must be D x L*".into()));
            }
            for g in 0..d {
                if beta[[g, 0]] != 0.0 {
                    return Err(Error::Config("beta column 0 must be zero".into()));
                }
            }
        }
        for (name, v) in [
            ("sigma2", &self.sigma2),
            ("lambda0", &self.lambda0),
            ("lambda1", &self.lambda1),
        ] {
            if v.len() != d {
                return Err(Error::Config(format!("{name} must have one entry per gene")));
            }
        }
        if self.sigma2.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("sigma2 entries must be positive".into()));
        }
        if self.lambda1.iter().any(|&v| v >= 0.0) {
            return Err(Error::Config("lambda1 entries must be negative".into()));
        }
        match self.scaling {
            ScalingDistribution::Constant(s) if s <= 0.0 => {
                Err(Error::Config("constant scaling factor must be positive".into()))
            }
            ScalingDistribution::LogNormal { sigma } if sigma < 0.0 => {
                Err(Error::Config("log-normal scaling sigma must be nonnegative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Everything the generator drew: labels, parameters, per-cell scaling
/// factors, and the latent counts and dropout flags behind the observations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub s_true: Vec<usize>,
    pub c_true: Vec<Vec<usize>>,
    pub mu: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    /// Generation-time scaling factors (the emitted data re-derives its own
    /// from the realised library sizes).
    pub scaling: Vec<Vec<f64>>,
    pub latent_counts: Vec<Vec<Vec<u32>>>,
    pub dropped: Vec<Vec<Vec<bool>>>,
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn draw_structure(config: &SimConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rng = stream(config.seed, StreamKey::new(0, BLOCK_SIM_STRUCT, 0));
    let d = config.n_genes;
    let k = config.n_cell_types;
    let l = config.n_subgroups;

    let mu = match &config.mu {
        Some(m) => m.clone(),
        None => {
            let mut tries = 0;
            loop {
                let m = Array2::from_shape_fn((d, k), |_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let mut min_dist = f64::INFINITY;
                for a in 0..k {
                    for b in a + 1..k {
                        let dist: f64 = (0..d)
                            .map(|g| (m[[g, a]] - m[[g, b]]).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        min_dist = min_dist.min(dist);
                    }
                }
                if min_dist >= config.mu_separation {
                    break m;
                }
                tries += 1;
                if tries > 1000 {
                    return Err(Error::Config(format!(
                        "could not achieve mu column separation {} at D={d}",
                        config.mu_separation
                    )));
                }
            }
        }
    };
    let beta = match &config.beta {
        Some(b) => b.clone(),
        None => {
            let mut b = Array2::<f64>::zeros((d, l));
            for g in 0..d {
                for c in 1..l {
                    let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                    b[[g, c]] = sign * config.beta_shift;
                }
            }
            b
        }
    };
    Ok((mu, beta))
}

/// Generate a dataset from the model with known ground truth.
///
/// Subgroups from `phi`, cell types from the subgroup's `pi` row, counts
/// from the zero-inflated Poisson-log-normal at `mu[g, C] + beta[g, S]`.
/// Library sizes and scaling factors of the returned data are recomputed
/// from the emitted counts; the generation-time factors live in the truth.
pub fn generate_dataset(config: &SimConfig) -> Result<(CountData, GroundTruth)> {
    config.validate()?;
    let (mu, beta) = draw_structure(config)?;
    let d = config.n_genes;
    let log_phi: Vec<f64> = config.phi.iter().map(|p| p.max(1e-300).ln()).collect();

    let mut s_true = Vec::with_capacity(config.n_subjects());
    let mut c_true = Vec::with_capacity(config.n_subjects());
    let mut scaling = Vec::with_capacity(config.n_subjects());
    let mut latent = Vec::with_capacity(config.n_subjects());
    let mut dropped = Vec::with_capacity(config.n_subjects());
    let mut per_subject = Vec::with_capacity(config.n_subjects());

    for (j, &n) in config.cells_per_subject.iter().enumerate() {
        let mut rng = stream(config.seed, StreamKey::new(0, BLOCK_SIM, j as u64));
        let s = sample_categorical_log(&log_phi, &mut rng)?;
        s_true.push(s);
        let log_pi: Vec<f64> = (0..config.n_cell_types)
            .map(|c| config.pi[[s, c]].max(1e-300).ln())
            .collect();

        let mut labels = Vec::with_capacity(n);
        let mut s_factors = Vec::with_capacity(n);
        let mut counts = Array2::<u32>::zeros((d, n));
        let mut y = vec![vec![0u32; n]; d];
        let mut z = vec![vec![false; n]; d];
        for i in 0..n {
            labels.push(sample_categorical_log(&log_pi, &mut rng)?);
            let sf = match config.scaling {
                ScalingDistribution::Constant(s) => s,
                ScalingDistribution::LogNormal { sigma } => {
                    (sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp()
                }
            };
            s_factors.push(sf);
        }
        for g in 0..d {
            for i in 0..n {
                let eta = mu[[g, labels[i]]] + beta[[g, s]];
                let draw = sample_zipln(
                    config.lambda0[g],
                    config.lambda1[g],
                    s_factors[i],
                    eta,
                    config.sigma2[g],
                    &mut rng,
                )?;
                counts[[g, i]] = draw.x as u32;
                y[g][i] = draw.y as u32;
                z[g][i] = draw.dropped;
            }
        }
        c_true.push(labels);
        scaling.push(s_factors);
        latent.push(y);
        dropped.push(z);
        per_subject.push((format!("subject{:02}", j + 1), counts));
    }

    let gene_ids = (1..=d).map(|g| format!("gene{g:04}")).collect();
    let data = CountData::with_recomputed_factors(gene_ids, per_subject)?;
    let truth = GroundTruth {
        s_true,
        c_true,
        mu: rows_of(&mu),
        beta: rows_of(&beta),
        pi: rows_of(&config.pi),
        phi: config.phi.clone(),
        sigma2: config.sigma2.clone(),
        lambda0: config.lambda0.clone(),
        lambda1: config.lambda1.clone(),
        scaling,
        latent_counts: latent,
        dropped,
    };
    Ok((data, truth))
}

// ---------------------------------------------------------------------------
// k-means baseline
// ---------------------------------------------------------------------------

/// Lloyd's k-means with k-means++ seeding; returns the best labeling over
/// `restarts` starts.
pub fn kmeans<R: Rng>(
    points: &Array2<f64>,
    k: usize,
    restarts: usize,
    max_iters: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = points.nrows();
    let d = points.ncols();
    assert!(k >= 1 && n >= k, "need at least k points");
    let dist2 = |a: usize, c: &[f64]| -> f64 {
        let mut acc = 0.0;
        for j in 0..d {
            let diff = points[[a, j]] - c[j];
            acc += diff * diff;
        }
        acc
    };

    let mut best_labels = vec![0usize; n];
    let mut best_inertia = f64::INFINITY;
    for _ in 0..restarts.max(1) {
        // k-means++ seeding.
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(points.row(rng.random_range(0..n)).to_vec());
        let mut d2: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centers.push(points.row(pick).to_vec());
            for i in 0..n {
                d2[i] = d2[i].min(dist2(i, centers.last().unwrap()));
            }
        }

        let mut labels = vec![0usize; n];
        for _ in 0..max_iters {
            let mut moved = false;
            for i in 0..n {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let dd = dist2(i, center);
                    if dd < bd {
                        bd = dd;
                        best = c;
                    }
                }
                if labels[i] != best {
                    labels[i] = best;
                    moved = true;
                }
            }
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[labels[i]] += 1;
                for j in 0..d {
                    sums[labels[i]][j] += points[[i, j]];
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for j in 0..d {
                        centers[c][j] = sums[c][j] / counts[c] as f64;
                    }
                }
            }
            if !moved {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| dist2(i, &centers[labels[i]])).sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_labels = labels;
        }
    }
    best_labels
}

/// Cluster cells on `log2(x / s + 1)` features at the true K*, then subjects
/// on their cell-type proportion vectors at the true L*.
pub fn kmeans_baseline<R: Rng>(
    data: &CountData,
    k_cells: usize,
    l_subjects: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let d = data.n_genes();
    let n = data.total_cells();
    let mut features = Array2::<f64>::zeros((n, d));
    let mut row = 0;
    for subj in &data.subjects {
        for i in 0..subj.n_cells() {
            let s = subj.scaling_factors[i].max(1e-12);
            for g in 0..d {
                features[[row, g]] = (subj.counts[[g, i]] as f64 / s + 1.0).log2();
            }
            row += 1;
        }
    }
    let cell_labels = kmeans(&features, k_cells, 5, 100, rng);

    let m = data.n_subjects();
    let mut proportions = Array2::<f64>::zeros((m, k_cells));
    let mut offset = 0;
    for (j, subj) in data.subjects.iter().enumerate() {
        let n_j = subj.n_cells();
        for i in 0..n_j {
            proportions[[j, cell_labels[offset + i]]] += 1.0 / n_j as f64;
        }
        offset += n_j;
    }
    let subject_labels = kmeans(&proportions, l_subjects, 5, 100, rng);
    (cell_labels, subject_labels)
}

// ---------------------------------------------------------------------------
// Benchmark loop
// ---------------------------------------------------------------------------

/// One row of the benchmark score table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub replicate: usize,
    pub method: String,
    pub ari_cells: f64,
    pub ari_subjects: f64,
    pub n_subgroups_found: usize,
    pub n_celltypes_found: usize,
    pub seconds: f64,
    pub diverged: bool,
}

fn distinct(labels: &[usize]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    seen.extend(labels.iter().copied());
    seen.len()
}

/// Generate, fit, and score `replicates` datasets; every replicate also gets
/// a k-means baseline at the true K*/L*. Statistical outputs are
/// deterministic given the config seed (the `seconds` column obviously is
/// not). A diverged fit is recorded, not fatal.
pub fn benchmark_run(
    config: &SimConfig,
    hyper: &Hyperparameters,
    n_iter: u64,
    replicates: usize,
) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    hyper.validate()?;
    let rows: Vec<Vec<BenchRecord>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut sub = config.clone();
            let mut seed_rng = stream(config.seed, StreamKey::new(r as u64, BLOCK_BENCH, 0));
            sub.seed = seed_rng.random();
            let (data, truth) = generate_dataset(&sub)?;
            let c_true: Vec<usize> = truth.c_true.iter().flatten().copied().collect();

            let mut records = Vec::with_capacity(2);

            let start = std::time::Instant::now();
            let fit = run_chain(
                &data,
                hyper,
                SamplerConfig { n_iter, thin: 1, seed: sub.seed ^ 0x5eed },
            );
            let seconds = start.elapsed().as_secs_f64();
            match fit {
                Ok(trace) => {
                    let summary = point_estimates(&relabel_chain(&trace)?)?;
                    let c_hat: Vec<usize> = summary.c_hat.iter().flatten().copied().collect();
                    records.push(BenchRecord {
                        replicate: r,
                        method: "tierclust".into(),
                        ari_cells: adjusted_rand_index(&c_hat, &c_true)?,
                        ari_subjects: adjusted_rand_index(&summary.s_hat, &truth.s_true)?,
                        n_subgroups_found: summary.n_subgroups,
                        n_celltypes_found: summary.n_celltypes,
                        seconds,
                        diverged: false,
                    });
                }
                Err(Error::Divergence { .. }) => records.push(BenchRecord {
                    replicate: r,
                    method: "tierclust".into(),
                    ari_cells: f64::NAN,
                    ari_subjects: f64::NAN,
                    n_subgroups_found: 0,
                    n_celltypes_found: 0,
                    seconds,
                    diverged: true,
                }),
                Err(e) => return Err(e),
            }

            let start = std::time::Instant::now();
            let mut km_rng = stream(sub.seed, StreamKey::new(r as u64, BLOCK_BENCH, 1));
            let (cells, subjects) = kmeans_baseline(
                &data,
                config.n_cell_types,
                config.n_subgroups,
                &mut km_rng,
            );
            records.push(BenchRecord {
                replicate: r,
                method: "kmeans".into(),
                ari_cells: adjusted_rand_index(&cells, &c_true)?,
                ari_subjects: adjusted_rand_index(&subjects, &truth.s_true)?,
                n_subgroups_found: distinct(&subjects),
                n_celltypes_found: distinct(&cells),
                seconds: start.elapsed().as_secs_f64(),
                diverged: false,
            });
            Ok(records)
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Write the score table as CSV.
pub fn write_score_table<W: std::io::Write>(records: &[BenchRecord], mut w: W) -> Result<()> {
    writeln!(
        w,
        "replicate,method,ari_cells,ari_subjects,n_subgroups_found,n_celltypes_found,seconds"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.replicate,
            r.method,
            r.ari_cells,
            r.ari_subjects,
            r.n_subgroups_found,
            r.n_celltypes_found,
            r.seconds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zipln_zero_probability;

    fn small_config(seed: u64) -> SimConfig {
        let d = 12;
        let mut c = SimConfig::default_scenario(seed);
        c.cells_per_subject = vec![15; 6];
        c.n_genes = d;
        c.sigma2 = vec![0.25; d];
        c.lambda0 = vec![-1.0; d];
        c.lambda1 = vec![-0.7; d];
        c
    }

    #[test]
    fn fixed_seed_gives_identical_dataset() {
        let cfg = small_config(9);
        let (a, ta) = generate_dataset(&cfg).unwrap();
        let (b, tb) = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_dataset(&small_config(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_respect_configured_component_counts() {
        let cfg = small_config(3);
        let (_, truth) = generate_dataset(&cfg).unwrap();
        assert!(truth.s_true.iter().all(|&s| s < cfg.n_subgroups));
        assert!(truth
            .c_true
            .iter()
            .flatten()
            .all(|&c| c < cfg.n_cell_types));
    }

    #[test]
    fn no_dropout_limit_matches_pln_zero_rate() {
        let mut cfg = small_config(11);
        cfg.cells_per_subject = vec![400; 4];
        cfg.lambda0 = vec![-1000.0; cfg.n_genes];
        let (data, truth) = generate_dataset(&cfg).unwrap();
        // With dropout off, the observed zero fraction per gene must match
        // the PLN zero probability averaged over cell types; compare on the
        // first gene using the quadrature oracle.
        let g = 0;
        let mut expected = 0.0;
        let mut total = 0.0;
        for (j, labels) in truth.c_true.iter().enumerate() {
            for &c in labels {
                let eta = truth.mu[g][c] + truth.beta[g][truth.s_true[j]];
                expected +=
                    zipln_zero_probability(-1000.0, -0.7, 1.0, eta, cfg.sigma2[g]).unwrap();
                total += 1.0;
            }
        }
        expected /= total;
        let mut zeros = 0.0;
        for subj in &data.subjects {
            for i in 0..subj.n_cells() {
                if subj.counts[[g, i]] == 0 {
                    zeros += 1.0;
                }
            }
        }
        let observed = zeros / total;
        let se = (expected * (1.0 - expected) / total).sqrt();
        assert!(
            (observed - expected).abs() < 3.5 * se.max(1e-4),
            "observed {observed} vs expected {expected}"
        );
        // Dropout never fired.
        assert!(truth.dropped.iter().flatten().flatten().all(|&z| !z));
    }

    #[test]
    fn per_gene_zero_rates_match_quadrature_oracle() {
        let mut cfg = small_config(13);
        cfg.cells_per_subject = vec![300; 5];
        let (data, truth) = generate_dataset(&cfg).unwrap();
        let n_total: f64 = data.total_cells() as f64;
        for g in 0..cfg.n_genes {
            let mut expected = 0.0;
            for (j, labels) in truth.c_true.iter().enumerate() {
                for &c in labels {
                    let eta = truth.mu[g][c] + truth.beta[g][truth.s_true[j]];
                    expected += zipln_zero_probability(
                        cfg.lambda0[g],
                        cfg.lambda1[g],
                        1.0,
                        eta,
                        cfg.sigma2[g],
                    )
                    .unwrap();
                }
            }
            expected /= n_total;
            let mut zeros = 0.0;
            for subj in &data.subjects {
                for i in 0..subj.n_cells() {
                    if subj.counts[[g, i]] == 0 {
                        zeros += 1.0;
                    }
                }
            }
            let observed = zeros / n_total;
            let se = (expected * (1.0 - expected) / n_total).sqrt().max(1e-4);
            assert!(
                (observed - expected).abs() < 3.5 * se,
                "gene {g}: observed {observed} vs expected {expected} (se {se})"
            );
        }
    }

    #[test]
    fn separated_cell_types_are_visible_in_log_features() {
        // 5-sigma column separation: mean silhouette of the true cell
        // partition on log features must be clearly positive.
        let mut cfg = small_config(17);
        cfg.cells_per_subject = vec![40; 3];
        cfg.mu_separation = 5.0 * cfg.sigma2[0].sqrt() * (cfg.n_genes as f64).sqrt();
        cfg.lambda0 = vec![-1000.0; cfg.n_genes];
        let (data, truth) = generate_dataset(&cfg).unwrap();
        let labels: Vec<usize> = truth.c_true.iter().flatten().copied().collect();
        let d = data.n_genes();
        let n = data.total_cells();
        let mut feats = Array2::<f64>::zeros((n, d));
        let mut row = 0;
        for subj in &data.subjects {
            for i in 0..subj.n_cells() {
                for g in 0..d {
                    feats[[row, g]] =
                        (subj.counts[[g, i]] as f64 / subj.scaling_factors[i] + 1.0).log2();
                }
                row += 1;
            }
        }
        let dist = |a: usize, b: usize| -> f64 {
            (0..d)
                .map(|g| (feats[[a, g]] - feats[[b, g]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let k = cfg.n_cell_types;
        let mut silhouette = 0.0;
        for i in 0..n {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += dist(i, j);
                    counts[labels[j]] += 1;
                }
            }
            let own = labels[i];
            if counts[own] == 0 {
                continue;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            silhouette += (b - a) / a.max(b);
        }
        silhouette /= n as f64;
        assert!(silhouette > 0.5, "silhouette {silhouette}");
    }

    #[test]
    fn kmeans_recovers_obvious_blobs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 90;
        let mut pts = Array2::<f64>::zeros((n, 2));
        let mut truth = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            truth.push(c);
            let center = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)][c];
            pts[[i, 0]] = center.0 + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5;
            pts[[i, 1]] = center.1 + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5;
        }
        let labels = kmeans(&pts, 3, 5, 100, &mut rng);
        assert_eq!(adjusted_rand_index(&labels, &truth).unwrap(), 1.0);
    }

    #[test]
    fn benchmark_rows_and_zero_noise_recovery() {
        // Tiny, nearly noiseless scenario: both methods should nail it, and
        // the table must have replicates x methods rows.
        let d = 16;
        let mut cfg = SimConfig::default_scenario(5);
        cfg.cells_per_subject = vec![12; 6];
        cfg.n_genes = d;
        cfg.n_subgroups = 2;
        cfg.n_cell_types = 2;
        cfg.phi = vec![0.5, 0.5];
        cfg.pi = Array2::from_shape_vec((2, 2), vec![0.7, 0.3, 0.3, 0.7]).unwrap();
        cfg.mu_separation = 8.0;
        cfg.beta_shift = 1.5;
        cfg.sigma2 = vec![0.05; d];
        cfg.lambda0 = vec![-1000.0; d];
        cfg.lambda1 = vec![-0.7; d];
        let mut hyper = Hyperparameters::default_for(d);
        hyper.max_cell_types = 4;
        hyper.max_subgroups = 4;
        let records = benchmark_run(&cfg, &hyper, 300, 1).unwrap();
        assert_eq!(records.len(), 2);
        let ours = records.iter().find(|r| r.method == "tierclust").unwrap();
        assert!(!ours.diverged);
        assert_eq!(ours.ari_cells, 1.0, "{records:?}");
        assert_eq!(ours.ari_subjects, 1.0, "{records:?}");
        assert_eq!((ours.n_subgroups_found, ours.n_celltypes_found), (2, 2));
    }
}
