//! Post-processing of a chain trace: label-switching correction, point
//! estimates, posterior similarity matrices, and clustering evaluation.
//!
//! All operations are pure over an immutable trace.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::gibbs::{ChainState, ChainTrace, Snapshot};
use crate::model::StickWeights;

/// Point estimates and co-clustering summaries from a relabeled trace.
/// Labels are 0-based here; presentation layers add one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    /// Posterior-mode subgroup label per subject.
    pub s_hat: Vec<usize>,
    /// Posterior-mode cell-type label per cell, per subject.
    pub c_hat: Vec<Vec<usize>>,
    /// Posterior-mean subgroup effects, D x L.
    pub beta_hat: Array2<f64>,
    /// Posterior-mean cell-type effects, D x K.
    pub mu_hat: Array2<f64>,
    /// Posterior-mean cell-type proportions per subgroup, L x K.
    pub pi_hat: Array2<f64>,
    /// Pairwise co-clustering frequency of cells (subjects concatenated in
    /// order), N x N.
    pub psm_cells: Array2<f64>,
    /// Pairwise co-clustering frequency of subjects, m x m.
    pub psm_subjects: Array2<f64>,
    /// Number of distinct labels in `s_hat`.
    pub n_subgroups: usize,
    /// Number of distinct labels across `c_hat`.
    pub n_celltypes: usize,
}

// ---------------------------------------------------------------------------
// Adjusted Rand index
// ---------------------------------------------------------------------------

/// Hubert-Arabie adjusted Rand index between two partitions of the same
/// objects: 1 iff they agree up to relabeling, 0 in expectation under
/// independent random labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "partitions have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("partitions are empty".into()));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut sum_cells = 0.0;
    let mut row_sums = vec![0u64; ka];
    let mut col_sums = vec![0u64; kb];
    for (i, row) in table.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            sum_cells += choose2(n);
            row_sums[i] += n;
            col_sums[j] += n;
        }
    }
    let sum_a: f64 = row_sums.iter().map(|&n| choose2(n)).sum();
    let sum_b: f64 = col_sums.iter().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        // Both partitions are all-singletons or all-one-cluster.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

// ---------------------------------------------------------------------------
// Posterior similarity
// ---------------------------------------------------------------------------

/// Fraction of states in which objects `i` and `j` share a label.
/// Invariant under any per-state relabeling.
pub fn posterior_similarity(states: &[Vec<usize>]) -> Result<Array2<f64>> {
    let first = states
        .first()
        .ok_or_else(|| Error::Shape("no states to summarise".into()))?;
    let n = first.len();
    for (t, s) in states.iter().enumerate() {
        if s.len() != n {
            return Err(Error::Shape(format!(
                "state {t} partitions {} objects, expected {n}",
                s.len()
            )));
        }
    }
    let mut counts = Array2::<u32>::zeros((n, n));
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for state in states {
        let k = state.iter().max().unwrap() + 1;
        buckets.clear();
        buckets.resize(k, Vec::new());
        for (i, &label) in state.iter().enumerate() {
            buckets[label].push(i);
        }
        for group in &buckets {
            for (ai, &i) in group.iter().enumerate() {
                for &j in &group[ai + 1..] {
                    counts[[i, j]] += 1;
                }
            }
        }
    }
    let t = states.len() as f64;
    let mut psm = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        psm[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = counts[[i, j]] as f64 / t;
            psm[[i, j]] = v;
            psm[[j, i]] = v;
        }
    }
    Ok(psm)
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

/// Maximum-total-score perfect assignment on a square matrix (Hungarian
/// algorithm with potentials); returns `sigma` with `sigma[row] = column`.
pub fn max_assignment(score: &Array2<i64>) -> Vec<usize> {
    let n = score.nrows();
    assert_eq!(n, score.ncols(), "assignment needs a square matrix");
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = -score[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        if matched[j] != 0 {
            sigma[matched[j] - 1] = j - 1;
        }
    }
    sigma
}

// ---------------------------------------------------------------------------
// Relabeling
// ---------------------------------------------------------------------------

fn recompute_proportions(weights: &[f64]) -> Vec<f64> {
    let mut props = Vec::with_capacity(weights.len() - 1);
    let mut remaining = 1.0_f64;
    for &w in &weights[..weights.len() - 1] {
        let p = if remaining > 0.0 { (w / remaining).clamp(0.0, 1.0) } else { 0.0 };
        props.push(p);
        remaining -= w;
    }
    props
}

fn permuted_sticks(sticks: &StickWeights, sigma: &[usize]) -> StickWeights {
    let mut weights = vec![0.0; sticks.weights.len()];
    for (old, &new) in sigma.iter().enumerate() {
        weights[new] = sticks.weights[old];
    }
    let proportions = recompute_proportions(&weights);
    StickWeights { weights, proportions }
}

fn permute_columns(m: &Array2<f64>, sigma: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (old, &new) in sigma.iter().enumerate() {
        for g in 0..m.nrows() {
            out[[g, new]] = m[[g, old]];
        }
    }
    out
}

fn permute_rows(m: &Array2<f64>, sigma: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (old, &new) in sigma.iter().enumerate() {
        for c in 0..m.ncols() {
            out[[new, c]] = m[[old, c]];
        }
    }
    out
}

fn apply_cell_permutation(snap: &mut Snapshot, sigma: &[usize]) {
    snap.mu = permute_columns(&snap.mu, sigma);
    snap.pi = permute_columns(&snap.pi, sigma);
    snap.xi = permuted_sticks(&snap.xi, sigma);
    for labels in &mut snap.c_labels {
        for c in labels.iter_mut() {
            *c = sigma[*c];
        }
    }
}

fn apply_subject_permutation(snap: &mut Snapshot, sigma: &[usize]) {
    snap.beta = permute_columns(&snap.beta, sigma);
    snap.pi = permute_rows(&snap.pi, sigma);
    snap.phi = permuted_sticks(&snap.phi, sigma);
    for s in snap.s_labels.iter_mut() {
        *s = sigma[*s];
    }
}

/// Shift the reference so subgroup column 0 is exactly zero while every
/// `mu + beta` sum is unchanged.
fn re_reference(snap: &mut Snapshot) {
    let d = snap.beta.nrows();
    let ref_col: Vec<f64> = (0..d).map(|g| snap.beta[[g, 0]]).collect();
    for g in 0..d {
        for c in 0..snap.mu.ncols() {
            snap.mu[[g, c]] += ref_col[g];
        }
        for l in 0..snap.beta.ncols() {
            snap.beta[[g, l]] -= ref_col[g];
        }
        snap.beta[[g, 0]] = 0.0;
    }
}

fn cooccurrence(a: &[usize], b: &[usize], k: usize) -> Array2<i64> {
    let mut m = Array2::<i64>::zeros((k, k));
    for (&x, &y) in a.iter().zip(b) {
        m[[x, y]] += 1;
    }
    m
}

fn flatten_cells(c_labels: &[Vec<usize>]) -> Vec<usize> {
    c_labels.iter().flatten().copied().collect()
}

/// Correct label switching across the trace.
///
/// The state with the highest stored complete-data log posterior anchors the
/// labeling. Each state's cell-type components are permuted to maximise
/// label agreement with the anchor (optimal assignment on the co-occurrence
/// matrix), then its subgroups likewise; the subgroup with the most subjects
/// in the anchor ends up at index 0 everywhere, and the subgroup effects are
/// re-referenced against that column (with the matching shift absorbed into
/// the cell effects, so every likelihood-relevant quantity is unchanged).
pub fn relabel_chain(trace: &ChainTrace) -> Result<ChainTrace> {
    if trace.snapshots.is_empty() {
        return Err(Error::Shape("cannot relabel an empty trace".into()));
    }
    let k = trace.max_cell_types();
    let l = trace.max_subgroups();
    let reference = trace
        .snapshots
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.log_posterior.total_cmp(&b.1.log_posterior))
        .map(|(i, _)| i)
        .unwrap();
    let ref_cells = flatten_cells(&trace.snapshots[reference].c_labels);
    let ref_subjects = trace.snapshots[reference].s_labels.clone();

    // Final renumbering: the anchor's largest subgroup (by subject count,
    // ties to the smaller index) goes first, the rest follow by size.
    let mut subj_counts = vec![0u64; l];
    for &s in &ref_subjects {
        subj_counts[s] += 1;
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(subj_counts[i]), i));
    let mut rho = vec![0usize; l];
    for (rank, &old) in order.iter().enumerate() {
        rho[old] = rank;
    }

    let mut out = trace.clone();
    for snap in &mut out.snapshots {
        let cells = flatten_cells(&snap.c_labels);
        let sigma_cell = max_assignment(&cooccurrence(&cells, &ref_cells, k));
        apply_cell_permutation(snap, &sigma_cell);

        let sigma_subj = max_assignment(&cooccurrence(&snap.s_labels, &ref_subjects, l));
        let composed: Vec<usize> = sigma_subj.iter().map(|&mid| rho[mid]).collect();
        apply_subject_permutation(snap, &composed);
        re_reference(snap);
    }
    Ok(out)
}

/// The same component permutation applied to a full chain state (the
/// augmentation layer is label-free and untouched). Used to verify that
/// relabeling changes no likelihood-relevant quantity.
pub fn permute_chain_state(
    state: &ChainState,
    cell_sigma: &[usize],
    subject_sigma: &[usize],
    re_ref: bool,
) -> ChainState {
    let mut out = state.clone();
    out.mu = permute_columns(&state.mu, cell_sigma);
    out.pi = permute_columns(&state.pi, cell_sigma);
    out.xi = permuted_sticks(&state.xi, cell_sigma);
    for labels in &mut out.c_labels {
        for c in labels.iter_mut() {
            *c = cell_sigma[*c];
        }
    }
    out.beta = permute_columns(&out.beta, subject_sigma);
    out.pi = permute_rows(&out.pi, subject_sigma);
    out.phi = permuted_sticks(&out.phi, subject_sigma);
    for s in out.s_labels.iter_mut() {
        *s = subject_sigma[*s];
    }
    if re_ref {
        let d = out.beta.nrows();
        let ref_col: Vec<f64> = (0..d).map(|g| out.beta[[g, 0]]).collect();
        for g in 0..d {
            for c in 0..out.mu.ncols() {
                out.mu[[g, c]] += ref_col[g];
            }
            for l in 0..out.beta.ncols() {
                out.beta[[g, l]] -= ref_col[g];
            }
            out.beta[[g, 0]] = 0.0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Point estimates
// ---------------------------------------------------------------------------

fn mode(values: impl Iterator<Item = usize>, k: usize) -> usize {
    let mut counts = vec![0u64; k];
    for v in values {
        counts[v] += 1;
    }
    // Ties break toward the smaller label.
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Point estimates from a (relabeled) trace: per-coordinate label modes,
/// effect means, and posterior similarity matrices.
pub fn point_estimates(trace: &ChainTrace) -> Result<PosteriorSummary> {
    let first = trace
        .snapshots
        .first()
        .ok_or_else(|| Error::Shape("cannot summarise an empty trace".into()))?;
    let t = trace.snapshots.len() as f64;
    let k = trace.max_cell_types();
    let l = trace.max_subgroups();
    let m = first.s_labels.len();

    let s_hat: Vec<usize> = (0..m)
        .map(|j| mode(trace.snapshots.iter().map(|s| s.s_labels[j]), l))
        .collect();
    let mut c_hat = Vec::with_capacity(m);
    for j in 0..m {
        let n = first.c_labels[j].len();
        let labels: Vec<usize> = (0..n)
            .map(|i| mode(trace.snapshots.iter().map(|s| s.c_labels[j][i]), k))
            .collect();
        c_hat.push(labels);
    }

    let mut mu_hat = Array2::<f64>::zeros(first.mu.raw_dim());
    let mut beta_hat = Array2::<f64>::zeros(first.beta.raw_dim());
    let mut pi_hat = Array2::<f64>::zeros(first.pi.raw_dim());
    for snap in &trace.snapshots {
        mu_hat += &snap.mu;
        beta_hat += &snap.beta;
        pi_hat += &snap.pi;
    }
    mu_hat /= t;
    beta_hat /= t;
    pi_hat /= t;

    let cell_states: Vec<Vec<usize>> =
        trace.snapshots.iter().map(|s| flatten_cells(&s.c_labels)).collect();
    let subj_states: Vec<Vec<usize>> =
        trace.snapshots.iter().map(|s| s.s_labels.clone()).collect();
    let psm_cells = posterior_similarity(&cell_states)?;
    let psm_subjects = posterior_similarity(&subj_states)?;

    let mut seen_s = vec![false; l];
    for &s in &s_hat {
        seen_s[s] = true;
    }
    let mut seen_c = vec![false; k];
    for labels in &c_hat {
        for &c in labels {
            seen_c[c] = true;
        }
    }

    Ok(PosteriorSummary {
        s_hat,
        c_hat,
        beta_hat,
        mu_hat,
        pi_hat,
        psm_cells,
        psm_subjects,
        n_subgroups: seen_s.iter().filter(|&&b| b).count(),
        n_celltypes: seen_c.iter().filter(|&&b| b).count(),
    })
}
