//! Checkpoint serialization.
//!
//! A checkpoint is a self-contained little-endian binary file holding the
//! run configuration, the embedded count data, the full chain state
//! (including the augmentation layer and the adaptive proposal scales), the
//! Metropolis tallies, and the snapshots collected so far. Resuming from it
//! reproduces the uninterrupted run bit for bit, because every random draw
//! is keyed by `(seed, iteration, block, unit)` rather than by generator
//! history.
//!
//! Layout (version 1):
//!
//! ```text
//! magic            8 bytes  b"TIERCKPT"
//! version          u32
//! seed, n_iter, thin, completed   4 x u64
//! D, m, K, L       4 x u32
//! n_j              m x u32
//! gene ids         D strings (u32 length + UTF-8 bytes)
//! subject ids      m strings
//! per subject      counts (D*n_j u32), scaling (n_j f64), library (n_j u64)
//! hyper            gamma, nu, alpha(2), mu_hyper(4), beta_hyper(4),
//!                  sigma2(2), lambda0 prior (D pairs), lambda1 prior (D pairs)
//! state            xi (K + K-1 f64), alpha, phi (L + L-1), pi (L*K),
//!                  S (m u32), C (sum n_j u32), mu (D*K), beta (D*L),
//!                  sigma2/lambda0/lambda1 (3*D), eta/tau pairs (4 f64),
//!                  theta (D*n_j f64 per subject), latent counts (u32),
//!                  dropout flags (u8)
//! adaptation       theta log scales (D*n_j f64 per subject),
//!                  xi log scales (K-1), enabled u8
//! tallies          theta/xi/lambda-fallback (proposals, accepted) u64 pairs,
//!                  flagged genes u64
//! snapshots        count u64, then per snapshot: iteration u64,
//!                  log posterior f64, parameters in state order (no
//!                  augmentation layer)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::data::{CountData, SubjectBlock};
use crate::error::{Error, Result};
use crate::model::{
    EffectHyperPrior, GammaPrior, GenePrior, Hyperparameters, InvGammaPrior, StickWeights,
};

use super::{Adaptation, BlockCounters, Chain, ChainState, SamplerConfig, Snapshot};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TIERCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_ELEMENTS: u64 = 1 << 33;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(corrupt(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| corrupt(format!("invalid UTF-8: {e}")))
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(v)
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    write_f64s(w, m.as_slice().expect("contiguous"))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let v = read_f64s(r, rows * cols)?;
    Array2::from_shape_vec((rows, cols), v).map_err(|e| corrupt(e.to_string()))
}

fn write_sticks<W: Write>(w: &mut W, s: &StickWeights) -> Result<()> {
    write_f64s(w, &s.weights)?;
    write_f64s(w, &s.proportions)
}

fn read_sticks<R: Read>(r: &mut R, len: usize) -> Result<StickWeights> {
    let weights = read_f64s(r, len)?;
    let proportions = read_f64s(r, len - 1)?;
    Ok(StickWeights { weights, proportions })
}

fn write_labels<W: Write>(w: &mut W, labels: &[usize]) -> Result<()> {
    for &x in labels {
        w.write_u32::<LittleEndian>(x as u32)?;
    }
    Ok(())
}

fn read_labels<R: Read>(r: &mut R, n: usize, max: usize) -> Result<Vec<usize>> {
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.read_u32::<LittleEndian>()? as usize;
        if x >= max {
            return Err(corrupt(format!("label {x} out of range {max}")));
        }
        v.push(x);
    }
    Ok(v)
}

struct Dims {
    d: usize,
    k: usize,
    l: usize,
    cells: Vec<usize>,
}

fn write_params<W: Write>(w: &mut W, s: &Snapshot) -> Result<()> {
    write_sticks(w, &s.xi)?;
    w.write_f64::<LittleEndian>(s.alpha)?;
    write_sticks(w, &s.phi)?;
    write_matrix(w, &s.pi)?;
    write_labels(w, &s.s_labels)?;
    for c in &s.c_labels {
        write_labels(w, c)?;
    }
    write_matrix(w, &s.mu)?;
    write_matrix(w, &s.beta)?;
    write_f64s(w, &s.sigma2)?;
    write_f64s(w, &s.lambda0)?;
    write_f64s(w, &s.lambda1)?;
    for x in [s.eta_mu, s.tau2_mu, s.eta_beta, s.tau2_beta] {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, dims: &Dims, iteration: u64, log_posterior: f64) -> Result<Snapshot> {
    let xi = read_sticks(r, dims.k)?;
    let alpha = r.read_f64::<LittleEndian>()?;
    let phi = read_sticks(r, dims.l)?;
    let pi = read_matrix(r, dims.l, dims.k)?;
    let s_labels = read_labels(r, dims.cells.len(), dims.l)?;
    let mut c_labels = Vec::with_capacity(dims.cells.len());
    for &n in &dims.cells {
        c_labels.push(read_labels(r, n, dims.k)?);
    }
    let mu = read_matrix(r, dims.d, dims.k)?;
    let beta = read_matrix(r, dims.d, dims.l)?;
    let sigma2 = read_f64s(r, dims.d)?;
    let lambda0 = read_f64s(r, dims.d)?;
    let lambda1 = read_f64s(r, dims.d)?;
    let eta_mu = r.read_f64::<LittleEndian>()?;
    let tau2_mu = r.read_f64::<LittleEndian>()?;
    let eta_beta = r.read_f64::<LittleEndian>()?;
    let tau2_beta = r.read_f64::<LittleEndian>()?;
    Ok(Snapshot {
        iteration,
        log_posterior,
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
    })
}

/// Serialize a chain (mid-run or finished) to `path`.
pub fn write_chain(chain: &Chain, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(chain.config.seed)?;
    w.write_u64::<LittleEndian>(chain.config.n_iter)?;
    w.write_u64::<LittleEndian>(chain.config.thin)?;
    w.write_u64::<LittleEndian>(chain.completed)?;

    let data = &chain.data;
    let d = data.n_genes();
    let m = data.n_subjects();
    let k = chain.hyper.max_cell_types;
    let l = chain.hyper.max_subgroups;
    w.write_u32::<LittleEndian>(d as u32)?;
    w.write_u32::<LittleEndian>(m as u32)?;
    w.write_u32::<LittleEndian>(k as u32)?;
    w.write_u32::<LittleEndian>(l as u32)?;
    for s in &data.subjects {
        w.write_u32::<LittleEndian>(s.n_cells() as u32)?;
    }
    for g in &data.gene_ids {
        write_string(&mut w, g)?;
    }
    for s in &data.subjects {
        write_string(&mut w, &s.subject_id)?;
    }
    for s in &data.subjects {
        for &x in s.counts.as_slice().expect("contiguous") {
            w.write_u32::<LittleEndian>(x)?;
        }
        write_f64s(&mut w, &s.scaling_factors)?;
        for &x in &s.library_sizes {
            w.write_u64::<LittleEndian>(x)?;
        }
    }

    let h = &chain.hyper;
    write_f64s(
        &mut w,
        &[
            h.gamma,
            h.nu,
            h.alpha_prior.shape,
            h.alpha_prior.rate,
            h.mu_hyper.location,
            h.mu_hyper.location_variance,
            h.mu_hyper.variance_shape,
            h.mu_hyper.variance_rate,
            h.beta_hyper.location,
            h.beta_hyper.location_variance,
            h.beta_hyper.variance_shape,
            h.beta_hyper.variance_rate,
            h.sigma2_prior.shape,
            h.sigma2_prior.rate,
        ],
    )?;
    for g in 0..d {
        write_f64s(
            &mut w,
            &[
                h.lambda0_prior[g].mean,
                h.lambda0_prior[g].variance,
                h.lambda1_prior[g].mean,
                h.lambda1_prior[g].variance,
            ],
        )?;
    }

    let st = &chain.state;
    let snap = Snapshot::of(st, 0, 0.0);
    write_params(&mut w, &snap)?;
    for j in 0..m {
        write_matrix(&mut w, &st.theta[j])?;
        for &x in st.latent_counts[j].as_slice().expect("contiguous") {
            w.write_u32::<LittleEndian>(x)?;
        }
        for &x in st.dropped[j].as_slice().expect("contiguous") {
            w.write_u8(u8::from(x))?;
        }
    }

    for j in 0..m {
        write_matrix(&mut w, &chain.adapt.theta_log_scale[j])?;
    }
    write_f64s(&mut w, &chain.adapt.xi_log_scale)?;
    w.write_u8(u8::from(chain.adapt.enabled))?;

    for c in [
        chain.counters.theta,
        chain.counters.xi,
        chain.counters.lambda_fallback,
    ] {
        w.write_u64::<LittleEndian>(c.proposals)?;
        w.write_u64::<LittleEndian>(c.accepted)?;
    }
    w.write_u64::<LittleEndian>(chain.counters.lambda_flagged)?;

    w.write_u64::<LittleEndian>(chain.snapshots.len() as u64)?;
    for s in &chain.snapshots {
        w.write_u64::<LittleEndian>(s.iteration)?;
        w.write_f64::<LittleEndian>(s.log_posterior)?;
        write_params(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

/// Deserialize a chain written by [`write_chain`].
pub fn read_chain(path: &Path) -> Result<Chain> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let seed = r.read_u64::<LittleEndian>()?;
    let n_iter = r.read_u64::<LittleEndian>()?;
    let thin = r.read_u64::<LittleEndian>()?;
    let completed = r.read_u64::<LittleEndian>()?;
    if completed > n_iter {
        return Err(corrupt("completed iterations exceed the configured total"));
    }

    let d = r.read_u32::<LittleEndian>()? as usize;
    let m = r.read_u32::<LittleEndian>()? as usize;
    let k = r.read_u32::<LittleEndian>()? as usize;
    let l = r.read_u32::<LittleEndian>()? as usize;
    if d == 0 || m == 0 || k < 2 || l < 2 {
        return Err(corrupt("implausible dimensions"));
    }
    let mut cells = Vec::with_capacity(m);
    let mut total_elems: u64 = 0;
    for _ in 0..m {
        let n = r.read_u32::<LittleEndian>()? as usize;
        total_elems += (d as u64) * (n as u64);
        if n == 0 || total_elems > MAX_ELEMENTS {
            return Err(corrupt("implausible cell counts"));
        }
        cells.push(n);
    }
    let mut gene_ids = Vec::with_capacity(d);
    for _ in 0..d {
        gene_ids.push(read_string(&mut r)?);
    }
    let mut subject_ids = Vec::with_capacity(m);
    for _ in 0..m {
        subject_ids.push(read_string(&mut r)?);
    }
    let mut subjects = Vec::with_capacity(m);
    for j in 0..m {
        let n = cells[j];
        let mut counts = Vec::with_capacity(d * n);
        for _ in 0..d * n {
            counts.push(r.read_u32::<LittleEndian>()?);
        }
        let counts =
            Array2::from_shape_vec((d, n), counts).map_err(|e| corrupt(e.to_string()))?;
        let scaling_factors = read_f64s(&mut r, n)?;
        let mut library_sizes = Vec::with_capacity(n);
        for _ in 0..n {
            library_sizes.push(r.read_u64::<LittleEndian>()?);
        }
        subjects.push(SubjectBlock {
            subject_id: subject_ids[j].clone(),
            counts,
            scaling_factors,
            library_sizes,
        });
    }
    let data = CountData::from_raw_parts(gene_ids, subjects)?;

    let hs = read_f64s(&mut r, 14)?;
    let mut lambda0_prior = Vec::with_capacity(d);
    let mut lambda1_prior = Vec::with_capacity(d);
    for _ in 0..d {
        let v = read_f64s(&mut r, 4)?;
        lambda0_prior.push(GenePrior { mean: v[0], variance: v[1] });
        lambda1_prior.push(GenePrior { mean: v[2], variance: v[3] });
    }
    let hyper = Hyperparameters {
        gamma: hs[0],
        nu: hs[1],
        max_cell_types: k,
        max_subgroups: l,
        alpha_prior: GammaPrior { shape: hs[2], rate: hs[3] },
        mu_hyper: EffectHyperPrior {
            location: hs[4],
            location_variance: hs[5],
            variance_shape: hs[6],
            variance_rate: hs[7],
        },
        beta_hyper: EffectHyperPrior {
            location: hs[8],
            location_variance: hs[9],
            variance_shape: hs[10],
            variance_rate: hs[11],
        },
        sigma2_prior: InvGammaPrior { shape: hs[12], rate: hs[13] },
        lambda0_prior,
        lambda1_prior,
    };
    hyper.validate().map_err(|e| corrupt(format!("stored hyperparameters invalid: {e}")))?;

    let dims = Dims { d, k, l, cells: cells.clone() };
    let params = read_params(&mut r, &dims, 0, 0.0)?;
    let mut theta = Vec::with_capacity(m);
    let mut latent_counts = Vec::with_capacity(m);
    let mut dropped = Vec::with_capacity(m);
    for &n in &cells {
        theta.push(read_matrix(&mut r, d, n)?);
        let mut y = Vec::with_capacity(d * n);
        for _ in 0..d * n {
            y.push(r.read_u32::<LittleEndian>()?);
        }
        latent_counts
            .push(Array2::from_shape_vec((d, n), y).map_err(|e| corrupt(e.to_string()))?);
        let mut z = Vec::with_capacity(d * n);
        for _ in 0..d * n {
            z.push(r.read_u8()? != 0);
        }
        dropped.push(Array2::from_shape_vec((d, n), z).map_err(|e| corrupt(e.to_string()))?);
    }
    let state = ChainState {
        xi: params.xi,
        alpha: params.alpha,
        phi: params.phi,
        pi: params.pi,
        s_labels: params.s_labels,
        c_labels: params.c_labels,
        mu: params.mu,
        beta: params.beta,
        sigma2: params.sigma2,
        lambda0: params.lambda0,
        lambda1: params.lambda1,
        eta_mu: params.eta_mu,
        tau2_mu: params.tau2_mu,
        eta_beta: params.eta_beta,
        tau2_beta: params.tau2_beta,
        theta,
        latent_counts,
        dropped,
    };

    let mut theta_log_scale = Vec::with_capacity(m);
    for &n in &cells {
        theta_log_scale.push(read_matrix(&mut r, d, n)?);
    }
    let xi_log_scale = read_f64s(&mut r, k - 1)?;
    let enabled = r.read_u8()? != 0;
    let adapt = Adaptation { theta_log_scale, xi_log_scale, enabled };

    let read_counter = |r: &mut BufReader<File>| -> Result<super::AcceptanceCounter> {
        Ok(super::AcceptanceCounter {
            proposals: r.read_u64::<LittleEndian>()?,
            accepted: r.read_u64::<LittleEndian>()?,
        })
    };
    let counters = BlockCounters {
        theta: read_counter(&mut r)?,
        xi: read_counter(&mut r)?,
        lambda_fallback: read_counter(&mut r)?,
        lambda_flagged: r.read_u64::<LittleEndian>()?,
    };

    let n_snap = r.read_u64::<LittleEndian>()? as usize;
    if n_snap as u64 > n_iter {
        return Err(corrupt("more snapshots than iterations"));
    }
    let mut snapshots = Vec::with_capacity(n_snap);
    for _ in 0..n_snap {
        let iteration = r.read_u64::<LittleEndian>()?;
        let log_posterior = r.read_f64::<LittleEndian>()?;
        snapshots.push(read_params(&mut r, &dims, iteration, log_posterior)?);
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after checkpoint payload"));
    }

    Ok(Chain {
        data,
        hyper,
        config: SamplerConfig { n_iter, thin, seed },
        state,
        adapt,
        counters,
        completed,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::tests::tiny_data;

    #[test]
    fn round_trip_preserves_everything_and_resume_matches() {
        let data = tiny_data();
        let mut hyper = Hyperparameters::default_for(3);
        hyper.max_cell_types = 3;
        hyper.max_subgroups = 2;
        let cfg = SamplerConfig { n_iter: 14, thin: 2, seed: 5 };

        let mut chain = Chain::new(&data, &hyper, cfg).unwrap();
        chain.advance(6).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        write_chain(&chain, &path).unwrap();
        let mut restored = read_chain(&path).unwrap();
        assert_eq!(restored, chain);

        chain.run_to_end().unwrap();
        restored.run_to_end().unwrap();
        assert_eq!(restored.finish().unwrap(), chain.finish().unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(read_chain(&path), Err(Error::Checkpoint(_))));
    }
}
