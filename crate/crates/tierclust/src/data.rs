//! Loading, validation, QC filtering, and library-size normalisation of
//! multi-subject count matrices.
//!
//! Two on-disk layouts are supported:
//!
//! * dense CSV — header row of cell ids (first column header arbitrary),
//!   first column gene ids, integer body;
//! * Matrix Market coordinate integer format, plus a sidecar
//!   `<stem>.genes.txt` with one gene id per line (columns are addressed in
//!   the subject map by their 1-based index rendered in decimal).
//!
//! Both need a two-column cell-to-subject map CSV (optional `cell,subject`
//! header). All readers reject NaN, negative, or fractional entries.
//!
//! Everything here is pure over immutable inputs; no shared mutable state.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// One subject's slice of the data: a genes-by-cells count matrix plus the
/// per-cell library sizes and median-normalised scaling factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub subject_id: String,
    /// D x n_j counts.
    pub counts: Array2<u32>,
    /// Library size / within-subject median library size, per cell.
    pub scaling_factors: Vec<f64>,
    /// Column sums of `counts`.
    pub library_sizes: Vec<u64>,
}

impl SubjectBlock {
    pub fn n_cells(&self) -> usize {
        self.counts.ncols()
    }
}

/// Multi-subject count data with a shared gene axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CountData {
    pub subjects: Vec<SubjectBlock>,
    pub gene_ids: Vec<String>,
}

/// Supported matrix layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFormat {
    Csv,
    MatrixMarket,
}

impl CountData {
    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_cells(&self) -> usize {
        self.subjects.iter().map(SubjectBlock::n_cells).sum()
    }

    pub fn cells_per_subject(&self) -> Vec<usize> {
        self.subjects.iter().map(SubjectBlock::n_cells).collect()
    }

    /// Build blocks from per-subject matrices, recomputing library sizes and
    /// scaling factors.
    pub fn with_recomputed_factors(
        gene_ids: Vec<String>,
        per_subject: Vec<(String, Array2<u32>)>,
    ) -> Result<Self> {
        if gene_ids.is_empty() {
            return Err(Error::Validation("need at least one gene".into()));
        }
        if per_subject.is_empty() {
            return Err(Error::Validation("need at least one subject".into()));
        }
        let d = gene_ids.len();
        let mut subjects = Vec::with_capacity(per_subject.len());
        for (subject_id, counts) in per_subject {
            if counts.nrows() != d {
                return Err(Error::Shape(format!(
                    "subject {subject_id} has {} gene rows, expected {d}",
                    counts.nrows()
                )));
            }
            if counts.ncols() == 0 {
                return Err(Error::Validation(format!("subject {subject_id} has no cells")));
            }
            let library_sizes: Vec<u64> = (0..counts.ncols())
                .map(|i| counts.column(i).iter().map(|&v| v as u64).sum())
                .collect();
            let scaling = scaling_factors(&library_sizes)?;
            subjects.push(SubjectBlock {
                subject_id,
                counts,
                scaling_factors: scaling,
                library_sizes,
            });
        }
        Ok(Self { subjects, gene_ids })
    }

    /// Trusted constructor for simulated data with design-time scaling
    /// factors; checks shapes only, not the library-size identities.
    pub fn from_raw_parts(gene_ids: Vec<String>, subjects: Vec<SubjectBlock>) -> Result<Self> {
        let d = gene_ids.len();
        if d == 0 || subjects.is_empty() {
            return Err(Error::Validation("need at least one gene and one subject".into()));
        }
        for s in &subjects {
            if s.counts.nrows() != d {
                return Err(Error::Shape(format!(
                    "subject {} has {} gene rows, expected {d}",
                    s.subject_id,
                    s.counts.nrows()
                )));
            }
            let n = s.counts.ncols();
            if n == 0 || s.scaling_factors.len() != n || s.library_sizes.len() != n {
                return Err(Error::Shape(format!(
                    "subject {} has inconsistent per-cell vectors",
                    s.subject_id
                )));
            }
        }
        Ok(Self { subjects, gene_ids })
    }

    /// Check the stored library sizes and scaling factors against the counts.
    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            for (i, &lib) in s.library_sizes.iter().enumerate() {
                let col: u64 = s.counts.column(i).iter().map(|&v| v as u64).sum();
                if col != lib {
                    return Err(Error::Validation(format!(
                        "subject {} cell {i}: stored library size {lib} != column sum {col}",
                        s.subject_id
                    )));
                }
            }
            let recomputed = scaling_factors(&s.library_sizes)?;
            if recomputed != s.scaling_factors {
                return Err(Error::Validation(format!(
                    "subject {}: stored scaling factors do not match recomputation",
                    s.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Median-normalised scaling factors: each library size divided by the
/// median library size (even-length median = mean of the two central order
/// statistics).
pub fn scaling_factors(library_sizes: &[u64]) -> Result<Vec<f64>> {
    if library_sizes.is_empty() {
        return Err(Error::Validation("no cells to scale".into()));
    }
    let mut sorted = library_sizes.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    };
    if median <= 0.0 {
        return Err(Error::DegenerateMedian);
    }
    Ok(library_sizes.iter().map(|&l| l as f64 / median).collect())
}

// ---------------------------------------------------------------------------
// QC filtering
// ---------------------------------------------------------------------------

/// Remove high-zero cells, then high-zero genes (over the remaining cells),
/// then under-populated subjects — in exactly that order — and recompute
/// library sizes and scaling factors on the survivors.
pub fn filter_qc(
    data: &CountData,
    max_cell_zero_prop: f64,
    max_gene_zero_prop: f64,
    min_cells_per_subject: usize,
) -> Result<CountData> {
    for (name, v) in [
        ("max_cell_zero_prop", max_cell_zero_prop),
        ("max_gene_zero_prop", max_gene_zero_prop),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if min_cells_per_subject < 1 {
        return Err(Error::Validation("min_cells_per_subject must be at least 1".into()));
    }

    let d = data.n_genes();

    // Pass 1: cells.
    let mut kept_cells: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut any_cell = false;
    for (j, s) in data.subjects.iter().enumerate() {
        let mut keep = Vec::new();
        for i in 0..s.n_cells() {
            let zeros = s.counts.column(i).iter().filter(|&&v| v == 0).count();
            if zeros as f64 / d as f64 <= max_cell_zero_prop {
                keep.push(i);
            }
        }
        any_cell |= !keep.is_empty();
        kept_cells.push((j, keep));
    }
    if !any_cell {
        return Err(Error::EmptyResult("cell filtering removed every cell".into()));
    }

    // Pass 2: genes, zero proportions over the remaining cells of all subjects.
    let remaining: usize = kept_cells.iter().map(|(_, k)| k.len()).sum();
    let mut gene_zeros = vec![0usize; d];
    for (j, keep) in &kept_cells {
        let counts = &data.subjects[*j].counts;
        for &i in keep {
            for g in 0..d {
                if counts[[g, i]] == 0 {
                    gene_zeros[g] += 1;
                }
            }
        }
    }
    let kept_genes: Vec<usize> = (0..d)
        .filter(|&g| gene_zeros[g] as f64 / remaining as f64 <= max_gene_zero_prop)
        .collect();
    if kept_genes.is_empty() {
        return Err(Error::EmptyResult("gene filtering removed every gene".into()));
    }

    // Pass 3: subjects.
    let mut per_subject = Vec::new();
    for (j, keep) in &kept_cells {
        if keep.len() < min_cells_per_subject {
            continue;
        }
        let src = &data.subjects[*j];
        let mut m = Array2::<u32>::zeros((kept_genes.len(), keep.len()));
        for (gi, &g) in kept_genes.iter().enumerate() {
            for (ci, &i) in keep.iter().enumerate() {
                m[[gi, ci]] = src.counts[[g, i]];
            }
        }
        per_subject.push((src.subject_id.clone(), m));
    }
    if per_subject.is_empty() {
        return Err(Error::EmptyResult("subject filtering removed every subject".into()));
    }

    let gene_ids = kept_genes.iter().map(|&g| data.gene_ids[g].clone()).collect();
    CountData::with_recomputed_factors(gene_ids, per_subject)
}

// ---------------------------------------------------------------------------
// Subject map
// ---------------------------------------------------------------------------

fn read_subject_map(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx as u64 + 1,
            msg: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx as u64 + 1,
                msg: format!("expected two columns (cell, subject), got {}", rec.len()),
            });
        }
        let cell = rec[0].trim().to_string();
        let subject = rec[1].trim().to_string();
        if idx == 0 && cell.eq_ignore_ascii_case("cell") && subject.eq_ignore_ascii_case("subject")
        {
            continue; // header
        }
        if cell.is_empty() || subject.is_empty() {
            return Err(Error::Mapping(format!(
                "empty cell or subject id at line {} of {}",
                idx + 1,
                path.display()
            )));
        }
        if seen.insert(cell.clone(), subject.clone()).is_some() {
            return Err(Error::Mapping(format!("cell {cell} mapped more than once")));
        }
        out.push((cell, subject));
    }
    if out.is_empty() {
        return Err(Error::Mapping(format!("subject map {} is empty", path.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Load a count matrix and group its columns into subject blocks.
///
/// Subjects appear in map order (first appearance); gene and within-subject
/// cell order follow the input file.
pub fn load_counts(path: &Path, format: CountFormat, subject_map: &Path) -> Result<CountData> {
    let map = read_subject_map(subject_map)?;
    let (gene_ids, cell_ids, matrix) = match format {
        CountFormat::Csv => read_dense_csv(path)?,
        CountFormat::MatrixMarket => read_matrix_market(path)?,
    };

    let assignment: HashMap<&str, &str> =
        map.iter().map(|(c, s)| (c.as_str(), s.as_str())).collect();
    for cell in &cell_ids {
        if !assignment.contains_key(cell.as_str()) {
            return Err(Error::Mapping(format!("cell {cell} has no subject assignment")));
        }
    }
    let present: std::collections::HashSet<&str> = cell_ids.iter().map(String::as_str).collect();
    for (cell, _) in &map {
        if !present.contains(cell.as_str()) {
            return Err(Error::Mapping(format!(
                "subject map names cell {cell}, which is not in the matrix"
            )));
        }
    }

    // Subject order = first appearance in the map.
    let mut subject_order: Vec<&str> = Vec::new();
    for (_, s) in &map {
        if !subject_order.contains(&s.as_str()) {
            subject_order.push(s);
        }
    }

    let d = gene_ids.len();
    let mut per_subject = Vec::new();
    for subject in subject_order {
        let cols: Vec<usize> = cell_ids
            .iter()
            .enumerate()
            .filter(|(_, c)| assignment[c.as_str()] == subject)
            .map(|(i, _)| i)
            .collect();
        let mut m = Array2::<u32>::zeros((d, cols.len()));
        for (ci, &col) in cols.iter().enumerate() {
            for g in 0..d {
                m[[g, ci]] = matrix[[g, col]];
            }
        }
        per_subject.push((subject.to_string(), m));
    }
    CountData::with_recomputed_factors(gene_ids, per_subject)
}

fn parse_count(field: &str, path: &Path, line: u64) -> Result<u32> {
    let t = field.trim();
    match t.parse::<u64>() {
        Ok(v) if v <= u32::MAX as u64 => Ok(v as u32),
        Ok(v) => Err(Error::Validation(format!(
            "count {v} at line {line} of {} exceeds the supported range",
            path.display()
        ))),
        Err(_) => Err(Error::Validation(format!(
            "entry {t:?} at line {line} of {} is not a nonnegative integer",
            path.display()
        ))),
    }
}

fn read_dense_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<u32>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "empty matrix file".into(),
            })
        }
    };
    if header.len() < 2 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "header must name at least one cell".into(),
        });
    }
    let cell_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();

    let mut gene_ids = Vec::new();
    let mut rows: Vec<u32> = Vec::new();
    for (idx, rec) in records.enumerate() {
        let line = idx as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != cell_ids.len() + 1 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("expected {} fields, got {}", cell_ids.len() + 1, rec.len()),
            });
        }
        gene_ids.push(rec[0].trim().to_string());
        for field in rec.iter().skip(1) {
            rows.push(parse_count(field, path, line)?);
        }
    }
    if gene_ids.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 2,
            msg: "no gene rows".into(),
        });
    }
    let matrix = Array2::from_shape_vec((gene_ids.len(), cell_ids.len()), rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((gene_ids, cell_ids, matrix))
}

fn genes_sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("genes.txt")
}

fn read_matrix_market(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<u32>)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };

    let mut lines = reader.lines().enumerate();
    let (_, banner) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty matrix file".into()))?;
    let banner = banner?;
    let lowered = banner.to_ascii_lowercase();
    if !lowered.starts_with("%%matrixmarket") {
        return Err(parse_err(1, "missing MatrixMarket banner".into()));
    }
    let fields: Vec<&str> = lowered.split_whitespace().collect();
    if fields.len() < 5
        || fields[1] != "matrix"
        || fields[2] != "coordinate"
        || fields[3] != "integer"
        || fields[4] != "general"
    {
        return Err(parse_err(
            1,
            "expected 'matrix coordinate integer general'".into(),
        ));
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut matrix = Array2::<u32>::zeros((0, 0));
    let mut seen = std::collections::HashSet::new();
    let mut n_entries = 0usize;
    for (idx, line) in lines {
        let lineno = idx as u64 + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match dims {
            None => {
                if parts.len() != 3 {
                    return Err(parse_err(lineno, "size line must have three fields".into()));
                }
                let d: usize = parts[0]
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad row count".into()))?;
                let n: usize = parts[1]
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad column count".into()))?;
                let nnz: usize = parts[2]
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad entry count".into()))?;
                if d == 0 || n == 0 {
                    return Err(parse_err(lineno, "matrix dimensions must be positive".into()));
                }
                matrix = Array2::zeros((d, n));
                dims = Some((d, n, nnz));
            }
            Some((d, n, _)) => {
                if parts.len() != 3 {
                    return Err(parse_err(lineno, "entry must have three fields".into()));
                }
                let g: usize = parts[0]
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad row index".into()))?;
                let c: usize = parts[1]
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad column index".into()))?;
                if g == 0 || g > d || c == 0 || c > n {
                    return Err(parse_err(lineno, format!("index ({g}, {c}) out of range")));
                }
                let v = parse_count(parts[2], path, lineno)?;
                if !seen.insert((g, c)) {
                    return Err(parse_err(lineno, format!("duplicate entry ({g}, {c})")));
                }
                matrix[[g - 1, c - 1]] = v;
                n_entries += 1;
            }
        }
    }
    let (d, n, nnz) = dims.ok_or_else(|| parse_err(2, "missing size line".into()))?;
    if n_entries != nnz {
        return Err(parse_err(
            0,
            format!("size line promised {nnz} entries, found {n_entries}"),
        ));
    }

    let sidecar = genes_sidecar(path);
    let gene_file = File::open(&sidecar).map_err(|e| {
        Error::Parse {
            path: sidecar.display().to_string(),
            line: 0,
            msg: format!("gene id sidecar required for matrix-market input: {e}"),
        }
    })?;
    let gene_ids: Vec<String> = BufReader::new(gene_file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if gene_ids.len() != d {
        return Err(Error::Parse {
            path: sidecar.display().to_string(),
            line: 0,
            msg: format!("expected {d} gene ids, found {}", gene_ids.len()),
        });
    }
    let cell_ids: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
    Ok((gene_ids, cell_ids, matrix))
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Write `data` in the given format plus a subject map alongside; the CSV
/// writer invents stable cell ids (`c1..cN`), the Matrix Market writer
/// addresses cells by column index and emits the gene-id sidecar.
pub fn write_counts(
    data: &CountData,
    path: &Path,
    format: CountFormat,
    subject_map: &Path,
) -> Result<()> {
    let n = data.total_cells();
    let cell_ids: Vec<String> = match format {
        CountFormat::Csv => (1..=n).map(|i| format!("c{i}")).collect(),
        CountFormat::MatrixMarket => (1..=n).map(|i| i.to_string()).collect(),
    };

    // Subject map, column order = subject blocks in order.
    {
        let mut w = csv::Writer::from_path(subject_map).map_err(io_of_csv)?;
        w.write_record(["cell", "subject"]).map_err(io_of_csv)?;
        let mut idx = 0usize;
        for s in &data.subjects {
            for _ in 0..s.n_cells() {
                w.write_record([cell_ids[idx].as_str(), s.subject_id.as_str()])
                    .map_err(io_of_csv)?;
                idx += 1;
            }
        }
        w.flush()?;
    }

    match format {
        CountFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(io_of_csv)?;
            let mut header = vec!["gene".to_string()];
            header.extend(cell_ids.iter().cloned());
            w.write_record(&header).map_err(io_of_csv)?;
            for (g, gid) in data.gene_ids.iter().enumerate() {
                let mut row = vec![gid.clone()];
                for s in &data.subjects {
                    for i in 0..s.n_cells() {
                        row.push(s.counts[[g, i]].to_string());
                    }
                }
                w.write_record(&row).map_err(io_of_csv)?;
            }
            w.flush()?;
        }
        CountFormat::MatrixMarket => {
            let d = data.n_genes();
            let mut nnz = 0usize;
            for s in &data.subjects {
                nnz += s.counts.iter().filter(|&&v| v > 0).count();
            }
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "%%MatrixMarket matrix coordinate integer general")?;
            writeln!(w, "{d} {n} {nnz}")?;
            let mut col = 0usize;
            for s in &data.subjects {
                for i in 0..s.n_cells() {
                    col += 1;
                    for g in 0..d {
                        let v = s.counts[[g, i]];
                        if v > 0 {
                            writeln!(w, "{} {col} {v}", g + 1)?;
                        }
                    }
                }
            }
            w.flush()?;
            let mut gw = BufWriter::new(File::create(genes_sidecar(path))?);
            for gid in &data.gene_ids {
                writeln!(gw, "{gid}")?;
            }
            gw.flush()?;
        }
    }
    Ok(())
}

fn io_of_csv(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn scaling_factor_examples() {
        assert_eq!(scaling_factors(&[10, 20, 40]).unwrap(), vec![0.5, 1.0, 2.0]);
        assert_eq!(scaling_factors(&[5, 5, 5, 5]).unwrap(), vec![1.0; 4]);
        // Even length: median = (2 + 3) / 2 = 2.5.
        assert_eq!(
            scaling_factors(&[1, 2, 3, 100]).unwrap(),
            vec![0.4, 0.8, 1.2, 40.0]
        );
        assert!(matches!(
            scaling_factors(&[0, 0, 0]),
            Err(Error::DegenerateMedian)
        ));
    }

    #[test]
    fn load_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let counts = write_tmp(&dir, "m.csv", "gene,c1,c2,c3\ng1,1,0,5\ng2,2,3,0\n");
        let map = write_tmp(&dir, "map.csv", "cell,subject\nc1,A\nc2,A\nc3,B\n");
        let data = load_counts(&counts, CountFormat::Csv, &map).unwrap();
        assert_eq!(data.n_subjects(), 2);
        assert_eq!(data.n_genes(), 2);
        assert_eq!(data.cells_per_subject(), vec![2, 1]);
        assert_eq!(data.gene_ids, vec!["g1", "g2"]);
        assert_eq!(data.subjects[0].subject_id, "A");
        assert_eq!(data.subjects[0].counts[[0, 1]], 0);
        assert_eq!(data.subjects[1].counts[[0, 0]], 5);
        assert_eq!(data.subjects[0].library_sizes, vec![3, 3]);
        assert_eq!(data.subjects[1].scaling_factors, vec![1.0]);
        data.validate().unwrap();
    }

    #[test]
    fn empty_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let map = write_tmp(&dir, "map.csv", "c1,A\n");
        let empty = write_tmp(&dir, "e.csv", "");
        assert!(matches!(
            load_counts(&empty, CountFormat::Csv, &map),
            Err(Error::Parse { .. })
        ));
        let headonly = write_tmp(&dir, "h.csv", "gene,c1\n");
        assert!(matches!(
            load_counts(&headonly, CountFormat::Csv, &map),
            Err(Error::Parse { line: 2, .. })
        ));
        let ragged = write_tmp(&dir, "r.csv", "gene,c1\ng1,1,7\n");
        assert!(matches!(
            load_counts(&ragged, CountFormat::Csv, &map),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn rejects_bad_entries() {
        let dir = tempfile::tempdir().unwrap();
        let map = write_tmp(&dir, "map.csv", "c1,A\n");
        for bad in ["-1", "1.5", "NaN", "1e3", ""] {
            let counts = write_tmp(&dir, "m.csv", &format!("gene,c1\ng1,{bad}\n"));
            let err = load_counts(&counts, CountFormat::Csv, &map).unwrap_err();
            assert!(
                matches!(err, Error::Validation(_)),
                "{bad:?} gave {err:?}"
            );
        }
    }

    #[test]
    fn mapping_errors() {
        let dir = tempfile::tempdir().unwrap();
        let counts = write_tmp(&dir, "m.csv", "gene,c1,c2\ng1,1,2\n");
        let missing = write_tmp(&dir, "map1.csv", "c1,A\n");
        assert!(matches!(
            load_counts(&counts, CountFormat::Csv, &missing),
            Err(Error::Mapping(_))
        ));
        let extra = write_tmp(&dir, "map2.csv", "c1,A\nc2,A\nc9,B\n");
        assert!(matches!(
            load_counts(&counts, CountFormat::Csv, &extra),
            Err(Error::Mapping(_))
        ));
        let dup = write_tmp(&dir, "map3.csv", "c1,A\nc1,B\nc2,A\n");
        assert!(matches!(
            load_counts(&counts, CountFormat::Csv, &dup),
            Err(Error::Mapping(_))
        ));
    }

    #[test]
    fn matrix_market_matches_dense_csv() {
        let dir = tempfile::tempdir().unwrap();
        // Explicit zero entry at (2, 1).
        let mm = write_tmp(
            &dir,
            "m.mtx",
            "%%MatrixMarket matrix coordinate integer general\n% comment\n2 3 4\n1 1 1\n2 1 0\n1 3 5\n2 2 3\n",
        );
        write_tmp(&dir, "m.genes.txt", "g1\ng2\n");
        let map = write_tmp(&dir, "map.csv", "cell,subject\n1,A\n2,A\n3,B\n");
        let from_mm = load_counts(&mm, CountFormat::MatrixMarket, &map).unwrap();

        let csvf = write_tmp(&dir, "m.csv", "gene,1,2,3\ng1,1,0,5\ng2,0,3,0\n");
        let from_csv = load_counts(&csvf, CountFormat::Csv, &map).unwrap();
        assert_eq!(from_mm, from_csv);
    }

    #[test]
    fn matrix_market_rejects_duplicates_and_range() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(&dir, "m.genes.txt", "g1\ng2\n");
        let map = write_tmp(&dir, "map.csv", "1,A\n2,A\n");
        let dup = write_tmp(
            &dir,
            "m.mtx",
            "%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 1\n1 1 2\n",
        );
        assert!(matches!(
            load_counts(&dup, CountFormat::MatrixMarket, &map),
            Err(Error::Parse { .. })
        ));
        let oob = write_tmp(
            &dir,
            "m.mtx",
            "%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 1\n",
        );
        assert!(matches!(
            load_counts(&oob, CountFormat::MatrixMarket, &map),
            Err(Error::Parse { .. })
        ));
    }

    fn toy_data() -> CountData {
        // Subject A: 6 cells, subject B: 4 cells, 5 genes.
        let a = Array2::from_shape_vec(
            (5, 6),
            vec![
                4, 3, 5, 2, 6, 1, //
                0, 2, 1, 3, 2, 2, //
                5, 0, 2, 4, 1, 3, //
                0, 0, 0, 0, 0, 1, // mostly zero gene
                2, 1, 3, 2, 4, 2,
            ],
        )
        .unwrap();
        let b = Array2::from_shape_vec(
            (5, 4),
            vec![
                3, 2, 0, 4, //
                1, 2, 0, 3, //
                2, 1, 0, 2, //
                0, 0, 0, 0, //
                3, 1, 0, 5,
            ],
        )
        .unwrap();
        CountData::with_recomputed_factors(
            vec!["g1".into(), "g2".into(), "g3".into(), "g4".into(), "g5".into()],
            vec![("A".into(), a), ("B".into(), b)],
        )
        .unwrap()
    }

    #[test]
    fn qc_order_cells_then_genes_then_subjects() {
        let data = toy_data();
        // Cell 3 of subject B is all zeros (zero prop 1.0 > 0.8), drops.
        // Gene g4 then has zero prop 8/9 > 0.3, drops.
        // Subject B keeps 3 cells < 5, drops.
        let out = filter_qc(&data, 0.8, 0.3, 5).unwrap();
        assert_eq!(out.n_subjects(), 1);
        assert_eq!(out.subjects[0].subject_id, "A");
        assert_eq!(out.subjects[0].n_cells(), 6);
        assert_eq!(out.gene_ids, vec!["g1", "g2", "g3", "g5"]);
        out.validate().unwrap();
    }

    #[test]
    fn qc_order_matters() {
        // g1: (0,1,1); g2: (1,1,1). Cells first: cell 1 has zero prop 0.5 >
        // 0.4 and drops, then both genes survive. Genes first would drop g1
        // (zero prop 1/3 > 0.3) and keep all three cells.
        let m = Array2::from_shape_vec((2, 3), vec![0, 1, 1, 1, 1, 1]).unwrap();
        let data =
            CountData::with_recomputed_factors(vec!["g1".into(), "g2".into()], vec![("A".into(), m)])
                .unwrap();
        let out = filter_qc(&data, 0.4, 0.3, 1).unwrap();
        assert_eq!(out.n_genes(), 2, "cells-first keeps both genes");
        assert_eq!(out.subjects[0].n_cells(), 2);
        // A genes-first result would have been 1 gene x 3 cells.
    }

    #[test]
    fn qc_noop_thresholds() {
        let data = toy_data();
        let out = filter_qc(&data, 1.0, 1.0, 1).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn qc_all_zero_matrix_errors() {
        let m = Array2::<u32>::zeros((3, 3));
        let data = CountData {
            subjects: vec![SubjectBlock {
                subject_id: "A".into(),
                counts: m,
                scaling_factors: vec![0.0; 3],
                library_sizes: vec![0; 3],
            }],
            gene_ids: vec!["g1".into(), "g2".into(), "g3".into()],
        };
        assert!(matches!(
            filter_qc(&data, 0.5, 0.5, 1),
            Err(Error::EmptyResult(_))
        ));
    }

    #[test]
    fn qc_idempotent_on_realistic_data() {
        let data = toy_data();
        let once = filter_qc(&data, 0.8, 0.5, 2).unwrap();
        let twice = filter_qc(&once, 0.8, 0.5, 2).unwrap();
        assert_eq!(once, twice);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trips_both_formats(
            d in 1usize..5,
            cells in prop::collection::vec(1usize..4, 1..4),
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gene_ids: Vec<String> = (0..d).map(|g| format!("g{g}")).collect();
            let mut per_subject = Vec::new();
            for (j, &n) in cells.iter().enumerate() {
                let mut m = Array2::<u32>::zeros((d, n));
                for g in 0..d {
                    for i in 0..n {
                        m[[g, i]] = rng.random_range(0..20);
                    }
                }
                for i in 0..n {
                    m[[0, i]] += 1; // keep every library size positive
                }
                per_subject.push((format!("s{j}"), m));
            }
            let data = CountData::with_recomputed_factors(gene_ids, per_subject).unwrap();

            let dir = tempfile::tempdir().unwrap();
            for (format, name) in [(CountFormat::Csv, "m.csv"), (CountFormat::MatrixMarket, "m.mtx")] {
                let path = dir.path().join(name);
                let map = dir.path().join(format!("{name}.map.csv"));
                write_counts(&data, &path, format, &map).unwrap();
                let back = load_counts(&path, format, &map).unwrap();
                prop_assert_eq!(&back, &data);
            }
        }
    }
}
