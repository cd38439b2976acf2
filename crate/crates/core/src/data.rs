//! Datasets and their partition across devices.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Batch, Matrix};

/// Noise scale of the synthetic Gaussian blobs.
pub const SYNTHETIC_NOISE: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                what: "dataset labels",
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.inputs.clone(), self.labels.clone()).expect("dataset is non-empty")
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// Class-conditional Gaussian blobs with fixed class means.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    means: Matrix,
    sigma: f64,
}

impl SyntheticTask {
    /// Draws `n_classes` means uniformly from `[-1, 1]^dim`.
    pub fn new<R: Rng + ?Sized>(dim: usize, n_classes: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 || n_classes == 0 {
            return Err(Error::InvalidArgument(
                "synthetic task needs positive dimension and class count".into(),
            ));
        }
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("noise scale {sigma} must be >= 0")));
        }
        let data = (0..dim * n_classes)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Ok(SyntheticTask {
            means: Matrix::new(n_classes, dim, data)?,
            sigma,
        })
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Samples `n` points. Labels are uniform except that each class is
    /// guaranteed at least one point.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let k = self.means.rows();
        if n < k {
            return Err(Error::InvalidArgument(format!(
                "need at least {k} points for {k} classes, got {n}"
            )));
        }
        let mut labels: Vec<usize> = (0..k).collect();
        labels.extend((k..n).map(|_| rng.random_range(0..k)));
        labels.shuffle(rng);

        let d = self.means.cols();
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for &mu in self.means.row(y) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + self.sigma * z);
            }
        }
        Dataset::new(Matrix::new(n, d, data)?, labels, k)
    }
}

pub fn gen_synthetic<R: Rng + ?Sized>(n: usize, d: usize, n_classes: usize, rng: &mut R) -> Result<Dataset> {
    SyntheticTask::new(d, n_classes, SYNTHETIC_NOISE, rng)?.sample(n, rng)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, e.to_string())
}

/// Reads `d` feature columns followed by an integer label column.
///
/// A first line with no numeric fields is taken as a header. The class count
/// is inferred as `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut dim = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, &e))?;
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if dim.is_none() && row.iter().all(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if row.len() < 2 {
            return Err(parse_err(path, line_no, "need at least one feature and a label"));
        }
        let d = row.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {} columns, found {}", expected + 1, row.len()),
                ))
            }
            Some(_) => {}
        }
        for (col, f) in row.iter().take(d).enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                parse_err(path, line_no, format!("column {}: `{f}` is not a number", col + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("column {}: non-finite value", col + 1)));
            }
            data.push(v);
        }
        let label = &row[d];
        let y: usize = label
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("label `{label}` is not a class index")))?;
        labels.push(y);
    }

    let Some(d) = dim else {
        return Err(Error::EmptyDataset);
    };
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(Matrix::new(n, d, data)?, labels, n_classes)
}

/// Like [`load_csv`], but checks labels against a known class count.
pub fn load_csv_with_classes(path: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
    let ds = load_csv(&path)?;
    if ds.n_classes > n_classes {
        return Err(Error::InvalidArgument(format!(
            "{}: label {} out of range for {n_classes} classes",
            path.as_ref().display(),
            ds.n_classes - 1
        )));
    }
    Ok(Dataset { n_classes, ..ds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Capacity {
    Simple,
    Complex,
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capacity::Simple => "simple",
            Capacity::Complex => "complex",
        })
    }
}

/// Per-device shards of a parent dataset plus capacity labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DevicePartition {
    shards: Vec<Vec<usize>>,
    capacity: Vec<Capacity>,
}

impl DevicePartition {
    /// Devices `0..n_simple` are simple, the rest complex.
    pub fn new(shards: Vec<Vec<usize>>, n_simple: usize) -> Result<Self> {
        if n_simple > shards.len() {
            return Err(Error::InvalidArgument(format!(
                "n_simple {n_simple} exceeds {} devices",
                shards.len()
            )));
        }
        if let Some(d) = shards.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("device {d} has an empty shard")));
        }
        let capacity = (0..shards.len())
            .map(|d| if d < n_simple { Capacity::Simple } else { Capacity::Complex })
            .collect();
        Ok(DevicePartition { shards, capacity })
    }

    pub fn n_devices(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, device: usize) -> &[usize] {
        &self.shards[device]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn capacity(&self, device: usize) -> Capacity {
        self.capacity[device]
    }

    pub fn devices_with(&self, cap: Capacity) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_devices()).filter(move |&d| self.capacity[d] == cap)
    }

    /// True when shards are pairwise disjoint and cover `0..n`.
    pub fn is_disjoint_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.shards.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

fn check_devices(n: usize, n_devices: usize) -> Result<()> {
    if n_devices == 0 {
        return Err(Error::InvalidArgument("need at least one device".into()));
    }
    if n < n_devices {
        return Err(Error::InvalidArgument(format!(
            "{n_devices} devices but only {n} data points"
        )));
    }
    Ok(())
}

/// Random permutation cut into contiguous chunks whose sizes differ by at most one.
pub fn split_iid<R: Rng + ?Sized>(
    ds: &Dataset,
    n_devices: usize,
    n_simple: usize,
    rng: &mut R,
) -> Result<DevicePartition> {
    let n = ds.len();
    check_devices(n, n_devices)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (base, extra) = (n / n_devices, n % n_devices);
    let mut shards = Vec::with_capacity(n_devices);
    let mut start = 0;
    for d in 0..n_devices {
        let size = base + usize::from(d < extra);
        shards.push(perm[start..start + size].to_vec());
        start += size;
    }
    DevicePartition::new(shards, n_simple)
}

/// Draws `Dirichlet(alpha * 1)` via normalized gamma variates. If every
/// variate underflows to zero, all mass goes to one uniformly chosen device.
fn dirichlet_weights<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet concentration {alpha}: {e}")))?;
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
    }
    Ok(p)
}

/// Splits `total` into integer counts proportional to `p` (summing to 1) by
/// largest remainder; ties go to the lower index.
pub fn proportional_counts(total: usize, p: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &d in order.iter().take(total.saturating_sub(assigned)) {
        counts[d] += 1;
    }
    counts
}

/// Per-class Dirichlet label skew.
///
/// For every class, device proportions are drawn from `Dirichlet(alpha)`, the
/// class's points are shuffled, and consecutive runs of them go to each device
/// in the amounts given by [`proportional_counts`]. Devices left empty each
/// take one point from the currently largest shard.
pub fn split_dirichlet<R: Rng + ?Sized>(
    ds: &Dataset,
    n_devices: usize,
    n_simple: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<DevicePartition> {
    let n = ds.len();
    check_devices(n, n_devices)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dirichlet concentration must be positive and finite, got {alpha}"
        )));
    }
    let mut by_class = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class {c} has no points")));
    }

    let mut shards = vec![Vec::new(); n_devices];
    for members in &by_class {
        let p = dirichlet_weights(alpha, n_devices, rng)?;
        let mut members = members.clone();
        members.shuffle(rng);
        let mut rest = members.as_slice();
        for (shard, count) in shards.iter_mut().zip(proportional_counts(rest.len(), &p)) {
            let (head, tail) = rest.split_at(count);
            shard.extend_from_slice(head);
            rest = tail;
        }
    }

    for d in 0..n_devices {
        if shards[d].is_empty() {
            let largest = (0..n_devices)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .expect("at least one device");
            let moved = shards[largest].pop().expect("largest shard is non-empty");
            shards[d].push(moved);
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    DevicePartition::new(shards, n_simple)
}

/// Shannon entropy (nats) of a histogram.
pub fn entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum()
}

/// Total-variation distance between two histograms viewed as distributions.
pub fn tv_distance(a: &[usize], b: &[usize]) -> f64 {
    let (ta, tb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / ta - y as f64 / tb).abs())
        .sum::<f64>()
}

/// Mean per-device label entropy.
pub fn mean_device_entropy(ds: &Dataset, part: &DevicePartition) -> f64 {
    part.shards()
        .iter()
        .map(|s| entropy(&ds.label_histogram(s)))
        .sum::<f64>()
        / part.n_devices() as f64
}

/// One line per device: id, capacity, size, label histogram.
pub fn partition_report(ds: &Dataset, part: &DevicePartition) -> String {
    let all: Vec<usize> = (0..ds.len()).collect();
    let global = ds.label_histogram(&all);
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}  {:<8}{:>7}  {:>8}  labels", "device", "capacity", "size", "entropy");
    for (d, shard) in part.shards().iter().enumerate() {
        let h = ds.label_histogram(shard);
        let hist = h.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(
            out,
            "{d:>6}  {:<8}{:>7}  {:>8.4}  {hist}",
            part.capacity(d).to_string(),
            shard.len(),
            entropy(&h)
        );
    }
    let _ = writeln!(
        out,
        "global entropy {:.4}, mean device entropy {:.4}",
        entropy(&global),
        mean_device_entropy(ds, part)
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::io::Write;

    fn blobs(n: usize, k: usize, seed: u64) -> Dataset {
        gen_synthetic(n, 4, k, &mut rng::stream(seed, &[])).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(blobs(100, 2, 5), blobs(100, 2, 5));
        assert_ne!(blobs(100, 2, 5), blobs(100, 2, 6));
    }

    #[test]
    fn synthetic_covers_every_class() {
        let ds = blobs(10, 10, 1);
        assert!(ds.label_histogram(&(0..10).collect::<Vec<_>>()).iter().all(|&c| c == 1));
        assert!(gen_synthetic(3, 2, 4, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn noiseless_blobs_are_linearly_separable() {
        let mut r = rng::stream(3, &[]);
        let task = SyntheticTask::new(6, 5, 0.0, &mut r).unwrap();
        let ds = task.sample(200, &mut r).unwrap();
        // Nearest-mean rule: argmax_c <x, mu_c> - |mu_c|^2 / 2 is linear in x.
        let means = task.means();
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.inputs.row(i);
                let score = |c: usize| {
                    let mu = means.row(c);
                    let dot: f64 = x.iter().zip(mu).map(|(a, b)| a * b).sum();
                    let sq: f64 = mu.iter().map(|m| m * m).sum();
                    dot - 0.5 * sq
                };
                let best = (0..5).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
                best == ds.labels[i]
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn label_histogram_concentrates() {
        let ds = gen_synthetic(10_000, 3, 10, &mut rng::stream(17, &[])).unwrap();
        let h = ds.label_histogram(&(0..ds.len()).collect::<Vec<_>>());
        let sd = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for c in h {
            assert!((c as f64 - 1000.0).abs() <= 3.0 * sd, "count {c}");
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_examples() {
        let f = write_tmp("0.0,1.0,0\n1.0,0.0,1\n0.5,0.5,0\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.n_classes), (3, 2, 2));
        assert_eq!(ds.inputs.row(2), &[0.5, 0.5]);

        let f = write_tmp("a,b,label\n0.0,1.0,0\n");
        assert_eq!(load_csv(f.path()).unwrap().len(), 1);

        let f = write_tmp("");
        assert!(matches!(load_csv(f.path()), Err(Error::EmptyDataset)));

        let f = write_tmp("0.0,1.0,0\nx,0.0,1\n");
        let err = load_csv(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let f = write_tmp("0.0,1.0,0\n0.0,1\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { line: 2, .. })));

        let f = write_tmp("0.0,1.0,-1\n");
        assert!(load_csv(f.path()).is_err());

        let f = write_tmp("0.0,1.0,3\n");
        assert!(load_csv_with_classes(f.path(), 3).is_err());
        assert!(load_csv("/nonexistent/file.csv").is_err());
    }

    #[test]
    fn iid_shard_sizes() {
        let ds = blobs(10, 2, 0);
        let sizes = |n_dev| {
            let mut s: Vec<usize> = split_iid(&ds, n_dev, 0, &mut rng::stream(1, &[]))
                .unwrap()
                .shards()
                .iter()
                .map(Vec::len)
                .collect();
            s.sort_unstable();
            s
        };
        assert_eq!(sizes(2), vec![5, 5]);
        assert_eq!(sizes(3), vec![3, 3, 4]);
        let p = split_iid(&ds, 3, 1, &mut rng::stream(1, &[])).unwrap();
        assert!(p.is_disjoint_cover(10));
        assert_eq!(p.capacity(0), Capacity::Simple);
        assert_eq!(p.capacity(1), Capacity::Complex);
        assert!(split_iid(&ds, 11, 0, &mut rng::stream(1, &[])).is_err());
    }

    #[test]
    fn dirichlet_partition_properties() {
        let ds = blobs(500, 5, 2);
        for seed in 0..50 {
            let p = split_dirichlet(&ds, 10, 5, 0.3, &mut rng::stream(seed, &[])).unwrap();
            assert!(p.is_disjoint_cover(ds.len()));
            assert!(p.shards().iter().all(|s| !s.is_empty()));
        }
        assert!(split_dirichlet(&ds, 10, 5, 0.0, &mut rng::stream(0, &[])).is_err());
        // Tiny alpha on few points forces the repair path.
        let small = blobs(12, 2, 4);
        for seed in 0..20 {
            let p = split_dirichlet(&small, 12, 6, 0.01, &mut rng::stream(seed, &[])).unwrap();
            assert!(p.is_disjoint_cover(12));
            assert!(p.shards().iter().all(|s| s.len() == 1));
        }
    }

    #[test]
    fn dirichlet_is_deterministic() {
        let ds = blobs(300, 3, 2);
        let a = split_dirichlet(&ds, 7, 3, 0.5, &mut rng::stream(9, &[])).unwrap();
        let b = split_dirichlet(&ds, 7, 3, 0.5, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn skew_trend_over_alpha() {
        let ds = gen_synthetic(2000, 2, 10, &mut rng::stream(8, &[])).unwrap();
        let mut votes = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let h: Vec<f64> = [10.0, 1.0, 0.1]
                .iter()
                .map(|&a| {
                    let p = split_dirichlet(&ds, 10, 5, a, &mut rng::stream(seed, &[])).unwrap();
                    mean_device_entropy(&ds, &p)
                })
                .collect();
            if h[0] >= h[1] && h[1] >= h[2] {
                votes += 1;
            }
        }
        assert!(votes * 2 > seeds, "{votes}/{seeds}");
    }

    #[test]
    fn proportional_counts_are_exact() {
        assert_eq!(proportional_counts(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(proportional_counts(3, &[1.0 / 3.0; 3]), vec![1, 1, 1]);
        assert_eq!(proportional_counts(0, &[0.2, 0.8]), vec![0, 0]);
        let p = [0.07, 0.6, 0.33];
        for total in 0..50 {
            let c = proportional_counts(total, &p);
            assert_eq!(c.iter().sum::<usize>(), total);
            for (k, q) in c.iter().zip(p) {
                assert!((*k as f64 - q * total as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn entropy_and_tv() {
        assert!((entropy(&[5, 5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy(&[0, 7]), 0.0);
        assert_eq!(tv_distance(&[1, 1], &[2, 2]), 0.0);
        assert_eq!(tv_distance(&[1, 0], &[0, 3]), 1.0);
    }
}
