//! Dataset providers and the label-skew heterogeneity partitioner.
//!
//! Three sources are supported: synthetic Gaussian-cluster classification
//! sets, IDX-format digit images (big-endian, magic `0x00000803` /
//! `0x00000801`), and a flat binary round-trip format for synthetic sets.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{FlError, Result};
use crate::tensor::{Real, Tensor};

/// Labelled feature set. Features are row-major with the sample on the
/// first axis; labels index `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct Dataset<F: Real> {
    pub features: Tensor<F>,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(features: Tensor<F>, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(FlError::Shape(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(FlError::Config(format!(
                "label {} out of range for {} classes",
                bad, class_count
            )));
        }
        if !features.all_finite() {
            return Err(FlError::Config("dataset features must be finite".into()));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the samples at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Reinterprets each sample under a new shape (e.g. `[784]` to
    /// `[1, 28, 28]` for convolutional models).
    pub fn with_sample_shape(self, sample_shape: &[usize]) -> Result<Self> {
        let n = self.features.rows();
        let mut shape = vec![n];
        shape.extend_from_slice(sample_shape);
        Ok(Self {
            features: self.features.reshaped(shape)?,
            labels: self.labels,
            class_count: self.class_count,
        })
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    pub fn cast<G: Real>(&self) -> Dataset<G> {
        Dataset {
            features: self.features.cast(),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }
}

/// A-priori client weights `P_i = |D_i| / |D|`. Computed from exact integer
/// counts, so they sum to one up to a final float division.
pub fn client_weights<F: Real>(clients: &[Dataset<F>]) -> Vec<f64> {
    let total: usize = clients.iter().map(|d| d.len()).sum();
    clients
        .iter()
        .map(|d| d.len() as f64 / total as f64)
        .collect()
}

/// Isotropic Gaussian clusters with class means on the scaled unit simplex
/// (class `c` centered at the basis vector `e_c`). Linearly separable when
/// the spread is small.
pub fn gen_synthetic<F: Real>(
    classes: usize,
    samples_per_class: usize,
    dims: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if classes == 0 || samples_per_class == 0 || dims == 0 {
        return Err(FlError::Config("synthetic dataset sizes must be positive".into()));
    }
    if dims < classes {
        return Err(FlError::Config(format!(
            "synthetic dataset needs dims >= classes ({} < {})",
            dims, classes
        )));
    }
    if cluster_spread < 0.0 {
        return Err(FlError::Config("cluster spread must be non-negative".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    // Draws happen in f64 regardless of F, so wide and standard runs see
    // the same underlying sample values.
    for c in 0..classes {
        for _ in 0..samples_per_class {
            for d in 0..dims {
                let center = if d == c { 1.0 } else { 0.0 };
                let noise: f64 = f64::sample_normal(&mut rng);
                data.push(F::of(center + cluster_spread * noise));
            }
            labels.push(c as u32);
        }
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// No centering: pixels stay in `[0, 1]`.
    pub fn none() -> Self {
        Self { mean: vec![0.0], std: vec![1.0] }
    }

    /// The customary MNIST constants.
    pub fn mnist() -> Self {
        Self { mean: vec![0.1307], std: vec![0.3081] }
    }

    /// CIFAR-style per-channel constants (0-255 scale, divided by 255).
    pub fn cifar() -> Self {
        Self {
            mean: vec![125.3 / 255.0, 123.0 / 255.0, 113.9 / 255.0],
            std: vec![63.0 / 255.0, 62.1 / 255.0, 66.7 / 255.0],
        }
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| FlError::Format {
            offset: at,
            detail: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, what)?;
        Ok(u32::from_be_bytes(buf))
    }
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and then
/// standardized with the supplied constants. Sample counts of the two
/// files must match. Features come out flat: `[n, rows * cols]`.
pub fn load_idx<F: Real>(
    images_path: &Path,
    labels_path: &Path,
    normalization: &Normalization,
) -> Result<Dataset<F>> {
    let images = std::fs::File::open(images_path)?;
    let mut r = CountingReader::new(std::io::BufReader::new(images));
    let magic = r.read_u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FlError::Format {
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32_be("image count")? as usize;
    let rows = r.read_u32_be("image rows")? as usize;
    let cols = r.read_u32_be("image cols")? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    r.read_exact_at(&mut pixels, "pixel payload")?;

    let labels_file = std::fs::File::open(labels_path)?;
    let mut lr = CountingReader::new(std::io::BufReader::new(labels_file));
    let lmagic = lr.read_u32_be("label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(FlError::Format {
            offset: 0,
            detail: format!("bad label magic {lmagic:#010x}, want {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = lr.read_u32_be("label count")? as usize;
    if ln != n {
        return Err(FlError::Format {
            offset: 4,
            detail: format!("image count {n} does not match label count {ln}"),
        });
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact_at(&mut raw_labels, "label payload")?;

    let mean = &normalization.mean;
    let std = &normalization.std;
    if mean.len() != 1 || std.len() != 1 {
        return Err(FlError::Config(
            "IDX images are single-channel; normalization needs exactly one mean/std".into(),
        ));
    }
    let data: Vec<F> = pixels
        .iter()
        .map(|&p| F::of(((p as f64 / 255.0) - mean[0]) / std[0]))
        .collect();
    let labels: Vec<u32> = raw_labels.iter().map(|&l| l as u32).collect();
    let class_count = labels.iter().max().map(|&m| m as usize + 1).unwrap_or(1).max(10);
    Dataset::new(Tensor::new(vec![n, rows * cols], data)?, labels, class_count)
}

/// Writes a tiny synthetic IDX pair; used by loaders' tests and by anyone
/// wanting to feed the lab from raw arrays.
pub fn write_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    images: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if images.len() != n * rows * cols {
        return Err(FlError::Shape(format!(
            "{} pixels for {} images of {}x{}",
            images.len(),
            n,
            rows,
            cols
        )));
    }
    let mut f = std::fs::File::create(images_path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(images)?;
    let mut f = std::fs::File::create(labels_path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

const FLAT_MAGIC: &[u8; 4] = b"SYN0";

/// Serializes a dataset as `header + feature f64 (big-endian) + label
/// bytes`.
pub fn save_flat<F: Real>(dataset: &Dataset<F>, path: &Path) -> Result<()> {
    if dataset.class_count > 255 {
        return Err(FlError::Config("flat format stores labels as single bytes".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(FLAT_MAGIC)?;
    let shape = dataset.features.shape();
    f.write_all(&(shape.len() as u32).to_be_bytes())?;
    for &d in shape {
        f.write_all(&(d as u32).to_be_bytes())?;
    }
    f.write_all(&(dataset.class_count as u32).to_be_bytes())?;
    for v in dataset.features.data() {
        f.write_all(&v.wide().to_be_bytes())?;
    }
    for &l in &dataset.labels {
        f.write_all(&[l as u8])?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_flat`].
pub fn load_flat<F: Real>(path: &Path) -> Result<Dataset<F>> {
    let file = std::fs::File::open(path)?;
    let mut r = CountingReader::new(std::io::BufReader::new(file));
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != FLAT_MAGIC {
        return Err(FlError::Format { offset: 0, detail: "bad flat-dataset magic".into() });
    }
    let rank = r.read_u32_be("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32_be("dimension")? as usize);
    }
    let class_count = r.read_u32_be("class count")? as usize;
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact_at(&mut buf, "feature payload")?;
        data.push(F::of(f64::from_be_bytes(buf)));
    }
    let n = *shape.first().unwrap_or(&0);
    let mut labels_raw = vec![0u8; n];
    r.read_exact_at(&mut labels_raw, "label payload")?;
    Dataset::new(
        Tensor::new(shape, data)?,
        labels_raw.iter().map(|&l| l as u32).collect(),
        class_count,
    )
}

/// Label-skew partition plan: each class has a preferred client; a sample
/// lands there with probability `p`, otherwise uniformly on another client.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub clients: usize,
    pub assignment_probability: f64,
    pub seed: u64,
    /// Preferred client per class.
    pub label_groups: Vec<usize>,
}

impl PartitionPlan {
    /// Derives the class grouping: two clients split the classes into
    /// halves (low digits to client 0, high to client 1); more clients get
    /// round-robin classes.
    pub fn new(clients: usize, p: f64, seed: u64, class_count: usize) -> Result<Self> {
        if clients == 0 {
            return Err(FlError::Config("partition needs at least one client".into()));
        }
        if !(0.5..=1.0).contains(&p) {
            return Err(FlError::Config(format!(
                "assignment_probability must lie in [0.5, 1], got {}",
                p
            )));
        }
        let label_groups = (0..class_count)
            .map(|c| {
                if clients == 2 {
                    usize::from(c >= class_count.div_ceil(2))
                } else {
                    c % clients
                }
            })
            .collect();
        Ok(Self { clients, assignment_probability: p, seed, label_groups })
    }
}

/// Splits a dataset across clients by label skew. Every sample is assigned
/// to exactly one client; with `p = 1` label supports are disjoint, with
/// `p = 0.5` and two clients the split is uniform in expectation.
pub fn partition_label_skew<F: Real>(
    data: &Dataset<F>,
    plan: &PartitionPlan,
) -> Result<Vec<Dataset<F>>> {
    if plan.label_groups.len() < data.class_count {
        return Err(FlError::Config(format!(
            "plan covers {} classes, dataset has {}",
            plan.label_groups.len(),
            data.class_count
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); plan.clients];
    for (i, &label) in data.labels.iter().enumerate() {
        let preferred = plan.label_groups[label as usize];
        let u: f64 = rng.gen();
        let client = if plan.clients == 1 || u < plan.assignment_probability {
            preferred
        } else {
            let other = rng.gen_range(0..plan.clients - 1);
            if other >= preferred {
                other + 1
            } else {
                other
            }
        };
        assignments[client].push(i);
    }
    assignments
        .iter()
        .map(|idx| data.subset(idx))
        .collect()
}

/// Contiguous cross-validation blocks over a single seeded shuffle.
/// Returns `folds` index blocks whose union is `0..n`.
pub fn fold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || folds > n {
        return Err(FlError::Config(format!(
            "fold count {} invalid for {} samples",
            folds, n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut at = 0usize;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(order[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

/// Deterministic epoch-wise batch stream: each epoch is a fresh seeded
/// shuffle of the sample indices, cut into full batches (a trailing
/// remainder smaller than the batch size is skipped for that epoch).
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    cursor: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(FlError::Config("batch stream needs data and a batch size".into()));
        }
        Ok(Self { n, batch_size, seed, cursor: 0, cached: None })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        ((self.n / self.batch_size).max(1)) as u64
    }

    /// Effective batch size (the whole set when it is smaller than the
    /// configured batch).
    pub fn effective_batch(&self) -> usize {
        self.batch_size.min(self.n)
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    fn epoch_perm(&mut self, epoch: u64) -> &[usize] {
        let stale = !matches!(&self.cached, Some((e, _)) if *e == epoch);
        if stale {
            let mut perm: Vec<usize> = (0..self.n).collect();
            // Mix the epoch into the stream seed; splitmix-style finalizer.
            let mut z = self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            let mut rng = ChaCha20Rng::seed_from_u64(z);
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().unwrap().1
    }

    /// Index set of batch number `b` without advancing the cursor.
    pub fn peek_batch(&mut self, b: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let epoch = b / bpe;
        let slot = (b % bpe) as usize;
        let size = self.effective_batch();
        let perm = self.epoch_perm(epoch);
        perm[slot * size..slot * size + size].to_vec()
    }

    /// Next batch of sample indices.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let b = self.cursor;
        self.cursor += 1;
        self.peek_batch(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_zero_spread_collapses_classes() {
        let d: Dataset<f64> = gen_synthetic(3, 4, 5, 0.0, 9).unwrap();
        assert_eq!(d.len(), 12);
        for c in 0..3usize {
            let rows: Vec<usize> = (0..12).filter(|&i| d.labels[i] == c as u32).collect();
            let first = d.features.gather_rows(&rows[..1]).unwrap();
            for &r in &rows[1..] {
                let other = d.features.gather_rows(&[r]).unwrap();
                assert_eq!(first.data(), other.data());
            }
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a: Dataset<f64> = gen_synthetic(2, 10, 4, 0.3, 5).unwrap();
        let b: Dataset<f64> = gen_synthetic(2, 10, 4, 0.3, 5).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synthetic_rejects_dims_below_classes() {
        assert!(gen_synthetic::<f64>(5, 2, 3, 0.1, 0).is_err());
    }

    #[test]
    fn partition_p1_separates_label_supports() {
        let d: Dataset<f64> = gen_synthetic(10, 20, 10, 0.1, 1).unwrap();
        let plan = PartitionPlan::new(2, 1.0, 7, 10).unwrap();
        let parts = partition_label_skew(&d, &plan).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts[0].labels.iter().all(|&l| l < 5));
        assert!(parts[1].labels.iter().all(|&l| l >= 5));
    }

    #[test]
    fn partition_conserves_samples() {
        let d: Dataset<f64> = gen_synthetic(4, 25, 6, 0.2, 3).unwrap();
        let plan = PartitionPlan::new(3, 0.7, 11, 4).unwrap();
        let parts = partition_label_skew(&d, &plan).unwrap();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, d.len());
        // Multiset of labels is preserved.
        let mut hist = vec![0usize; 4];
        for p in &parts {
            for &l in &p.labels {
                hist[l as usize] += 1;
            }
        }
        assert_eq!(hist, d.class_histogram());
    }

    #[test]
    fn partition_is_reproducible() {
        let d: Dataset<f64> = gen_synthetic(2, 5, 4, 0.2, 3).unwrap();
        let plan = PartitionPlan::new(2, 0.8, 21, 2).unwrap();
        let a = partition_label_skew(&d, &plan).unwrap();
        let b = partition_label_skew(&d, &plan).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.features.data(), y.features.data());
        }
    }

    #[test]
    fn partition_rejects_bad_probability() {
        assert!(PartitionPlan::new(2, 0.3, 0, 10).is_err());
        assert!(PartitionPlan::new(2, 1.2, 0, 10).is_err());
    }

    #[test]
    fn p_half_two_clients_is_roughly_uniform() {
        // At p = 0.5 each client's class histogram should be flat across
        // preferred and non-preferred classes; a generous chi-square-style
        // bound on a fixed seed keeps this deterministic.
        let d: Dataset<f64> = gen_synthetic(10, 200, 10, 0.2, 2).unwrap();
        let plan = PartitionPlan::new(2, 0.5, 5, 10).unwrap();
        let parts = partition_label_skew(&d, &plan).unwrap();
        for part in &parts {
            let hist = part.class_histogram();
            let expect = part.len() as f64 / 10.0;
            let chi2: f64 = hist
                .iter()
                .map(|&h| {
                    let dlt = h as f64 - expect;
                    dlt * dlt / expect
                })
                .sum();
            // 9 degrees of freedom; anything under 30 is unremarkable.
            assert!(chi2 < 30.0, "chi-square {} too large: {:?}", chi2, hist);
        }
    }

    #[test]
    fn fold_split_partitions_everything() {
        let folds = fold_split(103, 5, 9).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![21, 21, 21, 20, 20]);
    }

    #[test]
    fn batch_stream_covers_epoch_without_replacement() {
        let mut s = BatchStream::new(10, 3, 4).unwrap();
        let mut seen = Vec::new();
        for _ in 0..s.batches_per_epoch() {
            seen.extend(s.next_batch());
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9, "three full batches, one remainder skipped");
    }

    #[test]
    fn batch_stream_is_deterministic_and_reshuffles() {
        let mut a = BatchStream::new(8, 4, 99).unwrap();
        let mut b = BatchStream::new(8, 4, 99).unwrap();
        for _ in 0..6 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut c = BatchStream::new(8, 4, 99).unwrap();
        let e0: Vec<usize> = (0..2).flat_map(|_| c.next_batch()).collect();
        let e1: Vec<usize> = (0..2).flat_map(|_| c.next_batch()).collect();
        assert_ne!(e0, e1, "epochs should reshuffle");
    }

    #[test]
    fn flat_roundtrip() {
        let d: Dataset<f64> = gen_synthetic(3, 4, 5, 0.4, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_flat(&d, &path).unwrap();
        let back: Dataset<f64> = load_flat(&path).unwrap();
        assert_eq!(back.features.data(), d.features.data());
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.class_count, 3);
    }

    #[test]
    fn idx_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lbl.idx");
        write_idx_pair(&images, &labels, 2, 2, &[0, 255, 128, 64], &[7]).unwrap();
        let d: Dataset<f64> = load_idx(&images, &labels, &Normalization::none()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels, vec![7]);
        assert!((d.features.data()[1] - 1.0).abs() < 1e-12);

        // Removing the final byte must be rejected with a format error.
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&images, &bytes[..bytes.len() - 1]).unwrap();
        match load_idx::<f64>(&images, &labels, &Normalization::none()) {
            Err(FlError::Format { .. }) => {}
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lbl.idx");
        write_idx_pair(&images, &labels, 1, 1, &[1, 2], &[0, 1]).unwrap();
        // Overwrite the label file with a single-label one.
        let labels2 = dir.path().join("lbl2.idx");
        let img2 = dir.path().join("img2.idx");
        write_idx_pair(&img2, &labels2, 1, 1, &[1], &[0]).unwrap();
        match load_idx::<f64>(&images, &labels2, &Normalization::none()) {
            Err(FlError::Format { detail, .. }) => assert!(detail.contains("match")),
            other => panic!("expected count mismatch, got {:?}", other.map(|_| ())),
        }
    }
}
