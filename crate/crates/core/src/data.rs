//! Datasets and task sequences.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples `[n, ...]` with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::shape(
                "LabeledDataset",
                format!("{n} samples vs {} labels", labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|_| Error::Truncated(path.display().to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse_idx(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0).ok_or_else(|| Error::Truncated(what.into()))?;
    if found != magic {
        return Err(Error::BadMagic {
            what: what.into(),
            found,
            expected: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Truncated(what.into()))?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Truncated(what.into()))?;
    Ok((dims, payload.to_vec()))
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
/// Pixels are scaled to `[0, 1]`; images come back as `[n, rows, cols, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_maybe_gz(images_path)?;
    let lab_bytes = read_maybe_gz(labels_path)?;
    let (dims, pixels) = parse_idx(
        &img_bytes,
        IDX_IMAGES_MAGIC,
        &images_path.display().to_string(),
    )?;
    let (ldims, labels) = parse_idx(
        &lab_bytes,
        IDX_LABELS_MAGIC,
        &labels_path.display().to_string(),
    )?;
    if dims[0] != ldims[0] {
        return Err(Error::shape(
            "load_idx",
            format!("{} images vs {} labels", dims[0], ldims[0]),
        ));
    }
    let inputs = Tensor::from_raw(
        vec![dims[0], dims[1], dims[2], 1],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    );
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(inputs, labels, classes)
}

/// Hex SHA-256 of a file's bytes as stored on disk.
pub fn fingerprint_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::report::hex(&Sha256::digest(&bytes)))
}

/// Scalar normalisation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and (population) standard deviation over every input value.
pub fn norm_stats(dataset: &LabeledDataset) -> Result<NormStats> {
    let x = dataset.inputs.data();
    if x.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::Invalid(
            "constant dataset: zero standard deviation".into(),
        ));
    }
    Ok(NormStats { mean, std })
}

/// `x ← (x − mean)/std` with statistics of `dataset` itself.
pub fn normalize(dataset: &LabeledDataset) -> Result<(LabeledDataset, NormStats)> {
    let stats = norm_stats(dataset)?;
    Ok((normalize_with(dataset, stats), stats))
}

pub fn normalize_with(dataset: &LabeledDataset, stats: NormStats) -> LabeledDataset {
    LabeledDataset {
        inputs: dataset.inputs.map(|v| (v - stats.mean) / stats.std),
        labels: dataset.labels.clone(),
        classes: dataset.classes,
    }
}

/// One task with local labels `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// `global_labels[local]` is the source label.
    pub global_labels: Vec<usize>,
    /// Source indices of each split (train and val index the train pool).
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl Task {
    pub fn classes(&self) -> usize {
        self.global_labels.len()
    }

    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.global_labels.iter().position(|&g| g == global)
    }
}

/// How a task sequence was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConstruction {
    Split { partition: Vec<Vec<usize>> },
    Permuted { n_tasks: usize },
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub construction: TaskConstruction,
    pub seed: u64,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn classes_per_task(&self) -> Vec<usize> {
        self.tasks.iter().map(Task::classes).collect()
    }
}

/// Seeded stratified carve of `pool` (indices with labels) into train and
/// validation. The validation size is `round(val_frac·n)`, shared out across
/// classes by largest remainder so class balance is kept.
fn stratified_split(
    labels: &[usize],
    pool: &[usize],
    val_frac: f64,
    rng: &mut SeededRng,
) -> (Vec<usize>, Vec<usize>) {
    let classes = pool.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let total = (val_frac * pool.len() as f64).round() as usize;
    let quota: Vec<f64> = by_class.iter().map(|c| val_frac * c.len() as f64).collect();
    let mut take: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    // largest fractional remainder first; ties by class index
    order.sort_by(|&a, &b| {
        let ra = quota[a] - quota[a].floor();
        let rb = quota[b] - quota[b].floor();
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(classes * 2) {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        val.extend_from_slice(&members[..take[c]]);
        train.extend_from_slice(&members[take[c]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn relabel(ds: &LabeledDataset, idx: &[usize], global: &[usize]) -> LabeledDataset {
    let mut sub = ds.subset(idx);
    for l in &mut sub.labels {
        *l = global
            .iter()
            .position(|g| g == l)
            .expect("class in partition");
    }
    sub.classes = global.len();
    sub
}

/// Class-split tasks: task `t` holds the classes in `partition[t]`, with
/// labels remapped to `0..k` in the listed order.
pub fn split_tasks(
    train_pool: &LabeledDataset,
    test: &LabeledDataset,
    partition: &[Vec<usize>],
    val_frac: f64,
    seed: u64,
) -> Result<TaskSequence> {
    check_val_frac(val_frac)?;
    let mut seen = std::collections::BTreeSet::new();
    for cell in partition {
        if cell.is_empty() {
            return Err(Error::Invalid("empty partition cell".into()));
        }
        for &c in cell {
            if !seen.insert(c) {
                return Err(Error::Invalid(format!(
                    "class {c} appears in more than one task"
                )));
            }
            if !train_pool.labels.contains(&c) || !test.labels.contains(&c) {
                return Err(Error::Invalid(format!("class {c} absent from dataset")));
            }
        }
    }
    let root = SeededRng::new(seed);
    let mut tasks = Vec::with_capacity(partition.len());
    for (t, cell) in partition.iter().enumerate() {
        let pool: Vec<usize> = (0..train_pool.len())
            .filter(|&i| cell.contains(&train_pool.labels[i]))
            .collect();
        let test_idx: Vec<usize> = (0..test.len())
            .filter(|&i| cell.contains(&test.labels[i]))
            .collect();
        let (train_idx, val_idx) = stratified_split(
            &train_pool.labels,
            &pool,
            val_frac,
            &mut root.fork(t as u64),
        );
        tasks.push(Task {
            train: relabel(train_pool, &train_idx, cell),
            val: relabel(train_pool, &val_idx, cell),
            test: relabel(test, &test_idx, cell),
            global_labels: cell.clone(),
            train_indices: train_idx,
            val_indices: val_idx,
            test_indices: test_idx,
        });
    }
    Ok(TaskSequence {
        tasks,
        construction: TaskConstruction::Split {
            partition: partition.to_vec(),
        },
        seed,
    })
}

fn check_val_frac(val_frac: f64) -> Result<()> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Invalid(format!(
            "val_frac {val_frac} must be in (0, 1)"
        )));
    }
    Ok(())
}

/// Pixel permutation used for task `t` (identity for the first task).
pub fn task_permutation(pixels: usize, t: usize, seed: u64) -> Vec<usize> {
    if t == 0 {
        (0..pixels).collect()
    } else {
        SeededRng::new(seed)
            .fork(1000 + t as u64)
            .permutation(pixels)
    }
}

/// Applies `out[i] = x[perm[i]]` to every sample.
pub fn permute_inputs(ds: &LabeledDataset, perm: &[usize]) -> LabeledDataset {
    let per = perm.len();
    let mut out = Vec::with_capacity(ds.inputs.len());
    for s in ds.inputs.data().chunks_exact(per) {
        out.extend(perm.iter().map(|&p| s[p]));
    }
    LabeledDataset {
        inputs: Tensor::from_raw(ds.inputs.shape().to_vec(), out),
        labels: ds.labels.clone(),
        classes: ds.classes,
    }
}

/// Permuted tasks: every task has all classes; task `t > 0` sees the
/// inputs under a fixed seeded pixel permutation.
pub fn permute_tasks(
    train_pool: &LabeledDataset,
    test: &LabeledDataset,
    n_tasks: usize,
    val_frac: f64,
    seed: u64,
) -> Result<TaskSequence> {
    check_val_frac(val_frac)?;
    if n_tasks == 0 {
        return Err(Error::Invalid("n_tasks must be >= 1".into()));
    }
    let pool: Vec<usize> = (0..train_pool.len()).collect();
    let (train_idx, val_idx) = stratified_split(
        &train_pool.labels,
        &pool,
        val_frac,
        &mut SeededRng::new(seed).fork(0),
    );
    let train = train_pool.subset(&train_idx);
    let val = train_pool.subset(&val_idx);
    let pixels: usize = train_pool.sample_shape().iter().product();
    let global: Vec<usize> = (0..train_pool.classes).collect();
    let tasks = (0..n_tasks)
        .map(|t| {
            let perm = task_permutation(pixels, t, seed);
            Task {
                train: permute_inputs(&train, &perm),
                val: permute_inputs(&val, &perm),
                test: permute_inputs(test, &perm),
                global_labels: global.clone(),
                train_indices: train_idx.clone(),
                val_indices: val_idx.clone(),
                test_indices: (0..test.len()).collect(),
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks,
        construction: TaskConstruction::Permuted { n_tasks },
        seed,
    })
}

/// One Gaussian class cluster with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec<f64>,
    pub std: Vec<f64>,
}

/// Gaussian-blob tasks: one list of class blobs per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tasks: Vec<Vec<Blob>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_val_frac() -> f64 {
    0.15
}

impl SyntheticSpec {
    pub fn dim(&self) -> usize {
        self.tasks
            .first()
            .and_then(|t| t.first())
            .map_or(0, |b| b.center.len())
    }

    pub fn validate(&self) -> Result<()> {
        check_val_frac(self.val_frac)?;
        let dim = self.dim();
        if dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Invalid(
                "synthetic spec needs a dimension and samples per class".into(),
            ));
        }
        for (t, blobs) in self.tasks.iter().enumerate() {
            if blobs.len() < 2 {
                return Err(Error::Invalid(format!(
                    "synthetic task {t} needs at least 2 classes"
                )));
            }
            for b in blobs {
                if b.center.len() != dim || b.std.len() != dim {
                    return Err(Error::Invalid(format!(
                        "synthetic task {t}: blob dimension mismatch"
                    )));
                }
                if b.std.iter().any(|&s| !(s > 0.0) || !s.is_finite())
                    || b.center.iter().any(|c| !c.is_finite())
                {
                    return Err(Error::Invalid(format!(
                        "synthetic task {t}: degenerate covariance"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn sample_blobs(blobs: &[Blob], per_class: usize, rng: &mut SeededRng) -> LabeledDataset {
    let dim = blobs[0].center.len();
    let mut x = Vec::with_capacity(blobs.len() * per_class * dim);
    let mut y = Vec::with_capacity(blobs.len() * per_class);
    for _ in 0..per_class {
        for (c, b) in blobs.iter().enumerate() {
            for d in 0..dim {
                x.push(b.center[d] + b.std[d] * rng.normal());
            }
            y.push(c);
        }
    }
    LabeledDataset {
        inputs: Tensor::from_raw(vec![y.len(), dim], x),
        labels: y,
        classes: blobs.len(),
    }
}

/// Seeded Gaussian-blob tasks for fast end-to-end runs.
pub fn synthetic_tasks(spec: &SyntheticSpec, seed: u64) -> Result<TaskSequence> {
    spec.validate()?;
    let root = SeededRng::new(seed);
    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (t, blobs) in spec.tasks.iter().enumerate() {
        let mut rng = root.fork(t as u64);
        let pool = sample_blobs(blobs, spec.train_per_class, &mut rng);
        let test = sample_blobs(blobs, spec.test_per_class, &mut rng);
        let all: Vec<usize> = (0..pool.len()).collect();
        let (train_idx, val_idx) = stratified_split(&pool.labels, &all, spec.val_frac, &mut rng);
        tasks.push(Task {
            train: pool.subset(&train_idx),
            val: pool.subset(&val_idx),
            test_indices: (0..test.len()).collect(),
            test,
            global_labels: (0..blobs.len()).collect(),
            train_indices: train_idx,
            val_indices: val_idx,
        });
    }
    Ok(TaskSequence {
        tasks,
        construction: TaskConstruction::Synthetic,
        seed,
    })
}
