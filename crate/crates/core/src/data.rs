//! Image datasets and continual-learning task splits.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Omniglot,
    Cifar10,
    Cifar100,
    Celeba,
    Synthetic,
}

impl DatasetId {
    pub const ALL: [DatasetId; 7] = [
        DatasetId::Mnist,
        DatasetId::FashionMnist,
        DatasetId::Omniglot,
        DatasetId::Cifar10,
        DatasetId::Cifar100,
        DatasetId::Celeba,
        DatasetId::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion_mnist",
            DatasetId::Omniglot => "omniglot",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Celeba => "celeba",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]`, stored `[n, c, h, w]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: &str, split: Split, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self { name: name.to_string(), split, images, labels, num_classes };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::Contract(format!("images must be [n, c, h, w], got {:?}", self.images.shape())));
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::Contract("image and label counts differ".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Contract(format!("label {l} out of range for {} classes", self.num_classes)));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("pixel intensities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn pixels(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    /// Indices of samples whose label is `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Map `[0, 1]` images to `[-1, 1]` (generator range).
pub fn to_signed(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`to_signed`], clamped.
pub fn to_unit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

// ----- loaders --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { train: 2000, test: 400, classes: 10, side: 28, seed: 0 }
    }
}

/// Load one split. `root` is either the dataset's own directory or a parent
/// holding it under its name (`<root>/mnist/...`). For `synthetic` the
/// default [`SyntheticSpec`] is used.
pub fn load_dataset(id: DatasetId, root: &Path, split: Split) -> Result<Dataset> {
    let nested = root.join(id.as_str());
    let root = if nested.is_dir() { nested.as_path() } else { root };
    match id {
        DatasetId::Mnist | DatasetId::FashionMnist => load_idx(id, root, split),
        DatasetId::Cifar10 | DatasetId::Cifar100 => load_cifar(id, root, split),
        DatasetId::Omniglot => load_omniglot(root, split),
        DatasetId::Celeba => load_celeba(root, split),
        DatasetId::Synthetic => Ok(synthetic(&SyntheticSpec::default(), split)),
    }
}

fn read_maybe_gz(base: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", base.display()));
    let mut buf = Vec::new();
    if gz.exists() {
        let f = fs::File::open(&gz).map_err(|e| Error::load(&gz, e))?;
        flate2::read::GzDecoder::new(f).read_to_end(&mut buf).map_err(|e| Error::load(&gz, e))?;
    } else if base.exists() {
        buf = fs::read(base).map_err(|e| Error::load(base, e))?;
    } else {
        return Err(Error::load(base, "file not found (also tried .gz)"));
    }
    Ok(buf)
}

fn be_u32(b: &[u8], at: usize) -> usize {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

fn load_idx(id: DatasetId, root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = root.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = root.join(format!("{prefix}-labels-idx1-ubyte"));
    let img = read_maybe_gz(&img_path)?;
    let lbl = read_maybe_gz(&lbl_path)?;
    if img.len() < 16 || be_u32(&img, 0) != 0x0803 {
        return Err(Error::load(&img_path, "bad IDX image header"));
    }
    if lbl.len() < 8 || be_u32(&lbl, 0) != 0x0801 {
        return Err(Error::load(&lbl_path, "bad IDX label header"));
    }
    let (n, h, w) = (be_u32(&img, 4), be_u32(&img, 8), be_u32(&img, 12));
    if img.len() != 16 + n * h * w {
        return Err(Error::load(&img_path, "truncated image payload"));
    }
    if be_u32(&lbl, 4) != n || lbl.len() != 8 + n {
        return Err(Error::load(&lbl_path, "label count does not match images"));
    }
    let pixels = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lbl[8..].iter().map(|&b| b as usize).collect();
    if labels.iter().any(|&l| l >= 10) {
        return Err(Error::load(&lbl_path, "label out of range"));
    }
    Dataset::new(id.as_str(), split, Tensor::from_vec(&[n, 1, h, w], pixels), labels, 10)
}

fn load_cifar(id: DatasetId, root: &Path, split: Split) -> Result<Dataset> {
    let (files, label_bytes, classes): (Vec<String>, usize, usize) = match (id, split) {
        (DatasetId::Cifar10, Split::Train) => ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), 1, 10),
        (DatasetId::Cifar10, Split::Test) => (vec!["test_batch.bin".into()], 1, 10),
        (_, Split::Train) => (vec!["train.bin".into()], 2, 100),
        (_, Split::Test) => (vec!["test.bin".into()], 2, 100),
    };
    let rec = label_bytes + 3072;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = root.join(&f);
        let buf = fs::read(&path).map_err(|e| Error::load(&path, e))?;
        if buf.is_empty() || buf.len() % rec != 0 {
            return Err(Error::load(&path, format!("size {} is not a multiple of {rec}", buf.len())));
        }
        for r in buf.chunks_exact(rec) {
            // Fine label is the last label byte.
            let l = r[label_bytes - 1] as usize;
            if l >= classes {
                return Err(Error::load(&path, format!("label {l} out of range")));
            }
            labels.push(l);
            pixels.extend(r[label_bytes..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(id.as_str(), split, Tensor::from_vec(&[n, 3, 32, 32], pixels), labels, classes)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// Omniglot PNG tree `images_background/<alphabet>/<character>/*.png`.
/// Classes are alphabets; every fifth drawing of a character goes to test.
/// Strokes are inverted to bright-on-dark and resized to 28x28.
fn load_omniglot(root: &Path, split: Split) -> Result<Dataset> {
    let base = root.join("images_background");
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let alphabets: Vec<PathBuf> = sorted_entries(&base)?.into_iter().filter(|p| p.is_dir()).collect();
    if alphabets.is_empty() {
        return Err(Error::load(&base, "no alphabet directories"));
    }
    for (class, alpha) in alphabets.iter().enumerate() {
        for ch in sorted_entries(alpha)?.into_iter().filter(|p| p.is_dir()) {
            for (j, png) in sorted_entries(&ch)?.into_iter().enumerate() {
                if (j % 5 == 4) != (split == Split::Test) {
                    continue;
                }
                let img = image::open(&png).map_err(|e| Error::load(&png, e))?.to_luma8();
                let img = image::imageops::resize(&img, 28, 28, image::imageops::FilterType::Triangle);
                pixels.extend(img.pixels().map(|p| 1.0 - p.0[0] as f32 / 255.0));
                labels.push(class);
            }
        }
    }
    let n = labels.len();
    Dataset::new("omniglot", split, Tensor::from_vec(&[n, 1, 28, 28], pixels), labels, alphabets.len())
}

const HAIR: [&str; 4] = ["Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair"];

/// CelebA aligned crops with hair colour as the class (faces with exactly
/// one hair attribute). Center-cropped to 128x128, resized to 32x32 RGB.
fn load_celeba(root: &Path, split: Split) -> Result<Dataset> {
    let attr_path = root.join("list_attr_celeba.txt");
    let part_path = root.join("list_eval_partition.txt");
    let attrs = fs::read_to_string(&attr_path).map_err(|e| Error::load(&attr_path, e))?;
    let parts = fs::read_to_string(&part_path).map_err(|e| Error::load(&part_path, e))?;
    let mut lines = attrs.lines().skip(1);
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::load(&attr_path, "missing header"))?.split_whitespace().collect();
    let cols: Vec<usize> = HAIR
        .iter()
        .map(|h| header.iter().position(|c| c == h).ok_or_else(|| Error::load(&attr_path, format!("no column {h}"))))
        .collect::<Result<_>>()?;
    let want = if split == Split::Train { "0" } else { "2" };
    let in_split: std::collections::HashSet<&str> = parts
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let (f, p) = (it.next()?, it.next()?);
            (p == want).then_some(f)
        })
        .collect();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != header.len() + 1 || !in_split.contains(f[0]) {
            continue;
        }
        let on: Vec<usize> = (0..HAIR.len()).filter(|&k| f[cols[k] + 1] == "1").collect();
        if on.len() != 1 {
            continue;
        }
        let path = root.join("img_align_celeba").join(f[0]);
        let img = image::open(&path).map_err(|e| Error::load(&path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        let side = w.min(h).min(128);
        let crop = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let small = image::imageops::resize(&crop, 32, 32, image::imageops::FilterType::Triangle);
        for c in 0..3 {
            pixels.extend(small.pixels().map(|p| p.0[c] as f32 / 255.0));
        }
        labels.push(on[0]);
    }
    if labels.is_empty() {
        return Err(Error::load(root, "no usable CelebA images"));
    }
    let n = labels.len();
    Dataset::new("celeba", split, Tensor::from_vec(&[n, 3, 32, 32], pixels), labels, HAIR.len())
}

/// Deterministic toy images: each class is a soft blob at its own position
/// on a ring, with per-sample jitter and faint noise.
pub fn synthetic(spec: &SyntheticSpec, split: Split) -> Dataset {
    let n = if split == Split::Train { spec.train } else { spec.test };
    let s = spec.side;
    let mut r = rng::stream(spec.seed, &[spec.classes as u64, s as u64, split as u64]);
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    let c = spec.classes.max(1);
    for i in 0..n {
        let label = i % c;
        let ang = std::f64::consts::TAU * label as f64 / c as f64;
        let rad = 0.3 * s as f64;
        let cx = s as f64 / 2.0 + rad * ang.cos() + r.random_range(-1.0..1.0);
        let cy = s as f64 / 2.0 + rad * ang.sin() + r.random_range(-1.0..1.0);
        let width = 0.08 * s as f64 * r.random_range(0.8..1.2);
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (-d2 / (2.0 * width * width)).exp() + 0.05 * r.random::<f64>();
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(label);
    }
    Dataset::new("synthetic", split, Tensor::from_vec(&[n, 1, s, s], pixels), labels, c)
        .expect("synthetic data is valid by construction")
}

// ----- task streams ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    ClassIncremental,
    Dirichlet,
    SequentialDatasets,
    /// Three tasks: class 1, class 0, class 2 plus held-back ones.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub index: usize,
    pub samples: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl Task {
    fn new(index: usize, samples: Vec<usize>, labels: &[usize], classes: usize) -> Self {
        let class_histogram = histogram(&samples.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
        Self { index, samples, class_histogram }
    }

    pub fn classes(&self) -> Vec<usize> {
        (0..self.class_histogram.len()).filter(|&c| self.class_histogram[c] > 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub policy: Policy,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    pub seed: u64,
    pub num_classes: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("task stream serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::load(path, e))
    }

    /// Classes present in tasks `0..=t`.
    pub fn classes_seen(&self, t: usize) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for task in &self.tasks[..=t] {
            for c in task.classes() {
                seen[c] = true;
            }
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }
}

/// Contiguous ascending class groups; sizes differ by at most one.
fn class_groups(classes: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let (q, r) = (classes / k, classes % k);
    let mut start = 0;
    (0..k)
        .map(|t| {
            let len = q + usize::from(t < r);
            let g = start..start + len;
            start += len;
            g
        })
        .collect()
}

pub fn split_class_incremental(ds: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 || num_tasks > ds.num_classes {
        return Err(Error::Config(format!(
            "class-incremental split needs 1..={} tasks, got {num_tasks}",
            ds.num_classes
        )));
    }
    let mut r = rng::stream(seed, &[rng::tag::SPLIT]);
    let tasks = class_groups(ds.num_classes, num_tasks)
        .into_iter()
        .enumerate()
        .map(|(t, g)| {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| g.contains(&ds.labels[i])).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
            Task::new(t, idx, &ds.labels, ds.num_classes)
        })
        .collect::<Vec<_>>();
    if let Some(t) = tasks.iter().find(|t| t.samples.is_empty()) {
        return Err(Error::Config(format!("task {} has no samples", t.index)));
    }
    Ok(TaskStream { policy: Policy::ClassIncremental, alpha: None, seed, num_classes: ds.num_classes, tasks })
}

const DIRICHLET_RETRIES: u64 = 10;

/// Each class draws task proportions from `Dir(alpha/k, ..., alpha/k)` and
/// its samples are assigned to tasks independently from those proportions.
pub fn split_dirichlet(ds: &Dataset, num_tasks: usize, alpha: f64, seed: u64) -> Result<TaskStream> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if num_tasks == 0 {
        return Err(Error::Config("dirichlet split needs at least one task".into()));
    }
    let gamma = Gamma::new(alpha / num_tasks as f64, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..=DIRICHLET_RETRIES {
        let mut r = rng::stream(seed + attempt, &[rng::tag::SPLIT]);
        let mut buckets = vec![Vec::new(); num_tasks];
        for c in 0..ds.num_classes {
            let q = loop {
                let g: Vec<f64> = (0..num_tasks).map(|_| gamma.sample(&mut r)).collect();
                let s: f64 = g.iter().sum();
                if s > 0.0 {
                    break g.into_iter().map(|v| v / s).collect::<Vec<_>>();
                }
            };
            let mut members = ds.indices_of(c);
            rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut r);
            for i in members {
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut t = num_tasks - 1;
                for (j, &p) in q.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        t = j;
                        break;
                    }
                }
                buckets[t].push(i);
            }
        }
        if buckets.iter().all(|b| !b.is_empty()) {
            let tasks = buckets
                .into_iter()
                .enumerate()
                .map(|(t, s)| Task::new(t, s, &ds.labels, ds.num_classes))
                .collect();
            return Ok(TaskStream {
                policy: Policy::Dirichlet,
                alpha: Some(alpha),
                seed,
                num_classes: ds.num_classes,
                tasks,
            });
        }
    }
    Err(Error::Config(format!(
        "dirichlet split left an empty task after {DIRICHLET_RETRIES} redraws (alpha {alpha}, {num_tasks} tasks)"
    )))
}

/// Share of class-1 samples that go to the first toy task; the rest are
/// held back for the third.
pub const TOY_FIRST_SHARE: f64 = 2.0 / 3.0;

/// Tasks `{1}`, `{0}`, `{2 + held-back 1s}`, each capped at `max_per_task`.
pub fn split_toy(ds: &Dataset, max_per_task: usize, seed: u64) -> Result<TaskStream> {
    if ds.num_classes < 3 {
        return Err(Error::Config(format!("toy split needs classes 0, 1 and 2; dataset has {}", ds.num_classes)));
    }
    let mut r = rng::stream(seed, &[rng::tag::SPLIT]);
    let mut shuffled = |c: usize| {
        let mut v = ds.indices_of(c);
        rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut r);
        v
    };
    let ones = shuffled(1);
    let zeros = shuffled(0);
    let twos = shuffled(2);
    let cut = (ones.len() as f64 * TOY_FIRST_SHARE).round() as usize;
    let (first, held) = ones.split_at(cut);
    let t0: Vec<usize> = first.iter().copied().take(max_per_task).collect();
    let t1: Vec<usize> = zeros.into_iter().take(max_per_task).collect();
    // keep the held-back share of the third task's budget for ones
    let held_take = held.len().min(max_per_task / 3);
    let mut t2: Vec<usize> = twos.into_iter().take(max_per_task - held_take).collect();
    t2.extend(held.iter().copied().take(held_take));
    rand::seq::SliceRandom::shuffle(t2.as_mut_slice(), &mut r);
    let tasks: Vec<Task> =
        [t0, t1, t2].into_iter().enumerate().map(|(i, s)| Task::new(i, s, &ds.labels, ds.num_classes)).collect();
    if let Some(t) = tasks.iter().find(|t| t.samples.is_empty()) {
        return Err(Error::Config(format!("toy task {} has no samples", t.index)));
    }
    Ok(TaskStream { policy: Policy::Toy, alpha: None, seed, num_classes: ds.num_classes, tasks })
}

/// Concatenate datasets, offsetting class ids so ranges are disjoint.
pub fn concat_datasets(datasets: &[&Dataset]) -> Result<Dataset> {
    let first = datasets.first().ok_or_else(|| Error::Config("no datasets to concatenate".into()))?;
    let shape = first.image_shape();
    let mut labels = Vec::new();
    let mut offset = 0;
    for d in datasets {
        if d.image_shape() != shape {
            return Err(Error::Config(format!(
                "image shape mismatch: {} is {:?}, {} is {:?}",
                first.name,
                shape,
                d.name,
                d.image_shape()
            )));
        }
        labels.extend(d.labels.iter().map(|l| l + offset));
        offset += d.num_classes;
    }
    let images = Tensor::cat_rows(&datasets.iter().map(|d| &d.images).collect::<Vec<_>>());
    let name = datasets.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join("+");
    Dataset::new(&name, first.split, images, labels, offset)
}

/// Class-incremental streams of each dataset, one after another. Returns the
/// concatenated dataset the indices refer to.
pub fn split_sequential(datasets: &[&Dataset], tasks_per_dataset: usize, seed: u64) -> Result<(Dataset, TaskStream)> {
    let all = concat_datasets(datasets)?;
    let mut tasks = Vec::new();
    let mut offset = 0;
    for d in datasets {
        let s = split_class_incremental(d, tasks_per_dataset, seed)?;
        for t in s.tasks {
            let samples: Vec<usize> = t.samples.iter().map(|i| i + offset).collect();
            tasks.push(Task::new(tasks.len(), samples, &all.labels, all.num_classes));
        }
        offset += d.len();
    }
    let policy = if datasets.len() == 1 { Policy::ClassIncremental } else { Policy::SequentialDatasets };
    let num_classes = all.num_classes;
    Ok((all, TaskStream { policy, alpha: None, seed, num_classes, tasks }))
}

/// Test-split indices per task: the samples whose class appears in the
/// task's train histogram, weighted to keep class proportions. For
/// class-incremental streams this is exactly the task's classes.
pub fn test_indices_for(stream: &TaskStream, test: &Dataset, t: usize) -> Vec<usize> {
    let hist = &stream.tasks[t].class_histogram;
    let total: usize = hist.iter().sum();
    let mut out = Vec::new();
    for c in 0..stream.num_classes.min(test.num_classes) {
        if hist[c] == 0 {
            continue;
        }
        let members = test.indices_of(c);
        if stream.policy == Policy::Dirichlet {
            // keep the task's class mixture, scaled to the test split size
            let share = hist[c] as f64 / total as f64;
            let want = (share * test.len() as f64 / stream.len() as f64).round() as usize;
            let want = want.clamp(1, members.len().max(1));
            out.extend(members.into_iter().take(want));
        } else {
            out.extend(members);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_only(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new("fixture", Split::Train, Tensor::zeros(&[n, 1, 1, 1]), labels, classes).unwrap()
    }

    #[test]
    fn groups_are_contiguous() {
        assert_eq!(class_groups(10, 5), vec![0..2, 2..4, 4..6, 6..8, 8..10]);
        assert_eq!(class_groups(10, 3), vec![0..4, 4..7, 7..10]);
    }

    #[test]
    fn class_incremental_pairs_digits() {
        let ds = labels_only((0..100).map(|i| i % 10).collect(), 10);
        let s = split_class_incremental(&ds, 5, 3).unwrap();
        for (t, task) in s.tasks.iter().enumerate() {
            assert_eq!(task.classes(), vec![2 * t, 2 * t + 1]);
        }
        assert!(split_class_incremental(&ds, 11, 0).is_err());
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        let ds = labels_only(vec![0, 1], 2);
        assert!(matches!(split_dirichlet(&ds, 2, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(split_dirichlet(&ds, 2, -1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn toy_split_layout() {
        let ds = labels_only((0..300).map(|i| i % 3).collect(), 3);
        let s = split_toy(&ds, 3000, 0).unwrap();
        assert_eq!(s.tasks[0].classes(), vec![1]);
        assert_eq!(s.tasks[1].classes(), vec![0]);
        assert_eq!(s.tasks[2].classes(), vec![1, 2]);
        let mut ones: Vec<usize> = s.tasks[0].samples.iter().chain(s.tasks.get(2).unwrap().samples.iter()).copied().filter(|&i| ds.labels[i] == 1).collect();
        let n = ones.len();
        ones.sort();
        ones.dedup();
        assert_eq!(ones.len(), n, "a one appears in two tasks");
        let capped = split_toy(&ds, 30, 0).unwrap();
        assert!(capped.tasks.iter().all(|t| t.samples.len() <= 30));
    }

    #[test]
    fn sequential_offsets_classes() {
        let a = labels_only((0..20).map(|i| i % 2).collect(), 2);
        let b = labels_only((0..20).map(|i| i % 2).collect(), 2);
        let (all, s) = split_sequential(&[&a, &b], 2, 0).unwrap();
        assert_eq!(all.num_classes, 4);
        assert_eq!(s.tasks.iter().map(|t| t.classes()).collect::<Vec<_>>(), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn synthetic_has_requested_size() {
        let spec = SyntheticSpec { train: 8, test: 2, classes: 2, side: 8, seed: 1 };
        let ds = synthetic(&spec, Split::Train);
        assert_eq!(ds.len(), 8);
        assert!(ds.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn missing_idx_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(DatasetId::Mnist, dir.path(), Split::Train).unwrap_err();
        assert_eq!(err.kind(), "load");
        assert!(err.to_string().contains("train-images-idx3-ubyte"));
    }
}
