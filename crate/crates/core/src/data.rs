//! Datasets, the synthetic cluster generator, feature-space augmentation and
//! two-view batch assembly.
//!
//! Labels exist only for evaluation. Training code receives an
//! [`UnlabeledView`], which has no way to reach them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::numerics::RealMatrix;

pub const DATASET_MAGIC: &[u8; 8] = b"SSCQDAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Query = 1,
    Database = 2,
}

impl Split {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Database),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "database" => Ok(Split::Database),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    label_alphabet: u32,
    items: Vec<f32>,
    labels: Vec<Vec<u32>>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        items: Vec<f32>,
        labels: Vec<Vec<u32>>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        ensure!(input_dim > 0, Config, "input dimension must be positive");
        ensure!(
            items.len() % input_dim == 0,
            Dimension,
            "{} values do not form rows of {input_dim}",
            items.len()
        );
        let n = items.len() / input_dim;
        ensure!(
            labels.len() == n && splits.len() == n,
            Dimension,
            "{n} items but {} label sets and {} split tags",
            labels.len(),
            splits.len()
        );
        ensure!(
            items.iter().all(|v| v.is_finite()),
            Numeric,
            "dataset contains non-finite values"
        );
        let label_alphabet = labels
            .iter()
            .flatten()
            .map(|&l| l + 1)
            .max()
            .unwrap_or(0);
        Ok(Self {
            input_dim,
            label_alphabet,
            items,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn label_alphabet(&self) -> u32 {
        self.label_alphabet
    }

    pub fn item(&self, i: usize) -> &[f32] {
        &self.items[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn labels(&self, i: usize) -> &[u32] {
        &self.labels[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Items as an `f64` matrix, in the given order.
    pub fn matrix(&self, indices: &[usize]) -> RealMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            data.extend(self.item(i).iter().map(|&v| v as f64));
        }
        RealMatrix::from_vec(indices.len(), self.input_dim, data).expect("shape")
    }

    /// Items usable for training: everything not held out as a query.
    pub fn training_view(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            input_dim: self.input_dim,
            items: &self.items,
            indices: (0..self.len())
                .filter(|&i| self.splits[i] != Split::Query)
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(to_u32(self.len(), "item count")?);
        w.u32(to_u32(self.input_dim, "input dim")?);
        w.u32(self.label_alphabet);
        for &v in &self.items {
            w.f32(v);
        }
        for labels in &self.labels {
            let count = u16::try_from(labels.len())
                .map_err(|_| Error::Config(format!("{} labels on one item", labels.len())))?;
            w.u16(count);
            for &l in labels {
                w.u32(l);
            }
        }
        for &s in &self.splits {
            w.u8(s as u8);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.expect_magic(DATASET_MAGIC)?;
        let n = r.u32("item count")? as usize;
        let at = r.offset();
        let input_dim = r.u32("input dim")? as usize;
        if input_dim == 0 {
            return Err(r.error_at(at, "input dimension is zero"));
        }
        let alphabet = r.u32("label alphabet size")?;
        let mut items = Vec::with_capacity(n * input_dim);
        for _ in 0..n * input_dim {
            let at = r.offset();
            let v = r.f32("feature")?;
            if !v.is_finite() {
                return Err(r.error_at(at, "non-finite feature value"));
            }
            items.push(v);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let count = r.u16("label count")? as usize;
            let mut set = Vec::with_capacity(count);
            for _ in 0..count {
                let at = r.offset();
                let l = r.u32("label id")?;
                if l >= alphabet {
                    return Err(r.error_at(
                        at,
                        format!("label id {l} overflows alphabet of {alphabet}"),
                    ));
                }
                set.push(l);
            }
            labels.push(set);
        }
        let mut splits = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let b = r.u8("split tag")?;
            splits.push(
                Split::from_byte(b).ok_or_else(|| r.error_at(at, format!("unknown split tag {b}")))?,
            );
        }
        r.finish()?;
        let mut ds = Self::new(input_dim, items, labels, splits)?;
        ds.label_alphabet = alphabet;
        Ok(ds)
    }

    /// Imports a headerless CSV: feature columns, then a final column of
    /// labels joined by `|` (possibly empty). Every row gets `split`.
    pub fn import_csv(path: &Path, split: Split) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut input_dim = None;
        let (mut items, mut labels) = (Vec::new(), Vec::new());
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let offset = record.position().map_or(0, |p| p.byte());
            let bad = |reason: String| Error::Format {
                path: path.to_path_buf(),
                offset,
                reason,
            };
            if record.len() < 2 {
                return Err(bad("row needs at least one feature and a label column".into()));
            }
            let dim = record.len() - 1;
            if *input_dim.get_or_insert(dim) != dim {
                return Err(bad(format!("row has {dim} features, expected {input_dim:?}")));
            }
            for field in record.iter().take(dim) {
                let v: f32 = field
                    .parse()
                    .map_err(|_| bad(format!("bad feature value {field:?}")))?;
                items.push(v);
            }
            let label_field = &record[dim];
            let set = if label_field.is_empty() {
                Vec::new()
            } else {
                label_field
                    .split('|')
                    .map(|l| {
                        l.trim()
                            .parse::<u32>()
                            .map_err(|_| bad(format!("bad label {l:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            labels.push(set);
        }
        let input_dim = input_dim.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "no rows".into(),
        })?;
        let n = labels.len();
        Self::new(input_dim, items, labels, vec![split; n])
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Format {
            path: path.to_path_buf(),
            offset,
            reason: format!("{kind:?}"),
        },
    }
}

/// Item vectors without labels or split tags.
#[derive(Debug, Clone)]
pub struct UnlabeledView<'a> {
    input_dim: usize,
    items: &'a [f32],
    indices: Vec<usize>,
}

impl<'a> UnlabeledView<'a> {
    /// Wraps raw row-major items; every row is visible.
    pub fn from_items(input_dim: usize, items: &'a [f32]) -> Self {
        Self {
            input_dim,
            items,
            indices: (0..items.len() / input_dim).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// The `i`-th visible item.
    pub fn item(&self, i: usize) -> &'a [f32] {
        let j = self.indices[i];
        &self.items[j * self.input_dim..(j + 1) * self.input_dim]
    }

    /// Per-coordinate population standard deviation.
    pub fn coordinate_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.input_dim];
        for i in 0..self.len() {
            for (m, &v) in mean.iter_mut().zip(self.item(i)) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0; self.input_dim];
        for i in 0..self.len() {
            for ((s, &v), m) in var.iter_mut().zip(self.item(i)).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Radius of the sphere the class centers lie on.
    pub class_sep: f64,
    /// Per-coordinate standard deviation around each center.
    pub noise: f64,
    /// Share of each class tagged as queries; the rest is the database.
    pub query_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            dim: 32,
            class_sep: 4.0,
            noise: 1.0,
            query_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Labeled Gaussian clusters: centers uniform on a sphere of radius
/// `class_sep`, items `center + N(0, noise²)` per coordinate. The first
/// `round(per_class · query_fraction)` items of each class are queries.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    ensure!(config.classes >= 2, Config, "need at least two classes");
    ensure!(config.per_class >= 2, Config, "need at least two items per class");
    ensure!(config.dim >= 1, Config, "dimension must be positive");
    ensure!(
        config.noise >= 0.0 && config.class_sep >= 0.0,
        Config,
        "noise and separation must be non-negative"
    );
    ensure!(
        (0.0..1.0).contains(&config.query_fraction),
        Config,
        "query fraction must lie in [0, 1)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            let dir: Vec<f64> = (0..config.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = crate::numerics::norm(&dir);
            dir.into_iter().map(|v| v / n * config.class_sep).collect()
        })
        .collect();
    let queries = (config.per_class as f64 * config.query_fraction).round() as usize;
    let total = config.classes * config.per_class;
    let mut items = Vec::with_capacity(total * config.dim);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..config.per_class {
            for &m in center {
                let e: f64 = StandardNormal.sample(&mut rng);
                items.push((m + config.noise * e) as f32);
            }
            labels.push(vec![c as u32]);
            splits.push(if i < queries {
                Split::Query
            } else {
                Split::Database
            });
        }
    }
    Dataset::new(config.dim, items, labels, splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Noise standard deviation as a fraction of each coordinate's std.
    pub noise_scale: f64,
    pub dropout_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_scale: 0.1,
            dropout_fraction: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

/// Additive Gaussian noise, then zeroing of `floor(dropout · dim)` random
/// coordinates, then a random global scale in `[scale_min, scale_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub noise_sigma: Vec<f64>,
    pub dropout_fraction: f64,
    pub scale_jitter: (f64, f64),
}

impl AugmentationPolicy {
    pub fn identity(dim: usize) -> Self {
        Self {
            noise_sigma: vec![0.0; dim],
            dropout_fraction: 0.0,
            scale_jitter: (1.0, 1.0),
        }
    }

    pub fn from_config(config: &AugmentConfig, view: &UnlabeledView<'_>) -> Result<Self> {
        let policy = Self {
            noise_sigma: view
                .coordinate_std()
                .into_iter()
                .map(|s| s * config.noise_scale)
                .collect(),
            dropout_fraction: config.dropout_fraction,
            scale_jitter: (config.scale_min, config.scale_max),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_sigma.iter().all(|s| *s >= 0.0 && s.is_finite()),
            Config,
            "noise sigma must be non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout_fraction),
            Config,
            "dropout fraction must lie in [0, 1), got {}",
            self.dropout_fraction
        );
        let (lo, hi) = self.scale_jitter;
        ensure!(
            lo > 0.0 && lo <= hi,
            Config,
            "scale jitter range [{lo}, {hi}] is invalid"
        );
        Ok(())
    }

    pub fn dropped_coordinates(&self) -> usize {
        (self.dropout_fraction * self.noise_sigma.len() as f64).floor() as usize
    }

    /// One augmented view of `item`.
    pub fn apply(&self, item: &[f32], rng: &mut impl Rng, out: &mut [f64]) {
        let dim = item.len();
        debug_assert_eq!(dim, self.noise_sigma.len());
        for ((o, &x), &s) in out.iter_mut().zip(item).zip(&self.noise_sigma) {
            let e: f64 = if s > 0.0 {
                Normal::new(0.0, s).expect("valid sigma").sample(rng)
            } else {
                0.0
            };
            *o = x as f64 + e;
        }
        let drop = self.dropped_coordinates();
        if drop > 0 {
            for j in rand::seq::index::sample(rng, dim, drop) {
                out[j] = 0.0;
            }
        }
        let (lo, hi) = self.scale_jitter;
        if hi > lo {
            let s = rng.random_range(lo..=hi);
            out.iter_mut().for_each(|v| *v *= s);
        } else if lo != 1.0 {
            out.iter_mut().for_each(|v| *v *= lo);
        }
    }
}

/// Rows `2i` and `2i + 1` are independent augmentations of view item
/// `indices[i]`.
pub fn two_view_batch(
    view: &UnlabeledView<'_>,
    indices: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<RealMatrix> {
    let dim = view.input_dim();
    ensure!(
        policy.noise_sigma.len() == dim,
        Dimension,
        "policy covers {} coordinates, items have {dim}",
        policy.noise_sigma.len()
    );
    let mut out = RealMatrix::zeros(2 * indices.len(), dim);
    for (i, &idx) in indices.iter().enumerate() {
        ensure!(
            idx < view.len(),
            Config,
            "batch index {idx} out of range for {} items",
            view.len()
        );
        let item = view.item(idx);
        policy.apply(item, rng, out.row_mut(2 * i));
        policy.apply(item, rng, out.row_mut(2 * i + 1));
    }
    Ok(out)
}

/// Mixes `tag` into `seed` (splitmix64 finalizer) so independent random
/// streams can be derived from one user seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The epoch's shuffled index order cut into full batches; the trailing
/// partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5045_524d));
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Random source for the augmentations of one training step.
pub fn augmentation_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4155_474d));
    rng.set_stream(step);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_center(x: &[f32], centers: &[Vec<f64>]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d: f64 = x.iter().zip(center).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    #[test]
    fn zero_noise_collapses_classes_to_centers() {
        let ds = generate_synthetic(&SyntheticConfig {
            noise: 0.0,
            per_class: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for c in 0..10 {
            let first = ds.item(c * 5).to_vec();
            let r: f64 = first.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((r - 4.0).abs() < 1e-5);
            for i in 1..5 {
                assert_eq!(ds.item(c * 5 + i), &first[..]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_synthetic(&cfg).unwrap().save(&a).unwrap();
        generate_synthetic(&cfg).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let other = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other, Dataset::load(&a).unwrap());
    }

    #[test]
    fn well_separated_classes_are_linearly_recoverable() {
        // class centers estimated on one draw classify a fresh draw perfectly
        let cfg = SyntheticConfig {
            class_sep: 10.0,
            noise: 1.0,
            per_class: 50,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let train = generate_synthetic(&cfg).unwrap();
        let centers: Vec<Vec<f64>> = (0..10)
            .map(|c| {
                let idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels(i)[0] == c).collect();
                let m = train.matrix(&idx);
                (0..m.cols())
                    .map(|j| m.iter_rows().map(|r| r[j]).sum::<f64>() / idx.len() as f64)
                    .collect()
            })
            .collect();
        // same centers (seeded), fresh noise: regenerate with a larger class
        // size so later items are new draws
        let held_out = generate_synthetic(&SyntheticConfig {
            per_class: 100,
            ..cfg
        })
        .unwrap();
        let mut correct = 0;
        for i in 0..held_out.len() {
            if nearest_center(held_out.item(i), &centers) == held_out.labels(i)[0] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, held_out.len());
    }

    #[test]
    fn too_few_items_rejected() {
        let cfg = SyntheticConfig {
            per_class: 1,
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn splits_and_training_view() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(ds.indices_of(Split::Query).len(), 200);
        assert_eq!(ds.indices_of(Split::Database).len(), 1800);
        let view = ds.training_view();
        assert_eq!(view.len(), 1800);
        assert_eq!(view.item(0), ds.item(20));
    }

    #[test]
    fn identity_policy_copies_items() {
        let items = vec![1.0f32, -2.0, 3.5, 0.25];
        let view = UnlabeledView::from_items(2, &items);
        let mut rng = augmentation_rng(1, 0);
        let m = two_view_batch(&view, &[1, 0], &AugmentationPolicy::identity(2), &mut rng).unwrap();
        assert_eq!(m.row(0), &[3.5, 0.25]);
        assert_eq!(m.row(1), &[3.5, 0.25]);
        assert_eq!(m.row(2), &[1.0, -2.0]);
        assert_eq!(m.row(3), &[1.0, -2.0]);
    }

    #[test]
    fn dropout_zeroes_the_floor_count() {
        let items = vec![1.0f32; 32];
        let view = UnlabeledView::from_items(32, &items);
        let policy = AugmentationPolicy {
            dropout_fraction: 0.1,
            ..AugmentationPolicy::identity(32)
        };
        let mut rng = augmentation_rng(2, 0);
        for _ in 0..20 {
            let m = two_view_batch(&view, &[0], &policy, &mut rng).unwrap();
            for row in m.iter_rows() {
                assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
            }
        }
    }

    #[test]
    fn augmentation_noise_is_centered() {
        let items = vec![0.5f32; 4];
        let view = UnlabeledView::from_items(4, &items);
        let sigma = 0.3;
        let policy = AugmentationPolicy {
            noise_sigma: vec![sigma; 4],
            ..AugmentationPolicy::identity(4)
        };
        let mut rng = augmentation_rng(3, 0);
        let idx = vec![0; 5000];
        let m = two_view_batch(&view, &idx, &policy, &mut rng).unwrap();
        let n = (m.rows() * 4) as f64;
        let mean = m.as_slice().iter().map(|v| v - 0.5).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        let var = m.as_slice().iter().map(|v| (v - 0.5 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - sigma).abs() < 0.01);
    }

    #[test]
    fn views_of_one_item_differ() {
        let items = vec![1.0f32; 8];
        let view = UnlabeledView::from_items(8, &items);
        let policy = AugmentationPolicy {
            noise_sigma: vec![0.1; 8],
            dropout_fraction: 0.25,
            scale_jitter: (0.9, 1.1),
        };
        let m = two_view_batch(&view, &[0], &policy, &mut augmentation_rng(4, 0)).unwrap();
        assert_ne!(m.row(0), m.row(1));
        let again = two_view_batch(&view, &[0], &policy, &mut augmentation_rng(4, 0)).unwrap();
        assert_eq!(m, again);
        let other = two_view_batch(&view, &[0], &policy, &mut augmentation_rng(4, 1)).unwrap();
        assert_ne!(m, other);
    }

    #[test]
    fn epoch_covers_each_index_once() {
        let batches = epoch_batches(103, 10, 7, 2);
        assert_eq!(batches.len(), 10);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 100);
        assert_eq!(batches, epoch_batches(103, 10, 7, 2));
        assert_ne!(batches, epoch_batches(103, 10, 7, 3));
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = Dataset::new(
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![vec![0, 4], vec![], vec![2]],
            vec![Split::Train, Split::Query, Split::Database],
        )
        .unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..30]).unwrap();
        match Dataset::load(&path) {
            Err(Error::Format { offset, reason, .. }) => {
                assert_eq!(offset, 28);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }

        // label id beyond the alphabet (header says 5)
        let mut bad = bytes.clone();
        let label_at = 20 + 6 * 4 + 2;
        bad[label_at..label_at + 4].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        match Dataset::load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, label_at as u64),
            other => panic!("{other:?}"),
        }

        let mut bad = bytes;
        bad[3] = b'!';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_import_reads_multi_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "0.5,1.5,1|3\n-1,2,2\n3,4,\n").unwrap();
        let ds = Dataset::import_csv(&path, Split::Database).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.labels(0), &[1, 3]);
        assert_eq!(ds.labels(1), &[2]);
        assert!(ds.labels(2).is_empty());
        assert_eq!(ds.item(1), &[-1.0, 2.0]);
        assert_eq!(ds.label_alphabet(), 4);

        std::fs::write(&path, "0.5,1.5,1\n1,x,2\n").unwrap();
        assert!(matches!(
            Dataset::import_csv(&path, Split::Train),
            Err(Error::Format { offset: 10, .. })
        ));
    }
}
