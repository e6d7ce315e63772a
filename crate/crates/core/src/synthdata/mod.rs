//! Synthetic multi-domain long-tailed image data.
//!
//! Classes are stripe textures (orientation and period depend on the class).
//! A domain applies a per-channel gain and bias to every pixel, so domain
//! identity lives entirely in first and second channel moments. Within each
//! domain the class sizes follow an exponential long-tailed profile; under
//! `cyclic_shift` each domain rotates which classes are head and tail.
//!
//! Noise-free pixels are exactly representable in `f32`: template values are
//! in {0, 1} and default gains and biases are multiples of 1/4.

mod container;

pub use container::{load_dataset, read_records, save_dataset, write_records, Manifest, FORMAT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Domain `d` ranks classes in the order rotated by `d * floor(C / D)`.
    CyclicShift,
    /// Every domain shares the same class ranking.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMode {
    /// Per-channel gain and bias.
    Affine,
    /// Small per-domain cyclic translation, no intensity change.
    Warp,
}

/// Explicit per-domain pixel transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default)]
    pub shift: (i64, i64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    #[serde(default = "default_side")]
    pub image_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_rho")]
    pub imbalance_ratio: f64,
    #[serde(default = "default_head")]
    pub head_count: usize,
    #[serde(default = "default_correlation")]
    pub correlation_mode: CorrelationMode,
    #[serde(default = "default_domain_mode")]
    pub domain_mode: DomainMode,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_val")]
    pub val_per_cell: usize,
    #[serde(default = "default_test")]
    pub test_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the built-in domain transforms when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_transforms: Option<Vec<DomainTransform>>,
}

fn default_side() -> usize {
    16
}
fn default_channels() -> usize {
    3
}
fn default_rho() -> f64 {
    50.0
}
fn default_head() -> usize {
    500
}
fn default_correlation() -> CorrelationMode {
    CorrelationMode::CyclicShift
}
fn default_domain_mode() -> DomainMode {
    DomainMode::Affine
}
fn default_noise() -> f64 {
    1.0
}
fn default_val() -> usize {
    5
}
fn default_test() -> usize {
    20
}

impl DatasetSpec {
    pub fn new(num_classes: usize, num_domains: usize) -> Self {
        DatasetSpec {
            num_classes,
            num_domains,
            image_side: default_side(),
            channels: default_channels(),
            imbalance_ratio: default_rho(),
            head_count: default_head(),
            correlation_mode: default_correlation(),
            domain_mode: default_domain_mode(),
            noise_std: default_noise(),
            val_per_cell: default_val(),
            test_per_cell: default_test(),
            seed: 0,
            domain_transforms: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_domains < 2 {
            return Err(Error::Config("need at least 2 classes and 2 domains".into()));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(Error::Config(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.head_count < self.num_classes {
            return Err(Error::Config(format!(
                "head_count {} must be >= num_classes {}",
                self.head_count, self.num_classes
            )));
        }
        if self.image_side < 2 || self.channels == 0 {
            return Err(Error::Config("image_side must be >= 2 and channels >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if let Some(ts) = &self.domain_transforms {
            if ts.len() != self.num_domains
                || ts
                    .iter()
                    .any(|t| t.gain.len() != self.channels || t.bias.len() != self.channels)
            {
                return Err(Error::Config(
                    "domain_transforms needs one gain and bias per channel for every domain".into(),
                ));
            }
        }
        Ok(())
    }

    fn pixels_per_example(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }

    /// The transform applied to domain `d`.
    pub fn domain_transform(&self, d: usize) -> DomainTransform {
        if let Some(ts) = &self.domain_transforms {
            return ts[d].clone();
        }
        match self.domain_mode {
            DomainMode::Affine => DomainTransform {
                gain: (0..self.channels)
                    .map(|ch| 0.5 + 0.25 * ((5 * d + ch) % 7) as f64)
                    .collect(),
                bias: (0..self.channels)
                    .map(|ch| -1.0 + 0.5 * ((2 * d + 3 * ch) % 5) as f64)
                    .collect(),
                shift: (0, 0),
            },
            DomainMode::Warp => DomainTransform {
                gain: vec![1.0; self.channels],
                bias: vec![0.0; self.channels],
                shift: ((d % 3) as i64 - 1, ((d / 3) % 3) as i64 + d as i64 % 2),
            },
        }
    }

    /// Class occupying popularity rank `rank` in domain `d`.
    pub fn class_at_rank(&self, d: usize, rank: usize) -> usize {
        match self.correlation_mode {
            CorrelationMode::CyclicShift => {
                let shift = d * (self.num_classes / self.num_domains);
                (rank + shift) % self.num_classes
            }
            CorrelationMode::Independent => rank,
        }
    }

    /// Training counts `n[c][d]`.
    pub fn train_cell_counts(&self) -> Vec<Vec<usize>> {
        let profile = class_counts(self.num_classes, self.imbalance_ratio, self.head_count);
        let mut counts = vec![vec![0; self.num_domains]; self.num_classes];
        for d in 0..self.num_domains {
            for (rank, n) in profile.iter().enumerate() {
                counts[self.class_at_rank(d, rank)][d] = *n;
            }
        }
        counts
    }
}

/// Exponential long-tailed profile `round(n_max * rho^(-k/(C-1)))`, clamped
/// to at least one example, for ranks `k = 0..C`.
pub fn class_counts(num_classes: usize, rho: f64, n_max: usize) -> Vec<usize> {
    if num_classes <= 1 {
        return vec![n_max; num_classes];
    }
    (0..num_classes)
        .map(|k| {
            let n = n_max as f64 * rho.powf(-(k as f64) / (num_classes - 1) as f64);
            (n.round() as usize).max(1)
        })
        .collect()
}

/// Noise-free class texture in {0, 1}, shape `[side, side]`.
pub fn class_template(class: usize, side: usize) -> Vec<f64> {
    let orientation = class % 4;
    // Period 2 would make the two diagonal orientations the same checkerboard.
    let period = 3 + (class / 4) % 3;
    let phase = class / 12;
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let q = match orientation {
                0 => y,
                1 => x,
                2 => x + y,
                _ => x + side - y,
            };
            if (q + phase) % period == 0 {
                out[y * side + x] = 1.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[channels, side, side]` row-major.
    pub pixels: Vec<f32>,
    pub y: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_domains: usize,
    pub channels: usize,
    pub side: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn empty_like(other: &Dataset) -> Self {
        Dataset {
            num_classes: other.num_classes,
            num_domains: other.num_domains,
            channels: other.channels,
            side: other.side,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.d).collect()
    }

    /// `counts[c][d]`.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.num_domains]; self.num_classes];
        for e in &self.examples {
            counts[e.y][e.d] += 1;
        }
        counts
    }

    pub fn class_totals(&self) -> Vec<usize> {
        self.cell_counts().iter().map(|r| r.iter().sum()).collect()
    }

    pub fn example_shape(&self) -> [usize; 3] {
        [self.channels, self.side, self.side]
    }

    /// Stack the selected examples into an `[N, channels, side, side]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.channels * self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.examples[i].pixels.iter().map(|p| f64::from(*p)));
        }
        Tensor::new(vec![indices.len(), self.channels, self.side, self.side], data)
            .expect("pixel count matches shape")
    }

    /// Max/min class count within each domain (over classes present in it).
    pub fn imbalance_per_domain(&self) -> Vec<Option<f64>> {
        let counts = self.cell_counts();
        (0..self.num_domains)
            .map(|d| {
                let col: Vec<usize> = counts.iter().map(|r| r[d]).filter(|n| *n > 0).collect();
                let max = col.iter().max()?;
                let min = col.iter().min()?;
                Some(*max as f64 / *min as f64)
            })
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&Example) -> bool) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            ..Dataset::empty_like(self)
        }
    }
}

/// Train, validation and test splits generated from one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub spec: DatasetSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

const SPLIT_STREAMS: [u64; 3] = [0, 1, 2];

fn render(spec: &DatasetSpec, d: usize, template: &[f64], noise: &mut dyn FnMut() -> f64) -> Vec<f32> {
    let side = spec.image_side;
    let t = spec.domain_transform(d);
    let mut out = Vec::with_capacity(spec.pixels_per_example());
    for ch in 0..spec.channels {
        for py in 0..side {
            for px in 0..side {
                let sy = (py as i64 - t.shift.1).rem_euclid(side as i64) as usize;
                let sx = (px as i64 - t.shift.0).rem_euclid(side as i64) as usize;
                let clean = t.gain[ch] * template[sy * side + sx] + t.bias[ch];
                out.push((clean + noise()) as f32);
            }
        }
    }
    out
}

fn generate_domain(spec: &DatasetSpec, split: usize, d: usize, per_class: &[usize]) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SPLIT_STREAMS[split] * 1_000_003 + d as u64 + 1);
    let normal = Normal::new(0.0, spec.noise_std.max(0.0)).expect("validated noise");
    let mut out = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        let template = class_template(c, spec.image_side);
        for _ in 0..n {
            let mut noise = || {
                if spec.noise_std > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                }
            };
            let pixels = render(spec, d, &template, &mut noise);
            out.push(Example { pixels, y: c, d });
        }
    }
    out
}

/// Generate all three splits. Deterministic given the spec (including its
/// seed); each (split, domain) uses its own random stream.
pub fn generate(spec: &DatasetSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let train_counts = spec.train_cell_counts();
    let make = |split: usize| -> Dataset {
        let per_domain = par::map_indices(spec.num_domains, |d| {
            let per_class: Vec<usize> = (0..spec.num_classes)
                .map(|c| match split {
                    0 => train_counts[c][d],
                    1 => spec.val_per_cell,
                    _ => spec.test_per_cell,
                })
                .collect();
            generate_domain(spec, split, d, &per_class)
        });
        Dataset {
            num_classes: spec.num_classes,
            num_domains: spec.num_domains,
            channels: spec.channels,
            side: spec.image_side,
            examples: per_domain.into_iter().flatten().collect(),
        }
    };
    Ok(DatasetSplits {
        spec: spec.clone(),
        train: make(0),
        val: make(1),
        test: make(2),
    })
}

/// Splits for one leave-one-domain-out fold.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainFold {
    pub held_out: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Train on every domain except `held_out`; test on the (class-balanced)
/// test pool of `held_out`.
pub fn leave_one_domain_out(splits: &DatasetSplits, held_out: usize) -> Result<DomainFold> {
    let d_total = splits.train.num_domains;
    if d_total < 2 {
        return Err(Error::InvalidArgument("leave-one-domain-out needs >= 2 domains".into()));
    }
    if held_out >= d_total {
        return Err(Error::InvalidArgument(format!(
            "held-out domain {held_out} out of range for {d_total} domains"
        )));
    }
    Ok(DomainFold {
        held_out,
        train: splits.train.filter(|e| e.d != held_out),
        val: splits.val.filter(|e| e.d != held_out),
        test: splits.test.filter(|e| e.d == held_out),
    })
}
