//! Deterministic procedural image dataset.
//!
//! Sample `i` of a dataset keyed by `seed` is drawn from a ChaCha8 stream
//! selected by `i`, so every image is a pure function of `(seed, i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 10;
/// Largest magnitude of the additive per-pixel noise.
pub const NOISE: f64 = 0.1;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "hbar",
    "vbar",
    "diagonal",
    "checkerboard",
    "dots",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl SynthDatasetSpec {
    pub fn new(seed: u64, n_train: usize, n_test: usize) -> Self {
        Self {
            seed,
            n_train,
            n_test,
            image_size: IMAGE_SIZE,
            num_classes: NUM_CLASSES,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size != IMAGE_SIZE || self.num_classes != NUM_CLASSES {
            return Err(Error::config(format!(
                "the generator renders {NUM_CLASSES} classes at {IMAGE_SIZE}x{IMAGE_SIZE}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageTensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Label of global sample `index`: classes cycle so any contiguous range is
/// balanced to within one.
pub fn label_of(index: u64) -> usize {
    (index % NUM_CLASSES as u64) as usize
}

fn shape_hit(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match class {
        0 => d <= 8.0 * s,
        1 => dx.abs() <= 7.0 * s && dy.abs() <= 7.0 * s,
        2 => dy.abs() <= 7.0 * s && dx.abs() <= 0.5 * (dy + 7.0 * s),
        3 => (dx.abs() <= 2.0 * s && dy.abs() <= 9.0 * s) || (dy.abs() <= 2.0 * s && dx.abs() <= 9.0 * s),
        4 => d >= 5.0 * s && d <= 9.0 * s,
        5 => dy.abs() <= 2.5 * s && dx.abs() <= 11.0 * s,
        6 => dx.abs() <= 2.5 * s && dy.abs() <= 11.0 * s,
        7 => (dx - dy).abs() <= 3.5 * s && (dx + dy).abs() <= 20.0 * s,
        8 => {
            if dx.abs() > 10.0 * s || dy.abs() > 10.0 * s {
                return false;
            }
            let cx = ((dx + 64.0) / 4.0).floor() as i64;
            let cy = ((dy + 64.0) / 4.0).floor() as i64;
            (cx + cy) % 2 == 0
        }
        9 => {
            if dx.abs() > 11.0 * s || dy.abs() > 11.0 * s {
                return false;
            }
            let fx = (dx + 63.0).rem_euclid(6.0) - 3.0;
            let fy = (dy + 63.0).rem_euclid(6.0) - 3.0;
            fx * fx + fy * fy <= 2.25
        }
        _ => unreachable!("class out of range"),
    }
}

/// Renders global sample `index` as a `3·32·32` buffer in `[0, 1]`.
pub fn render_sample(seed: u64, index: u64) -> (Vec<f32>, usize) {
    let label = label_of(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen());
    let mut fg: [f64; 3] = std::array::from_fn(|_| rng.gen());
    // bounded retries; the last draw is used regardless
    for _ in 0..16 {
        let dist: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist >= 0.5 {
            break;
        }
        fg = std::array::from_fn(|_| rng.gen());
    }
    let cx = 15.5 + rng.gen_range(-3.0..=3.0);
    let cy = 15.5 + rng.gen_range(-3.0..=3.0);
    let scale = rng.gen_range(0.8..1.2);

    let n = IMAGE_SIZE;
    let mut img = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let hit = shape_hit(label, x as f64 - cx, y as f64 - cy, scale);
            let color = if hit { &fg } else { &bg };
            for c in 0..3 {
                let noise = rng.gen_range(-NOISE..=NOISE);
                img[c * n * n + y * n + x] = (color[c] + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    (img, label)
}

fn render_range(seed: u64, start: u64, count: usize) -> Result<Dataset> {
    let samples: Vec<(Vec<f32>, usize)> = (0..count as u64).map(|i| render_sample(seed, start + i)).collect();
    let labels = samples.iter().map(|s| s.1).collect();
    let bufs: Vec<Vec<f32>> = samples.into_iter().map(|s| s.0).collect();
    Ok(Dataset {
        images: ImageTensor::from_samples(&bufs, IMAGE_SIZE, IMAGE_SIZE)?,
        labels,
    })
}

/// Train split uses global indices `0..n_train`, test split the following
/// `n_test` indices.
pub fn generate_synthetic_dataset(spec: &SynthDatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = render_range(spec.seed, 0, spec.n_train)?;
    let test = render_range(spec.seed, spec.n_train as u64, spec.n_test)?;
    Ok((train, test))
}
