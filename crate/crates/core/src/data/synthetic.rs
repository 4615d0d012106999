//! Procedural image classification tasks.
//!
//! * `pattern-class`: each class is a sinusoidal grating with its own
//!   orientation and frequency, random phase, per-pixel noise.
//! * `shape-count`: label `k − 1` for an image holding `k` bright 2×2 blobs
//!   at random, mutually separated positions on a noisy dark background.
//!
//! Both generators are class balanced: sample `i` belongs to class
//! `i mod classes` before the final shuffle.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    PatternClass,
    ShapeCount,
    /// Pretraining mixture: gratings on a rotated orientation grid for the
    /// first half of the classes, single-pixel dot counts for the rest.
    Base,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PatternClass => "pattern-class",
            Task::ShapeCount => "shape-count",
            Task::Base => "base",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pattern-class" => Ok(Task::PatternClass),
            "shape-count" => Ok(Task::ShapeCount),
            "base" => Ok(Task::Base),
            other => Err(format!(
                "unknown task '{other}' (expected pattern-class, shape-count or base)"
            )),
        }
    }
}

/// Images as `u8` in `[count, C, H, W]` order, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub image_shape: [usize; 3],
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Samples {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Samples {
            image_shape: self.image_shape,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Channel gains applied to the grayscale renders, so channels differ.
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.85, 0.7];

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_gray(canvas: &[f64], shape: [usize; 3], out: &mut Vec<u8>) {
    for ch in 0..shape[0] {
        let gain = CHANNEL_GAIN[ch % CHANNEL_GAIN.len()];
        out.extend(canvas.iter().map(|&v| to_u8(v * gain)));
    }
}

/// Grating for class `class` of `classes`, with random phase and noise.
pub fn render_pattern<R: Rng + ?Sized>(
    class: usize,
    classes: usize,
    orientation_offset: f64,
    hw: (usize, usize),
    noise: f64,
    rng: &mut R,
) -> Vec<f64> {
    let (h, w) = hw;
    let theta = orientation_offset + PI * class as f64 / classes as f64;
    let freq = 2.0 + 1.5 * (class % 3) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let mut canvas = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 * c + y as f64 * s) / w as f64;
            let v = 0.5 + 0.35 * (2.0 * PI * freq * t + phase).sin();
            let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            canvas.push(v + n);
        }
    }
    canvas
}

/// `k` square blobs of side `size`, pairwise separated by at least one
/// background pixel in every direction. Background in `[0, noise)`, blobs
/// in `[0.7, 1.0)`; with `noise == 0` the background is exactly 0 and
/// blobs exactly 1.
pub fn render_blobs<R: Rng + ?Sized>(k: usize, size: usize, hw: (usize, usize), noise: f64, rng: &mut R) -> Vec<f64> {
    let (h, w) = hw;
    let mut canvas: Vec<f64> = (0..h * w)
        .map(|_| if noise > 0.0 { rng.random_range(0.0..noise) } else { 0.0 })
        .collect();
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(k);
    'outer: while placed.len() < k {
        for _ in 0..1000 {
            let y = rng.random_range(0..=h - size);
            let x = rng.random_range(0..=w - size);
            // Separated iff the boxes grown by one pixel do not overlap.
            let clear = placed
                .iter()
                .all(|&(py, px)| y > py + size || py > y + size || x > px + size || px > x + size);
            if clear {
                placed.push((y, x));
                continue 'outer;
            }
        }
        // Dense layouts can paint themselves into a corner; start over.
        placed.clear();
    }
    for (y, x) in placed {
        let v = if noise > 0.0 { rng.random_range(0.7..1.0) } else { 1.0 };
        for dy in 0..size {
            for dx in 0..size {
                canvas[(y + dy) * w + x + dx] = v;
            }
        }
    }
    canvas
}

/// Largest class count `task` supports on `hw` images. Blob tasks are
/// capped at half of a guaranteed packing so random placement stays fast.
pub fn max_classes(task: Task, hw: (usize, usize)) -> usize {
    let packing = |size: usize| ((hw.0 + 1) / (size + 1)) * ((hw.1 + 1) / (size + 1));
    match task {
        Task::PatternClass => usize::MAX,
        Task::ShapeCount => packing(2) / 2,
        Task::Base => 2 * (packing(1) / 2),
    }
}

/// Generates `samples` class-balanced images of shape `image_shape`.
pub fn generate(task: Task, classes: usize, samples: usize, image_shape: [usize; 3], seed: u64) -> Samples {
    assert!(classes > 0 && samples >= classes, "need at least one sample per class");
    assert!(classes <= max_classes(task, (image_shape[1], image_shape[2])), "too many classes for the image size");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = (image_shape[1], image_shape[2]);
    let mut labels: Vec<u16> = (0..samples).map(|i| (i % classes) as u16).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(samples * image_shape.iter().product::<usize>());
    for &label in &labels {
        let c = label as usize;
        let canvas = match task {
            Task::PatternClass => render_pattern(c, classes, 0.0, hw, 0.15, &mut rng),
            Task::ShapeCount => render_blobs(c + 1, 2, hw, 0.2, &mut rng),
            Task::Base => {
                let half = classes.div_ceil(2);
                if c < half {
                    render_pattern(c, half, PI / (2.0 * half as f64), hw, 0.15, &mut rng)
                } else {
                    render_blobs(c - half + 1, 1, hw, 0.2, &mut rng)
                }
            }
        };
        write_gray(&canvas, image_shape, &mut images);
    }
    Samples {
        image_shape,
        images,
        labels,
    }
}
