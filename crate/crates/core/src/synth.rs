//! Oriented-bar images whose label is the bar's orientation bin.
//!
//! A single `w×w` window sees only a short stretch of the bar, whose mean
//! intensity carries no orientation; a receptive field that stretches or
//! rotates along the bar does. Every sample is drawn from its own ChaCha
//! stream keyed on `(seed, split, index)`, so images can be generated in any
//! order or in parallel and stay bit-identical.
//!
//! On disk each split is one file:
//!
//! ```text
//! count  u32 LE
//! H      u32 LE
//! W      u32 LE
//! images count·H·W f32 LE, row-major
//! labels count u16 LE
//! ```
//!
//! plus a `spec.json` sidecar holding the [`SynthSpec`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_size: usize,
    /// Orientation bins over `[0, π)`.
    pub num_classes: usize,
    /// Bar length range in pixels, `[lo, hi]`.
    pub bar_length: [f64; 2],
    /// Bar width range in pixels, `[lo, hi]`.
    pub bar_width: [f64; 2],
    /// Fraction of a bin's width the angle may wander from the bin centre.
    pub angle_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 4,
            bar_length: [12.0, 22.0],
            bar_width: [1.5, 3.0],
            angle_jitter: 0.5,
            noise_sigma: 0.05,
            seed: 0,
            train_count: 2000,
            test_count: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Test => "test.bin",
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            problems.push(format!("num_classes must be in [2, 65535], got {}", self.num_classes));
        }
        if self.image_size < 4 {
            problems.push(format!("image_size must be >= 4, got {}", self.image_size));
        }
        for (name, [lo, hi]) in [("bar_length", self.bar_length), ("bar_width", self.bar_width)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                problems.push(format!("{name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
            }
        }
        if !(0.0..=1.0).contains(&self.angle_jitter) {
            problems.push(format!("angle_jitter must be in [0, 1], got {}", self.angle_jitter));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            problems.push(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.train_count == 0 || self.test_count == 0 {
            problems.push("train_count and test_count must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    /// Centre angle of bin `k`.
    pub fn bin_angle(&self, k: usize) -> f64 {
        k as f64 * PI / self.num_classes as f64
    }
}

/// Parameters of one rendered bar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bar {
    pub center: [f64; 2],
    pub angle: f64,
    pub length: f64,
    pub width: f64,
}

/// Box-filtered coverage of `bar` at every pixel centre, in `[0, 1]`.
pub fn render_bar(size: usize, bar: &Bar) -> Vec<f64> {
    let (c, s) = (bar.angle.cos(), bar.angle.sin());
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - bar.center[0];
            let dy = y as f64 - bar.center[1];
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            let a = (bar.length / 2.0 + 0.5 - along.abs()).clamp(0.0, 1.0);
            let b = (bar.width / 2.0 + 0.5 - across.abs()).clamp(0.0, 1.0);
            img.push(a * b);
        }
    }
    img
}

/// Draws sample `index` of `split`. Returns the image and its label.
pub fn sample(spec: &SynthSpec, split: Split, index: usize) -> (Vec<f32>, u16) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream_base() + index as u64);
    let label = index % spec.num_classes;
    let bin = PI / spec.num_classes as f64;
    let jitter = 0.5 * spec.angle_jitter * bin;
    let angle = spec.bin_angle(label) + if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
    let n = spec.image_size as f64;
    let bar = Bar {
        center: [rng.gen_range(0.3 * n..0.7 * n), rng.gen_range(0.3 * n..0.7 * n)],
        angle,
        length: rng.gen_range(spec.bar_length[0]..=spec.bar_length[1]),
        width: rng.gen_range(spec.bar_width[0]..=spec.bar_width[1]),
    };
    let mut img = render_bar(spec.image_size, &bar);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut img {
            *v += noise.sample(&mut rng);
        }
    }
    let img = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    (img, label as u16)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// `count·H·W` pixels, row-major per image.
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images `indices` as a `(B, H, W, 1)` array and their labels.
    pub fn batch(&self, indices: &[usize]) -> (DenseArray, Vec<usize>) {
        let px = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend(self.images[i * px..(i + 1) * px].iter().map(|&v| v as f64));
        }
        let x = DenseArray::new(vec![indices.len(), self.height, self.width, 1], data).expect("sizes agree");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.images.len() * 4 + self.labels.len() * 2);
        for v in [self.len(), self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if buf.len() < 12 {
            return Err(fail(format!("header needs 12 bytes, file has {}", buf.len())));
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        let (count, h, w) = (word(0), word(1), word(2));
        let px = count * h * w;
        let want = 12 + px * 4 + count * 2;
        if buf.len() != want {
            return Err(fail(format!("expected {want} bytes for {count}×{h}×{w}, found {}", buf.len())));
        }
        let images = buf[12..12 + px * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = buf[12 + px * 4..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            images,
            labels,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Hex SHA-256 of the on-disk encoding.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

pub fn generate(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.count(split);
    let px = spec.image_size * spec.image_size;
    let mut images = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (img, label) = sample(spec, split, i);
        images.extend(img);
        labels.push(label);
    }
    Ok(Dataset {
        height: spec.image_size,
        width: spec.image_size,
        images,
        labels,
    })
}

/// Writes `train.bin`, `test.bin` and `spec.json` under `dir`.
pub fn write_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let train = generate(spec, Split::Train)?;
    let test = generate(spec, Split::Test)?;
    train.save(dir.join(Split::Train.file_name()))?;
    test.save(dir.join(Split::Test.file_name()))?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok((train, test))
}
