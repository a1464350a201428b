//! Synthetic paired-image datasets and their on-disk archive.
//!
//! Every generator starts from a smooth source image `x_m` built from random
//! Gaussian blobs and derives the target `x_p` from it. Sample `i` draws from
//! its own ChaCha stream, so datasets are identical regardless of how
//! generation is scheduled across threads.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{SideConfig, SideKind};
use crate::dgt;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// `x_p` = 3×3 box blur of `x_m` plus noise.
    BlurPair,
    /// `x_p` = gradient magnitude of `x_m` plus noise.
    EdgePair,
    /// Blur pair, negated when `c = 1`.
    CflipPair,
    /// Blur pair scaled by `1 − c/2` with `c` uniform on `[0, 1]`.
    CmonotonePair,
}

impl GeneratorKind {
    pub fn has_labels(self) -> bool {
        matches!(self, GeneratorKind::CflipPair | GeneratorKind::CmonotonePair)
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::BlurPair => "blur_pair",
            GeneratorKind::EdgePair => "edge_pair",
            GeneratorKind::CflipPair => "cflip_pair",
            GeneratorKind::CmonotonePair => "cmonotone_pair",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blur_pair" => Ok(GeneratorKind::BlurPair),
            "edge_pair" => Ok(GeneratorKind::EdgePair),
            "cflip_pair" => Ok(GeneratorKind::CflipPair),
            "cmonotone_pair" => Ok(GeneratorKind::CmonotonePair),
            other => Err(Error::config(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: GeneratorKind,
    pub n_samples: usize,
    /// `[C, H, W]`.
    pub image: [usize; 3],
    pub noise_std: f64,
    pub seed: u64,
    /// H and W must be divisible by `2^levels`.
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_levels() -> usize {
    3
}

impl DatasetSpec {
    pub fn new(kind: GeneratorKind, n_samples: usize, seed: u64) -> Self {
        DatasetSpec {
            kind,
            n_samples,
            image: [1, 16, 16],
            noise_std: 0.05,
            seed,
            levels: default_levels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("image shape {:?} has a zero dimension", self.image)));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be ≥ 1"));
        }
        let f = 1usize.checked_shl(self.levels as u32).unwrap_or(0);
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "image size {h}×{w} is not divisible by 2^{}",
                self.levels
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// One generated pair; images are `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x_m: Tensor<f32>,
    pub x_p: Tensor<f32>,
    /// Raw label value in `[0, 1]`.
    pub c: Option<f32>,
}

/// A stack of pairs: `x_m`, `x_p` are `[N, C, H, W]`, `c` is `[N, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x_m: Tensor<f32>,
    pub x_p: Tensor<f32>,
    pub c: Option<Tensor<f32>>,
    pub spec: Option<DatasetSpec>,
}

/// Source intensities lie in `[−SOURCE_RANGE, SOURCE_RANGE)`.
const SOURCE_RANGE: f64 = 0.8;

/// Smooth field of random positive Gaussian blobs mapped into `[−0.8, 0.8)`.
pub fn blob_field<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Vec<f64> {
    let scale = h.min(w) as f64 / 16.0;
    let mut out = vec![0.0; c * h * w];
    for plane in out.chunks_mut(h * w) {
        let blobs = rng.random_range(3..=8);
        for _ in 0..blobs {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sigma = rng.random_range(0.5..1.5) * scale;
            let amp = rng.random_range(0.5..1.5);
            let inv = 1.0 / (2.0 * sigma * sigma);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    plane[y * w + x] += amp * (-d2 * inv).exp();
                }
            }
        }
        for v in plane.iter_mut() {
            *v = SOURCE_RANGE * (2.0 * (1.0 - (-*v).exp()) - 1.0);
        }
    }
    out
}

/// 3×3 mean filter per channel with edge replication.
pub fn box_blur3(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += src[yy * w + xx];
                    }
                }
                out[ch * h * w + y * w + x] = acc / 9.0;
            }
        }
    }
    out
}

/// `|∂x| + |∂y|` by central differences with edge replication, mapped into `[−0.8, 0.8]`.
pub fn edge_map(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        let at = |y: isize, x: isize| {
            src[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let g = 0.5 * ((at(y, x + 1) - at(y, x - 1)).abs() + (at(y + 1, x) - at(y - 1, x)).abs());
                out[ch * h * w + y as usize * w + x as usize] =
                    SOURCE_RANGE * (2.0 * (2.0 * g).min(1.0) - 1.0);
            }
        }
    }
    out
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates sample `index` of `spec` on its own stream.
pub fn generate_one(spec: &DatasetSpec, index: usize) -> Result<PairedSample> {
    let [c, h, w] = spec.image;
    let mut rng = sample_rng(spec.seed, index);
    let xm = blob_field(&mut rng, c, h, w);
    let label = match spec.kind {
        GeneratorKind::CflipPair => Some(if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
        GeneratorKind::CmonotonePair => Some(rng.random_range(0.0..=1.0)),
        _ => None,
    };
    let mut xp = match spec.kind {
        GeneratorKind::EdgePair => edge_map(&xm, c, h, w),
        _ => box_blur3(&xm, c, h, w),
    };
    let gain = match (spec.kind, label) {
        (GeneratorKind::CflipPair, Some(l)) => 1.0 - 2.0 * l,
        (GeneratorKind::CmonotonePair, Some(l)) => 1.0 - 0.5 * l,
        _ => 1.0,
    };
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    for v in &mut xp {
        *v = (*v * gain + noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    let to32 = |v: Vec<f64>| Tensor::new(vec![c, h, w], v.into_iter().map(|x| x as f32).collect());
    Ok(PairedSample {
        x_m: to32(xm)?,
        x_p: to32(xp)?,
        c: label.map(|l| l as f32),
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::from_samples(&samples)?;
    ds.spec = Some(spec.clone());
    Ok(ds)
}

impl Dataset {
    pub fn from_samples(samples: &[PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("no samples"));
        }
        let batched = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        };
        let xm = samples.iter().map(|s| batched(&s.x_m)).collect::<Result<Vec<_>>>()?;
        let xp = samples.iter().map(|s| batched(&s.x_p)).collect::<Result<Vec<_>>>()?;
        let c = if samples.iter().all(|s| s.c.is_some()) {
            let v = samples.iter().map(|s| s.c.expect("checked")).collect();
            Some(Tensor::new(vec![samples.len(), 1], v)?)
        } else if samples.iter().any(|s| s.c.is_some()) {
            return Err(Error::contract("either every sample or none carries a label"));
        } else {
            None
        };
        let ds = Dataset {
            x_m: Tensor::stack(&xm)?,
            x_p: Tensor::stack(&xp)?,
            c,
            spec: None,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.x_m.rank() != 4 || self.x_m.shape() != self.x_p.shape() {
            return Err(Error::dim(format!(
                "x_m {:?} and x_p {:?} must be matching [N, C, H, W] stacks",
                self.x_m.shape(),
                self.x_p.shape()
            )));
        }
        if let Some(c) = &self.c {
            if c.shape() != [self.len(), 1] {
                return Err(Error::dim(format!("labels must be [{}, 1], got {:?}", self.len(), c.shape())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x_m.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.x_m.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> Result<PairedSample> {
        let shape = self.image_shape();
        Ok(PairedSample {
            x_m: self.x_m.sample(i)?.reshape(&shape)?,
            x_p: self.x_p.sample(i)?.reshape(&shape)?,
            c: self.c.as_ref().map(|c| c.data()[i]),
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x_m: self.x_m.select(idx)?,
            x_p: self.x_p.select(idx)?,
            c: self.c.as_ref().map(|c| c.select(idx)).transpose()?,
            spec: self.spec.clone(),
        })
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::contract(format!("cannot split {} samples at {n}", self.len())));
        }
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }

    /// Labels in the layout a model with `side` expects: the raw value for
    /// continuous labels, a one-hot row of `round(c·(K−1))` for categorical.
    pub fn side_matrix(&self, side: &SideConfig) -> Result<Option<Tensor<f32>>> {
        let c = match (side.kind, &self.c) {
            (SideKind::None, _) => return Ok(None),
            (_, None) => return Err(Error::contract("the model needs side labels but the dataset has none")),
            (_, Some(c)) => c,
        };
        match side.kind {
            SideKind::Continuous => Ok(Some(c.clone())),
            _ => {
                let k = side.classes;
                let mut data = vec![0.0f32; self.len() * k];
                for (i, &v) in c.data().iter().enumerate() {
                    let class = ((v as f64).clamp(0.0, 1.0) * (k - 1) as f64).round() as usize;
                    data[i * k + class] = 1.0;
                }
                Ok(Some(Tensor::new(vec![self.len(), k], data)?))
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        dgt::write_file(dir.join("x_m.dgt"), &self.x_m)?;
        dgt::write_file(dir.join("x_p.dgt"), &self.x_p)?;
        if let Some(c) = &self.c {
            dgt::write_file(dir.join("c.dgt"), c)?;
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            count: self.len(),
            image: self.image_shape(),
            labels: self.c.is_some(),
            spec: self.spec.clone(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::parse(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let x_m = dgt::read_file(dir.join("x_m.dgt"))?;
        let x_p = dgt::read_file(dir.join("x_p.dgt"))?;
        let c = if manifest.labels {
            Some(dgt::read_file(dir.join("c.dgt"))?)
        } else {
            None
        };
        let ds = Dataset {
            x_m,
            x_p,
            c,
            spec: manifest.spec.clone(),
        };
        ds.check()?;
        if ds.len() != manifest.count || ds.image_shape() != manifest.image {
            return Err(Error::dim(format!(
                "archive holds {} images of {:?}, manifest declares {} of {:?}",
                ds.len(),
                ds.image_shape(),
                manifest.count,
                manifest.image
            )));
        }
        Ok(ds)
    }
}

pub const DATASET_FORMAT: &str = "dualglow-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub count: usize,
    pub image: [usize; 3],
    pub labels: bool,
    pub spec: Option<DatasetSpec>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::config(format!("dataset manifest: {e}")))?;
        if m.format != DATASET_FORMAT {
            return Err(Error::config(format!("unsupported dataset format {:?}", m.format)));
        }
        if m.count == 0 || m.image.contains(&0) {
            return Err(Error::config("dataset manifest declares an empty archive"));
        }
        Ok(m)
    }
}
