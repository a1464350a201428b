//! Image-pair quality metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Data range of images normalized to `[−1, 1]`.
pub const SSIM_DATA_RANGE: f64 = 2.0;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.numel() as f64)
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(range² / MSE)`; identical inputs give `+∞`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::contract(format!("data range must be positive, got {data_range}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Mean SSIM over every valid 7×7 window of every plane, uniform weights,
/// `k1 = 0.01`, `k2 = 0.03` and the given data range. The last two axes are
/// spatial; all leading axes are treated as independent planes.
pub fn ssim_with_range<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let r = a.rank();
    if r < 2 {
        return Err(Error::dim(format!("ssim needs at least 2 dims, got {:?}", a.shape())));
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs spatial dims ≥ {SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (y + dy) * w + x + dx;
                        let (u, v) = (pa[i].as_f64(), pb[i].as_f64());
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with_range(a, b, SSIM_DATA_RANGE)
}

/// Pearson correlation of the flattened values.
pub fn corcoef<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    let ma = a.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mb = b.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (u, v) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += u * v;
        saa += u * u;
        sbb += v * v;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::numeric("corcoef", "undefined for a constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Per-image metrics of one prediction against its reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub corcoef: f64,
}

pub fn pair_metrics<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<PairMetrics> {
    Ok(PairMetrics {
        mae: mae(pred, truth)?,
        psnr: psnr(pred, truth, SSIM_DATA_RANGE)?,
        ssim: ssim(pred, truth)?,
        corcoef: corcoef(pred, truth)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub count: usize,
    pub mae: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
    pub corcoef: Stat,
    pub per_sample: Vec<PairMetrics>,
}

impl MetricReport {
    /// Scores each sample of two `[N, C, H, W]` stacks, in parallel.
    pub fn evaluate<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<MetricReport> {
        same_shape(pred, truth)?;
        let n = pred.dims4()?.0;
        let per_sample = (0..n)
            .into_par_iter()
            .map(|i| pair_metrics(&pred.sample(i)?, &truth.sample(i)?).map_err(|e| e.context(format!("sample {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pairs(per_sample))
    }

    pub fn from_pairs(per_sample: Vec<PairMetrics>) -> MetricReport {
        let col = |f: fn(&PairMetrics) -> f64| Stat::of(&per_sample.iter().map(f).collect::<Vec<_>>());
        MetricReport {
            count: per_sample.len(),
            mae: col(|m| m.mae),
            psnr: col(|m| m.psnr),
            ssim: col(|m| m.ssim),
            corcoef: col(|m| m.corcoef),
            per_sample,
        }
    }

    /// `metric,mean,std` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        for (name, s) in [("mae", self.mae), ("psnr", self.psnr), ("ssim", self.ssim), ("corcoef", self.corcoef)] {
            out.push_str(&format!("{name},{},{}\n", s.mean, s.std));
        }
        out
    }
}
