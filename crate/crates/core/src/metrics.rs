//! Image fidelity and vessel-morphology metrics.

use serde::Serialize;

use crate::components::label_components;
use crate::error::{Error, Result};
use crate::volume::{extract_slices, Axis, Image2D, Volume3D};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const OTSU_BINS: usize = 256;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("compared arrays have {a} and {b} elements")));
    }
    Ok(())
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP`] when the MSE is below 1e-12.
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data range must be > 0, got {data_range}")));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty arrays".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights).
pub fn ssim(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Shape(format!("images {}x{} and {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    if a.rows < SSIM_WINDOW || a.cols < SSIM_WINDOW {
        return Err(Error::Shape(format!("image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.rows, a.cols)));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=a.rows - SSIM_WINDOW {
        for q0 in 0..=a.cols - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for q in q0..q0 + SSIM_WINDOW {
                    let (x, y) = (a.get(r, q) as f64, b.get(r, q) as f64);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f32),
    Otsu,
}

/// Threshold maximizing the between-class variance of a 256-bin histogram.
/// Voxels `>= θ` are foreground.
pub fn otsu_threshold(values: &[f32]) -> Result<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || !(hi > lo) {
        return Err(Error::NoSeparation);
    }
    let width = (hi as f64 - lo as f64) / OTSU_BINS as f64;
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        let bin = (((v as f64 - lo as f64) / width) as usize).min(OTSU_BINS - 1);
        hist[bin] += 1;
    }
    let total = values.len() as f64;
    let center = |k: usize| lo as f64 + (k as f64 + 0.5) * width;
    let sum_all: f64 = (0..OTSU_BINS).map(|k| hist[k] as f64 * center(k)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for k in 0..OTSU_BINS - 1 {
        w0 += hist[k] as f64;
        sum0 += hist[k] as f64 * center(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    Ok((lo as f64 + (best_k + 1) as f64 * width) as f32)
}

/// Binary (0/1) mask of voxels at or above the threshold.
pub fn segment_vessels(v: &Volume3D, method: Threshold) -> Result<Volume3D> {
    if let Some(index) = v.voxels().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let theta = match method {
        Threshold::Fixed(t) => t,
        Threshold::Otsu => otsu_threshold(v.voxels())?,
    };
    v.map(|x| if x >= theta { 1.0 } else { 0.0 })
}

fn as_bits(v: &Volume3D) -> Result<Vec<bool>> {
    v.voxels()
        .iter()
        .enumerate()
        .map(|(index, &x)| match x {
            0.0 => Ok(false),
            1.0 => Ok(true),
            value => Err(Error::NotBinary { index, value }),
        })
        .collect()
}

fn overlap(a: &Volume3D, b: &Volume3D) -> Result<(f64, f64, f64)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mask dims {:?} and {:?}", a.dims(), b.dims())));
    }
    let (x, y) = (as_bits(a)?, as_bits(b)?);
    let inter = x.iter().zip(&y).filter(|(p, q)| **p && **q).count() as f64;
    let na = x.iter().filter(|p| **p).count() as f64;
    let nb = y.iter().filter(|p| **p).count() as f64;
    Ok((inter, na, nb))
}

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) })
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn jaccard(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

/// Topological coherence of a vessel mask on a 0-10 scale:
///
/// ```text
/// 10 · (0.6 · |largest| / |fg| + 0.3 / #components + 0.1 · (1 - exposed faces / (6 |fg|)))
/// ```
///
/// with 26-connected components. An empty mask scores 0.
pub fn connectivity_score(mask: &Volume3D) -> Result<f64> {
    let bits = as_bits(mask)?;
    let fg = bits.iter().filter(|b| **b).count();
    if fg == 0 {
        return Ok(0.0);
    }
    let dims = mask.dims();
    let (_, sizes) = label_components(&bits, dims, true);
    let largest = *sizes.iter().max().expect("nonempty mask has a component") as f64;
    let [d, h, w] = dims;
    let mut exposed = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !bits[(z * h + y) * w + x] {
                    continue;
                }
                let neighbors = [
                    (z.wrapping_sub(1), y, x),
                    (z + 1, y, x),
                    (z, y.wrapping_sub(1), x),
                    (z, y + 1, x),
                    (z, y, x.wrapping_sub(1)),
                    (z, y, x + 1),
                ];
                for (nz, ny, nx) in neighbors {
                    if nz >= d || ny >= h || nx >= w || !bits[(nz * h + ny) * w + nx] {
                        exposed += 1;
                    }
                }
            }
        }
    }
    let fg = fg as f64;
    let f_surface = 1.0 - exposed as f64 / (6.0 * fg);
    Ok(10.0 * (0.6 * largest / fg + 0.3 / sizes.len() as f64 + 0.1 * f_surface))
}

/// Scores a synthesized volume against the reference angiogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub connectivity: f64,
    pub n_slices: usize,
    pub slice_psnr: Vec<f64>,
    pub slice_ssim: Vec<f64>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields are finite numbers")
    }
}

/// PSNR over the whole volume, SSIM averaged over z-slices, and overlap and
/// connectivity of the segmented volumes.
pub fn evaluate(synth: &Volume3D, truth: &Volume3D, data_range: f64, method: Threshold) -> Result<MetricReport> {
    if synth.dims() != truth.dims() {
        return Err(Error::Shape(format!("volumes {:?} and {:?}", synth.dims(), truth.dims())));
    }
    let (sa, sb) = (extract_slices(synth, Axis::Z), extract_slices(truth, Axis::Z));
    let slice_psnr = sa.iter().zip(&sb).map(|(a, b)| psnr(&a.data, &b.data, data_range)).collect::<Result<Vec<_>>>()?;
    let slice_ssim = sa.iter().zip(&sb).map(|(a, b)| ssim(a, b, data_range)).collect::<Result<Vec<_>>>()?;
    let seg_synth = segment_vessels(synth, method)?;
    let seg_truth = segment_vessels(truth, method)?;
    Ok(MetricReport {
        psnr: psnr(synth.voxels(), truth.voxels(), data_range)?,
        ssim: slice_ssim.iter().sum::<f64>() / slice_ssim.len() as f64,
        dice: dice(&seg_synth, &seg_truth)?,
        jaccard: jaccard(&seg_synth, &seg_truth)?,
        connectivity: connectivity_score(&seg_synth)?,
        n_slices: sa.len(),
        slice_psnr,
        slice_ssim,
    })
}
