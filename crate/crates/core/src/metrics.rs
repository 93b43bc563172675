//! Reconstruction-quality metrics: PSNR, SSIM, MS-SSIM, bits per pixel.
//!
//! All metrics operate on `[0, 1]` frames (inputs are clamped first) with a
//! dynamic range of 1, which matches 8-bit/255-scale conventions exactly.
//! SSIM uses the standard 11-tap Gaussian window (sigma 1.5) over valid
//! positions only; MS-SSIM downsamples by 2x2 average pooling and drops
//! scales that would fall under the window size, renormalizing the weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use serde::Serialize;

/// Zero-MSE convention: identical frames score this cap.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Standard five-scale MS-SSIM weights.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn clamp01(t: &Tensor3) -> Tensor3 {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// `10 log10(1 / MSE)` on clamped inputs, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("psnr", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let (ca, cb) = (clamp01(a), clamp01(b));
    let n = ca.len() as f64;
    let mse = ca
        .data()
        .iter()
        .zip(cb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Windowed first/second moments of one channel pair at every valid
/// position; returns the per-position `(luminance, contrast-structure)`
/// SSIM factors.
fn ssim_terms(a: &Tensor3, b: &Tensor3, c: usize) -> (Vec<f64>, Vec<f64>) {
    let win = gaussian_window();
    let (h, w) = (a.height(), a.width());
    let (vh, vw) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut lum = Vec::with_capacity(vh * vw);
    let mut cs = Vec::with_capacity(vh * vw);
    for y in 0..vh {
        for x in 0..vw {
            let (mut ma, mut mb) = (0.0, 0.0);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    let va = a.get(c, y + dy, x + dx);
                    let vb = b.get(c, y + dy, x + dx);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            lum.push((2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1));
            cs.push((2.0 * cov + c2) / (var_a + var_b + c2));
        }
    }
    (lum, cs)
}

/// Single-scale SSIM: mean local index over valid positions, averaged over
/// channels.
pub fn ssim(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    let (mean_ssim, _) = ssim_with_cs(a, b)?;
    Ok(mean_ssim)
}

/// `(mean ssim, mean contrast-structure)` for one scale.
fn ssim_with_cs(a: &Tensor3, b: &Tensor3) -> Result<(f64, f64)> {
    if !a.same_shape(b) {
        return Err(Error::shape("ssim", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs both spatial dims >= {SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let (ca, cb) = (clamp01(a), clamp01(b));
    let mut total_ssim = 0.0;
    let mut total_cs = 0.0;
    for c in 0..ca.channels() {
        let (lum, cs) = ssim_terms(&ca, &cb, c);
        let n = lum.len() as f64;
        total_ssim += lum.iter().zip(&cs) .map(|(l, s)| l * s).sum::<f64>() / n;
        total_cs += cs.iter().sum::<f64>() / n;
    }
    let ch = ca.channels() as f64;
    Ok((total_ssim / ch, total_cs / ch))
}

/// 2x2 average pooling (floor semantics on odd dims).
fn downsample2(t: &Tensor3) -> Tensor3 {
    let (h, w) = (t.height() / 2, t.width() / 2);
    let mut out = Tensor3::zeros(t.channels(), h, w);
    for c in 0..t.channels() {
        for y in 0..h {
            for x in 0..w {
                let s = t.get(c, 2 * y, 2 * x)
                    + t.get(c, 2 * y, 2 * x + 1)
                    + t.get(c, 2 * y + 1, 2 * x)
                    + t.get(c, 2 * y + 1, 2 * x + 1);
                out.set(c, y, x, 0.25 * s);
            }
        }
    }
    out
}

/// How many MS-SSIM scales fit a frame: each scale halves the spatial dims
/// and still needs the full SSIM window.
pub fn ms_ssim_scales(height: usize, width: usize) -> usize {
    let mut scales = 0;
    let (mut h, mut w) = (height, width);
    while scales < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    scales
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MsSsimScore {
    pub value: f64,
    /// Scales actually used (5 needs min dim >= 176).
    pub scales: usize,
}

/// Multi-scale SSIM: contrast-structure terms at the coarser scales, the
/// full SSIM at the last, weights renormalized to the usable scale count.
/// Negative factors are clamped to zero before exponentiation.
pub fn ms_ssim(a: &Tensor3, b: &Tensor3) -> Result<MsSsimScore> {
    let scales = ms_ssim_scales(a.height(), a.width());
    if scales == 0 {
        return Err(Error::InvalidArgument(format!(
            "frame {}x{} too small for any ms-ssim scale",
            a.height(),
            a.width()
        )));
    }
    let weight_sum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut value = 1.0;
    let (mut ca, mut cb) = (clamp01(a), clamp01(b));
    for s in 0..scales {
        let w = MS_SSIM_WEIGHTS[s] / weight_sum;
        let (ssim_s, cs_s) = ssim_with_cs(&ca, &cb)?;
        let factor = if s + 1 == scales { ssim_s } else { cs_s };
        value *= factor.max(0.0).powf(w);
        if s + 1 < scales {
            ca = downsample2(&ca);
            cb = downsample2(&cb);
        }
    }
    Ok(MsSsimScore { value, scales })
}

/// `(model_bits + embedding_bits) / (T * H * W)`.
pub fn bpp(model_bits: u64, embedding_bits: u64, frames: usize, height: usize, width: usize) -> f64 {
    (model_bits + embedding_bits) as f64 / (frames * height * width) as f64
}

// ---- per-clip report -----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    /// 1-based frame indices the report covers.
    pub frame_indices: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub ms_ssim: Vec<f64>,
    pub ms_ssim_scales: usize,
    pub avg_psnr: f64,
    pub avg_ssim: f64,
    pub avg_ms_ssim: f64,
}

impl QualityReport {
    /// Score `pred[i]` against `target[i]` per frame; averages are plain
    /// arithmetic means.
    pub fn compare(
        frame_indices: Vec<usize>,
        preds: &[Tensor3],
        targets: &[Tensor3],
    ) -> Result<QualityReport> {
        if preds.len() != targets.len() || preds.len() != frame_indices.len() {
            return Err(Error::InvalidArgument("mismatched report lengths".into()));
        }
        let mut psnr_v = Vec::with_capacity(preds.len());
        let mut ssim_v = Vec::with_capacity(preds.len());
        let mut ms_v = Vec::with_capacity(preds.len());
        let mut scales = 0;
        for (p, t) in preds.iter().zip(targets) {
            psnr_v.push(psnr(p, t)?);
            ssim_v.push(ssim(p, t)?);
            let ms = ms_ssim(p, t)?;
            scales = ms.scales;
            ms_v.push(ms.value);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(QualityReport {
            avg_psnr: mean(&psnr_v),
            avg_ssim: mean(&ssim_v),
            avg_ms_ssim: mean(&ms_v),
            frame_indices,
            psnr: psnr_v,
            ssim: ssim_v,
            ms_ssim: ms_v,
            ms_ssim_scales: scales,
        })
    }
}
