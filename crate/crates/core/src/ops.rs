//! Pure forward kernels and their adjoints.
//!
//! These are the building blocks the autodiff tape records. Each op is a
//! plain function over immutable inputs; the tape wrappers in [`crate::tape`]
//! call the same functions, so a forward pass produces identical values
//! whether or not gradients are being tracked.
//!
//! Geometry conventions:
//! - `conv2d`: `out = floor((in + 2*pad - k)/stride) + 1`, zero padding.
//! - `deconv2d` is the exact adjoint of `conv2d` in the same geometry:
//!   `out = (in - 1)*stride - 2*pad + k`.
//! - `pixel_shuffle`: `out(c, h*r+i, w*r+j) = in(c*r^2 + i*r + j, h, w)`.
//! - `bilinear_upsample`: align-corners-false sampling with edge clamping.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

// ---- convolution parameters -------------------------------------------------

/// A convolution kernel plus optional bias.
///
/// The weight is logically rank-4, `(out, in, k, k)`, stored as a
/// `Tensor3` with `out*in` channels of `k x k` planes. `conv2d` maps
/// `in -> out` channels; `deconv2d` runs the same weight in the adjoint
/// direction, mapping `out -> in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor3,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// Empty means no bias. Length `out_channels` for `conv2d`,
    /// `in_channels` for `deconv2d`.
    pub bias: Vec<f64>,
}

impl ConvParams {
    /// Zero-initialized conv kernel. Odd kernel sizes only.
    pub fn conv(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be odd and positive, got {kernel}"
            )));
        }
        Ok(ConvParams {
            weight: Tensor3::zeros(out_channels * in_channels, kernel, kernel),
            out_channels,
            in_channels,
            kernel,
            bias: vec![0.0; out_channels],
        })
    }

    /// Zero-initialized transposed-conv kernel mapping `from -> to` channels.
    /// Any positive kernel size (stride-matched even kernels are common).
    pub fn deconv(from: usize, to: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::InvalidArgument("deconv kernel must be positive".into()));
        }
        Ok(ConvParams {
            weight: Tensor3::zeros(from * to, kernel, kernel),
            out_channels: from,
            in_channels: to,
            kernel,
            bias: vec![0.0; to],
        })
    }

    /// Same geometry, no bias term. Used where the adjoint pairing
    /// `conv2d(.)/deconv2d(.)` must share one parameter set.
    pub fn without_bias(mut self) -> Self {
        self.bias.clear();
        self
    }

    #[inline]
    pub fn w(&self, o: usize, c: usize, u: usize, v: usize) -> f64 {
        self.weight.get(o * self.in_channels + c, u, v)
    }

    pub fn weight_elems(&self) -> usize {
        self.weight.len()
    }
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn check_conv_bias(p: &ConvParams) -> Result<()> {
    if !p.bias.is_empty() && p.bias.len() != p.out_channels {
        return Err(Error::shape(
            "conv2d bias",
            format!("{}", p.out_channels),
            format!("{}", p.bias.len()),
        ));
    }
    Ok(())
}

/// Geometry of one conv/deconv application. The tape stores this next to the
/// variable ids of the weight and bias, so kernels can run against tensors
/// borrowed from its arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn of(p: &ConvParams, stride: usize, padding: usize) -> Self {
        ConvGeom {
            out_channels: p.out_channels,
            in_channels: p.in_channels,
            kernel: p.kernel,
            stride,
            padding,
        }
    }

    #[inline]
    fn w(&self, weight: &Tensor3, o: usize, c: usize, u: usize, v: usize) -> f64 {
        weight.get(o * self.in_channels + c, u, v)
    }
}

// ---- conv2d ------------------------------------------------------------------

pub fn conv2d(x: &Tensor3, p: &ConvParams, stride: usize, padding: usize) -> Result<Tensor3> {
    check_conv_bias(p)?;
    let bias = if p.bias.is_empty() { None } else { Some(p.bias.as_slice()) };
    conv2d_parts(x, &p.weight, bias, ConvGeom::of(p, stride, padding))
}

pub fn conv2d_parts(
    x: &Tensor3,
    weight: &Tensor3,
    bias: Option<&[f64]>,
    g: ConvGeom,
) -> Result<Tensor3> {
    if x.channels() != g.in_channels {
        return Err(Error::shape(
            "conv2d input channels",
            format!("{}", g.in_channels),
            format!("{}", x.channels()),
        ));
    }
    if g.stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if g.stride == 1 && g.padding != (g.kernel - 1) / 2 {
        return Err(Error::InvalidArgument(format!(
            "stride-1 conv2d must be shape preserving: padding {} != (k-1)/2 = {}",
            g.padding,
            (g.kernel - 1) / 2
        )));
    }
    let out_h = conv_out_dim(x.height(), g.kernel, g.stride, g.padding)?;
    let out_w = conv_out_dim(x.width(), g.kernel, g.stride, g.padding)?;
    let (in_h, in_w) = (x.height(), x.width());
    let mut out = Tensor3::zeros(g.out_channels, out_h, out_w);
    for o in 0..g.out_channels {
        let out_plane = {
            let plane = out_h * out_w;
            &mut out.data_mut()[o * plane..(o + 1) * plane]
        };
        if let Some(b) = bias {
            out_plane.fill(b[o]);
        }
        for c in 0..g.in_channels {
            let x_plane = x.channel(c);
            for u in 0..g.kernel {
                for v in 0..g.kernel {
                    let wv = weight.get(o * g.in_channels + c, u, v);
                    if wv == 0.0 {
                        continue;
                    }
                    // Rows/cols of the output whose tap (u, v) lands inside
                    // the unpadded input.
                    let (i_lo, i_hi) = tap_range(out_h, in_h, g.stride, g.padding, u);
                    let (j_lo, j_hi) = tap_range(out_w, in_w, g.stride, g.padding, v);
                    for i in i_lo..i_hi {
                        let y = i * g.stride + u - g.padding;
                        let x_row = &x_plane[y * in_w..(y + 1) * in_w];
                        let out_row = &mut out_plane[i * out_w..(i + 1) * out_w];
                        let base = v.wrapping_sub(g.padding);
                        for j in j_lo..j_hi {
                            out_row[j] += wv * x_row[(j * g.stride).wrapping_add(base)];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output index range `[lo, hi)` along one axis for which
/// `idx * stride + tap - padding` falls inside `[0, in_dim)`.
#[inline]
fn tap_range(out_dim: usize, in_dim: usize, stride: usize, padding: usize, tap: usize) -> (usize, usize) {
    let lo = if tap >= padding { 0 } else { (padding - tap).div_ceil(stride) };
    // Largest idx with idx*stride + tap - padding <= in_dim - 1.
    let hi = if in_dim + padding > tap {
        (((in_dim + padding - tap - 1) / stride) + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Scatter adjoint of [`conv2d`] with respect to its input: distributes an
/// `(out_channels, oh, ow)` map back onto an `(in_channels, in_h, in_w)` grid.
pub fn conv2d_input_scatter(
    gout: &Tensor3,
    weight: &Tensor3,
    g: ConvGeom,
    in_h: usize,
    in_w: usize,
) -> Tensor3 {
    let (oh, ow) = (gout.height(), gout.width());
    let mut gin = Tensor3::zeros(g.in_channels, in_h, in_w);
    for c in 0..g.in_channels {
        let gin_plane = {
            let plane = in_h * in_w;
            &mut gin.data_mut()[c * plane..(c + 1) * plane]
        };
        for o in 0..g.out_channels {
            let g_plane = gout.channel(o);
            for u in 0..g.kernel {
                for v in 0..g.kernel {
                    let wv = weight.get(o * g.in_channels + c, u, v);
                    if wv == 0.0 {
                        continue;
                    }
                    let (i_lo, i_hi) = tap_range(oh, in_h, g.stride, g.padding, u);
                    let (j_lo, j_hi) = tap_range(ow, in_w, g.stride, g.padding, v);
                    for i in i_lo..i_hi {
                        let y = i * g.stride + u - g.padding;
                        let g_row = &g_plane[i * ow..(i + 1) * ow];
                        let gin_row = &mut gin_plane[y * in_w..(y + 1) * in_w];
                        let base = v.wrapping_sub(g.padding);
                        for j in j_lo..j_hi {
                            gin_row[(j * g.stride).wrapping_add(base)] += wv * g_row[j];
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of a conv-style contraction with respect to the weight:
/// `dW(o,c,u,v) = sum_{i,j} out_stream(o,i,j) * in_stream(c, i*s-p+u, j*s-p+v)`.
/// For `conv2d`, `out_stream` is the upstream gradient and `in_stream` the
/// saved input; for `deconv2d` the roles are the deconv input and the
/// upstream gradient.
pub fn conv2d_weight_grad(
    out_stream: &Tensor3,
    in_stream: &Tensor3,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Tensor3 {
    let co = out_stream.channels();
    let ci = in_stream.channels();
    let (oh, ow) = (out_stream.height(), out_stream.width());
    let (in_h, in_w) = (in_stream.height(), in_stream.width());
    let mut gw = Tensor3::zeros(co * ci, kernel, kernel);
    for o in 0..co {
        let g_plane = out_stream.channel(o);
        for c in 0..ci {
            let x_plane = in_stream.channel(c);
            for u in 0..kernel {
                for v in 0..kernel {
                    let (i_lo, i_hi) = tap_range(oh, in_h, stride, padding, u);
                    let (j_lo, j_hi) = tap_range(ow, in_w, stride, padding, v);
                    let mut acc = 0.0;
                    for i in i_lo..i_hi {
                        let y = i * stride + u - padding;
                        let g_row = &g_plane[i * ow..(i + 1) * ow];
                        let x_row = &x_plane[y * in_w..(y + 1) * in_w];
                        let base = v.wrapping_sub(padding);
                        for j in j_lo..j_hi {
                            acc += g_row[j] * x_row[(j * stride).wrapping_add(base)];
                        }
                    }
                    gw.set(o * ci + c, u, v, acc);
                }
            }
        }
    }
    gw
}

/// Per-channel sums, the bias gradient of both conv ops.
pub fn channel_sums(t: &Tensor3) -> Vec<f64> {
    (0..t.channels()).map(|c| t.channel(c).iter().sum()).collect()
}

// ---- deconv2d ----------------------------------------------------------------

/// Transposed convolution: the adjoint of [`conv2d`] under the same weight
/// and geometry, plus an optional bias over its own output channels.
pub fn deconv2d(x: &Tensor3, p: &ConvParams, stride: usize, padding: usize) -> Result<Tensor3> {
    if !p.bias.is_empty() && p.bias.len() != p.in_channels {
        return Err(Error::shape(
            "deconv2d bias",
            format!("{}", p.in_channels),
            format!("{}", p.bias.len()),
        ));
    }
    let bias = if p.bias.is_empty() { None } else { Some(p.bias.as_slice()) };
    deconv2d_parts(x, &p.weight, bias, ConvGeom::of(p, stride, padding))
}

pub fn deconv2d_parts(
    x: &Tensor3,
    weight: &Tensor3,
    bias: Option<&[f64]>,
    g: ConvGeom,
) -> Result<Tensor3> {
    if x.channels() != g.out_channels {
        return Err(Error::shape(
            "deconv2d input channels",
            format!("{}", g.out_channels),
            format!("{}", x.channels()),
        ));
    }
    if g.stride == 0 {
        return Err(Error::InvalidArgument("deconv2d stride must be positive".into()));
    }
    let span = |n: usize| -> Result<usize> {
        ((n - 1) * g.stride + g.kernel)
            .checked_sub(2 * g.padding)
            .ok_or_else(|| Error::InvalidArgument("deconv2d padding exceeds output extent".into()))
    };
    let out_h = span(x.height())?;
    let out_w = span(x.width())?;
    let mut out = conv2d_input_scatter(x, weight, g, out_h, out_w);
    if let Some(bias) = bias {
        let plane = out.height() * out.width();
        for c in 0..out.channels() {
            let b = bias[c];
            for idx in 0..plane {
                out.data_mut()[c * plane + idx] += b;
            }
        }
    }
    Ok(out)
}

// ---- pixel shuffle -----------------------------------------------------------

pub fn pixel_shuffle(x: &Tensor3, r: usize) -> Result<Tensor3> {
    if r == 0 {
        return Err(Error::InvalidArgument("pixel_shuffle rate must be positive".into()));
    }
    if x.channels() % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            x.channels(),
            r * r
        )));
    }
    let co = x.channels() / (r * r);
    let mut out = Tensor3::zeros(co, x.height() * r, x.width() * r);
    for c in 0..co {
        for h in 0..x.height() {
            for w in 0..x.width() {
                for i in 0..r {
                    for j in 0..r {
                        out.set(c, h * r + i, w * r + j, x.get(c * r * r + i * r + j, h, w));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`] under the same channel ordering.
pub fn pixel_unshuffle(x: &Tensor3, r: usize) -> Result<Tensor3> {
    if r == 0 {
        return Err(Error::InvalidArgument("pixel_unshuffle rate must be positive".into()));
    }
    if x.height() % r != 0 || x.width() % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_unshuffle: {}x{} not divisible by r = {r}",
            x.height(),
            x.width()
        )));
    }
    let (h, w) = (x.height() / r, x.width() / r);
    let mut out = Tensor3::zeros(x.channels() * r * r, h, w);
    for c in 0..x.channels() {
        for hh in 0..h {
            for ww in 0..w {
                for i in 0..r {
                    for j in 0..r {
                        out.set(c * r * r + i * r + j, hh, ww, x.get(c, hh * r + i, ww * r + j));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---- bilinear upsampling -----------------------------------------------------

/// Source coordinate and blend weights for one output index,
/// align-corners-false with edge clamping.
#[inline]
fn bilinear_taps(out_idx: usize, rate: usize, in_dim: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / rate as f64 - 0.5;
    let src = src.clamp(0.0, (in_dim - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_dim - 1);
    (lo, hi, src - lo as f64)
}

pub fn bilinear_upsample(x: &Tensor3, r: usize) -> Result<Tensor3> {
    if r == 0 {
        return Err(Error::InvalidArgument("bilinear rate must be positive".into()));
    }
    let (oh, ow) = (x.height() * r, x.width() * r);
    let mut out = Tensor3::zeros(x.channels(), oh, ow);
    for c in 0..x.channels() {
        for i in 0..oh {
            let (y0, y1, fy) = bilinear_taps(i, r, x.height());
            for j in 0..ow {
                let (x0, x1, fx) = bilinear_taps(j, r, x.width());
                let v = x.get(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + x.get(c, y0, x1) * (1.0 - fy) * fx
                    + x.get(c, y1, x0) * fy * (1.0 - fx)
                    + x.get(c, y1, x1) * fy * fx;
                out.set(c, i, j, v);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]: scatters an upstream gradient back onto
/// the source grid with the same blend weights.
pub fn bilinear_upsample_adjoint(gout: &Tensor3, r: usize, in_h: usize, in_w: usize) -> Tensor3 {
    let mut gin = Tensor3::zeros(gout.channels(), in_h, in_w);
    for c in 0..gout.channels() {
        for i in 0..gout.height() {
            let (y0, y1, fy) = bilinear_taps(i, r, in_h);
            for j in 0..gout.width() {
                let (x0, x1, fx) = bilinear_taps(j, r, in_w);
                let g = gout.get(c, i, j);
                gin.add_at(c, y0, x0, g * (1.0 - fy) * (1.0 - fx));
                gin.add_at(c, y0, x1, g * (1.0 - fy) * fx);
                gin.add_at(c, y1, x0, g * fy * (1.0 - fx));
                gin.add_at(c, y1, x1, g * fy * fx);
            }
        }
    }
    gin
}

// ---- activations ---------------------------------------------------------

pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn relu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU: `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    x.map(relu_scalar)
}

pub fn gelu(x: &Tensor3) -> Tensor3 {
    x.map(gelu_scalar)
}

pub fn sigmoid(x: &Tensor3) -> Tensor3 {
    x.map(sigmoid_scalar)
}

// ---- batch norm ------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel learned scale/shift plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Training-mode statistics of one `C x H x W` map: per-channel mean and
/// biased variance over the spatial extent (batch of one frame).
pub fn batch_stats(x: &Tensor3) -> (Vec<f64>, Vec<f64>) {
    let n = (x.height() * x.width()) as f64;
    let mut means = Vec::with_capacity(x.channels());
    let mut vars = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let plane = x.channel(c);
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// Normalize with explicit statistics, then scale/shift. Covers both modes:
/// training passes batch statistics, eval passes running statistics.
pub fn batch_norm_apply(
    x: &Tensor3,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<Tensor3> {
    if mean.len() != x.channels() || gamma.len() != x.channels() {
        return Err(Error::shape(
            "batch_norm channels",
            format!("{}", x.channels()),
            format!("{}/{}", mean.len(), gamma.len()),
        ));
    }
    let mut out = x.clone();
    let plane = x.height() * x.width();
    for c in 0..x.channels() {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let (g, b, m) = (gamma[c], beta[c], mean[c]);
        for idx in 0..plane {
            let i = c * plane + idx;
            out.data_mut()[i] = (x.data()[i] - m) * inv * g + b;
        }
    }
    Ok(out)
}

/// Fold fresh batch statistics into the running estimates. The running
/// variance uses the unbiased estimate, matching the usual framework default.
pub fn update_running_stats(state: &mut BatchNormState, mean: &[f64], var: &[f64], n_spatial: usize) {
    let n = n_spatial as f64;
    let unbias = if n_spatial > 1 { n / (n - 1.0) } else { 1.0 };
    for c in 0..state.running_mean.len() {
        state.running_mean[c] = (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean[c];
        state.running_var[c] =
            (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var[c] * unbias;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    fn random_conv(rng: &mut rand_chacha::ChaCha8Rng, co: usize, ci: usize, k: usize) -> ConvParams {
        let mut p = ConvParams::conv(co, ci, k).unwrap();
        for v in p.weight.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for b in p.bias.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn conv_identity_1x1() {
        let mut p = ConvParams::conv(1, 1, 1).unwrap();
        p.weight.data_mut()[0] = 1.0;
        let x = Tensor3::from_vec(1, 1, 1, vec![3.5]).unwrap();
        let y = conv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn conv_constant_interior_sums_nine() {
        let mut p = ConvParams::conv(1, 1, 3).unwrap();
        for v in p.weight.data_mut() {
            *v = 1.0;
        }
        let c = 0.7;
        let x = Tensor3::filled(1, 5, 5, c);
        let y = conv2d(&x, &p, 1, 1).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.get(0, i, j) - 9.0 * c).abs() < 1e-12);
            }
        }
        // Corner only covers a 2x2 patch of the padded input.
        assert!((y.get(0, 0, 0) - 4.0 * c).abs() < 1e-12);
    }

    /// Independent scatter-order oracle: accumulate every input tap into the
    /// outputs it reaches, instead of gathering per output pixel.
    fn conv_scatter_oracle(x: &Tensor3, p: &ConvParams, stride: usize, padding: usize) -> Tensor3 {
        let oh = (x.height() + 2 * padding - p.kernel) / stride + 1;
        let ow = (x.width() + 2 * padding - p.kernel) / stride + 1;
        let mut out = Tensor3::zeros(p.out_channels, oh, ow);
        for o in 0..p.out_channels {
            if !p.bias.is_empty() {
                for i in 0..oh {
                    for j in 0..ow {
                        out.add_at(o, i, j, p.bias[o]);
                    }
                }
            }
            for c in 0..p.in_channels {
                for y in 0..x.height() {
                    for xx in 0..x.width() {
                        for u in 0..p.kernel {
                            for v in 0..p.kernel {
                                let num_i = y + padding;
                                let num_j = xx + padding;
                                if num_i < u || num_j < v {
                                    continue;
                                }
                                let (di, dj) = (num_i - u, num_j - v);
                                if di % stride != 0 || dj % stride != 0 {
                                    continue;
                                }
                                let (i, j) = (di / stride, dj / stride);
                                if i < oh && j < ow {
                                    out.add_at(o, i, j, x.get(c, y, xx) * p.w(o, c, u, v));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_scatter_oracle() {
        let mut r = rng::seeded(11);
        let x = random_tensor(&mut r, 2, 4, 4);
        let p = random_conv(&mut r, 3, 2, 3);
        let got = conv2d(&x, &p, 1, 1).unwrap();
        let want = conv_scatter_oracle(&x, &p, 1, 1);
        assert!(got.max_abs_diff(&want) < 1e-12);

        let got2 = conv2d(&x, &p, 2, 0).unwrap();
        let want2 = conv_scatter_oracle(&x, &p, 2, 0);
        assert!(got2.max_abs_diff(&want2) < 1e-12);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        assert!(ConvParams::conv(1, 1, 2).is_err());
        let p = ConvParams::conv(1, 2, 3).unwrap();
        let x = Tensor3::zeros(3, 4, 4);
        assert!(conv2d(&x, &p, 1, 1).is_err());
    }

    #[test]
    fn deconv_stride1_identity_kernel() {
        let mut p = ConvParams::deconv(1, 1, 1).unwrap();
        p.weight.data_mut()[0] = 1.0;
        let x = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = deconv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn deconv_single_tap_spreads_value() {
        let mut p = ConvParams::deconv(1, 1, 2).unwrap();
        for v in p.weight.data_mut() {
            *v = 1.0;
        }
        let x = Tensor3::from_vec(1, 1, 1, vec![2.5]).unwrap();
        let y = deconv2d(&x, &p, 2, 0).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    /// Dense-matrix route: probe conv2d column by column, then check that
    /// deconv2d applies the transpose.
    #[test]
    fn deconv_is_transpose_of_conv_matrix() {
        let mut r = rng::seeded(5);
        // (in + 2*pad - k) divisible by the stride, so the deconv output
        // extent matches the conv input exactly.
        let (ci, h, w) = (2, 5, 7);
        let p = random_conv(&mut r, 3, ci, 3).without_bias();
        let (stride, padding) = (2, 1);
        let probe = conv2d(&Tensor3::zeros(ci, h, w), &p, stride, padding).unwrap();
        let (co, oh, ow) = probe.shape();
        let n_in = ci * h * w;
        let n_out = co * oh * ow;
        let mut matrix = vec![vec![0.0; n_in]; n_out];
        for col in 0..n_in {
            let mut basis = Tensor3::zeros(ci, h, w);
            basis.data_mut()[col] = 1.0;
            let y = conv2d(&basis, &p, stride, padding).unwrap();
            for (row, item) in matrix.iter_mut().enumerate() {
                item[col] = y.data()[row];
            }
        }
        let y = random_tensor(&mut r, co, oh, ow);
        let got = deconv2d(&y, &p, stride, padding).unwrap();
        for col in 0..n_in {
            let want: f64 = (0..n_out).map(|row| matrix[row][col] * y.data()[row]).sum();
            assert!((got.data()[col] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_deconv_adjointness() {
        let mut r = rng::seeded(23);
        for &(ci, co, k, s, p_, h, w) in
            &[(1, 1, 3, 1, 1, 5, 5), (2, 3, 3, 2, 1, 6, 8), (3, 2, 1, 2, 0, 4, 6)]
        {
            let p = random_conv(&mut r, co, ci, k).without_bias();
            let x = random_tensor(&mut r, ci, h, w);
            let y_shape = conv2d(&x, &p, s, p_).unwrap();
            let y = random_tensor(&mut r, y_shape.channels(), y_shape.height(), y_shape.width());
            let lhs: f64 = conv2d(&x, &p, s, p_)
                .unwrap()
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| a * b)
                .sum();
            let back = conv2d_input_scatter(&y, &p.weight, ConvGeom::of(&p, s, p_), h, w);
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjointness broke: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn pixel_shuffle_definition_case() {
        let x = Tensor3::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.get(0, 0, 1), 2.0);
        assert_eq!(y.get(0, 1, 0), 3.0);
    }

    #[test]
    fn pixel_shuffle_r1_is_identity() {
        let x = Tensor3::from_vec(2, 2, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle() {
        let mut r = rng::seeded(3);
        let x = random_tensor(&mut r, 8, 3, 5);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let x = Tensor3::zeros(3, 2, 2);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let x = Tensor3::filled(2, 3, 3, 0.4);
        let y = bilinear_upsample(&x, 3).unwrap();
        assert_eq!(y.shape(), (2, 9, 9));
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let z = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_upsample(&z, 1).unwrap(), z);
    }

    #[test]
    fn bilinear_hand_evaluated_row() {
        let x = Tensor3::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        // Sample points (j'+0.5)/2 - 0.5 for j' = 0..3: -0.25, 0.25, 0.75, 1.25,
        // clamped into [0, 1].
        let want = [0.0, 0.25, 0.75, 1.0];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_point_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(relu_scalar(-1.0), 0.0);
        // Closed form evaluated with x = 1.
        assert!((gelu_scalar(1.0) - 0.8411919906082768).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_symmetry_and_range() {
        let mut r = rng::seeded(9);
        // Above ~|36| the complementary branch saturates to exactly 1.0 in f64.
        for _ in 0..100 {
            let x: f64 = r.gen_range(-30.0..30.0);
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0);
            assert!((s + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_monotone_where_claimed() {
        let mut r = rng::seeded(13);
        for _ in 0..200 {
            let a: f64 = r.gen_range(-10.0..10.0);
            let b: f64 = a + r.gen_range(0.0..3.0);
            assert!(relu_scalar(b) >= relu_scalar(a));
            assert!(sigmoid_scalar(b) >= sigmoid_scalar(a));
            if a > -0.75 {
                assert!(gelu_scalar(b) >= gelu_scalar(a), "gelu must be monotone above -0.75");
            }
        }
        // GELU genuinely dips left of its minimum.
        assert!(gelu_scalar(-0.8) < gelu_scalar(-3.0));
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut r = rng::seeded(17);
        // Large spread keeps eps/var below the 1e-6 variance tolerance.
        let x = random_tensor(&mut r, 3, 4, 5).scale(100.0);
        let (mean, var) = batch_stats(&x);
        let state = BatchNormState::new(3);
        let y = batch_norm_apply(&x, &mean, &var, &state.gamma, &state.beta, BN_EPS).unwrap();
        let (ym, yv) = batch_stats(&y);
        for c in 0..3 {
            assert!(ym[c].abs() < 1e-9);
            assert!((yv[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_constant_channel_goes_to_zero() {
        let x = Tensor3::filled(1, 3, 3, 5.0);
        let (mean, var) = batch_stats(&x);
        let state = BatchNormState::new(1);
        let y = batch_norm_apply(&x, &mean, &var, &state.gamma, &state.beta, BN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_norm_eval_is_frozen_affine() {
        let mut r = rng::seeded(19);
        let x = random_tensor(&mut r, 2, 3, 3);
        let state = BatchNormState {
            gamma: vec![1.5, -0.5],
            beta: vec![0.25, 1.0],
            running_mean: vec![0.1, -0.2],
            running_var: vec![0.9, 2.0],
        };
        let y = batch_norm_apply(
            &x,
            &state.running_mean,
            &state.running_var,
            &state.gamma,
            &state.beta,
            BN_EPS,
        )
        .unwrap();
        for c in 0..2 {
            let inv = 1.0 / (state.running_var[c] + BN_EPS).sqrt();
            for idx in 0..9 {
                let want = (x.channel(c)[idx] - state.running_mean[c]) * inv * state.gamma[c]
                    + state.beta[c];
                assert!((y.channel(c)[idx] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_update_uses_momentum() {
        let mut state = BatchNormState::new(1);
        update_running_stats(&mut state, &[1.0], &[4.0], 5);
        assert!((state.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.1 * 4.0 * 5.0 / 4.0)).abs() < 1e-12);
    }
}
