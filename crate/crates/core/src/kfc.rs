//! Kronecker fully-connected upscaling.
//!
//! A KFc layer rescales a `C x H_in x W_in` map to `C x H_out x W_out` by a
//! per-channel bilinear product `K1 X K2` plus a rank-1 separable bias
//! `b_c (x) b_h (x) b_w`. Per channel this equals the dense linear map
//! `K1 (x) K2^T` acting on the row-major vectorized input, which is what
//! makes the operator a factorized stand-in for a full fully-connected
//! upscaler: the kernels grow with `H_out*H_in + W_in*W_out` instead of
//! `H_out*W_out*H_in*W_in`, so it stays affordable at extreme scaling
//! ratios where subpixel-filling operators blow up.
//!
//! [`kfc_dense_oracle`] materializes the dense equivalent; it exists for
//! verification and is quadratically bigger than the factorized form.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor3;
use rand_chacha::ChaCha8Rng;

/// Learnable state of one KFc layer.
///
/// `k1` is `(C, H_out, H_in)`, `k2` is `(C, W_in, W_out)`; the bias vectors
/// have lengths `C`, `H_out`, `W_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct KFcParams {
    pub k1: Tensor3,
    pub k2: Tensor3,
    pub b_c: Vec<f64>,
    pub b_h: Vec<f64>,
    pub b_w: Vec<f64>,
}

/// Static shape of a KFc application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KfcShape {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl KfcShape {
    pub fn infer(k1: &Tensor3, k2: &Tensor3) -> Result<Self> {
        if k1.channels() != k2.channels() {
            return Err(Error::shape(
                "kfc kernel channels",
                format!("{}", k1.channels()),
                format!("{}", k2.channels()),
            ));
        }
        Ok(KfcShape {
            channels: k1.channels(),
            in_h: k1.width(),
            in_w: k2.height(),
            out_h: k1.height(),
            out_w: k2.width(),
        })
    }
}

impl KFcParams {
    pub fn zeros(channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        KFcParams {
            k1: Tensor3::zeros(channels, out_h, in_h),
            k2: Tensor3::zeros(channels, in_w, out_w),
            b_c: vec![0.0; channels],
            b_h: vec![0.0; out_h],
            b_w: vec![0.0; out_w],
        }
    }

    /// Kaiming-normal kernels (fan-out over `(C, rows, cols)` tensors:
    /// `C * cols`), zero bias vectors.
    pub fn init(
        rng: &mut ChaCha8Rng,
        channels: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        let mut p = KFcParams::zeros(channels, in_h, in_w, out_h, out_w);
        let k1_draw = rng::kaiming_normal(rng, channels * in_h, p.k1.len());
        p.k1.data_mut().copy_from_slice(&k1_draw);
        let k2_draw = rng::kaiming_normal(rng, channels * out_w, p.k2.len());
        p.k2.data_mut().copy_from_slice(&k2_draw);
        p
    }

    pub fn shape(&self) -> KfcShape {
        KfcShape {
            channels: self.k1.channels(),
            in_h: self.k1.width(),
            in_w: self.k2.height(),
            out_h: self.k1.height(),
            out_w: self.k2.width(),
        }
    }

    fn validate(&self) -> Result<KfcShape> {
        let s = KfcShape::infer(&self.k1, &self.k2)?;
        if self.b_c.len() != s.channels || self.b_h.len() != s.out_h || self.b_w.len() != s.out_w {
            return Err(Error::shape(
                "kfc bias lengths",
                format!("({}, {}, {})", s.channels, s.out_h, s.out_w),
                format!("({}, {}, {})", self.b_c.len(), self.b_h.len(), self.b_w.len()),
            ));
        }
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        self.k1.len() + self.k2.len() + self.b_c.len() + self.b_h.len() + self.b_w.len()
    }
}

// ---- small row-major matrix helpers ----------------------------------------

/// `a (m x k) * b (k x n)`.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// `a (m x k) * b^T (n x k)` -> `(m x n)`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a^T (k x m) * b (k x n)` -> `(m x n)`.
fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

// ---- forward / backward -----------------------------------------------------

/// `out_i = K1_i x_i K2_i + b_c[i] * (b_h b_w^T)` per channel `i`.
pub fn kfc_forward(x: &Tensor3, p: &KFcParams) -> Result<Tensor3> {
    let shape = p.validate()?;
    kfc_forward_parts(x, &p.k1, &p.k2, &p.b_c, &p.b_h, &p.b_w, shape)
}

pub fn kfc_forward_parts(
    x: &Tensor3,
    k1: &Tensor3,
    k2: &Tensor3,
    b_c: &[f64],
    b_h: &[f64],
    b_w: &[f64],
    s: KfcShape,
) -> Result<Tensor3> {
    if x.shape() != (s.channels, s.in_h, s.in_w) {
        return Err(Error::shape(
            "kfc input",
            format!("({}, {}, {})", s.channels, s.in_h, s.in_w),
            format!("{:?}", x.shape()),
        ));
    }
    let mut out = Tensor3::zeros(s.channels, s.out_h, s.out_w);
    let plane = s.out_h * s.out_w;
    for c in 0..s.channels {
        let k1x = mm(k1.channel(c), s.out_h, s.in_h, x.channel(c), s.in_w);
        let mut z = mm(&k1x, s.out_h, s.in_w, k2.channel(c), s.out_w);
        let bc = b_c[c];
        for h in 0..s.out_h {
            let bh = b_h[h] * bc;
            for w in 0..s.out_w {
                z[h * s.out_w + w] += bh * b_w[w];
            }
        }
        out.data_mut()[c * plane..(c + 1) * plane].copy_from_slice(&z);
    }
    Ok(out)
}

/// Gradients of [`kfc_forward_parts`] with respect to every operand.
pub struct KfcGrads {
    pub x: Tensor3,
    pub k1: Tensor3,
    pub k2: Tensor3,
    pub b_c: Vec<f64>,
    pub b_h: Vec<f64>,
    pub b_w: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn kfc_backward(
    gout: &Tensor3,
    x: &Tensor3,
    k1: &Tensor3,
    k2: &Tensor3,
    b_c: &[f64],
    b_h: &[f64],
    b_w: &[f64],
    s: KfcShape,
) -> KfcGrads {
    let mut gx = Tensor3::zeros(s.channels, s.in_h, s.in_w);
    let mut gk1 = Tensor3::zeros(s.channels, s.out_h, s.in_h);
    let mut gk2 = Tensor3::zeros(s.channels, s.in_w, s.out_w);
    let mut gbc = vec![0.0; s.channels];
    let mut gbh = vec![0.0; s.out_h];
    let mut gbw = vec![0.0; s.out_w];

    for c in 0..s.channels {
        let g = gout.channel(c);
        let xc = x.channel(c);
        let k1c = k1.channel(c);
        let k2c = k2.channel(c);

        // dK1 = G (X K2)^T, dK2 = (K1 X)^T G, dX = K1^T G K2^T.
        let xk2 = mm(xc, s.in_h, s.in_w, k2c, s.out_w);
        let dk1 = mm_nt(g, s.out_h, s.out_w, &xk2, s.in_h);
        let k1x = mm(k1c, s.out_h, s.in_h, xc, s.in_w);
        let dk2 = mm_tn(&k1x, s.out_h, s.in_w, g, s.out_w);
        let gk2t = mm_nt(g, s.out_h, s.out_w, k2c, s.in_w);
        let dx = mm_tn(k1c, s.out_h, s.in_h, &gk2t, s.in_w);

        gk1.data_mut()[c * s.out_h * s.in_h..(c + 1) * s.out_h * s.in_h].copy_from_slice(&dk1);
        gk2.data_mut()[c * s.in_w * s.out_w..(c + 1) * s.in_w * s.out_w].copy_from_slice(&dk2);
        gx.data_mut()[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w].copy_from_slice(&dx);

        for h in 0..s.out_h {
            for w in 0..s.out_w {
                let gv = g[h * s.out_w + w];
                gbc[c] += gv * b_h[h] * b_w[w];
                gbh[h] += gv * b_c[c] * b_w[w];
                gbw[w] += gv * b_c[c] * b_h[h];
            }
        }
    }
    KfcGrads { x: gx, k1: gk1, k2: gk2, b_c: gbc, b_h: gbh, b_w: gbw }
}

/// Separable bias tensor: `out(c, h, w) = b_c[c] * b_h[h] * b_w[w]`.
pub fn kfc_bias(b_c: &[f64], b_h: &[f64], b_w: &[f64]) -> Tensor3 {
    let mut out = Tensor3::zeros(b_c.len(), b_h.len(), b_w.len());
    for (c, &bc) in b_c.iter().enumerate() {
        for (h, &bh) in b_h.iter().enumerate() {
            for (w, &bw) in b_w.iter().enumerate() {
                out.set(c, h, w, bc * bh * bw);
            }
        }
    }
    out
}

/// Dense `(H_out*W_out) x (H_in*W_in)` equivalent of one channel:
/// `K1 (x) K2^T` under row-major vectorization. Verification-only; the
/// factorized forward never materializes this.
pub fn kfc_dense_oracle(p: &KFcParams, channel: usize) -> Result<Vec<Vec<f64>>> {
    let s = p.validate()?;
    if channel >= s.channels {
        return Err(Error::OutOfRange(format!(
            "kfc channel {channel} out of {}",
            s.channels
        )));
    }
    let k1 = p.k1.channel(channel);
    let k2 = p.k2.channel(channel);
    let mut matrix = vec![vec![0.0; s.in_h * s.in_w]; s.out_h * s.out_w];
    for ho in 0..s.out_h {
        for wo in 0..s.out_w {
            let row = &mut matrix[ho * s.out_w + wo];
            for hi in 0..s.in_h {
                for wi in 0..s.in_w {
                    // (K1 (x) K2^T)[(ho,wo),(hi,wi)] = K1[ho,hi] * K2[wi,wo].
                    row[hi * s.in_w + wi] = k1[ho * s.in_h + hi] * k2[wi * s.out_w + wo];
                }
            }
        }
    }
    Ok(matrix)
}

// ---- parameter / FLOP budgets ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Kfc,
    PixelShuffle,
    Deconv,
    Bilinear,
}

/// Parameter and multiply-add budget of one upscaling operator.
///
/// `macs` are kernel multiply-adds; `extra_adds` covers bias application.
/// All counts are first-principles tallies of the reference loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct OperatorBudget {
    pub kind: OperatorKind,
    pub kernel_params: u64,
    pub bias_params: u64,
    pub macs: u64,
    pub extra_adds: u64,
}

impl OperatorBudget {
    pub fn total_params(&self) -> u64 {
        self.kernel_params + self.bias_params
    }

    pub fn total_flops(&self) -> u64 {
        self.macs + self.extra_adds
    }
}

/// KFc budget for `(c, in_h, in_w) -> (c, out_h, out_w)`.
pub fn kfc_param_count(c: u64, in_h: u64, in_w: u64, out_h: u64, out_w: u64) -> OperatorBudget {
    OperatorBudget {
        kind: OperatorKind::Kfc,
        kernel_params: c * (out_h * in_h + in_w * out_w),
        bias_params: c + out_h + out_w,
        // Two chained per-channel matrix products, then the rank-1 bias add.
        macs: c * (out_h * in_h * in_w + out_h * in_w * out_w),
        extra_adds: c * out_h * out_w,
    }
}

/// PixelShuffle budget: a `k x k` conv expanding `c -> c*r^2` channels feeds
/// the subpixel rearrangement. Parameters are spatial-independent; multiply
/// counts are per input map `in_h x in_w` (zero here, see
/// [`pixelshuffle_flops`]).
pub fn pixelshuffle_param_count(c: u64, k: u64, r: u64) -> OperatorBudget {
    OperatorBudget {
        kind: OperatorKind::PixelShuffle,
        kernel_params: c * r * r * c * k * k,
        bias_params: c * r * r,
        macs: 0,
        extra_adds: 0,
    }
}

pub fn pixelshuffle_flops(c: u64, k: u64, r: u64, in_h: u64, in_w: u64) -> OperatorBudget {
    let mut b = pixelshuffle_param_count(c, k, r);
    b.macs = c * r * r * c * k * k * in_h * in_w;
    b.extra_adds = c * r * r * in_h * in_w;
    b
}

/// Stride-matched transposed conv (`kernel = stride = r`), `c -> c` channels.
pub fn deconv_budget(c: u64, r: u64, in_h: u64, in_w: u64) -> OperatorBudget {
    OperatorBudget {
        kind: OperatorKind::Deconv,
        kernel_params: c * c * r * r,
        bias_params: c,
        macs: c * c * r * r * in_h * in_w,
        extra_adds: c * in_h * r * in_w * r,
    }
}

/// Bilinear upsampling (4 taps per output sample) followed by a `k x k` conv.
pub fn bilinear_budget(c: u64, k: u64, r: u64, in_h: u64, in_w: u64) -> OperatorBudget {
    let (oh, ow) = (in_h * r, in_w * r);
    OperatorBudget {
        kind: OperatorKind::Bilinear,
        kernel_params: c * c * k * k,
        bias_params: c,
        macs: 4 * c * oh * ow + c * c * k * k * oh * ow,
        extra_adds: c * oh * ow,
    }
}
