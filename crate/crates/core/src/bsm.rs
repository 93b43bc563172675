//! Gated fusion of a shortcut stream into the mainstream.
//!
//! Both streams are convolved separately before they meet: the shortcut
//! ("knowledge") through `w_n`, the mainstream ("memory") through `w_m`.
//! A sigmoid gate computed from their sum decides, per element, how much of
//! the shortcut replaces the raw mainstream:
//!
//! ```text
//! n = w_n * z          m = w_m * h_prev
//! s = sigmoid(w_s * relu(n + m))
//! out = h_prev (1 - s) + n s
//! ```
//!
//! The memory conv `m` reaches the output only through the gate; the
//! combination itself blends the raw `h_prev` with `n`.

use crate::error::{Error, Result};
use crate::ops::{ConvGeom, ConvParams};
use crate::rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor3;
use rand_chacha::ChaCha8Rng;

/// Learnable state of one fusion unit: `w_n` maps the shortcut's channels to
/// the mainstream width, `w_m` and `w_s` stay within the mainstream width.
#[derive(Debug, Clone, PartialEq)]
pub struct BSMParams {
    pub w_n: ConvParams,
    pub w_m: ConvParams,
    pub w_s: ConvParams,
}

impl BSMParams {
    pub fn zeros(shortcut_channels: usize, channels: usize, kernel: usize) -> Result<Self> {
        Ok(BSMParams {
            w_n: ConvParams::conv(channels, shortcut_channels, kernel)?,
            w_m: ConvParams::conv(channels, channels, kernel)?,
            w_s: ConvParams::conv(channels, channels, kernel)?,
        })
    }

    /// Kaiming-normal kernels, zero biases.
    pub fn init(
        rng: &mut ChaCha8Rng,
        shortcut_channels: usize,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mut p = BSMParams::zeros(shortcut_channels, channels, kernel)?;
        for conv in [&mut p.w_n, &mut p.w_m, &mut p.w_s] {
            let fan_out = conv.out_channels * conv.kernel * conv.kernel;
            let draw = rng::kaiming_normal(rng, fan_out, conv.weight.len());
            conv.weight.data_mut().copy_from_slice(&draw);
        }
        Ok(p)
    }

    pub fn kernel(&self) -> usize {
        self.w_n.kernel
    }

    pub fn param_count(&self) -> usize {
        [&self.w_n, &self.w_m, &self.w_s]
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }
}

/// Var ids of one fusion unit's parameters on a tape, plus conv geometry.
#[derive(Debug, Clone, Copy)]
pub struct BsmVars {
    pub wn_w: VarId,
    pub wn_b: VarId,
    pub wm_w: VarId,
    pub wm_b: VarId,
    pub ws_w: VarId,
    pub ws_b: VarId,
    pub geom_n: ConvGeom,
    pub geom_m: ConvGeom,
    pub geom_s: ConvGeom,
}

impl BsmVars {
    /// Snapshot `p` onto the tape as six leaf variables.
    pub fn register(tape: &mut Tape, p: &BSMParams, stride_padding: usize) -> BsmVars {
        let pad = stride_padding;
        BsmVars {
            wn_w: tape.input(p.w_n.weight.clone()),
            wn_b: tape.input(Tensor3::from_slice_1d(&p.w_n.bias)),
            wm_w: tape.input(p.w_m.weight.clone()),
            wm_b: tape.input(Tensor3::from_slice_1d(&p.w_m.bias)),
            ws_w: tape.input(p.w_s.weight.clone()),
            ws_b: tape.input(Tensor3::from_slice_1d(&p.w_s.bias)),
            geom_n: ConvGeom::of(&p.w_n, 1, pad),
            geom_m: ConvGeom::of(&p.w_m, 1, pad),
            geom_s: ConvGeom::of(&p.w_s, 1, pad),
        }
    }
}

/// Gate computation: `s = sigmoid(w_s * relu(w_n*z + w_m*h_prev))`.
/// Returns `(n, s)`.
pub fn bsm_gate_tape(tape: &mut Tape, z: VarId, h_prev: VarId, p: &BsmVars) -> Result<(VarId, VarId)> {
    let n = tape.conv2d(z, p.wn_w, Some(p.wn_b), p.geom_n)?;
    let m = tape.conv2d(h_prev, p.wm_w, Some(p.wm_b), p.geom_m)?;
    let nm = tape.add(n, m)?;
    let pre = tape.relu(nm);
    let logits = tape.conv2d(pre, p.ws_w, Some(p.ws_b), p.geom_s)?;
    let s = tape.sigmoid(logits);
    Ok((n, s))
}

/// Convex combination `h_prev (1-s) + n s` on the tape.
pub fn bsm_combine_tape(tape: &mut Tape, h_prev: VarId, n: VarId, s: VarId) -> Result<VarId> {
    let neg_s = tape.scale(s, -1.0);
    let one_minus_s = tape.add_const(neg_s, 1.0);
    let keep = tape.mul(h_prev, one_minus_s)?;
    let take = tape.mul(n, s)?;
    tape.add(keep, take)
}

pub fn bsm_forward_tape(tape: &mut Tape, z: VarId, h_prev: VarId, p: &BsmVars) -> Result<VarId> {
    let (n, s) = bsm_gate_tape(tape, z, h_prev, p)?;
    bsm_combine_tape(tape, h_prev, n, s)
}

/// Standalone fusion over plain tensors. Runs the tape path internally, so
/// values match the trained forward bit for bit.
pub fn bsm_forward(z: &Tensor3, h_prev: &Tensor3, p: &BSMParams) -> Result<Tensor3> {
    if z.height() != h_prev.height() || z.width() != h_prev.width() {
        return Err(Error::shape(
            "bsm_forward spatial dims",
            format!("{}x{}", h_prev.height(), h_prev.width()),
            format!("{}x{}", z.height(), z.width()),
        ));
    }
    let mut tape = Tape::new();
    let z_id = tape.input(z.clone());
    let h_id = tape.input(h_prev.clone());
    let pad = (p.kernel() - 1) / 2;
    let vars = BsmVars::register(&mut tape, p, pad);
    let out = bsm_forward_tape(&mut tape, z_id, h_id, &vars)?;
    Ok(tape.value(out).clone())
}

/// Elementwise convex combination with an explicit gate in `[0, 1]`.
pub fn bsm_combine(h_prev: &Tensor3, n: &Tensor3, s: &Tensor3) -> Result<Tensor3> {
    if !h_prev.same_shape(n) || !h_prev.same_shape(s) {
        return Err(Error::shape(
            "bsm_combine",
            format!("{:?}", h_prev.shape()),
            format!("{:?} / {:?}", n.shape(), s.shape()),
        ));
    }
    if s.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("bsm_combine gate outside [0, 1]".into()));
    }
    let mut out = h_prev.clone();
    for i in 0..out.len() {
        let g = s.data()[i];
        out.data_mut()[i] = h_prev.data()[i] * (1.0 - g) + n.data()[i] * g;
    }
    Ok(out)
}
