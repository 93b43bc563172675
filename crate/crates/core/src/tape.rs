//! Reverse-mode autodiff tape.
//!
//! Operations execute eagerly and record themselves in forward order; the
//! arena owns every intermediate tensor, so backward is a single reverse
//! sweep applying each node's vector-Jacobian product with additive fan-out
//! accumulation. A node's inputs always precede it, which keeps the tape
//! topologically ordered by construction.
//!
//! The same tape drives both training and evaluation forwards: evaluation
//! simply never calls [`Tape::backward`].

use crate::error::{Error, Result};
use crate::kfc::{self, KfcShape};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor3;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf value (input or parameter snapshot).
    Input,
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, factor: f64 },
    AddConst { a: VarId },
    Relu { a: VarId },
    Gelu { a: VarId },
    Sigmoid { a: VarId },
    Conv2d { x: VarId, w: VarId, b: Option<VarId>, geom: ConvGeom },
    Deconv2d { x: VarId, w: VarId, b: Option<VarId>, geom: ConvGeom },
    PixelShuffle { x: VarId, r: usize },
    BilinearUp { x: VarId, r: usize },
    Kfc { x: VarId, k1: VarId, k2: VarId, bc: VarId, bh: VarId, bw: VarId, shape: KfcShape },
    /// Per-channel normalization with the statistics fixed at record time:
    /// batch statistics when `batch_mode`, running statistics otherwise.
    /// Only `batch_mode` differentiates through the statistics.
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_mode: bool,
    },
    ConcatChannels { a: VarId, b: VarId },
    SumAll { a: VarId },
}

struct Node {
    op: Op,
}

/// Wengert list: values arena plus the recorded operations.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor3>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor3>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor3 {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` root with respect to `id`, if reached.
    pub fn grad(&self, id: VarId) -> Option<&Tensor3> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor3, op: Op) -> VarId {
        let id = VarId(self.values.len());
        self.values.push(value);
        self.nodes.push(Node { op });
        id
    }

    pub fn input(&mut self, value: Tensor3) -> VarId {
        self.push(value, Op::Input)
    }

    fn binary(&mut self, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<VarId> {
        let value = self.values[a.0].zip_map(&self.values[b.0], f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let value = self.values[a.0].scale(factor);
        self.push(value, Op::Scale { a, factor })
    }

    pub fn add_const(&mut self, a: VarId, offset: f64) -> VarId {
        let value = self.values[a.0].map(|v| v + offset);
        self.push(value, Op::AddConst { a })
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = ops::relu(&self.values[a.0]);
        self.push(value, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = ops::gelu(&self.values[a.0]);
        self.push(value, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let value = ops::sigmoid(&self.values[a.0]);
        self.push(value, Op::Sigmoid { a })
    }

    /// `w` is the flattened `(out*in, k, k)` kernel, `b` an optional
    /// `(out, 1, 1)` bias.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, geom: ConvGeom) -> Result<VarId> {
        let bias_store;
        let bias = match b {
            Some(b) => {
                bias_store = self.values[b.0].data().to_vec();
                Some(bias_store.as_slice())
            }
            None => None,
        };
        let value = ops::conv2d_parts(&self.values[x.0], &self.values[w.0], bias, geom)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    pub fn deconv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, geom: ConvGeom) -> Result<VarId> {
        let bias_store;
        let bias = match b {
            Some(b) => {
                bias_store = self.values[b.0].data().to_vec();
                Some(bias_store.as_slice())
            }
            None => None,
        };
        let value = ops::deconv2d_parts(&self.values[x.0], &self.values[w.0], bias, geom)?;
        Ok(self.push(value, Op::Deconv2d { x, w, b, geom }))
    }

    pub fn pixel_shuffle(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let value = ops::pixel_shuffle(&self.values[x.0], r)?;
        Ok(self.push(value, Op::PixelShuffle { x, r }))
    }

    pub fn bilinear_upsample(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let value = ops::bilinear_upsample(&self.values[x.0], r)?;
        Ok(self.push(value, Op::BilinearUp { x, r }))
    }

    /// Kronecker-factorized upscaling; see [`crate::kfc::kfc_forward_parts`].
    pub fn kfc(
        &mut self,
        x: VarId,
        k1: VarId,
        k2: VarId,
        bc: VarId,
        bh: VarId,
        bw: VarId,
    ) -> Result<VarId> {
        let shape = KfcShape::infer(&self.values[k1.0], &self.values[k2.0])?;
        let value = kfc::kfc_forward_parts(
            &self.values[x.0],
            &self.values[k1.0],
            &self.values[k2.0],
            self.values[bc.0].data(),
            self.values[bh.0].data(),
            self.values[bw.0].data(),
            shape,
        )?;
        Ok(self.push(value, Op::Kfc { x, k1, k2, bc, bh, bw, shape }))
    }

    /// Training-mode batch norm: normalizes with this map's own spatial
    /// statistics. Returns the var id plus the batch stats so the caller can
    /// fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, Vec<f64>, Vec<f64>)> {
        let (mean, var) = ops::batch_stats(&self.values[x.0]);
        let value = ops::batch_norm_apply(
            &self.values[x.0],
            &mean,
            &var,
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
            eps,
        )?;
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
                batch_mode: true,
            },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm: a frozen per-channel affine map under the given
    /// running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<VarId> {
        let value = ops::batch_norm_apply(
            &self.values[x.0],
            running_mean,
            running_var,
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
            eps,
        )?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
                batch_mode: false,
            },
        ))
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.height() != tb.height() || ta.width() != tb.width() {
            return Err(Error::shape(
                "concat_channels spatial dims",
                format!("{}x{}", ta.height(), ta.width()),
                format!("{}x{}", tb.height(), tb.width()),
            ));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor3::from_vec(ta.channels() + tb.channels(), ta.height(), ta.width(), data)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    /// Reduce to a `1 x 1 x 1` scalar.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.values[a.0].sum();
        self.push(Tensor3::from_vec(1, 1, 1, vec![s]).unwrap(), Op::SumAll { a })
    }

    /// Mean squared error between two same-shape maps; scalar output.
    pub fn mse(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        let n = self.values[pred.0].len() as f64;
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        let total = self.sum_all(sq);
        Ok(self.scale(total, 1.0 / n))
    }

    pub fn scalar(&self, id: VarId) -> Result<f64> {
        let v = &self.values[id.0];
        if v.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected scalar value, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }

    fn accumulate(&mut self, id: VarId, delta: &Tensor3) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar root. Populates gradients for every
    /// variable the root depends on; the root's own gradient is all ones.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if root.0 >= self.values.len() {
            return Err(Error::OutOfRange(format!("backward root {} not on tape", root.0)));
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        self.grads = (0..self.values.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor3::filled(1, 1, 1, 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = self.grads[idx].clone() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input => {}
                Op::Add { a, b } => {
                    self.accumulate(a, &gout);
                    self.accumulate(b, &gout);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &gout);
                    self.accumulate(b, &gout.scale(-1.0));
                }
                Op::Mul { a, b } => {
                    let ga = gout.zip_map(&self.values[b.0], |g, v| g * v)?;
                    let gb = gout.zip_map(&self.values[a.0], |g, v| g * v)?;
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Scale { a, factor } => {
                    self.accumulate(a, &gout.scale(factor));
                }
                Op::AddConst { a } => {
                    self.accumulate(a, &gout);
                }
                Op::Relu { a } => {
                    let ga = gout.zip_map(&self.values[a.0], |g, x| g * ops::relu_prime(x))?;
                    self.accumulate(a, &ga);
                }
                Op::Gelu { a } => {
                    let ga = gout.zip_map(&self.values[a.0], |g, x| g * ops::gelu_prime(x))?;
                    self.accumulate(a, &ga);
                }
                Op::Sigmoid { a } => {
                    // d/dx sigma(x) = sigma (1 - sigma), from the saved output.
                    let ga = gout.zip_map(&self.values[idx], |g, s| g * s * (1.0 - s))?;
                    self.accumulate(a, &ga);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let gx = ops::conv2d_input_scatter(
                        &gout,
                        &self.values[w.0],
                        geom,
                        self.values[x.0].height(),
                        self.values[x.0].width(),
                    );
                    let gw = ops::conv2d_weight_grad(
                        &gout,
                        &self.values[x.0],
                        geom.kernel,
                        geom.stride,
                        geom.padding,
                    );
                    self.accumulate(x, &gx);
                    self.accumulate(w, &gw);
                    if let Some(b) = b {
                        let gb = Tensor3::from_slice_1d(&ops::channel_sums(&gout));
                        self.accumulate(b, &gb);
                    }
                }
                Op::Deconv2d { x, w, b, geom } => {
                    // Adjoint of the adjoint: input grad is a plain conv gather.
                    let gx = ops::conv2d_parts(&gout, &self.values[w.0], None, geom)?;
                    let gw = ops::conv2d_weight_grad(
                        &self.values[x.0],
                        &gout,
                        geom.kernel,
                        geom.stride,
                        geom.padding,
                    );
                    self.accumulate(x, &gx);
                    self.accumulate(w, &gw);
                    if let Some(b) = b {
                        let gb = Tensor3::from_slice_1d(&ops::channel_sums(&gout));
                        self.accumulate(b, &gb);
                    }
                }
                Op::PixelShuffle { x, r } => {
                    self.accumulate(x, &ops::pixel_unshuffle(&gout, r)?);
                }
                Op::BilinearUp { x, r } => {
                    let gx = ops::bilinear_upsample_adjoint(
                        &gout,
                        r,
                        self.values[x.0].height(),
                        self.values[x.0].width(),
                    );
                    self.accumulate(x, &gx);
                }
                Op::Kfc { x, k1, k2, bc, bh, bw, shape } => {
                    let grads = kfc::kfc_backward(
                        &gout,
                        &self.values[x.0],
                        &self.values[k1.0],
                        &self.values[k2.0],
                        self.values[bc.0].data(),
                        self.values[bh.0].data(),
                        self.values[bw.0].data(),
                        shape,
                    );
                    self.accumulate(x, &grads.x);
                    self.accumulate(k1, &grads.k1);
                    self.accumulate(k2, &grads.k2);
                    self.accumulate(bc, &Tensor3::from_slice_1d(&grads.b_c));
                    self.accumulate(bh, &Tensor3::from_slice_1d(&grads.b_h));
                    self.accumulate(bw, &Tensor3::from_slice_1d(&grads.b_w));
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps, batch_mode } => {
                    let xv = &self.values[x.0];
                    let gv = self.values[gamma.0].data();
                    let plane = xv.height() * xv.width();
                    let n = plane as f64;
                    let mut gx = Tensor3::zeros(xv.channels(), xv.height(), xv.width());
                    let mut ggamma = vec![0.0; xv.channels()];
                    let mut gbeta = vec![0.0; xv.channels()];
                    for c in 0..xv.channels() {
                        let inv = 1.0 / (var[c] + eps).sqrt();
                        let (mut sum_g, mut sum_gxhat) = (0.0, 0.0);
                        for i in 0..plane {
                            let idx_flat = c * plane + i;
                            let xhat = (xv.data()[idx_flat] - mean[c]) * inv;
                            let g = gout.data()[idx_flat];
                            sum_g += g;
                            sum_gxhat += g * xhat;
                        }
                        ggamma[c] = sum_gxhat;
                        gbeta[c] = sum_g;
                        for i in 0..plane {
                            let idx_flat = c * plane + i;
                            let g = gout.data()[idx_flat];
                            let d = if batch_mode {
                                let xhat = (xv.data()[idx_flat] - mean[c]) * inv;
                                gv[c] * inv * (g - sum_g / n - xhat * sum_gxhat / n)
                            } else {
                                gv[c] * inv * g
                            };
                            gx.data_mut()[idx_flat] = d;
                        }
                    }
                    self.accumulate(x, &gx);
                    self.accumulate(gamma, &Tensor3::from_slice_1d(&ggamma));
                    self.accumulate(beta, &Tensor3::from_slice_1d(&gbeta));
                }
                Op::ConcatChannels { a, b } => {
                    let ca = self.values[a.0].channels();
                    let (h, w) = (gout.height(), gout.width());
                    let split = ca * h * w;
                    let ga = Tensor3::from_vec(ca, h, w, gout.data()[..split].to_vec())?;
                    let gb = Tensor3::from_vec(
                        gout.channels() - ca,
                        h,
                        w,
                        gout.data()[split..].to_vec(),
                    )?;
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::SumAll { a } => {
                    let g = gout.data()[0];
                    let shape = self.values[a.0].shape();
                    self.accumulate(a, &Tensor3::filled(shape.0, shape.1, shape.2, g));
                }
            }
        }
        Ok(())
    }
}

// ---- finite-difference gradient checking ----------------------------------

/// Per-parameter outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc.max(e.max_rel_err))
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Compare tape gradients of a scalar-valued map against central finite
/// differences, parameter tensor by parameter tensor.
///
/// `build` receives a fresh tape plus the parameter var ids (registered in
/// the order given) and must return the scalar root.
pub fn grad_check<F>(params: &[(String, Tensor3)], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let run = |values: &[Tensor3]| -> Result<(Tape, VarId, Vec<VarId>)> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = values.iter().map(|t| tape.input(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok((tape, root, ids))
    };

    let base: Vec<Tensor3> = params.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, root, ids) = run(&base)?;
    tape.backward(root)?;

    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = tape
            .grad(ids[pi])
            .cloned()
            .unwrap_or_else(|| Tensor3::zeros(tensor.channels(), tensor.height(), tensor.width()));
        let mut max_rel = 0.0f64;
        for elem in 0..tensor.len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[elem] += FD_STEP;
            let (t_plus, root_plus, _) = run(&plus)?;
            let f_plus = t_plus.scalar(root_plus)?;

            let mut minus = base.clone();
            minus[pi].data_mut()[elem] -= FD_STEP;
            let (t_minus, root_minus, _) = run(&minus)?;
            let f_minus = t_minus.scalar(root_minus)?;

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic.data()[elem];
            // Absolute comparison below 1e-3 magnitude, relative above.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry { name: name.clone(), max_rel_err: max_rel });
    }
    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(r: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::from_vec(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let root = tape.sum_all(x);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(root).unwrap().data(), &[1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::from_vec(1, 1, 3, vec![1.5, -2.0, 0.25]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum_all(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::zeros(1, 2, 2));
        assert!(tape.backward(x).is_err()); // non-scalar
        assert!(tape.backward(VarId(99)).is_err()); // not on tape
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = sum(x) + sum(x .* x) => grad = 1 + 2x.
        let mut tape = Tape::new();
        let x = tape.input(Tensor3::from_vec(1, 1, 2, vec![2.0, -1.0]).unwrap());
        let s1 = tape.sum_all(x);
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum_all(sq);
        let root = tape.add(s1, s2).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn linear_map_grad_check_is_machine_precision() {
        let mut r = rng::seeded(1);
        let x = random_tensor(&mut r, 2, 3, 3);
        let report = grad_check(
            &[("x".into(), x)],
            |tape, ids| {
                let three = tape.scale(ids[0], 3.0);
                let shifted = tape.add_const(three, 0.7);
                Ok(tape.sum_all(shifted))
            },
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    /// Every differentiable op, three random shapes each.
    #[test]
    fn registered_ops_pass_grad_check() {
        let shapes = [(1usize, 3usize, 4usize), (2, 4, 3), (3, 2, 5)];
        for (case, &(c, h, w)) in shapes.iter().enumerate() {
            let mut r = rng::seeded(100 + case as u64);
            let x = random_tensor(&mut r, c, h, w);
            let y = random_tensor(&mut r, c, h, w);
            let probe = random_tensor(&mut r, c, h, w);

            // Elementwise binaries and unaries, reduced against a fixed probe.
            let unary_cases: Vec<(&str, Box<dyn Fn(&mut Tape, VarId) -> VarId>)> = vec![
                ("relu", Box::new(|t: &mut Tape, v| t.relu(v))),
                ("gelu", Box::new(|t: &mut Tape, v| t.gelu(v))),
                ("sigmoid", Box::new(|t: &mut Tape, v| t.sigmoid(v))),
                ("scale", Box::new(|t: &mut Tape, v| t.scale(v, -1.7))),
                ("add_const", Box::new(|t: &mut Tape, v| t.add_const(v, 0.3))),
            ];
            for (name, apply) in &unary_cases {
                let probe = probe.clone();
                let report = grad_check(
                    &[(format!("{name}_x"), x.clone())],
                    move |tape, ids| {
                        let p = tape.input(probe.clone());
                        let out = apply(tape, ids[0]);
                        let weighted = tape.mul(out, p)?;
                        Ok(tape.sum_all(weighted))
                    },
                    1e-4,
                )
                .unwrap();
                assert!(report.passed(), "{name} case {case}: worst {}", report.worst());
            }

            let probe2 = probe.clone();
            let report = grad_check(
                &[("a".into(), x.clone()), ("b".into(), y.clone())],
                move |tape, ids| {
                    let s = tape.sub(ids[0], ids[1])?;
                    let m = tape.mul(s, ids[1])?;
                    let a = tape.add(m, ids[0])?;
                    let p = tape.input(probe2.clone());
                    let weighted = tape.mul(a, p)?;
                    Ok(tape.sum_all(weighted))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "binary ops case {case}: worst {}", report.worst());
        }
    }

    #[test]
    fn conv_deconv_bn_ops_pass_grad_check() {
        for (case, &(ci, co, k, s, p, h, w)) in
            [(1usize, 2usize, 3usize, 1usize, 1usize, 4usize, 4usize), (2, 1, 3, 2, 1, 5, 6), (2, 2, 1, 2, 0, 4, 4)]
                .iter()
                .enumerate()
        {
            let mut r = rng::seeded(200 + case as u64);
            let x = random_tensor(&mut r, ci, h, w);
            let weight = random_tensor(&mut r, co * ci, k, k);
            let bias = random_tensor(&mut r, co, 1, 1);
            let geom = ConvGeom { out_channels: co, in_channels: ci, kernel: k, stride: s, padding: p };
            let report = grad_check(
                &[("x".into(), x.clone()), ("w".into(), weight.clone()), ("b".into(), bias.clone())],
                move |tape, ids| {
                    let out = tape.conv2d(ids[0], ids[1], Some(ids[2]), geom)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "conv2d case {case}: worst {}", report.worst());

            // Deconv consumes co channels and emits ci.
            let t_in = random_tensor(&mut r, co, h, w);
            let dbias = random_tensor(&mut r, ci, 1, 1);
            let report = grad_check(
                &[("x".into(), t_in), ("w".into(), weight.clone()), ("b".into(), dbias)],
                move |tape, ids| {
                    let out = tape.deconv2d(ids[0], ids[1], Some(ids[2]), geom)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "deconv2d case {case}: worst {}", report.worst());
        }

        for (case, &(c, h, w)) in [(2usize, 3usize, 4usize), (1, 4, 4), (3, 2, 3)].iter().enumerate() {
            let mut r = rng::seeded(300 + case as u64);
            let x = random_tensor(&mut r, c, h, w);
            let gamma = random_tensor(&mut r, c, 1, 1);
            let beta = random_tensor(&mut r, c, 1, 1);
            let report = grad_check(
                &[("x".into(), x.clone()), ("gamma".into(), gamma.clone()), ("beta".into(), beta.clone())],
                |tape, ids| {
                    let (out, _, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], ops::BN_EPS)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "bn train case {case}: worst {}", report.worst());

            let rm: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
            let report = grad_check(
                &[("x".into(), x), ("gamma".into(), gamma), ("beta".into(), beta)],
                move |tape, ids| {
                    let out = tape.batch_norm_eval(ids[0], ids[1], ids[2], &rm, &rv, ops::BN_EPS)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "bn eval case {case}: worst {}", report.worst());
        }
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        for (case, &(c, h, w, r_up)) in
            [(4usize, 2usize, 3usize, 2usize), (9, 2, 2, 3), (8, 3, 4, 2)].iter().enumerate()
        {
            let mut r = rng::seeded(400 + case as u64);
            let x = random_tensor(&mut r, c, h, w);
            let report = grad_check(
                &[("x".into(), x.clone())],
                move |tape, ids| {
                    let out = tape.pixel_shuffle(ids[0], r_up)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "pixel_shuffle case {case}: worst {}", report.worst());

            let report = grad_check(
                &[("x".into(), x.clone())],
                move |tape, ids| {
                    let out = tape.bilinear_upsample(ids[0], r_up)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "bilinear case {case}: worst {}", report.worst());

            let y = random_tensor(&mut r, c + 1, h, w);
            let report = grad_check(
                &[("a".into(), x.clone()), ("b".into(), y)],
                |tape, ids| {
                    let out = tape.concat_channels(ids[0], ids[1])?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum_all(sq))
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "concat case {case}: worst {}", report.worst());
        }
    }

    #[test]
    fn same_seed_same_forward_bits() {
        let run = || {
            let mut r = rng::seeded(77);
            let x = random_tensor(&mut r, 2, 4, 4);
            let w = random_tensor(&mut r, 4, 3, 3);
            let mut tape = Tape::new();
            let xi = tape.input(x);
            let wi = tape.input(w);
            let geom = ConvGeom { out_channels: 2, in_channels: 2, kernel: 3, stride: 1, padding: 1 };
            let y = tape.conv2d(xi, wi, None, geom).unwrap();
            let g = tape.gelu(y);
            tape.value(g).clone()
        };
        assert_eq!(run(), run());
    }
}
