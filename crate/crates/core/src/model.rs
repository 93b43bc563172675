//! The full pyramidal NeRV system.
//!
//! A model is a flat parameter store plus a layout of typed handles into it:
//!
//! - simplified content/temporal encoders (strided 3x3 conv stacks with GELU),
//! - a six-block mainstream (`conv -> pixel_shuffle -> gelu`; block 1 and the
//!   output head use 1x1 kernels, the rest the configured kernel),
//! - shortcut upscalers injecting the temporal embedding into layers 2..=5
//!   (`upscale -> batch_norm -> gelu`), fused by a gated unit or channel
//!   concatenation,
//! - a 1x1 output conv producing the RGB frame.
//!
//! The store keeps every tensor (weights, biases, batch-norm statistics) in
//! creation order; checkpoints, quantization and parameter counting all walk
//! the same list, so their accounting cannot drift apart.

use crate::bsm::{bsm_combine_tape, bsm_gate_tape, BsmVars};
use crate::error::{Error, Result};
use crate::kfc::KFcParams;
use crate::ops::{self, ConvGeom};
use crate::rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor3;
use crate::video::VideoClip;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

// ---- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Content stream only; a purely serial cascaded decoder.
    M,
    /// Content stream plus temporal shortcuts into layers 2..=5.
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "BSM")]
    Bsm,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpscalerKind {
    #[serde(rename = "KFc")]
    Kfc,
    Deconv,
    Bilinear,
}

pub const NUM_BLOCKS: usize = 6;
/// Shortcuts attach to layers `SHORTCUT_FIRST..=SHORTCUT_LAST`.
pub const SHORTCUT_FIRST: usize = 2;
pub const SHORTCUT_LAST: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PNeRVConfig {
    pub variant: Variant,
    /// Content embedding `(C, H, W)`.
    pub embed_content_shape: (usize, usize, usize),
    /// Temporal embedding `(C, H, W)`; used by variant L only.
    pub embed_temporal_shape: (usize, usize, usize),
    /// Per-block upscale factors; exactly six entries.
    pub mainstream_strides: Vec<usize>,
    /// Per-block output channel widths; exactly six entries.
    pub channel_widths: Vec<usize>,
    pub fusion_kind: FusionKind,
    pub upscaler_kind: UpscalerKind,
    /// Kernel size of mainstream blocks 2..=6 and of the fusion convs.
    pub block_kernel: usize,
    pub seed: u64,
}

impl Default for PNeRVConfig {
    fn default() -> Self {
        PNeRVConfig::desk_default()
    }
}

impl PNeRVConfig {
    /// Desk-scale variant L decoding to 64x128.
    pub fn desk_default() -> Self {
        PNeRVConfig {
            variant: Variant::L,
            embed_content_shape: (16, 2, 4),
            embed_temporal_shape: (2, 8, 16),
            mainstream_strides: vec![2, 2, 2, 2, 2, 1],
            channel_widths: vec![32, 32, 16, 16, 8, 8],
            fusion_kind: FusionKind::Bsm,
            upscaler_kind: UpscalerKind::Kfc,
            block_kernel: 3,
            seed: 0,
        }
    }

    /// Full-scale layout mapping the 2x4 embedding to 960x1920. Provided for
    /// completeness; untested at that scale on a desk machine.
    pub fn full_scale_default() -> Self {
        PNeRVConfig {
            variant: Variant::L,
            embed_content_shape: (16, 2, 4),
            embed_temporal_shape: (2, 40, 80),
            mainstream_strides: vec![5, 4, 4, 3, 2, 1],
            channel_widths: vec![96, 96, 64, 48, 32, 16],
            fusion_kind: FusionKind::Bsm,
            upscaler_kind: UpscalerKind::Kfc,
            block_kernel: 3,
            seed: 0,
        }
    }

    /// Smallest full-pipeline config, sized so finite-difference sweeps over
    /// every parameter stay cheap. Decodes to 4x8.
    pub fn tiny() -> Self {
        PNeRVConfig {
            variant: Variant::L,
            embed_content_shape: (4, 1, 2),
            embed_temporal_shape: (2, 2, 4),
            mainstream_strides: vec![2, 2, 1, 1, 1, 1],
            channel_widths: vec![4, 4, 4, 4, 4, 4],
            fusion_kind: FusionKind::Bsm,
            upscaler_kind: UpscalerKind::Kfc,
            block_kernel: 3,
            seed: 0,
        }
    }

    pub fn out_height(&self) -> usize {
        self.embed_content_shape.1 * self.mainstream_strides.iter().product::<usize>()
    }

    pub fn out_width(&self) -> usize {
        self.embed_content_shape.2 * self.mainstream_strides.iter().product::<usize>()
    }

    /// Spatial dims after block `l` (1-based).
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let factor: usize = self.mainstream_strides[..l].iter().product();
        (self.embed_content_shape.1 * factor, self.embed_content_shape.2 * factor)
    }

    pub fn has_shortcuts(&self) -> bool {
        self.variant == Variant::L
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.mainstream_strides.len() != NUM_BLOCKS {
            return fail(format!(
                "expected {NUM_BLOCKS} mainstream strides, got {}",
                self.mainstream_strides.len()
            ));
        }
        if self.channel_widths.len() != NUM_BLOCKS {
            return fail(format!(
                "expected {NUM_BLOCKS} channel widths, got {}",
                self.channel_widths.len()
            ));
        }
        if self.mainstream_strides.iter().any(|&s| s == 0)
            || self.channel_widths.iter().any(|&w| w == 0)
        {
            return fail("strides and widths must be positive".into());
        }
        let (ec, eh, ew) = self.embed_content_shape;
        if ec == 0 || eh == 0 || ew == 0 {
            return fail("content embedding dims must be positive".into());
        }
        if self.block_kernel % 2 == 0 {
            return fail(format!("block kernel must be odd, got {}", self.block_kernel));
        }
        if self.out_width() != 2 * self.out_height() {
            return fail(format!(
                "output aspect must be 1:2, got {}x{}",
                self.out_height(),
                self.out_width()
            ));
        }
        encoder_stage_strides(self.out_height(), self.out_width(), eh, ew)?;
        if self.has_shortcuts() {
            let (tc, th, tw) = self.embed_temporal_shape;
            if tc == 0 || th == 0 || tw == 0 {
                return fail("temporal embedding dims must be positive".into());
            }
            encoder_stage_strides(self.out_height(), self.out_width(), th, tw)?;
            if self.upscaler_kind != UpscalerKind::Kfc {
                // Subpixel upscalers need an integer, axis-uniform rate.
                for l in SHORTCUT_FIRST..=SHORTCUT_LAST {
                    shortcut_rate(self, l)?;
                }
            }
        }
        Ok(())
    }
}

/// Integer upscale rate of the shortcut into layer `l`.
fn shortcut_rate(cfg: &PNeRVConfig, l: usize) -> Result<usize> {
    let (lh, lw) = cfg.layer_dims(l);
    let (_, th, tw) = cfg.embed_temporal_shape;
    if lh % th != 0 || lw % tw != 0 || lh / th != lw / tw {
        return Err(Error::InvalidConfig(format!(
            "shortcut into layer {l}: {th}x{tw} cannot be upscaled uniformly to {lh}x{lw}"
        )));
    }
    Ok(lh / th)
}

/// Factor the encoder's downscale ratio into per-stage conv strides
/// (largest factors first). Errors unless both axes share one integer ratio.
fn encoder_stage_strides(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Vec<usize>> {
    if in_h % out_h != 0 || in_w % out_w != 0 || in_h / out_h != in_w / out_w {
        return Err(Error::InvalidConfig(format!(
            "encoder cannot reduce {in_h}x{in_w} to {out_h}x{out_w} with uniform strides"
        )));
    }
    let mut ratio = in_h / out_h;
    if ratio == 1 {
        return Ok(vec![1]);
    }
    let mut factors = Vec::new();
    let mut p = 2;
    while p * p <= ratio {
        while ratio % p == 0 {
            factors.push(p);
            ratio /= p;
        }
        p += 1;
    }
    if ratio > 1 {
        factors.push(ratio);
    }
    factors.sort_unstable_by(|a, b| b.cmp(a));
    Ok(factors)
}

// ---- parameter store ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor3,
    /// Logical rank-1..4 shape written to checkpoints; its product equals
    /// the tensor's element count.
    pub logical_shape: Vec<usize>,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamTensor>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor3,
        logical_shape: Vec<usize>,
        trainable: bool,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            logical_shape.iter().product::<usize>(),
            value.len(),
            "logical shape mismatch for {name}"
        );
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamTensor { name, value, logical_shape, trainable, group });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor3 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor3 {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Element count over every stored array, statistics buffers included.
    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn group_elems(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }
}

// ---- layout handles --------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvHandle {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct BlockHandle {
    conv: ConvHandle,
    rate: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnHandle {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum UpscalerHandle {
    Kfc { k1: ParamId, k2: ParamId, b_c: ParamId, b_h: ParamId, b_w: ParamId },
    Deconv { conv: ConvHandle },
    Bilinear { rate: usize, conv: ConvHandle },
}

#[derive(Debug, Clone, Copy)]
enum FusionHandle {
    Bsm { w_n: ConvHandle, w_m: ConvHandle, w_s: ConvHandle },
    Concat { conv: ConvHandle },
}

#[derive(Debug, Clone, Copy)]
struct ShortcutHandle {
    upscaler: UpscalerHandle,
    bn: BnHandle,
    fusion: FusionHandle,
}

#[derive(Debug, Clone, Default)]
struct Layout {
    content_encoder: Vec<ConvHandle>,
    temporal_encoder: Vec<ConvHandle>,
    blocks: Vec<BlockHandle>,
    /// Indexed by layer `l - SHORTCUT_FIRST`.
    shortcuts: Vec<ShortcutHandle>,
    head: Option<ConvHandle>,
}

// ---- embeddings ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedding {
    pub content: Tensor3,
    pub temporal: Option<Tensor3>,
}

impl FrameEmbedding {
    pub fn elems(&self) -> usize {
        self.content.len() + self.temporal.as_ref().map_or(0, |t| t.len())
    }
}

/// One embedding per frame index `t in [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub frames: Vec<FrameEmbedding>,
}

impl EmbeddingSet {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn get(&self, t: usize) -> Result<&FrameEmbedding> {
        if t == 0 || t > self.frames.len() {
            return Err(Error::OutOfRange(format!(
                "embedding index {t} outside [1, {}]",
                self.frames.len()
            )));
        }
        Ok(&self.frames[t - 1])
    }

    pub fn total_elems(&self) -> usize {
        self.frames.iter().map(|f| f.elems()).sum()
    }
}

// ---- model -------------------------------------------------------------------

/// Batch-norm statistics handling during a decode pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Normalize with this frame's own batch statistics.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Hook over the fusion gate, used to collapse the pyramid onto its serial
/// mainstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    /// Force `s = 0` at the combine step: the output is exactly the
    /// mainstream value.
    ForceZero,
}

pub struct PNeRVModel {
    config: PNeRVConfig,
    store: ParamStore,
    layout: Layout,
}

/// Tape var ids of the trainable store entries, indexed by `ParamId`.
pub struct ParamVars {
    vars: Vec<Option<VarId>>,
}

impl ParamVars {
    fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0].expect("parameter not registered on tape")
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ParamId, VarId)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// Deferred running-statistics update produced by a training-mode decode.
pub struct BnStatsUpdate {
    bn: BnHandle,
    mean: Vec<f64>,
    var: Vec<f64>,
    n_spatial: usize,
}

impl PNeRVModel {
    pub fn build(config: PNeRVConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let mut store = ParamStore::default();
        let mut layout = Layout::default();

        let (ec, eh, ew) = config.embed_content_shape;
        let (oh, ow) = (config.out_height(), config.out_width());

        // Content encoder: frame (3, oh, ow) -> (ec, eh, ew).
        layout.content_encoder = build_encoder_stack(
            &mut store,
            &mut rng,
            "enc.c",
            ec,
            encoder_stage_strides(oh, ow, eh, ew)?,
        );

        if config.has_shortcuts() {
            let (tc, th, tw) = config.embed_temporal_shape;
            layout.temporal_encoder = build_encoder_stack(
                &mut store,
                &mut rng,
                "enc.t",
                tc,
                encoder_stage_strides(oh, ow, th, tw)?,
            );
        }

        // Mainstream: conv expands to width * r^2 channels, pixel shuffle
        // rearranges, GELU activates. Block 1 uses a 1x1 kernel.
        let mut in_c = ec;
        for l in 1..=NUM_BLOCKS {
            let rate = config.mainstream_strides[l - 1];
            let width = config.channel_widths[l - 1];
            let k = if l == 1 { 1 } else { config.block_kernel };
            let conv = add_conv(
                &mut store,
                &mut rng,
                &format!("block{l}"),
                width * rate * rate,
                in_c,
                k,
                1,
                (k - 1) / 2,
                ParamGroup::Decoder,
            );
            layout.blocks.push(BlockHandle { conv, rate });
            in_c = width;
        }

        if config.has_shortcuts() {
            let (tc, th, tw) = config.embed_temporal_shape;
            for l in SHORTCUT_FIRST..=SHORTCUT_LAST {
                let (lh, lw) = config.layer_dims(l);
                let width = config.channel_widths[l - 1];
                let prefix = format!("short{l}");

                let upscaler = match config.upscaler_kind {
                    UpscalerKind::Kfc => {
                        let p = KFcParams::init(&mut rng, tc, th, tw, lh, lw);
                        UpscalerHandle::Kfc {
                            k1: store.add(format!("{prefix}.kfc.k1"), p.k1, vec![tc, lh, th], true, ParamGroup::Decoder),
                            k2: store.add(format!("{prefix}.kfc.k2"), p.k2, vec![tc, tw, lw], true, ParamGroup::Decoder),
                            b_c: store.add(format!("{prefix}.kfc.b_c"), Tensor3::from_slice_1d(&p.b_c), vec![tc], true, ParamGroup::Decoder),
                            b_h: store.add(format!("{prefix}.kfc.b_h"), Tensor3::from_slice_1d(&p.b_h), vec![lh], true, ParamGroup::Decoder),
                            b_w: store.add(format!("{prefix}.kfc.b_w"), Tensor3::from_slice_1d(&p.b_w), vec![lw], true, ParamGroup::Decoder),
                        }
                    }
                    UpscalerKind::Deconv => {
                        let rate = shortcut_rate(&config, l)?;
                        // Stride-matched transposed conv: kernel = stride;
                        // weight laid out (in, out, k, k) with fan over the
                        // produced channels.
                        let draw = rng::kaiming_normal(&mut rng, tc * rate * rate, tc * tc * rate * rate);
                        let weight = Tensor3::from_vec(tc * tc, rate, rate, draw)?;
                        let conv = ConvHandle {
                            w: store.add(format!("{prefix}.deconv.w"), weight, vec![tc, tc, rate, rate], true, ParamGroup::Decoder),
                            b: store.add(format!("{prefix}.deconv.b"), Tensor3::zeros(tc, 1, 1), vec![tc], true, ParamGroup::Decoder),
                            geom: ConvGeom {
                                out_channels: tc,
                                in_channels: tc,
                                kernel: rate,
                                stride: rate,
                                padding: 0,
                            },
                        };
                        UpscalerHandle::Deconv { conv }
                    }
                    UpscalerKind::Bilinear => {
                        let rate = shortcut_rate(&config, l)?;
                        let conv = add_conv(&mut store, &mut rng, &format!("{prefix}.bilin"), tc, tc, 3, 1, 1, ParamGroup::Decoder);
                        UpscalerHandle::Bilinear { rate, conv }
                    }
                };

                let bn = BnHandle {
                    gamma: store.add(format!("{prefix}.bn.gamma"), Tensor3::filled(tc, 1, 1, 1.0), vec![tc], true, ParamGroup::Decoder),
                    beta: store.add(format!("{prefix}.bn.beta"), Tensor3::zeros(tc, 1, 1), vec![tc], true, ParamGroup::Decoder),
                    run_mean: store.add(format!("{prefix}.bn.run_mean"), Tensor3::zeros(tc, 1, 1), vec![tc], false, ParamGroup::Decoder),
                    run_var: store.add(format!("{prefix}.bn.run_var"), Tensor3::filled(tc, 1, 1, 1.0), vec![tc], false, ParamGroup::Decoder),
                };

                let fusion = match config.fusion_kind {
                    FusionKind::Bsm => {
                        let k = config.block_kernel;
                        let pad = (k - 1) / 2;
                        FusionHandle::Bsm {
                            w_n: add_conv(&mut store, &mut rng, &format!("{prefix}.bsm.wn"), width, tc, k, 1, pad, ParamGroup::Decoder),
                            w_m: add_conv(&mut store, &mut rng, &format!("{prefix}.bsm.wm"), width, width, k, 1, pad, ParamGroup::Decoder),
                            w_s: add_conv(&mut store, &mut rng, &format!("{prefix}.bsm.ws"), width, width, k, 1, pad, ParamGroup::Decoder),
                        }
                    }
                    FusionKind::Concat => FusionHandle::Concat {
                        conv: add_conv(&mut store, &mut rng, &format!("{prefix}.concat"), width, width + tc, 1, 1, 0, ParamGroup::Decoder),
                    },
                };

                layout.shortcuts.push(ShortcutHandle { upscaler, bn, fusion });
            }
        }

        let last_width = *config.channel_widths.last().unwrap();
        layout.head = Some(add_conv(&mut store, &mut rng, "head", 3, last_width, 1, 1, 0, ParamGroup::Decoder));

        Ok(PNeRVModel { config, store, layout })
    }

    pub fn config(&self) -> &PNeRVConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Register every trainable tensor as a tape leaf.
    pub fn register_params(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .store
            .iter()
            .map(|(_, e)| e.trainable.then(|| tape.input(e.value.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Bind externally registered values (finite-difference sweeps) in store
    /// order: `ids[i]` must be the i-th trainable entry.
    pub fn bind_params(&self, ids: &[VarId]) -> ParamVars {
        let mut it = ids.iter().copied();
        let vars = self
            .store
            .iter()
            .map(|(_, e)| if e.trainable { it.next() } else { None })
            .collect();
        ParamVars { vars }
    }

    /// Trainable entries in store order, as `(name, value)` pairs.
    pub fn trainable_params(&self) -> Vec<(String, Tensor3)> {
        self.store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect()
    }

    // ---- encoder -------------------------------------------------------

    fn run_encoder_stack(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        stack: &[ConvHandle],
        input: VarId,
    ) -> Result<VarId> {
        let mut h = input;
        for (i, conv) in stack.iter().enumerate() {
            h = tape.conv2d(h, vars.var(conv.w), Some(vars.var(conv.b)), conv.geom)?;
            if i + 1 < stack.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Content (and for variant L, temporal) embeddings of frame `t` on an
    /// existing tape; gradients flow into the encoder parameters.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        clip: &VideoClip,
        t: usize,
    ) -> Result<(VarId, Option<VarId>)> {
        let frame = tape.input(clip.frame(t)?.clone());
        let content = self.run_encoder_stack(tape, vars, &self.layout.content_encoder, frame)?;
        let temporal = if self.config.has_shortcuts() {
            let diff = tape.input(clip.frame_diff(t)?);
            Some(self.run_encoder_stack(tape, vars, &self.layout.temporal_encoder, diff)?)
        } else {
            None
        };
        Ok((content, temporal))
    }

    /// Embeddings of frame `t` as plain tensors.
    pub fn encode(&self, clip: &VideoClip, t: usize) -> Result<FrameEmbedding> {
        let mut tape = Tape::new();
        let vars = self.register_params(&mut tape);
        let (c, te) = self.encode_on_tape(&mut tape, &vars, clip, t)?;
        Ok(FrameEmbedding {
            content: tape.value(c).clone(),
            temporal: te.map(|t| tape.value(t).clone()),
        })
    }

    pub fn encode_all(&self, clip: &VideoClip) -> Result<EmbeddingSet> {
        let frames = (1..=clip.frame_count())
            .map(|t| self.encode(clip, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingSet { frames })
    }

    // ---- decoder -------------------------------------------------------

    /// Decode on the tape from embedding var ids. Returns the RGB output var
    /// plus any pending running-statistics updates (training mode only).
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        e_content: VarId,
        e_temporal: Option<VarId>,
        mode: ForwardMode,
        gate: GateMode,
    ) -> Result<(VarId, Vec<BnStatsUpdate>)> {
        let mut updates = Vec::new();
        let mut h = e_content;
        for (idx, block) in self.layout.blocks.iter().enumerate() {
            let l = idx + 1;
            let prev_dims = (tape.value(h).height(), tape.value(h).width());
            let conv =
                tape.conv2d(h, vars.var(block.conv.w), Some(vars.var(block.conv.b)), block.conv.geom)?;
            let shuffled = tape.pixel_shuffle(conv, block.rate)?;
            let hat = tape.gelu(shuffled);
            let dims = (tape.value(hat).height(), tape.value(hat).width());
            if dims != (prev_dims.0 * block.rate, prev_dims.1 * block.rate) {
                return Err(Error::InvalidConfig(format!(
                    "block {l}: expected {}x{}, got {}x{}",
                    prev_dims.0 * block.rate,
                    prev_dims.1 * block.rate,
                    dims.0,
                    dims.1
                )));
            }

            h = hat;
            if self.config.has_shortcuts() && (SHORTCUT_FIRST..=SHORTCUT_LAST).contains(&l) {
                let sc = &self.layout.shortcuts[l - SHORTCUT_FIRST];
                let e_t = e_temporal.ok_or_else(|| {
                    Error::InvalidArgument("variant L decode requires a temporal embedding".into())
                })?;
                let z = self.run_shortcut(tape, vars, sc, e_t, mode, &mut updates)?;
                h = self.run_fusion(tape, vars, sc, h, z, gate)?;
            }
        }
        let head = self.layout.head.as_ref().unwrap();
        let out = tape.conv2d(h, vars.var(head.w), Some(vars.var(head.b)), head.geom)?;
        Ok((out, updates))
    }

    /// Upscale + batch norm + GELU.
    fn run_shortcut(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        sc: &ShortcutHandle,
        e_temporal: VarId,
        mode: ForwardMode,
        updates: &mut Vec<BnStatsUpdate>,
    ) -> Result<VarId> {
        let up = match sc.upscaler {
            UpscalerHandle::Kfc { k1, k2, b_c, b_h, b_w } => tape.kfc(
                e_temporal,
                vars.var(k1),
                vars.var(k2),
                vars.var(b_c),
                vars.var(b_h),
                vars.var(b_w),
            )?,
            UpscalerHandle::Deconv { conv } => {
                tape.deconv2d(e_temporal, vars.var(conv.w), Some(vars.var(conv.b)), conv.geom)?
            }
            UpscalerHandle::Bilinear { rate, conv } => {
                let up = tape.bilinear_upsample(e_temporal, rate)?;
                tape.conv2d(up, vars.var(conv.w), Some(vars.var(conv.b)), conv.geom)?
            }
        };
        let normed = match mode {
            ForwardMode::Train => {
                let spatial = tape.value(up).height() * tape.value(up).width();
                let (id, mean, var) =
                    tape.batch_norm_train(up, vars.var(sc.bn.gamma), vars.var(sc.bn.beta), ops::BN_EPS)?;
                updates.push(BnStatsUpdate { bn: sc.bn, mean, var, n_spatial: spatial });
                id
            }
            ForwardMode::Eval => tape.batch_norm_eval(
                up,
                vars.var(sc.bn.gamma),
                vars.var(sc.bn.beta),
                self.store.value(sc.bn.run_mean).data(),
                self.store.value(sc.bn.run_var).data(),
                ops::BN_EPS,
            )?,
        };
        Ok(tape.gelu(normed))
    }

    fn run_fusion(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        sc: &ShortcutHandle,
        h_prev: VarId,
        z: VarId,
        gate: GateMode,
    ) -> Result<VarId> {
        match sc.fusion {
            FusionHandle::Bsm { w_n, w_m, w_s } => {
                let bsm_vars = BsmVars {
                    wn_w: vars.var(w_n.w),
                    wn_b: vars.var(w_n.b),
                    wm_w: vars.var(w_m.w),
                    wm_b: vars.var(w_m.b),
                    ws_w: vars.var(w_s.w),
                    ws_b: vars.var(w_s.b),
                    geom_n: w_n.geom,
                    geom_m: w_m.geom,
                    geom_s: w_s.geom,
                };
                let (n, s) = bsm_gate_tape(tape, z, h_prev, &bsm_vars)?;
                let s = match gate {
                    GateMode::Learned => s,
                    GateMode::ForceZero => {
                        let shape = tape.value(s).shape();
                        tape.input(Tensor3::zeros(shape.0, shape.1, shape.2))
                    }
                };
                bsm_combine_tape(tape, h_prev, n, s)
            }
            FusionHandle::Concat { conv } => match gate {
                // The serial-collapse hook bypasses the shortcut entirely.
                GateMode::ForceZero => Ok(h_prev),
                GateMode::Learned => {
                    let cat = tape.concat_channels(h_prev, z)?;
                    tape.conv2d(cat, vars.var(conv.w), Some(vars.var(conv.b)), conv.geom)
                }
            },
        }
    }

    /// Eval-mode decode of one frame embedding.
    pub fn decode_frame(&self, e: &FrameEmbedding) -> Result<Tensor3> {
        self.decode_frame_gated(e, GateMode::Learned)
    }

    pub fn decode_frame_gated(&self, e: &FrameEmbedding, gate: GateMode) -> Result<Tensor3> {
        let mut tape = Tape::new();
        let vars = self.register_params(&mut tape);
        let c = tape.input(e.content.clone());
        let t = e.temporal.as_ref().map(|t| tape.input(t.clone()));
        let (out, _) = self.decode_on_tape(&mut tape, &vars, c, t, ForwardMode::Eval, gate)?;
        Ok(tape.value(out).clone())
    }

    /// Apply deferred batch-norm statistics updates after a training step.
    pub fn apply_bn_updates(&mut self, updates: &[BnStatsUpdate]) {
        for u in updates {
            let mut state = ops::BatchNormState {
                gamma: self.store.value(u.bn.gamma).data().to_vec(),
                beta: self.store.value(u.bn.beta).data().to_vec(),
                running_mean: self.store.value(u.bn.run_mean).data().to_vec(),
                running_var: self.store.value(u.bn.run_var).data().to_vec(),
            };
            ops::update_running_stats(&mut state, &u.mean, &u.var, u.n_spatial);
            self.store
                .value_mut(u.bn.run_mean)
                .data_mut()
                .copy_from_slice(&state.running_mean);
            self.store
                .value_mut(u.bn.run_var)
                .data_mut()
                .copy_from_slice(&state.running_var);
        }
    }

    /// Full training-step forward: encode frame `t`, decode in training mode,
    /// and return the L2 loss root with the parameter bindings and pending
    /// batch-norm updates.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        clip: &VideoClip,
        t: usize,
    ) -> Result<(VarId, ParamVars, Vec<BnStatsUpdate>)> {
        let vars = self.register_params(tape);
        let (e_c, e_t) = self.encode_on_tape(tape, &vars, clip, t)?;
        let (pred, updates) =
            self.decode_on_tape(tape, &vars, e_c, e_t, ForwardMode::Train, GateMode::Learned)?;
        let target = tape.input(clip.frame(t)?.clone());
        let loss = tape.mse(pred, target)?;
        Ok((loss, vars, updates))
    }

    // ---- parameter counting ----------------------------------------------

    pub fn count_params(&self) -> ParamCounts {
        ParamCounts {
            encoder: self.store.group_elems(ParamGroup::Encoder),
            decoder: self.store.group_elems(ParamGroup::Decoder),
        }
    }

    pub fn shortcut_count(&self) -> usize {
        self.layout.shortcuts.len()
    }
}

/// Stored element counts split by role. Embedding counts live with the
/// [`EmbeddingSet`] they describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder
    }
}

#[allow(clippy::too_many_arguments)]
fn add_conv(
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    group: ParamGroup,
) -> ConvHandle {
    let fan_out = out_c * kernel * kernel;
    let draw = rng::kaiming_normal(rng, fan_out, out_c * in_c * kernel * kernel);
    let weight = Tensor3::from_vec(out_c * in_c, kernel, kernel, draw).unwrap();
    ConvHandle {
        w: store.add(format!("{prefix}.w"), weight, vec![out_c, in_c, kernel, kernel], true, group),
        b: store.add(format!("{prefix}.b"), Tensor3::zeros(out_c, 1, 1), vec![out_c], true, group),
        geom: ConvGeom { out_channels: out_c, in_channels: in_c, kernel, stride, padding },
    }
}

/// Strided 3x3 conv stack with GELU between stages; the last stage maps to
/// the embedding channel count with no trailing activation.
fn build_encoder_stack(
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    embed_channels: usize,
    stage_strides: Vec<usize>,
) -> Vec<ConvHandle> {
    let mid = embed_channels.max(8);
    let n = stage_strides.len();
    let mut stack = Vec::with_capacity(n);
    let mut c_in = 3;
    for (i, &stride) in stage_strides.iter().enumerate() {
        let c_out = if i + 1 == n { embed_channels } else { mid };
        stack.push(add_conv(store, rng, &format!("{prefix}{i}"), c_out, c_in, 3, stride, 1, ParamGroup::Encoder));
        c_in = c_out;
    }
    stack
}

// ---- checkpoint serialization -------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNRV";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Metadata kept in the checkpoint's config blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: PNeRVConfig,
    /// Training protocol the weights came from (`"regression"` /
    /// `"interpolation"`), when applicable.
    #[serde(default)]
    pub trained_mode: Option<String>,
}

pub fn write_checkpoint<W: Write>(
    model: &PNeRVModel,
    trained_mode: Option<String>,
    mut w: W,
) -> Result<()> {
    let meta = CheckpointMeta { config: model.config.clone(), trained_mode };
    let blob = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;

    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(&blob)?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, entry) in model.store.iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[entry.logical_shape.len() as u8])?;
        for &d in &entry.logical_shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in entry.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &PNeRVModel, trained_mode: Option<String>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, trained_mode, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated file".into()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(PNeRVModel, CheckpointMeta)> {
    let mut r = Reader { inner: r };
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let blob_len = r.u32()? as usize;
    let blob = r.bytes(blob_len)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&blob).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let mut model = PNeRVModel::build(meta.config.clone())?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint: tensor table has {count} entries, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Format("checkpoint: non-utf8 tensor name".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let id = model
            .store
            .id_by_name(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint: unknown tensor {name}")))?;
        if model.store.get(id).logical_shape != shape {
            return Err(Error::Format(format!(
                "checkpoint: tensor {name} has shape {shape:?}, model expects {:?}",
                model.store.get(id).logical_shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.store.value_mut(id).data_mut().copy_from_slice(&values);
    }
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(PNeRVModel, CheckpointMeta)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
