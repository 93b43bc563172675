//! Post-training compression: 8-bit uniform quantization of the decoder
//! weights and the per-frame embeddings, packed into a `PNRQ` bitstream.
//!
//! Quantization is per-tensor min-max: `code = round((v - min)/(max - min) * 255)`,
//! reconstructed by linear interpolation `min*(1-t) + max*t` with
//! `t = code/255`. The lerp form reproduces both endpoints exactly, which
//! makes `compress -> decompress -> compress` byte-idempotent. A tensor with
//! `max == min` stores all-zero codes and reconstructs `min` exactly.
//!
//! The stream carries only what decoding needs: the decoder-side tensors
//! (batch-norm statistics included) and one embedding set. Encoder weights
//! are training-time state; a decompressed model gets fresh seed-initialized
//! ones.

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    CheckpointMeta, EmbeddingSet, FrameEmbedding, PNeRVModel, ParamGroup,
};
use crate::tensor::Tensor3;
use crate::video::VideoClip;
use serde::Serialize;
use std::io::{Read, Write};
use std::path::Path;

pub const BITSTREAM_MAGIC: &[u8; 4] = b"PNRQ";
pub const BITSTREAM_VERSION: u16 = 1;

// ---- scalar quantization ---------------------------------------------------

/// One quantized tensor: range, codes and logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub codes: Vec<u8>,
}

pub fn quantize_u8(values: &[f64], shape: Vec<usize>) -> QuantTensor {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return QuantTensor { shape, min, max, codes: vec![0; values.len()] };
    }
    let scale = 255.0 / (max - min);
    let codes = values.iter().map(|&v| ((v - min) * scale).round() as u8).collect();
    QuantTensor { shape, min, max, codes }
}

pub fn dequantize(q: &QuantTensor) -> Vec<f64> {
    if q.min == q.max {
        return vec![q.min; q.codes.len()];
    }
    q.codes
        .iter()
        .map(|&c| {
            let t = c as f64 / 255.0;
            q.min * (1.0 - t) + q.max * t
        })
        .collect()
}

/// Half-step reconstruction bound of one tensor.
pub fn quant_step(q: &QuantTensor) -> f64 {
    (q.max - q.min) / 255.0
}

// ---- blob --------------------------------------------------------------------

/// Quantized decoder tensors (checkpoint order) plus quantized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlob {
    pub meta: CheckpointMeta,
    /// `(tensor name, quantized payload)`, in store order.
    pub model_tensors: Vec<(String, QuantTensor)>,
    /// Per frame: content embedding, then (variant L) temporal embedding.
    pub embeddings: Vec<Vec<QuantTensor>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateReport {
    pub model_bits: u64,
    pub embedding_bits: u64,
    pub header_bytes: u64,
    pub total_bits: u64,
    pub bpp: f64,
}

fn tensor3_shape(t: &Tensor3) -> Vec<usize> {
    vec![t.channels(), t.height(), t.width()]
}

pub fn build_blob(model: &PNeRVModel, embeddings: &EmbeddingSet) -> QuantizedBlob {
    let model_tensors = model
        .store()
        .iter()
        .filter(|(_, e)| e.group == ParamGroup::Decoder)
        .map(|(_, e)| (e.name.clone(), quantize_u8(e.value.data(), e.logical_shape.clone())))
        .collect();
    let embeddings = embeddings
        .frames
        .iter()
        .map(|f| {
            let mut v = vec![quantize_u8(f.content.data(), tensor3_shape(&f.content))];
            if let Some(t) = &f.temporal {
                v.push(quantize_u8(t.data(), tensor3_shape(t)));
            }
            v
        })
        .collect();
    QuantizedBlob {
        meta: CheckpointMeta { config: model.config().clone(), trained_mode: None },
        model_tensors,
        embeddings,
    }
}

/// Overwrite the decoder tensors with their dequantized values; the
/// in-memory counterpart of a bitstream round trip.
pub fn dequantize_model_weights(model: &mut PNeRVModel) {
    let decoder_ids: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, e)| e.group == ParamGroup::Decoder)
        .map(|(id, e)| (id, e.logical_shape.clone()))
        .collect();
    for (id, shape) in decoder_ids {
        let q = quantize_u8(model.store().value(id).data(), shape);
        let vals = dequantize(&q);
        model.store_mut().value_mut(id).data_mut().copy_from_slice(&vals);
    }
}

// ---- serialization -------------------------------------------------------

fn write_quant<W: Write>(q: &QuantTensor, mut w: W) -> Result<()> {
    w.write_all(&[q.shape.len() as u8])?;
    for &d in &q.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&q.min.to_le_bytes())?;
    w.write_all(&q.max.to_le_bytes())?;
    w.write_all(&q.codes)?;
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
            .map_err(|_| Error::Format("bitstream: truncated".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn quant(&mut self) -> Result<QuantTensor> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let min = self.f64()?;
        let max = self.f64()?;
        let n: usize = shape.iter().product();
        let codes = self.bytes(n)?;
        Ok(QuantTensor { shape, min, max, codes })
    }
}

pub fn write_blob<W: Write>(blob: &QuantizedBlob, mut w: W) -> Result<()> {
    let cfg = serde_json::to_vec(&blob.meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(BITSTREAM_MAGIC)?;
    w.write_all(&BITSTREAM_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(blob.model_tensors.len() as u32).to_le_bytes())?;
    for (name, q) in &blob.model_tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        write_quant(q, &mut w)?;
    }
    w.write_all(&(blob.embeddings.len() as u32).to_le_bytes())?;
    for frame in &blob.embeddings {
        w.write_all(&[frame.len() as u8])?;
        for q in frame {
            write_quant(q, &mut w)?;
        }
    }
    Ok(())
}

pub fn read_blob<R: Read>(r: R) -> Result<QuantizedBlob> {
    let mut r = Reader { inner: r };
    if r.bytes(4)? != BITSTREAM_MAGIC {
        return Err(Error::Format("bitstream: bad magic".into()));
    }
    let version = r.u16()?;
    if version != BITSTREAM_VERSION {
        return Err(Error::Format(format!(
            "bitstream: unsupported version {version} (expected {BITSTREAM_VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(cfg_len)?)
        .map_err(|e| Error::Format(format!("bitstream config: {e}")))?;
    let n_model = r.u32()? as usize;
    let mut model_tensors = Vec::with_capacity(n_model);
    for _ in 0..n_model {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Format("bitstream: non-utf8 tensor name".into()))?;
        model_tensors.push((name, r.quant()?));
    }
    let n_frames = r.u32()? as usize;
    let mut embeddings = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let parts = r.u8()? as usize;
        let mut frame = Vec::with_capacity(parts);
        for _ in 0..parts {
            frame.push(r.quant()?);
        }
        embeddings.push(frame);
    }
    Ok(QuantizedBlob { meta, model_tensors, embeddings })
}

// ---- compression pipeline ----------------------------------------------------

fn payload_bits(blob: &QuantizedBlob) -> (u64, u64) {
    let model: u64 = blob.model_tensors.iter().map(|(_, q)| q.codes.len() as u64 * 8).sum();
    let embed: u64 = blob
        .embeddings
        .iter()
        .flat_map(|f| f.iter())
        .map(|q| q.codes.len() as u64 * 8)
        .sum();
    (model, embed)
}

fn rate_of(blob: &QuantizedBlob, encoded_len: usize, frames: usize, h: usize, w: usize) -> RateReport {
    let (model_bits, embedding_bits) = payload_bits(blob);
    let header_bytes = encoded_len as u64 - (model_bits + embedding_bits) / 8;
    RateReport {
        model_bits,
        embedding_bits,
        header_bytes,
        total_bits: encoded_len as u64 * 8,
        bpp: metrics::bpp(model_bits, embedding_bits, frames, h, w),
    }
}

pub fn compress_to_vec(model: &PNeRVModel, embeddings: &EmbeddingSet) -> Result<(Vec<u8>, RateReport)> {
    let blob = build_blob(model, embeddings);
    let mut bytes = Vec::new();
    write_blob(&blob, &mut bytes)?;
    let rate = rate_of(
        &blob,
        bytes.len(),
        embeddings.frame_count(),
        model.config().out_height(),
        model.config().out_width(),
    );
    Ok((bytes, rate))
}

pub fn compress(model: &PNeRVModel, embeddings: &EmbeddingSet, path: &Path) -> Result<RateReport> {
    let (bytes, rate) = compress_to_vec(model, embeddings)?;
    std::fs::write(path, bytes)?;
    Ok(rate)
}

fn embedding_from_quants(parts: &[QuantTensor]) -> Result<FrameEmbedding> {
    let build = |q: &QuantTensor| -> Result<Tensor3> {
        if q.shape.len() != 3 {
            return Err(Error::Format(format!("embedding tensor has rank {}", q.shape.len())));
        }
        Tensor3::from_vec(q.shape[0], q.shape[1], q.shape[2], dequantize(q))
    };
    match parts {
        [content] => Ok(FrameEmbedding { content: build(content)?, temporal: None }),
        [content, temporal] => Ok(FrameEmbedding {
            content: build(content)?,
            temporal: Some(build(temporal)?),
        }),
        _ => Err(Error::Format(format!("frame carries {} embedding tensors", parts.len()))),
    }
}

pub fn decompress_from_slice(bytes: &[u8]) -> Result<(PNeRVModel, EmbeddingSet)> {
    let blob = read_blob(bytes)?;
    let mut model = PNeRVModel::build(blob.meta.config.clone())?;
    let expected: Vec<String> = model
        .store()
        .iter()
        .filter(|(_, e)| e.group == ParamGroup::Decoder)
        .map(|(_, e)| e.name.clone())
        .collect();
    if expected.len() != blob.model_tensors.len() {
        return Err(Error::Format(format!(
            "bitstream: {} decoder tensors, model expects {}",
            blob.model_tensors.len(),
            expected.len()
        )));
    }
    for ((name, q), want) in blob.model_tensors.iter().zip(&expected) {
        if name != want {
            return Err(Error::Format(format!("bitstream: tensor {name}, expected {want}")));
        }
        let id = model.store().id_by_name(name).unwrap();
        if model.store().get(id).logical_shape != q.shape {
            return Err(Error::Format(format!("bitstream: tensor {name} shape mismatch")));
        }
        let vals = dequantize(q);
        model.store_mut().value_mut(id).data_mut().copy_from_slice(&vals);
    }
    let frames = blob
        .embeddings
        .iter()
        .map(|f| embedding_from_quants(f))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, EmbeddingSet { frames }))
}

pub fn decompress(path: &Path) -> Result<(PNeRVModel, EmbeddingSet)> {
    let bytes = std::fs::read(path)?;
    decompress_from_slice(&bytes)
}

// ---- rate-distortion -----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RdReport {
    pub rate: RateReport,
    pub psnr: f64,
    /// Absent when the frames are smaller than one SSIM window.
    pub ms_ssim: Option<f64>,
}

/// Quantize model + embeddings, decode every frame from the bitstream path
/// and score it against the source clip.
pub fn rate_distortion(model: &PNeRVModel, clip: &VideoClip) -> Result<RdReport> {
    let embeddings = model.encode_all(clip)?;
    let (bytes, rate) = compress_to_vec(model, &embeddings)?;
    let (qmodel, qembeds) = decompress_from_slice(&bytes)?;

    let with_ms = metrics::ms_ssim_scales(clip.height(), clip.width()) >= 1;
    let mut psnr_sum = 0.0;
    let mut ms_sum = 0.0;
    for t in 1..=clip.frame_count() {
        let pred = qmodel.decode_frame(qembeds.get(t)?)?;
        psnr_sum += metrics::psnr(&pred, clip.frame(t)?)?;
        if with_ms {
            ms_sum += metrics::ms_ssim(&pred, clip.frame(t)?)?.value;
        }
    }
    let n = clip.frame_count() as f64;
    Ok(RdReport { rate, psnr: psnr_sum / n, ms_ssim: with_ms.then(|| ms_sum / n) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PNeRVConfig;
    use crate::rng;
    use crate::trainer::{train, TrainConfig};
    use rand::Rng;

    #[test]
    fn constant_tensor_roundtrips_exactly() {
        let q = quantize_u8(&[0.37; 9], vec![1, 3, 3]);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(dequantize(&q), vec![0.37; 9]);
    }

    #[test]
    fn endpoint_values_map_to_extreme_codes() {
        let q = quantize_u8(&[0.0, 1.0], vec![2]);
        assert_eq!(q.codes, vec![0, 255]);
        assert_eq!(dequantize(&q), vec![0.0, 1.0]);
    }

    #[test]
    fn reconstruction_error_within_half_step() {
        let mut r = rng::seeded(61);
        let values: Vec<f64> = (0..4096).map(|_| r.gen_range(-3.0..3.0)).collect();
        let q = quantize_u8(&values, vec![4096]);
        let back = dequantize(&q);
        let bound = quant_step(&q) / 2.0 + 1e-12;
        for (v, b) in values.iter().zip(&back) {
            assert!((v - b).abs() <= bound, "{v} vs {b}, bound {bound}");
        }
    }

    fn tiny_trained() -> (PNeRVModel, VideoClip) {
        let mut model = PNeRVModel::build(PNeRVConfig::tiny()).unwrap();
        let clip = VideoClip::moving_gradient(71, 2, 4, 8);
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        train(&mut model, &clip, &cfg).unwrap();
        (model, clip)
    }

    #[test]
    fn compress_decompress_compress_is_byte_identical() {
        let (model, clip) = tiny_trained();
        let embeddings = model.encode_all(&clip).unwrap();
        let (bytes1, _) = compress_to_vec(&model, &embeddings).unwrap();
        let (qmodel, qembeds) = decompress_from_slice(&bytes1).unwrap();
        let (bytes2, _) = compress_to_vec(&qmodel, &qembeds).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn rate_accounting_is_exact() {
        let (model, clip) = tiny_trained();
        let embeddings = model.encode_all(&clip).unwrap();
        let (bytes, rate) = compress_to_vec(&model, &embeddings).unwrap();

        let decoder_elems: u64 = model
            .store()
            .iter()
            .filter(|(_, e)| e.group == ParamGroup::Decoder)
            .map(|(_, e)| e.value.len() as u64)
            .sum();
        assert_eq!(rate.model_bits, 8 * decoder_elems);
        assert_eq!(rate.embedding_bits, 8 * embeddings.total_elems() as u64);
        assert_eq!(
            rate.header_bytes,
            bytes.len() as u64 - (rate.model_bits + rate.embedding_bits) / 8
        );
        assert_eq!(rate.total_bits, bytes.len() as u64 * 8);
        let want_bpp = metrics::bpp(rate.model_bits, rate.embedding_bits, 2, 4, 8);
        assert_eq!(rate.bpp, want_bpp);
    }

    #[test]
    fn file_path_matches_in_memory_dequantization() {
        let (model, clip) = tiny_trained();
        let embeddings = model.encode_all(&clip).unwrap();
        let (bytes, _) = compress_to_vec(&model, &embeddings).unwrap();
        let (file_model, file_embeds) = decompress_from_slice(&bytes).unwrap();

        let mut mem_model = PNeRVModel::build(model.config().clone()).unwrap();
        for (id, e) in model.store().iter() {
            let mid = mem_model.store().id_by_name(&e.name).unwrap();
            let data = model.store().value(id).data().to_vec();
            mem_model.store_mut().value_mut(mid).data_mut().copy_from_slice(&data);
        }
        dequantize_model_weights(&mut mem_model);

        for t in 1..=clip.frame_count() {
            let e = file_embeds.get(t).unwrap();
            let a = file_model.decode_frame(e).unwrap();
            let b = mem_model.decode_frame(e).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn quantized_psnr_never_beats_uncompressed_eval() {
        // The 8-bit noise only degrades monotonically once the model
        // actually fits; train to a real optimum first.
        for seed in [81u64, 82, 83] {
            let mut model =
                PNeRVModel::build(PNeRVConfig { seed, ..PNeRVConfig::tiny() }).unwrap();
            let clip = VideoClip::moving_gradient(seed, 2, 4, 8);
            let cfg = TrainConfig { epochs: 150, lr_max: 5e-3, ..TrainConfig::default() };
            train(&mut model, &clip, &cfg).unwrap();

            let mut clean = 0.0;
            for t in 1..=clip.frame_count() {
                let e = model.encode(&clip, t).unwrap();
                let pred = model.decode_frame(&e).unwrap();
                clean += metrics::psnr(&pred, clip.frame(t).unwrap()).unwrap();
            }
            clean /= clip.frame_count() as f64;

            let rd = rate_distortion(&model, &clip).unwrap();
            assert!(
                clean >= rd.psnr - 1e-9,
                "seed {seed}: quantized {} beat clean {clean}",
                rd.psnr
            );
        }
    }

    #[test]
    fn perfectly_fit_constant_survives_quantization_at_cap() {
        // A decoder whose tensors are all per-tensor constants quantizes
        // exactly: zero weights, unit gammas, and a head bias equal to the
        // clip value reproduce the constant frame bit for bit.
        let mut model = PNeRVModel::build(PNeRVConfig::tiny()).unwrap();
        let decoder_ids: Vec<_> = model
            .store()
            .iter()
            .filter(|(_, e)| e.group == ParamGroup::Decoder && e.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in decoder_ids {
            model.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        for l in 2..=5 {
            let g = model.store().id_by_name(&format!("short{l}.bn.gamma")).unwrap();
            model.store_mut().value_mut(g).data_mut().fill(1.0);
        }
        let hb = model.store().id_by_name("head.b").unwrap();
        model.store_mut().value_mut(hb).data_mut().fill(0.5);

        let frame = Tensor3::filled(3, 4, 8, 0.5);
        let clip = VideoClip::new(vec![frame; 2]).unwrap();
        let rd = rate_distortion(&model, &clip).unwrap();
        assert_eq!(rd.psnr, metrics::PSNR_CAP_DB);
    }

    #[test]
    fn corrupted_stream_is_rejected() {
        let (model, clip) = tiny_trained();
        let embeddings = model.encode_all(&clip).unwrap();
        let (mut bytes, _) = compress_to_vec(&model, &embeddings).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decompress_from_slice(&bytes), Err(Error::Format(_))));
        let (bytes, _) = compress_to_vec(&model, &embeddings).unwrap();
        assert!(decompress_from_slice(&bytes[..bytes.len() - 10]).is_err());
    }
}
