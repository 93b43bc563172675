//! RGB clip container, raw file I/O and synthetic test clips.
//!
//! Two on-disk forms are supported:
//! - `.rgbv`: magic `RGBV`, then `T, H, W` as little-endian `u32`, then
//!   `T*H*W*3` raw RGB8 bytes, frame-major. No codec dependencies.
//! - a directory of binary P6 PPM frames named `frame_00000.ppm`,
//!   `frame_00001.ppm`, ...
//!
//! Loaded samples map `v/255` into `[0, 1]`; saving rounds half away from
//! zero. Frames whose aspect is not 1:2 are center cropped on load.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor3;
use rand::Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const RGBV_MAGIC: &[u8; 4] = b"RGBV";

/// A `T`-frame RGB clip; every frame is a `3 x H x W` tensor in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Tensor3>,
    height: usize,
    width: usize,
}

impl VideoClip {
    pub fn new(frames: Vec<Tensor3>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidArgument("clip must have at least one frame".into()));
        };
        let (c, h, w) = first.shape();
        if c != 3 {
            return Err(Error::shape("VideoClip frame channels", "3", format!("{c}")));
        }
        for f in &frames {
            if f.shape() != (3, h, w) {
                return Err(Error::shape(
                    "VideoClip frame dims",
                    format!("3x{h}x{w}"),
                    format!("{:?}", f.shape()),
                ));
            }
        }
        Ok(VideoClip { frames, height: h, width: w })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Frame by 1-based index `t` in `[1, T]`.
    pub fn frame(&self, t: usize) -> Result<&Tensor3> {
        if t == 0 || t > self.frames.len() {
            return Err(Error::OutOfRange(format!(
                "frame index {t} outside [1, {}]",
                self.frames.len()
            )));
        }
        Ok(&self.frames[t - 1])
    }

    pub fn frames(&self) -> &[Tensor3] {
        &self.frames
    }

    /// Symmetric temporal difference `(V_{t+1} - V_{t-1}) / 2` with the
    /// neighbor indices clamped at the clip boundaries.
    pub fn frame_diff(&self, t: usize) -> Result<Tensor3> {
        let t_next = (t + 1).min(self.frames.len());
        let t_prev = t.saturating_sub(1).max(1);
        let next = self.frame(t_next)?;
        let prev = self.frame(t_prev)?;
        next.zip_map(prev, |a, b| 0.5 * (a - b))
    }

    /// Center crop so that `W = 2H` exactly. Identity when already 1:2.
    pub fn center_crop_1x2(&self) -> VideoClip {
        if self.width == 2 * self.height {
            return self.clone();
        }
        let new_h = self.height.min(self.width / 2);
        let new_w = 2 * new_h;
        let off_h = (self.height - new_h) / 2;
        let off_w = (self.width - new_w) / 2;
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut out = Tensor3::zeros(3, new_h, new_w);
                for c in 0..3 {
                    for h in 0..new_h {
                        for w in 0..new_w {
                            out.set(c, h, w, f.get(c, h + off_h, w + off_w));
                        }
                    }
                }
                out
            })
            .collect();
        VideoClip { frames, height: new_h, width: new_w }
    }
}

// ---- synthetic clips --------------------------------------------------------

impl VideoClip {
    /// Every frame identical: a fixed random pattern.
    pub fn constant(seed: u64, t: usize, h: usize, w: usize) -> Self {
        let mut r = rng::seeded(seed);
        let frame = Tensor3::from_vec(3, h, w, (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect())
            .unwrap();
        VideoClip { frames: vec![frame; t], height: h, width: w }
    }

    /// Frame `t` (1-based) filled with the constant `slope * t`, so the
    /// per-pixel RMS gap between frames `i` and `j` is exactly
    /// `slope * |i - j|`.
    pub fn ramp(slope: f64, t: usize, h: usize, w: usize) -> Self {
        let frames = (1..=t)
            .map(|ti| Tensor3::filled(3, h, w, slope * ti as f64))
            .collect();
        VideoClip { frames, height: h, width: w }
    }

    /// Smooth two-axis gradient drifting across frames; the standard
    /// overfit-target used by tests and benches.
    pub fn moving_gradient(seed: u64, t: usize, h: usize, w: usize) -> Self {
        let mut r = rng::seeded(seed);
        let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        let speed: f64 = r.gen_range(0.5..1.5);
        let frames = (0..t)
            .map(|ti| {
                let shift = ti as f64 * speed / t as f64;
                let mut f = Tensor3::zeros(3, h, w);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let fy = y as f64 / h as f64;
                            let fx = x as f64 / w as f64;
                            let v = 0.5
                                + 0.25 * (std::f64::consts::TAU * (fx + shift) + phase).sin()
                                + 0.15 * (std::f64::consts::TAU * (fy - 0.7 * shift)).cos()
                                + 0.05 * c as f64;
                            f.set(c, y, x, v.clamp(0.0, 1.0));
                        }
                    }
                }
                f
            })
            .collect();
        VideoClip { frames, height: h, width: w }
    }
}

// ---- quantized byte conversion ----------------------------------------------

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_to_bytes(f: &Tensor3) -> Vec<u8> {
    // Interleaved RGB, row-major.
    let (h, w) = (f.height(), f.width());
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(f.get(c, y, x)));
            }
        }
    }
    out
}

fn frame_from_bytes(bytes: &[u8], h: usize, w: usize) -> Tensor3 {
    let mut f = Tensor3::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                f.set(c, y, x, bytes[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    f
}

// ---- file I/O ------------------------------------------------------------

/// Load a clip from an `.rgbv` file or a directory of P6 PPM frames,
/// applying the 1:2 center crop when needed.
pub fn load_video(path: &Path) -> Result<VideoClip> {
    let clip = if path.is_dir() {
        load_ppm_dir(path)?
    } else {
        load_rgbv(path)?
    };
    Ok(clip.center_crop_1x2())
}

/// Save as `.rgbv` when the path has that extension, otherwise as a
/// directory of PPM frames.
pub fn save_video(clip: &VideoClip, path: &Path) -> Result<()> {
    if path.extension().map(|e| e == "rgbv").unwrap_or(false) {
        save_rgbv(clip, path)
    } else {
        save_ppm_dir(clip, path)
    }
}

fn load_rgbv(path: &Path) -> Result<VideoClip> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format("rgbv: truncated header".into()))?;
    if &header[0..4] != RGBV_MAGIC {
        return Err(Error::Format("rgbv: bad magic".into()));
    }
    let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Format("rgbv: zero dimension".into()));
    }
    let mut frames = Vec::with_capacity(t);
    let mut buf = vec![0u8; h * w * 3];
    for _ in 0..t {
        file.read_exact(&mut buf)
            .map_err(|_| Error::Format("rgbv: truncated frame data".into()))?;
        frames.push(frame_from_bytes(&buf, h, w));
    }
    VideoClip::new(frames)
}

fn save_rgbv(clip: &VideoClip, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + clip.frame_count() * clip.height * clip.width * 3);
    out.extend_from_slice(RGBV_MAGIC);
    out.extend_from_slice(&(clip.frame_count() as u32).to_le_bytes());
    out.extend_from_slice(&(clip.height as u32).to_le_bytes());
    out.extend_from_slice(&(clip.width as u32).to_le_bytes());
    for f in &clip.frames {
        out.extend_from_slice(&frame_to_bytes(f));
    }
    fs::write(path, out)?;
    Ok(())
}

fn ppm_frame_name(i: usize) -> String {
    format!("frame_{i:05}.ppm")
}

fn load_ppm_dir(dir: &Path) -> Result<VideoClip> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(ppm_frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(load_ppm(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Format(format!(
            "no frame_00000.ppm found in {}",
            dir.display()
        )));
    }
    VideoClip::new(frames).map_err(|_| Error::Format("ppm frames have inconsistent dimensions".into()))
}

fn save_ppm_dir(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        save_ppm(f, &dir.join(ppm_frame_name(i)))?;
    }
    Ok(())
}

/// Binary P6, maxval 255.
fn load_ppm(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("ppm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(Error::Format("ppm: not a binary P6 file".into()));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::Format("ppm: bad width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::Format("ppm: bad height".into()))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| Error::Format("ppm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("ppm: unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w * 3 {
        return Err(Error::Format("ppm: truncated pixel data".into()));
    }
    Ok(frame_from_bytes(&bytes[pos..pos + h * w * 3], h, w))
}

fn save_ppm(frame: &Tensor3, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", frame.width(), frame.height())?;
    file.write_all(&frame_to_bytes(frame))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_clip_roundtrip_rgbv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.rgbv");
        let clip = VideoClip::new(vec![Tensor3::zeros(3, 2, 4)]).unwrap();
        save_video(&clip, &path).unwrap();
        let loaded = load_video(&path).unwrap();
        assert_eq!(loaded, clip);
    }

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_data() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::constant(4, 3, 4, 8);
        // Snap to the 8-bit grid first; the container is 8-bit.
        let snapped = VideoClip::new(
            clip.frames()
                .iter()
                .map(|f| f.map(|v| to_byte(v) as f64 / 255.0))
                .collect(),
        )
        .unwrap();
        let sub = dir.path().join("frames");
        save_video(&snapped, &sub).unwrap();
        let loaded = load_video(&sub).unwrap();
        assert_eq!(loaded, snapped);
    }

    #[test]
    fn rounding_rule_half_away_from_zero() {
        assert_eq!(to_byte(0.5), 128); // 127.5 rounds up
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(1.7), 255); // clamped
    }

    #[test]
    fn roundtrip_error_within_half_step() {
        let clip = VideoClip::moving_gradient(9, 2, 4, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rgbv");
        save_video(&clip, &path).unwrap();
        let loaded = load_video(&path).unwrap();
        for (a, b) in clip.frames().iter().zip(loaded.frames()) {
            assert!(a.max_abs_diff(b) <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn crop_makes_three_four_aspect_one_two() {
        let clip = VideoClip::constant(1, 2, 48, 64); // 3:4 aspect
        let cropped = clip.center_crop_1x2();
        assert_eq!(cropped.width(), 2 * cropped.height());
        assert_eq!((cropped.height(), cropped.width()), (32, 64));
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rgbv");
        fs::write(&path, b"NOPE aaaaaaaaaaaaaaaa").unwrap();
        assert!(matches!(load_video(&path), Err(Error::Format(_))));
    }

    #[test]
    fn frame_indexing_is_one_based() {
        let clip = VideoClip::ramp(0.1, 3, 2, 4);
        assert!(clip.frame(0).is_err());
        assert!(clip.frame(4).is_err());
        assert!((clip.frame(2).unwrap().data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn frame_diff_clamps_at_boundaries() {
        let clip = VideoClip::ramp(0.1, 4, 1, 2);
        // Interior: (v3 - v1)/2 = 0.1.
        let d2 = clip.frame_diff(2).unwrap();
        assert!((d2.data()[0] - 0.1).abs() < 1e-15);
        // Left edge: (v2 - v1)/2 = 0.05.
        let d1 = clip.frame_diff(1).unwrap();
        assert!((d1.data()[0] - 0.05).abs() < 1e-15);
        // Right edge: (v4 - v3)/2 = 0.05.
        let d4 = clip.frame_diff(4).unwrap();
        assert!((d4.data()[0] - 0.05).abs() < 1e-15);
    }
}
