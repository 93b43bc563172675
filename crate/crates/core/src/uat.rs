//! Rate-of-dynamics profiling and the capacity-bound calculator.
//!
//! A clip is treated as a function of its frame index. Its modulus of
//! continuity `omega(delta)` is the largest per-pixel RMS difference between
//! any two frames at index distance `<= delta`; the dual modulus
//! `omega^{-1}(eps)` is the largest index distance whose differences all stay
//! within `eps`. Smooth clips have small `omega` and large `omega^{-1}`.
//!
//! The bound calculator evaluates
//! `d_out^2 * (diam / omega_inv)^(d_in + 1)` with the suppressed
//! big-O constant fixed at 1, reporting the capacity ceiling of a purely
//! serial decoder; it grows without bound as the dynamics rate rises.

use crate::error::{Error, Result};
use crate::model::EmbeddingSet;
use crate::tensor::Tensor3;
use crate::video::VideoClip;
use serde::Serialize;

/// Per-pixel RMS distance between two frames.
pub fn frame_rms(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("frame_rms", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let n = a.len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sum / n).sqrt())
}

/// `omega(delta)`: max RMS difference over frame pairs with `|i - j| <= delta`.
pub fn modulus(clip: &VideoClip, delta: usize) -> Result<f64> {
    let t = clip.frame_count();
    if delta == 0 || delta > t - 1 {
        return Err(Error::OutOfRange(format!("delta {delta} outside [1, {}]", t - 1)));
    }
    let mut worst = 0.0f64;
    for i in 1..=t {
        for j in (i + 1)..=t.min(i + delta) {
            worst = worst.max(frame_rms(clip.frame(i)?, clip.frame(j)?)?);
        }
    }
    Ok(worst)
}

/// Empirical `omega` table for `delta = 1..T-1`, per-pixel RMS norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsProfile {
    pub omega: Vec<f64>,
    pub frame_count: usize,
    pub norm: &'static str,
}

impl DynamicsProfile {
    pub fn of_clip(clip: &VideoClip) -> Result<DynamicsProfile> {
        let t = clip.frame_count();
        // Single pass over all pairs: a pair at distance d contributes to
        // every delta >= d, so take a running max over distances.
        let mut by_distance = vec![0.0f64; t.saturating_sub(1)];
        for i in 1..=t {
            for j in (i + 1)..=t {
                let d = j - i;
                let rms = frame_rms(clip.frame(i)?, clip.frame(j)?)?;
                by_distance[d - 1] = by_distance[d - 1].max(rms);
            }
        }
        let mut omega = by_distance;
        for d in 1..omega.len() {
            omega[d] = omega[d].max(omega[d - 1]);
        }
        Ok(DynamicsProfile { omega, frame_count: t, norm: "rms" })
    }

    /// `omega(delta)` from the table; `omega(0) = 0` implicitly.
    pub fn omega(&self, delta: usize) -> Result<f64> {
        if delta == 0 {
            return Ok(0.0);
        }
        self.omega
            .get(delta - 1)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("delta {delta} outside table")))
    }
}

/// `omega^{-1}(eps)`: largest `delta` in `[0, T-1]` with `omega(delta) <= eps`.
pub fn dual_modulus(profile: &DynamicsProfile, eps: f64) -> usize {
    let mut best = 0;
    for (idx, &w) in profile.omega.iter().enumerate() {
        if w <= eps {
            best = idx + 1;
        }
    }
    best
}

// ---- capacity bound ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundQuery {
    pub d_in: usize,
    pub d_out: usize,
    /// Diameter of the embedding domain.
    pub diam: f64,
    pub epsilon: f64,
    pub omega_inv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ParamBound {
    Finite(f64),
    Unbounded(&'static str),
}

pub const UNBOUNDED: ParamBound = ParamBound::Unbounded("unbounded");

/// `d_out^2 (diam / omega_inv)^(d_in + 1)`, rounded up; the big-O constant
/// is fixed at 1, so values are up to that suppressed factor.
pub fn param_bound(q: &BoundQuery) -> Result<ParamBound> {
    if q.d_in == 0 || q.d_out == 0 || q.diam <= 0.0 || q.epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("bound query must be positive: {q:?}")));
    }
    if q.omega_inv > q.diam {
        return Err(Error::InvalidArgument(format!(
            "omega_inv {} exceeds domain diameter {}",
            q.omega_inv, q.diam
        )));
    }
    if q.omega_inv == 0.0 {
        return Ok(UNBOUNDED);
    }
    let ratio = q.diam / q.omega_inv;
    let value = (q.d_out as f64).powi(2) * ratio.powi(q.d_in as i32 + 1);
    Ok(ParamBound::Finite(value.ceil()))
}

// ---- ranking ------------------------------------------------------------

/// Sort clips by descending dual modulus at `eps` (smoothest first), ties
/// broken by name. All clips must share one frame count.
pub fn rank_by_dynamics(clips: &[(String, &VideoClip)], eps: f64) -> Result<Vec<(String, usize)>> {
    if clips.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two clips".into()));
    }
    let t = clips[0].1.frame_count();
    if clips.iter().any(|(_, c)| c.frame_count() != t) {
        return Err(Error::InvalidArgument("ranking needs equal frame counts".into()));
    }
    let mut scored = clips
        .iter()
        .map(|(name, clip)| {
            let profile = DynamicsProfile::of_clip(clip)?;
            Ok((name.clone(), dual_modulus(&profile, eps)))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// Max pairwise L2 distance between per-frame content embeddings; the
/// empirical stand-in for the embedding-domain diameter.
pub fn embedding_diameter(set: &EmbeddingSet) -> f64 {
    let mut diam = 0.0f64;
    for i in 0..set.frames.len() {
        for j in (i + 1)..set.frames.len() {
            let a = set.frames[i].content.data();
            let b = set.frames[j].content.data();
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            diam = diam.max(d2.sqrt());
        }
    }
    diam
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_clip_has_zero_omega_and_full_dual() {
        let clip = VideoClip::constant(3, 6, 4, 8);
        let profile = DynamicsProfile::of_clip(&clip).unwrap();
        assert!(profile.omega.iter().all(|&w| w == 0.0));
        for eps in [0.0, 1e-9, 0.5, 10.0] {
            assert_eq!(dual_modulus(&profile, eps), 5);
        }
    }

    #[test]
    fn two_frame_clip_omega_is_the_gap() {
        let a = Tensor3::filled(3, 2, 4, 0.25);
        let b = Tensor3::filled(3, 2, 4, 0.75);
        let clip = VideoClip::new(vec![a, b]).unwrap();
        assert_eq!(modulus(&clip, 1).unwrap(), 0.5);
        assert!(modulus(&clip, 0).is_err());
        assert!(modulus(&clip, 2).is_err());
    }

    #[test]
    fn ramp_clip_omega_is_linear_exactly() {
        // Dyadic slope keeps every RMS value exactly representable.
        let slope = 0.125;
        let clip = VideoClip::ramp(slope, 6, 2, 4);
        let profile = DynamicsProfile::of_clip(&clip).unwrap();
        for delta in 1..=5usize {
            assert_eq!(profile.omega(delta).unwrap(), slope * delta as f64);
            assert_eq!(modulus(&clip, delta).unwrap(), slope * delta as f64);
        }
    }

    /// Exhaustive pair-enumeration oracle on a non-dyadic ramp.
    #[test]
    fn modulus_matches_pair_enumeration() {
        let clip = VideoClip::ramp(0.1, 5, 2, 4);
        for delta in 1..=4usize {
            let mut want = 0.0f64;
            for i in 1..=5usize {
                for j in 1..=5usize {
                    if i < j && j - i <= delta {
                        want = want.max(
                            frame_rms(clip.frame(i).unwrap(), clip.frame(j).unwrap()).unwrap(),
                        );
                    }
                }
            }
            assert!((modulus(&clip, delta).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn dual_modulus_inverts_the_ramp_table() {
        let c = 0.125;
        let clip = VideoClip::ramp(c, 8, 2, 4);
        let profile = DynamicsProfile::of_clip(&clip).unwrap();
        assert_eq!(dual_modulus(&profile, 2.5 * c), 2);
        // Below omega(1) nothing qualifies.
        assert_eq!(dual_modulus(&profile, 0.5 * c), 0);
    }

    #[test]
    fn omega_tables_are_monotone_and_galois() {
        let clip = VideoClip::moving_gradient(91, 7, 8, 16);
        let profile = DynamicsProfile::of_clip(&clip).unwrap();
        for d in 1..profile.omega.len() {
            assert!(profile.omega[d] >= profile.omega[d - 1]);
        }
        let mut last = 0;
        for eps in [0.0, 0.01, 0.05, 0.1, 0.5, 1.0] {
            let dual = dual_modulus(&profile, eps);
            assert!(dual >= last, "dual modulus must be nondecreasing in eps");
            last = dual;
            if dual >= 1 {
                assert!(profile.omega(dual).unwrap() <= eps);
            }
        }
    }

    #[test]
    fn param_bound_formula_cases() {
        let q = BoundQuery { d_in: 1, d_out: 7, diam: 3.0, epsilon: 0.1, omega_inv: 3.0 };
        assert_eq!(param_bound(&q).unwrap(), ParamBound::Finite(49.0));

        let q = BoundQuery { d_in: 1, d_out: 4, diam: 2.0, epsilon: 0.1, omega_inv: 1.0 };
        assert_eq!(param_bound(&q).unwrap(), ParamBound::Finite(64.0));

        let q = BoundQuery { d_in: 2, d_out: 3, diam: 10.0, epsilon: 0.1, omega_inv: 1.0 };
        assert_eq!(param_bound(&q).unwrap(), ParamBound::Finite(9000.0));

        let q = BoundQuery { d_in: 1, d_out: 4, diam: 2.0, epsilon: 0.1, omega_inv: 0.0 };
        assert_eq!(param_bound(&q).unwrap(), UNBOUNDED);

        let bad = BoundQuery { d_in: 1, d_out: 4, diam: 2.0, epsilon: 0.1, omega_inv: 3.0 };
        assert!(param_bound(&bad).is_err());
    }

    #[test]
    fn param_bound_grows_as_dynamics_rate_rises() {
        let mut last = 0.0;
        for omega_inv in [8.0, 4.0, 2.0, 1.0] {
            let q = BoundQuery { d_in: 1, d_out: 5, diam: 8.0, epsilon: 0.1, omega_inv };
            match param_bound(&q).unwrap() {
                ParamBound::Finite(v) => {
                    assert!(v > last, "{v} !> {last}");
                    last = v;
                }
                _ => panic!("expected finite bound"),
            }
        }
    }

    #[test]
    fn ranking_prefers_smooth_clips() {
        let constant = VideoClip::constant(5, 6, 4, 8);
        let ramp = VideoClip::ramp(0.1, 6, 4, 8);
        let order = rank_by_dynamics(
            &[("ramp".into(), &ramp), ("constant".into(), &constant)],
            0.15,
        )
        .unwrap();
        assert_eq!(order[0].0, "constant");
        assert_eq!(order[0].1, 5);

        let r1 = VideoClip::ramp(0.05, 6, 4, 8);
        let r2 = VideoClip::ramp(0.10, 6, 4, 8);
        let r3 = VideoClip::ramp(0.15, 6, 4, 8);
        let order = rank_by_dynamics(
            &[("c".into(), &r3), ("b".into(), &r2), ("a".into(), &r1)],
            0.12,
        )
        .unwrap();
        assert_eq!(order.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);

        // Identical clips fall back to name order.
        let order = rank_by_dynamics(
            &[("z".into(), &constant), ("a".into(), &constant)],
            0.1,
        )
        .unwrap();
        assert_eq!(order[0].0, "a");
    }

    #[test]
    fn ranking_validates_inputs() {
        let c = VideoClip::constant(5, 6, 4, 8);
        assert!(rank_by_dynamics(&[("one".into(), &c)], 0.1).is_err());
        let short = VideoClip::constant(5, 3, 4, 8);
        assert!(rank_by_dynamics(&[("a".into(), &c), ("b".into(), &short)], 0.1).is_err());
    }

    #[test]
    fn embedding_diameter_on_known_points() {
        use crate::model::FrameEmbedding;
        let mk = |v: f64| FrameEmbedding {
            content: Tensor3::filled(2, 1, 1, v),
            temporal: None,
        };
        let set = EmbeddingSet { frames: vec![mk(0.0), mk(3.0), mk(1.0)] };
        // Farthest pair differs by 3 in each of 2 entries: sqrt(18).
        assert!((embedding_diameter(&set) - 18.0f64.sqrt()).abs() < 1e-12);
    }
}
