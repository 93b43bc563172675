//! The finite-difference suite behind `pnerv gradcheck`: every
//! differentiable operation plus the full tiny model, each checked against
//! central differences at the 1e-4 relative tolerance.

use pnerv_core::bsm::{bsm_forward_tape, BSMParams, BsmVars};
use pnerv_core::kfc::KFcParams;
use pnerv_core::model::{ForwardMode, GateMode, PNeRVConfig, PNeRVModel};
use pnerv_core::ops::{ConvGeom, BN_EPS};
use pnerv_core::rng;
use pnerv_core::tape::grad_check;
use pnerv_core::tensor::Tensor3;
use pnerv_core::video::VideoClip;
use rand::Rng;

pub const TOLERANCE: f64 = 1e-4;

pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random_tensor(r: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn push(results: &mut Vec<SuiteEntry>, name: &str, report: pnerv_core::tape::GradCheckReport) {
    results.push(SuiteEntry {
        name: name.to_string(),
        max_rel_err: report.worst(),
        passed: report.passed(),
    });
}

pub fn run_suite(seed: u64) -> pnerv_core::Result<Vec<SuiteEntry>> {
    let mut r = rng::seeded(seed);
    let mut results = Vec::new();

    // Elementwise activations, probed against a fixed random cotangent.
    let x = random_tensor(&mut r, 2, 4, 4);
    let probe = random_tensor(&mut r, 2, 4, 4);
    for name in ["relu", "gelu", "sigmoid"] {
        let probe = probe.clone();
        let report = grad_check(
            &[("x".into(), x.clone())],
            move |tape, ids| {
                let out = match name {
                    "relu" => tape.relu(ids[0]),
                    "gelu" => tape.gelu(ids[0]),
                    _ => tape.sigmoid(ids[0]),
                };
                let p = tape.input(probe.clone());
                let weighted = tape.mul(out, p)?;
                Ok(tape.sum_all(weighted))
            },
            TOLERANCE,
        )?;
        push(&mut results, name, report);
    }

    // Conv / deconv with bias.
    let geom = ConvGeom { out_channels: 3, in_channels: 2, kernel: 3, stride: 2, padding: 1 };
    let cx = random_tensor(&mut r, 2, 5, 6);
    let cw = random_tensor(&mut r, 6, 3, 3);
    let cb = random_tensor(&mut r, 3, 1, 1);
    let report = grad_check(
        &[("x".into(), cx), ("w".into(), cw.clone()), ("b".into(), cb)],
        move |tape, ids| {
            let out = tape.conv2d(ids[0], ids[1], Some(ids[2]), geom)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "conv2d", report);

    let dx = random_tensor(&mut r, 3, 4, 4);
    let db = random_tensor(&mut r, 2, 1, 1);
    let report = grad_check(
        &[("x".into(), dx), ("w".into(), cw), ("b".into(), db)],
        move |tape, ids| {
            let out = tape.deconv2d(ids[0], ids[1], Some(ids[2]), geom)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "deconv2d", report);

    // Pixel shuffle inside a conv sandwich, the way blocks use it.
    let px = random_tensor(&mut r, 8, 3, 4);
    let report = grad_check(
        &[("x".into(), px)],
        |tape, ids| {
            let out = tape.pixel_shuffle(ids[0], 2)?;
            let g = tape.gelu(out);
            let sq = tape.mul(g, g)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "pixel_shuffle", report);

    let bx = random_tensor(&mut r, 2, 3, 4);
    let report = grad_check(
        &[("x".into(), bx)],
        |tape, ids| {
            let out = tape.bilinear_upsample(ids[0], 2)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "bilinear_upsample", report);

    // Batch norm, both statistics modes.
    let nx = random_tensor(&mut r, 3, 4, 4);
    let gamma = random_tensor(&mut r, 3, 1, 1);
    let beta = random_tensor(&mut r, 3, 1, 1);
    let report = grad_check(
        &[("x".into(), nx.clone()), ("gamma".into(), gamma.clone()), ("beta".into(), beta.clone())],
        |tape, ids| {
            let (out, _, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], BN_EPS)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "batch_norm_train", report);

    let rm: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
    let report = grad_check(
        &[("x".into(), nx), ("gamma".into(), gamma), ("beta".into(), beta)],
        move |tape, ids| {
            let out = tape.batch_norm_eval(ids[0], ids[1], ids[2], &rm, &rv, BN_EPS)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "batch_norm_eval", report);

    // KFc.
    let kp = KFcParams::init(&mut r, 2, 2, 3, 3, 4);
    let kx = random_tensor(&mut r, 2, 2, 3);
    let report = grad_check(
        &[
            ("x".into(), kx),
            ("k1".into(), kp.k1.clone()),
            ("k2".into(), kp.k2.clone()),
            ("b_c".into(), random_tensor(&mut r, 2, 1, 1)),
            ("b_h".into(), random_tensor(&mut r, 3, 1, 1)),
            ("b_w".into(), random_tensor(&mut r, 4, 1, 1)),
        ],
        |tape, ids| {
            let out = tape.kfc(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "kfc_forward", report);

    // BSM fusion.
    let bp = BSMParams::init(&mut r, 2, 2, 3)?;
    let bz = random_tensor(&mut r, 2, 3, 3);
    let bh = random_tensor(&mut r, 2, 3, 3);
    let geoms = (
        ConvGeom::of(&bp.w_n, 1, 1),
        ConvGeom::of(&bp.w_m, 1, 1),
        ConvGeom::of(&bp.w_s, 1, 1),
    );
    let report = grad_check(
        &[
            ("z".into(), bz),
            ("h".into(), bh),
            ("wn_w".into(), bp.w_n.weight.clone()),
            ("wn_b".into(), Tensor3::from_slice_1d(&bp.w_n.bias)),
            ("wm_w".into(), bp.w_m.weight.clone()),
            ("wm_b".into(), Tensor3::from_slice_1d(&bp.w_m.bias)),
            ("ws_w".into(), bp.w_s.weight.clone()),
            ("ws_b".into(), Tensor3::from_slice_1d(&bp.w_s.bias)),
        ],
        move |tape, ids| {
            let vars = BsmVars {
                wn_w: ids[2],
                wn_b: ids[3],
                wm_w: ids[4],
                wm_b: ids[5],
                ws_w: ids[6],
                ws_b: ids[7],
                geom_n: geoms.0,
                geom_m: geoms.1,
                geom_s: geoms.2,
            };
            let out = bsm_forward_tape(tape, ids[0], ids[1], &vars)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        },
        TOLERANCE,
    )?;
    push(&mut results, "bsm_forward", report);

    // Full tiny variant-L pipeline through encoder, decoder and loss.
    let model = PNeRVModel::build(PNeRVConfig { seed, ..PNeRVConfig::tiny() })?;
    let clip = VideoClip::moving_gradient(seed ^ 0x9e37_79b9, 2, 4, 8);
    let params = model.trainable_params();
    let report = grad_check(
        &params,
        |tape, ids| {
            let vars = model.bind_params(ids);
            let (e_c, e_t) = model.encode_on_tape(tape, &vars, &clip, 1)?;
            let (pred, _) =
                model.decode_on_tape(tape, &vars, e_c, e_t, ForwardMode::Train, GateMode::Learned)?;
            let target = tape.input(clip.frame(1)?.clone());
            tape.mse(pred, target)
        },
        TOLERANCE,
    )?;
    push(&mut results, "pnerv_l_tiny_full", report);

    Ok(results)
}
