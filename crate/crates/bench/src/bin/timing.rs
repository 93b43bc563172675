use pnerv_core::model::{PNeRVConfig, PNeRVModel};
use pnerv_core::tape::Tape;
use pnerv_core::video::VideoClip;
use std::time::Instant;

fn main() {
    let cfg = PNeRVConfig {
        embed_temporal_shape: (2, 4, 8),
        mainstream_strides: vec![2, 2, 2, 2, 1, 1],
        ..PNeRVConfig::desk_default()
    };
    let model = PNeRVModel::build(cfg).unwrap();
    let clip = VideoClip::moving_gradient(1, 4, 32, 64);

    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 2.0 {
        let e = model.encode(&clip, 1).unwrap();
        std::hint::black_box(model.decode_frame(&e).unwrap());
        n += 1;
    }
    println!("encode+decode eval: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 2.0 {
        let mut tape = Tape::new();
        let (loss, _, _) = model.training_loss(&mut tape, &clip, 1).unwrap();
        std::hint::black_box(tape.scalar(loss).unwrap());
        n += 1;
    }
    println!("train forward only: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 4.0 {
        let mut tape = Tape::new();
        let (loss, vars, _) = model.training_loss(&mut tape, &clip, 1).unwrap();
        tape.backward(loss).unwrap();
        let _g: Vec<_> = vars.pairs().map(|(_, v)| tape.grad(v).cloned()).collect();
        std::hint::black_box(_g);
        n += 1;
    }
    println!("train fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
