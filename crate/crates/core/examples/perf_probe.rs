use mvhand_core::network::{Model, ModelConfig};
use mvhand_core::par;
use ndarray::{Array2, Array4};
use std::time::Instant;

fn main() {
    // raw GEMM throughput
    let a = Array2::<f64>::from_shape_fn((276, 128), |(i, j)| ((i * 7 + j) as f64 * 0.01).sin());
    let b = Array2::<f64>::from_shape_fn((128, 512), |(i, j)| ((i + j * 3) as f64 * 0.02).cos());
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n {
        let c = par::matmul(a.view(), b.view());
        std::hint::black_box(&c);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    let flops = 2.0 * 276.0 * 128.0 * 512.0;
    println!("gemm 276x128x512: {:.3} ms  {:.2} GF/s", dt * 1e3, flops / dt / 1e9);

    let model = Model::new(ModelConfig { zero_init_heads: false, ..Default::default() }, 1).unwrap();
    let imgs = Array4::from_shape_fn((4, 112, 112, 3), |(v, y, x, c)| {
        (((v * 7919 + y * 31 + x * 17 + c * 5) % 256) as f64) / 255.0
    });
    let _ = model.forward_full(&imgs).unwrap();

    let t1 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut tape = model.new_tape();
        let st = model.embed_views(&mut tape, &imgs).unwrap();
        std::hint::black_box(&st);
    }
    println!("embed_views: {:.1} ms", t1.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let mut tape = model.new_tape();
    let st = model.embed_views(&mut tape, &imgs).unwrap();
    let t2 = Instant::now();
    for _ in 0..reps {
        let r = model.refine(&mut tape, &st);
        std::hint::black_box(&r);
    }
    println!("refine: {:.1} ms", t2.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t3 = Instant::now();
    for _ in 0..reps {
        let (out, _tape) = model.forward_full(&imgs).unwrap();
        let b = out.final_block();
        let mut loss = b.hand.theta.square().sum_all();
        for cam in &b.cams {
            loss = loss.add(&cam.t.square().sum_all()).add(&cam.fov.square().sum_all());
        }
        loss.backward();
        std::hint::black_box(&loss);
    }
    println!("fwd+bwd: {:.1} ms", t3.elapsed().as_secs_f64() * 1e3 / reps as f64);
}
