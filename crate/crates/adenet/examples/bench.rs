//! Quick throughput check: forward+backward steps on a realistic batch.

use adenet::model::{build_adenet, Mode};
use adenet::nn::softmax_xent;
use adenet::tensor::Tensor;

fn main() {
    let mut m = build_adenet(3, true, 0);
    m.set_mode(Mode::Train);
    let (n, h, w) = (16usize, 48usize, 48usize);
    let x = Tensor::from_vec(
        n,
        3,
        h,
        w,
        (0..n * 3 * h * w).map(|i| (i % 255) as f32 / 255.0).collect(),
    );
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let steps = 20;
    let t0 = std::time::Instant::now();
    for _ in 0..steps {
        let pass = m.forward(&x).unwrap();
        let out = softmax_xent(&pass.logits, &labels, None).unwrap();
        let ctx = pass.contexts.unwrap();
        let _ = m.backward(&ctx, &out.dlogits).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let imgs = (steps * n) as f64;
    println!(
        "{steps} steps of batch {n} at {h}x{w}: {dt:.2}s  ({:.1} img/s)",
        imgs / dt
    );
}
