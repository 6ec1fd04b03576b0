//! Per-kernel timings at desk-profile shapes.

use std::time::Instant;

use attnage::kernels::{self, BnHyper, Mode, RunningStats};
use attnage::Tensor;

fn time<R>(label: &str, f: impl Fn() -> R) {
    f();
    let t0 = Instant::now();
    for _ in 0..3 {
        std::hint::black_box(f());
    }
    println!("{label:40} {:8.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / 3.0);
}

fn main() {
    let n = 16;
    for (c, s, stride) in [(16usize, 96usize, 1usize), (32, 48, 1), (64, 24, 1), (128, 12, 1), (16, 96, 2)] {
        let cout = if stride == 2 { 2 * c } else { c };
        let x = Tensor::<f32>::from_fn(&[n, c, s, s], |i| ((i * 13) % 7) as f32 - 3.0);
        let w = Tensor::<f32>::from_fn(&[cout, c, 3, 3], |i| ((i * 5) % 11) as f32 * 0.01);
        let y = kernels::conv2d(&x, &w, None, stride, 1).unwrap();
        time(&format!("conv fwd c{c} s{s} st{stride}"), || kernels::conv2d(&x, &w, None, stride, 1).unwrap());
        time(&format!("conv bwd c{c} s{s} st{stride}"), || kernels::conv2d_backward(&x, &w, &y, stride, 1, true).unwrap());
        let g = Tensor::full(&[c], 1.0f32);
        let b = Tensor::zeros(&[c]);
        time(&format!("bn fwd c{c} s{s}"), || {
            let mut rs = RunningStats::new(c);
            kernels::batch_norm(&x, &g, &b, &mut rs, Mode::Train, BnHyper::default()).unwrap()
        });
        let mut rs = RunningStats::new(c);
        let (_, saved) = kernels::batch_norm(&x, &g, &b, &mut rs, Mode::Train, BnHyper::default()).unwrap();
        time(&format!("bn bwd c{c} s{s}"), || kernels::batch_norm_backward(x.dims(), &g, &saved, Mode::Train, &x));
        time(&format!("relu c{c} s{s}"), || x.map(|v| v.max(0.0)));
    }
}
