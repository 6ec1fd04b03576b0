//! Times one training step of the desk backbone.

use std::time::Instant;

use attnage::{Backbone, BackboneConfig, Graph, Mode, Profile, Tensor, Variant};

fn main() {
    let variant = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(Variant::ResNet18);
    let batch: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let bb = Backbone::<f32>::new(BackboneConfig::for_profile(Profile::Desk, variant), 0).unwrap();
    println!("params: {}", bb.num_params());
    let s = bb.config().input_size;
    let x = Tensor::from_fn(&[batch, 1, s, s], |i| ((i * 31) % 17) as f32 / 17.0);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = bb.forward(&mut g, xv, Mode::Train, true).unwrap();
        let loss = g.sum(out.pooled);
        let t1 = Instant::now();
        g.backward(loss).unwrap();
        let t2 = Instant::now();
        println!(
            "forward {:.3}s backward {:.3}s ({:.1} ms/image)",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t2 - t0).as_secs_f64() * 1000.0 / batch as f64
        );
    }
}
