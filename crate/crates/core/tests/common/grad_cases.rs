//! Finite-difference cases, one per differentiable op plus a composite chain.

use attnage::rng::SplitMix64;
use attnage::{BnHyper, Graph64, Mode, Result, RunningStats, Tensor64, Var};

use super::{gradcheck, random_tensor, spaced_tensor};

pub const INSTANCES: u64 = 20;

pub type Case = fn(&mut SplitMix64) -> f64;

/// Reduces an arbitrary output to a scalar against a fixed random target,
/// so every output element gets a distinct upstream gradient.
fn against(g: &mut Graph64, out: Var, target: &Tensor64) -> Result<Var> {
    let t = g.constant(target.clone());
    g.mse_loss(out, t)
}

fn shape(rng: &mut SplitMix64, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

/// Worst relative error of `case` over [`INSTANCES`] seeded instances.
pub fn worst_error(name: &str, case: Case) -> f64 {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    (0..INSTANCES)
        .map(|i| case(&mut SplitMix64::derived(0x6772_6164, &[tag, i])))
        .fold(0.0, f64::max)
}

pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("max_pool2d", max_pool2d),
    ("global_avg_pool", global_avg_pool),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("linear", linear),
    ("relu", relu),
    ("add", add),
    ("scale", scale),
    ("square", square),
    ("sum", sum),
    ("concat", concat),
    ("reshape", reshape),
    ("mse_loss", mse_loss),
    ("composite", composite),
];

fn conv2d(rng: &mut SplitMix64) -> f64 {
    let (n, c, k) = (shape(rng, 1, 2), shape(rng, 1, 3), shape(rng, 1, 3));
    let kernel = [1, 3][rng.below(2) as usize];
    let stride = shape(rng, 1, 2);
    let padding = if kernel == 3 { shape(rng, 0, 1) } else { 0 };
    let side = shape(rng, 3, 6);
    let x = random_tensor(rng, &[n, c, side, side], -1.0, 1.0);
    let w = random_tensor(rng, &[k, c, kernel, kernel], -1.0, 1.0);
    let b = random_tensor(rng, &[k], -1.0, 1.0);
    let probe = attnage::kernels::conv2d(&x, &w, Some(&b), stride, padding).unwrap();
    let target = random_tensor(rng, probe.dims(), -1.0, 1.0);
    gradcheck(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
        against(g, y, &target)
    })
}

fn max_pool2d(rng: &mut SplitMix64) -> f64 {
    let (kernel, stride) = [(2, 2), (3, 2), (2, 1)][rng.below(3) as usize];
    let padding = if kernel == 3 { 1 } else { 0 };
    let side = shape(rng, 4, 6);
    let x = spaced_tensor(rng, &[2, 2, side, side], 0.01);
    let probe = attnage::kernels::max_pool2d(&x, kernel, stride, padding).unwrap().0;
    let target = random_tensor(rng, probe.dims(), -1.0, 1.0);
    gradcheck(&[x], |g, v| {
        let y = g.max_pool2d(v[0], kernel, stride, padding)?;
        against(g, y, &target)
    })
}

fn global_avg_pool(rng: &mut SplitMix64) -> f64 {
    let (h, w) = (shape(rng, 1, 5), shape(rng, 1, 5));
    let x = random_tensor(rng, &[2, 3, h, w], -1.0, 1.0);
    let target = random_tensor(rng, &[2, 3], -1.0, 1.0);
    gradcheck(&[x], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        against(g, y, &target)
    })
}

fn batch_norm_train(rng: &mut SplitMix64) -> f64 {
    let (n, c) = (shape(rng, 2, 4), shape(rng, 1, 3));
    let dims = if rng.below(2) == 0 { vec![n, c, 3, 2] } else { vec![n, c] };
    let x = random_tensor(rng, &dims, -2.0, 2.0);
    let gamma = random_tensor(rng, &[c], 0.5, 1.5);
    let beta = random_tensor(rng, &[c], -0.5, 0.5);
    let target = random_tensor(rng, &dims, -1.0, 1.0);
    gradcheck(&[x, gamma, beta], |g, v| {
        let mut running = RunningStats::new(c);
        let y = g.batch_norm2d(v[0], v[1], v[2], &mut running, Mode::Train, BnHyper::default())?;
        against(g, y, &target)
    })
}

fn batch_norm_eval(rng: &mut SplitMix64) -> f64 {
    let c = shape(rng, 1, 3);
    let n = shape(rng, 1, 3);
    let x = random_tensor(rng, &[n, c, 2, 3], -2.0, 2.0);
    let gamma = random_tensor(rng, &[c], 0.5, 1.5);
    let beta = random_tensor(rng, &[c], -0.5, 0.5);
    let stats = RunningStats {
        mean: random_tensor(rng, &[c], -0.5, 0.5),
        var: random_tensor(rng, &[c], 0.5, 2.0),
    };
    let target = random_tensor(rng, x.dims(), -1.0, 1.0);
    gradcheck(&[x, gamma, beta], |g, v| {
        let mut running = stats.clone();
        let y = g.batch_norm2d(v[0], v[1], v[2], &mut running, Mode::Eval, BnHyper::default())?;
        against(g, y, &target)
    })
}

fn linear(rng: &mut SplitMix64) -> f64 {
    let (n, d, m) = (shape(rng, 1, 4), shape(rng, 1, 5), shape(rng, 1, 3));
    let x = random_tensor(rng, &[n, d], -1.0, 1.0);
    let w = random_tensor(rng, &[m, d], -1.0, 1.0);
    let b = random_tensor(rng, &[m], -1.0, 1.0);
    let target = random_tensor(rng, &[n, m], -1.0, 1.0);
    gradcheck(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        against(g, y, &target)
    })
}

fn relu(rng: &mut SplitMix64) -> f64 {
    let x = spaced_tensor(rng, &[3, 4], 0.1);
    let target = random_tensor(rng, &[3, 4], -1.0, 1.0);
    gradcheck(&[x], |g, v| {
        let y = g.relu(v[0]);
        against(g, y, &target)
    })
}

fn add(rng: &mut SplitMix64) -> f64 {
    let a = random_tensor(rng, &[2, 3], -1.0, 1.0);
    let b = random_tensor(rng, &[2, 3], -1.0, 1.0);
    let target = random_tensor(rng, &[2, 3], -1.0, 1.0);
    gradcheck(&[a, b], |g, v| {
        let y = g.add(v[0], v[1])?;
        against(g, y, &target)
    })
}

fn scale(rng: &mut SplitMix64) -> f64 {
    let a = random_tensor(rng, &[5], -1.0, 1.0);
    let factor = rng.uniform(-2.0, 2.0);
    let target = random_tensor(rng, &[5], -1.0, 1.0);
    gradcheck(&[a], |g, v| {
        let y = g.scale(v[0], factor);
        against(g, y, &target)
    })
}

fn square(rng: &mut SplitMix64) -> f64 {
    let a = random_tensor(rng, &[2, 2], -1.0, 1.0);
    let target = random_tensor(rng, &[2, 2], -1.0, 1.0);
    gradcheck(&[a], |g, v| {
        let y = g.square(v[0]);
        against(g, y, &target)
    })
}

fn sum(rng: &mut SplitMix64) -> f64 {
    let a = random_tensor(rng, &[3, 2], -1.0, 1.0);
    gradcheck(&[a], |g, v| {
        let s = g.sum(v[0]);
        Ok(g.square(s))
    })
}

fn concat(rng: &mut SplitMix64) -> f64 {
    let n = shape(rng, 1, 3);
    let (wa, wb) = (shape(rng, 1, 4), shape(rng, 1, 4));
    let a = random_tensor(rng, &[n, wa], -1.0, 1.0);
    let b = random_tensor(rng, &[n, wb], -1.0, 1.0);
    let target = random_tensor(rng, &[n, a.dims()[1] + b.dims()[1]], -1.0, 1.0);
    gradcheck(&[a, b], |g, v| {
        let y = g.concat(v[0], v[1])?;
        against(g, y, &target)
    })
}

fn reshape(rng: &mut SplitMix64) -> f64 {
    let a = random_tensor(rng, &[2, 3, 2], -1.0, 1.0);
    let target = random_tensor(rng, &[4, 3], -1.0, 1.0);
    gradcheck(&[a], |g, v| {
        let y = g.reshape(v[0], &[4, 3])?;
        against(g, y, &target)
    })
}

fn mse_loss(rng: &mut SplitMix64) -> f64 {
    let n = shape(rng, 1, 6);
    let p = random_tensor(rng, &[n, 1], -2.0, 2.0);
    let t = random_tensor(rng, &[n, 1], -2.0, 2.0);
    gradcheck(&[p, t], |g, v| g.mse_loss(v[0], v[1]))
}

fn composite(rng: &mut SplitMix64) -> f64 {
    let (n, c, k, side) = (3, 2, 3, 6);
    let x = random_tensor(rng, &[n, c, side, side], -1.0, 1.0);
    let w = random_tensor(rng, &[k, c, 3, 3], -0.5, 0.5);
    let gamma = random_tensor(rng, &[k], 0.5, 1.5);
    let beta = random_tensor(rng, &[k], -0.5, 0.5);
    let flat = k * (side / 2) * (side / 2);
    let lw = random_tensor(rng, &[1, flat], -0.3, 0.3);
    let lb = random_tensor(rng, &[1], -0.1, 0.1);
    let target = random_tensor(rng, &[n, 1], -1.0, 1.0);
    // no conv bias: train-mode batch norm cancels it, so its true gradient is zero
    gradcheck(&[x, w, gamma, beta, lw, lb], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1)?;
        let mut running = RunningStats::new(k);
        let y = g.batch_norm2d(y, v[2], v[3], &mut running, Mode::Train, BnHyper::default())?;
        let y = g.relu(y);
        let y = g.max_pool2d(y, 2, 2, 0)?;
        let y = g.reshape(y, &[n, flat])?;
        let y = g.linear(y, v[4], Some(v[5]))?;
        against(g, y, &target)
    })
}
