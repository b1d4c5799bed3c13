//! Browser bindings: controller traces, divergence sweeps and sprite rendering.
//!
//! Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`
//! and serve `crates/demo/www/` statically.

use gcvae::control::{ControllerState, PidConfig};
use gcvae::data::{render_sprite as render, DSPRITES_CARDINALITIES};
use gcvae::divergences::{diag_covariance, mahalanobis_squared, mmd_squared, pool_samples, scaled_mmd};
use gcvae::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Runs one controller against a measured loss that decays from `start`
/// toward `floor` at rate `decay` per step. Returns `[actual, weight]`
/// pairs flattened, one pair per step.
#[wasm_bindgen]
pub fn pid_trace(kp: f64, ki: f64, min_value: f64, set_point: f64, start: f64, floor: f64, decay: f64, steps: usize) -> Vec<f64> {
    let cfg = PidConfig { kp: kp.max(0.0), ki: ki.max(0.0), min_value: min_value.clamp(0.0, 1.0), set_point, integral_cap: None };
    let mut state = ControllerState::new(cfg);
    let mut out = Vec::with_capacity(2 * steps);
    for t in 0..steps {
        let actual = floor + (start - floor) * (-decay.max(0.0) * t as f64).exp();
        out.push(actual);
        out.push(state.step(actual).weight);
    }
    out
}

/// Squared MMD, Mahalanobis and scaled MMD between `n` samples of
/// N(shift·1, spread²·I) and `n` samples of N(0, I) in `k` dimensions, for
/// `points` shifts evenly spaced over [0, max_shift]. Returns
/// `[shift, mmd, mahalanobis, scaled_mmd]` rows flattened.
#[wasm_bindgen]
pub fn divergence_sweep(max_shift: f64, spread: f64, k: usize, n: usize, points: usize, seed: u64) -> Vec<f64> {
    let (k, n, points) = (k.clamp(1, 64), n.clamp(2, 1024), points.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_q = Tensor::randn(&[n, k], &mut rng);
    let zp = Tensor::randn(&[n, k], &mut rng);
    let sigma = (k as f64).sqrt();
    let mut out = Vec::with_capacity(4 * points);
    for i in 0..points {
        let shift = if points == 1 { max_shift } else { max_shift * i as f64 / (points - 1) as f64 };
        let zq = base_q.map(|v| shift + spread * v);
        let cov = pool_samples(&zq, &zp).and_then(|p| diag_covariance(&p, 1e-6));
        let row = cov.and_then(|cov| {
            Ok([shift, mmd_squared(&zq, &zp, sigma)?, mahalanobis_squared(&zq, &zp, &cov)?, scaled_mmd(&zq, &zp, sigma, &cov)?])
        });
        out.extend(row.unwrap_or([shift, f64::NAN, f64::NAN, f64::NAN]));
    }
    out
}

/// One 64×64 synthetic sprite as 8-bit gray levels. Factor indices are
/// clamped to their ranges (shape 3, scale 6, orientation 40, x 32, y 32).
#[wasm_bindgen]
pub fn render_sprite(shape: usize, scale: usize, orientation: usize, x: usize, y: usize) -> Vec<u8> {
    let c = DSPRITES_CARDINALITIES;
    render(shape.min(c[0] - 1), scale.min(c[1] - 1), orientation.min(c[2] - 1), x.min(c[3] - 1), y.min(c[4] - 1))
        .into_iter()
        .map(|v| if v > 0.5 { 255 } else { 0 })
        .collect()
}
