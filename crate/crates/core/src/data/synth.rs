use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::Result;
use crate::metrics::FactorTable;
use crate::tensor::Tensor;

/// shape, scale, orientation, x-position, y-position.
pub const DSPRITES_CARDINALITIES: [usize; 5] = [3, 6, 40, 32, 32];
pub const SPRITE_SIDE: usize = 64;

/// Uniform factor draws; `synth_sprites(n, seed)` renders exactly these.
pub fn synth_factors(n: usize, seed: u64) -> FactorTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<usize>> = (0..5).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        for (col, &card) in columns.iter_mut().zip(&DSPRITES_CARDINALITIES) {
            col.push(rng.gen_range(0..card));
        }
    }
    FactorTable::from_columns(columns, DSPRITES_CARDINALITIES.to_vec()).expect("draws are in range")
}

/// Rasterizes one 64×64 binary sprite. Shapes: 0 square, 1 ellipse, 2 triangle.
pub fn render_sprite(shape: usize, scale: usize, orientation: usize, x: usize, y: usize) -> Vec<f64> {
    let side = SPRITE_SIDE as f64;
    let radius = 10.0 * (0.5 + 0.1 * scale as f64);
    let theta = 2.0 * PI * orientation as f64 / DSPRITES_CARDINALITIES[2] as f64;
    let (sin, cos) = theta.sin_cos();
    let span = side - 24.0;
    let cx = 12.0 + span * x as f64 / 31.0;
    let cy = 12.0 + span * y as f64 / 31.0;

    let mut img = vec![0.0; SPRITE_SIDE * SPRITE_SIDE];
    let reach = 1.5 * radius;
    let lo = |c: f64| (c - reach).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + reach).ceil() as usize).min(SPRITE_SIDE);
    for r in lo(cy)..hi(cy) {
        for c in lo(cx)..hi(cx) {
            let dx = c as f64 + 0.5 - cx;
            let dy = r as f64 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let inside = match shape {
                0 => u.abs() <= radius && v.abs() <= radius,
                1 => (u / radius).powi(2) + (v / (0.5 * radius)).powi(2) <= 1.0,
                _ => v.abs() <= radius && u.abs() <= 0.5 * (v + radius),
            };
            if inside {
                img[r * SPRITE_SIDE + c] = 1.0;
            }
        }
    }
    img
}

/// Synthetic DSprites-like dataset with exactly recorded factors.
pub fn synth_sprites(n: usize, seed: u64) -> Result<Dataset> {
    let factors = synth_factors(n, seed);
    let mut pixels = Vec::with_capacity(n * SPRITE_SIDE * SPRITE_SIDE);
    for i in 0..n {
        let f = factors.row(i);
        pixels.extend(render_sprite(f[0], f[1], f[2], f[3], f[4]));
    }
    let images = Tensor::new(&[n, 1, SPRITE_SIDE, SPRITE_SIDE], pixels)?;
    Dataset::new("synth", images, Some(factors))
}
