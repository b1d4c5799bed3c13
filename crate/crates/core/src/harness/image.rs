use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{standard_normal, ModelParams};
use crate::tensor::Tensor;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_pgm(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Length("pgm: truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Format(format!("pgm: expected P5, found {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("pgm: bad number {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("pgm: unsupported maxval {maxval}")));
        }
        let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| Error::Length("pgm: truncated raster".into()))?.to_vec();
        Ok(GrayImage { width, height, pixels })
    }
}

/// Maps a logit to an 8-bit intensity through the sigmoid.
pub fn logit_to_gray(logit: f64) -> u8 {
    (255.0 / (1.0 + (-logit).exp())).round() as u8
}

/// The `steps` values of the sweep over [−range, range]; a single step is 0.
pub fn sweep_values(range: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps).map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Decodes sweeps of latent `dim` over [−range, range]. Row 0 holds the other
/// coordinates at zero; each further row starts from a standard-normal code
/// drawn from `seed`. Rows are bases, columns are sweep positions.
pub fn traverse(params: &ModelParams, dim: usize, range: f64, steps: usize, rows: usize, seed: u64) -> Result<GrayImage> {
    let k = params.latent_dim();
    if dim >= k {
        return Err(Error::Contract(format!("latent dimension {dim} out of range for k = {k}")));
    }
    if steps == 0 || rows == 0 {
        return Err(Error::Contract("traverse needs at least one row and one step".into()));
    }
    let side = params.image_side();
    let values = sweep_values(range, steps);
    let bases = standard_normal(&[rows, k], seed);
    let mut codes = Vec::with_capacity(rows * steps * k);
    for r in 0..rows {
        for &v in &values {
            let mut z: Vec<f64> = if r == 0 { vec![0.0; k] } else { bases.row(r).to_vec() };
            z[dim] = v;
            codes.extend(z);
        }
    }
    let logits = params.decode(&Tensor::new(&[rows * steps, k], codes)?)?;
    let mut img = GrayImage::new(steps * side, rows * side);
    for r in 0..rows {
        for c in 0..steps {
            let tile = logits.row(r * steps + c);
            for y in 0..side {
                for x in 0..side {
                    img.pixels[(r * side + y) * img.width + c * side + x] = logit_to_gray(tile[y * side + x]);
                }
            }
        }
    }
    Ok(img)
}
