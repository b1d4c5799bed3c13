//! Raw buffer kernels behind the graph ops. Callers validate shapes.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `op(a)` m×k and
/// `op(b)` k×n. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution mapping `channels × height × width` to
/// `filters × out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution; `None` when the kernel does not fit.
    pub fn forward(
        (channels, height, width): (usize, usize, usize),
        (filters, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint maps `filters × in_h × in_w`
    /// up to `channels × height × width`.
    pub fn transposed(
        (filters, in_h, in_w): (usize, usize, usize),
        (channels, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h == 0 || in_w == 0 {
            return None;
        }
        let height = ((in_h - 1) * stride + kh).checked_sub(2 * pad)?;
        let width = ((in_w - 1) * stride + kw).checked_sub(2 * pad)?;
        let geom = Self::forward((channels, height, width), (filters, kh, kw), stride, pad)?;
        (geom.out_h == in_h && geom.out_w == in_w).then_some(geom)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_size(&self) -> usize {
        self.filters * self.out_h * self.out_w
    }

    /// Input pixel touched by kernel tap (ki, kj) at output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one sample (`channels × height × width`) into a
/// `(channels·kh·kw) × (out_h·out_w)` column matrix.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ki, kj) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `output`.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], output: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut output[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            plane[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution: `input` is `batch × in_size`, `weight` is
/// `filters × col_rows`, result is `batch × out_size`.
pub(crate) fn conv2d(g: &ConvGeom, batch: usize, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.out_size()];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(g, &input[b * g.in_size()..(b + 1) * g.in_size()], &mut cols);
        let dst = &mut out[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(g.filters, g.col_rows(), g.col_cols(), weight, false, &cols, false, dst, false);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input: maps `batch × out_size`
/// back to `batch × in_size`. This is also the transposed convolution.
pub(crate) fn conv2d_input_adjoint(g: &ConvGeom, batch: usize, upstream: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.in_size()];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        let src = &upstream[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(g.col_rows(), g.filters, g.col_cols(), weight, true, src, false, &mut cols, false);
        col2im(g, &cols, &mut out[b * g.in_size()..(b + 1) * g.in_size()]);
    }
    out
}

/// Gradient of `<conv2d(input, w), upstream>` with respect to `w`.
pub(crate) fn conv2d_weight_grad(g: &ConvGeom, batch: usize, input: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; g.filters * g.col_rows()];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(g, &input[b * g.in_size()..(b + 1) * g.in_size()], &mut cols);
        let src = &upstream[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(g.filters, g.col_cols(), g.col_rows(), src, false, &cols, true, &mut grad, true);
    }
    grad
}

/// Non-overlapping `size × size` max pooling over `planes` planes of
/// `height × width`. Returns pooled values and the flat argmax per output;
/// ties go to the lowest flat index.
pub(crate) fn maxpool2d(
    planes: usize,
    height: usize,
    width: usize,
    size: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / size, width / size);
    let mut values = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * width + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * width + ox * size + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                values.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (values, argmax)
}

/// Nearest-neighbour 2× upsampling of `planes` planes.
pub(crate) fn upsample2x(planes: usize, height: usize, width: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * height, 2 * width);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            let row = &input[p * height * width + (y / 2) * width..][..width];
            for x in 0..ow {
                out.push(row[x / 2]);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub(crate) fn upsample2x_adjoint(planes: usize, height: usize, width: usize, upstream: &[f64]) -> Vec<f64> {
    let ow = 2 * width;
    let mut out = vec![0.0; planes * height * width];
    for p in 0..planes {
        for y in 0..2 * height {
            for x in 0..ow {
                out[p * height * width + (y / 2) * width + x / 2] += upstream[p * 4 * height * width + y * ow + x];
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli negative log-likelihood of `target` under `sigmoid(logit)`.
#[inline]
pub(crate) fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}
