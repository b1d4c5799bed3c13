//! Sample-based divergences between the aggregated posterior q(z) and the
//! prior p(z): squared MMD, mean-embedding Mahalanobis distance, and MMD
//! scaled by the mean inverse variance.
//!
//! Each estimator has a graph form (`*_in`) used inside the training loss and
//! a plain form on tensors. The plain forms run the graph form on constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// Squared MMD with a Gaussian kernel.
    Mmd,
    /// Inverse-variance weighted distance between sample means.
    Mahalanobis,
    /// Squared MMD times the mean inverse variance.
    ScaledMmd,
}

/// How the Gaussian kernel bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// σ = √k for k latent dimensions.
    SqrtLatentDim,
    /// Median pairwise distance of the pooled samples.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub kind: DivergenceKind,
    pub bandwidth: Bandwidth,
    /// ε added to each variance before inversion.
    pub cov_regularizer: f64,
}

impl DivergenceConfig {
    pub fn new(kind: DivergenceKind) -> Self {
        DivergenceConfig { kind, bandwidth: Bandwidth::SqrtLatentDim, cov_regularizer: 1e-6 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Contract(format!("kernel bandwidth must be positive, got {s}")));
            }
        }
        if !(self.cov_regularizer > 0.0 && self.cov_regularizer.is_finite()) {
            return Err(Error::Contract(format!("covariance regularizer must be positive, got {}", self.cov_regularizer)));
        }
        Ok(())
    }

    /// Resolves the bandwidth for samples `zq`, `zp`.
    pub fn sigma(&self, zq: &Tensor, zp: &Tensor) -> Result<f64> {
        let (_, k) = matrix("bandwidth", zq)?;
        match self.bandwidth {
            Bandwidth::SqrtLatentDim => Ok((k as f64).sqrt()),
            Bandwidth::Fixed(s) => Ok(s),
            Bandwidth::Median => median_distance(zq, zp),
        }
    }
}

/// Per-dimension variances Σ_jj and their regularized inverses.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagCovariance {
    pub var: Vec<f64>,
    pub inv: Vec<f64>,
}

impl DiagCovariance {
    /// Σ = I.
    pub fn identity(k: usize) -> Self {
        DiagCovariance { var: vec![1.0; k], inv: vec![1.0; k] }
    }

    pub fn mean_inv(&self) -> f64 {
        self.inv.iter().sum::<f64>() / self.inv.len() as f64
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, k] => Ok((n, k)),
        _ => Err(Error::shape(op, format!("expected samples × dims, got {:?}", t.shape()))),
    }
}

fn check_pair(op: &'static str, zq: &Tensor, zp: &Tensor, min_rows: usize) -> Result<usize> {
    let (n, k) = matrix(op, zq)?;
    let (m, k2) = matrix(op, zp)?;
    if k != k2 {
        return Err(Error::shape(op, format!("latent dims {k} vs {k2}")));
    }
    if n < min_rows || m < min_rows {
        return Err(Error::Contract(format!("{op} needs at least {min_rows} samples per side, got {n} and {m}")));
    }
    Ok(k)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("kernel bandwidth must be positive, got {sigma}")))
    }
}

/// (1/nm) Σ_ij exp(−‖a_i − b_j‖² / 2σ²).
pub fn gaussian_kernel_mean_in(g: &mut Graph, a: Var, b: Var, sigma: f64) -> Result<Var> {
    check_sigma(sigma)?;
    let d = g.pairwise_sq_dist(a, b)?;
    let scaled = g.scalar_mul(d, -1.0 / (2.0 * sigma * sigma));
    let k = g.exp(scaled);
    Ok(g.reduce_mean(k))
}

/// Biased (V-statistic) squared MMD: E_pp k − 2 E_qp k + E_qq k.
pub fn mmd_squared_in(g: &mut Graph, zq: Var, zp: Var, sigma: f64) -> Result<Var> {
    let kqq = gaussian_kernel_mean_in(g, zq, zq, sigma)?;
    let kpp = gaussian_kernel_mean_in(g, zp, zp, sigma)?;
    let kqp = gaussian_kernel_mean_in(g, zq, zp, sigma)?;
    let same = g.add(kpp, kqq)?;
    let cross = g.scalar_mul(kqp, 2.0);
    g.sub(same, cross)
}

/// (m̄_q − m̄_p)ᵀ diag(inv) (m̄_q − m̄_p) over sample means. `cov` is held
/// constant: no gradient flows into the variance estimate.
pub fn mahalanobis_squared_in(g: &mut Graph, zq: Var, zp: Var, cov: &DiagCovariance) -> Result<Var> {
    let k = g.value(zq).shape().get(1).copied().unwrap_or(0);
    if cov.inv.len() != k {
        return Err(Error::shape("mahalanobis_squared", format!("covariance of dim {} for {k}-dim samples", cov.inv.len())));
    }
    let mq = g.mean_rows(zq)?;
    let mp = g.mean_rows(zp)?;
    let diff = g.sub(mq, mp)?;
    let sq = g.square(diff);
    let inv = g.constant(Tensor::from_vec(cov.inv.clone()));
    let weighted = g.mul(sq, inv)?;
    Ok(g.reduce_sum(weighted))
}

/// Squared MMD times mean_j(inv_j).
pub fn scaled_mmd_in(g: &mut Graph, zq: Var, zp: Var, sigma: f64, cov: &DiagCovariance) -> Result<Var> {
    let mmd = mmd_squared_in(g, zq, zp, sigma)?;
    Ok(g.scalar_mul(mmd, cov.mean_inv()))
}

/// Per-dimension sample variance (divisor n − 1) and 1 / (var + eps).
pub fn diag_covariance(z: &Tensor, eps_reg: f64) -> Result<DiagCovariance> {
    let (n, k) = matrix("diag_covariance", z)?;
    if n < 2 {
        return Err(Error::Contract(format!("diag_covariance needs at least 2 samples, got {n}")));
    }
    if !(eps_reg > 0.0) {
        return Err(Error::Contract(format!("covariance regularizer must be positive, got {eps_reg}")));
    }
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; k];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    let inv = var.iter().map(|v| 1.0 / (v + eps_reg)).collect();
    Ok(DiagCovariance { var, inv })
}

/// Row-wise concatenation of two sample matrices with equal width.
pub fn pool_samples(zq: &Tensor, zp: &Tensor) -> Result<Tensor> {
    let k = check_pair("pool_samples", zq, zp, 0)?;
    let mut data = zq.data().to_vec();
    data.extend_from_slice(zp.data());
    Tensor::new(&[zq.shape()[0] + zp.shape()[0], k], data)
}

fn median_distance(zq: &Tensor, zp: &Tensor) -> Result<f64> {
    let pooled = pool_samples(zq, zp)?;
    let n = pooled.shape()[0];
    let mut d: Vec<f64> = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(pooled.row(i).iter().zip(pooled.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::Contract("median bandwidth needs at least two samples".into()));
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    Ok(if med > 0.0 { med } else { 1.0 })
}

fn eval_pair(zq: &Tensor, zp: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let (q, p) = (g.constant(zq.clone()), g.constant(zp.clone()));
    let out = f(&mut g, q, p)?;
    g.value(out).item()
}

pub fn gaussian_kernel_mean(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    check_pair("gaussian_kernel_mean", a, b, 1)?;
    eval_pair(a, b, |g, a, b| gaussian_kernel_mean_in(g, a, b, sigma))
}

pub fn mmd_squared(zq: &Tensor, zp: &Tensor, sigma: f64) -> Result<f64> {
    check_pair("mmd_squared", zq, zp, 2)?;
    eval_pair(zq, zp, |g, q, p| mmd_squared_in(g, q, p, sigma))
}

pub fn mahalanobis_squared(zq: &Tensor, zp: &Tensor, cov: &DiagCovariance) -> Result<f64> {
    check_pair("mahalanobis_squared", zq, zp, 1)?;
    eval_pair(zq, zp, |g, q, p| mahalanobis_squared_in(g, q, p, cov))
}

pub fn scaled_mmd(zq: &Tensor, zp: &Tensor, sigma: f64, cov: &DiagCovariance) -> Result<f64> {
    check_pair("scaled_mmd", zq, zp, 2)?;
    eval_pair(zq, zp, |g, q, p| scaled_mmd_in(g, q, p, sigma, cov))
}

/// The configured divergence on the graph. `cov` is required for the
/// covariance-weighted kinds.
pub fn divergence_in(
    g: &mut Graph,
    kind: DivergenceKind,
    zq: Var,
    zp: Var,
    sigma: f64,
    cov: &DiagCovariance,
) -> Result<Var> {
    match kind {
        DivergenceKind::Mmd => mmd_squared_in(g, zq, zp, sigma),
        DivergenceKind::Mahalanobis => mahalanobis_squared_in(g, zq, zp, cov),
        DivergenceKind::ScaledMmd => scaled_mmd_in(g, zq, zp, sigma, cov),
    }
}
