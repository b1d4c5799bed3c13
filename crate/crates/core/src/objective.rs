//! The three-term training loss and the named variants it reduces to.
//!
//! The minimized loss is
//!
//! ```text
//! c · recon + β · KL(q(z|x) ‖ p(z)) + γ · D(q(z) ‖ p(z))
//! ```
//!
//! with `c = 1 − α − β` for the controlled variants and `c = 1` for the
//! classical ones (ELBO, β-VAE, ControlVAE, InfoVAE).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::{PidConfig, WeightTriple};
use crate::divergences::DivergenceKind;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Elbo,
    BetaVae,
    ControlVae,
    InfoVae,
    Gcvae1,
    Gcvae2,
    Gcvae3,
}

impl VariantName {
    /// Comparison-table order.
    pub const ALL: [VariantName; 7] = [
        VariantName::Elbo,
        VariantName::BetaVae,
        VariantName::ControlVae,
        VariantName::InfoVae,
        VariantName::Gcvae1,
        VariantName::Gcvae2,
        VariantName::Gcvae3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Elbo => "elbo",
            VariantName::BetaVae => "beta_vae",
            VariantName::ControlVae => "control_vae",
            VariantName::InfoVae => "info_vae",
            VariantName::Gcvae1 => "gcvae1",
            VariantName::Gcvae2 => "gcvae2",
            VariantName::Gcvae3 => "gcvae3",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            VariantName::Elbo => "VAE",
            VariantName::BetaVae => "beta-VAE",
            VariantName::ControlVae => "ControlVAE",
            VariantName::InfoVae => "InfoVAE",
            VariantName::Gcvae1 => "GCVAE-I",
            VariantName::Gcvae2 => "GCVAE-II",
            VariantName::Gcvae3 => "GCVAE-III",
        }
    }

    pub fn table_rank(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed")
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "elbo" | "vae" => Ok(VariantName::Elbo),
            "beta_vae" => Ok(VariantName::BetaVae),
            "control_vae" | "controlvae" => Ok(VariantName::ControlVae),
            "info_vae" | "infovae" => Ok(VariantName::InfoVae),
            "gcvae1" | "gcvae_i" => Ok(VariantName::Gcvae1),
            "gcvae2" | "gcvae_ii" => Ok(VariantName::Gcvae2),
            "gcvae3" | "gcvae_iii" => Ok(VariantName::Gcvae3),
            _ => Err(Error::UnsupportedVariant(s.to_string())),
        }
    }
}

/// Where a weight comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Fixed(f64),
    Pid(PidConfig),
}

impl WeightMode {
    pub fn is_pid(&self) -> bool {
        matches!(self, WeightMode::Pid(_))
    }

    fn initial(&self) -> f64 {
        match *self {
            WeightMode::Fixed(v) => v,
            WeightMode::Pid(c) => c.min_value,
        }
    }
}

/// Coefficient on the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconCoefficient {
    One,
    OneMinusAlphaBeta,
}

impl ReconCoefficient {
    pub fn value(self, w: &WeightTriple) -> f64 {
        match self {
            ReconCoefficient::One => 1.0,
            ReconCoefficient::OneMinusAlphaBeta => 1.0 - w.alpha - w.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: VariantName,
    pub recon: ReconCoefficient,
    pub alpha: WeightMode,
    pub beta: WeightMode,
    pub gamma: WeightMode,
    pub divergence: Option<DivergenceKind>,
}

/// Set points for the three controllers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub recon: f64,
    pub kl: f64,
    pub corr: f64,
}

impl Default for Targets {
    fn default() -> Self {
        Targets { recon: 10.0, kl: 30.0, corr: 0.1 }
    }
}

pub const BETA_VAE_BETA: f64 = 10.0;
pub const INFO_VAE_LAMBDA: f64 = 1000.0;
pub const CONTROL_VAE_KL_TARGET: f64 = 10.0;

/// The configuration a named model reduces to, with default set points and gains.
pub fn variant_reduction(name: &str) -> Result<VariantConfig> {
    let name: VariantName = name.parse()?;
    Ok(VariantConfig::for_variant(name, Targets::default()))
}

impl VariantConfig {
    pub fn for_variant(name: VariantName, targets: Targets) -> Self {
        use ReconCoefficient::*;
        use WeightMode::*;
        let zero = Fixed(0.0);
        let gcvae = |kind| VariantConfig {
            name,
            recon: OneMinusAlphaBeta,
            alpha: Pid(PidConfig::new(targets.recon)),
            beta: Pid(PidConfig::new(targets.kl)),
            gamma: Pid(PidConfig::new(targets.corr)),
            divergence: Some(kind),
        };
        match name {
            VariantName::Elbo => VariantConfig { name, recon: One, alpha: zero, beta: Fixed(1.0), gamma: zero, divergence: None },
            VariantName::BetaVae => {
                VariantConfig { name, recon: One, alpha: zero, beta: Fixed(BETA_VAE_BETA), gamma: zero, divergence: None }
            }
            VariantName::ControlVae => VariantConfig {
                name,
                recon: One,
                alpha: zero,
                beta: Pid(PidConfig::new(CONTROL_VAE_KL_TARGET)),
                gamma: zero,
                divergence: None,
            },
            VariantName::InfoVae => VariantConfig {
                name,
                recon: One,
                alpha: zero,
                beta: zero,
                gamma: Fixed(INFO_VAE_LAMBDA),
                divergence: Some(DivergenceKind::Mmd),
            },
            VariantName::Gcvae1 => gcvae(DivergenceKind::Mmd),
            VariantName::Gcvae2 => gcvae(DivergenceKind::Mahalanobis),
            VariantName::Gcvae3 => gcvae(DivergenceKind::ScaledMmd),
        }
    }

    /// Weights before the first controller update.
    pub fn initial_weights(&self) -> WeightTriple {
        WeightTriple::new(self.alpha.initial(), self.beta.initial(), self.gamma.initial())
    }

    pub fn uses_divergence(&self) -> bool {
        self.divergence.is_some() && !matches!(self.gamma, WeightMode::Fixed(v) if v == 0.0)
    }

    /// Applies gains to every PID-driven weight.
    pub fn with_gains(mut self, kp: f64, ki: f64, min_value: f64) -> Self {
        for mode in [&mut self.alpha, &mut self.beta, &mut self.gamma] {
            if let WeightMode::Pid(c) = mode {
                c.kp = kp;
                c.ki = ki;
                c.min_value = min_value;
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_nll: f64,
    pub kl: f64,
    pub corr: f64,
    pub recon_weight: f64,
    pub weights: WeightTriple,
}

/// Combines the three terms. Non-finite inputs abort with the breakdown in
/// the error message.
pub fn compose_loss(recon_nll: f64, kl: f64, corr: f64, weights: WeightTriple, recon: ReconCoefficient) -> Result<LossBreakdown> {
    let recon_weight = recon.value(&weights);
    let total = recon_weight * recon_nll + weights.beta * kl + weights.gamma * corr;
    let b = LossBreakdown { total, recon_nll, kl, corr, recon_weight, weights };
    if [recon_nll, kl, corr, total, weights.alpha, weights.beta, weights.gamma].iter().all(|v| v.is_finite()) {
        Ok(b)
    } else {
        Err(Error::NonFinite { step: 0, detail: format!("{b:?}") })
    }
}

/// Graph form of [`compose_loss`]; `corr` may be absent when γ plays no role.
pub fn compose_loss_in(
    g: &mut Graph,
    recon_nll: Var,
    kl: Var,
    corr: Option<Var>,
    weights: WeightTriple,
    recon: ReconCoefficient,
) -> Result<Var> {
    let r = g.scalar_mul(recon_nll, recon.value(&weights));
    let k = g.scalar_mul(kl, weights.beta);
    let mut total = g.add(r, k)?;
    if let Some(c) = corr {
        let c = g.scalar_mul(c, weights.gamma);
        total = g.add(total, c)?;
    }
    Ok(total)
}

/// Mutual-information surrogates for one step: (I_p, I_q) = (−recon, kl − corr).
pub fn mutual_info_report(recon_nll: f64, kl: f64, corr: f64) -> (f64, f64) {
    (-recon_nll, kl - corr)
}
