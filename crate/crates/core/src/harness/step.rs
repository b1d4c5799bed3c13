use crate::control::{clamp_weights, ControllerState, PidTrace, WeightTriple};
use crate::divergences::{diag_covariance, divergence_in, mmd_squared_in, pool_samples, DiagCovariance, DivergenceConfig};
use crate::error::Result;
use crate::model::{kl_gaussian_standard_in, reconstruction_nll_in, reparameterize_in, BatchStats, ModelParams, Phase};
use crate::objective::{compose_loss, compose_loss_in, LossBreakdown, VariantConfig, WeightMode};
use crate::tensor::{Graph, Tensor, Var};

/// Per-step random inputs: the image batch, reparameterization noise and the
/// prior sample used by the divergence term.
#[derive(Clone, Debug)]
pub struct StepInputs<'a> {
    pub x: &'a Tensor,
    pub eps: &'a Tensor,
    pub prior: &'a Tensor,
}

/// Where the inverse-variance weights come from.
#[derive(Clone, Debug)]
pub enum CovarianceSource {
    /// Pooled posterior and prior samples of the current batch.
    Batch,
    Fixed(DiagCovariance),
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Gradients in `ModelParams::trainable()` order.
    pub gradients: Vec<Tensor>,
    pub bn_stats: Vec<BatchStats>,
    pub covariance: DiagCovariance,
    pub sigma: f64,
}

/// PI controllers for whichever weights the variant puts under control.
#[derive(Clone, Debug, PartialEq)]
pub struct Controllers {
    pub alpha: Option<ControllerState>,
    pub beta: Option<ControllerState>,
    pub gamma: Option<ControllerState>,
}

/// Controller updates of a single step, by weight name.
pub type StepTraces = Vec<(&'static str, PidTrace)>;

impl Controllers {
    pub fn new(variant: &VariantConfig) -> Self {
        let make = |m: &WeightMode| match m {
            WeightMode::Pid(c) => Some(ControllerState::new(*c)),
            WeightMode::Fixed(_) => None,
        };
        Controllers { alpha: make(&variant.alpha), beta: make(&variant.beta), gamma: make(&variant.gamma) }
    }

    fn any(&self) -> bool {
        self.alpha.is_some() || self.beta.is_some() || self.gamma.is_some()
    }

    /// Feeds the measured recon, KL and divergence into their controllers
    /// and returns the weights for this step.
    pub fn update(&mut self, variant: &VariantConfig, recon: f64, kl: f64, corr: f64) -> (WeightTriple, StepTraces) {
        let mut traces = Vec::new();
        let mut pick = |state: &mut Option<ControllerState>, mode: &WeightMode, actual: f64, name: &'static str| match (state, mode) {
            (Some(s), _) => {
                let t = s.step(actual);
                traces.push((name, t));
                t.weight
            }
            (None, WeightMode::Fixed(v)) => *v,
            (None, WeightMode::Pid(c)) => c.min_value,
        };
        let raw = WeightTriple::new(
            pick(&mut self.alpha, &variant.alpha, recon, "alpha"),
            pick(&mut self.beta, &variant.beta, kl, "beta"),
            pick(&mut self.gamma, &variant.gamma, corr, "gamma"),
        );
        let w = if self.any() { clamp_weights(raw) } else { raw };
        (w, traces)
    }
}

struct Terms {
    recon: Var,
    kl: Var,
    corr: Option<Var>,
    corr_value: f64,
    covariance: DiagCovariance,
    sigma: f64,
    stats: Vec<BatchStats>,
}

fn forward(
    g: &mut Graph,
    params: &ModelParams,
    variant: &VariantConfig,
    div: &DivergenceConfig,
    cov: &CovarianceSource,
    inputs: &StepInputs,
    track: bool,
) -> Result<(Terms, crate::model::Binding)> {
    let b = params.bind(g, track);
    let x = g.constant(inputs.x.clone());
    let enc = params.encode_in(g, &b, x, Phase::Train)?;
    let eps = g.constant(inputs.eps.clone());
    let z = reparameterize_in(g, enc.mu, enc.log_var, eps)?;
    let (logits, dec_stats) = params.decode_in(g, &b, z, Phase::Train)?;
    let recon = reconstruction_nll_in(g, x, logits)?;
    let kl = kl_gaussian_standard_in(g, enc.mu, enc.log_var)?;

    let zv = g.value(z).clone();
    let covariance = match cov {
        CovarianceSource::Batch => diag_covariance(&pool_samples(&zv, inputs.prior)?, div.cov_regularizer)?,
        CovarianceSource::Fixed(c) => c.clone(),
    };
    let sigma = div.sigma(&zv, inputs.prior)?;
    let prior = g.constant(inputs.prior.clone());
    let (corr, corr_value) = match variant.divergence {
        Some(kind) => {
            let c = divergence_in(g, kind, z, prior, sigma, &covariance)?;
            (Some(c), g.value(c).item()?)
        }
        None => {
            // Not part of the loss; measured for logging only.
            let mut side = Graph::new();
            let (q, p) = (side.constant(zv), side.constant(inputs.prior.clone()));
            let m = mmd_squared_in(&mut side, q, p, sigma)?;
            (None, side.value(m).item()?)
        }
    };
    let mut stats = enc.stats;
    stats.extend(dec_stats);
    Ok((Terms { recon, kl, corr, corr_value, covariance, sigma, stats }, b))
}

fn finish(g: &mut Graph, b: &crate::model::Binding, terms: Terms, weights: WeightTriple, variant: &VariantConfig, step: usize) -> Result<StepOutput> {
    let recon_v = g.value(terms.recon).item()?;
    let kl_v = g.value(terms.kl).item()?;
    let breakdown = compose_loss(recon_v, kl_v, terms.corr_value, weights, variant.recon).map_err(|e| match e {
        crate::Error::NonFinite { detail, .. } => crate::Error::NonFinite { step, detail },
        other => other,
    })?;
    let total = compose_loss_in(g, terms.recon, terms.kl, terms.corr, weights, variant.recon)?;
    let mut grads = g.backward(total)?;
    let gradients = b
        .vars()
        .iter()
        .map(|(_, v)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(g.value(*v).shape())))
        .collect();
    Ok(StepOutput { breakdown, gradients, bn_stats: terms.stats, covariance: terms.covariance, sigma: terms.sigma })
}

/// Loss and parameter gradients under explicitly given weights.
pub fn objective_with_weights(
    params: &ModelParams,
    variant: &VariantConfig,
    div: &DivergenceConfig,
    cov: &CovarianceSource,
    weights: WeightTriple,
    inputs: &StepInputs,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let (terms, b) = forward(&mut g, params, variant, div, cov, inputs, true)?;
    finish(&mut g, &b, terms, weights, variant, 0)
}

/// One training step's loss: controllers read this step's measured terms,
/// the weights are clamped, and the composed loss is differentiated.
pub fn objective_step(
    params: &ModelParams,
    variant: &VariantConfig,
    controllers: &mut Controllers,
    div: &DivergenceConfig,
    inputs: &StepInputs,
    step: usize,
) -> Result<(StepOutput, StepTraces)> {
    let mut g = Graph::new();
    let (terms, b) = forward(&mut g, params, variant, div, &CovarianceSource::Batch, inputs, true)?;
    let recon_v = g.value(terms.recon).item()?;
    let kl_v = g.value(terms.kl).item()?;
    let (weights, traces) = controllers.update(variant, recon_v, kl_v, terms.corr_value);
    let out = finish(&mut g, &b, terms, weights, variant, step)?;
    Ok((out, traces))
}
