//! Encoder q(z|x), reparameterized sampler and decoder p(x|z).
//!
//! Parameters are named `<side>.<layer><index>.<kind>`, e.g. `enc.conv1.w`,
//! `enc.fc3.b`, `dec.upconv5.w`, `enc.bn2.gamma`. Fully connected weights are
//! stored `in × out`; conv filters `out × in × 4 × 4`; transposed-conv filters
//! `in × out × 4 × 4`. Batch-norm running statistics are kept as
//! `<prefix>.running_mean` / `<prefix>.running_var`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Graph, NamedTensors, Tensor, Var};

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Four stride-2 4×4 convs (64, 64, 32, 32) → FC 200 → FC 25 → FC 2k and
    /// the mirrored transposed-conv decoder. Input must be 64×64.
    Conv64,
    /// `Conv64` with batch norm on every hidden conv layer and, in the
    /// encoder, stride-1 convs followed by 2×2 max pooling.
    Conv64Caption,
    /// d → h1 → h2 → 2k encoder, k → h2 → h1 → d decoder, ReLU.
    Mlp,
}

impl Arch {
    fn is_conv(self) -> bool {
        matches!(self, Arch::Conv64 | Arch::Conv64Caption)
    }
}

/// Everything needed to lay out a fresh parameter set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub latent_dim: usize,
    pub image_side: usize,
    pub mlp_hidden: (usize, usize),
}

impl ModelSpec {
    pub fn mlp(image_side: usize, latent_dim: usize) -> Self {
        ModelSpec { arch: Arch::Mlp, latent_dim, image_side, mlp_hidden: (400, 200) }
    }

    pub fn conv64(latent_dim: usize) -> Self {
        ModelSpec { arch: Arch::Conv64, latent_dim, image_side: 64, mlp_hidden: (400, 200) }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Contract("latent_dim must be positive".into()));
        }
        if self.arch.is_conv() && self.image_side != 64 {
            return Err(Error::Contract(format!("{:?} needs 64×64 input, got side {}", self.arch, self.image_side)));
        }
        let d = self.image_side * self.image_side;
        if self.latent_dim >= d {
            return Err(Error::Contract(format!("latent_dim {} must be smaller than input dim {d}", self.latent_dim)));
        }
        Ok(())
    }
}

const KERNEL: usize = 4;
const ENC_CONV_CHANNELS: [usize; 4] = [64, 64, 32, 32];
const DEC_UPCONV_CHANNELS: [usize; 5] = [32, 32, 64, 64, 1];
/// FC 200 output seen as 50 channels of 2×2; five stride-2 upconvs reach 64×64.
const DEC_SEED_SHAPE: [usize; 3] = [50, 2, 2];
const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug)]
enum Init {
    Kaiming { fan_in: usize },
    Zero,
    One,
}

fn layout(spec: &ModelSpec) -> (Vec<(String, Vec<usize>, Init)>, Vec<(String, Vec<usize>, Init)>) {
    let k = spec.latent_dim;
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    let fc = |v: &mut Vec<_>, side: &str, i: usize, fan_in: usize, out: usize| {
        v.push((format!("{side}.fc{i}.w"), vec![fan_in, out], Init::Kaiming { fan_in }));
        v.push((format!("{side}.fc{i}.b"), vec![out], Init::Zero));
    };
    let bn = |v: &mut Vec<_>, side: &str, i: usize, c: usize| {
        v.push((format!("{side}.bn{i}.gamma"), vec![c], Init::One));
        v.push((format!("{side}.bn{i}.beta"), vec![c], Init::Zero));
    };
    match spec.arch {
        Arch::Mlp => {
            let d = spec.image_side * spec.image_side;
            let (h1, h2) = spec.mlp_hidden;
            fc(&mut enc, "enc", 1, d, h1);
            fc(&mut enc, "enc", 2, h1, h2);
            fc(&mut enc, "enc", 3, h2, 2 * k);
            fc(&mut dec, "dec", 1, k, h2);
            fc(&mut dec, "dec", 2, h2, h1);
            fc(&mut dec, "dec", 3, h1, d);
        }
        Arch::Conv64 | Arch::Conv64Caption => {
            let caption = spec.arch == Arch::Conv64Caption;
            let mut c_in = 1;
            for (i, &c_out) in ENC_CONV_CHANNELS.iter().enumerate() {
                let fan_in = c_in * KERNEL * KERNEL;
                enc.push((format!("enc.conv{}.w", i + 1), vec![c_out, c_in, KERNEL, KERNEL], Init::Kaiming { fan_in }));
                enc.push((format!("enc.conv{}.b", i + 1), vec![c_out], Init::Zero));
                if caption {
                    bn(&mut enc, "enc", i + 1, c_out);
                }
                c_in = c_out;
            }
            fc(&mut enc, "enc", 1, c_in * 4 * 4, 200);
            fc(&mut enc, "enc", 2, 200, 25);
            fc(&mut enc, "enc", 3, 25, 2 * k);

            fc(&mut dec, "dec", 1, k, 25);
            fc(&mut dec, "dec", 2, 25, DEC_SEED_SHAPE.iter().product());
            let mut c_in = DEC_SEED_SHAPE[0];
            for (i, &c_out) in DEC_UPCONV_CHANNELS.iter().enumerate() {
                let fan_in = c_in * KERNEL * KERNEL / 4;
                dec.push((format!("dec.upconv{}.w", i + 1), vec![c_in, c_out, KERNEL, KERNEL], Init::Kaiming { fan_in }));
                dec.push((format!("dec.upconv{}.b", i + 1), vec![c_out], Init::Zero));
                if caption && i + 1 < DEC_UPCONV_CHANNELS.len() {
                    bn(&mut dec, "dec", i + 1, c_out);
                }
                c_in = c_out;
            }
        }
    }
    (enc, dec)
}

/// Train/eval switch; only batch norm cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Batch statistics produced by one batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Encoder weights φ, decoder weights θ and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    encoder: NamedTensors,
    decoder: NamedTensors,
    running: BTreeMap<String, Tensor>,
}

/// Graph handles for every parameter of a [`ModelParams`], in
/// encoder-then-decoder order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<(String, Var)>,
    index: BTreeMap<String, usize>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]].1
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }
}

/// Output of [`ModelParams::encode_in`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub mu: Var,
    pub log_var: Var,
    pub stats: Vec<BatchStats>,
}

impl ModelParams {
    /// Kaiming-uniform (fan-in) weights, zero biases, unit batch-norm scale.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, dec) = layout(spec);
        let mut build = |layers: Vec<(String, Vec<usize>, Init)>| -> NamedTensors {
            layers
                .into_iter()
                .map(|(name, shape, init)| {
                    let t = match init {
                        Init::Kaiming { fan_in } => {
                            let bound = (6.0 / fan_in as f64).sqrt();
                            Tensor::uniform(&shape, -bound, bound, &mut rng)
                        }
                        Init::Zero => Tensor::zeros(&shape),
                        Init::One => Tensor::full(&shape, 1.0),
                    };
                    (name, t)
                })
                .collect()
        };
        let encoder = build(enc);
        let decoder = build(dec);
        Ok(Self::assemble(spec.clone(), encoder, decoder))
    }

    /// All weights and biases zero (batch-norm scale still one).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (enc, dec) = layout(spec);
        let build = |layers: Vec<(String, Vec<usize>, Init)>| -> NamedTensors {
            layers
                .into_iter()
                .map(|(name, shape, init)| {
                    let fill = if matches!(init, Init::One) { 1.0 } else { 0.0 };
                    (name, Tensor::full(&shape, fill))
                })
                .collect()
        };
        let encoder = build(enc);
        let decoder = build(dec);
        Ok(Self::assemble(spec.clone(), encoder, decoder))
    }

    fn assemble(spec: ModelSpec, encoder: NamedTensors, decoder: NamedTensors) -> Self {
        let mut running = BTreeMap::new();
        for (name, t) in encoder.iter().chain(&decoder) {
            if let Some(prefix) = name.strip_suffix(".gamma") {
                running.insert(format!("{prefix}.running_mean"), Tensor::zeros(t.shape()));
                running.insert(format!("{prefix}.running_var"), Tensor::full(t.shape(), 1.0));
            }
        }
        ModelParams { spec, encoder, decoder, running }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn image_side(&self) -> usize {
        self.spec.image_side
    }

    pub fn encoder(&self) -> &NamedTensors {
        &self.encoder
    }

    pub fn decoder(&self) -> &NamedTensors {
        &self.decoder
    }

    /// Trainable tensors, encoder first.
    pub fn trainable(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut (String, Tensor)> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.trainable().find(|(n, _)| n == name).map(|(_, t)| t).or_else(|| self.running.get(name))
    }

    /// Every tensor, checkpoint order: encoder, decoder, running statistics.
    pub fn to_named(&self) -> NamedTensors {
        self.trainable()
            .cloned()
            .chain(self.running.iter().map(|(n, t)| (n.clone(), t.clone())))
            .collect()
    }

    /// Rebuilds parameters from checkpoint records, inferring the
    /// architecture from parameter names and shapes.
    pub fn from_named(records: NamedTensors) -> Result<Self> {
        let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let dec_fc1 = find("dec.fc1.w").ok_or_else(|| Error::Format("checkpoint lacks dec.fc1.w".into()))?;
        let latent_dim = dec_fc1.shape()[0];
        let spec = if find("enc.conv1.w").is_some() {
            let arch = if find("enc.bn1.gamma").is_some() { Arch::Conv64Caption } else { Arch::Conv64 };
            ModelSpec { arch, latent_dim, image_side: 64, mlp_hidden: (400, 200) }
        } else {
            let w1 = find("enc.fc1.w").ok_or_else(|| Error::Format("checkpoint lacks enc.fc1.w".into()))?;
            let w2 = find("enc.fc2.w").ok_or_else(|| Error::Format("checkpoint lacks enc.fc2.w".into()))?;
            let d = w1.shape()[0];
            let side = (d as f64).sqrt().round() as usize;
            if side * side != d {
                return Err(Error::Format(format!("mlp input dim {d} is not a square image")));
            }
            ModelSpec { arch: Arch::Mlp, latent_dim, image_side: side, mlp_hidden: (w1.shape()[1], w2.shape()[1]) }
        };
        let mut model = Self::zeros(&spec)?;
        let mut by_name: BTreeMap<String, Tensor> = records.into_iter().collect();
        for (name, t) in model.trainable_mut() {
            let loaded = by_name.remove(name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", loaded.shape(), t.shape())));
            }
            *t = loaded;
        }
        for (name, t) in model.running.iter_mut() {
            if let Some(loaded) = by_name.remove(name) {
                *t = loaded;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected checkpoint record {extra}")));
        }
        Ok(model)
    }

    /// Places every trainable tensor on the graph, as tracked params when
    /// `track` is set and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Binding {
        let vars: Vec<(String, Var)> = self
            .trainable()
            .map(|(n, t)| (n.clone(), if track { g.param(t.clone()) } else { g.constant(t.clone()) }))
            .collect();
        let index = vars.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Binding { vars, index }
    }

    fn dense(&self, g: &mut Graph, b: &Binding, x: Var, layer: &str, relu: bool) -> Result<Var> {
        let y = g.matmul(x, b.get(&format!("{layer}.w")))?;
        let y = g.add_bias(y, b.get(&format!("{layer}.b")))?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn norm(&self, g: &mut Graph, b: &Binding, x: Var, prefix: &str, phase: Phase, stats: &mut Vec<BatchStats>) -> Result<Var> {
        let mode = match phase {
            Phase::Train => BatchNormMode::Train,
            Phase::Eval => BatchNormMode::Eval {
                mean: self.running[&format!("{prefix}.running_mean")].data().to_vec(),
                var: self.running[&format!("{prefix}.running_var")].data().to_vec(),
            },
        };
        let (y, mean, var) = g.batchnorm2d(x, b.get(&format!("{prefix}.gamma")), b.get(&format!("{prefix}.beta")), &mode)?;
        if phase == Phase::Train {
            stats.push(BatchStats { prefix: prefix.to_string(), mean, var });
        }
        Ok(y)
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        let side = self.spec.image_side;
        match *shape {
            [n, 1, h, w] if h == side && w == side => Ok(n),
            [n, d] if self.spec.arch == Arch::Mlp && d == side * side => Ok(n),
            _ => Err(Error::shape(
                "encode",
                format!("{:?} model expects batch×1×{side}×{side}, got {shape:?}", self.spec.arch),
            )),
        }
    }

    /// Posterior mean and log-variance, each batch×k, from the final
    /// 2k-wide layer split in halves.
    pub fn encode_in(&self, g: &mut Graph, b: &Binding, x: Var, phase: Phase) -> Result<Encoded> {
        let n = self.check_images(g.value(x).shape())?;
        let k = self.spec.latent_dim;
        let mut stats = Vec::new();
        let flat = match self.spec.arch {
            Arch::Mlp => {
                let h = g.reshape(x, &[n, self.spec.image_side * self.spec.image_side])?;
                let h = self.dense(g, b, h, "enc.fc1", true)?;
                self.dense(g, b, h, "enc.fc2", true)?
            }
            Arch::Conv64 | Arch::Conv64Caption => {
                let caption = self.spec.arch == Arch::Conv64Caption;
                let mut h = x;
                for i in 1..=ENC_CONV_CHANNELS.len() {
                    h = if caption {
                        g.conv2d(h, b.get(&format!("enc.conv{i}.w")), 1, 2)?
                    } else {
                        g.conv2d(h, b.get(&format!("enc.conv{i}.w")), 2, 1)?
                    };
                    h = g.add_bias(h, b.get(&format!("enc.conv{i}.b")))?;
                    if caption {
                        h = self.norm(g, b, h, &format!("enc.bn{i}"), phase, &mut stats)?;
                    }
                    h = g.relu(h);
                    if caption {
                        h = g.maxpool2d(h)?;
                    }
                }
                let len = g.value(h).len() / n;
                let h = g.reshape(h, &[n, len])?;
                let h = self.dense(g, b, h, "enc.fc1", true)?;
                self.dense(g, b, h, "enc.fc2", true)?
            }
        };
        let head = self.dense(g, b, flat, "enc.fc3", false)?;
        let mu = g.slice_cols(head, 0, k)?;
        let log_var = g.slice_cols(head, k, 2 * k)?;
        Ok(Encoded { mu, log_var, stats })
    }

    /// Bernoulli logits of shape batch×1×side×side.
    pub fn decode_in(&self, g: &mut Graph, b: &Binding, z: Var, phase: Phase) -> Result<(Var, Vec<BatchStats>)> {
        let k = self.spec.latent_dim;
        let n = match *g.value(z).shape() {
            [n, kk] if kk == k => n,
            ref s => return Err(Error::shape("decode", format!("expected batch×{k} codes, got {s:?}"))),
        };
        let side = self.spec.image_side;
        let mut stats = Vec::new();
        let logits = match self.spec.arch {
            Arch::Mlp => {
                let h = self.dense(g, b, z, "dec.fc1", true)?;
                let h = self.dense(g, b, h, "dec.fc2", true)?;
                let h = self.dense(g, b, h, "dec.fc3", false)?;
                g.reshape(h, &[n, 1, side, side])?
            }
            Arch::Conv64 | Arch::Conv64Caption => {
                let caption = self.spec.arch == Arch::Conv64Caption;
                let h = self.dense(g, b, z, "dec.fc1", true)?;
                let h = self.dense(g, b, h, "dec.fc2", true)?;
                let mut h = g.reshape(h, &[n, DEC_SEED_SHAPE[0], DEC_SEED_SHAPE[1], DEC_SEED_SHAPE[2]])?;
                let last = DEC_UPCONV_CHANNELS.len();
                for i in 1..=last {
                    h = g.conv_transpose2d(h, b.get(&format!("dec.upconv{i}.w")), 2, 1)?;
                    h = g.add_bias(h, b.get(&format!("dec.upconv{i}.b")))?;
                    if i < last {
                        if caption {
                            h = self.norm(g, b, h, &format!("dec.bn{i}"), phase, &mut stats)?;
                        }
                        h = g.relu(h);
                    }
                }
                h
            }
        };
        Ok((logits, stats))
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(t) = self.running.get_mut(&format!("{}.{suffix}", s.prefix)) {
                    for (r, v) in t.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                    }
                }
            }
        }
    }

    /// Posterior parameters in evaluation mode.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vx = g.constant(x.clone());
        let e = self.encode_in(&mut g, &b, vx, Phase::Eval)?;
        Ok((g.value(e.mu).clone(), g.value(e.log_var).clone()))
    }

    /// Decoder logits in evaluation mode.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vz = g.constant(z.clone());
        let (logits, _) = self.decode_in(&mut g, &b, vz, Phase::Eval)?;
        Ok(g.value(logits).clone())
    }
}

/// Standard-normal noise of the given shape drawn from `seed`.
pub fn standard_normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// z = μ + exp(½ log σ²) ∘ ε on the graph.
pub fn reparameterize_in(g: &mut Graph, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = g.scalar_mul(log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// z = μ + exp(½ log σ²) ∘ ε with ε ~ N(0, I) drawn from `eps_seed`.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, eps_seed: u64) -> Result<Tensor> {
    if mu.shape() != log_var.shape() {
        return Err(Error::shape("reparameterize", format!("{:?} vs {:?}", mu.shape(), log_var.shape())));
    }
    let eps = standard_normal(mu.shape(), eps_seed);
    let data = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(mu.shape(), data)
}

/// Mean Bernoulli NLL per pixel: the batch mean of each image's summed NLL
/// divided by its pixel count.
pub fn reconstruction_nll_in(g: &mut Graph, x: Var, logits: Var) -> Result<Var> {
    let nll = g.bce_with_logits(logits, x)?;
    Ok(g.reduce_mean(nll))
}

pub fn reconstruction_nll(x: &Tensor, logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (vx, vl) = (g.constant(x.clone()), g.constant(logits.clone()));
    let r = reconstruction_nll_in(&mut g, vx, vl)?;
    g.value(r).item()
}

/// Batch mean of ½ Σ_j (μ² + σ² − 1 − ln σ²), the closed-form
/// KL(N(μ, σ²) ‖ N(0, I)).
pub fn kl_gaussian_standard_in(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let batch = match *g.value(mu).shape() {
        [n, _] if n > 0 => n,
        ref s => return Err(Error::shape("kl_gaussian_standard", format!("expected batch×k, got {s:?}"))),
    };
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.reduce_sum(t);
    Ok(g.scalar_mul(s, 0.5 / batch as f64))
}

pub fn kl_gaussian_standard(mu: &Tensor, log_var: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (m, l) = (g.constant(mu.clone()), g.constant(log_var.clone()));
    let kl = kl_gaussian_standard_in(&mut g, m, l)?;
    g.value(kl).item()
}
