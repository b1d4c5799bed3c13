//! Training loop, run configuration, logging, checkpoints, evaluation and
//! latent traversals.
//!
//! A run directory holds `config.json`, `log.csv` (one row per optimizer
//! step), `controller.csv` (one row per controller update),
//! `mutual_info.csv` (one row per epoch), `checkpoint.gcvt` and the metric
//! report (`report.txt`, `report.csv`). All budgets count optimizer steps.

mod adam;
mod eval;
mod image;
mod step;

pub use adam::{adam_step, Adam, AdamConfig};
pub use eval::{
    compare_runs, encode_dataset, eval_metrics, read_report, report_from_codes, write_report, Comparison, MetricReport, EVAL_LIMIT,
    REPORT_CSV, REPORT_TXT,
};
pub use image::{logit_to_gray, sweep_values, traverse, GrayImage};
pub use step::{objective_step, objective_with_weights, Controllers, CovarianceSource, StepInputs, StepOutput, StepTraces};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{StoppingRule, WeightTriple};
use crate::data::{load_dsprites_npz, load_dsprites_npz_subset, load_mnist_idx, mnist_paths, subsample, synth_sprites, BatchStream, Dataset};
use crate::divergences::{Bandwidth, DivergenceConfig, DivergenceKind};
use crate::error::{Error, Result};
use crate::metrics::MigNormalization;
use crate::model::{Arch, ModelParams, ModelSpec};
use crate::objective::{mutual_info_report, Targets, VariantConfig, VariantName, WeightMode};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};
use eval::csv_err;

pub const DATA_DIR_ENV: &str = "GCVAE_DATA_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.gcvt";
pub const LOG_FILE: &str = "log.csv";
pub const CONTROLLER_FILE: &str = "controller.csv";
pub const MUTUAL_INFO_FILE: &str = "mutual_info.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const DSPRITES_FILE: &str = "dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz";
const FLUSH_EVERY: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Dsprites,
    Synth,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "dsprites" => Ok(DatasetKind::Dsprites),
            "synth" => Ok(DatasetKind::Synth),
            other => Err(Error::Validation(format!("unknown dataset {other:?} (expected mnist, dsprites or synth)"))),
        }
    }
}

/// Everything that determines a run. Serialized as flat JSON with these
/// field names; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    pub dataset: DatasetKind,
    /// Samples drawn from the dataset (the synthetic set is generated at this
    /// size); `None` keeps everything.
    pub subsample_n: Option<usize>,
    pub data_seed: u64,
    /// Overrides the `GCVAE_DATA_DIR` environment variable.
    pub data_dir: Option<PathBuf>,
    pub latent_dim: usize,
    pub arch: Arch,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub stopping: bool,
    pub eps_a: f64,
    pub eps_b: f64,
    pub warmup: usize,
    pub seed: u64,
    pub target_recon: f64,
    pub target_kl: f64,
    pub target_corr: f64,
    pub kp_alpha: f64,
    pub ki_alpha: f64,
    pub kp_beta: f64,
    pub ki_beta: f64,
    pub kp_gamma: f64,
    pub ki_gamma: f64,
    pub min_value: f64,
    pub integral_cap: Option<f64>,
    pub beta_vae_beta: f64,
    pub info_vae_lambda: f64,
    pub control_vae_target: f64,
    /// Kernel bandwidth; `None` uses √k.
    pub sigma_k: Option<f64>,
    pub median_bandwidth: bool,
    pub eps_reg: f64,
    pub bins: usize,
    pub mig_normalization: MigNormalization,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = Targets::default();
        RunConfig {
            variant: "gcvae2".into(),
            dataset: DatasetKind::Synth,
            subsample_n: Some(737),
            data_seed: 0,
            data_dir: None,
            latent_dim: 10,
            arch: Arch::Conv64,
            batch_size: 64,
            lr: 1e-3,
            max_steps: 10_000,
            stopping: false,
            eps_a: 1e-4,
            eps_b: 1e-3,
            warmup: 50,
            seed: 0,
            target_recon: t.recon,
            target_kl: t.kl,
            target_corr: t.corr,
            kp_alpha: 0.01,
            ki_alpha: 1e-4,
            kp_beta: 0.01,
            ki_beta: 1e-4,
            kp_gamma: 0.01,
            ki_gamma: 1e-4,
            min_value: 0.0,
            integral_cap: None,
            beta_vae_beta: crate::objective::BETA_VAE_BETA,
            info_vae_lambda: crate::objective::INFO_VAE_LAMBDA,
            control_vae_target: crate::objective::CONTROL_VAE_KL_TARGET,
            sigma_k: None,
            median_bandwidth: false,
            eps_reg: 1e-6,
            bins: crate::metrics::DEFAULT_BINS,
            mig_normalization: MigNormalization::CodeSum,
            out_dir: PathBuf::from("runs/run"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn variant_name(&self) -> Result<VariantName> {
        self.variant.parse()
    }

    /// The weight configuration with this run's targets and gains applied.
    pub fn variant_config(&self) -> Result<VariantConfig> {
        let name = self.variant_name()?;
        let targets = Targets { recon: self.target_recon, kl: self.target_kl, corr: self.target_corr };
        let mut v = VariantConfig::for_variant(name, targets);
        match name {
            VariantName::BetaVae => v.beta = WeightMode::Fixed(self.beta_vae_beta),
            VariantName::InfoVae => v.gamma = WeightMode::Fixed(self.info_vae_lambda),
            _ => {}
        }
        let gains = [(self.kp_alpha, self.ki_alpha), (self.kp_beta, self.ki_beta), (self.kp_gamma, self.ki_gamma)];
        for (mode, (kp, ki)) in [&mut v.alpha, &mut v.beta, &mut v.gamma].into_iter().zip(gains) {
            if let WeightMode::Pid(c) = mode {
                c.kp = kp;
                c.ki = ki;
                c.min_value = self.min_value;
                c.integral_cap = self.integral_cap;
                if name == VariantName::ControlVae {
                    c.set_point = self.control_vae_target;
                }
            }
        }
        Ok(v)
    }

    pub fn divergence_config(&self, kind: DivergenceKind) -> DivergenceConfig {
        let bandwidth = match (self.median_bandwidth, self.sigma_k) {
            (true, _) => Bandwidth::Median,
            (false, Some(s)) => Bandwidth::Fixed(s),
            (false, None) => Bandwidth::SqrtLatentDim,
        };
        DivergenceConfig { kind, bandwidth, cov_regularizer: self.eps_reg }
    }

    pub fn stopping_rule(&self) -> Option<StoppingRule> {
        self.stopping.then_some(StoppingRule { eps_a: self.eps_a, eps_b: self.eps_b, warmup: self.warmup })
    }

    pub fn validate(&self) -> Result<()> {
        self.variant_name()?;
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation(format!("lr must be positive, got {}", self.lr)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Validation("latent_dim must be positive".into()));
        }
        if self.bins < 2 {
            return Err(Error::Validation("bins must be at least 2".into()));
        }
        if self.subsample_n == Some(0) {
            return Err(Error::Validation("subsample_n must be positive".into()));
        }
        self.divergence_config(DivergenceKind::Mmd).validate()
    }

    fn data_root(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Contract(format!("dataset {:?} needs data_dir or {DATA_DIR_ENV}", self.dataset)))
    }

    /// Loads (or generates) the training set.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset {
            DatasetKind::Synth => synth_sprites(self.subsample_n.unwrap_or(737), self.data_seed),
            DatasetKind::Mnist => {
                let root = self.data_root()?;
                let dir = if root.join("mnist").is_dir() { root.join("mnist") } else { root };
                let (img, lab) = mnist_paths(&dir, true);
                let ds = load_mnist_idx(&img, &lab)?;
                match self.subsample_n {
                    Some(n) => subsample(&ds, n, self.data_seed),
                    None => Ok(ds),
                }
            }
            DatasetKind::Dsprites => {
                let root = self.data_root()?;
                let path = [root.join(DSPRITES_FILE), root.join("dsprites").join(DSPRITES_FILE)]
                    .into_iter()
                    .find(|p| p.is_file())
                    .ok_or_else(|| Error::Contract(format!("{DSPRITES_FILE} not found under {}", root.display())))?;
                match self.subsample_n {
                    Some(n) => load_dsprites_npz_subset(&path, n, self.data_seed),
                    None => load_dsprites_npz(&path),
                }
            }
        }
    }

    pub fn model_spec(&self, ds: &Dataset) -> Result<ModelSpec> {
        let (h, w) = ds.image_size();
        if h != w {
            return Err(Error::Contract(format!("square images required, got {h}×{w}")));
        }
        Ok(ModelSpec { arch: self.arch, latent_dim: self.latent_dim, image_side: h, mlp_hidden: (400, 200) })
    }
}

/// One row of `log.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub corr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub wall_ms: u64,
}

impl LogRow {
    pub fn weights(&self) -> WeightTriple {
        WeightTriple::new(self.alpha, self.beta, self.gamma)
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub out_dir: PathBuf,
    pub rows: Vec<LogRow>,
    pub steps: usize,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub report: Option<MetricReport>,
    pub params: ModelParams,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &params.to_named())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    ModelParams::from_named(read_checkpoint(BufReader::new(File::open(path)?))?)
}

fn seed_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

struct Logs {
    main: csv::Writer<BufWriter<File>>,
    controller: csv::Writer<BufWriter<File>>,
    mutual_info: csv::Writer<BufWriter<File>>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<BufWriter<File>>> {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(File::create(dir.join(name))?));
            w.write_record(header).map_err(csv_err)?;
            Ok(w)
        };
        Ok(Logs {
            main: open(LOG_FILE, &["step", "total", "recon", "kl", "corr", "alpha", "beta", "gamma", "wall_ms"])?,
            controller: open(CONTROLLER_FILE, &["step", "weight", "actual", "error", "integral", "value"])?,
            mutual_info: open(MUTUAL_INFO_FILE, &["epoch", "step", "i_p", "i_q"])?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.main.flush()?;
        self.controller.flush()?;
        self.mutual_info.flush()?;
        Ok(())
    }
}

fn rows_as_csv(rows: &[LogRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        let _ = w.serialize(r);
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

/// Loads the configured dataset and trains on it.
pub fn train(config: &RunConfig) -> Result<RunLog> {
    config.validate()?;
    let ds = config.load_dataset()?;
    train_on(config, &ds)
}

/// Trains on an already loaded dataset, writing every artifact to `out_dir`.
pub fn train_on(config: &RunConfig, ds: &Dataset) -> Result<RunLog> {
    config.validate()?;
    let variant = config.variant_config()?;
    let div = config.divergence_config(variant.divergence.unwrap_or(DivergenceKind::Mmd));
    let spec = config.model_spec(ds)?;
    let mut params = ModelParams::init(&spec, config.seed)?;
    let mut adam = Adam::new(AdamConfig::new(config.lr), &params);
    let mut controllers = Controllers::new(&variant);
    let mut stream = BatchStream::new(ds.len(), config.batch_size, config.seed.wrapping_add(1))?;
    let mut noise = seed_stream(config.seed, 2);
    let stopping = config.stopping_rule();

    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), config.to_json()?)?;
    let mut logs = Logs::create(&out)?;

    let k = config.latent_dim;
    let b = config.batch_size;
    let per_epoch = stream.batches_per_epoch();
    let (mut ip_sum, mut iq_sum, mut in_epoch) = (0.0, 0.0, 0usize);
    let start = Instant::now();
    let mut rows: Vec<LogRow> = Vec::new();
    let mut prev_weights: Option<WeightTriple> = None;
    let mut stopped_early = false;

    for step in 1..=config.max_steps {
        let idx = stream.next_batch();
        let x = ds.batch(&idx);
        let eps = Tensor::randn(&[b, k], &mut noise);
        let prior = Tensor::randn(&[b, k], &mut noise);
        let inputs = StepInputs { x: &x, eps: &eps, prior: &prior };
        let (out_step, traces) = match objective_step(&params, &variant, &mut controllers, &div, &inputs, step) {
            Ok(v) => v,
            Err(Error::NonFinite { step, detail }) => {
                logs.flush()?;
                let tail = &rows[rows.len().saturating_sub(10)..];
                return Err(Error::NonFinite { step, detail: format!("{detail}\nlast logged rows:\n{}", rows_as_csv(tail)) });
            }
            Err(e) => return Err(e),
        };
        adam.step(&mut params, &out_step.gradients)?;
        params.update_running_stats(&out_step.bn_stats);

        let br = out_step.breakdown;
        let row = LogRow {
            step,
            total: br.total,
            recon: br.recon_nll,
            kl: br.kl,
            corr: br.corr,
            alpha: br.weights.alpha,
            beta: br.weights.beta,
            gamma: br.weights.gamma,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        logs.main.serialize(row).map_err(csv_err)?;
        for (name, t) in &traces {
            logs.controller
                .write_record([step.to_string(), name.to_string(), t.actual.to_string(), t.error.to_string(), t.integral.to_string(), t.weight.to_string()])
                .map_err(csv_err)?;
        }
        let (ip, iq) = mutual_info_report(br.recon_nll, br.kl, br.corr);
        ip_sum += ip;
        iq_sum += iq;
        in_epoch += 1;
        if in_epoch == per_epoch {
            let n = in_epoch as f64;
            logs.mutual_info
                .write_record([(step / per_epoch).to_string(), step.to_string(), (ip_sum / n).to_string(), (iq_sum / n).to_string()])
                .map_err(csv_err)?;
            (ip_sum, iq_sum, in_epoch) = (0.0, 0.0, 0);
        }
        if step % FLUSH_EVERY == 0 {
            logs.flush()?;
        }
        rows.push(row);

        let cur = br.weights;
        if let (Some(rule), Some(prev)) = (stopping, prev_weights) {
            if rule.should_stop(step, &prev, &cur) {
                stopped_early = step < config.max_steps;
                break;
            }
        }
        prev_weights = Some(cur);
    }
    logs.flush()?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &params)?;
    let report = match &ds.factors {
        Some(_) => {
            let r = eval_metrics(&params, ds, &config.variant, config.bins, config.mig_normalization, config.data_seed)?;
            write_report(&out, &r)?;
            Some(r)
        }
        None => None,
    };
    Ok(RunLog { out_dir: out, steps: rows.len(), rows, stopped_early, checkpoint, report, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let c = RunConfig::from_json(r#"{"variant": "beta_vae", "latent_dim": 4, "arch": "mlp"}"#).unwrap();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.latent_dim, 4);
        assert_eq!(c.variant_config().unwrap().beta, WeightMode::Fixed(10.0));
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig { stopping: true, sigma_k: Some(2.0), ..RunConfig::default() };
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn per_controller_gains_apply() {
        let c = RunConfig { kp_beta: 0.5, target_kl: 7.0, ..RunConfig::default() };
        let v = c.variant_config().unwrap();
        match v.beta {
            WeightMode::Pid(p) => {
                assert_eq!(p.kp, 0.5);
                assert_eq!(p.set_point, 7.0);
            }
            WeightMode::Fixed(_) => panic!("gcvae beta is controlled"),
        }
    }
}
