use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{subsample, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{disentanglement, CodeTable, MigNormalization};
use crate::model::{kl_gaussian_standard, reconstruction_nll, ModelParams};
use crate::objective::VariantName;
use crate::tensor::Tensor;

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
/// Larger evaluation sets are subsampled to this many samples.
pub const EVAL_LIMIT: usize = 10_000;
const EVAL_CHUNK: usize = 256;

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub mig: f64,
    /// `None` when no code carries information about any factor.
    pub modularity: Option<f64>,
    pub jemmig: f64,
    pub recon: f64,
    pub kl: f64,
    pub samples: usize,
}

/// Posterior means, log-variances and decoder logits at z = μ for every sample.
pub fn encode_dataset(params: &ModelParams, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n = images.shape()[0];
    let k = params.latent_dim();
    let (mut mu, mut lv, mut logits) = (Vec::with_capacity(n * k), Vec::with_capacity(n * k), Vec::with_capacity(images.len()));
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = images.select_rows(&idx);
        let (m, l) = params.encode(&x)?;
        logits.extend_from_slice(params.decode(&m)?.data());
        mu.extend_from_slice(m.data());
        lv.extend_from_slice(l.data());
        start += EVAL_CHUNK;
    }
    Ok((Tensor::new(&[n, k], mu)?, Tensor::new(&[n, k], lv)?, Tensor::new(images.shape(), logits)?))
}

/// Scores from given codes (test hook for oracle codes).
pub fn report_from_codes(variant: &str, codes: &Tensor, ds: &Dataset, bins: usize, norm: MigNormalization, recon: f64, kl: f64) -> Result<MetricReport> {
    let factors = ds.factors.as_ref().ok_or_else(|| Error::Contract(format!("dataset {:?} has no factors", ds.name)))?;
    let d = disentanglement(&CodeTable::new(codes.clone(), bins)?, factors, norm)?;
    Ok(MetricReport {
        variant: variant.to_string(),
        mig: d.mig.mean,
        modularity: d.modularity.map(|s| s.mean),
        jemmig: d.jemmig.mean,
        recon,
        kl,
        samples: ds.len(),
    })
}

/// Encodes the (possibly subsampled) dataset at the posterior mean and scores it.
pub fn eval_metrics(params: &ModelParams, ds: &Dataset, variant: &str, bins: usize, norm: MigNormalization, seed: u64) -> Result<MetricReport> {
    if ds.factors.is_none() {
        return Err(Error::Contract(format!("dataset {:?} has no factors", ds.name)));
    }
    let sub;
    let ds = if ds.len() > EVAL_LIMIT {
        sub = subsample(ds, EVAL_LIMIT, seed)?;
        &sub
    } else {
        ds
    };
    let (mu, lv, logits) = encode_dataset(params, &ds.images)?;
    let recon = reconstruction_nll(&ds.images, &logits)?;
    let kl = kl_gaussian_standard(&mu, &lv)?;
    report_from_codes(variant, &mu, ds, bins, norm, recon, kl)
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_report(dir: &Path, r: &MetricReport) -> Result<()> {
    let mut txt = String::new();
    writeln!(txt, "variant={}", r.variant).expect("string write");
    writeln!(txt, "mig={}", r.mig).expect("string write");
    writeln!(txt, "modularity={}", r.modularity.map_or_else(|| "undefined".to_string(), |x| x.to_string())).expect("string write");
    writeln!(txt, "jemmig={}", r.jemmig).expect("string write");
    writeln!(txt, "recon={}", r.recon).expect("string write");
    writeln!(txt, "kl={}", r.kl).expect("string write");
    writeln!(txt, "samples={}", r.samples).expect("string write");
    fs::write(dir.join(REPORT_TXT), txt)?;

    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV)).map_err(csv_err)?;
    w.write_record(["variant", "mig", "modularity", "jemmig", "recon", "kl", "samples"]).map_err(csv_err)?;
    w.write_record([
        r.variant.clone(),
        r.mig.to_string(),
        opt_field(r.modularity),
        r.jemmig.to_string(),
        r.recon.to_string(),
        r.kl.to_string(),
        r.samples.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Format(format!("csv: {e}"))
    }
}

pub fn read_report(dir: &Path) -> Result<MetricReport> {
    let mut rdr = csv::Reader::from_path(dir.join(REPORT_CSV)).map_err(csv_err)?;
    let rec = rdr.records().next().ok_or_else(|| Error::Format(format!("{}: empty report", dir.display())))?.map_err(csv_err)?;
    let f = |i: usize| -> Result<f64> {
        rec.get(i).unwrap_or("").parse::<f64>().map_err(|_| Error::Format(format!("{}: bad report field {i}", dir.display())))
    };
    Ok(MetricReport {
        variant: rec.get(0).unwrap_or("").to_string(),
        mig: f(1)?,
        modularity: if rec.get(2).unwrap_or("").is_empty() { None } else { Some(f(2)?) },
        jemmig: f(3)?,
        recon: f(4)?,
        kl: f(5)?,
        samples: rec.get(6).and_then(|s| s.parse().ok()).unwrap_or(0),
    })
}

/// Merged reports from several run directories.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<(PathBuf, MetricReport)>,
    pub missing: Vec<PathBuf>,
}

/// Collects every directory's report, ordered by variant as in the
/// comparison table and then by the order given.
pub fn compare_runs(dirs: &[PathBuf]) -> Comparison {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for d in dirs {
        match read_report(d) {
            Ok(r) => rows.push((d.clone(), r)),
            Err(_) => missing.push(d.clone()),
        }
    }
    let rank = |r: &MetricReport| r.variant.parse::<VariantName>().map_or(usize::MAX, VariantName::table_rank);
    rows.sort_by_key(|(_, r)| rank(r));
    Comparison { rows, missing }
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "model", "mig", "modularity", "jemmig", "recon", "kl"]).map_err(csv_err)?;
        for (dir, r) in &self.rows {
            w.write_record([
                dir.display().to_string(),
                model_label(&r.variant),
                r.mig.to_string(),
                opt_field(r.modularity),
                r.jemmig.to_string(),
                r.recon.to_string(),
                r.kl.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["Model", "MIG", "Modularity", "JEMMIG", "Recon", "KL", "Run"].map(String::from).to_vec();
        let mut lines = vec![header];
        for (dir, r) in &self.rows {
            lines.push(vec![
                model_label(&r.variant),
                format!("{:.4}", r.mig),
                r.modularity.map_or_else(|| "-".to_string(), |m| format!("{m:.4}")),
                format!("{:.4}", r.jemmig),
                format!("{:.4}", r.recon),
                format!("{:.4}", r.kl),
                dir.display().to_string(),
            ]);
        }
        for dir in &self.missing {
            lines.push(vec!["(absent)".into(), "-".into(), "-".into(), "-".into(), "-".into(), "-".into(), dir.display().to_string()]);
        }
        let widths: Vec<usize> = (0..7).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn model_label(variant: &str) -> String {
    variant.parse::<VariantName>().map_or_else(|_| variant.to_string(), |v| v.display_name().to_string())
}
