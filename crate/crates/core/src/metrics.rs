//! Disentanglement scores from latent codes and ground-truth factors, built
//! on a histogram mutual-information estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 20;

/// Ground-truth factors, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    columns: Vec<Vec<usize>>,
    cardinalities: Vec<usize>,
}

impl FactorTable {
    /// `rows` is row-major n×K.
    pub fn from_rows(rows: &[Vec<usize>], cardinalities: &[usize]) -> Result<Self> {
        let k = cardinalities.len();
        let mut columns = vec![Vec::with_capacity(rows.len()); k];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::shape("factor_table", format!("row {i} has {} entries, expected {k}", row.len())));
            }
            for (c, &v) in row.iter().enumerate() {
                columns[c].push(v);
            }
        }
        Self::from_columns(columns, cardinalities.to_vec())
    }

    pub fn from_columns(columns: Vec<Vec<usize>>, cardinalities: Vec<usize>) -> Result<Self> {
        if columns.len() != cardinalities.len() {
            return Err(Error::shape("factor_table", format!("{} columns but {} cardinalities", columns.len(), cardinalities.len())));
        }
        let n = columns.first().map_or(0, Vec::len);
        for (c, (col, &card)) in columns.iter().zip(&cardinalities).enumerate() {
            if col.len() != n {
                return Err(Error::shape("factor_table", format!("column {c} has {} rows, expected {n}", col.len())));
            }
            if let Some(&bad) = col.iter().find(|&&v| v >= card) {
                return Err(Error::Validation(format!("factor {c} value {bad} outside cardinality {card}")));
            }
        }
        Ok(FactorTable { columns, cardinalities })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.columns.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn column(&self, k: usize) -> &[usize] {
        &self.columns[k]
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> Vec<usize> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FactorTable {
        FactorTable {
            columns: self.columns.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            cardinalities: self.cardinalities.clone(),
        }
    }
}

/// Latent codes (n×k posterior means) plus the histogram resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    pub codes: Tensor,
    pub bins: usize,
}

impl CodeTable {
    pub fn new(codes: Tensor, bins: usize) -> Result<Self> {
        if codes.rank() != 2 {
            return Err(Error::shape("code_table", format!("expected n×k codes, got {:?}", codes.shape())));
        }
        if bins < 2 {
            return Err(Error::Validation(format!("need at least 2 bins, got {bins}")));
        }
        Ok(CodeTable { codes, bins })
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn discretize(&self) -> Vec<Vec<usize>> {
        discretize(&self.codes, self.bins)
    }
}

/// Equal-width binning of each column over its [min, max]. Constant columns
/// map to bin 0. Returns one vector per column.
pub fn discretize(codes: &Tensor, bins: usize) -> Vec<Vec<usize>> {
    let (n, k) = match codes.shape() {
        [n, k] => (*n, *k),
        _ => return Vec::new(),
    };
    let d = codes.data();
    (0..k)
        .map(|j| {
            let col = (0..n).map(|i| d[i * k + j]);
            let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let width = hi - lo;
            col.map(|v| {
                if width > 0.0 && width.is_finite() {
                    (((v - lo) / width * bins as f64).floor() as usize).min(bins - 1)
                } else {
                    0
                }
            })
            .collect()
        })
        .collect()
}

fn cardinality(col: &[usize]) -> usize {
    col.iter().max().map_or(0, |m| m + 1)
}

/// Plug-in entropy in nats.
pub fn entropy(col: &[usize]) -> f64 {
    let mut counts = vec![0usize; cardinality(col)];
    for &v in col {
        counts[v] += 1;
    }
    entropy_of_counts(&counts, col.len())
}

fn entropy_of_counts(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn joint_counts(a: &[usize], b: &[usize]) -> (Vec<usize>, usize, usize) {
    let (ca, cb) = (cardinality(a), cardinality(b));
    let mut joint = vec![0usize; ca * cb];
    for (&u, &v) in a.iter().zip(b) {
        joint[u * cb + v] += 1;
    }
    (joint, ca, cb)
}

pub fn joint_entropy(a: &[usize], b: &[usize]) -> f64 {
    let (joint, _, _) = joint_counts(a, b);
    entropy_of_counts(&joint, a.len().min(b.len()))
}

/// Plug-in mutual information (nats) of two equal-length discrete columns.
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mutual_information", format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let (joint, ca, cb) = joint_counts(a, b);
    let mut pa = vec![0usize; ca];
    let mut pb = vec![0usize; cb];
    for u in 0..ca {
        for v in 0..cb {
            let c = joint[u * cb + v];
            pa[u] += c;
            pb[v] += c;
        }
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for u in 0..ca {
        for v in 0..cb {
            let c = joint[u * cb + v];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (pa[u] as f64 * pb[v] as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `m[k][j] = I(y_k, z_j)`.
pub fn mi_matrix(codes: &[Vec<usize>], factors: &FactorTable) -> Result<Vec<Vec<f64>>> {
    factors.columns().iter().map(|y| codes.iter().map(|z| mutual_information(y, z)).collect()).collect()
}

/// Per-item scores and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

impl Scores {
    fn from_items(per_item: Vec<f64>) -> Self {
        let mean = if per_item.is_empty() { 0.0 } else { per_item.iter().sum::<f64>() / per_item.len() as f64 };
        Scores { per_item, mean }
    }
}

/// Denominator of the information gap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigNormalization {
    /// Σ_j I(y_k, z_j).
    #[default]
    CodeSum,
    /// H(y_k).
    FactorEntropy,
}

fn top_two(row: &[f64]) -> (usize, f64, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    let second = row.iter().enumerate().filter(|&(j, _)| j != best.0).map(|(_, &v)| v).fold(0.0f64, f64::max);
    (best.0, best.1.max(0.0), second)
}

fn check_lengths(codes: &[Vec<usize>], factors: &FactorTable) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::shape("metrics", "no code dimensions"));
    }
    if let Some(bad) = codes.iter().find(|c| c.len() != factors.len()) {
        return Err(Error::shape("metrics", format!("{} codes but {} factor rows", bad.len(), factors.len())));
    }
    Ok(())
}

/// Mutual information gap over already-discretized codes.
pub fn mig_discrete(codes: &[Vec<usize>], factors: &FactorTable, norm: MigNormalization) -> Result<Scores> {
    check_lengths(codes, factors)?;
    let m = mi_matrix(codes, factors)?;
    let items = m
        .iter()
        .zip(factors.columns())
        .map(|(row, y)| {
            let (_, first, second) = top_two(row);
            let denom = match norm {
                MigNormalization::CodeSum => row.iter().sum::<f64>(),
                MigNormalization::FactorEntropy => entropy(y),
            };
            if denom > 0.0 {
                ((first - second) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Scores::from_items(items))
}

/// Raw JEMMIG per factor: H(y_k, z_I) − I(y_k, z_I) + I(y_k, z_II).
pub fn jemmig_raw_discrete(codes: &[Vec<usize>], factors: &FactorTable) -> Result<Vec<f64>> {
    check_lengths(codes, factors)?;
    let m = mi_matrix(codes, factors)?;
    Ok(m.iter()
        .zip(factors.columns())
        .map(|(row, y)| {
            let (top, first, second) = top_two(row);
            joint_entropy(y, &codes[top]) - first + second
        })
        .collect())
}

/// Reported JEMMIG: 1 − raw / (H(y_k) + ln B), higher is better.
pub fn jemmig_discrete(codes: &[Vec<usize>], factors: &FactorTable, bins: usize) -> Result<Scores> {
    let raw = jemmig_raw_discrete(codes, factors)?;
    let ln_b = (bins.max(2) as f64).ln();
    let items = raw
        .iter()
        .zip(factors.columns())
        .map(|(&r, y)| (1.0 - r / (entropy(y) + ln_b)).clamp(0.0, 1.0))
        .collect();
    Ok(Scores::from_items(items))
}

/// Modularity per informative code, from an MI matrix indexed `m[k][j]`.
pub fn modularity_from_mi(m: &[Vec<f64>]) -> Result<Scores> {
    let num_factors = m.len();
    let num_codes = m.first().map_or(0, Vec::len);
    let mut items = Vec::new();
    for j in 0..num_codes {
        let col: Vec<f64> = m.iter().map(|row| row[j]).collect();
        let (arg, theta, _) = top_two(&col);
        if theta <= 0.0 {
            continue;
        }
        if num_factors == 1 {
            items.push(1.0);
            continue;
        }
        let off: f64 = col.iter().enumerate().filter(|&(k, _)| k != arg).map(|(_, v)| v * v).sum();
        items.push((1.0 - off / (theta * theta * (num_factors - 1) as f64)).clamp(0.0, 1.0));
    }
    if items.is_empty() {
        return Err(Error::UndefinedScore("every code has zero mutual information with every factor".into()));
    }
    Ok(Scores::from_items(items))
}

pub fn modularity_discrete(codes: &[Vec<usize>], factors: &FactorTable) -> Result<Scores> {
    check_lengths(codes, factors)?;
    modularity_from_mi(&mi_matrix(codes, factors)?)
}

pub fn mig(codes: &CodeTable, factors: &FactorTable, norm: MigNormalization) -> Result<Scores> {
    mig_discrete(&codes.discretize(), factors, norm)
}

pub fn jemmig(codes: &CodeTable, factors: &FactorTable) -> Result<Scores> {
    jemmig_discrete(&codes.discretize(), factors, codes.bins)
}

pub fn modularity(codes: &CodeTable, factors: &FactorTable) -> Result<Scores> {
    modularity_discrete(&codes.discretize(), factors)
}

/// All three scores from a single discretization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    pub mig: Scores,
    pub jemmig: Scores,
    /// `None` when no code carries information about any factor.
    pub modularity: Option<Scores>,
}

pub fn disentanglement(codes: &CodeTable, factors: &FactorTable, norm: MigNormalization) -> Result<Disentanglement> {
    let cols = codes.discretize();
    let modularity = match modularity_discrete(&cols, factors) {
        Ok(s) => Some(s),
        Err(Error::UndefinedScore(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Disentanglement {
        mig: mig_discrete(&cols, factors, norm)?,
        jemmig: jemmig_discrete(&cols, factors, codes.bins)?,
        modularity,
    })
}
