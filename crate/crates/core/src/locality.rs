//! Layer-importance orderings and their rank correlations.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::model::Component;
use crate::tokenizer::Bucket;
use crate::tracing::CategoryAggregate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalityError {
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two values, found {0}")]
    TooShort(usize),
    #[error("rank correlation undefined for a constant vector")]
    DegenerateInput,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("empty vector")]
    Empty,
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error("no defined pairs to average")]
    EmptyComparison,
    #[error("{subcategory} has no value for layer {layer}")]
    MissingLayer { subcategory: String, layer: usize },
    #[error("matrix csv: {0}")]
    Csv(String),
}

fn check_finite(v: &[f64]) -> Result<(), LocalityError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(LocalityError::NonFinite(i)),
        None => Ok(()),
    }
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean((i+1)..=j)
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average-tied ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, LocalityError> {
    if x.len() != y.len() {
        return Err(LocalityError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(LocalityError::TooShort(x.len()));
    }
    check_finite(x)?;
    check_finite(y)?;
    pearson(&average_ranks(x), &average_ranks(y)).ok_or(LocalityError::DegenerateInput)
}

/// Per-layer AIE of one subcategory at one bucket and component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerImportanceVector {
    pub subcategory: String,
    pub component: Component,
    pub bucket: Bucket,
    pub values: Vec<f64>,
}

impl LayerImportanceVector {
    pub fn from_aggregate(
        aggregate: &CategoryAggregate,
        bucket: Bucket,
        component: Component,
    ) -> Result<Self, LocalityError> {
        let values = (0..aggregate.n_layer)
            .map(|layer| {
                aggregate
                    .cell(layer, bucket, component)
                    .and_then(|c| c.mean)
                    .ok_or_else(|| LocalityError::MissingLayer {
                        subcategory: aggregate.subcategory.clone(),
                        layer,
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            subcategory: aggregate.subcategory.clone(),
            component,
            bucket,
            values,
        })
    }
}

/// Layer with the largest value; ties go to the lowest layer.
pub fn max_aie_layer(values: &[f64]) -> Result<(usize, f64), LocalityError> {
    if values.is_empty() {
        return Err(LocalityError::Empty);
    }
    check_finite(values)?;
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    Ok((best, values[best]))
}

/// Square matrix of rank correlations. Undefined entries (a constant
/// vector on either side) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    values: Vec<Option<f64>>,
}

impl CorrelationMatrix {
    pub fn from_entries(labels: Vec<String>, values: Vec<Option<f64>>) -> Self {
        assert_eq!(values.len(), labels.len() * labels.len(), "matrix must be square");
        Self { labels, values }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.len() + j]
    }

    pub fn index_of(&self, label: &str) -> Result<usize, LocalityError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| LocalityError::UnknownLabel(label.to_string()))
    }

    pub fn by_label(&self, a: &str, b: &str) -> Result<Option<f64>, LocalityError> {
        Ok(self.get(self.index_of(a)?, self.index_of(b)?))
    }

    /// Same matrix with rows and columns reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = order.len();
        let mut values = Vec::with_capacity(n * n);
        for &i in order {
            for &j in order {
                values.push(self.get(i, j));
            }
        }
        Self {
            labels: order.iter().map(|&i| self.labels[i].clone()).collect(),
            values,
        }
    }

    pub fn undefined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Header row of labels, then one row per label. Undefined entries are
    /// empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LocalityError> {
        let err = |e: csv::Error| LocalityError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut row = vec![label.clone()];
            row.extend((0..self.len()).map(|j| self.get(i, j).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| LocalityError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, LocalityError> {
        let err = |m: String| LocalityError::Csv(m);
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut records = r.records();
        let header = records
            .next()
            .ok_or_else(|| err("empty file".into()))?
            .map_err(|e| err(e.to_string()))?;
        let labels: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut values = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            if rec.len() != labels.len() + 1 || rec.get(0) != labels.get(i).map(String::as_str) {
                return Err(err(format!("row {} does not match header", i + 2)));
            }
            for cell in rec.iter().skip(1) {
                values.push(if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|e| err(format!("{cell:?}: {e}")))?)
                });
            }
        }
        if values.len() != labels.len() * labels.len() {
            return Err(err("matrix is not square".into()));
        }
        Ok(Self { labels, values })
    }
}

/// All pairwise rank correlations between the vectors.
pub fn pairwise_matrix(vectors: &[LayerImportanceVector]) -> Result<CorrelationMatrix, LocalityError> {
    let n = vectors.len();
    let mut values = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            let rho = match spearman(&vectors[i].values, &vectors[j].values) {
                Ok(r) => Some(r),
                Err(LocalityError::DegenerateInput) => None,
                Err(e) => return Err(e),
            };
            values[i * n + j] = rho;
            values[j * n + i] = rho;
        }
    }
    let undefined = values.iter().filter(|v| v.is_none()).count();
    if undefined > 0 {
        log::warn!("{undefined} undefined correlations (constant layer vectors)");
    }
    Ok(CorrelationMatrix {
        labels: vectors.iter().map(|v| v.subcategory.clone()).collect(),
        values,
    })
}

/// A mean over defined pairs plus how many pairs were left out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairAverage {
    pub mean: f64,
    pub pairs: usize,
    pub undefined: usize,
}

fn average(entries: impl Iterator<Item = Option<f64>>) -> Result<PairAverage, LocalityError> {
    let (mut sum, mut pairs, mut undefined) = (0.0, 0, 0);
    for e in entries {
        match e {
            Some(v) => {
                sum += v;
                pairs += 1;
            }
            None => undefined += 1,
        }
    }
    if pairs == 0 {
        return Err(LocalityError::EmptyComparison);
    }
    Ok(PairAverage {
        mean: sum / pairs as f64,
        pairs,
        undefined,
    })
}

/// Mean correlation over distinct unordered pairs of `members`.
pub fn intra_category_avg(matrix: &CorrelationMatrix, members: &[&str]) -> Result<PairAverage, LocalityError> {
    let idx: Vec<usize> = members.iter().map(|m| matrix.index_of(m)).collect::<Result<_, _>>()?;
    let mut entries = Vec::new();
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            entries.push(matrix.get(idx[a], idx[b]));
        }
    }
    average(entries.into_iter())
}

/// Mean correlation over all cross pairs of the two member lists, leaving
/// out members listed in `shared`.
pub fn inter_category_avg(
    matrix: &CorrelationMatrix,
    members_a: &[&str],
    members_b: &[&str],
    shared: &[&str],
) -> Result<PairAverage, LocalityError> {
    let shared: HashSet<&str> = shared.iter().copied().collect();
    let keep = |list: &[&str]| -> Result<Vec<usize>, LocalityError> {
        list.iter()
            .filter(|m| !shared.contains(*m))
            .map(|m| matrix.index_of(m))
            .collect()
    };
    let a = keep(members_a)?;
    let b = keep(members_b)?;
    let mut entries = Vec::new();
    for &i in &a {
        for &j in &b {
            if i != j {
                entries.push(matrix.get(i, j));
            }
        }
    }
    average(entries.into_iter())
}
