//! Cell feature tables: CSV ingestion, stratified splitting, z-scoring, and a
//! synthetic generator with per-marker block structure.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default concept set: four marker classes followed by the unstained control.
pub const DEFAULT_CONCEPTS: [&str; 5] = ["CD3", "CD20", "CD68", "Claudin1", "Negative"];

/// Default per-class counts, in [`DEFAULT_CONCEPTS`] order.
pub const DEFAULT_CLASS_COUNTS: [usize; 5] = [138, 132, 177, 391, 3287];

pub const DEFAULT_FEATURE_DIM: usize = 28;

/// Train / validation / test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.64, 0.16, 0.20];

pub fn default_concepts() -> Vec<String> {
    DEFAULT_CONCEPTS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub features: Vec<f64>,
    /// Index into the dataset's concept list.
    pub label: usize,
}

/// Per-feature z-score transform fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features below this standard deviation are only centered.
const MIN_STD: f64 = 1e-12;

impl Standardization {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.records.is_empty() {
            return Err(Error::Data("cannot fit standardization on an empty split".into()));
        }
        let dim = train.feature_dim;
        let n = train.records.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &train.records {
            mean.iter_mut().zip(&r.features).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &train.records {
            for ((v, x), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Applies the transform. Refuses datasets that were already transformed.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.standardization.is_some() {
            return Err(Error::Contract(
                "dataset is already standardized; the transform must be applied once".into(),
            ));
        }
        if dataset.feature_dim != self.mean.len() {
            return Err(Error::Dimension {
                op: "standardize",
                lhs: vec![self.mean.len()],
                rhs: vec![dataset.feature_dim],
            });
        }
        let records = dataset
            .records
            .iter()
            .map(|r| CellRecord {
                features: r
                    .features
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(x, (m, s))| if *s < MIN_STD { x - m } else { (x - m) / s })
                    .collect(),
                label: r.label,
            })
            .collect();
        Ok(Dataset {
            records,
            concepts: dataset.concepts.clone(),
            feature_dim: dataset.feature_dim,
            standardization: Some(self.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<CellRecord>,
    pub concepts: Vec<String>,
    pub feature_dim: usize,
    /// Set once the transform has been applied.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(records: Vec<CellRecord>, concepts: Vec<String>, feature_dim: usize) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "record {i} has {} features, expected {feature_dim}",
                    r.features.len()
                )));
            }
            if r.label >= concepts.len() {
                return Err(Error::Data(format!("record {i} has unknown label {}", r.label)));
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record {i} has a non-finite feature")));
            }
        }
        Ok(Self {
            records,
            concepts,
            feature_dim,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.concepts.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Record indices grouped by concept.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.concepts.len()];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.label].push(i);
        }
        groups
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            concepts: self.concepts.clone(),
            feature_dim: self.feature_dim,
            standardization: self.standardization.clone(),
        }
    }
}

/// Expected layout of a feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSchema {
    pub concepts: Vec<String>,
    pub feature_dim: usize,
}

impl Default for TableSchema {
    fn default() -> Self {
        Self {
            concepts: default_concepts(),
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl TableSchema {
    pub fn header(&self) -> Vec<String> {
        std::iter::once("label".to_string())
            .chain((0..self.feature_dim).map(|i| format!("f{i:02}")))
            .collect()
    }
}

/// Reads a `label,f00,…` CSV table. Row numbers in errors are 1-based file lines.
pub fn load_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file, schema)
}

pub fn read_table<R: std::io::Read>(reader: R, schema: &TableSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        row: 1,
        message: e.to_string(),
    })?;
    let expected = schema.header();
    for name in &expected {
        if !header.iter().any(|h| h == name) {
            return Err(Error::Parse {
                row: 1,
                message: format!("missing column `{name}`"),
            });
        }
    }
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            row: 1,
            message: format!("header must be exactly `{}`", expected.join(",")),
        });
    }
    let labels: BTreeMap<&str, usize> = schema
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut records = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let label = *labels.get(&rec[0]).ok_or_else(|| Error::Parse {
            row,
            message: format!("unknown label `{}`", &rec[0]),
        })?;
        let features = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, cell)| {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("column f{j:02}: `{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("column f{j:02}: non-finite value `{cell}`"),
                    });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(CellRecord { features, label });
    }
    Dataset::new(records, schema.concepts.clone(), schema.feature_dim)
}

/// Writes a table that [`load_table`] reads back bit-exactly.
pub fn write_table(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table_to(file, dataset).map_err(|e| Error::io(path, e))
}

pub fn write_table_to<W: std::io::Write>(writer: W, dataset: &Dataset) -> std::io::Result<()> {
    let schema = TableSchema {
        concepts: dataset.concepts.clone(),
        feature_dim: dataset.feature_dim,
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(schema.header())?;
    for r in &dataset.records {
        let row = std::iter::once(dataset.concepts[r.label].clone())
            .chain(r.features.iter().map(|v| v.to_string()));
        w.write_record(row)?;
    }
    w.flush()
}

/// Per-class split sizes for `n` records.
///
/// Each part starts at `floor(fraction·n)`; the records left over go one
/// each to the parts with the largest fractional remainders (ties to the
/// earlier part). With the default fractions this gives 88/22/28 for 138.
pub fn split_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &part in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[part] += 1;
    }
    sizes
}

/// Stratified train / validation / test split, shuffled per class with `seed`.
pub fn stratified_split(
    dataset: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Split(format!(
            "fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut members) in dataset.by_class().into_iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Split(format!(
                "class `{}` has {} records; at least 3 are needed",
                dataset.concepts[class],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = split_sizes(members.len(), &fractions);
        parts[0].extend_from_slice(&members[..n_train]);
        parts[1].extend_from_slice(&members[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&members[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
    ))
}

/// Fits a z-score transform on `train` and applies it to `train` and `others`.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>)> {
    let transform = Standardization::fit(train)?;
    let train = transform.apply(train)?;
    let others = others
        .iter()
        .map(|d| transform.apply(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, others))
}

/// Parameters of the synthetic stand-in cohort.
///
/// Class `c < K-1` has mean `delta` on feature block `c` (block width
/// `feature_dim / (K-1)`) and zero elsewhere; the last class has zero mean.
/// Every class has isotropic noise `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_per_class: Vec<usize>,
    pub concepts: Vec<String>,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_class: DEFAULT_CLASS_COUNTS.to_vec(),
            concepts: default_concepts(),
            feature_dim: DEFAULT_FEATURE_DIM,
            class_separation: 5.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class.len() != self.concepts.len() || self.concepts.len() < 2 {
            return Err(Error::Parameter(format!(
                "need one count per concept (at least 2), got {} counts for {} concepts",
                self.n_per_class.len(),
                self.concepts.len()
            )));
        }
        if self.n_per_class.contains(&0) {
            return Err(Error::Parameter("class counts must be positive".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter("noise sigma must be positive".into()));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Parameter("class separation must be nonnegative".into()));
        }
        if self.block_width() == 0 {
            return Err(Error::Parameter(format!(
                "feature_dim {} is too small for {} marker blocks",
                self.feature_dim,
                self.concepts.len() - 1
            )));
        }
        Ok(())
    }

    pub fn block_width(&self) -> usize {
        self.feature_dim / (self.concepts.len().saturating_sub(1)).max(1)
    }

    /// Mean vector of class `c`.
    pub fn class_mean(&self, c: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.feature_dim];
        if c + 1 < self.concepts.len() {
            let w = self.block_width();
            mean[c * w..(c + 1) * w].fill(self.class_separation);
        }
        mean
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_per_class.iter().sum());
    for (label, &n) in spec.n_per_class.iter().enumerate() {
        let mean = spec.class_mean(label);
        for _ in 0..n {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise_sigma * z
                })
                .collect();
            records.push(CellRecord { features, label });
        }
    }
    Dataset::new(records, spec.concepts.clone(), spec.feature_dim)
}
