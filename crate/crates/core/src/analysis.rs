//! Emergent-language diagnostics over evaluation logs.
//!
//! Symbol indices are arbitrary per run, so everything here reports
//! structure (accuracy, usage, purity, mutual information) rather than
//! comparing raw symbol identities across runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::game::RoundOutcome;

/// Class × symbol counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    classes: Vec<String>,
    n_symbols: usize,
    counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn new(classes: Vec<String>, n_symbols: usize) -> Self {
        let counts = vec![0; classes.len() * n_symbols];
        Self {
            classes,
            n_symbols,
            counts,
        }
    }

    pub fn from_counts(classes: Vec<String>, n_symbols: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes.len() * n_symbols {
            return Err(Error::Dimension {
                op: "contingency table",
                lhs: vec![classes.len(), n_symbols],
                rhs: vec![counts.len()],
            });
        }
        Ok(Self {
            classes,
            n_symbols,
            counts,
        })
    }

    pub fn from_outcomes(outcomes: &[RoundOutcome], classes: Vec<String>, n_symbols: usize) -> Result<Self> {
        let mut table = Self::new(classes, n_symbols);
        for o in outcomes {
            table.record(o.target_label, o.symbol_index)?;
        }
        Ok(table)
    }

    pub fn record(&mut self, class: usize, symbol: usize) -> Result<()> {
        if class >= self.classes.len() {
            return Err(Error::Index {
                index: class,
                len: self.classes.len(),
            });
        }
        if symbol >= self.n_symbols {
            return Err(Error::Index {
                index: symbol,
                len: self.n_symbols,
            });
        }
        self.counts[class * self.n_symbols + symbol] += 1;
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn get(&self, class: usize, symbol: usize) -> u64 {
        self.counts[class * self.n_symbols + symbol]
    }

    pub fn row(&self, class: usize) -> &[u64] {
        &self.counts[class * self.n_symbols..(class + 1) * self.n_symbols]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.n_classes()).map(|c| self.row(c).iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        let mut sums = vec![0; self.n_symbols];
        for c in 0..self.n_classes() {
            sums.iter_mut().zip(self.row(c)).for_each(|(s, v)| *s += v);
        }
        sums
    }
}

fn nonempty(outcomes: &[RoundOutcome]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(Error::Contract("no evaluation outcomes".into()));
    }
    Ok(())
}

pub fn identification_accuracy(outcomes: &[RoundOutcome]) -> Result<f64> {
    nonempty(outcomes)?;
    Ok(outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64)
}

/// Distinct symbols emitted, as a fraction of the vocabulary.
pub fn symbols_used_fraction(outcomes: &[RoundOutcome], vocab_size: usize) -> Result<f64> {
    nonempty(outcomes)?;
    let mut seen = vec![false; vocab_size];
    for o in outcomes {
        *seen.get_mut(o.symbol_index).ok_or(Error::Index {
            index: o.symbol_index,
            len: vocab_size,
        })? = true;
    }
    Ok(seen.iter().filter(|&&s| s).count() as f64 / vocab_size as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MajoritySymbol {
    pub symbol: usize,
    /// Share of the class's rounds that used `symbol`.
    pub purity: f64,
}

fn majority_of_row(row: &[u64]) -> Option<MajoritySymbol> {
    let total: u64 = row.iter().sum();
    if total == 0 {
        return None;
    }
    let mut best = 0;
    for (s, &n) in row.iter().enumerate() {
        if n > row[best] {
            best = s;
        }
    }
    Some(MajoritySymbol {
        symbol: best,
        purity: row[best] as f64 / total as f64,
    })
}

/// Most frequent symbol per class (lowest index on ties) and its share.
pub fn majority_symbols(table: &ContingencyTable) -> Result<Vec<MajoritySymbol>> {
    (0..table.n_classes())
        .map(|c| {
            majority_of_row(table.row(c)).ok_or_else(|| {
                Error::Contract(format!("class `{}` has no logged rounds", table.classes[c]))
            })
        })
        .collect()
}

/// Shannon entropy in bits of a count vector.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// `I(class; symbol)` in bits; empty cells contribute nothing.
pub fn mutual_information_bits(table: &ContingencyTable) -> f64 {
    let total = table.total();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let rows = table.row_sums();
    let cols = table.column_sums();
    let mut mi = 0.0;
    for (c, &rc) in rows.iter().enumerate() {
        for (s, &cs) in cols.iter().enumerate() {
            let joint = table.get(c, s);
            if joint > 0 {
                let p = joint as f64 / n;
                mi += p * ((joint as f64 * n) / (rc as f64 * cs as f64)).log2();
            }
        }
    }
    // Round-off can push an independent table a hair below zero.
    mi.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageReport {
    pub n_rounds: usize,
    pub identification_accuracy: f64,
    pub symbols_used_fraction: f64,
    /// `None` for classes that never appeared as target.
    pub majority: Vec<Option<MajoritySymbol>>,
    pub mutual_information_bits: f64,
    pub contingency: ContingencyTable,
}

impl LanguageReport {
    pub fn from_outcomes(outcomes: &[RoundOutcome], classes: Vec<String>, vocab_size: usize) -> Result<Self> {
        let contingency = ContingencyTable::from_outcomes(outcomes, classes, vocab_size)?;
        Ok(Self {
            n_rounds: outcomes.len(),
            identification_accuracy: identification_accuracy(outcomes)?,
            symbols_used_fraction: symbols_used_fraction(outcomes, vocab_size)?,
            majority: (0..contingency.n_classes())
                .map(|c| majority_of_row(contingency.row(c)))
                .collect(),
            mutual_information_bits: mutual_information_bits(&contingency),
            contingency,
        })
    }

    /// `key=value` lines. Keys: `n_rounds`, `identification_accuracy`,
    /// `symbols_used_fraction`, `mutual_information_bits`, `vocab_size`,
    /// `classes`, then per class `majority.<class>.symbol`,
    /// `majority.<class>.purity` and `contingency.<class>` (comma-separated
    /// counts over the vocabulary).
    pub fn to_text(&self) -> String {
        let t = &self.contingency;
        let mut out = String::new();
        let _ = writeln!(out, "n_rounds={}", self.n_rounds);
        let _ = writeln!(out, "identification_accuracy={}", self.identification_accuracy);
        let _ = writeln!(out, "symbols_used_fraction={}", self.symbols_used_fraction);
        let _ = writeln!(out, "mutual_information_bits={}", self.mutual_information_bits);
        let _ = writeln!(out, "vocab_size={}", t.n_symbols());
        let _ = writeln!(out, "classes={}", t.classes().join(","));
        for (c, name) in t.classes().iter().enumerate() {
            match self.majority[c] {
                Some(m) => {
                    let _ = writeln!(out, "majority.{name}.symbol={}", m.symbol);
                    let _ = writeln!(out, "majority.{name}.purity={}", m.purity);
                }
                None => {
                    let _ = writeln!(out, "majority.{name}.symbol=none");
                    let _ = writeln!(out, "majority.{name}.purity=none");
                }
            }
        }
        for (c, name) in t.classes().iter().enumerate() {
            let row: Vec<String> = t.row(c).iter().map(u64::to_string).collect();
            let _ = writeln!(out, "contingency.{name}={}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Writes the long-form `class,symbol_index` log (one row per round) to
/// `long_path` and the class × symbol count matrix to `matrix_path`.
pub fn export_symbol_distribution(
    outcomes: &[RoundOutcome],
    classes: &[String],
    vocab_size: usize,
    long_path: impl AsRef<Path>,
    matrix_path: impl AsRef<Path>,
) -> Result<()> {
    nonempty(outcomes)?;
    let table = ContingencyTable::from_outcomes(outcomes, classes.to_vec(), vocab_size)?;

    let long_path = long_path.as_ref();
    let io = |e: csv::Error, p: &Path| Error::io(p, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(long_path).map_err(|e| io(e, long_path))?;
    w.write_record(["class", "symbol_index"]).map_err(|e| io(e, long_path))?;
    for o in outcomes {
        w.write_record([classes[o.target_label].as_str(), &o.symbol_index.to_string()])
            .map_err(|e| io(e, long_path))?;
    }
    w.flush().map_err(|e| Error::io(long_path, e))?;

    let matrix_path = matrix_path.as_ref();
    let mut w = csv::Writer::from_path(matrix_path).map_err(|e| io(e, matrix_path))?;
    let header = std::iter::once("class".to_string()).chain((0..vocab_size).map(|s| format!("s{s}")));
    w.write_record(header).map_err(|e| io(e, matrix_path))?;
    for (c, name) in classes.iter().enumerate() {
        let row = std::iter::once(name.clone()).chain(table.row(c).iter().map(u64::to_string));
        w.write_record(row).map_err(|e| io(e, matrix_path))?;
    }
    w.flush().map_err(|e| Error::io(matrix_path, e))
}

/// Rebuilds the contingency table from a long-form export.
pub fn read_symbol_distribution(
    path: impl AsRef<Path>,
    classes: &[String],
    vocab_size: usize,
) -> Result<ContingencyTable> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut table = ContingencyTable::new(classes.to_vec(), vocab_size);
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let class = classes
            .iter()
            .position(|c| c == &rec[0])
            .ok_or_else(|| Error::Parse {
                row,
                message: format!("unknown class `{}`", &rec[0]),
            })?;
        let symbol: usize = rec[1].parse().map_err(|_| Error::Parse {
            row,
            message: format!("bad symbol index `{}`", &rec[1]),
        })?;
        table.record(class, symbol)?;
    }
    Ok(table)
}
