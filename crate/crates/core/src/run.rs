//! Reproducible runs: data generation, training and evaluation into output
//! directories, each with a manifest that is itself a valid config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{export_symbol_distribution, LanguageReport};
use crate::config::{KeyValues, RunConfig};
use crate::data::{
    generate_synthetic, load_table, stratified_split, write_table, Dataset, Standardization, SyntheticSpec,
    TableSchema,
};
use crate::error::{Error, Result};
use crate::training::{
    evaluate, load_checkpoint, resume, save_checkpoint, write_history, Checkpoint, TrainState,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const SYMBOLS_FILE: &str = "symbols.csv";
pub const CONTINGENCY_FILE: &str = "contingency.csv";

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

fn manifest_header(command: &str, extra: &[(&str, String)]) -> String {
    let mut out = String::from("# lewisgame run manifest\n");
    let _ = writeln!(out, "run.tool_version = {TOOL_VERSION}");
    let _ = writeln!(out, "run.command = {command}");
    for (k, v) in extra {
        let _ = writeln!(out, "run.{k} = {v}");
    }
    out
}

// ---------------------------------------------------------------- gen-data

/// Synthetic spec from `synth.*` keys; missing keys take defaults.
pub fn synthetic_spec_from_kv(kv: &KeyValues) -> Result<SyntheticSpec> {
    let d = SyntheticSpec::default();
    let get = |key: &str| kv.get(key);
    fn num<T: FromStr>(key: &str, v: Option<&str>, default: T) -> Result<T> {
        match v {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{s}`"))),
        }
    }
    for key in kv.keys() {
        if !key.starts_with("run.") && !SYNTH_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
    }
    let n_per_class = match get("synth.counts") {
        None => d.n_per_class,
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config("synth.counts", e.to_string()))?,
    };
    let concepts = match get("synth.concepts") {
        None => d.concepts,
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
    };
    let spec = SyntheticSpec {
        n_per_class,
        concepts,
        feature_dim: num("synth.feature_dim", get("synth.feature_dim"), d.feature_dim)?,
        class_separation: num("synth.delta", get("synth.delta"), d.class_separation)?,
        noise_sigma: num("synth.sigma", get("synth.sigma"), d.noise_sigma)?,
        seed: num("synth.seed", get("synth.seed"), d.seed)?,
    };
    spec.validate()
        .map_err(|e| Error::config("synth", e.to_string()))?;
    Ok(spec)
}

const SYNTH_KEYS: &[&str] = &[
    "synth.counts",
    "synth.concepts",
    "synth.feature_dim",
    "synth.delta",
    "synth.sigma",
    "synth.seed",
];

pub fn synthetic_spec_to_text(spec: &SyntheticSpec) -> String {
    let counts: Vec<String> = spec.n_per_class.iter().map(usize::to_string).collect();
    format!(
        "synth.counts = {}\nsynth.concepts = {}\nsynth.feature_dim = {}\nsynth.delta = {}\nsynth.sigma = {}\nsynth.seed = {}\n",
        counts.join(","),
        spec.concepts.join(","),
        spec.feature_dim,
        spec.class_separation,
        spec.noise_sigma,
        spec.seed
    )
}

/// Manifest path written next to a generated table.
pub fn gen_data_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

/// Writes the synthetic table to `out` and its manifest to `<out>.manifest`.
pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<Dataset> {
    let dataset = generate_synthetic(spec)?;
    write_table(out, &dataset)?;
    let manifest = manifest_header("gen-data", &[]) + &synthetic_spec_to_text(spec);
    write_file(&gen_data_manifest_path(out), &manifest)?;
    Ok(dataset)
}

// ------------------------------------------------------------------- data

/// Raw (unstandardized) splits of a table.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &Dataset {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

pub fn load_splits(data_path: &Path, config: &RunConfig) -> Result<Splits> {
    let schema = TableSchema {
        concepts: config.data.concepts.clone(),
        feature_dim: config.game.feature_dim,
    };
    let dataset = load_table(data_path, &schema)?;
    split_dataset(&dataset, config)
}

pub fn split_dataset(dataset: &Dataset, config: &RunConfig) -> Result<Splits> {
    let (train, val, test) = stratified_split(dataset, config.data.fractions, config.data.split_seed)?;
    Ok(Splits { train, val, test })
}

/// Standardizes all splits with statistics from the training split, when enabled.
pub fn prepare(splits: &Splits, config: &RunConfig) -> Result<(Splits, Option<Standardization>)> {
    if !config.data.standardize {
        return Ok((splits.clone(), None));
    }
    let st = Standardization::fit(&splits.train)?;
    Ok((
        Splits {
            train: st.apply(&splits.train)?,
            val: st.apply(&splits.val)?,
            test: st.apply(&splits.test)?,
        },
        Some(st),
    ))
}

// ------------------------------------------------------------------ train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Trains into `out_dir`: `checkpoint.bin` (rewritten after every epoch),
/// `history.csv` and `manifest.txt`. With `resume_from`, training continues
/// from that checkpoint instead of fresh parameters.
pub fn train_run(
    config: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let raw = load_splits(data_path, config)?;
    let (splits, standardization) = prepare(&raw, config)?;

    let state = match resume_from {
        None => TrainState::new(config)?,
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config.game != config.game || ckpt.config.data != config.data {
                return Err(Error::Checkpoint(
                    "checkpoint game/data configuration differs from the requested config".into(),
                ));
            }
            ckpt.state
        }
    };

    let manifest = manifest_header(
        "train",
        &[
            ("data_path", data_path.display().to_string()),
            ("data_fnv64", data_digest(data_path)?),
        ],
    ) + &config.to_text();
    write_file(&out_dir.join(MANIFEST_FILE), &manifest)?;

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let history_path = out_dir.join(HISTORY_FILE);
    let state = resume(state, &splits.train, &splits.val, config, |state| {
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                config: config.clone(),
                state: state.clone(),
                standardization: standardization.clone(),
            },
        )?;
        write_history(&history_path, &state.history)
    })?;
    // Also covers the zero-epoch case.
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            config: config.clone(),
            state: state.clone(),
            standardization,
        },
    )?;
    write_history(&history_path, &state.history)?;
    Ok(TrainSummary {
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_val_accuracy: state.best_val_accuracy,
        stopped_early: state.stopped_early,
    })
}

// ------------------------------------------------------------------- eval

/// Evaluates the best parameters of a checkpoint on one split and writes
/// `report.txt`, `symbols.csv`, `contingency.csv` and `manifest.txt`.
pub fn eval_run(
    checkpoint_path: &Path,
    data_path: &Path,
    split: SplitName,
    n_episodes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<LanguageReport> {
    if n_episodes == 0 {
        return Err(Error::Parameter("episode count must be positive".into()));
    }
    let ckpt = load_checkpoint(checkpoint_path)?;
    let config = &ckpt.config;
    let raw = load_splits(data_path, config).map_err(|e| match e {
        Error::Parse { row: 1, message } => Error::Data(format!(
            "data table does not match the checkpoint ({} features, concepts {}): {message}",
            config.game.feature_dim,
            config.data.concepts.join(",")
        )),
        other => other,
    })?;
    let dataset = match &ckpt.standardization {
        None => raw.get(split).clone(),
        Some(st) => st.apply(raw.get(split))?,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcomes = evaluate(
        &ckpt.state.best_params,
        &dataset,
        &config.game,
        n_episodes,
        seed,
        config.train.exec,
    )?;
    let report = LanguageReport::from_outcomes(&outcomes, config.data.concepts.clone(), config.game.vocab_size)?;
    report.write(out_dir.join(REPORT_FILE))?;
    export_symbol_distribution(
        &outcomes,
        &config.data.concepts,
        config.game.vocab_size,
        out_dir.join(SYMBOLS_FILE),
        out_dir.join(CONTINGENCY_FILE),
    )?;
    let split_name = match split {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    };
    let manifest = manifest_header(
        "eval",
        &[
            ("checkpoint_path", checkpoint_path.display().to_string()),
            ("checkpoint_fnv64", data_digest(checkpoint_path)?),
            ("data_path", data_path.display().to_string()),
            ("data_fnv64", data_digest(data_path)?),
            ("split", split_name.to_string()),
            ("episodes", n_episodes.to_string()),
            ("eval_seed", seed.to_string()),
        ],
    ) + &config.to_text();
    write_file(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(report)
}

/// Reads a config or manifest file.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&read_file(path)?)
}

pub fn read_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    synthetic_spec_from_kv(&KeyValues::parse(&read_file(path)?)?)
}
