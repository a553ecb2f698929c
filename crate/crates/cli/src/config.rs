//! Run configuration: training hyperparameters plus where the data comes from
//! and where outputs go. Read from a `key=value` file, then overridden by flags.

use anyhow::{bail, Context, Result};
use semcenter::data::{synth_dataset, Manifest};
use semcenter::training::parse_kv;
use semcenter::{Dataset, SyntheticSpec, TrainConfig};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manifests { train: PathBuf, val: Option<PathBuf> },
    Synthetic { spec: SyntheticSpec, test_per_concept: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: PathBuf,
}

/// Training and validation splits, with planted concepts when synthetic.
pub struct LoadedData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub val_concepts: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
                test_per_concept: 0,
            },
            out: PathBuf::from("out"),
        }
    }
}

/// Sets one `synth_*` field. Returns false if `key` is not a spec key.
pub fn set_synth_key(spec: &mut SyntheticSpec, key: &str, value: &str) -> Result<bool> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value.parse().ok().with_context(|| format!("bad value {value:?} for {key}"))
    }
    match key {
        "synth_n_concepts" => spec.n_concepts = num(key, value)?,
        "synth_subsets_per_concept" => spec.subsets_per_concept = num(key, value)?,
        "synth_feat_dim" => spec.feat_dim = num(key, value)?,
        "synth_vocab_size" => spec.vocab_size = num(key, value)?,
        "synth_tokens_per_caption" => spec.tokens_per_caption = num(key, value)?,
        "synth_k" => spec.k = num(key, value)?,
        "synth_noise_sigma" => spec.noise_sigma = num(key, value)?,
        "synth_seed" => spec.seed = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let pairs = parse_kv(&text).with_context(|| format!("in config {}", path.display()))?;
        Self::from_pairs(&pairs, base).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_pairs(pairs: &[(String, String)], base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut spec = SyntheticSpec::default();
        let mut test_per_concept = 0;
        let (mut train_manifest, mut val_manifest) = (None, None);
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (k, v) in pairs {
            if cfg.train.set(k, v)? || set_synth_key(&mut spec, k, v)? {
                continue;
            }
            match k.as_str() {
                "train_manifest" => train_manifest = Some(resolve(v)),
                "val_manifest" => val_manifest = Some(resolve(v)),
                "out" => cfg.out = resolve(v),
                "test_per_concept" => {
                    test_per_concept = v.parse().ok().with_context(|| format!("bad value {v:?} for {k}"))?
                }
                other => bail!("unknown config key `{other}`"),
            }
        }
        cfg.data = match train_manifest {
            Some(train) => DataSource::Manifests { train, val: val_manifest },
            None if val_manifest.is_some() => bail!("val_manifest given without train_manifest"),
            None => DataSource::Synthetic { spec, test_per_concept },
        };
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let pairs = parse_kv(&overrides.join("\n")).context("in --set overrides")?;
        for (k, v) in &pairs {
            if self.train.set(k, v)? {
                continue;
            }
            match &mut self.data {
                DataSource::Synthetic { spec, test_per_concept } => {
                    if set_synth_key(spec, k, v)? {
                        continue;
                    }
                    if k == "test_per_concept" {
                        *test_per_concept = v.parse().ok().with_context(|| format!("bad value {v:?} for {k}"))?;
                        continue;
                    }
                }
                DataSource::Manifests { .. } => {}
            }
            bail!("unknown or inapplicable override `{k}`");
        }
        Ok(())
    }

    /// Checks hyperparameters and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match &self.data {
            DataSource::Manifests { train, val } => {
                for p in std::iter::once(train).chain(val.iter()) {
                    if !p.is_file() {
                        bail!("manifest {} does not exist", p.display());
                    }
                }
            }
            DataSource::Synthetic { spec, .. } => spec.validate()?,
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        match &self.data {
            DataSource::Manifests { train, val } => {
                let load = |p: &PathBuf| -> Result<Dataset> {
                    Manifest::load(p)
                        .and_then(|m| m.load_dataset())
                        .with_context(|| format!("loading {}", p.display()))
                };
                Ok(LoadedData {
                    train: load(train)?,
                    val: val.as_ref().map(load).transpose()?,
                    val_concepts: None,
                })
            }
            DataSource::Synthetic { spec, test_per_concept } => {
                let all = synth_dataset(spec)?;
                if *test_per_concept == 0 {
                    return Ok(LoadedData {
                        train: all.dataset,
                        val: None,
                        val_concepts: None,
                    });
                }
                let (train, test) = all.split_holdout(*test_per_concept)?;
                Ok(LoadedData {
                    train: train.dataset,
                    val: Some(test.dataset),
                    val_concepts: Some(test.concept_labels),
                })
            }
        }
    }
}
