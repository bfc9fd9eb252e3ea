//! Flat `key = value` experiment configs.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to [`ExperimentConfig::default`]; unknown keys are rejected. The
//! canonical serialization lists every key in a fixed order, so parsing it
//! back is a fixed point and its SHA-256 identifies the experiment.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use lwat::nn::{ArchKind, ArchSpec};
use lwat::train::TrainConfig;
use lwat::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Cifar10 {
        dir: PathBuf,
    },
    /// Gaussian blobs reshaped to `1×side×side` images.
    Synthetic {
        classes: usize,
        per_class: usize,
        side: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub widths: Vec<usize>,
    pub batchnorm: bool,
    pub dropout: f64,
    /// Number of gradacc layers; `None` places one in every eligible block.
    pub prefix: Option<usize>,
    pub data: DataSource,
    pub grayscale: bool,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub out_dir: PathBuf,
    /// ε values for the post-training sweep; empty skips it.
    pub eval_eps: Vec<f64>,
    pub attack: lwat::analysis::AttackKind,
    pub attack_batch: usize,
    pub spectrum: bool,
    pub spectrum_samples: usize,
    pub top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = ArchSpec::toy_fc(10, [1, 32, 32]);
        ExperimentConfig {
            train: TrainConfig::default(),
            arch: ArchKind::ToyFc,
            hidden: d.hidden,
            widths: d.widths,
            batchnorm: d.batchnorm,
            dropout: d.dropout,
            prefix: None,
            data: DataSource::Cifar10 {
                dir: PathBuf::from("data/cifar-10-batches-bin"),
            },
            grayscale: false,
            train_subset: None,
            test_subset: None,
            out_dir: PathBuf::from("runs"),
            eval_eps: Vec::new(),
            attack: lwat::analysis::AttackKind::FgsInput,
            attack_batch: 1,
            spectrum: false,
            spectrum_samples: 100,
            top_k: 50,
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{p}`")))
        })
        .collect()
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got `{v}`"
        ))),
    }
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" || v.is_empty() {
        Ok(None)
    } else {
        one(key, v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        // Synthetic keys are collected first so `data` can appear anywhere.
        let mut data_kind = String::from("cifar10");
        let mut dir = PathBuf::from("data/cifar-10-batches-bin");
        let (mut s_classes, mut s_per, mut s_side, mut s_spread) =
            (10usize, 100usize, 8usize, 0.5f64);
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("{k}: given twice")));
            }
            let t = &mut c.train;
            match k {
                "mode" => t.mode = v.parse().map_err(|e| Error::Config(format!("mode: {e}")))?,
                "eps" => t.eps = one(k, v)?,
                "alpha" => t.alpha = one(k, v)?,
                "epochs" => t.epochs = one(k, v)?,
                "batch" => t.batch = one(k, v)?,
                "lr" => t.lr.base = one(k, v)?,
                "lr_factor" => t.lr.factor = one(k, v)?,
                "lr_period" => t.lr.period = one(k, v)?,
                "momentum" => t.momentum = one(k, v)?,
                "weight_decay" => t.weight_decay = one(k, v)?,
                "seed" => t.seed = one(k, v)?,
                "eps_normalize" => t.eps_normalize = flag(k, v)?,
                "flip" => t.flip = flag(k, v)?,
                "drop_last" => {
                    t.drop_last = match v {
                        "auto" => None,
                        _ => Some(flag(k, v)?),
                    }
                }
                "eval_batch" => t.eval_batch = one(k, v)?,
                "arch" => {
                    c.arch = match v {
                        "toy-fc" => ArchKind::ToyFc,
                        "small-conv" => ArchKind::SmallConv,
                        _ => return Err(Error::Config(format!("arch: unknown `{v}`"))),
                    }
                }
                "hidden" => c.hidden = list(k, v)?,
                "widths" => c.widths = list(k, v)?,
                "batchnorm" => c.batchnorm = flag(k, v)?,
                "dropout" => c.dropout = one(k, v)?,
                "prefix" => c.prefix = opt(k, v)?,
                "data" => data_kind = v.to_string(),
                "data_dir" => dir = PathBuf::from(v),
                "synthetic_classes" => s_classes = one(k, v)?,
                "synthetic_per_class" => s_per = one(k, v)?,
                "synthetic_side" => s_side = one(k, v)?,
                "synthetic_spread" => s_spread = one(k, v)?,
                "grayscale" => c.grayscale = flag(k, v)?,
                "train_subset" => c.train_subset = opt(k, v)?,
                "test_subset" => c.test_subset = opt(k, v)?,
                "out_dir" => c.out_dir = PathBuf::from(v),
                "eval_eps" => c.eval_eps = list(k, v)?,
                "attack" => {
                    c.attack = v
                        .parse()
                        .map_err(|e| Error::Config(format!("attack: {e}")))?
                }
                "attack_batch" => c.attack_batch = one(k, v)?,
                "spectrum" => c.spectrum = flag(k, v)?,
                "spectrum_samples" => c.spectrum_samples = one(k, v)?,
                "top_k" => c.top_k = one(k, v)?,
                _ => return Err(Error::Config(format!("{k}: unknown key"))),
            }
        }
        c.data = match data_kind.as_str() {
            "cifar10" => DataSource::Cifar10 { dir },
            "synthetic" => DataSource::Synthetic {
                classes: s_classes,
                per_class: s_per,
                side: s_side,
                spread: s_spread,
            },
            other => return Err(Error::Config(format!("data: unknown source `{other}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(e) = self.eval_eps.first() {
            if *e != 0.0 {
                return Err(Error::Config("eval_eps: must start with 0".into()));
            }
        }
        if self.eval_eps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "eval_eps: must be strictly increasing".into(),
            ));
        }
        if self.attack_batch == 0 {
            return Err(Error::Config("attack_batch: must be positive".into()));
        }
        if self.spectrum && (self.spectrum_samples == 0 || self.top_k == 0) {
            return Err(Error::Config(
                "spectrum_samples and top_k must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout: must lie in [0, 1)".into()));
        }
        if let DataSource::Synthetic {
            classes,
            per_class,
            side,
            spread,
        } = &self.data
        {
            if *classes < 2 || *classes > side * side || *per_class == 0 || !(*spread >= 0.0) {
                return Err(Error::Config(
                    "synthetic_*: need 2 ≤ classes ≤ side², per_class > 0, spread ≥ 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form; every key, fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("mode", t.mode.to_string());
        kv("eps", t.eps.to_string());
        kv("alpha", t.alpha.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch.to_string());
        kv("lr", t.lr.base.to_string());
        kv("lr_factor", t.lr.factor.to_string());
        kv("lr_period", t.lr.period.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("seed", t.seed.to_string());
        kv("eps_normalize", t.eps_normalize.to_string());
        kv("flip", t.flip.to_string());
        kv(
            "drop_last",
            t.drop_last.map_or("auto".into(), |b| b.to_string()),
        );
        kv("eval_batch", t.eval_batch.to_string());
        kv("arch", self.arch.name().into());
        kv("hidden", join(&self.hidden));
        kv("widths", join(&self.widths));
        kv("batchnorm", self.batchnorm.to_string());
        kv("dropout", self.dropout.to_string());
        kv("prefix", show_opt(&self.prefix));
        match &self.data {
            DataSource::Cifar10 { dir } => {
                kv("data", "cifar10".into());
                kv("data_dir", dir.display().to_string());
            }
            DataSource::Synthetic {
                classes,
                per_class,
                side,
                spread,
            } => {
                kv("data", "synthetic".into());
                kv("synthetic_classes", classes.to_string());
                kv("synthetic_per_class", per_class.to_string());
                kv("synthetic_side", side.to_string());
                kv("synthetic_spread", spread.to_string());
            }
        }
        kv("grayscale", self.grayscale.to_string());
        kv("train_subset", show_opt(&self.train_subset));
        kv("test_subset", show_opt(&self.test_subset));
        kv("out_dir", self.out_dir.display().to_string());
        kv("eval_eps", join(&self.eval_eps));
        kv("attack", self.attack.name().into());
        kv("attack_batch", self.attack_batch.to_string());
        kv("spectrum", self.spectrum.to_string());
        kv("spectrum_samples", self.spectrum_samples.to_string());
        kv("top_k", self.top_k.to_string());
        s
    }

    /// SHA-256 of the canonical text, excluding `out_dir` so that moving the
    /// output tree does not change the identity. First 16 hex digits.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out_dir "))
            .map(|l| format!("{l}\n"))
            .collect();
        short_hash(&text)
    }

    pub fn arch_spec(&self, classes: usize, input: [usize; 3]) -> ArchSpec {
        let base = match self.arch {
            ArchKind::ToyFc => ArchSpec::toy_fc(classes, input),
            ArchKind::SmallConv => ArchSpec::small_conv(classes, input),
        };
        ArchSpec {
            hidden: self.hidden.clone(),
            widths: self.widths.clone(),
            batchnorm: self.batchnorm,
            dropout: self.dropout,
            gradacc_prefix: self.prefix,
            ..base
        }
    }
}

pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
