use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use lwat::analysis::{
    eps_sweep, random_bound_checks, singular_spectrum, AttackKind, AttackOptions, Cut,
};
use lwat::data::{
    compute_stats, load_cifar10_dir, normalize, synthetic_blobs, to_grayscale, Dataset, Split,
};
use lwat::nn::{Mode, Model};
use lwat::repro::{self, ReproSettings, Table};
use lwat::train::{train as train_model, EpochRecord, TrainObserver};
use lwat::{Error, Result};
use serde::Serialize;

use crate::config::{short_hash, DataSource, ExperimentConfig};
use crate::run::RunDir;
use crate::Common;

const SYNTHETIC_TRAIN_SEED: u64 = 0x7472_6169;
const SYNTHETIC_TEST_SEED: u64 = 0x7465_7374;

fn synthetic(
    classes: usize,
    per_class: usize,
    side: usize,
    spread: f64,
    split: Split,
) -> Result<Dataset> {
    let seed = match split {
        Split::Train => SYNTHETIC_TRAIN_SEED,
        Split::Test => SYNTHETIC_TEST_SEED,
    };
    let b = synthetic_blobs(classes, per_class, side * side, spread, seed)?;
    let images = b.images.reshape(vec![b.len(), 1, side, side])?;
    Dataset::new(images, b.labels, classes, split)
}

/// Train and test splits as described by `cfg`, normalized with training
/// statistics for real images.
fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut tr, mut te) = match &cfg.data {
        DataSource::Cifar10 { dir } => {
            let (tr, te) = load_cifar10_dir(dir)?;
            if cfg.grayscale {
                (to_grayscale(&tr)?, to_grayscale(&te)?)
            } else {
                (tr, te)
            }
        }
        DataSource::Synthetic {
            classes,
            per_class,
            side,
            spread,
        } => (
            synthetic(*classes, *per_class, *side, *spread, Split::Train)?,
            synthetic(
                *classes,
                (*per_class / 4).max(1),
                *side,
                *spread,
                Split::Test,
            )?,
        ),
    };
    if let Some(n) = cfg.train_subset {
        tr = tr.head(n.min(tr.len()))?;
    }
    if let Some(n) = cfg.test_subset {
        te = te.head(n.min(te.len()))?;
    }
    if matches!(cfg.data, DataSource::Cifar10 { .. }) {
        let stats = compute_stats(&tr);
        tr = normalize(&tr, &stats)?;
        te = normalize(&te, &stats)?;
    }
    Ok((tr, te))
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text)
}

/// Config beside a checkpoint named `model-<hash>.lwck`.
fn sibling_config(checkpoint: &Path) -> Result<PathBuf> {
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("model-"))
        .ok_or_else(|| {
            Error::Config(format!(
                "cannot infer the config for {}; pass --config",
                checkpoint.display()
            ))
        })?;
    Ok(checkpoint.with_file_name(format!("config-{stem}.txt")))
}

struct Loaded {
    cfg: ExperimentConfig,
    model: Model,
    test: Dataset,
    out: PathBuf,
}

fn load_checkpoint(checkpoint: &Path, config: Option<&Path>, common: &Common) -> Result<Loaded> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => sibling_config(checkpoint)?,
    };
    let cfg = read_config(&cfg_path)?;
    let mut model = Model::load(checkpoint)?;
    model.set_mode(Mode::Eval);
    let (_, test) = load_data(&cfg)?;
    let out = match &common.out {
        Some(o) => o.clone(),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    Ok(Loaded {
        cfg,
        model,
        test,
        out,
    })
}

fn note(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

struct EpochLog;

impl TrainObserver for EpochLog {
    fn on_epoch(&mut self, r: &EpochRecord) {
        let test = r
            .test_err
            .map_or(String::new(), |e| format!(" test_err {e:.2}%"));
        note(format!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  train_err {:.2}%{test}  ({:.1}s)",
            r.epoch, r.lr, r.train_loss, r.train_err, r.wall_secs
        ));
    }
}

pub fn train(config: &Path, common: &Common) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let hash = cfg.hash();
    let mut run = RunDir::new(cfg.out_dir.join(&hash), "train", hash.clone());
    if run.is_complete() && !common.force {
        note(format!("up to date: {}", run.dir.display()));
        return Ok(());
    }

    let (tr, te) = load_data(&cfg)?;
    let arch = cfg.arch_spec(tr.classes, tr.sample_shape());
    let mut model = Model::new(&arch, cfg.train.seed)?;
    note(format!(
        "training {} ({} parameters) on {} samples, mode {}",
        arch,
        model.num_params(),
        tr.len(),
        cfg.train.mode
    ));
    let trace = train_model(&mut model, &tr, Some(&te), &cfg.train, &mut EpochLog)?;

    run.write("config", "txt", cfg.to_text())?;
    let ckpt = run.path("model", "lwck");
    model.save(&ckpt)?;
    run.record(&ckpt);
    run.write("trace", "csv", trace.to_csv())?;
    run.write(
        "trace",
        "json",
        serde_json::to_string_pretty(&trace).expect("trace serializes"),
    )?;

    if !cfg.eval_eps.is_empty() {
        let opts = AttackOptions {
            batch: cfg.attack_batch,
            ..Default::default()
        };
        let rep = eps_sweep(&model, &te, cfg.attack, &cfg.eval_eps, &opts, &hash)?;
        run.write("eval", "json", rep.to_json())?;
        run.write("eval", "csv", rep.to_csv())?;
    }
    if cfg.spectrum {
        let n = cfg.spectrum_samples.min(te.len());
        let rep = singular_spectrum(
            &model,
            &te.images.slice_batch(0, n)?,
            cfg.top_k,
            Cut::Encoder,
            common.threads,
            &hash,
        )?;
        run.write("spectrum", "json", rep.to_json())?;
        run.write("spectrum", "csv", rep.to_csv())?;
    }
    if let Some(err) = trace.final_test_err() {
        println!("final test accuracy: {:.2}%", 100.0 - err);
    }
    println!("{}", run.dir.display());
    run.finish(cfg.train.seed, common.threads)
}

pub fn eval(
    checkpoint: &Path,
    config: Option<&Path>,
    attack: &str,
    eps: &[f64],
    batch: usize,
    common: &Common,
) -> Result<()> {
    let attack: AttackKind = attack.parse()?;
    let ld = load_checkpoint(checkpoint, config, common)?;
    let eps_text: Vec<String> = eps.iter().map(f64::to_string).collect();
    let hash = short_hash(&format!(
        "{}eval attack={} eps={} batch={batch}\n",
        ld.cfg.to_text(),
        attack.name(),
        eps_text.join(",")
    ));
    let mut run = RunDir::new(ld.out, "eval", hash);
    if run.is_complete() && !common.force {
        note(format!("up to date: {}", run.dir.display()));
        return Ok(());
    }
    let opts = AttackOptions {
        batch,
        ..Default::default()
    };
    let rep = eps_sweep(&ld.model, &ld.test, attack, eps, &opts, &ld.cfg.hash())?;
    for r in &rep.rows {
        println!("eps {:<6} accuracy {:.2}%", r.eps, r.accuracy);
    }
    run.write("eval", "json", rep.to_json())?;
    run.write("eval", "csv", rep.to_csv())?;
    run.finish(common.seed.unwrap_or(ld.cfg.train.seed), common.threads)
}

pub fn spectrum(
    checkpoint: &Path,
    config: Option<&Path>,
    samples: usize,
    top_k: usize,
    common: &Common,
) -> Result<()> {
    if samples == 0 || top_k == 0 {
        return Err(Error::Config(
            "--samples and --top-k must be positive".into(),
        ));
    }
    let ld = load_checkpoint(checkpoint, config, common)?;
    let hash = short_hash(&format!(
        "{}spectrum samples={samples} top_k={top_k}\n",
        ld.cfg.to_text()
    ));
    let mut run = RunDir::new(ld.out, "spectrum", hash);
    if run.is_complete() && !common.force {
        note(format!("up to date: {}", run.dir.display()));
        return Ok(());
    }
    let n = samples.min(ld.test.len());
    let rep = singular_spectrum(
        &ld.model,
        &ld.test.images.slice_batch(0, n)?,
        top_k,
        Cut::Encoder,
        common.threads,
        &ld.cfg.hash(),
    )?;
    for r in rep.rows.iter().take(10) {
        println!("sigma[{}] = {:.6}", r.index, r.sigma);
    }
    run.write("spectrum", "json", rep.to_json())?;
    run.write("spectrum", "csv", rep.to_csv())?;
    run.finish(common.seed.unwrap_or(ld.cfg.train.seed), common.threads)
}

#[derive(Debug, Serialize)]
struct BoundRow {
    trial: usize,
    lhs: f64,
    rhs: f64,
    ok: bool,
}

#[derive(Debug, Serialize)]
struct BoundParams {
    trials: usize,
    seed: u64,
    passed: usize,
    max_ratio: f64,
}

#[derive(Debug, Serialize)]
struct BoundReport {
    kind: &'static str,
    model: String,
    params: BoundParams,
    rows: Vec<BoundRow>,
}

pub fn bound(
    checkpoint: &Path,
    config: Option<&Path>,
    trials: usize,
    common: &Common,
) -> Result<()> {
    let ld = load_checkpoint(checkpoint, config, common)?;
    let seed = common.seed.unwrap_or(ld.cfg.train.seed);
    let hash = short_hash(&format!(
        "{}bound trials={trials} seed={seed}\n",
        ld.cfg.to_text()
    ));
    let mut run = RunDir::new(ld.out, "bound", hash);
    if run.is_complete() && !common.force {
        note(format!("up to date: {}", run.dir.display()));
        return Ok(());
    }
    let checks = random_bound_checks(&ld.model, &ld.test.images, trials, seed, Cut::Encoder)?;
    let rows: Vec<BoundRow> = checks
        .iter()
        .enumerate()
        .map(|(trial, c)| BoundRow {
            trial,
            lhs: c.lhs,
            rhs: c.rhs,
            ok: c.ok,
        })
        .collect();
    let passed = rows.iter().filter(|r| r.ok).count();
    let max_ratio = rows
        .iter()
        .filter(|r| r.rhs > 0.0)
        .map(|r| r.lhs / r.rhs)
        .fold(0.0, f64::max);
    println!("{passed}/{trials} checks passed, max lhs/rhs = {max_ratio:.6}");
    let report = BoundReport {
        kind: "bound",
        model: ld.cfg.hash(),
        params: BoundParams {
            trials,
            seed,
            passed,
            max_ratio,
        },
        rows,
    };
    let mut csv = String::from("trial,lhs,rhs,ok\n");
    for r in &report.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.trial, r.lhs, r.rhs, r.ok));
    }
    run.write(
        "bound",
        "json",
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    run.write("bound", "csv", csv)?;
    run.finish(seed, common.threads)?;
    if passed < trials {
        return Err(Error::Numeric(format!(
            "bound violated in {} of {trials} trials",
            trials - passed
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReproTable {
    Toy,
    CompareAdv,
    Variants,
    LayerSweep,
}

impl ReproTable {
    fn name(self) -> &'static str {
        match self {
            ReproTable::Toy => "toy",
            ReproTable::CompareAdv => "compare-adv",
            ReproTable::Variants => "variants",
            ReproTable::LayerSweep => "layer-sweep",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReproArgs {
    #[arg(value_enum)]
    pub table: ReproTable,
    /// CIFAR-10 binary directory; defaults to $LWAT_CIFAR10_DIR, then
    /// `data/cifar-10-batches-bin`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Run on small synthetic images instead of CIFAR-10.
    #[arg(long)]
    pub synthetic: bool,
    /// Training epochs; 60 for `toy`, 20 otherwise.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Keep only the first N training samples.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Keep only the first N test samples.
    #[arg(long)]
    pub test_subset: Option<usize>,
    /// Seeds for the layer sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub eps_fgs: f64,
    #[arg(long, default_value_t = 10.0)]
    pub eps_layer: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15,0.2")]
    pub eval_eps: Vec<f64>,
    /// Test batch size for the cached attacks.
    #[arg(long, default_value_t = 1)]
    pub attack_batch: usize,
    /// Test samples averaged into each spectrum (`toy` only).
    #[arg(long, default_value_t = 100)]
    pub spectrum_samples: usize,
}

impl ReproArgs {
    fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("LWAT_CIFAR10_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"))
    }

    fn settings(&self, common: &Common) -> ReproSettings {
        ReproSettings {
            epochs: self.epochs.unwrap_or(match self.table {
                ReproTable::Toy => 60,
                _ => 20,
            }),
            batch: self.batch,
            seed: common.seed.unwrap_or(0),
            eps_fgs: self.eps_fgs,
            eps_layer: self.eps_layer,
            eval_eps: self.eval_eps.clone(),
            attack_batch: self.attack_batch,
            threads: common.threads,
            ..ReproSettings::default()
        }
    }

    fn key(&self, s: &ReproSettings) -> String {
        let source = if self.synthetic {
            "synthetic".to_string()
        } else {
            self.data_dir().display().to_string()
        };
        format!(
            "repro {} data={source} subset={:?} test_subset={:?} seeds={:?} settings={:?}\n",
            self.table.name(),
            self.subset,
            self.test_subset,
            self.seeds,
            ReproSettings {
                threads: 1,
                ..s.clone()
            },
        ) + &format!("spectrum_samples={}\n", self.spectrum_samples)
    }

    fn data(&self) -> Result<(Dataset, Dataset)> {
        let (mut tr, mut te) = if self.synthetic {
            (
                synthetic(4, 64, 8, 0.8, Split::Train)?,
                synthetic(4, 32, 8, 0.8, Split::Test)?,
            )
        } else {
            let (tr, te) = load_cifar10_dir(self.data_dir())?;
            if self.table == ReproTable::Toy {
                (to_grayscale(&tr)?, to_grayscale(&te)?)
            } else {
                (tr, te)
            }
        };
        if let Some(n) = self.subset {
            tr = tr.head(n.min(tr.len()))?;
        }
        if let Some(n) = self.test_subset {
            te = te.head(n.min(te.len()))?;
        }
        if !self.synthetic {
            let stats = compute_stats(&tr);
            tr = normalize(&tr, &stats)?;
            te = normalize(&te, &stats)?;
        }
        Ok((tr, te))
    }
}

pub fn repro(args: &ReproArgs, common: &Common) -> Result<()> {
    let s = args.settings(common);
    if s.eval_eps.first() != Some(&0.0) {
        return Err(Error::Config("--eval-eps must start with 0".into()));
    }
    let hash = short_hash(&args.key(&s));
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let name = args.table.name();
    let mut run = RunDir::new(
        out.join(format!("repro-{name}-{hash}")),
        &format!("repro-{name}"),
        hash,
    );
    if run.is_complete() && !common.force {
        note(format!("up to date: {}", run.dir.display()));
        return Ok(());
    }
    let (tr, te) = args.data()?;
    note(format!(
        "{name}: {} train / {} test samples, {} epochs",
        tr.len(),
        te.len(),
        s.epochs
    ));
    let table: Table = match args.table {
        ReproTable::Toy => {
            let out = repro::toy(&tr, &te, &s)?;
            let n = args.spectrum_samples.min(te.len());
            let probe = te.head(n)?;
            for rep in out.spectra(&probe, 50, common.threads)? {
                run.write(&format!("spectrum-{}", rep.model), "json", rep.to_json())?;
                run.write(&format!("spectrum-{}", rep.model), "csv", rep.to_csv())?;
            }
            for t in [&out.baseline, &out.fgs, &out.ours] {
                run.write(&format!("trace-{}", t.mode), "csv", t.trace.to_csv())?;
            }
            out.table()
        }
        ReproTable::CompareAdv => {
            let out = repro::compare_adv(&tr, &te, &s)?;
            for rep in [&out.fgs_input, &out.layerwise, &out.input_only] {
                let stem = format!("eval-{}", rep.params.attack.name());
                run.write(&stem, "json", rep.to_json())?;
                run.write(&stem, "csv", rep.to_csv())?;
            }
            out.table()
        }
        ReproTable::Variants => {
            let out = repro::variants(&tr, &te, &s)?;
            for (t, rep) in &out.runs {
                let stem = format!("eval-{}", t.mode);
                run.write(&stem, "json", rep.to_json())?;
                run.write(&stem, "csv", rep.to_csv())?;
            }
            out.table()
        }
        ReproTable::LayerSweep => repro::layer_sweep(&tr, &te, &s, &args.seeds)?.table(),
    };
    let md = table.to_markdown();
    println!("{md}");
    run.write(name, "md", md)?;
    run.write(name, "csv", table.to_csv())?;
    run.finish(s.seed, common.threads)
}
