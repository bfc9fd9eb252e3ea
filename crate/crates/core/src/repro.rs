//! Desk-scale experiment recipes: the toy grayscale study, attack-strength
//! comparison, training-variant comparison and gradacc placement sweep.
//! Each recipe returns structured results plus a printable [`Table`].

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::analysis::{
    eps_sweep, singular_spectrum, AttackKind, AttackOptions, Cut, EpsSweepReport, SpectrumReport,
};
use crate::data::{compute_stats, load_cifar10_dir, normalize, to_grayscale, Dataset};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Model};
use crate::train::{train, LrSchedule, NoObserver, TrainConfig, TrainMode, TrainTrace};

/// A rectangular result table rendered as markdown or CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, header: &[&str]) -> Self {
        Table {
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n| {} |\n|", self.title, self.header.join(" | "));
        out.push_str(&"---|".repeat(self.header.len()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

/// Knobs shared by every recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Input-space ε for FGS training.
    pub eps_fgs: f64,
    /// Base ε for the layerwise modes; scaled by the gradient range when
    /// `eps_normalize` is set.
    pub eps_layer: f64,
    pub eps_normalize: bool,
    pub alpha: f64,
    /// ε values for adversarial evaluation; must start at 0.
    pub eval_eps: Vec<f64>,
    /// Test batch size for the cached attacks (1 is sample-to-sample).
    pub attack_batch: usize,
    /// Independent training runs executed concurrently.
    pub threads: usize,
}

impl Default for ReproSettings {
    fn default() -> Self {
        ReproSettings {
            epochs: 60,
            batch: 128,
            lr: LrSchedule::default(),
            seed: 0,
            eps_fgs: 0.1,
            eps_layer: 10.0,
            eps_normalize: true,
            alpha: 0.5,
            eval_eps: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            attack_batch: 1,
            threads: 1,
        }
    }
}

impl ReproSettings {
    /// Training config for `mode` at `seed`.
    pub fn config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        let layerwise = matches!(
            mode,
            TrainMode::FgsInter | TrainMode::OursOrig | TrainMode::OursJoint | TrainMode::Random
        );
        TrainConfig {
            mode,
            eps: match mode {
                TrainMode::Baseline => 0.0,
                TrainMode::FgsOrig => self.eps_fgs,
                _ => self.eps_layer,
            },
            alpha: self.alpha,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed,
            eps_normalize: layerwise && self.eps_normalize,
            ..TrainConfig::default()
        }
    }

    fn attack_options(&self) -> AttackOptions {
        AttackOptions {
            batch: self.attack_batch,
            bounds: None,
            eps_normalize: false,
        }
    }
}

/// Loads CIFAR-10 from `dir`, optionally converts to grayscale and keeps the
/// first `train_subset` training samples, then normalizes both splits with
/// the training statistics.
pub fn prepare_cifar10(
    dir: impl AsRef<Path>,
    grayscale: bool,
    train_subset: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let (mut tr, mut te) = load_cifar10_dir(dir)?;
    if grayscale {
        tr = to_grayscale(&tr)?;
        te = to_grayscale(&te)?;
    }
    if let Some(n) = train_subset {
        tr = tr.head(n.min(tr.len()))?;
    }
    let stats = compute_stats(&tr);
    Ok((normalize(&tr, &stats)?, normalize(&te, &stats)?))
}

/// A trained model with its trace and clean test accuracy.
#[derive(Debug, Clone)]
pub struct Trained {
    pub mode: TrainMode,
    pub seed: u64,
    pub model: Model,
    pub trace: TrainTrace,
    pub clean_accuracy: f64,
}

/// One training job.
#[derive(Debug, Clone)]
pub struct Job {
    pub arch: ArchSpec,
    pub cfg: TrainConfig,
}

pub fn run_job(job: &Job, train_ds: &Dataset, test: &Dataset) -> Result<Trained> {
    let mut model = Model::new(&job.arch, job.cfg.seed)?;
    let trace = train(&mut model, train_ds, None, &job.cfg, &mut NoObserver)?;
    let clean_accuracy = model.accuracy(&test.images, &test.labels, job.cfg.eval_batch)?;
    Ok(Trained {
        mode: job.cfg.mode,
        seed: job.cfg.seed,
        model,
        trace,
        clean_accuracy,
    })
}

/// Runs independent jobs on up to `threads` workers. Results keep job order
/// and do not depend on the thread count.
pub fn run_jobs(
    jobs: &[Job],
    train_ds: &Dataset,
    test: &Dataset,
    threads: usize,
) -> Result<Vec<Trained>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Trained>>>> =
        Mutex::new(jobs.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(job, train_ds, test);
                slots.lock().expect("job slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("job slot lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn arch_for(train_ds: &Dataset, conv: bool) -> ArchSpec {
    if conv {
        ArchSpec::small_conv(train_ds.classes, train_ds.sample_shape())
    } else {
        ArchSpec::toy_fc(train_ds.classes, train_ds.sample_shape())
    }
}

/// Baseline, FGS and layerwise-trained toy-fc models on the same data.
#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub baseline: Trained,
    pub fgs: Trained,
    pub ours: Trained,
}

impl ToyOutcome {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            "Toy fc network, grayscale images",
            &["model", "test accuracy (%)"],
        );
        for (name, r) in [
            ("baseline", &self.baseline),
            ("fgs", &self.fgs),
            ("ours", &self.ours),
        ] {
            t.push(vec![name.into(), pct(r.clean_accuracy)]);
        }
        t
    }

    /// Averaged encoder spectra for baseline, fgs and ours, in that order.
    pub fn spectra(
        &self,
        samples: &Dataset,
        top_k: usize,
        threads: usize,
    ) -> Result<[SpectrumReport; 3]> {
        let one = |r: &Trained, name: &str| {
            singular_spectrum(
                &r.model,
                &samples.images,
                top_k,
                Cut::Encoder,
                threads,
                name,
            )
        };
        Ok([
            one(&self.baseline, "baseline")?,
            one(&self.fgs, "fgs")?,
            one(&self.ours, "ours")?,
        ])
    }
}

pub fn toy(train_ds: &Dataset, test: &Dataset, s: &ReproSettings) -> Result<ToyOutcome> {
    let arch = arch_for(train_ds, false);
    let jobs: Vec<Job> = [TrainMode::Baseline, TrainMode::FgsOrig, TrainMode::OursOrig]
        .into_iter()
        .map(|m| Job {
            arch: arch.clone(),
            cfg: s.config(m, s.seed),
        })
        .collect();
    let mut out = run_jobs(&jobs, train_ds, test, s.threads)?.into_iter();
    Ok(ToyOutcome {
        baseline: out.next().expect("three runs"),
        fgs: out.next().expect("three runs"),
        ours: out.next().expect("three runs"),
    })
}

/// ε-sweeps of one undefended model under each attack.
#[derive(Debug, Clone)]
pub struct CompareAdvOutcome {
    pub model: Trained,
    pub fgs_input: EpsSweepReport,
    pub layerwise: EpsSweepReport,
    pub input_only: EpsSweepReport,
}

impl CompareAdvOutcome {
    pub fn table(&self) -> Table {
        let eps: Vec<String> = self
            .fgs_input
            .rows
            .iter()
            .map(|r| format!("eps={}", r.eps))
            .collect();
        let mut header = vec!["attack"];
        header.extend(eps.iter().map(|s| s.as_str()));
        let mut t = Table::new("Attack strength on an undefended conv network", &header);
        for (name, r) in [
            ("fgs (input)", &self.fgs_input),
            ("ours (all layers)", &self.layerwise),
            ("ours (input only)", &self.input_only),
        ] {
            let mut row = vec![name.to_string()];
            row.extend(r.rows.iter().map(|x| pct(x.accuracy)));
            t.push(row);
        }
        t
    }
}

/// Sweeps an already trained undefended model with every attack.
pub fn compare_adv_model(
    model: Trained,
    test: &Dataset,
    s: &ReproSettings,
) -> Result<CompareAdvOutcome> {
    let opts = s.attack_options();
    let sweep = |kind| eps_sweep(&model.model, test, kind, &s.eval_eps, &opts, "baseline");
    Ok(CompareAdvOutcome {
        fgs_input: sweep(AttackKind::FgsInput)?,
        layerwise: sweep(AttackKind::CachedLayerwise)?,
        input_only: sweep(AttackKind::CachedInputOnly)?,
        model,
    })
}

pub fn compare_adv(
    train_ds: &Dataset,
    test: &Dataset,
    s: &ReproSettings,
) -> Result<CompareAdvOutcome> {
    let job = Job {
        arch: arch_for(train_ds, true),
        cfg: s.config(TrainMode::Baseline, s.seed),
    };
    let model = run_job(&job, train_ds, test)?;
    compare_adv_model(model, test, s)
}

/// FGS-input ε-sweeps of models trained with each variant.
#[derive(Debug, Clone)]
pub struct VariantsOutcome {
    pub runs: Vec<(Trained, EpsSweepReport)>,
}

impl VariantsOutcome {
    pub const MODES: [TrainMode; 5] = [
        TrainMode::Baseline,
        TrainMode::FgsOrig,
        TrainMode::FgsInter,
        TrainMode::OursOrig,
        TrainMode::OursJoint,
    ];

    pub fn sweep(&self, mode: TrainMode) -> Option<&EpsSweepReport> {
        self.runs
            .iter()
            .find(|(t, _)| t.mode == mode)
            .map(|(_, r)| r)
    }

    pub fn table(&self) -> Table {
        let eps: Vec<String> = self
            .runs
            .first()
            .map(|(_, r)| r.rows.iter().map(|x| format!("eps={}", x.eps)).collect())
            .unwrap_or_default();
        let mut header = vec!["training"];
        header.extend(eps.iter().map(|s| s.as_str()));
        let mut t = Table::new("Training variants under FGS test perturbations", &header);
        for (run, rep) in &self.runs {
            let mut row = vec![run.mode.name().to_string()];
            row.extend(rep.rows.iter().map(|x| pct(x.accuracy)));
            t.push(row);
        }
        t
    }
}

pub fn variants(train_ds: &Dataset, test: &Dataset, s: &ReproSettings) -> Result<VariantsOutcome> {
    let arch = arch_for(train_ds, true);
    let jobs: Vec<Job> = VariantsOutcome::MODES
        .into_iter()
        .map(|m| Job {
            arch: arch.clone(),
            cfg: s.config(m, s.seed),
        })
        .collect();
    let trained = run_jobs(&jobs, train_ds, test, s.threads)?;
    let opts = s.attack_options();
    let runs = trained
        .into_iter()
        .map(|t| {
            let rep = eps_sweep(
                &t.model,
                test,
                AttackKind::FgsInput,
                &s.eval_eps,
                &opts,
                t.mode.name(),
            )?;
            Ok((t, rep))
        })
        .collect::<Result<_>>()?;
    Ok(VariantsOutcome { runs })
}

/// Clean accuracy of ours-orig training with gradacc layers in the first
/// `depth` conv blocks, per seed.
#[derive(Debug, Clone)]
pub struct LayerSweepOutcome {
    /// `(depth, accuracies by seed)` for depth 1..=blocks.
    pub depths: Vec<(usize, Vec<f64>)>,
}

impl LayerSweepOutcome {
    pub fn mean(&self, depth: usize) -> Option<f64> {
        let (_, accs) = self.depths.iter().find(|(d, _)| *d == depth)?;
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Mean accuracy of the deepest placement minus the shallowest.
    pub fn gain(&self) -> Option<f64> {
        let lo = self.depths.first()?.0;
        let hi = self.depths.last()?.0;
        Some(self.mean(hi)? - self.mean(lo)?)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(
            "Gradient-accumulation layers added incrementally",
            &["layers", "mean test accuracy (%)", "per seed"],
        );
        for (d, accs) in &self.depths {
            let per: Vec<String> = accs.iter().map(|a| pct(*a)).collect();
            t.push(vec![
                d.to_string(),
                pct(self.mean(*d).unwrap_or(0.0)),
                per.join(" "),
            ]);
        }
        t
    }
}

pub fn layer_sweep(
    train_ds: &Dataset,
    test: &Dataset,
    s: &ReproSettings,
    seeds: &[u64],
) -> Result<LayerSweepOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("layer sweep needs at least one seed".into()));
    }
    let base = arch_for(train_ds, true);
    let blocks = base.eligible_blocks();
    let mut jobs = Vec::new();
    for d in 1..=blocks {
        for &seed in seeds {
            jobs.push(Job {
                arch: base.clone().with_prefix(d),
                cfg: s.config(TrainMode::OursOrig, seed),
            });
        }
    }
    let trained = run_jobs(&jobs, train_ds, test, s.threads)?;
    let depths = trained
        .chunks(seeds.len())
        .enumerate()
        .map(|(i, runs)| (i + 1, runs.iter().map(|r| r.clean_accuracy).collect()))
        .collect();
    Ok(LayerSweepOutcome { depths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn small() -> ReproSettings {
        ReproSettings {
            epochs: 2,
            batch: 8,
            eval_eps: vec![0.0, 0.1],
            attack_batch: 4,
            ..Default::default()
        }
    }

    #[test]
    fn table_rendering() {
        let mut t = Table::new("T", &["a", "b"]);
        t.push(vec!["1".into(), "2".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,2\n");
        assert_eq!(
            t.to_markdown(),
            "### T\n\n| a | b |\n|---|---|\n| 1 | 2 |\n"
        );
    }

    #[test]
    fn parallel_jobs_match_serial() {
        let ds = synthetic_blobs(3, 8, 6, 0.3, 1).unwrap();
        let s = small();
        let arch = ArchSpec::toy_fc(3, [1, 1, 6]).with_hidden(vec![8, 4]);
        let jobs: Vec<Job> = [TrainMode::Baseline, TrainMode::OursOrig, TrainMode::FgsOrig]
            .into_iter()
            .map(|m| Job {
                arch: arch.clone(),
                cfg: s.config(m, 3),
            })
            .collect();
        let a = run_jobs(&jobs, &ds, &ds, 1).unwrap();
        let b = run_jobs(&jobs, &ds, &ds, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mode, y.mode);
            assert!(x.trace.same_losses(&y.trace));
        }
    }

    #[test]
    fn layer_sweep_shapes() {
        let ds = synthetic_blobs(2, 8, 16, 0.3, 2).unwrap();
        let ds = Dataset::new(
            ds.images.reshape(vec![16, 1, 4, 4]).unwrap(),
            ds.labels.clone(),
            2,
            ds.split,
        )
        .unwrap();
        let mut s = small();
        s.epochs = 1;
        let out = layer_sweep(&ds, &ds, &s, &[0, 1]).unwrap();
        assert_eq!(
            out.depths.len(),
            ArchSpec::small_conv(2, [1, 4, 4]).eligible_blocks()
        );
        assert!(out.depths.iter().all(|(_, a)| a.len() == 2));
        assert!(out.gain().is_some());
    }
}
