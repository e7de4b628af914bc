//! The alternating correction loop: correct labels on the current
//! embeddings, select clean samples, retrain the encoder, repeat.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{harden, one_hot, Dataset, FeatureMatrix, HardLabelVector, SoftLabelMatrix};
use crate::error::{Result, StctError};
use crate::io::{load_labels, load_matrix, save_labels, save_matrix, save_model, write_jsonl, KvConfig};
use crate::meta::{run_nmc, EtaUnits, NmcConfig, NmcRound, StopReason};
use crate::noise::{cyclic_flip_map, inject_noise, make_asymmetric_t, make_symmetric_t, Convention, NoiseTransitionMatrix};
use crate::numerics::Ridge;
use crate::select::{default_k, knn_pseudo_labels, select_clean, SelectionConfig};
use crate::srl::{predict, train_srl, SrlConfig, SrlModel, UnlabeledTarget};
use crate::synth::{gaussian_mixture, MixtureSpec, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseType,
    pub rate: f64,
    pub convention: Convention,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseType::None,
            rate: 0.0,
            convention: Convention::IncludeSelf,
            seed: 0,
        }
    }

    pub fn symmetric(rate: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseType::Symmetric,
            rate,
            convention: Convention::IncludeSelf,
            seed,
        }
    }

    pub fn transition(&self, classes: usize) -> Result<Option<NoiseTransitionMatrix>> {
        match self.kind {
            NoiseType::None => Ok(None),
            NoiseType::Symmetric => make_symmetric_t(classes, self.rate, self.convention).map(Some),
            NoiseType::Asymmetric => make_asymmetric_t(classes, self.rate, &cyclic_flip_map(classes)).map(Some),
        }
    }
}

/// Where training (and optionally held-out) data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: MixtureSpec,
        test_n: usize,
        test_seed: u64,
    },
    /// A directory written by [`save_dataset_dir`].
    Dir(PathBuf),
}

/// Supplies the initial embeddings the first correction round works on.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderProvider {
    Identity,
    /// Gaussian projection to `width` dimensions, scaled by `1/√width`.
    RandomProjection { width: usize, seed: u64 },
    /// Embeddings read from matrix files, row-aligned with the data.
    Precomputed { train: PathBuf, test: Option<PathBuf> },
}

impl EncoderProvider {
    fn project(width: usize, seed: u64, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (width as f64).sqrt();
        Array2::from_shape_fn((d, width), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * s
        })
    }

    /// Embeddings for the training rows and, if given, the held-out rows.
    pub fn embed(&self, train: &FeatureMatrix, test: Option<&FeatureMatrix>) -> Result<(FeatureMatrix, Option<FeatureMatrix>)> {
        match self {
            EncoderProvider::Identity => Ok((train.clone(), test.cloned())),
            EncoderProvider::RandomProjection { width, seed } => {
                if *width == 0 {
                    return Err(StctError::input("projection width must be positive"));
                }
                let r = Self::project(*width, *seed, train.d());
                let tr = FeatureMatrix::new(train.view().dot(&r))?;
                let te = test.map(|t| FeatureMatrix::new(t.view().dot(&r))).transpose()?;
                Ok((tr, te))
            }
            EncoderProvider::Precomputed { train: tp, test: sp } => {
                let tr = FeatureMatrix::new(load_matrix(tp)?)?;
                if tr.n() != train.n() {
                    return Err(StctError::input(format!(
                        "precomputed embeddings have {} rows for {} samples",
                        tr.n(),
                        train.n()
                    )));
                }
                let te = match (sp, test) {
                    (Some(p), Some(t)) => {
                        let e = FeatureMatrix::new(load_matrix(p)?)?;
                        if e.n() != t.n() || e.d() != tr.d() {
                            return Err(StctError::input("held-out embeddings do not match held-out data"));
                        }
                        Some(e)
                    }
                    _ => None,
                };
                Ok((tr, te))
            }
        }
    }
}

/// Labels the next epoch's correction starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelCarry {
    /// One-hot of the hardened corrected labels.
    #[default]
    Hardened,
    /// Corrected soft labels as they are. Their scale grows from epoch
    /// to epoch.
    Soft,
    /// The original noisy labels every epoch.
    Noisy,
}

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Correct labels on the initial embeddings and fit the classifier
    /// with the supervised loss on all corrected labels.
    NoSrl,
    /// Select and train on the raw noisy labels.
    NoNmc,
    /// Drop the selected labeled set (the trainer refuses to run).
    NoLabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub noise: NoiseSpec,
    pub nmc: NmcConfig,
    pub mu: f64,
    /// Neighbors for the vote; `None` picks [`default_k`].
    pub k: Option<usize>,
    pub srl: SrlConfig,
    pub max_epoch: usize,
    pub carry: LabelCarry,
    pub encoder: EncoderProvider,
    pub ablation: Ablation,
    pub out: Option<PathBuf>,
    /// Record wall time per epoch. Off by default so reports are
    /// byte-identical across reruns.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic {
                spec: MixtureSpec::standard_benchmark(),
                test_n: 2000,
                test_seed: 18,
            },
            noise: NoiseSpec::symmetric(0.5, 1),
            nmc: NmcConfig::default(),
            mu: 0.1,
            k: None,
            srl: SrlConfig::default(),
            max_epoch: 10,
            carry: LabelCarry::Hardened,
            encoder: EncoderProvider::Identity,
            ablation: Ablation::None,
            out: None,
            timing: false,
        }
    }
}

fn parse_enum<T>(c: &KvConfig, key: &str, default: T, table: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    match c.raw(key) {
        None => Ok(default),
        Some(v) => table
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
                StctError::Config(format!("{key} = {v:?}; expected one of {}", names.join(", ")))
            }),
    }
}

fn parse_ridge(v: &str) -> Result<Ridge> {
    let bad = || StctError::Config(format!("nmc.ridge = {v:?}; expected relative:<k> or absolute:<value>"));
    let (kind, num) = v.split_once(':').ok_or_else(bad)?;
    let x: f64 = num.trim().parse().map_err(|_| bad())?;
    match kind.trim() {
        "relative" => Ok(Ridge::Relative(x)),
        "absolute" => Ok(Ridge::Absolute(x)),
        _ => Err(bad()),
    }
}

/// Mixture keys shared by run configs and `gen` spec files.
pub fn mixture_from_kv(c: &KvConfig, base: &MixtureSpec) -> Result<MixtureSpec> {
    let classes = c.get_or("classes", base.classes)?;
    let balance = match c.get_list::<f64>("balance")? {
        Some(b) => b,
        None if classes == base.classes => base.balance.clone(),
        None => vec![1.0 / classes as f64; classes],
    };
    let placement = match c.raw("placement") {
        None | Some("axes") => Placement::Axes,
        Some("random") => Placement::RandomDirections(c.get_or("placement_seed", 0)?),
        Some(v) => return Err(StctError::Config(format!("placement = {v:?}; expected axes or random"))),
    };
    let spec = MixtureSpec {
        classes,
        n: c.get_or("n", base.n)?,
        d: c.get_or("d", base.d)?,
        sep: c.get_or("sep", base.sep)?,
        balance,
        seed: c.get_or("seed", base.seed)?,
        placement,
    };
    spec.validate().map_err(|e| StctError::Config(e.to_string()))?;
    Ok(spec)
}

/// `nmc.*` keys.
pub fn nmc_from_kv(c: &KvConfig) -> Result<NmcConfig> {
    let nd = NmcConfig::default();
    Ok(NmcConfig {
        r: c.get_or("nmc.r", nd.r)?,
        eta: c.get_or("nmc.eta", nd.eta)?,
        eta_units: parse_enum(
            c,
            "nmc.eta_units",
            nd.eta_units,
            &[("per_sample", EtaUnits::PerSample), ("raw", EtaUnits::Raw)],
        )?,
        beta: c.get_or("nmc.beta", nd.beta)?,
        delta: c.get_or("nmc.delta", nd.delta)?,
        steps_per_split: c.get_or("nmc.steps", nd.steps_per_split)?,
        ridge: c.raw("nmc.ridge").map(parse_ridge).transpose()?.unwrap_or(nd.ridge),
        center: c.get_or("nmc.center", nd.center)?,
        step_cap: match c.raw("nmc.step_cap") {
            None => nd.step_cap,
            Some("none") => None,
            Some(_) => Some(c.get("nmc.step_cap")?.expect("present")),
        },
        seed: c.get_or("nmc.seed", nd.seed)?,
    })
}

/// `encoder` and `encoder.*` keys; relative paths resolve against `base`.
pub fn encoder_from_kv(c: &KvConfig, base: &Path) -> Result<EncoderProvider> {
    let resolve = |p: &str| base.join(p);
    Ok(match c.raw("encoder").unwrap_or("identity") {
        "identity" => EncoderProvider::Identity,
        "random_projection" => EncoderProvider::RandomProjection {
            width: c.get_or("encoder.width", 32)?,
            seed: c.get_or("encoder.seed", 0)?,
        },
        "precomputed" => EncoderProvider::Precomputed {
            train: resolve(
                c.raw("encoder.train")
                    .ok_or_else(|| StctError::Config("precomputed encoder needs encoder.train".into()))?,
            ),
            test: c.raw("encoder.test").map(resolve),
        },
        v => {
            return Err(StctError::Config(format!(
                "encoder = {v:?}; expected identity, random_projection or precomputed"
            )))
        }
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvConfig::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&kv, base)
    }

    /// Reads every known key; relative paths resolve against `base`.
    pub fn from_kv(c: &KvConfig, base: &Path) -> Result<Self> {
        let d = RunConfig::default();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let data = match c.raw("data").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                spec: mixture_from_kv(c, &MixtureSpec::standard_benchmark())?,
                test_n: c.get_or("test_n", 2000)?,
                test_seed: c.get_or("test_seed", 18)?,
            },
            dir => DataSource::Dir(resolve(dir)),
        };
        let noise = NoiseSpec {
            kind: parse_enum(
                c,
                "noise",
                d.noise.kind,
                &[("none", NoiseType::None), ("sym", NoiseType::Symmetric), ("asym", NoiseType::Asymmetric)],
            )?,
            rate: c.get_or("noise_rate", d.noise.rate)?,
            convention: c.get_or("convention", d.noise.convention)?,
            seed: c.get_or("noise_seed", d.noise.seed)?,
        };
        let nmc = nmc_from_kv(c)?;
        let sd = SrlConfig::default();
        let srl = SrlConfig {
            lambda: c.get_or("srl.lambda", sd.lambda)?,
            tau: c.get_or("srl.tau", sd.tau)?,
            anchors: c.get_or("srl.anchors", sd.anchors)?,
            lr: c.get_or("srl.lr", sd.lr)?,
            momentum: c.get_or("srl.momentum", sd.momentum)?,
            batch_labeled: c.get_or("srl.batch_labeled", sd.batch_labeled)?,
            batch_unlabeled: c.get_or("srl.batch_unlabeled", sd.batch_unlabeled)?,
            epochs: c.get_or("srl.epochs", sd.epochs)?,
            sigma_w: c.get_or("srl.sigma_w", sd.sigma_w)?,
            sigma_s: c.get_or("srl.sigma_s", sd.sigma_s)?,
            drop_p: c.get_or("srl.drop_p", sd.drop_p)?,
            target: parse_enum(
                c,
                "srl.target",
                sd.target,
                &[("soft", UnlabeledTarget::Soft), ("hard", UnlabeledTarget::Hard)],
            )?,
            use_unlabeled: c.get_or("srl.use_unlabeled", sd.use_unlabeled)?,
            hidden: c.get_list("srl.hidden")?.unwrap_or(sd.hidden),
            proj_dim: c.get_or("srl.proj_dim", sd.proj_dim)?,
            seed: c.get_or("srl.seed", sd.seed)?,
        };
        let encoder = encoder_from_kv(c, base)?;
        let cfg = RunConfig {
            data,
            noise,
            nmc,
            mu: c.get_or("mu", d.mu)?,
            k: c.get("k")?,
            srl,
            max_epoch: c.get_or("max_epoch", d.max_epoch)?,
            carry: parse_enum(
                c,
                "carry",
                d.carry,
                &[("hardened", LabelCarry::Hardened), ("soft", LabelCarry::Soft), ("noisy", LabelCarry::Noisy)],
            )?,
            encoder,
            ablation: parse_enum(
                c,
                "ablation",
                Ablation::None,
                &[
                    ("none", Ablation::None),
                    ("no_srl", Ablation::NoSrl),
                    ("no_nmc", Ablation::NoNmc),
                    ("no_labeled", Ablation::NoLabeled),
                ],
            )?,
            out: c.raw("out").map(resolve),
            timing: c.get_or("timing", false)?,
        };
        c.reject_unknown()?;
        cfg.validate().map_err(|e| StctError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.nmc.validate()?;
        self.srl.validate()?;
        if self.max_epoch == 0 {
            return Err(StctError::input("max_epoch must be at least 1"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(StctError::input(format!("mu = {} must lie in (0, 1]", self.mu)));
        }
        if self.k == Some(0) {
            return Err(StctError::input("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err(StctError::input(format!("noise rate {} must lie in [0, 1]", self.noise.rate)));
        }
        match &self.data {
            DataSource::Synthetic { spec, .. } => spec.validate()?,
            DataSource::Dir(p) => {
                if !p.join("features.stm").exists() {
                    return Err(StctError::input(format!("{} has no features.stm", p.display())));
                }
            }
        }
        if let EncoderProvider::Precomputed { train, test } = &self.encoder {
            for p in std::iter::once(train).chain(test) {
                if !p.exists() {
                    return Err(StctError::input(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Writes `{prefix}features.stm`, `{prefix}clean_labels.stm` and, when
/// present, `{prefix}noisy_labels.stm` and `{prefix}mask.stm`.
pub fn save_dataset_dir(dir: &Path, prefix: &str, ds: &Dataset, noisy: Option<&HardLabelVector>) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_matrix(&dir.join(format!("{prefix}features.stm")), ds.features.as_array())?;
    if let Some(c) = &ds.clean_labels {
        save_labels(&dir.join(format!("{prefix}clean_labels.stm")), c)?;
    }
    if let Some(y) = noisy {
        save_labels(&dir.join(format!("{prefix}noisy_labels.stm")), y)?;
    }
    if let Some(m) = &ds.corruption_mask {
        let a = Array2::from_shape_fn((m.len(), 1), |(i, _)| if m[i] { 1.0 } else { 0.0 });
        save_matrix(&dir.join(format!("{prefix}mask.stm")), &a)?;
    }
    Ok(())
}

/// Reads what [`save_dataset_dir`] wrote. Labels are the noisy ones when
/// present, else the clean ones; `classes` is the largest label plus one
/// unless `spec.json` says otherwise.
pub fn load_dataset_dir(dir: &Path, prefix: &str) -> Result<Option<Dataset>> {
    let fp = dir.join(format!("{prefix}features.stm"));
    if !fp.exists() {
        return Ok(None);
    }
    let features = FeatureMatrix::new(load_matrix(&fp)?)?;
    let opt = |name: &str| -> Result<Option<HardLabelVector>> {
        let p = dir.join(format!("{prefix}{name}"));
        if p.exists() {
            load_labels(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let clean = opt("clean_labels.stm")?;
    let noisy = opt("noisy_labels.stm")?;
    let labels = noisy
        .clone()
        .or_else(|| clean.clone())
        .ok_or_else(|| StctError::input(format!("{} has no labels", dir.display())))?;
    let spec_classes = fs::read_to_string(dir.join("spec.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<MixtureSpec>(&s).ok())
        .map(|s| s.classes);
    let classes = spec_classes.unwrap_or_else(|| {
        labels
            .as_slice()
            .iter()
            .chain(clean.iter().flat_map(|c| c.as_slice()))
            .max()
            .map_or(1, |m| m + 1)
    });
    let mp = dir.join(format!("{prefix}mask.stm"));
    let mask = if mp.exists() {
        Some(load_matrix(&mp)?.iter().map(|v| *v != 0.0).collect())
    } else {
        None
    };
    Dataset::new(features, one_hot(&labels, classes)?, clean, mask).map(Some)
}

/// Training and held-out data with noise applied per `cfg`.
pub fn prepare_data(data: &DataSource, noise: &NoiseSpec) -> Result<(Dataset, Option<Dataset>)> {
    let (mut train, test) = match data {
        DataSource::Synthetic { spec, test_n, test_seed } => {
            let train = gaussian_mixture(spec)?;
            let test = (*test_n > 0)
                .then(|| {
                    gaussian_mixture(&MixtureSpec {
                        n: *test_n,
                        seed: *test_seed,
                        ..spec.clone()
                    })
                })
                .transpose()?;
            (train, test)
        }
        DataSource::Dir(dir) => {
            let train = load_dataset_dir(dir, "")?.ok_or_else(|| StctError::input(format!("no dataset in {}", dir.display())))?;
            (train, load_dataset_dir(dir, "test_")?)
        }
    };
    if let Some(t) = noise.transition(train.classes())? {
        let clean = train
            .clean_labels
            .clone()
            .ok_or_else(|| StctError::input("noise injection needs clean labels"))?;
        let (noisy, mask) = inject_noise(&clean, &t, noise.seed)?;
        train.labels = one_hot(&noisy, train.classes())?;
        train.corruption_mask = Some(mask);
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corrected_acc: Option<f64>,
    pub selected: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_acc: Option<f64>,
    pub nmc_rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmc_stop: Option<StopReason>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_corrected_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noisy_label_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub corrected: SoftLabelMatrix,
    pub model: Option<SrlModel>,
    /// NMC rounds of every epoch, tagged with the epoch.
    pub nmc_trace: Vec<(usize, NmcRound)>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    epoch: usize,
    #[serde(flatten)]
    round: &'a NmcRound,
}

impl RunOutput {
    /// `report.jsonl`, `summary.json`, `nmc_trace.jsonl`,
    /// `corrected_labels.stm` and `model/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("report.jsonl"), &self.report.epochs)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.report.summary)? + "\n")?;
        let lines: Vec<TraceLine<'_>> = self.nmc_trace.iter().map(|(e, r)| TraceLine { epoch: *e, round: r }).collect();
        write_jsonl(&dir.join("nmc_trace.jsonl"), &lines)?;
        save_matrix(&dir.join("corrected_labels.stm"), self.corrected.as_array())?;
        if let Some(m) = &self.model {
            save_model(&dir.join("model"), m)?;
        }
        Ok(())
    }
}

fn accuracy_of(pred: &HardLabelVector, truth: Option<&HardLabelVector>) -> Result<Option<f64>> {
    truth.map(|t| pred.accuracy(t)).transpose()
}

/// Runs the full alternation. When `cfg.out` is set each epoch record is
/// appended to `report.jsonl` as soon as it completes.
pub fn run_stct(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = prepare_data(&cfg.data, &cfg.noise).map_err(|e| e.context("preparing data"))?;
    let classes = train.classes();
    let clean = train.clean_labels.as_ref();
    let (base, base_test) = cfg
        .encoder
        .embed(&train.features, test.as_ref().map(|t| &t.features))
        .map_err(|e| e.context("initial encoder"))?;
    let k = cfg.k.unwrap_or_else(|| default_k(train.n(), classes));

    let mut stream = match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("report.jsonl"))?))
        }
        None => None,
    };

    let mut y = train.labels.clone();
    let mut model: Option<SrlModel> = None;
    let mut records = Vec::with_capacity(cfg.max_epoch);
    let mut nmc_trace = Vec::new();
    for epoch in 1..=cfg.max_epoch {
        let started = Instant::now();
        let ctx = |stage: &str| format!("epoch {epoch}: {stage}");
        let emb = match (&model, cfg.ablation) {
            (Some(m), a) if a != Ablation::NoSrl => FeatureMatrix::new(m.embed(base.view())).map_err(|e| e.context(ctx("encoder")))?,
            _ => base.clone(),
        };

        let (rounds, stop) = if cfg.ablation == Ablation::NoNmc {
            (0, None)
        } else {
            let nmc_cfg = NmcConfig {
                seed: cfg.nmc.seed.wrapping_add(epoch as u64),
                ..cfg.nmc.clone()
            };
            let start = match (cfg.carry, epoch) {
                (LabelCarry::Noisy, _) | (_, 1) => train.labels.clone(),
                (LabelCarry::Soft, _) => y.clone(),
                (LabelCarry::Hardened, _) => one_hot(&harden(&y), classes)?,
            };
            let out = run_nmc(&emb, &start, &nmc_cfg, clean).map_err(|e| e.context(ctx("label correction")))?;
            let n = out.trace.rounds.len();
            nmc_trace.extend(out.trace.rounds.into_iter().map(|r| (epoch, r)));
            y = out.corrected;
            (n, Some(out.stop))
        };
        let hard = harden(&y);
        let srl_cfg = SrlConfig {
            seed: cfg.srl.seed.wrapping_add(epoch as u64),
            ..cfg.srl.clone()
        };
        let start_model = match model.take() {
            Some(m) => m,
            None => srl_cfg.new_model(base.d(), classes)?,
        };

        let (selected_idx, trained) = if cfg.ablation == Ablation::NoSrl {
            let sup = SrlConfig {
                use_unlabeled: false,
                ..srl_cfg
            };
            let empty = Array2::zeros((0, base.d()));
            let (m, _) = train_srl(start_model, base.view(), hard.as_slice(), empty.view(), &sup)
                .map_err(|e| e.context(ctx("classifier training")))?;
            ((0..train.n()).collect::<Vec<_>>(), m)
        } else {
            let sel_cfg = SelectionConfig { k, mu: cfg.mu, epoch };
            sel_cfg.validate()?;
            let yp = knn_pseudo_labels(&emb, &hard, k, classes).map_err(|e| e.context(ctx("neighbor vote")))?;
            let per_class = select_clean(&hard, &yp, sel_cfg.mu_hat()).map_err(|e| e.context(ctx("clean selection")))?;
            let mut sel: Vec<usize> = per_class.into_iter().flatten().collect();
            sel.sort_unstable();
            if cfg.ablation == Ablation::NoLabeled {
                sel.clear();
            }
            let mut is_sel = vec![false; train.n()];
            for &i in &sel {
                is_sel[i] = true;
            }
            let rest: Vec<usize> = (0..train.n()).filter(|&i| !is_sel[i]).collect();
            let xl = base.as_array().select(Axis(0), &sel);
            let yl: Vec<usize> = sel.iter().map(|&i| hard.as_slice()[i]).collect();
            let xu = base.as_array().select(Axis(0), &rest);
            let (m, _) = train_srl(start_model, xl.view(), &yl, xu.view(), &srl_cfg)
                .map_err(|e| e.context(ctx("representation training")))?;
            (sel, m)
        };

        let (precision, recall) = match clean {
            Some(c) => {
                let correct = |i: usize| hard.as_slice()[i] == c.as_slice()[i];
                let hits = selected_idx.iter().filter(|&&i| correct(i)).count();
                let total_correct = (0..train.n()).filter(|&i| correct(i)).count();
                (
                    (!selected_idx.is_empty()).then(|| hits as f64 / selected_idx.len() as f64),
                    (total_correct > 0).then(|| hits as f64 / total_correct as f64),
                )
            }
            None => (None, None),
        };
        let test_acc = match (&base_test, &test) {
            (Some(bt), Some(t)) => accuracy_of(&harden(&predict(&trained, bt)?), t.clean_labels.as_ref())?,
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            corrected_acc: accuracy_of(&hard, clean)?,
            selected: selected_idx.len(),
            precision,
            recall,
            test_acc,
            nmc_rounds: rounds,
            nmc_stop: stop,
            wall_ms: cfg.timing.then(|| started.elapsed().as_millis() as u64),
        };
        if let Some(w) = stream.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        records.push(rec);
        model = Some(trained);
    }

    let last = records.last().expect("max_epoch >= 1");
    let summary = RunSummary {
        epochs: records.len(),
        final_corrected_acc: last.corrected_acc,
        final_test_acc: last.test_acc,
        noisy_label_acc: accuracy_of(&harden(&train.labels), clean)?,
    };
    let output = RunOutput {
        report: RunReport { epochs: records, summary },
        corrected: y,
        model,
        nmc_trace,
    };
    if let Some(dir) = &cfg.out {
        drop(stream);
        output.write(dir)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            data: DataSource::Synthetic {
                spec: MixtureSpec::balanced(3, 300, 6, 5.0, 3),
                test_n: 200,
                test_seed: 4,
            },
            noise: NoiseSpec::symmetric(0.4, 5),
            max_epoch: 2,
            srl: SrlConfig {
                epochs: 2,
                hidden: vec![8],
                proj_dim: 4,
                anchors: 16,
                ..SrlConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_record_per_epoch_and_deterministic() {
        let a = run_stct(&small()).unwrap();
        assert_eq!(a.report.epochs.len(), 2);
        assert!(a.report.epochs.iter().all(|r| r.wall_ms.is_none()));
        let b = run_stct(&small()).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.corrected, b.corrected);
    }

    #[test]
    fn no_labeled_hits_the_guard_with_context() {
        let cfg = RunConfig {
            ablation: Ablation::NoLabeled,
            ..small()
        };
        let err = run_stct(&cfg).unwrap_err();
        assert!(matches!(err.root(), StctError::NonConvergence(_)));
        assert!(err.to_string().contains("epoch 1"), "{err}");
    }

    #[test]
    fn config_parsing() {
        let text = "max_epoch = 3\nnoise = sym\nnoise_rate = 0.8\nconvention = exclude\nnmc.ridge = absolute:0.5\nsrl.hidden = 16, 8\nablation = no_nmc\n";
        let cfg = RunConfig::from_kv(&KvConfig::parse(text).unwrap(), Path::new(".")).unwrap();
        assert_eq!(cfg.max_epoch, 3);
        assert_eq!(cfg.noise.rate, 0.8);
        assert_eq!(cfg.noise.convention, Convention::ExcludeSelf);
        assert_eq!(cfg.nmc.ridge, Ridge::Absolute(0.5));
        assert_eq!(cfg.srl.hidden, vec![16, 8]);
        assert_eq!(cfg.ablation, Ablation::NoNmc);
        let bad = RunConfig::from_kv(&KvConfig::parse("max_epochs = 3\n").unwrap(), Path::new("."));
        assert!(matches!(bad, Err(StctError::Config(_))));
        let bad = RunConfig::from_kv(&KvConfig::parse("noise_rate = 1.5\n").unwrap(), Path::new("."));
        assert!(bad.is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = prepare_data(&small().data, &NoiseSpec::symmetric(0.4, 5)).unwrap();
        let noisy = harden(&train.labels);
        save_dataset_dir(dir.path(), "", &train, Some(&noisy)).unwrap();
        let back = load_dataset_dir(dir.path(), "").unwrap().unwrap();
        assert_eq!(back.features, train.features);
        assert_eq!(back.labels, train.labels);
        assert_eq!(back.clean_labels, train.clean_labels);
        assert_eq!(back.corruption_mask, train.corruption_mask);
        assert!(load_dataset_dir(dir.path(), "test_").unwrap().is_none());
    }

    #[test]
    fn random_projection_is_seeded() {
        let x = FeatureMatrix::new(Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64)).unwrap();
        let p = EncoderProvider::RandomProjection { width: 3, seed: 2 };
        let (a, _) = p.embed(&x, None).unwrap();
        let (b, _) = p.embed(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.d(), 3);
    }
}
