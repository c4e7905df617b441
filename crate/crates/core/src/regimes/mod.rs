//! Fine-tuning regimes as masks over parameter groups.
//!
//! | regime   | trains                          |
//! |----------|---------------------------------|
//! | BASELINE | nothing                         |
//! | T_FT     | task                            |
//! | C_FT     | all five codec groups           |
//! | J_FT     | everything                      |
//! | J_FT_FD  | everything except the decoder   |
//!
//! Every regime runs the same loop over [`total_loss`]; the mask decides
//! which parameters are bound as trainable and which groups the optimizers
//! touch.

mod config;
mod pretrain;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{RegimeConfig, CONFIG_KEYS};
pub use pretrain::{pretrain_codec, pretrain_task, train_codec, PretrainCodecConfig, PretrainEpoch, PretrainReport, PretrainTaskConfig};

use crate::codec::{self, Quantization};
use crate::error::{Error, Result};
use crate::task::data::{batch_images, load_dataset, scene_seed};
use crate::task::{detection_loss, detector_forward, DetectorTargets, Scene};
use crate::tensor::optim::{Adam, Sgd};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Graph, Group, ParameterSet, Var};

/// File name of a model inside a checkpoint directory.
pub const MODEL_FILE: &str = "model.mckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    Baseline,
    TFt,
    CFt,
    JFt,
    JFtFd,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Baseline, Regime::TFt, Regime::CFt, Regime::JFt, Regime::JFtFd];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "BASELINE",
            Regime::TFt => "T_FT",
            Regime::CFt => "C_FT",
            Regime::JFt => "J_FT",
            Regime::JFtFd => "J_FT_FD",
        }
    }

    pub fn trains_codec(self) -> bool {
        trainable_groups(self).iter().any(|g| *g != Group::Task)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    /// Accepts `J_FT`, `j-ft`, `jft` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_uppercase())
            .collect();
        Regime::ALL
            .into_iter()
            .find(|r| r.name().replace('_', "") == key)
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

/// Parameter groups a regime updates.
pub fn trainable_groups(regime: Regime) -> Vec<Group> {
    match regime {
        Regime::Baseline => vec![],
        Regime::TFt => vec![Group::Task],
        Regime::CFt => Group::CODEC.to_vec(),
        Regime::JFt => Group::ALL.to_vec(),
        Regime::JFtFd => Group::ALL.into_iter().filter(|g| *g != Group::Decoder).collect(),
    }
}

/// Graph nodes of one evaluation of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Detection loss, averaged over the batch.
    pub task: Var,
    /// Estimated bits per pixel of both streams.
    pub rate: Var,
    /// `task + beta * rate`.
    pub total: Var,
    /// What the optimizer minimizes: `total`, or `task` alone when the rate
    /// is only reported.
    pub objective: Var,
    pub x_hat: Var,
}

fn in_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { location, detail } => Error::Numeric {
            location: format!("{term}: {location}"),
            detail,
        },
        other => other,
    })
}

fn check_term(g: &Graph, v: Var, term: &str) -> Result<()> {
    let value = g.value(v).item()?;
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(term, format!("value {value}")))
    }
}

/// Builds `L_T(θ(x̂)) + beta * L_R` for an image batch. `params` holds both
/// the codec and the detector.
pub fn total_loss(
    g: &mut Graph,
    params: &ParameterSet,
    x: Var,
    targets: &DetectorTargets,
    beta: f64,
    mode: Quantization,
    optimize_rate: bool,
) -> Result<LossTerms> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Contract(format!("beta = {beta} must be finite and non-negative")));
    }
    let c = in_term("rate term", codec::forward(g, params, x, mode))?;
    check_term(g, c.bpp, "rate term")?;
    let task = in_term(
        "task term",
        (|| {
            let pred = detector_forward(g, params, c.x_hat)?;
            let parts = detection_loss(g, pred, targets)?;
            g.sum(parts)
        })(),
    )?;
    check_term(g, task, "task term")?;
    let weighted = g.scale(c.bpp, beta)?;
    let total = g.add(task, weighted)?;
    Ok(LossTerms {
        task,
        rate: c.bpp,
        total,
        objective: if optimize_rate { total } else { task },
        x_hat: c.x_hat,
    })
}

/// Means over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub rate_bpp: f64,
    pub total: f64,
    pub trained: Vec<Group>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub regime: Regime,
    pub epochs: Vec<EpochStats>,
    pub initial_digests: BTreeMap<Group, String>,
    pub final_digests: BTreeMap<Group, String>,
    pub wall_time: Duration,
}

impl TrainReport {
    /// Equality of everything except the wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.regime == other.regime
            && self.epochs == other.epochs
            && self.initial_digests == other.initial_digests
            && self.final_digests == other.final_digests
    }

    /// Groups whose digest differs before and after the run.
    pub fn changed_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.initial_digests.get(g) != self.final_digests.get(g))
            .collect()
    }

    /// `key = value` rendering, one epoch per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("regime = {}\nwall_time_s = {:.3}\n", self.regime, self.wall_time.as_secs_f64());
        for e in &self.epochs {
            let groups: Vec<&str> = e.trained.iter().map(|g| g.name()).collect();
            s.push_str(&format!(
                "epoch.{} = task_loss {:.6} rate_bpp {:.6} total {:.6} trained {}\n",
                e.epoch,
                e.task_loss,
                e.rate_bpp,
                e.total,
                groups.join(",")
            ));
        }
        for (g, d) in &self.final_digests {
            s.push_str(&format!("digest.{g} = {d}\n"));
        }
        s
    }
}

/// Result of [`run_regime`]: the report plus the fine-tuned models.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub codec: ParameterSet,
    pub task: ParameterSet,
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Fine-tunes `codec` and `task` on `scenes` under `cfg.regime`.
///
/// Epochs in which codec groups train use noise quantization; epochs that
/// train only the detector see rounded (decoded) images. Joint regimes run
/// `max(epochs_codec, epochs_task)` epochs, so with the defaults the last
/// epoch updates the detector alone.
pub fn run_regime(cfg: &RegimeConfig, scenes: &[Scene], codec: &ParameterSet, task: &ParameterSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let mut params = codec.clone();
    params.extend(task.clone())?;
    let missing: Vec<&str> = Group::ALL
        .into_iter()
        .filter(|g| !params.groups().contains(g))
        .map(Group::name)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("no parameters for groups {missing:?}")));
    }
    let initial_digests = params.group_digests();

    let groups = trainable_groups(cfg.regime);
    let codec_groups: Vec<Group> = groups.iter().copied().filter(|g| *g != Group::Task).collect();
    let codec_epochs = if codec_groups.is_empty() { 0 } else { cfg.epochs_codec };
    let task_epochs = if groups.contains(&Group::Task) { cfg.epochs_task } else { 0 };

    let mut adam = Adam::new(cfg.lr_codec);
    let sgd = Sgd::new(cfg.lr_task);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut epochs = Vec::new();
    for epoch in 0..codec_epochs.max(task_epochs) {
        let codec_on = epoch < codec_epochs;
        let task_on = epoch < task_epochs;
        let mut active = if codec_on { codec_groups.clone() } else { Vec::new() };
        if task_on {
            active.push(Group::Task);
        }
        let mut sums = [0.0; 3];
        for batch in shuffled_batches(scenes.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&Scene> = batch.iter().map(|&i| &scenes[i]).collect();
            let targets = DetectorTargets::from_scenes(&refs)?;
            let mode = if codec_on {
                Quantization::Train {
                    seed: scene_seed(cfg.seed, step),
                }
            } else {
                Quantization::Eval
            };
            let mut g = Graph::with_trainable(active.iter().copied());
            let x = g.constant(batch_images(&refs)?);
            let terms = total_loss(&mut g, &params, x, &targets, cfg.beta, mode, codec_on)?;
            params.zero_grads();
            g.backward_into(terms.objective, &mut params)?;
            if codec_on {
                adam.step(&mut params, &codec_groups)?;
            }
            if task_on {
                sgd.step(&mut params, &[Group::Task])?;
            }
            let w = refs.len() as f64;
            sums[0] += w * g.value(terms.task).item()?;
            sums[1] += w * g.value(terms.rate).item()?;
            sums[2] += w * g.value(terms.total).item()?;
            step += 1;
        }
        let n = scenes.len() as f64;
        epochs.push(EpochStats {
            epoch,
            task_loss: sums[0] / n,
            rate_bpp: sums[1] / n,
            total: sums[2] / n,
            trained: active,
        });
    }
    params.zero_grads();
    let report = TrainReport {
        regime: cfg.regime,
        epochs,
        initial_digests,
        final_digests: params.group_digests(),
        wall_time: start.elapsed(),
    };
    Ok(TrainOutcome {
        report,
        codec: params.subset(&Group::CODEC),
        task: params.subset(&[Group::Task]),
    })
}

/// Checkpoint file behind `path`: the path itself, or [`MODEL_FILE`] inside
/// it when it is a directory.
pub fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("config has no {key}")))
}

/// Parameters stored at `path` (a checkpoint file or a directory holding
/// [`MODEL_FILE`]). A missing file is a [`Error::Config`].
pub fn load_model(path: &Path) -> Result<ParameterSet> {
    let file = checkpoint_file(path);
    if !file.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", file.display())));
    }
    Ok(load_checkpoint(&file)?.params)
}

/// Writes `params` to `dir/`[`MODEL_FILE`], creating `dir`.
pub fn save_model(dir: &Path, params: &ParameterSet) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let file = dir.join(MODEL_FILE);
    let ckpt = Checkpoint {
        params: params.clone(),
        moments: BTreeMap::new(),
    };
    save_checkpoint(&file, &ckpt)?;
    Ok(file)
}

fn load_for(value: &Option<PathBuf>, key: &str) -> Result<ParameterSet> {
    load_model(required(value, key)?).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{key}: {msg}")),
        other => other,
    })
}

/// [`run_regime`] driven entirely by the paths in `cfg`. When `out_dir` is
/// set the models are written to `out_dir/codec/` and `out_dir/task/` and
/// the report to `out_dir/report.txt`.
pub fn run_regime_from_files(cfg: &RegimeConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let codec = load_for(&cfg.init_codec, "init_codec")?;
    let task = load_for(&cfg.init_task, "init_task")?;
    let scenes = load_dataset(required(&cfg.dataset_dir, "dataset_dir")?)?;
    let outcome = run_regime(cfg, &scenes, &codec, &task)?;
    if let Some(out) = &cfg.out_dir {
        for (sub, params) in [("codec", &outcome.codec), ("task", &outcome.task)] {
            save_model(&out.join(sub), params)?;
        }
        std::fs::write(out.join("report.txt"), outcome.report.to_text())?;
    }
    Ok(outcome)
}
