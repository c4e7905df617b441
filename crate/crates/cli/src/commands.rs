use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use machina::coder::{deserialize, serialize, Bitstream};
use machina::image::{load_ppm, save_ppm};
use machina::metrics::{evaluate_clean, evaluate_codec, parse_points, points_to_csv, write_curves, CurvePoint};
use machina::regimes::{
    load_model, pretrain_codec, pretrain_task, run_regime_from_files, save_model, PretrainCodecConfig,
    PretrainTaskConfig, Regime, RegimeConfig,
};
use machina::task::{generate_dataset, load_dataset, save_dataset, Scene};

use crate::manifest::{dir_digest, manifest_path, recorded_quality, sha256_hex, Manifest};

/// A problem with the invocation itself, found before any side effect.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn need_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn need_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

fn need_model(path: &Path, what: &str) -> Result<()> {
    need_file(&machina::regimes::checkpoint_file(path), what)
}

fn check_quality(q: u8) -> Result<()> {
    if (1..=4).contains(&q) {
        Ok(())
    } else {
        Err(usage(format!("--q {q} outside 1..=4")))
    }
}

fn load_scenes(dir: &Path, limit: Option<usize>) -> Result<Vec<Scene>> {
    let mut scenes = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if let Some(n) = limit {
        scenes.truncate(n);
    }
    Ok(scenes)
}

/// Quality from `--q`, else from the codec checkpoint's manifest.
fn resolve_quality(flag: Option<u8>, codec: &Path) -> Result<u8> {
    let q = match flag {
        Some(q) => q,
        None => recorded_quality(codec)?
            .ok_or_else(|| usage(format!("no quality recorded for {}; pass --q", codec.display())))?,
    };
    check_quality(q)?;
    Ok(q)
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl GenData {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        if self.n == 0 {
            return Err(usage("--n must be positive"));
        }
        let scenes = generate_dataset(self.n, self.seed)?;
        save_dataset(&self.out, &scenes)?;
        let mut m = Manifest::new("gen-data", argv);
        m.set("n", self.n);
        m.set("seed", self.seed);
        m.set("digest", dir_digest(&self.out)?);
        m.write(&manifest_path(&self.out, true))?;
        println!("wrote {} scenes to {}", self.n, self.out.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct PretrainCodec {
    /// Quality index, 1 (lowest rate) to 4.
    #[arg(long)]
    q: u8,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on the first N scenes only.
    #[arg(long)]
    limit: Option<usize>,
}

impl PretrainCodec {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        check_quality(self.q)?;
        need_dir(&self.data, "dataset")?;
        let mut cfg = PretrainCodecConfig::new(self.q);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.seed = self.seed;
        let scenes = load_scenes(&self.data, self.limit)?;
        let (params, report) = pretrain_codec(&cfg, &scenes)?;
        save_model(&self.out, &params)?;
        fs::write(self.out.join("report.txt"), report.to_text())?;
        let mut m = Manifest::new("pretrain-codec", argv);
        m.set("q", cfg.q);
        m.set("epochs", cfg.epochs);
        m.set("lr", cfg.lr);
        m.set("lr_end_factor", cfg.lr_end_factor);
        m.set("batch_size", cfg.batch_size);
        m.set("seed", cfg.seed);
        m.set("scenes", scenes.len());
        m.set("digest", &report.digest);
        m.write(&manifest_path(&self.out, true))?;
        if let Some(d) = &report.diverged {
            eprintln!("warning: training stopped early: {d}");
        }
        println!("codec q{} digest {}", cfg.q, report.digest);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct PretrainTask {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
}

impl PretrainTask {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        need_dir(&self.data, "dataset")?;
        let mut cfg = PretrainTaskConfig::default();
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.seed = self.seed;
        let scenes = load_scenes(&self.data, self.limit)?;
        let (params, report) = pretrain_task(&cfg, &scenes)?;
        save_model(&self.out, &params)?;
        fs::write(self.out.join("report.txt"), report.to_text())?;
        let mut m = Manifest::new("pretrain-task", argv);
        m.set("epochs", cfg.epochs);
        m.set("lr", cfg.lr);
        m.set("lr_end_factor", cfg.lr_end_factor);
        m.set("batch_size", cfg.batch_size);
        m.set("seed", cfg.seed);
        m.set("scenes", scenes.len());
        m.set("digest", &report.digest);
        m.write(&manifest_path(&self.out, true))?;
        if let Some(d) = &report.diverged {
            eprintln!("warning: training stopped early: {d}");
        }
        println!("detector digest {}", report.digest);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Finetune {
    /// Flat `key = value` regime config.
    #[arg(long)]
    config: PathBuf,
}

impl Finetune {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        need_file(&self.config, "config")?;
        let text = fs::read_to_string(&self.config)?;
        let cfg = RegimeConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", self.config.display())))?;
        let out = cfg.out_dir.clone().ok_or_else(|| usage("config has no out_dir"))?;
        for (key, path) in [("init_codec", &cfg.init_codec), ("init_task", &cfg.init_task)] {
            let path = path.as_ref().ok_or_else(|| usage(format!("config has no {key}")))?;
            need_model(path, key)?;
        }
        need_dir(cfg.dataset_dir.as_ref().ok_or_else(|| usage("config has no dataset_dir"))?, "dataset_dir")?;

        let outcome = run_regime_from_files(&cfg)?;
        let mut m = Manifest::new("finetune", argv);
        for line in cfg.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                m.set(format!("config.{k}"), v);
            }
        }
        m.set("seed", cfg.seed);
        for (group, digest) in &outcome.report.final_digests {
            m.set(format!("digest.{group}"), digest);
        }
        m.write(&manifest_path(&out, true))?;
        for (sub, params) in [("codec", &outcome.codec), ("task", &outcome.task)] {
            let mut sm = Manifest::new("finetune", argv);
            sm.set("q", cfg.q);
            sm.set("regime", cfg.regime);
            sm.set("beta", cfg.beta);
            sm.set("digest", params.digest());
            sm.write(&manifest_path(&out.join(sub), true))?;
        }
        print!("{}", outcome.report.to_text());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Encode {
    /// Input P6 image.
    #[arg(long)]
    image: PathBuf,
    /// Codec checkpoint (directory or file).
    #[arg(long)]
    codec: PathBuf,
    /// Output bitstream.
    #[arg(long)]
    out: PathBuf,
    /// Quality stored in the header; defaults to the checkpoint's.
    #[arg(long)]
    q: Option<u8>,
}

impl Encode {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        need_file(&self.image, "image")?;
        need_model(&self.codec, "codec")?;
        let q = resolve_quality(self.q, &self.codec)?;
        let image = load_ppm(&self.image)?;
        let params = load_model(&self.codec)?;
        let bytes = serialize(&image, &params, q)?.to_bytes()?;
        fs::write(&self.out, &bytes)?;
        let mut m = Manifest::new("encode", argv);
        m.set("q", q);
        m.set("codec_digest", params.digest());
        m.set("bytes", bytes.len());
        m.set("digest", sha256_hex(&bytes));
        m.write(&manifest_path(&self.out, false))?;
        let (h, w) = (image.shape()[2], image.shape()[3]);
        println!("{} bytes, {:.4} bpp", bytes.len(), 8.0 * bytes.len() as f64 / (h * w) as f64);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Decode {
    /// Input bitstream.
    #[arg(long)]
    stream: PathBuf,
    /// Codec checkpoint used to encode it.
    #[arg(long)]
    codec: PathBuf,
    /// Output P6 image.
    #[arg(long)]
    out: PathBuf,
}

impl Decode {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        need_file(&self.stream, "stream")?;
        need_model(&self.codec, "codec")?;
        let bytes = fs::read(&self.stream)?;
        let bs = Bitstream::from_bytes(&bytes)?;
        let params = load_model(&self.codec)?;
        let decoded = deserialize(&bs, &params)?;
        save_ppm(&self.out, &decoded.x_hat)?;
        let mut m = Manifest::new("decode", argv);
        m.set("q", bs.quality);
        m.set("codec_digest", params.digest());
        m.set("stream_digest", sha256_hex(&bytes));
        m.set("digest", sha256_hex(&fs::read(&self.out)?));
        m.write(&manifest_path(&self.out, false))?;
        println!("decoded {}x{} to {}", bs.width, bs.height, self.out.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Detector checkpoint.
    #[arg(long)]
    task: PathBuf,
    /// Evaluation dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `eval.txt` and `points.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Codec checkpoint; without it the detector runs on clean images.
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    q: Option<u8>,
    /// Regime label for the curve point.
    #[arg(long, default_value = "BASELINE")]
    regime: String,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long)]
    limit: Option<usize>,
}

impl Eval {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        need_model(&self.task, "task")?;
        need_dir(&self.data, "dataset")?;
        let regime: Regime = self.regime.parse().map_err(|e| usage(format!("--regime: {e}")))?;
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(usage("--beta must be finite and non-negative"));
        }
        let quality = match &self.codec {
            Some(c) => {
                need_model(c, "codec")?;
                Some(resolve_quality(self.q, c)?)
            }
            None => None,
        };
        let task = load_model(&self.task)?;
        let scenes = load_scenes(&self.data, self.limit)?;
        fs::create_dir_all(&self.out)?;
        let mut m = Manifest::new("eval", argv);
        m.set("images", scenes.len());
        m.set("task_digest", task.digest());
        let mut report = String::new();
        match (&self.codec, quality) {
            (Some(c), Some(q)) => {
                let codec = load_model(c)?;
                let ev = evaluate_codec(&codec, q, &task, &scenes)?;
                let point = CurvePoint {
                    regime,
                    q,
                    beta: self.beta,
                    bpp: ev.bpp_file,
                    map50: ev.map.map50,
                    map5095: ev.map.map5095,
                    psnr_db: ev.psnr_db,
                    msssim: ev.msssim,
                };
                report.push_str(&format!(
                    "bpp_file = {}\nbpp_est = {}\npsnr_db = {}\nmsssim = {}\n",
                    ev.bpp_file, ev.bpp_est, ev.psnr_db, ev.msssim
                ));
                report.push_str(&format!("map50 = {}\nmap5095 = {}\n", ev.map.map50, ev.map.map5095));
                fs::write(self.out.join("points.csv"), points_to_csv(&[point]))?;
                m.set("q", q);
                m.set("codec_digest", codec.digest());
            }
            _ => {
                let map = evaluate_clean(&task, &scenes)?;
                report.push_str(&format!("map50 = {}\nmap5095 = {}\n", map.map50, map.map5095));
            }
        }
        fs::write(self.out.join("eval.txt"), &report)?;
        m.set("digest", sha256_hex(report.as_bytes()));
        m.write(&manifest_path(&self.out, true))?;
        print!("{report}");
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Curves {
    /// Point files written by `eval`.
    #[arg(long, num_args = 1.., required = true)]
    points: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Curves {
    pub fn run(&self, argv: &[String]) -> Result<()> {
        let mut points = Vec::new();
        for p in &self.points {
            need_file(p, "points file")?;
            let text = fs::read_to_string(p)?;
            points.extend(parse_points(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?);
        }
        let written = write_curves(&self.out, &points)?;
        let mut m = Manifest::new("curves", argv);
        m.set("points", points.len());
        m.set("digest", dir_digest(&self.out)?);
        m.write(&manifest_path(&self.out, true))?;
        for w in written {
            println!("{}", w.display());
        }
        Ok(())
    }
}
