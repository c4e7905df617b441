use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::shuffled_batches;
use crate::codec::{self, CodecConfig, Quantization};
use crate::error::{Error, Result};
use crate::task::data::{batch_images, scene_seed, SCENE_SIZE};
use crate::task::{detection_loss, detector_forward, init_detector_params, BBox, DetectorTargets, Scene};
use crate::tensor::optim::Adam;
use crate::tensor::{Graph, Group, ParameterSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainCodecConfig {
    pub q: u8,
    pub epochs: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// The rate decays exponentially to `lr * lr_end_factor` at the last
    /// step.
    pub lr_end_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainCodecConfig {
    pub fn new(q: u8) -> Self {
        Self {
            q,
            epochs: 20,
            lr: 5e-3,
            lr_end_factor: 0.1,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainTaskConfig {
    pub epochs: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// See [`PretrainCodecConfig::lr_end_factor`].
    pub lr_end_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainTaskConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            lr_end_factor: 0.1,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Epoch means. `bpp` and `mse` are only set for codec pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub bpp: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    /// Set when training stopped on a non-finite loss; the returned
    /// parameters are those at the end of the last finite epoch.
    pub diverged: Option<String>,
    pub digest: String,
    pub wall_time: Duration,
}

impl PretrainReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("wall_time_s = {:.3}\ndigest = {}\n", self.wall_time.as_secs_f64(), self.digest);
        if let Some(d) = &self.diverged {
            s.push_str(&format!("diverged = {d}\n"));
        }
        for e in &self.epochs {
            s.push_str(&format!("epoch.{} = loss {:.6}", e.epoch, e.loss));
            if let (Some(b), Some(m)) = (e.bpp, e.mse) {
                s.push_str(&format!(" bpp {b:.6} mse {m:.8}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Learning rate at `step` of `total` steps.
fn decayed(lr: f64, end_factor: f64, step: usize, total: usize) -> f64 {
    lr * end_factor.powf(step as f64 / total.max(1) as f64)
}

fn check_setup(scenes: &[Scene], epochs: usize, batch_size: usize, lr: f64, end_factor: f64) -> Result<()> {
    if !(end_factor > 0.0 && end_factor <= 1.0) {
        return Err(Error::Config(format!("lr_end_factor {end_factor} outside (0, 1]")));
    }
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if batch_size == 0 || epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    Ok(())
}

/// Runs `epochs` passes of `step` over shuffled batches. A numeric error
/// ends training and rolls back to the last completed epoch.
fn train_loop(
    params: &mut ParameterSet,
    scenes: &[Scene],
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mut step: impl FnMut(&mut ParameterSet, &[&Scene], usize) -> Result<[f64; 3]>,
) -> Result<(Vec<PretrainEpoch>, Option<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::new();
    let mut counter = 0;
    for epoch in 0..epochs {
        let good = params.clone();
        let mut sums = [0.0; 3];
        for batch in shuffled_batches(scenes.len(), batch_size, &mut rng) {
            let refs: Vec<&Scene> = batch.iter().map(|&i| &scenes[i]).collect();
            let out = step(params, &refs, counter).and_then(|v| {
                if v[0].is_finite() {
                    Ok(v)
                } else {
                    Err(Error::numeric("training loss", format!("value {}", v[0])))
                }
            });
            match out {
                Ok(v) => {
                    for (s, x) in sums.iter_mut().zip(v) {
                        *s += x * refs.len() as f64;
                    }
                }
                Err(e @ Error::Numeric { .. }) => {
                    *params = good;
                    return Ok((stats, Some(format!("epoch {epoch}: {e}"))));
                }
                Err(e) => return Err(e),
            }
            counter += 1;
        }
        let n = scenes.len() as f64;
        stats.push(PretrainEpoch {
            epoch,
            loss: sums[0] / n,
            bpp: Some(sums[1] / n),
            mse: Some(sums[2] / n),
        });
    }
    Ok((stats, None))
}

/// Rate-distortion training from scratch with
/// `L = bpp + lambda * 255^2 * MSE`, `lambda` from the quality table.
pub fn pretrain_codec(cfg: &PretrainCodecConfig, scenes: &[Scene]) -> Result<(ParameterSet, PretrainReport)> {
    let ccfg = CodecConfig::for_quality(cfg.q)?;
    train_codec(cfg, codec::init_codec_params(&ccfg, cfg.seed)?, scenes)
}

/// [`pretrain_codec`] starting from given parameters.
pub fn train_codec(cfg: &PretrainCodecConfig, mut params: ParameterSet, scenes: &[Scene]) -> Result<(ParameterSet, PretrainReport)> {
    check_setup(scenes, cfg.epochs, cfg.batch_size, cfg.lr, cfg.lr_end_factor)?;
    let start = Instant::now();
    let ccfg = CodecConfig::for_quality(cfg.q)?;
    let weight = ccfg.lambda_mse * 255.0 * 255.0;
    let mut adam = Adam::new(cfg.lr);
    let total = cfg.epochs * scenes.len().div_ceil(cfg.batch_size);
    let (epochs, diverged) = train_loop(&mut params, scenes, cfg.epochs, cfg.batch_size, cfg.seed, |p, refs, i| {
        adam.lr = decayed(cfg.lr, cfg.lr_end_factor, i, total);
        let mut g = Graph::new();
        let x = g.constant(batch_images(refs)?);
        let mode = Quantization::Train {
            seed: scene_seed(cfg.seed, i),
        };
        let c = codec::forward(&mut g, p, x, mode)?;
        let diff = g.sub(c.x_hat, x)?;
        let sq = g.square(diff)?;
        let mse = g.mean(sq)?;
        let dist = g.scale(mse, weight)?;
        let loss = g.add(c.bpp, dist)?;
        p.zero_grads();
        g.backward_into(loss, p)?;
        adam.step(p, &Group::CODEC)?;
        Ok([g.value(loss).item()?, g.value(c.bpp).item()?, g.value(mse).item()?])
    })?;
    params.zero_grads();
    let report = PretrainReport {
        epochs,
        diverged,
        digest: params.digest(),
        wall_time: start.elapsed(),
    };
    Ok((params, report))
}

/// Random horizontal flip plus a random permutation of the colour
/// channels. Both keep every class valid: the triangles point up and are
/// mirror-symmetric, and colours are arbitrary.
fn augment(scene: &Scene, rng: &mut ChaCha8Rng) -> Scene {
    let n = SCENE_SIZE;
    let flip = rng.random_bool(0.5);
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    let src = scene.image.data();
    let mut px = vec![0.0; 3 * n * n];
    for (c, &from) in perm.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let sx = if flip { n - 1 - x } else { x };
                px[(c * n + y) * n + x] = src[(from * n + y) * n + sx];
            }
        }
    }
    let size = n as f64;
    let boxes = scene
        .boxes
        .iter()
        .map(|b| if flip { BBox::new(size - b.x1, b.y0, size - b.x0, b.y1) } else { *b })
        .collect();
    Scene {
        image: Tensor::from_parts(vec![1, 3, n, n], px),
        boxes,
        labels: scene.labels.clone(),
        seed: scene.seed,
    }
}

/// Detector training from scratch on the given (clean) scenes, with
/// flip and colour augmentation.
pub fn pretrain_task(cfg: &PretrainTaskConfig, scenes: &[Scene]) -> Result<(ParameterSet, PretrainReport)> {
    check_setup(scenes, cfg.epochs, cfg.batch_size, cfg.lr, cfg.lr_end_factor)?;
    let start = Instant::now();
    let mut params = init_detector_params(cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let total = cfg.epochs * scenes.len().div_ceil(cfg.batch_size);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, usize::MAX));
    let (mut epochs, diverged) = train_loop(&mut params, scenes, cfg.epochs, cfg.batch_size, cfg.seed, |p, refs, i| {
        adam.lr = decayed(cfg.lr, cfg.lr_end_factor, i, total);
        let augmented: Vec<Scene> = refs.iter().map(|s| augment(s, &mut aug_rng)).collect();
        let refs: Vec<&Scene> = augmented.iter().collect();
        let refs = &refs[..];
        let targets = DetectorTargets::from_scenes(refs)?;
        let mut g = Graph::new();
        let x = g.constant(batch_images(refs)?);
        let pred = detector_forward(&mut g, p, x)?;
        let parts = detection_loss(&mut g, pred, &targets)?;
        let loss = g.sum(parts)?;
        p.zero_grads();
        g.backward_into(loss, p)?;
        adam.step(p, &[Group::Task])?;
        Ok([g.value(loss).item()?, 0.0, 0.0])
    })?;
    for e in &mut epochs {
        e.bpp = None;
        e.mse = None;
    }
    params.zero_grads();
    let report = PretrainReport {
        epochs,
        diverged,
        digest: params.digest(),
        wall_time: start.elapsed(),
    };
    Ok((params, report))
}
