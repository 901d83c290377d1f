//! Joint training of the coarse estimator and the refiner.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{check_params, Checkpoint, FORMAT_VERSION, MAGIC};

use crate::autodiff::{Graph, Tensor};
use crate::coarse::WindowInput;
use crate::gnss::{FeatureWindow, NormStats, WindowConfig};
use crate::model::{labels, DiffGnss, LossWeights, ModelConfig, NoiseDraw, PredictionRecord};
use crate::synth::derive_seed;
use crate::{par, Error, Params, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Epochs at the start that train the coarse term only.
    pub warm_start_epochs: usize,
    /// Stop after the epoch that crosses this wall-clock budget, seconds.
    pub max_seconds: Option<f64>,
    /// Expand training sequences with order-preserving clip subsets.
    pub augment: bool,
    pub window: WindowConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-5,
            lr_decay: 0.9,
            decay_every: 5,
            epochs: 200,
            batch: 8,
            weights: LossWeights::default(),
            seed: 0,
            grad_clip: 5.0,
            warm_start_epochs: 0,
            max_seconds: None,
            augment: false,
            window: WindowConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.pri, w.res, w.un, w.prr].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch and decay_every must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.model.hidden == 0 || self.model.state == 0 || self.model.expand == 0 || self.model.conv_width == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        DiffGnss::new(self.model.clone())?;
        Ok(())
    }

    /// `lr0 · decay^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pri: f64,
    pub res: f64,
    pub un: f64,
    pub prr: f64,
}

/// Four-term loss from plain per-satellite values. Errors are in meters;
/// every term is a mean over `valid` satellites in units of `scale`.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    init: &[f64],
    eps_hat: &[f64],
    u_hat: &[f64],
    gt: &[f64],
    u_gt: &[f64],
    valid: &[bool],
    scale: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Data("loss over a batch without labeled satellites".into()));
    }
    let mut b = LossBreakdown::default();
    for k in (0..valid.len()).filter(|&k| valid[k]) {
        let (i, g) = (init[k] / scale, gt[k] / scale);
        let eps0 = g - i;
        b.pri += (i - g).powi(2);
        b.res += (eps_hat[k] - eps0).powi(2);
        b.un += (u_hat[k] - u_gt[k]).powi(2);
        b.prr += (i + eps_hat[k] - g).powi(2);
    }
    let n = n as f64;
    b.pri /= n;
    b.res /= n;
    b.un /= n;
    b.prr /= n;
    b.total = w.pri * b.pri + w.res * b.res + w.un * b.un + w.prr * b.prr;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub valid_mae_init: f64,
    pub valid_mae_fine: f64,
    pub valid_rmse_fine: f64,
    pub valid_mean_u: f64,
}

/// Normalized copies of `windows`.
pub fn normalized(windows: &[FeatureWindow], norm: &NormStats) -> Vec<FeatureWindow> {
    let mut w = windows.to_vec();
    norm.normalize(&mut w);
    w
}

/// Inference over normalized windows. Each window's DDIM noise is seeded from
/// `seed` and the window's identity, so results do not depend on order or
/// thread count.
pub fn predict_windows(
    model: &DiffGnss,
    params: &Params,
    windows: &[FeatureWindow],
    evaluations: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<PredictionRecord>> {
    let per = par::map(windows, threads, |_, w| {
        model.predict(params, w, evaluations, derive_seed(seed, &format!("{}@{}", w.seq_id, w.last_time())))
    });
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

struct Prepared {
    input: WindowInput<Real>,
    gt: Vec<f64>,
    labeled: Vec<bool>,
    targets: usize,
}

fn valid_metrics(preds: &[PredictionRecord]) -> (f64, f64, f64, f64) {
    let labeled: Vec<&PredictionRecord> = preds.iter().filter(|p| p.gt.is_some()).collect();
    let n = labeled.len().max(1) as f64;
    let mae_i = labeled.iter().map(|p| (p.init - p.gt.unwrap()).abs()).sum::<f64>() / n;
    let mae_f = labeled.iter().map(|p| (p.fine - p.gt.unwrap()).abs()).sum::<f64>() / n;
    let rmse_f = (labeled.iter().map(|p| (p.fine - p.gt.unwrap()).powi(2)).sum::<f64>() / n).sqrt();
    let mean_u = labeled.iter().map(|p| p.u_hat).sum::<f64>() / n;
    (mae_i, mae_f, rmse_f, mean_u)
}

/// Trains on raw (unnormalized) windows. Normalization statistics come from
/// `train` only. Returns the parameters with the best validation refined MAE.
pub fn train(cfg: &TrainConfig, train: &[FeatureWindow], valid: &[FeatureWindow]) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let started = Instant::now();
    let threads = par::threads();
    let norm = NormStats::compute(train);
    let train_n = normalized(train, &norm);
    let valid_n = normalized(valid, &norm);
    let model = DiffGnss::new(cfg.model.clone())?;
    let mut params: Params = model.init_params(cfg.seed);
    let prepared: Vec<Prepared> = train_n
        .iter()
        .map(|w| {
            let input = model.input::<Real>(w)?;
            let (gt, labeled) = labels(w, &input);
            let targets = labeled.iter().filter(|&&b| b).count();
            Ok(Prepared { input, gt, labeled, targets })
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.targets > 0)
        .collect();
    if prepared.is_empty() {
        return Err(Error::Data("no training window has a labeled satellite".into()));
    }
    let eval_seed = derive_seed(cfg.seed, "valid");
    let evaluate = |params: &Params| -> Result<(f64, f64, f64, f64)> {
        let preds = predict_windows(&model, params, &valid_n, cfg.model.diffusion.ddim_steps, eval_seed, threads)?;
        Ok(valid_metrics(&preds))
    };
    let (mi, mf, rf, mu) = evaluate(&params)?;
    let mut history = vec![EpochMetrics {
        epoch: 0,
        lr: cfg.lr_at(0),
        train: LossBreakdown::default(),
        valid_mae_init: mi,
        valid_mae_fine: mf,
        valid_rmse_fine: rf,
        valid_mean_u: mu,
    }];
    let mut best = (mf, 0usize, params.clone());
    let mut adam = Adam::default();
    let mut diverged = false;
    let steps = model.schedule.steps();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let weights = if epoch < cfg.warm_start_epochs {
            LossWeights { pri: 1.0, res: 0.0, un: 0.0, prr: 0.0 }
        } else {
            cfg.weights
        };
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("order/{epoch}"))));
        let mut sums = [0.0f64; 4];
        let mut total_targets = 0usize;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let batch_targets: usize = batch.iter().map(|&i| prepared[i].targets).sum();
            let inv = 1.0 / batch_targets as f64;
            let results = par::map(batch, threads, |j, &i| -> Result<_> {
                let p = &prepared[i];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("noise/{epoch}/{b}/{j}")));
                let noise = NoiseDraw::sample(&mut rng, p.input.sats(), steps);
                let mut g = Graph::with_params(&params, true);
                let loss = model.window_loss(&mut g, &p.input, &p.gt, &p.labeled, &noise, &weights)?;
                let scaled = g.scale(loss.total, inv as Real)?;
                let grads = g.backward(scaled)?;
                Ok((grads, loss.parts))
            });
            let mut grads: BTreeMap<String, Tensor<Real>> = BTreeMap::new();
            for r in results {
                let (gw, parts) = r?;
                for (k, s) in sums.iter_mut().zip(parts) {
                    *k += s;
                }
                for (name, g) in gw {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            total_targets += batch_targets;
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut params, &grads, lr);
        }
        let n = total_targets as f64;
        let [pri, res, un, prr] = sums.map(|s| s / n);
        let w = &weights;
        let train_loss = LossBreakdown { total: w.pri * pri + w.res * res + w.un * un + w.prr * prr, pri, res, un, prr };
        let (mi, mf, rf, mu) = evaluate(&params)?;
        history.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train: train_loss,
            valid_mae_init: mi,
            valid_mae_fine: mf,
            valid_rmse_fine: rf,
            valid_mean_u: mu,
        });
        log::info!(
            "epoch {:>3} lr {lr:.2e} loss {:.4} valid MAE coarse {mi:.3} m refined {mf:.3} m ({:.0} s)",
            epoch + 1,
            train_loss.total,
            started.elapsed().as_secs_f64()
        );
        if !train_loss.total.is_finite() || !mf.is_finite() {
            log::error!("training diverged at epoch {}; keeping epoch {}", epoch + 1, best.1);
            diverged = true;
            break;
        }
        if mf < best.0 {
            best = (mf, epoch + 1, params.clone());
        }
        if cfg.max_seconds.is_some_and(|m| started.elapsed().as_secs_f64() > m) {
            log::warn!("time budget reached after epoch {}", epoch + 1);
            break;
        }
    }
    Ok(Checkpoint { params: best.2, norm, config: cfg.clone(), epoch: best.1, history, diverged })
}
