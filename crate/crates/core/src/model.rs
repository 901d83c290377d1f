//! The coarse-to-fine model: a coarse estimator followed by a conditional
//! diffusion refiner that predicts the residual and a per-satellite
//! uncertainty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::coarse::{Backbone, CoarseNet, CoarseOut, WindowInput};
use crate::diffusion::{self, DiffusionConfig, DiffusionSchedule};
use crate::gnss::{FeatureWindow, SatId, SceneLabel, NUM_FEATURES};
use crate::nn::{sinusoidal_embedding, GruCell, Init, Linear, Lstm, MambaDims, Mlp};
use crate::scalar::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

pub const TIME_EMBED_DIM: usize = 64;

/// Switches that remove parts of the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_diffusion: bool,
    pub no_temporal_cond: bool,
    pub no_spatial_cond: bool,
    pub no_coarse_embed: bool,
    pub no_uncertainty: bool,
    pub coarse_backbone: Backbone,
}

impl Ablations {
    /// Applies a named flag such as `no_diffusion` or `backbone=lstm`.
    pub fn set(&mut self, flag: &str) -> std::result::Result<(), String> {
        match flag {
            "no_diffusion" => self.no_diffusion = true,
            "no_temporal_cond" => self.no_temporal_cond = true,
            "no_spatial_cond" => self.no_spatial_cond = true,
            "no_coarse_embed" => self.no_coarse_embed = true,
            "no_uncertainty" => self.no_uncertainty = true,
            _ => match flag.strip_prefix("backbone=") {
                Some(b) => self.coarse_backbone = b.parse()?,
                None => {
                    return Err(format!(
                        "unknown ablation `{flag}` (no_diffusion, no_temporal_cond, no_spatial_cond, \
                         no_coarse_embed, no_uncertainty, backbone=<mamba|uni_mamba|lstm|transformer>)"
                    ))
                }
            },
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub state: usize,
    pub expand: usize,
    pub conv_width: usize,
    /// Clip length used to scale relative epoch times, s.
    pub clip_len: f64,
    pub ablations: Ablations,
    pub diffusion: DiffusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            state: 16,
            expand: 2,
            conv_width: 4,
            clip_len: 5.0,
            ablations: Ablations::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims { model: self.hidden, state: self.state, expand: self.expand, conv_width: self.conv_width }
    }
}

/// Conditioning networks and the GRU denoiser.
#[derive(Clone, Debug)]
pub struct Refiner {
    hidden: usize,
    cond_lstm: Lstm,
    cond_mlp: Mlp,
    init_mlp: Mlp,
    state_mlp: Mlp,
    time_proj: Linear,
    gru: GruCell,
    eps_head: Mlp,
    u_head: Linear,
}

impl Refiner {
    fn new(h: usize, chunks: usize) -> Self {
        Self {
            hidden: h,
            cond_lstm: Lstm::new("refiner.cond_lstm", NUM_FEATURES, h),
            cond_mlp: Mlp::new("refiner.cond_mlp", &[h, h, h]),
            init_mlp: Mlp::new("refiner.init_mlp", &[1, h, h]),
            state_mlp: Mlp::new("refiner.state_mlp", &[2, h, h]),
            time_proj: Linear::new("refiner.time_proj", TIME_EMBED_DIM, h),
            gru: GruCell::new("refiner.gru", 3 * h / chunks, h),
            eps_head: Mlp::new("refiner.eps_head", &[h, h, 1]),
            u_head: Linear::new("refiner.u_head", h, 1),
        }
    }

    fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        self.cond_lstm.init(init);
        self.cond_mlp.init(init);
        self.init_mlp.init(init);
        self.state_mlp.init(init);
        self.time_proj.init(init);
        self.gru.init(init);
        self.eps_head.init(init);
        self.u_head.init(init);
    }
}

/// Parts of the conditioning signal, compact rows `[n, H]` each.
#[derive(Clone, Copy, Debug)]
pub struct Condition {
    pub f_tc: Var,
    pub f_sc: Var,
    pub f_ic: Var,
    /// `[n, 3H]` with ablated parts zeroed.
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct DiffGnss {
    pub cfg: ModelConfig,
    pub schedule: DiffusionSchedule,
    coarse: CoarseNet,
    refiner: Option<Refiner>,
}

/// Noise drawn for one training window.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    pub z_eps: Vec<f64>,
    pub z_u: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Self {
        use rand::Rng;
        let t = rng.gen_range(1..=steps);
        let z_eps = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let z_u = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, z_eps, z_u }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pri: f64,
    pub res: f64,
    pub un: f64,
    pub prr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pri: 0.5, res: 0.5, un: 0.3, prr: 1.0 }
    }
}

/// Loss of one window as sums of squared errors over its target satellites.
/// Dividing by the batch's target count turns them into the batch means.
#[derive(Clone, Copy, Debug)]
pub struct WindowLoss {
    /// Weighted sum, on the graph.
    pub total: Var,
    /// Unweighted sums: coarse, residual, uncertainty, refined.
    pub parts: [f64; 4],
    pub targets: usize,
}

/// Per-satellite output of inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub seq_id: String,
    pub scene: SceneLabel,
    pub epoch_time: f64,
    pub sat_id: SatId,
    /// Coarse estimate, m.
    pub init: f64,
    /// Generated residual, normalized units.
    pub eps_hat: f64,
    /// Refined estimate, m.
    pub fine: f64,
    pub u_hat: f64,
    pub gt: Option<f64>,
}

impl DiffGnss {
    pub fn new(cfg: ModelConfig) -> std::result::Result<Self, diffusion::DiffusionError> {
        let schedule = DiffusionSchedule::from_config(&cfg.diffusion)?;
        schedule.ddim_timesteps(cfg.diffusion.ddim_steps)?;
        let coarse = CoarseNet::new(cfg.ablations.coarse_backbone, cfg.mamba_dims());
        let k = cfg.diffusion.gru_iters;
        if k == 0 || (3 * cfg.hidden) % k != 0 {
            return Err(diffusion::DiffusionError::GruChunks(k, 3 * cfg.hidden));
        }
        let refiner = (!cfg.ablations.no_diffusion).then(|| Refiner::new(cfg.hidden, k));
        Ok(Self { cfg, schedule, coarse, refiner })
    }

    pub fn has_refiner(&self) -> bool {
        self.refiner.is_some()
    }

    pub fn scale(&self) -> f64 {
        self.cfg.diffusion.scale
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed };
        self.coarse.init(&mut init);
        if let Some(r) = &self.refiner {
            r.init(&mut init);
        }
        store
    }

    /// Names and shapes the architecture expects.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.init_params::<f32>(0).iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn input<S: Scalar>(&self, w: &FeatureWindow) -> Result<WindowInput<S>> {
        WindowInput::new(w, self.cfg.clip_len)
    }

    pub fn coarse<S: Scalar>(&self, g: &mut Graph<'_, S>, inp: &WindowInput<S>) -> Result<CoarseOut> {
        self.coarse.forward(g, inp)
    }

    fn refiner(&self) -> Result<&Refiner> {
        self.refiner.as_ref().ok_or(TensorError::UnknownParam("refiner.* (model built with no_diffusion)".into()))
    }

    /// `init` is the coarse estimate in normalized units, `[n, 1]`.
    pub fn condition<S: Scalar>(&self, g: &mut Graph<'_, S>, inp: &WindowInput<S>, init: Var) -> Result<Condition> {
        let r = self.refiner()?;
        let n = inp.sats();
        let x = g.constant(inp.x.clone());
        let hs = r.cond_lstm.forward(g, x, Some(&inp.step_mask))?;
        let last = *hs.last().expect("window has epochs");
        let f_tc = r.cond_mlp.forward(g, last)?;
        let pooled = g.max_over_axis(f_tc, 0)?;
        let pooled = g.reshape(pooled, vec![1, r.hidden])?;
        let f_sc = g.gather_rows(pooled, &vec![Some(0); n])?;
        let f_ic = r.init_mlp.forward(g, init)?;
        let a = &self.cfg.ablations;
        let zero = g.constant(Tensor::zeros(vec![n, r.hidden]));
        let parts = [
            if a.no_coarse_embed { zero } else { f_ic },
            if a.no_temporal_cond { zero } else { f_tc },
            if a.no_spatial_cond { zero } else { f_sc },
        ];
        let c = g.concat(&parts, 1)?;
        Ok(Condition { f_tc, f_sc, f_ic, c })
    }

    /// One evaluation of the denoiser. `eps_t` and `u_t` are `[n, 1]`; returns
    /// `(ε̂_0, û_0)`, both `[n, 1]` and zero for non-target rows.
    pub fn denoise<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        inp: &WindowInput<S>,
        cond: &Condition,
        eps_t: Var,
        u_t: Var,
        t: usize,
    ) -> Result<(Var, Var)> {
        let r = self.refiner()?;
        let h = r.hidden;
        let state = g.concat(&[eps_t, u_t], 1)?;
        let enc = r.state_mlp.forward(g, state)?;
        let temb = g.constant(sinusoidal_embedding(t as f64, TIME_EMBED_DIM));
        let temb = r.time_proj.forward(g, temb)?;
        let enc = g.add(enc, temb)?;
        let mut hidden = g.tanh(enc)?;
        let chunks = self.cfg.diffusion.gru_iters;
        let width = 3 * h / chunks;
        for k in 0..chunks {
            let xk = g.slice(cond.c, 1, k * width, (k + 1) * width)?;
            hidden = r.gru.step(g, xk, hidden)?;
        }
        let target = g.constant(inp.target.clone());
        let eps = r.eps_head.forward(g, hidden)?;
        let eps = g.mul(eps, target)?;
        let u = r.u_head.forward(g, hidden)?;
        let u = g.sigmoid(u)?;
        let u = g.mul(u, target)?;
        Ok((eps, u))
    }

    /// Training loss of one window. `gt` holds ground-truth errors in meters
    /// per compact row (zero where unknown); `labeled` marks rows that count.
    pub fn window_loss<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        inp: &WindowInput<S>,
        gt: &[f64],
        labeled: &[bool],
        noise: &NoiseDraw,
        w: &LossWeights,
    ) -> Result<WindowLoss> {
        let n = inp.sats();
        let s = self.scale();
        let lab = Tensor::from_fn(vec![n, 1], |i| if labeled[i] { S::one() } else { S::zero() });
        let targets = labeled.iter().filter(|&&b| b).count();
        let lab = g.constant(lab);
        let gt_n = g.constant(Tensor::from_fn(vec![n, 1], |i| S::lit(if labeled[i] { gt[i] / s } else { 0.0 })));
        let coarse = self.coarse(g, inp)?;
        let sq_sum = |g: &mut Graph<'_, S>, a: Var, b: Var| -> Result<Var> {
            let d = g.sub(a, b)?;
            let d = g.mul(d, lab)?;
            let d2 = g.mul(d, d)?;
            let flat = g.reshape(d2, vec![n])?;
            g.sum_over_axis(flat, 0)
        };
        let l_pri = sq_sum(g, coarse.init, gt_n)?;
        let Some(_) = &self.refiner else {
            let total = g.scale(l_pri, S::lit(w.pri + w.prr))?;
            let v = g.value(l_pri).item().as_f64();
            return Ok(WindowLoss { total, parts: [v, 0.0, 0.0, v], targets });
        };
        let init_vals = g.value(coarse.init).to_f64_vec();
        let u_gt: Vec<f64> = (0..n)
            .map(|i| {
                if labeled[i] {
                    let d = &self.cfg.diffusion;
                    diffusion::make_uncertainty_label(init_vals[i] * s, gt[i], d.e1, d.e2)
                } else {
                    0.0
                }
            })
            .collect();
        let ab = self.schedule.alpha_bar_at(noise.t);
        let (sa, sn) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        // ε_0 stays on the graph so the residual target tracks the coarse stage
        let eps0 = g.sub(gt_n, coarse.init)?;
        let eps0 = g.mul(eps0, lab)?;
        let z_eps = g.constant(Tensor::from_fn(vec![n, 1], |i| S::lit(noise.z_eps[i])));
        let a = g.scale(eps0, sa)?;
        let b = g.scale(z_eps, sn)?;
        let eps_t = g.add(a, b)?;
        let u_gt_v = g.constant(Tensor::from_fn(vec![n, 1], |i| S::lit(u_gt[i])));
        let u_t = if self.cfg.ablations.no_uncertainty {
            g.constant(Tensor::zeros(vec![n, 1]))
        } else {
            g.constant(Tensor::from_fn(vec![n, 1], |i| S::lit(ab.sqrt() * u_gt[i] + (1.0 - ab).sqrt() * noise.z_u[i])))
        };
        let cond = self.condition(g, inp, coarse.init)?;
        let (eps_hat, u_hat) = self.denoise(g, inp, &cond, eps_t, u_t, noise.t)?;
        let fine = g.add(coarse.init, eps_hat)?;
        let l_res = sq_sum(g, eps_hat, eps0)?;
        let l_un = sq_sum(g, u_hat, u_gt_v)?;
        let l_prr = sq_sum(g, fine, gt_n)?;
        let w_un = if self.cfg.ablations.no_uncertainty { 0.0 } else { w.un };
        let mut total = g.scale(l_pri, S::lit(w.pri))?;
        for (l, wt) in [(l_res, w.res), (l_un, w_un), (l_prr, w.prr)] {
            let term = g.scale(l, S::lit(wt))?;
            total = g.add(total, term)?;
        }
        let parts = [l_pri, l_res, l_un, l_prr].map(|v| g.value(v).item().as_f64());
        Ok(WindowLoss { total, parts, targets })
    }

    /// Coarse estimate followed by `evaluations` deterministic DDIM steps
    /// starting from standard-normal noise seeded by `seed`.
    pub fn predict<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        w: &FeatureWindow,
        evaluations: usize,
        seed: u64,
    ) -> std::result::Result<Vec<PredictionRecord>, crate::Error> {
        let inp = self.input::<S>(w)?;
        let n = inp.sats();
        let s = self.scale();
        let mut g = Graph::with_params(params, false);
        let coarse = self.coarse(&mut g, &inp)?;
        let init: Vec<f64> = g.value(coarse.init).to_f64_vec();
        let (eps_hat, u_hat) = if self.refiner.is_some() {
            let timesteps = self.schedule.ddim_timesteps(evaluations)?;
            let cond = self.condition(&mut g, &inp, coarse.init)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let no_u = self.cfg.ablations.no_uncertainty;
            let pred = diffusion::ddim_chain(x, &timesteps, &self.schedule, |t, x| {
                let eps_t = g.constant(Tensor::from_fn(vec![n, 1], |k| S::lit(x[k])));
                let u_t = g.constant(Tensor::from_fn(vec![n, 1], |k| if no_u { S::zero() } else { S::lit(x[n + k]) }));
                let (e, u) = self.denoise(&mut g, &inp, &cond, eps_t, u_t, t)?;
                let mut p = g.value(e).to_f64_vec();
                p.extend(g.value(u).to_f64_vec());
                Ok::<_, TensorError>(p)
            })?;
            (pred[..n].to_vec(), pred[n..].to_vec())
        } else {
            (vec![0.0; n], vec![0.0; n])
        };
        let last = w.len() - 1;
        Ok(inp
            .rows
            .iter()
            .enumerate()
            .filter(|&(_, &r)| w.is_valid(r, last))
            .map(|(k, &r)| {
                let init_m = init[k] * s;
                PredictionRecord {
                    seq_id: w.seq_id.clone(),
                    scene: w.scene,
                    epoch_time: w.last_time(),
                    sat_id: w.sat_ids[r].clone().expect("observed row has an id"),
                    init: init_m,
                    eps_hat: eps_hat[k],
                    fine: diffusion::refine(init_m, eps_hat[k], s),
                    u_hat: u_hat[k],
                    gt: w.gt_errors[r],
                }
            })
            .collect())
    }
}

/// Ground-truth errors per compact row and which rows carry a label.
pub fn labels<S: Scalar>(w: &FeatureWindow, inp: &WindowInput<S>) -> (Vec<f64>, Vec<bool>) {
    let last = w.len() - 1;
    inp.rows
        .iter()
        .map(|&r| match w.gt_errors[r] {
            Some(e) if w.is_valid(r, last) => (e, true),
            _ => (0.0, false),
        })
        .unzip()
}
