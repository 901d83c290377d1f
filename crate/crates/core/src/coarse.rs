//! Coarse pseudorange-error estimator and the baseline backbones that can
//! stand in for it.
//!
//! Windows are processed compactly: only satellite rows observed at some
//! epoch of the window enter the network (`n ≤ N_max`), in canonical order.
//! Padding rows never reach the graph, so they cannot leak into any output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvPadding, Graph, Tensor, TensorError, Var};
use crate::gnss::{FeatureWindow, NUM_FEATURES};
use crate::nn::{Init, Lstm, MambaBlock, MambaDims, Mlp, SelfAttention};
use crate::scalar::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Encoder, temporal Mamba, bidirectional spatial Mamba.
    #[default]
    Mamba,
    /// As `Mamba` with a forward-only spatial pass.
    UniMamba,
    /// Single-epoch LSTM over the satellites of the last epoch.
    Lstm,
    /// Per-satellite temporal LSTM followed by self-attention across satellites.
    Transformer,
}

impl std::str::FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mamba" => Ok(Backbone::Mamba),
            "uni_mamba" => Ok(Backbone::UniMamba),
            "lstm" => Ok(Backbone::Lstm),
            "transformer" => Ok(Backbone::Transformer),
            _ => Err(format!("unknown backbone `{s}` (mamba, uni_mamba, lstm, transformer)")),
        }
    }
}

/// Graph-ready arrays of one window, restricted to observed satellites.
#[derive(Clone, Debug)]
pub struct WindowInput<S: Scalar> {
    /// Window row of each compact row.
    pub rows: Vec<usize>,
    pub steps: usize,
    /// `[n, T, 5]`, zero where masked.
    pub x: Tensor<S>,
    /// `[n, T, 1]`.
    pub mask: Tensor<S>,
    /// `[n, T]`.
    pub step_mask: Tensor<S>,
    /// `[n, 1]`, reciprocal of the number of valid epochs.
    pub inv_count: Tensor<S>,
    /// `[n, 1]`, observed at the last epoch.
    pub target: Tensor<S>,
    /// `[T, 1]`, epoch time relative to the last epoch over the clip length.
    pub rel_time: Tensor<S>,
}

impl<S: Scalar> WindowInput<S> {
    pub fn new(w: &FeatureWindow, clip_len: f64) -> Result<Self> {
        let t = w.len();
        let rows: Vec<usize> = (0..w.n_max()).filter(|&k| (0..t).any(|s| w.is_valid(k, s))).collect();
        if rows.is_empty() {
            return Err(TensorError::Shape { op: "window", detail: format!("{} has no observed satellite", w.seq_id) });
        }
        let n = rows.len();
        let mut x = Vec::with_capacity(n * t * NUM_FEATURES);
        let mut m = Vec::with_capacity(n * t);
        for &r in &rows {
            for s in 0..t {
                let valid = w.is_valid(r, s);
                m.push(if valid { S::one() } else { S::zero() });
                x.extend(w.feature(r, s).iter().map(|&v| if valid { S::lit(v) } else { S::zero() }));
            }
        }
        let inv: Vec<S> = m.chunks(t).map(|c| S::one() / c.iter().fold(S::zero(), |a, &b| a + b).max(S::one())).collect();
        let target: Vec<S> = m.chunks(t).map(|c| c[t - 1]).collect();
        let last = w.last_time();
        let rel: Vec<S> = w.epoch_times.iter().map(|&e| S::lit((e - last) / clip_len)).collect();
        Ok(Self {
            steps: t,
            x: Tensor::new(vec![n, t, NUM_FEATURES], x)?,
            mask: Tensor::new(vec![n, t, 1], m.clone())?,
            step_mask: Tensor::new(vec![n, t], m)?,
            inv_count: Tensor::new(vec![n, 1], inv)?,
            target: Tensor::new(vec![n, 1], target)?,
            rel_time: Tensor::new(vec![t, 1], rel)?,
            rows,
        })
    }

    pub fn sats(&self) -> usize {
        self.rows.len()
    }
}

/// Intermediate and final coarse-stage values, all in compact rows.
#[derive(Clone, Copy, Debug)]
pub struct CoarseOut {
    /// `[n, T, H]`; absent for the baseline backbones.
    pub f_in: Option<Var>,
    /// `[n, H]`.
    pub f_t: Option<Var>,
    /// `[1, H]`.
    pub f_s: Option<Var>,
    /// `[n, 1]` in normalized error units, zero for non-target rows.
    pub init: Var,
}

#[derive(Clone, Debug)]
pub struct CoarseNet {
    pub backbone: Backbone,
    pub hidden: usize,
    feat_mlp: Mlp,
    time_mlp: Mlp,
    conv_width: usize,
    temporal: MambaBlock,
    spatial_fwd: MambaBlock,
    spatial_bwd: MambaBlock,
    spatial_mlp: Mlp,
    lstm: Lstm,
    attention: SelfAttention,
    head: Mlp,
}

impl CoarseNet {
    pub fn new(backbone: Backbone, dims: MambaDims) -> Self {
        let h = dims.model;
        let spatial_in = if backbone == Backbone::UniMamba { h } else { 2 * h };
        let head_in = match backbone {
            Backbone::Mamba | Backbone::UniMamba => 2 * h,
            _ => h,
        };
        Self {
            backbone,
            hidden: h,
            feat_mlp: Mlp::new("coarse.enc.feat", &[NUM_FEATURES, h, h]),
            time_mlp: Mlp::new("coarse.enc.time", &[1, h, h]),
            conv_width: 3,
            temporal: MambaBlock::new("coarse.temporal", dims),
            spatial_fwd: MambaBlock::new("coarse.spatial_fwd", dims),
            spatial_bwd: MambaBlock::new("coarse.spatial_bwd", dims),
            spatial_mlp: Mlp::new("coarse.spatial_mlp", &[spatial_in, h, h]),
            lstm: Lstm::new("coarse.lstm", NUM_FEATURES, h),
            attention: SelfAttention::new("coarse.attention", h),
            head: Mlp::new("coarse.head", &[head_in, h, 1]),
        }
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        match self.backbone {
            Backbone::Mamba | Backbone::UniMamba => {
                self.feat_mlp.init(init);
                self.time_mlp.init(init);
                let h = self.hidden;
                init.uniform("coarse.enc.conv.weight", &[h, self.conv_width], 1.0 / (self.conv_width as f64).sqrt());
                init.constant("coarse.enc.conv.bias", &[h], 0.0);
                self.temporal.init(init);
                self.spatial_fwd.init(init);
                if self.backbone == Backbone::Mamba {
                    self.spatial_bwd.init(init);
                }
                self.spatial_mlp.init(init);
            }
            Backbone::Lstm => self.lstm.init(init),
            Backbone::Transformer => {
                self.lstm.init(init);
                self.attention.init(init);
            }
        }
        self.head.init(init);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, inp: &WindowInput<S>) -> Result<CoarseOut> {
        let target = g.constant(inp.target.clone());
        let out = match self.backbone {
            Backbone::Mamba | Backbone::UniMamba => {
                let f_in = self.encode(g, inp)?;
                let f_t = self.temporal_pool(g, inp, f_in)?;
                let f_s = self.spatial(g, f_t)?;
                let n = inp.sats();
                let rep = g.gather_rows(f_s, &vec![Some(0); n])?;
                let z = g.concat(&[f_t, rep], 1)?;
                let y = self.head.forward(g, z)?;
                CoarseOut { f_in: Some(f_in), f_t: Some(f_t), f_s: Some(f_s), init: y }
            }
            Backbone::Lstm => {
                let n = inp.sats();
                let x = g.constant(inp.x.clone());
                let last = g.slice(x, 1, inp.steps - 1, inp.steps)?;
                let seq = g.reshape(last, vec![1, n, NUM_FEATURES])?;
                let hs = self.lstm.forward(g, seq, None)?;
                let h = g.concat(&hs, 0)?;
                CoarseOut { f_in: None, f_t: None, f_s: None, init: self.head.forward(g, h)? }
            }
            Backbone::Transformer => {
                let x = g.constant(inp.x.clone());
                let hs = self.lstm.forward(g, x, Some(&inp.step_mask))?;
                let h = *hs.last().expect("window has epochs");
                let h = self.attention.forward(g, h)?;
                CoarseOut { f_in: None, f_t: None, f_s: None, init: self.head.forward(g, h)? }
            }
        };
        let init = g.mul(out.init, target)?;
        Ok(CoarseOut { init, ..out })
    }

    /// Feature and relative-time embeddings, then a same-padded temporal
    /// depthwise convolution; masked positions are zeroed after each stage.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<'_, S>, inp: &WindowInput<S>) -> Result<Var> {
        let mask = g.constant(inp.mask.clone());
        let x = g.constant(inp.x.clone());
        let x = g.mul(x, mask)?;
        let f = self.feat_mlp.forward(g, x)?;
        let rel = g.constant(inp.rel_time.clone());
        let te = self.time_mlp.forward(g, rel)?;
        let f = g.add(f, te)?;
        let f = g.mul(f, mask)?;
        let k = g.param("coarse.enc.conv.weight")?;
        let b = g.param("coarse.enc.conv.bias")?;
        let f = g.conv1d_depthwise(f, k, ConvPadding::Same)?;
        let f = g.add(f, b)?;
        g.mul(f, mask)
    }

    /// Temporal Mamba per satellite, then the mean over valid epochs.
    pub fn temporal_pool<S: Scalar>(&self, g: &mut Graph<'_, S>, inp: &WindowInput<S>, f_in: Var) -> Result<Var> {
        let y = self.temporal.forward(g, f_in)?;
        let mask = g.constant(inp.mask.clone());
        let y = g.mul(y, mask)?;
        let s = g.sum_over_axis(y, 1)?;
        let inv = g.constant(inp.inv_count.clone());
        g.mul(s, inv)
    }

    /// Mamba passes along the satellite axis in both directions; the final
    /// token of each pass summarizes the window. Returns `[1, H]`.
    pub fn spatial<S: Scalar>(&self, g: &mut Graph<'_, S>, f_t: Var) -> Result<Var> {
        let n = g.shape(f_t)[0];
        let h = self.hidden;
        let last = |g: &mut Graph<'_, S>, block: &MambaBlock, seq: Var| -> Result<Var> {
            let s = g.reshape(seq, vec![1, n, h])?;
            let y = block.forward(g, s)?;
            let y = g.slice(y, 1, n - 1, n)?;
            g.reshape(y, vec![1, h])
        };
        let fwd = last(g, &self.spatial_fwd, f_t)?;
        let z = if self.backbone == Backbone::UniMamba {
            fwd
        } else {
            let rev: Vec<Option<usize>> = (0..n).rev().map(Some).collect();
            let r = g.gather_rows(f_t, &rev)?;
            let bwd = last(g, &self.spatial_bwd, r)?;
            g.concat(&[fwd, bwd], 1)?
        };
        self.spatial_mlp.forward(g, z)
    }
}

