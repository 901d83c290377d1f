//! Layers built on the autodiff graph: linear maps, MLPs, LSTM/GRU cells, a
//! Mamba block and a single-head self-attention layer.
//!
//! Layers only hold names and sizes. Parameters live in a [`ParamStore`] and are
//! fetched through the graph, so the same layer definition serves `f32`
//! training and `f64` gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvPadding, Graph, ParamStore, Tensor, TensorError, Var};
use crate::scalar::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic initializer: every parameter draws from its own stream keyed by
/// (seed, name), so adding or removing modules leaves the others unchanged.
pub struct Init<'a, S: Scalar> {
    pub store: &'a mut ParamStore<S>,
    pub seed: u64,
}

impl<S: Scalar> Init<'_, S> {
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let mut rng = self.rng_for(name);
        let t = Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.gen_range(-bound..bound)));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape.to_vec(), S::lit(value)));
    }

    pub fn with(&mut self, name: &str, shape: &[usize], f: impl FnMut(usize) -> f64) {
        let mut f = f;
        self.store.insert(name, Tensor::from_fn(shape.to_vec(), |i| S::lit(f(i))));
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self { name: name.into(), inputs, outputs, bias: true }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn w(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn b(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        let bound = 1.0 / (self.inputs as f64).sqrt();
        init.uniform(&self.w(), &[self.inputs, self.outputs], bound);
        if self.bias {
            init.constant(&self.b(), &[self.outputs], 0.0);
        }
    }

    /// Applies to the last axis of `x`; leading axes are preserved.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.inputs {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("{}: expected last dim {}, got {shape:?}", self.name, self.inputs),
            });
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 { x } else { g.reshape(x, vec![rows, last])? };
        let w = g.param(&self.w())?;
        let mut y = g.matmul(flat, w)?;
        if self.bias {
            let b = g.param(&self.b())?;
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.outputs;
            g.reshape(y, out)
        }
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        self.layers.iter().for_each(|l| l.init(init));
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < n {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}

/// Sizes of a Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MambaDims {
    pub model: usize,
    pub state: usize,
    pub expand: usize,
    pub conv_width: usize,
}

impl MambaDims {
    pub fn inner(&self) -> usize {
        self.model * self.expand
    }

    pub fn dt_rank(&self) -> usize {
        self.model.div_ceil(16)
    }
}

/// Residual Mamba block: input projection, causal depthwise convolution,
/// selective scan with input-dependent (Δ, B, C), SiLU gate and output
/// projection. `A = -exp(a_log)` keeps the state transition contractive.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub name: String,
    pub dims: MambaDims,
    in_proj: Linear,
    x_proj: Linear,
    dt_proj: Linear,
    out_proj: Linear,
}

impl MambaBlock {
    pub fn new(name: &str, dims: MambaDims) -> Self {
        let inner = dims.inner();
        Self {
            name: name.to_string(),
            dims,
            in_proj: Linear::new(format!("{name}.in_proj"), dims.model, 2 * inner).no_bias(),
            x_proj: Linear::new(format!("{name}.x_proj"), inner, dims.dt_rank() + 2 * dims.state).no_bias(),
            dt_proj: Linear::new(format!("{name}.dt_proj"), dims.dt_rank(), inner),
            out_proj: Linear::new(format!("{name}.out_proj"), inner, dims.model).no_bias(),
        }
    }

    fn p(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        let inner = self.dims.inner();
        let state = self.dims.state;
        let width = self.dims.conv_width;
        self.in_proj.init(init);
        self.x_proj.init(init);
        self.dt_proj.init(init);
        self.out_proj.init(init);
        init.uniform(&self.p("conv.weight"), &[inner, width], 1.0 / (width as f64).sqrt());
        init.constant(&self.p("conv.bias"), &[inner], 0.0);
        // S4D-real: A[:, s] = -(s + 1)
        init.with(&self.p("a_log"), &[inner, state], |i| ((i % state + 1) as f64).ln());
        init.constant(&self.p("d"), &[inner], 1.0);
        // dt bias so that softplus(bias) is log-uniform in [1e-3, 1e-1]
        let mut rng = init.rng_for(&self.p("dt_bias"));
        let bias: Vec<f64> = (0..inner)
            .map(|_| {
                let dt = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        init.with(&format!("{}.dt_proj.bias", self.name), &[inner], |i| bias[i]);
    }

    /// `x: [batch, len, model] -> [batch, len, model]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dims.model {
            return Err(TensorError::Shape { op: "mamba", detail: format!("{}: input {shape:?}", self.name) });
        }
        let inner = self.dims.inner();
        let state = self.dims.state;
        let rank = self.dims.dt_rank();
        let xz = self.in_proj.forward(g, x)?;
        let xs = g.slice(xz, 2, 0, inner)?;
        let z = g.slice(xz, 2, inner, 2 * inner)?;
        let kernel = g.param(&self.p("conv.weight"))?;
        let conv_b = g.param(&self.p("conv.bias"))?;
        let xs = g.conv1d_depthwise(xs, kernel, ConvPadding::Causal)?;
        let xs = g.add(xs, conv_b)?;
        let xs = g.silu(xs)?;
        let proj = self.x_proj.forward(g, xs)?;
        let dt_low = g.slice(proj, 2, 0, rank)?;
        let b = g.slice(proj, 2, rank, rank + state)?;
        let c = g.slice(proj, 2, rank + state, rank + 2 * state)?;
        let dt = self.dt_proj.forward(g, dt_low)?;
        let delta = g.softplus(dt)?;
        let a_log = g.param(&self.p("a_log"))?;
        let a = g.exp(a_log)?;
        let a = g.scale(a, -S::one())?;
        let y = g.selective_scan(xs, delta, a, b, c)?;
        let d = g.param(&self.p("d"))?;
        let skip = g.mul(xs, d)?;
        let y = g.add(y, skip)?;
        let gate = g.silu(z)?;
        let y = g.mul(y, gate)?;
        let y = self.out_proj.forward(g, y)?;
        g.add(x, y)
    }
}

/// Single-layer LSTM.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self { name: name.to_string(), input, hidden }
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h = self.hidden;
        init.uniform(&format!("{}.w_x", self.name), &[self.input, 4 * h], bound);
        init.uniform(&format!("{}.w_h", self.name), &[h, 4 * h], bound);
        // forget-gate bias 1
        init.with(&format!("{}.bias", self.name), &[4 * h], |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 });
    }

    /// Runs over axis 1 of `x: [batch, len, input]`. Where `step_mask[b, l]`
    /// is zero the state is carried over unchanged. Returns the hidden state
    /// after every step, each `[batch, hidden]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, step_mask: Option<&Tensor<S>>) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(TensorError::Shape { op: "lstm", detail: format!("{}: input {shape:?}", self.name) });
        }
        let (bsz, len, h) = (shape[0], shape[1], self.hidden);
        let flat = g.reshape(x, vec![bsz * len, self.input])?;
        let wx = g.param(&format!("{}.w_x", self.name))?;
        let wh = g.param(&format!("{}.w_h", self.name))?;
        let bias = g.param(&format!("{}.bias", self.name))?;
        let xw = g.matmul(flat, wx)?;
        let xw = g.add(xw, bias)?;
        let xw = g.reshape(xw, vec![bsz, len, 4 * h])?;
        let mut hs = g.constant(Tensor::zeros(vec![bsz, h]));
        let mut cs = g.constant(Tensor::zeros(vec![bsz, h]));
        let mut outs = Vec::with_capacity(len);
        for l in 0..len {
            let step = g.slice(xw, 1, l, l + 1)?;
            let step = g.reshape(step, vec![bsz, 4 * h])?;
            let rec = g.matmul(hs, wh)?;
            let pre = g.add(step, rec)?;
            let i_g = g.slice(pre, 1, 0, h)?;
            let f_g = g.slice(pre, 1, h, 2 * h)?;
            let c_g = g.slice(pre, 1, 2 * h, 3 * h)?;
            let o_g = g.slice(pre, 1, 3 * h, 4 * h)?;
            let i_g = g.sigmoid(i_g)?;
            let f_g = g.sigmoid(f_g)?;
            let c_g = g.tanh(c_g)?;
            let o_g = g.sigmoid(o_g)?;
            let keep = g.mul(f_g, cs)?;
            let write = g.mul(i_g, c_g)?;
            let c_new = g.add(keep, write)?;
            let tc = g.tanh(c_new)?;
            let h_new = g.mul(o_g, tc)?;
            match step_mask {
                Some(m) => {
                    let col = Tensor::from_fn(vec![bsz, 1], |b| m.data()[b * len + l]);
                    let mv = g.constant(col);
                    hs = blend(g, hs, h_new, mv)?;
                    cs = blend(g, cs, c_new, mv)?;
                }
                None => {
                    hs = h_new;
                    cs = c_new;
                }
            }
            outs.push(hs);
        }
        Ok(outs)
    }
}

/// `old + m * (new - old)`.
fn blend<S: Scalar>(g: &mut Graph<'_, S>, old: Var, new: Var, m: Var) -> Result<Var> {
    let d = g.sub(new, old)?;
    let d = g.mul(d, m)?;
    g.add(old, d)
}

/// GRU cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self { name: name.to_string(), input, hidden }
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h = self.hidden;
        init.uniform(&format!("{}.w_x", self.name), &[self.input, 3 * h], bound);
        init.uniform(&format!("{}.w_h", self.name), &[h, 3 * h], bound);
        init.constant(&format!("{}.b_x", self.name), &[3 * h], 0.0);
        init.constant(&format!("{}.b_h", self.name), &[3 * h], 0.0);
    }

    /// One update: `x: [batch, input]`, `h: [batch, hidden]`.
    pub fn step<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let wx = g.param(&format!("{}.w_x", self.name))?;
        let wh = g.param(&format!("{}.w_h", self.name))?;
        let bx = g.param(&format!("{}.b_x", self.name))?;
        let bh = g.param(&format!("{}.b_h", self.name))?;
        let gx = g.matmul(x, wx)?;
        let gx = g.add(gx, bx)?;
        let gh = g.matmul(h, wh)?;
        let gh = g.add(gh, bh)?;
        let xr = g.slice(gx, 1, 0, hd)?;
        let xz = g.slice(gx, 1, hd, 2 * hd)?;
        let xn = g.slice(gx, 1, 2 * hd, 3 * hd)?;
        let hr = g.slice(gh, 1, 0, hd)?;
        let hz = g.slice(gh, 1, hd, 2 * hd)?;
        let hn = g.slice(gh, 1, 2 * hd, 3 * hd)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        // h' = (1 - z) n + z h
        blend(g, n, h, z)
    }
}

/// Single-head self-attention over the rows of `[n, dim]` with residual
/// connections and a two-layer feed-forward block.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn: Mlp,
}

impl SelfAttention {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            dim,
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            o: Linear::new(format!("{name}.o"), dim, dim),
            ffn: Mlp::new(&format!("{name}.ffn"), &[dim, 2 * dim, dim]),
        }
    }

    pub fn init<S: Scalar>(&self, init: &mut Init<'_, S>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(init);
        }
        self.ffn.init(init);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, S::lit(1.0 / (self.dim as f64).sqrt()))?;
        let attn = g.softmax(scores)?;
        let mixed = g.matmul(attn, v)?;
        let mixed = self.o.forward(g, mixed)?;
        let x = g.add(x, mixed)?;
        let f = self.ffn.forward(g, x)?;
        g.add(x, f)
    }
}

/// Sinusoidal embedding of a (diffusion) timestep.
pub fn sinusoidal_embedding<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(vec![1, dim], |i| {
        let k = (i % half.max(1)) as f64;
        let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
        let v = if i < half { (t * freq).sin() } else { (t * freq).cos() };
        S::lit(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with<F: FnOnce(&mut Init<'_, f64>)>(f: F) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed: 11 };
        f(&mut init);
        store
    }

    #[test]
    fn mamba_transition_is_contractive() {
        let dims = MambaDims { model: 8, state: 4, expand: 2, conv_width: 4 };
        let block = MambaBlock::new("m", dims);
        let store = store_with(|i| block.init(i));
        let a_log = store.get("m.a_log").unwrap();
        for &v in a_log.data() {
            assert!(-v.exp() < 0.0);
        }
    }

    #[test]
    fn mamba_shapes() {
        let dims = MambaDims { model: 8, state: 4, expand: 2, conv_width: 4 };
        let block = MambaBlock::new("m", dims);
        let store = store_with(|i| block.init(i));
        let mut g = Graph::with_params(&store, false);
        let x = g.constant(Tensor::from_fn(vec![3, 5, 8], |i| (i as f64 * 0.37).sin()));
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[3, 5, 8]);
    }

    #[test]
    fn init_is_keyed_by_name() {
        let a = store_with(|i| {
            Linear::new("a", 3, 4).init(i);
            Linear::new("b", 3, 4).init(i);
        });
        let b = store_with(|i| Linear::new("b", 3, 4).init(i));
        assert_eq!(a.get("b.weight").unwrap(), b.get("b.weight").unwrap());
    }

    #[test]
    fn lstm_mask_freezes_state() {
        let lstm = Lstm::new("l", 2, 3);
        let store = store_with(|i| lstm.init(i));
        let mut g = Graph::with_params(&store, false);
        let x = g.constant(Tensor::from_fn(vec![1, 3, 2], |i| i as f64 * 0.1));
        let mask = Tensor::from_f64(vec![1, 3], &[1.0, 0.0, 0.0]).unwrap();
        let hs = lstm.forward(&mut g, x, Some(&mask)).unwrap();
        assert_eq!(g.value(hs[0]), g.value(hs[2]));
    }
}
