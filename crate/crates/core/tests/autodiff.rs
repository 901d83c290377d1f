use diffgnss_core::autodiff::{grad_check, ConvPadding, Graph, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type T = Tensor<f64>;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> T {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// `sum(op(x) * w)` for a fixed random `w`, so every output coordinate
/// contributes with a different weight.
fn weighted<F>(op: F, seed: u64) -> impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var, TensorError>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var, TensorError>,
{
    move |g, x| {
        let y = op(g, x)?;
        let shape = g.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&shape, &mut rng));
        let p = g.mul(y, w)?;
        let n: usize = shape.iter().product();
        let flat = g.reshape(p, vec![n])?;
        g.sum_over_axis(flat, 0)
    }
}

fn check<F>(op: F, shape: &[usize], seed: u64)
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    let err = grad_check(weighted(op, seed ^ 0xabc), &x, H).unwrap();
    assert!(err < TOL, "relative error {err:e} for shape {shape:?}");
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..4, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_unary((m, n, seed) in dims()) {
        check(|g, x| g.sigmoid(x), &[m, n], seed);
        check(|g, x| g.tanh(x), &[m, n], seed);
        check(|g, x| g.softplus(x), &[m, n], seed);
        check(|g, x| g.exp(x), &[m, n], seed);
        check(|g, x| g.silu(x), &[m, n], seed);
        check(|g, x| g.scale(x, -2.5), &[m, n], seed);
        check(|g, x| g.softmax(x), &[m, n], seed);
    }

    #[test]
    fn relu_away_from_kink((m, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![m, n], |_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen() { v } else { -v }
        });
        let err = grad_check(weighted(|g, x| g.relu(x), seed), &x, H).unwrap();
        prop_assert!(err < TOL);
    }

    #[test]
    fn binary_with_broadcast((m, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for other in [vec![m, n], vec![n], vec![1, n], vec![m, 1]] {
            let b = random(&other, &mut rng);
            let (b1, b2, b3) = (b.clone(), b.clone(), b.clone());
            check(move |g, x| { let c = g.constant(b1.clone()); g.add(x, c) }, &[m, n], seed);
            check(move |g, x| { let c = g.constant(b2.clone()); g.sub(c, x) }, &[m, n], seed);
            check(move |g, x| { let c = g.constant(b3.clone()); g.mul(x, c) }, &[m, n], seed);
        }
        // gradient into the broadcast operand
        let a = random(&[m, n], &mut rng);
        check(move |g, x| { let c = g.constant(a.clone()); g.mul(c, x) }, &[n], seed);
        check(|g, x| g.mul(x, x), &[m, n], seed);
    }

    #[test]
    fn matmul_both_sides((m, k, seed) in dims(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let b = random(&[k, n], &mut rng);
        let a = random(&[n, m], &mut rng);
        check(move |g, x| { let c = g.constant(b.clone()); g.matmul(x, c) }, &[m, k], seed);
        check(move |g, x| { let c = g.constant(a.clone()); g.matmul(c, x) }, &[m, k], seed);
    }

    #[test]
    fn reductions((m, n, seed) in dims(), l in 1usize..4) {
        for axis in 0..3 {
            check(move |g, x| g.sum_over_axis(x, axis), &[m, n, l], seed);
            check(move |g, x| g.mean_over_axis(x, axis), &[m, n, l], seed);
            check(move |g, x| g.max_over_axis(x, axis), &[m, n, l], seed);
        }
    }

    #[test]
    fn structural((m, n, seed) in dims()) {
        check(|g, x| g.transpose(x), &[m, n], seed);
        check(move |g, x| g.reshape(x, vec![n, m]), &[m, n], seed);
        check(|g, x| g.concat(&[x, x], 1), &[m, n], seed);
        check(|g, x| { let y = g.sigmoid(x)?; g.concat(&[y, x], 0) }, &[m, n], seed);
        check(move |g, x| g.slice(x, 1, n / 2, n), &[m, n], seed);
        let idx: Vec<Option<usize>> = (0..m + 2).map(|i| if i % 3 == 2 { None } else { Some(i % m) }).collect();
        check(move |g, x| g.gather_rows(x, &idx), &[m, n], seed);
    }

    #[test]
    fn depthwise_conv((b, l, seed) in dims(), c in 1usize..4, width in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let k = random(&[c, width], &mut rng);
        let xv = random(&[b, l, c], &mut rng);
        for pad in [ConvPadding::Causal, ConvPadding::Same] {
            let kk = k.clone();
            check(move |g, x| { let w = g.constant(kk.clone()); g.conv1d_depthwise(x, w, pad) }, &[b, l, c], seed);
            let xx = xv.clone();
            check(move |g, w| { let x = g.constant(xx.clone()); g.conv1d_depthwise(x, w, pad) }, &[c, width], seed);
        }
    }
}

struct ScanCase {
    u: T,
    delta: T,
    a: T,
    b: T,
    c: T,
}

fn scan_case(seed: u64) -> ScanCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bs, len, inner, state) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(1..5));
    ScanCase {
        u: random(&[bs, len, inner], &mut rng),
        delta: Tensor::from_fn(vec![bs, len, inner], |_| rng.gen_range(0.01..1.0)),
        a: Tensor::from_fn(vec![inner, state], |_| -rng.gen_range(0.1..2.0)),
        b: random(&[bs, len, state], &mut rng),
        c: random(&[bs, len, state], &mut rng),
    }
}

/// Direct recurrence over `(batch, inner, state)` with an explicit state.
fn naive_scan(k: &ScanCase) -> Vec<f64> {
    let (bs, len, inner) = (k.u.shape()[0], k.u.shape()[1], k.u.shape()[2]);
    let state = k.a.shape()[1];
    let at = |t: &T, i: &[usize]| {
        let s = t.shape();
        let mut off = 0;
        for (d, &x) in i.iter().enumerate() {
            off = off * s[d] + x;
        }
        t.data()[off]
    };
    let mut y = vec![0.0; bs * len * inner];
    for bi in 0..bs {
        for e in 0..inner {
            let mut h = vec![0.0; state];
            for l in 0..len {
                let dt = at(&k.delta, &[bi, l, e]);
                let x = at(&k.u, &[bi, l, e]);
                let mut acc = 0.0;
                for s in 0..state {
                    h[s] = (dt * at(&k.a, &[e, s])).exp() * h[s] + dt * at(&k.b, &[bi, l, s]) * x;
                    acc += at(&k.c, &[bi, l, s]) * h[s];
                }
                y[(bi * len + l) * inner + e] = acc;
            }
        }
    }
    y
}

#[test]
fn selective_scan_matches_naive_recurrence() {
    for seed in 0..100 {
        let k = scan_case(seed);
        let mut g = Graph::<f64>::new();
        let vars = [&k.u, &k.delta, &k.a, &k.b, &k.c].map(|t| g.constant(t.clone()));
        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
        let expect = naive_scan(&k);
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-5 || (got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn selective_scan_gradients() {
    for seed in 0..12 {
        let k = scan_case(seed);
        let inputs = [k.u.clone(), k.delta.clone(), k.a.clone(), k.b.clone(), k.c.clone()];
        for which in 0..5 {
            let fixed = inputs.clone();
            let f = move |g: &mut Graph<'_, f64>, x: Var| {
                let v: Vec<Var> =
                    (0..5).map(|i| if i == which { x } else { g.constant(fixed[i].clone()) }).collect();
                g.selective_scan(v[0], v[1], v[2], v[3], v[4])
            };
            let err = grad_check(weighted(f, seed), &inputs[which], H).unwrap();
            assert!(err < 1e-5, "seed {seed} input {which}: {err:e}");
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    let c = g.constant(Tensor::zeros(vec![4]));
    assert!(g.add(a, c).is_err());
    assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(vec![2], 1000.0));
    assert!(matches!(g.exp(a), Err(TensorError::NonFinite { .. })));
}

#[test]
fn backward_twice_needs_reset() {
    let mut g = Graph::<f64>::new();
    let x = g.var(Tensor::full(vec![1], 3.0));
    let y = g.mul(x, x).unwrap();
    let y = g.reshape(y, Vec::<usize>::new()).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    assert!(matches!(g.backward(y), Err(TensorError::AlreadyBackpropagated)));
    g.reset();
    assert!(g.grads_are_clear());
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
}
