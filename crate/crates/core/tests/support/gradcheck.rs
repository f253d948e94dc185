//! Central finite-difference checks for every differentiable op.
//!
//! Each tensor op is reduced to a scalar `L = sum(r * op(x))` with a fixed
//! random `r`, so the analytic input gradient is `op_backward(r)`.

use dunet::tensor::{self, Mode, PoolKind, Tensor, BN_EPS, BN_MOMENTUM};
use dunet::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SHAPES: u64 = 5;

/// Largest relative error seen and where.
#[derive(Clone, Debug, Default)]
pub struct Worst {
    pub err: f64,
    pub at: String,
    pub checks: usize,
}

impl Worst {
    fn note(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checks += 1;
        if err > self.err || err.is_nan() {
            self.err = err;
            self.at = at();
        }
    }

    fn merge(&mut self, other: Worst) {
        self.checks += other.checks;
        if other.err > self.err || other.err.is_nan() {
            self.err = other.err;
            self.at = other.at;
        }
    }

    pub fn passed(&self) -> bool {
        self.err < TOL
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1e-8)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so relu has no kink within `H`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values spaced 0.01 apart so a max window never changes winner within `H`.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` with central differences of `f` around `x`.
fn check(worst: &mut Worst, label: &str, x: &Tensor, analytic: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64) {
    assert_eq!(x.shape(), analytic.shape(), "{label}: gradient shape");
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        xp.data_mut()[i] = v + H;
        let up = f(&xp);
        xp.data_mut()[i] = v - H;
        let down = f(&xp);
        xp.data_mut()[i] = v;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.data()[i];
        worst.note(rel_err(a, numeric), || format!("{label}[{i}]: analytic {a} numeric {numeric}"));
    }
}

pub fn conv2d() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, f) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3][rng.gen_range(0..2)];
        let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=k / 2));
        let (h, w) = (rng.gen_range(k..=6), rng.gen_range(k..=6));
        let x = random(&mut rng, &[n, c, h, w]);
        let wt = random(&mut rng, &[f, c, k, k]);
        let b = random(&mut rng, &[f]);
        let y = tensor::conv2d(&x, &wt, &b, stride, pad).unwrap();
        let r = random(&mut rng, y.shape());
        let g = tensor::conv2d_backward(&x, &wt, stride, pad, &r, true).unwrap();
        let label = format!("conv2d {:?} k{k} s{stride} p{pad}", x.shape());
        check(&mut worst, &label, &x, g.input.as_ref().unwrap(), &mut |x| dot(&r, &tensor::conv2d(x, &wt, &b, stride, pad).unwrap()));
        check(&mut worst, &label, &wt, &g.weight, &mut |wt| dot(&r, &tensor::conv2d(&x, wt, &b, stride, pad).unwrap()));
        check(&mut worst, &label, &b, &g.bias, &mut |b| dot(&r, &tensor::conv2d(&x, &wt, b, stride, pad).unwrap()));
    }
    worst
}

fn bn_forward(x: &Tensor, scale: &Tensor, shift: &Tensor, mean: &Tensor, var: &Tensor, mode: Mode) -> tensor::BnOutput {
    tensor::batchnorm(x, scale, shift, mean, var, mode, BN_EPS, BN_MOMENTUM).unwrap()
}

pub fn batchnorm() -> Worst {
    let mut worst = Worst::default();
    for mode in [Mode::Train, Mode::Infer] {
        for seed in 0..SHAPES {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let c = rng.gen_range(1..=3);
            let shape = if seed == 0 { vec![rng.gen_range(2..=4), c] } else { vec![rng.gen_range(1..=3), c, rng.gen_range(1..=4), rng.gen_range(2..=4)] };
            let x = random(&mut rng, &shape);
            let scale = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5));
            let shift = random(&mut rng, &[c]);
            let mean = random(&mut rng, &[c]);
            let var = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..2.0));
            let out = bn_forward(&x, &scale, &shift, &mean, &var, mode);
            let r = random(&mut rng, out.output.shape());
            let (gx, gs, gb) = tensor::batchnorm_backward(&scale, &out.cache, &r, true).unwrap();
            let label = format!("batchnorm {mode:?} {shape:?}");
            check(&mut worst, &label, &x, &gx.unwrap(), &mut |x| dot(&r, &bn_forward(x, &scale, &shift, &mean, &var, mode).output));
            check(&mut worst, &label, &scale, &gs, &mut |s| dot(&r, &bn_forward(&x, s, &shift, &mean, &var, mode).output));
            check(&mut worst, &label, &shift, &gb, &mut |s| dot(&r, &bn_forward(&x, &scale, s, &mean, &var, mode).output));
        }
    }
    worst
}

pub fn relu() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let x = away_from_zero(&mut rng, &shape);
        let r = random(&mut rng, &shape);
        let g = tensor::relu_backward(&x, &r);
        check(&mut worst, &format!("relu {shape:?}"), &x, &g, &mut |x| dot(&r, &tensor::relu(x)));
    }
    worst
}

pub fn pool() -> Worst {
    let mut worst = Worst::default();
    for kind in [PoolKind::Max, PoolKind::Avg] {
        for seed in 0..SHAPES {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=k);
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(k..=6), rng.gen_range(k..=6)];
            let x = distinct(&mut rng, &shape);
            let out = tensor::pool(&x, kind, k, stride).unwrap();
            let r = random(&mut rng, out.output.shape());
            let g = tensor::pool_backward(&shape, kind, k, stride, &out.argmax, &r).unwrap();
            let label = format!("pool {kind:?} {shape:?} k{k} s{stride}");
            check(&mut worst, &label, &x, &g, &mut |x| dot(&r, &tensor::pool(x, kind, k, stride).unwrap().output));
        }
    }
    worst
}

pub fn upsample() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let x = random(&mut rng, &shape);
        let y = tensor::upsample2(&x).unwrap();
        let r = random(&mut rng, y.shape());
        let g = tensor::upsample2_backward(&r).unwrap();
        check(&mut worst, &format!("upsample2 {shape:?}"), &x, &g, &mut |x| dot(&r, &tensor::upsample2(x).unwrap()));
    }
    worst
}

pub fn concat_and_add() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let channels: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=3)).collect();
        let parts: Vec<Tensor> = channels.iter().map(|&c| random(&mut rng, &[n, c, h, w])).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let y = tensor::concat_channels(&refs).unwrap();
        let r = random(&mut rng, y.shape());
        let grads = tensor::concat_channels_backward(&channels, &r).unwrap();
        for (i, g) in grads.iter().enumerate() {
            check(&mut worst, &format!("concat part {i} of {channels:?}"), &parts[i], g, &mut |p| {
                let mut refs = refs.clone();
                refs[i] = p;
                dot(&r, &tensor::concat_channels(&refs).unwrap())
            });
        }

        let a = random(&mut rng, &[n, channels[0], h, w]);
        let b = random(&mut rng, a.shape());
        let r = random(&mut rng, a.shape());
        check(&mut worst, "add lhs", &a, &r, &mut |a| dot(&r, &tensor::add(a, &b).unwrap()));
        check(&mut worst, "add rhs", &b, &r, &mut |b| dot(&r, &tensor::add(&a, b).unwrap()));
    }
    worst
}

pub fn linear_heads() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let depth = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=2);
        let heads: Vec<Tensor> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let g = rng.gen_range(1..=3);
                let a = rng.gen_range(1..=3);
                random(&mut rng, &[n, depth * a, g, g])
            })
            .collect();
        let refs: Vec<&Tensor> = heads.iter().collect();
        let y = tensor::linear_heads(&refs, depth).unwrap();
        let r = random(&mut rng, y.shape());
        let shapes: Vec<Vec<usize>> = heads.iter().map(|h| h.shape().to_vec()).collect();
        let grads = tensor::linear_heads_backward(&shapes, depth, &r).unwrap();
        for (i, g) in grads.iter().enumerate() {
            check(&mut worst, &format!("linear_heads head {i} depth {depth}"), &heads[i], g, &mut |h| {
                let mut refs = refs.clone();
                refs[i] = h;
                dot(&r, &tensor::linear_heads(&refs, depth).unwrap())
            });
        }
    }
    worst
}

/// Builds `loss(param)` through the graph and compares its gradient with finite differences.
fn check_graph_loss(worst: &mut Worst, label: &str, shape: &[usize], init: Tensor, build: impl Fn(&mut Graph, dunet::NodeId) -> dunet::NodeId) {
    let mut g = Graph::new();
    let p = g.param("p", init.clone());
    let loss = build(&mut g, p);
    g.forward(&[loss], Mode::Train).unwrap();
    g.backward(loss).unwrap();
    let analytic = g.grad(p).unwrap().clone();
    assert_eq!(analytic.shape(), shape);
    check(worst, label, &init, &analytic, &mut |v| {
        g.set_leaf_value(p, v.clone()).unwrap();
        g.forward(&[loss], Mode::Train).unwrap();
        g.value(loss).unwrap().data()[0]
    });
}

pub fn softmax_cross_entropy() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let (n, m, c) = (rng.gen_range(1..=2), rng.gen_range(4..=10), rng.gen_range(2..=4));
        let labels = Tensor::from_fn(&[n, m], |_| if rng.gen_bool(0.25) { rng.gen_range(1..c) as f64 } else { 0.0 });
        let logits = Tensor::from_fn(&[n, m, c], |_| rng.gen_range(-2.0..2.0));
        check_graph_loss(&mut worst, &format!("softmax_ce [{n},{m},{c}]"), &[n, m, c], logits, |g, p| {
            let l = g.input("labels", false);
            g.set_input(l, labels.clone()).unwrap();
            g.softmax_ce(p, l, 3.0)
        });
    }
    worst
}

pub fn smooth_l1() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let (n, m) = (rng.gen_range(1..=2), rng.gen_range(2..=6));
        let labels = Tensor::from_fn(&[n, m], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let target = random(&mut rng, &[n, m, 4]);
        // Differences stay at least 0.05 away from the |d| = 1 seam.
        let pred = Tensor::from_fn(&[n, m, 4], |i| {
            let d = if rng.gen_bool(0.5) { rng.gen_range(-0.95..0.95) } else { rng.gen_range(1.05..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } };
            target.data()[i] + d
        });
        let weight = rng.gen_range(0.5..2.0);
        check_graph_loss(&mut worst, &format!("smooth_l1 [{n},{m},4]"), &[n, m, 4], pred, |g, p| {
            let t = g.input("target", false);
            let l = g.input("labels", false);
            g.set_input(t, target.clone()).unwrap();
            g.set_input(l, labels.clone()).unwrap();
            g.smooth_l1(p, t, l, weight)
        });
    }
    worst
}

/// A small network touching every graph op; checks each parameter's
/// gradient. A conv bias feeding batch norm has an exactly zero gradient
/// and is checked for that instead, since a relative error against
/// round-off noise means nothing.
pub fn composed_graph() -> Worst {
    let mut worst = Worst::default();
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut g = Graph::new();
    let x = g.input("x", false);
    let w1 = g.param("w1", random(&mut rng, &[4, 2, 3, 3]));
    let b1 = g.param("b1", random(&mut rng, &[4]));
    let s = g.param("s", Tensor::from_fn(&[4], |_| rng.gen_range(0.5..1.5)));
    let t = g.param("t", random(&mut rng, &[4]));
    let rm = g.buffer("rm", Tensor::zeros(&[4]));
    let rv = g.buffer("rv", Tensor::full(&[4], 1.0));
    let w2 = g.param("w2", random(&mut rng, &[3, 8, 1, 1]));
    let b2 = g.param("b2", random(&mut rng, &[3]));

    let c1 = g.conv2d(x, w1, b1, 1, 1);
    let bn = g.batchnorm(c1, s, t, rm, rv, BN_EPS, BN_MOMENTUM);
    let r = g.relu(bn);
    let down = g.pool(r, PoolKind::Avg, 2, 2);
    let up = g.upsample2(down);
    let merged = g.add(up, r);
    let cat = g.concat(&[merged, r]);
    let fine = g.pool(cat, PoolKind::Avg, 2, 2);
    // One anchor per cell: 3 class scores and 4 offsets.
    let w4 = g.param("w4", random(&mut rng, &[4, 8, 1, 1]));
    let b4 = g.param("b4", random(&mut rng, &[4]));
    let scores = g.conv2d(fine, w2, b2, 1, 0);
    let offs = g.conv2d(fine, w4, b4, 1, 0);
    let logits = g.linear_heads(&[scores], 3);
    let pred = g.linear_heads(&[offs], 4);
    let labels = g.input("labels", false);
    let targets = g.input("targets", false);
    let ce = g.softmax_ce(logits, labels, 3.0);
    let l1 = g.smooth_l1(pred, targets, labels, 1.0);
    let loss = g.add(ce, l1);

    g.set_input(x, random(&mut rng, &[2, 2, 4, 4])).unwrap();
    let m = 4;
    g.set_input(labels, Tensor::from_fn(&[2, m], |i| [1.0, 0.0, 2.0, 0.0][i % 4])).unwrap();
    g.set_input(targets, random(&mut rng, &[2, m, 4])).unwrap();
    g.forward(&[loss], Mode::Train).unwrap();
    g.backward(loss).unwrap();
    let b1_peak = g.grad(b1).unwrap().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    worst.note(if b1_peak < 1e-12 { 0.0 } else { f64::INFINITY }, || format!("b1 gradient {b1_peak} should vanish"));
    for p in [w1, s, t, w2, b2, w4, b4] {
        let init = g.value(p).unwrap().clone();
        let analytic = g.grad(p).unwrap().clone();
        let name = g.name(p).unwrap().to_string();
        check(&mut worst, &format!("graph param {name}"), &init, &analytic, &mut |v| {
            g.set_leaf_value(p, v.clone()).unwrap();
            g.forward(&[loss], Mode::Train).unwrap();
            g.value(loss).unwrap().data()[0]
        });
        g.set_leaf_value(p, init).unwrap();
    }
    assert!(g.grad(rm).is_none() && g.grad(rv).is_none());
    worst
}

/// Every suite by name.
pub fn all() -> Vec<(&'static str, fn() -> Worst)> {
    vec![
        ("conv2d", conv2d),
        ("batchnorm", batchnorm),
        ("relu", relu),
        ("pool", pool),
        ("upsample2", upsample),
        ("concat/add", concat_and_add),
        ("linear_heads", linear_heads),
        ("softmax_ce", softmax_cross_entropy),
        ("smooth_l1", smooth_l1),
        ("composed graph", composed_graph),
    ]
}

/// Runs every suite and folds the results.
pub fn run_all() -> (Worst, Vec<(&'static str, Worst)>) {
    let mut total = Worst::default();
    let mut each = Vec::new();
    for (name, f) in all() {
        let w = f();
        total.merge(w.clone());
        each.push((name, w));
    }
    (total, each)
}
