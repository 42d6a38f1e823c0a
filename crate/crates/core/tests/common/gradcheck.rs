//! Central finite differences of the f64 references against the tape's
//! analytic gradients.

use efficientformer::nn::{mhsa, Graph, Mb3d, Mb4d, Norm4d, ParamBuilder, ParamId, ParamStore};
use efficientformer::supernet::branch_weights_var;
use efficientformer::tensor::{Activation, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference as r;

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Slot {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Slot {
    pub fn randn(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Slot {
        Slot {
            shape: shape.to_vec(),
            data: Tensor::randn(shape, std, rng).into_data(),
        }
    }

    fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).unwrap()
    }
}

/// Worst per-slot relative gradient error, plus the forward mismatch.
#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub grad_rel: f64,
    pub forward_rel: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.grad_rel < TOLERANCE && self.forward_rel < TOLERANCE
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `analytic(slots, weights)` returns the op output and d(Σ weights·y)/d(slot)
/// for every slot. `reference` evaluates the op in f64.
///
/// Per-slot error is `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, floor)` with
/// `floor` 1% of the largest slot gradient norm, so slots whose true
/// gradient vanishes (a bias ahead of batch norm) are judged on absolute
/// agreement.
pub fn check(
    slots: &[Slot],
    rng: &mut ChaCha8Rng,
    analytic: impl Fn(&[Slot], &Tensor) -> (Vec<f32>, Vec<Vec<f32>>),
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> Check {
    let x64: Vec<Vec<f64>> = slots.iter().map(|s| s.data.iter().map(|&v| v as f64).collect()).collect();
    let y_ref = reference(&x64);
    let w: Vec<f32> = (0..y_ref.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let wt = Tensor::from_vec(w.clone());
    let (y, grads) = analytic(slots, &wt);
    assert_eq!(y.len(), y_ref.len(), "output sizes differ");
    let scale = y_ref.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let forward_rel = y.iter().zip(&y_ref).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max) / scale;

    let loss = |xs: &[Vec<f64>]| -> f64 { reference(xs).iter().zip(&w).map(|(y, w)| y * *w as f64).sum() };
    let mut numeric = Vec::with_capacity(slots.len());
    let mut xs = x64.clone();
    for s in 0..slots.len() {
        let mut g = vec![0.0; xs[s].len()];
        for i in 0..xs[s].len() {
            let orig = xs[s][i];
            xs[s][i] = orig + H;
            let lp = loss(&xs);
            xs[s][i] = orig - H;
            let lm = loss(&xs);
            xs[s][i] = orig;
            g[i] = (lp - lm) / (2.0 * H);
        }
        numeric.push(g);
    }
    let top = numeric.iter().map(|g| norm(g.iter().copied())).fold(0.0, f64::max);
    let floor = (0.01 * top).max(1e-12);
    let mut grad_rel = 0.0f64;
    for (a, n) in grads.iter().zip(&numeric) {
        assert_eq!(a.len(), n.len(), "gradient sizes differ");
        let diff = norm(a.iter().zip(n).map(|(a, n)| *a as f64 - n));
        let den = norm(a.iter().map(|&v| v as f64)).max(norm(n.iter().copied())).max(floor);
        grad_rel = grad_rel.max(diff / den);
    }
    Check { grad_rel, forward_rel }
}

/// Runs `op` on a fresh tape over leaf slots and backpropagates `Σ w·y`.
fn tape_grads(slots: &[Slot], w: &Tensor, op: impl Fn(&mut Tape, &[Var]) -> Var) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut t = Tape::new();
    let vars: Vec<Var> = slots
        .iter()
        .map(|s| t.leaf(s.tensor().with_requires_grad(true)).unwrap())
        .collect();
    let y = op(&mut t, &vars);
    let y_data = t.value(y).data().to_vec();
    let flat = t.reshape(y, &[y_data.len()]).unwrap();
    let wv = t.constant(w.clone()).unwrap();
    let p = t.mul(flat, wv).unwrap();
    let l = t.sum(p).unwrap();
    t.backward(l).unwrap();
    let grads = vars
        .iter()
        .zip(slots)
        .map(|(&v, s)| t.grad(v).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; s.data.len()]))
        .collect();
    (y_data, grads)
}

/// Gradient check for a module whose trainable parameters live in `store`.
/// Slot 0 is the input; the rest are the trainable parameters in id order.
fn module_check(
    store: &ParamStore,
    x: Slot,
    rng: &mut ChaCha8Rng,
    forward: impl Fn(&mut Graph, Var) -> Var,
    reference: impl Fn(&[f64], &dyn Fn(&str) -> Vec<f64>) -> Vec<f64>,
) -> Check {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.kind(id).trainable()).collect();
    let names: Vec<String> = ids.iter().map(|&id| store.entry(id).name.clone()).collect();
    let mut slots = vec![x];
    for &id in &ids {
        let t = store.get(id);
        // Randomize so every parameter carries signal.
        slots.push(Slot::randn(t.shape(), 0.5, rng));
    }
    for (s, n) in slots[1..].iter_mut().zip(&names) {
        if n.ends_with("gamma") {
            s.data.iter_mut().for_each(|v| *v += 1.0);
        }
    }
    let analytic = |slots: &[Slot], w: &Tensor| {
        let mut st = store.clone();
        for (&id, s) in ids.iter().zip(&slots[1..]) {
            st.get_mut(id).data_mut().copy_from_slice(&s.data);
        }
        let mut g = Graph::train(&st);
        let xv = g.tape.leaf(slots[0].tensor().with_requires_grad(true)).unwrap();
        let y = forward(&mut g, xv);
        let y_data = g.value(y).data().to_vec();
        let flat = g.tape.reshape(y, &[y_data.len()]).unwrap();
        let wv = g.tape.constant(w.clone()).unwrap();
        let p = g.tape.mul(flat, wv).unwrap();
        let l = g.tape.sum(p).unwrap();
        g.backward(l).unwrap();
        let mut grads = vec![g.tape.grad(xv).unwrap().into_data()];
        for (&id, s) in ids.iter().zip(&slots[1..]) {
            grads.push(g.grad_of(id).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; s.data.len()]));
        }
        (y_data, grads)
    };
    let refr = |xs: &[Vec<f64>]| {
        let lookup = |name: &str| -> Vec<f64> {
            let i = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
            xs[i + 1].clone()
        };
        reference(&xs[0], &lookup)
    };
    check(&slots, rng, analytic, refr)
}

fn conv2d(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = [1, 3][seed as usize % 2];
    let stride = 1 + (seed as usize / 2) % 2;
    let pad = k / 2;
    let xs = [2, 3, 5, 5];
    let ws = [4, 3, k, k];
    let slots = vec![Slot::randn(&xs, 1.0, &mut rng), Slot::randn(&ws, 0.5, &mut rng), Slot::randn(&[4], 0.5, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()),
        |x| r::conv2d(&x[0], xs, &x[1], ws, Some(&x[2]), stride, pad).0,
    )
}

fn batch_norm(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, h) = (3, 4, 3);
    let mut gamma = Slot::randn(&[c], 0.3, &mut rng);
    gamma.data.iter_mut().for_each(|v| *v += 1.0);
    let slots = vec![Slot::randn(&[b, c, h, h], 1.5, &mut rng), gamma, Slot::randn(&[c], 0.5, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0),
        |x| r::batch_norm_train(&x[0], b, c, h * h, &x[1], &x[2], 1e-5),
    )
}

fn layer_norm(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 8;
    let slots = vec![Slot::randn(&[2, 3, c], 1.0, &mut rng), Slot::randn(&[c], 1.0, &mut rng), Slot::randn(&[c], 0.5, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        |x| r::layer_norm(&x[0], c, &x[1], &x[2], 1e-5),
    )
}

fn group_norm(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h) = (6, 3);
    let groups = [1, 2, 3][seed as usize % 3];
    let slots = vec![Slot::randn(&[2, c, h, h], 1.0, &mut rng), Slot::randn(&[c], 1.0, &mut rng), Slot::randn(&[c], 0.5, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.group_norm(v[0], groups, v[1], v[2], 1e-5).unwrap()),
        |x| r::group_norm(&x[0], c, h * h, groups, &x[1], &x[2], 1e-5),
    )
}

fn gelu(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = vec![Slot::randn(&[40], 2.0, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.activation(Activation::Gelu, v[0]).unwrap()),
        |x| x[0].iter().map(|&v| r::gelu(v)).collect(),
    )
}

fn avg_pool(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3 + seed as usize % 3, 4);
    let slots = vec![Slot::randn(&[2, 3, h, w], 1.0, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, wt| tape_grads(s, wt, |t, v| t.avg_pool3x3(v[0]).unwrap()),
        |x| r::avg_pool3x3(&x[0], 6, h, w),
    )
}

fn linear(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, di, d_o) = (3, 5, 4);
    let slots = vec![
        Slot::randn(&[rows, di], 1.0, &mut rng),
        Slot::randn(&[di, d_o], 0.5, &mut rng),
        Slot::randn(&[d_o], 0.5, &mut rng),
    ];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        |x| r::linear(&x[0], di, &x[1], d_o, Some(&x[2])),
    )
}

fn softmax(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [3, 6, 2];
    let axis = seed as usize % 3;
    let slots = vec![Slot::randn(&shape, 2.0, &mut rng)];
    check(
        &slots,
        &mut rng,
        |s, w| tape_grads(s, w, |t, v| t.softmax(v[0], axis).unwrap()),
        |x| r::softmax(&x[0], &shape, axis),
    )
}

fn attn_shape() -> r::AttnShapeRef {
    r::AttnShapeRef {
        width: 16,
        heads: 2,
        d_qk: 8,
        d_v: 8,
        tokens: 4,
        scale: 1.0 / 4.0,
    }
}

fn mhsa_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = attn_shape();
    let mut store = ParamStore::new();
    let p = ParamBuilder::new(&mut store, &mut rng).attention(a.width, a.heads, a.d_qk, a.d_v, a.tokens);
    assert!((p.scale as f64 - a.scale).abs() < 1e-7);
    let x = Slot::randn(&[2, a.tokens, a.width], 1.0, &mut rng);
    module_check(&store, x, &mut rng, |g, x| mhsa(g, x, &p).unwrap(), |x, prm| r::mhsa(x, 2, &a, prm))
}

fn mb4d(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, exp) = (8, 2);
    let mut store = ParamStore::new();
    let blk = Mb4d::new(&mut ParamBuilder::new(&mut store, &mut rng), c, exp, Activation::Gelu, Norm4d::Bn);
    let xs = [2, c, 4, 4];
    let x = Slot::randn(&xs, 1.0, &mut rng);
    module_check(&store, x, &mut rng, |g, x| blk.forward(g, x).unwrap(), |x, prm| r::mb4d_train(x, xs, exp, prm))
}

fn mb3d(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = attn_shape();
    let exp = 2;
    let mut store = ParamStore::new();
    let blk = Mb3d::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        a.width,
        a.heads,
        a.d_qk,
        a.d_v,
        exp,
        a.tokens,
        Activation::Gelu,
    );
    let x = Slot::randn(&[2, a.tokens, a.width], 1.0, &mut rng);
    module_check(&store, x, &mut rng, |g, x| blk.forward(g, x).unwrap(), |x, prm| r::mb3d(x, 2, &a, exp, prm))
}

fn branch_weights(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 + seed as usize % 2;
    let tau: f32 = rng.random_range(0.3..3.0);
    let eps: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    let slots = vec![Slot::randn(&[n], 1.0, &mut rng)];
    let store = ParamStore::new();
    check(
        &slots,
        &mut rng,
        |s, w| {
            let mut g = Graph::train(&store);
            let a = g.tape.leaf(s[0].tensor().with_requires_grad(true)).unwrap();
            let y = branch_weights_var(&mut g, a, &eps, tau).unwrap();
            let y_data = g.value(y).data().to_vec();
            let wv = g.tape.constant(w.clone()).unwrap();
            let p = g.tape.mul(y, wv).unwrap();
            let l = g.tape.sum(p).unwrap();
            g.backward(l).unwrap();
            (y_data, vec![g.tape.grad(a).unwrap().into_data()])
        },
        |x| {
            let z: Vec<f64> = x[0].iter().zip(&eps).map(|(a, e)| (a + *e as f64) / tau as f64).collect();
            r::softmax(&z, &[n], 0)
        },
    )
}

pub type OpCheck = fn(u64) -> Check;

pub const OPS: [(&str, OpCheck); 12] = [
    ("conv2d", conv2d),
    ("batch_norm_train", batch_norm),
    ("layer_norm", layer_norm),
    ("group_norm", group_norm),
    ("gelu", gelu),
    ("avg_pool3x3", avg_pool),
    ("linear", linear),
    ("softmax", softmax),
    ("mhsa", mhsa_check),
    ("mb4d", mb4d),
    ("mb3d", mb3d),
    ("branch_weights", branch_weights),
];

/// Worst check over the standard seeds.
pub fn run_op(f: OpCheck) -> Check {
    SEEDS.iter().map(|&s| f(s)).fold(
        Check {
            grad_rel: 0.0,
            forward_rel: 0.0,
        },
        |a, c| Check {
            grad_rel: a.grad_rel.max(c.grad_rel),
            forward_rel: a.forward_rel.max(c.forward_rel),
        },
    )
}
