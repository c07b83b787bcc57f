mod common;

use common::{composed_loss_error, fd_check};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steer_core::model::Variant;
use steer_core::tensor::nn::{Block, GruCell, LayerNorm, Linear, Mhsa, Mlp};
use steer_core::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar readout `sum(y * w)` with fixed random weights `w`.
fn readout(g: &mut Graph, y: Var, rng_seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(rng_seed), &shape);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

struct Case {
    store: ParamStore,
    x: ParamId,
    rng: ChaCha8Rng,
}

fn case(seed: u64, rows: usize, d: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[rows, d]));
    Case { store, x, rng }
}

fn check<F: Fn(&mut Graph, Var) -> Var>(mut c: Case, seed: u64, f: F) -> f64 {
    let x = c.x;
    let mut rng = c.rng.clone();
    fd_check(&mut c.store, None, &mut rng, |g| {
        let xv = g.param(x);
        let y = f(g, xv);
        readout(g, y, seed)
    })
}

fn perturb_layer_norm(store: &mut ParamStore, ln: &LayerNorm, rng: &mut ChaCha8Rng) {
    for id in [ln.gain, ln.bias] {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear(seed in any::<u64>(), rows in 1usize..5, d_in in 1usize..6, d_out in 1usize..6) {
        let mut c = case(seed, rows, d_in);
        let lin = Linear::new(&mut c.store, &mut c.rng, "lin", d_in, d_out, 1.0);
        let err = check(c, seed, |g, x| lin.forward(g, x).unwrap());
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), rows in 1usize..5, d in 2usize..8) {
        let mut c = case(seed, rows, d);
        let ln = LayerNorm::new(&mut c.store, "ln", d);
        perturb_layer_norm(&mut c.store, &ln, &mut c.rng);
        let err = check(c, seed, |g, x| ln.forward(g, x).unwrap());
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn mlp(seed in any::<u64>(), rows in 1usize..5, d in 1usize..6, hidden in 1usize..10) {
        let mut c = case(seed, rows, d);
        let mlp = Mlp::new(&mut c.store, &mut c.rng, "mlp", d, hidden, d);
        let err = check(c, seed, |g, x| mlp.forward(g, x).unwrap());
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn attention(seed in any::<u64>(), batch in 1usize..3, seq in 1usize..5, heads in 1usize..3, causal: bool) {
        let d = 2 * heads;
        let mut c = case(seed, batch * seq, d);
        let att = Mhsa::new(&mut c.store, &mut c.rng, "att", d, heads).unwrap();
        let err = check(c, seed, |g, x| att.forward(g, x, batch, seq, causal).unwrap());
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn block(seed in any::<u64>(), batch in 1usize..3, seq in 1usize..4, causal: bool) {
        let d = 4;
        let mut c = case(seed, batch * seq, d);
        let blk = Block::new(&mut c.store, &mut c.rng, "blk", d, 2).unwrap();
        perturb_layer_norm(&mut c.store, &blk.ln_attn, &mut c.rng);
        perturb_layer_norm(&mut c.store, &blk.ln_mlp, &mut c.rng);
        let err = check(c, seed, |g, x| blk.forward(g, x, batch, seq, causal).unwrap());
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn gru(seed in any::<u64>(), rows in 1usize..4, d in 1usize..5) {
        let mut c = case(seed, rows, d);
        let h0 = c.store.add("h0", random(&mut c.rng, &[rows, d]));
        let gru = GruCell::new(&mut c.store, &mut c.rng, "gru", d);
        let err = check(c, seed, |g, x| {
            let h = g.param(h0);
            let h = gru.forward(g, x, h).unwrap();
            gru.forward(g, x, h).unwrap()
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn pointwise_and_reductions(seed in any::<u64>(), rows in 1usize..4, d in 1usize..5) {
        let c = case(seed, rows, d);
        let err = check(c, seed, |g, x| {
            let a = g.exp(x);
            let b = g.gelu(x);
            let s = g.sigmoid(b);
            let t = g.tanh(a);
            let q = g.square(s);
            let y = g.add(t, q).unwrap();
            let y = g.affine(y, 0.7, -0.2);
            let r = g.sum_rows(y);
            let m = g.mean(y);
            let m = g.scale(m, 3.0);
            let r = g.sum(r);
            g.add(r, m).unwrap()
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn softmax_family(seed in any::<u64>(), rows in 1usize..4, d in 2usize..6) {
        let c = case(seed, rows, d);
        let mut mrng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mask: Vec<bool> = (0..rows * d).map(|i| i % d == 0 || mrng.gen_bool(0.6)).collect();
        let err = check(c, seed, |g, x| {
            let p = g.softmax(x, Some(&mask)).unwrap();
            let l = g.log_softmax(x);
            let picked = g.pick(l, (0..rows).map(|r| r % d).collect()).unwrap();
            let s = g.sum(picked);
            let p = g.sum_rows(p);
            let p = g.sum(p);
            g.add(s, p).unwrap()
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn row_plumbing(seed in any::<u64>(), rows in 1usize..5, d in 1usize..4) {
        let mut c = case(seed, rows, d);
        let bias = c.store.add("bias", random(&mut c.rng, &[1, d]));
        let w = c.store.add("w", random(&mut c.rng, &[2 * d, 3]));
        let mut irng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        // duplicate indices must accumulate
        let idx: Vec<usize> = (0..rows + 2).map(|_| irng.gen_range(0..rows)).collect();
        let spread: Vec<usize> = (0..idx.len()).map(|i| 2 * i).collect();
        let err = check(c, seed, |g, x| {
            let b = g.param(bias);
            let y = g.add_row(x, b).unwrap();
            let z = g.gather_rows(y, idx.clone()).unwrap();
            let z = g.scatter_rows(z, spread.clone(), 2 * idx.len()).unwrap();
            let z2 = g.square(z);
            let cat = g.concat_cols(z, z2).unwrap();
            let w = g.param(w);
            g.matmul(cat, w).unwrap()
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn composed_training_loss(seed in any::<u64>(), n in 1usize..=3, wide: bool, variant in 0usize..5) {
        let d = if wide { 16 } else { 8 };
        let err = composed_loss_error(n, d, Variant::ALL[variant], seed);
        prop_assert!(err < TOL, "n={n} d={d} {:?}: {err:e}", Variant::ALL[variant]);
    }
}
