use kem_core::attention::{BlockLayout, CrossAttentionParams, KemParams};
use kem_core::etf::{build_etf, ScaleConvention};
use kem_core::gradcheck::{finite_diff_check, finite_diff_check_many};
use kem_core::graph::{Graph, Var};
use kem_core::init::slot_init;
use kem_core::tensor::Tensor;
use kem_core::train::mtl_loss_var;
use kem_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unary(seed: u64, op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
    let x = Tensor::<f64>::randn(3, 4, 1.0, &mut rng(seed));
    let w = Tensor::<f64>::randn(3, 4, 1.0, &mut rng(seed + 1000));
    // Weighted sum so the root is not invariant to the op.
    let r = finite_diff_check(
        |g, v| {
            let y = op(g, v)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        &x,
        STEP,
        RTOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn elementwise_and_reduction_ops() {
    for seed in 0..3 {
        unary(seed, |g, v| Ok(g.tanh(v)));
        unary(seed, |g, v| Ok(g.relu(v)));
        unary(seed, |g, v| Ok(g.scale(v, -1.7)));
        unary(seed, |g, v| g.mul(v, v));
        unary(seed, |g, v| g.softmax_rows(v));
        unary(seed, |g, v| g.topk_softmax(v, 2));
        unary(seed, |g, v| {
            let t = g.transpose(v)?;
            g.transpose(t)
        });
        unary(seed, |g, v| {
            let a = g.slice_rows(v, 0, 1)?;
            let b = g.slice_rows(v, 1, 2)?;
            g.concat_rows(&[b, a])
        });
        unary(seed, |g, v| {
            let r = g.reshape(v, 6, 2)?;
            let t = g.tanh(r);
            g.reshape(t, 3, 4)
        });
        unary(seed, |g, v| {
            let m = g.mean_rows(v)?;
            g.add_row(v, m)
        });
        unary(seed, |g, v| {
            let frame = build_etf::<f64>(2, 2, seed, ScaleConvention::Sqrt)?;
            g.mix_blocks(v, frame.gram(), 2)
        });
    }
}

#[test]
fn both_loss_kinds_and_weighted_sum() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let logits = Tensor::<f64>::randn(4, 5, 1.0, &mut r);
        let pred = Tensor::<f64>::randn(4, 2, 1.0, &mut r);
        let target = Tensor::<f64>::randn(4, 2, 1.0, &mut r);
        let labels = [0, 4, 2, 2];
        let res = finite_diff_check_many(
            |g, v| {
                let ce = g.cross_entropy(v[0], &labels)?;
                let mse = g.mse(v[1], &target)?;
                mtl_loss_var(g, &[ce, mse], &[1.0, 30.0])
            },
            &[logits, pred],
            STEP,
            RTOL,
        )
        .unwrap();
        assert!(res.passed, "seed {seed}: {res:?}");
    }
}

#[test]
fn cross_attention_gradients() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let p = CrossAttentionParams::<f64>::init(4, &mut r);
        let f = Tensor::<f64>::randn(6, 4, 1.0, &mut r);
        let res = finite_diff_check_many(
            |g, v| {
                let vars = kem_core::attention::CrossAttentionVars {
                    w_q: v[1],
                    w_k: v[2],
                    w_v: v[3],
                };
                let out = vars.forward(g, v[0])?;
                Ok(g.sum(out.output))
            },
            &[f, p.w_q, p.w_k, p.w_v],
            STEP,
            RTOL,
        )
        .unwrap();
        assert!(res.passed, "seed {seed}: {res:?}");
    }
}

fn kem_case(seed: u64, etf: bool) {
    let mut r = rng(seed);
    let (n, m, d, l) = (2, 4, 4, 2);
    let p = KemParams::<f64>::init(d, 3, &mut r);
    let f = Tensor::<f64>::randn(n * m, d, 1.0, &mut r);
    let slots = slot_init::<f64, _>(l, d, &mut r);
    let frame = build_etf::<f64>(n, d, seed, ScaleConvention::Sqrt).unwrap();
    let target = Tensor::<f64>::randn(n * m, d, 1.0, &mut r);
    let mut inputs = vec![f, slots];
    inputs.extend(p.projections().into_iter().cloned());
    let res = finite_diff_check_many(
        |g, v| {
            let vars = kem_core::attention::KemVars {
                w_qr: v[2],
                w_kr: v[3],
                w_vr: v[4],
                w_qw: v[5],
                w_kw: v[6],
                w_vw: v[7],
                residual_weight: 1.0,
                top_k: 3,
            };
            let layout = BlockLayout {
                n_tasks: n,
                tokens_per_task: m,
            };
            let out = vars.forward(g, v[0], layout, v[1], etf.then_some(&frame))?;
            let s = g.sum(out.output);
            let mse = g.mse(out.output, &target)?;
            g.add(s, mse)
        },
        &inputs,
        STEP,
        RTOL,
    )
    .unwrap();
    assert!(res.passed, "seed {seed}, etf {etf}: {res:?}");
}

#[test]
fn kem_forward_gradients() {
    for seed in 0..3 {
        kem_case(seed, false);
        kem_case(seed, true);
    }
}
