//! Small building blocks shared by the experiment models.

use kem_core::attention::{BlockLayout, CrossAttentionVars, KemVars};
use kem_core::graph::Var;
use kem_core::init::{slot_init, xavier_uniform};
use kem_core::train::{AdamWConfig, BoundParams, ParamId};
use kem_core::{Error, EtfFrame, Graph, OptimizerState, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mechanism};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(match self.b {
            Some(b) => g.add_row(y, p.var(b))?,
            None => y,
        })
    }
}

/// One token-mixing layer: residual cross-attention or the slot bottleneck.
#[derive(Clone, Debug)]
pub struct MechLayer {
    mechanism: Mechanism,
    /// Cross-attention: `w_q, w_k, w_v`. Bottleneck: the six projections
    /// followed by the memory slots.
    ids: Vec<ParamId>,
    top_k: usize,
    residual_weight: f64,
}

/// Layer output plus the weights worth inspecting: the full attention matrix
/// for cross-attention, the retrieve weights (`L × n_s`) for the bottleneck.
#[derive(Copy, Clone, Debug)]
pub struct MechOut {
    pub output: Var,
    pub weights: Var,
}

impl MechLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let mut proj = |store: &mut ParamStore, p: &str| store.add(format!("{name}.{p}"), xavier_uniform(d, d, rng));
        let ids = match cfg.mechanism {
            Mechanism::CrossAttention => ["w_q", "w_k", "w_v"].iter().map(|p| proj(store, p)).collect(),
            Mechanism::Kem | Mechanism::Skem => {
                let mut ids: Vec<ParamId> = ["w_qr", "w_kr", "w_vr", "w_qw", "w_kw", "w_vw"]
                    .iter()
                    .map(|p| proj(store, p))
                    .collect();
                ids.push(store.add(format!("{name}.slots"), slot_init(cfg.slots, d, rng)));
                ids
            }
        };
        MechLayer {
            mechanism: cfg.mechanism,
            ids,
            top_k: cfg.top_k,
            residual_weight: cfg.residual_weight,
        }
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    /// Parameter ids of the query and key projections; zeroing them makes
    /// every attention row uniform.
    pub fn query_key_ids(&self) -> Vec<ParamId> {
        match self.mechanism {
            Mechanism::CrossAttention => vec![self.ids[0], self.ids[1]],
            _ => vec![self.ids[0], self.ids[1], self.ids[3], self.ids[4]],
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        f: Var,
        layout: BlockLayout,
        frame: Option<&EtfFrame>,
    ) -> Result<MechOut> {
        let v = |i: usize| p.var(self.ids[i]);
        match self.mechanism {
            Mechanism::CrossAttention => {
                let vars = CrossAttentionVars {
                    w_q: v(0),
                    w_k: v(1),
                    w_v: v(2),
                };
                let att = vars.forward(g, f)?;
                let output = g.add(f, att.output)?;
                Ok(MechOut {
                    output,
                    weights: att.weights,
                })
            }
            Mechanism::Kem | Mechanism::Skem => {
                let vars = KemVars {
                    w_qr: v(0),
                    w_kr: v(1),
                    w_vr: v(2),
                    w_qw: v(3),
                    w_kw: v(4),
                    w_vw: v(5),
                    residual_weight: self.residual_weight,
                    top_k: self.top_k,
                };
                let etf = if self.mechanism == Mechanism::Skem {
                    Some(frame.ok_or_else(|| Error::Contract("skem layer needs an ETF frame".into()))?)
                } else {
                    None
                };
                let out = vars.forward(g, f, layout, v(6), etf)?;
                Ok(MechOut {
                    output: out.output,
                    weights: out.retrieve.weights,
                })
            }
        }
    }
}

pub fn etf_frame(cfg: &ExperimentConfig) -> Result<Option<EtfFrame>> {
    Ok(match cfg.mechanism {
        Mechanism::Skem => Some(kem_core::etf::build_etf(
            cfg.n_tasks,
            cfg.d,
            cfg.etf_seed,
            cfg.etf_convention,
        )?),
        _ => None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous point.
    pub loss: f64,
}

/// Runs `cfg.steps` AdamW steps. `step_loss` builds the scalar loss for one
/// step inside a fresh graph.
pub fn train(
    store: &mut ParamStore,
    cfg: &ExperimentConfig,
    mut step_loss: impl FnMut(&mut Graph, &BoundParams, usize) -> Result<Var>,
) -> Result<Vec<LossPoint>> {
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        power: cfg.lr_power,
        total_steps: cfg.steps,
    };
    let mut opt = OptimizerState::new(opt_cfg, store.values());
    let mut curve = Vec::new();
    let (mut acc, mut n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = step_loss(&mut g, &bound, step)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")).into());
        }
        g.backward(loss)?;
        let grads = store.grads(&g, &bound);
        opt.step(store.values_mut(), &grads)?;
        acc += value;
        n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(LossPoint {
                step: step + 1,
                loss: acc / n as f64,
            });
            acc = 0.0;
            n = 0;
        }
    }
    Ok(curve)
}

/// Deterministic epoch-wise shuffled minibatch indices.
pub struct Batcher {
    order: Vec<usize>,
    at: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut b = Batcher {
            order: (0..n).collect(),
            at: 0,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.at = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, 3);
        let mut seen: Vec<usize> = b.next_batch(4);
        seen.extend(b.next_batch(6));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = Batcher::new(10, 3);
        assert_eq!(again.next_batch(10), {
            let mut c = Batcher::new(10, 3);
            c.next_batch(10)
        });
    }
}
