//! Noise-sharing toy: how much attention do the real tasks pay to a task
//! whose tokens are pure noise?

use std::time::Instant;

use kem_core::attention::BlockLayout;
use kem_core::graph::{topk_indices, Var};
use kem_core::metrics::accuracy;
use kem_core::train::{mtl_loss_var, BoundParams};
use kem_core::{EtfFrame, Graph, ParamStore, Tensor};
use kem_synth::noise::{NoiseToy, NoiseToyBatch, N_CLASSES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ExperimentKind, Mechanism};
use crate::error::Result;
use crate::nn::{etf_frame, train, Batcher, Linear, MechLayer};
use crate::report::{LossCurve, RunReport};

/// Index of the noise task's block.
const NOISE_TASK: usize = 2;
const MODEL_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

pub struct NoiseToyModel {
    pub store: ParamStore,
    encoders: Vec<Linear>,
    pub layers: Vec<MechLayer>,
    heads: Vec<Linear>,
    frame: Option<EtfFrame>,
    layout: BlockLayout,
}

/// Evaluation summary over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseToyEval {
    pub accuracy: [f64; 2],
    /// Mean weight that task-1/2 queries (cross-attention) or memory slots
    /// (bottleneck retrieve) put on noise-task tokens, over layers and samples.
    pub noise_mass: f64,
    /// Bottleneck only: share of retrieve selections that are noise tokens.
    pub noise_selection_rate: Option<f64>,
}

struct Forward {
    pooled: [Var; 2],
    weights: Vec<Var>,
}

impl NoiseToyModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MODEL_STREAM);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let encoders = (0..3)
            .map(|t| Linear::new(&mut store, &format!("encoder{t}"), d, d, false, &mut rng))
            .collect();
        let layers = (0..cfg.layers)
            .map(|l| MechLayer::new(&mut store, &format!("layer{l}"), cfg, &mut rng))
            .collect();
        let heads = (0..2)
            .map(|t| Linear::new(&mut store, &format!("head{t}"), d, N_CLASSES, true, &mut rng))
            .collect();
        Ok(NoiseToyModel {
            store,
            encoders,
            layers,
            heads,
            frame: etf_frame(cfg)?,
            layout: BlockLayout {
                n_tasks: 3,
                tokens_per_task: cfg.m,
            },
        })
    }

    /// `x` is one sample's stacked `3m × d` token matrix.
    fn forward(&self, g: &mut Graph, p: &BoundParams, x: &Tensor) -> Result<Forward> {
        let m = self.layout.tokens_per_task;
        let x = g.constant(x.clone());
        let mut blocks = Vec::with_capacity(3);
        for (t, enc) in self.encoders.iter().enumerate() {
            let xt = g.slice_rows(x, t * m, m)?;
            blocks.push(enc.forward(g, p, xt)?);
        }
        let mut f = g.concat_rows(&blocks)?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, p, f, self.layout, self.frame.as_ref())?;
            f = out.output;
            weights.push(out.weights);
        }
        let mut pooled = [f; 2];
        for (t, slot) in pooled.iter_mut().enumerate() {
            let block = g.slice_rows(f, t * m, m)?;
            *slot = g.mean_rows(block)?;
        }
        Ok(Forward { pooled, weights })
    }

    /// Mean cross-entropy of tasks 1 and 2 over `samples`, weighted by
    /// `task_weights`.
    fn batch_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        data: &Samples,
        idx: &[usize],
        task_weights: [f64; 2],
    ) -> Result<Var> {
        let mut pooled: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for &i in idx {
            let fw = self.forward(g, p, &data.x[i])?;
            for (slot, &v) in pooled.iter_mut().zip(&fw.pooled) {
                slot.push(v);
            }
        }
        let mut losses = Vec::new();
        let mut weights = Vec::new();
        for t in 0..2 {
            if task_weights[t] == 0.0 {
                continue;
            }
            let rows = g.concat_rows(&pooled[t])?;
            let logits = self.heads[t].forward(g, p, rows)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[t][i]).collect();
            losses.push(g.cross_entropy(logits, &labels)?);
            weights.push(task_weights[t]);
        }
        Ok(mtl_loss_var(g, &losses, &weights)?)
    }

    pub fn evaluate(&self, data: &Samples) -> Result<NoiseToyEval> {
        let m = self.layout.tokens_per_task;
        let noise = NOISE_TASK * m..(NOISE_TASK + 1) * m;
        let mut preds: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let (mut mass, mut mass_n) = (0.0, 0usize);
        let (mut selected, mut selected_noise) = (0usize, 0usize);
        for x in &data.x {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let fw = self.forward(&mut g, &p, x)?;
            for (t, out) in preds.iter_mut().enumerate() {
                let logits = self.heads[t].forward(&mut g, &p, fw.pooled[t])?;
                out.push(topk_indices(g.value(logits).row(0), 1)[0]);
            }
            for (layer, &wv) in self.layers.iter().zip(&fw.weights) {
                let w = g.value(wv);
                let query_rows = match layer.mechanism() {
                    Mechanism::CrossAttention => 0..NOISE_TASK * m,
                    _ => 0..w.rows(),
                };
                for r in query_rows {
                    mass += w.row(r)[noise.clone()].iter().sum::<f64>();
                    mass_n += 1;
                }
                for support in g.topk_support(wv).into_iter().flatten() {
                    selected += support.len();
                    selected_noise += support.iter().filter(|j| noise.contains(j)).count();
                }
            }
        }
        Ok(NoiseToyEval {
            accuracy: [
                accuracy(&preds[0], &data.labels[0])?,
                accuracy(&preds[1], &data.labels[1])?,
            ],
            noise_mass: mass / mass_n as f64,
            noise_selection_rate: (selected > 0).then(|| selected_noise as f64 / selected as f64),
        })
    }
}

/// Training or test samples in model-ready form.
pub struct Samples {
    pub x: Vec<Tensor>,
    pub labels: [Vec<usize>; 2],
}

impl Samples {
    pub fn from_batch(b: &NoiseToyBatch) -> Self {
        Samples {
            x: (0..b.batch).map(|i| b.stacked(i)).collect(),
            labels: [b.labels1.clone(), b.labels2.clone()],
        }
    }
}

pub fn datasets(cfg: &ExperimentConfig) -> Result<(Samples, Samples)> {
    let toy = NoiseToy::new(cfg.seed, cfg.m, cfg.d)?;
    let train = Samples::from_batch(&toy.batch(0, cfg.train_count));
    let test = Samples::from_batch(&toy.batch(cfg.train_count as u64, cfg.test_count));
    Ok((train, test))
}

/// Trains with the given per-task loss weights; a zero weight drops the task.
pub fn train_model(
    cfg: &ExperimentConfig,
    train_set: &Samples,
    task_weights: [f64; 2],
) -> Result<(NoiseToyModel, Vec<crate::nn::LossPoint>)> {
    let mut model = NoiseToyModel::new(cfg)?;
    let mut batcher = Batcher::new(train_set.x.len(), cfg.seed ^ BATCH_STREAM);
    let mut store = std::mem::take(&mut model.store);
    let curve = train(&mut store, cfg, |g, p, _| {
        let idx = batcher.next_batch(cfg.batch_size);
        model.batch_loss(g, p, train_set, &idx, task_weights)
    })?;
    model.store = store;
    Ok((model, curve))
}

pub fn run_noise_toy(cfg: &ExperimentConfig) -> Result<RunReport> {
    if cfg.kind != ExperimentKind::NoiseToy && cfg.kind != ExperimentKind::GridL && cfg.kind != ExperimentKind::GridK {
        return Err(kem_core::Error::Contract(format!("run_noise_toy called with kind {}", cfg.kind)).into());
    }
    if cfg.n_tasks != 3 {
        return Err(kem_core::Error::Contract(format!("noise toy needs 3 tasks, got {}", cfg.n_tasks)).into());
    }
    let start = Instant::now();
    let (train_set, test_set) = datasets(cfg)?;
    let initial = NoiseToyModel::new(cfg)?.evaluate(&test_set)?;
    let (model, curve) = train_model(cfg, &train_set, [1.0, 1.0])?;
    let eval = model.evaluate(&test_set)?;

    let mut report = RunReport::new(cfg);
    report.losses.push(LossCurve {
        label: "train".into(),
        points: curve,
    });
    report.push_metric("accuracy", "task1", eval.accuracy[0]);
    report.push_metric("accuracy", "task2", eval.accuracy[1]);
    report.push_metric("noise_mass", "task1+task2", eval.noise_mass);
    report.push_metric("initial_noise_mass", "task1+task2", initial.noise_mass);
    if let Some(rate) = eval.noise_selection_rate {
        report.push_metric("noise_selection_rate", "task1+task2", rate);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
