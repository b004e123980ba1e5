//! Balanced versus long-tailed Sort-of-CLEVR training for the bottleneck with
//! and without ETF mixing.
//!
//! Tasks are the two question groups: task 0 answers non-relational
//! questions, task 1 relational ones. Each sample carries one question, so
//! each sample trains one head. Both task encoders see every image, and the
//! mechanism mixes their tokens. The same balanced test split scores both
//! training distributions.

use std::time::Instant;

use kem_core::attention::BlockLayout;
use kem_core::graph::{topk_indices, Var};
use kem_core::metrics::accuracy;
use kem_core::train::{mtl_loss_var, BoundParams};
use kem_core::{EtfFrame, Graph, ParamStore, Tensor};
use kem_synth::clevr::{
    sort_of_clevr_sample, ClevrOptions, ImbalanceSpec, SortOfClevrSample, COLORS, IMAGE_SIZE, N_ANSWERS, N_COLORS,
    QUESTION_LEN,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind, Mechanism};
use crate::error::Result;
use crate::nn::{etf_frame, train, Batcher, Linear, LossPoint, MechLayer};
use crate::report::{LossCurve, RunReport};

pub const TASK_NAMES: [&str; 2] = ["non-relational", "relational"];
/// Test samples are drawn from this index onwards, disjoint from training.
const TEST_OFFSET: u64 = 1 << 40;
const MODEL_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 3;
/// Images are average-pooled by this factor before patching.
const POOL: usize = 8;
/// 3×3 neighbourhood of palette channels plus the pixel's coordinates.
const PIXEL_INPUT: usize = 9 * N_COLORS + 2;
const CONV_INPUT: usize = PIXEL_INPUT + QUESTION_LEN;
const CONV_CHANNELS: usize = 16;

/// Patch geometry for `m` tokens per task: a `√m × √m` grid over the pooled
/// image.
#[derive(Copy, Clone, Debug)]
pub struct Patching {
    grid: usize,
}

impl Patching {
    pub fn new(m: usize) -> Result<Self> {
        let grid = (m as f64).sqrt().round() as usize;
        let side = IMAGE_SIZE / POOL;
        if grid * grid != m || grid == 0 || !side.is_multiple_of(grid) {
            return Err(
                ConfigError::Invalid(format!("imbalance needs m = g² with g dividing {side}, got m = {m}")).into(),
            );
        }
        Ok(Patching { grid })
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn cell(&self) -> usize {
        IMAGE_SIZE / POOL / self.grid
    }

    /// Pooled pixels per patch.
    pub fn pixels(&self) -> usize {
        self.cell() * self.cell()
    }

    /// Conv inputs of every pooled pixel in a patch.
    pub fn pixel_width(&self) -> usize {
        self.pixels() * PIXEL_INPUT
    }

    /// Conv inputs, two patch coordinates and the question bits.
    pub fn width(&self) -> usize {
        self.pixel_width() + 2 + QUESTION_LEN
    }

    /// Palette occupancy of the pooled image, `side × side × N_COLORS`. Each
    /// pixel is decoded to a one-hot palette color (white is all zeros)
    /// before pooling, so a channel is the share of the block covered by
    /// that color.
    pub fn occupancy(s: &SortOfClevrSample) -> Vec<f32> {
        let side = IMAGE_SIZE / POOL;
        let img = s.image.data();
        let mut pooled = vec![0f32; side * side * N_COLORS];
        let norm = 1.0 / (POOL * POOL) as f32;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let at = (y * IMAGE_SIZE + x) * 3;
                if let Some(c) = COLORS.iter().position(|rgb| rgb[..] == img[at..at + 3]) {
                    pooled[((y / POOL) * side + x / POOL) * N_COLORS + c] += norm;
                }
            }
        }
        pooled
    }

    /// `m × width` input rows: for each pooled pixel of the patch its
    /// zero-padded 3×3 occupancy neighbourhood and its coordinates in
    /// [−1, 1], then the patch coordinates and the question bits.
    pub fn features(&self, s: &SortOfClevrSample) -> Vec<f32> {
        let side = IMAGE_SIZE / POOL;
        let pooled = Self::occupancy(s);
        let q = s.question.encode();
        let cell = self.cell();
        let norm = |v: usize, n: usize| 2.0 * v as f32 / (n as f32 - 1.0) - 1.0;
        let mut out = Vec::with_capacity(self.tokens() * self.width());
        for py in 0..self.grid {
            for px in 0..self.grid {
                for y in py * cell..(py + 1) * cell {
                    for x in px * cell..(px + 1) * cell {
                        for dy in [-1isize, 0, 1] {
                            for dx in [-1isize, 0, 1] {
                                let (ny, nx) = (y as isize + dy, x as isize + dx);
                                if (0..side as isize).contains(&ny) && (0..side as isize).contains(&nx) {
                                    let at = (ny as usize * side + nx as usize) * N_COLORS;
                                    out.extend_from_slice(&pooled[at..at + N_COLORS]);
                                } else {
                                    out.extend_from_slice(&[0.0; N_COLORS]);
                                }
                            }
                        }
                        out.push(norm(x, side));
                        out.push(norm(y, side));
                    }
                }
                out.push(norm(px, self.grid));
                out.push(norm(py, self.grid));
                out.extend_from_slice(&q);
            }
        }
        out
    }
}

/// Model-ready samples.
pub struct ClevrSet {
    pub features: Vec<Vec<f32>>,
    pub task: Vec<usize>,
    pub answer: Vec<usize>,
    pub color: Vec<usize>,
}

/// A split that is rendered on demand, so large training splits cost no
/// memory.
#[derive(Clone, Debug)]
pub struct ClevrSource {
    pub seed: u64,
    pub start: u64,
    pub count: usize,
    pub options: ClevrOptions,
    pub patching: Patching,
}

impl ClevrSource {
    /// Samples `start + i` for each `i` in `idx`.
    pub fn fetch(&self, idx: &[usize]) -> ClevrSet {
        ClevrSet::generate(self, idx.iter().map(|&i| self.start + i as u64))
    }

    pub fn materialize(&self) -> ClevrSet {
        ClevrSet::generate(self, self.start..self.start + self.count as u64)
    }
}

impl ClevrSet {
    fn generate(src: &ClevrSource, indices: impl Iterator<Item = u64>) -> Self {
        let count = indices.size_hint().0;
        let mut set = ClevrSet {
            features: Vec::with_capacity(count),
            task: Vec::with_capacity(count),
            answer: Vec::with_capacity(count),
            color: Vec::with_capacity(count),
        };
        for i in indices {
            let s = sort_of_clevr_sample(src.seed, i, &src.options);
            let patching = src.patching;
            set.features.push(patching.features(&s));
            set.task.push(s.question.kind.is_relational() as usize);
            set.answer.push(s.answer);
            set.color.push(s.question.color);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answer.is_empty()
    }
}

pub struct ClevrModel {
    pub store: ParamStore,
    patching: Patching,
    /// 3×3 conv over palette occupancy, as a per-pixel linear map of the
    /// unfolded neighbourhood.
    conv: Linear,
    /// Sum over the pixels of a patch, `pixels·C × C`. A mean would shrink
    /// an object's signal by the mostly blank patch area.
    pool: Tensor,
    /// Patch embedding of the pooled conv channels, plus the patch-coordinate
    /// embedding added to it.
    patch: Linear,
    coords: Linear,
    /// Question-conditioned gate on the patch features.
    film: Linear,
    stem: Linear,
    task_encoders: Vec<Linear>,
    layers: Vec<MechLayer>,
    heads: Vec<[Linear; 2]>,
    frame: Option<EtfFrame>,
    layout: BlockLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClevrEval {
    pub accuracy: f64,
    /// `None` when the split has no sample of that task or color.
    pub task_accuracy: [Option<f64>; 2],
    pub color_accuracy: [Option<f64>; N_COLORS],
}

impl ClevrModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.n_tasks != 2 {
            return Err(ConfigError::Invalid(format!("imbalance uses 2 tasks, got n_tasks = {}", cfg.n_tasks)).into());
        }
        let patching = Patching::new(cfg.m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MODEL_STREAM);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let conv = Linear::new(&mut store, "conv", CONV_INPUT, CONV_CHANNELS, true, &mut rng);
        let pixels = patching.pixels();
        let pool = Tensor::from_fn(pixels * CONV_CHANNELS, CONV_CHANNELS, |r, c| {
            if r % CONV_CHANNELS == c {
                1.0
            } else {
                0.0
            }
        });
        let patch = Linear::new(&mut store, "patch", CONV_CHANNELS, d, true, &mut rng);
        let coords = Linear::new(&mut store, "coords", 2, d, false, &mut rng);
        let stem = Linear::new(&mut store, "stem", d, d, true, &mut rng);
        let film = Linear::new(&mut store, "film", QUESTION_LEN, d, true, &mut rng);
        let task_encoders = (0..2)
            .map(|t| Linear::new(&mut store, &format!("encoder{t}"), d, d, true, &mut rng))
            .collect();
        let layers = (0..cfg.layers)
            .map(|l| MechLayer::new(&mut store, &format!("layer{l}"), cfg, &mut rng))
            .collect();
        let heads = (0..2)
            .map(|t| {
                [
                    Linear::new(&mut store, &format!("head{t}.0"), d, d, true, &mut rng),
                    Linear::new(&mut store, &format!("head{t}.1"), d, N_ANSWERS, true, &mut rng),
                ]
            })
            .collect();
        Ok(ClevrModel {
            store,
            patching,
            conv,
            pool,
            patch,
            coords,
            film,
            stem,
            task_encoders,
            layers,
            heads,
            frame: etf_frame(cfg)?,
            layout: BlockLayout {
                n_tasks: 2,
                tokens_per_task: cfg.m,
            },
        })
    }

    /// Answer logits for each sample in `idx`, grouped by task:
    /// `(task, sample positions in idx, logits)`.
    fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        data: &ClevrSet,
        idx: &[usize],
    ) -> Result<Vec<(usize, Vec<usize>, Var)>> {
        let m = self.patching.tokens();
        let w = self.patching.width();
        let rows = idx.len() * m;
        let px = self.patching.pixel_width();
        let mut x = Vec::with_capacity(rows * px);
        let mut xy = Vec::with_capacity(rows * 2);
        let mut q = Vec::with_capacity(rows * QUESTION_LEN);
        for &i in idx {
            for row in data.features[i].chunks(w) {
                // The question joins every pixel's conv input, so the first
                // layer can already pick out the queried color.
                for pix in row[..px].chunks(PIXEL_INPUT) {
                    x.extend(pix.iter().map(|&e| e as f64));
                    x.extend(row[px + 2..].iter().map(|&e| e as f64));
                }
                xy.extend(row[px..px + 2].iter().map(|&e| e as f64));
                q.extend(row[px + 2..].iter().map(|&e| e as f64));
            }
        }
        let pixels = self.patching.pixels();
        let x = g.constant(Tensor::new(vec![rows * pixels, CONV_INPUT], x)?);
        let xy = g.constant(Tensor::new(vec![rows, 2], xy)?);
        let q = g.constant(Tensor::new(vec![rows, QUESTION_LEN], q)?);
        let h = self.conv.forward(g, p, x)?;
        let h = g.relu(h);
        let h = g.reshape(h, rows, pixels * CONV_CHANNELS)?;
        let pool = g.constant(self.pool.clone());
        let h = g.matmul(h, pool)?;
        let h = self.patch.forward(g, p, h)?;
        let at = self.coords.forward(g, p, xy)?;
        let h = g.add(h, at)?;
        let h = g.relu(h);
        // Multiplicative question gate. Unlike h ⊙ (1 + γ), it has no
        // question-blind path, so training cannot settle on answer priors.
        let gamma = self.film.forward(g, p, q)?;
        let h = g.mul(h, gamma)?;
        let h = self.stem.forward(g, p, h)?;
        let h = g.relu(h);
        let mut tokens = Vec::with_capacity(2);
        for enc in &self.task_encoders {
            tokens.push(enc.forward(g, p, h)?);
        }
        let mut pooled: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        let mut positions: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (pos, &i) in idx.iter().enumerate() {
            let blocks = [
                g.slice_rows(tokens[0], pos * m, m)?,
                g.slice_rows(tokens[1], pos * m, m)?,
            ];
            let mut f = g.concat_rows(&blocks)?;
            for layer in &self.layers {
                f = layer.forward(g, p, f, self.layout, self.frame.as_ref())?.output;
            }
            let t = data.task[i];
            let block = g.slice_rows(f, t * m, m)?;
            pooled[t].push(g.mean_rows(block)?);
            positions[t].push(pos);
        }
        let mut out = Vec::new();
        for t in 0..2 {
            if pooled[t].is_empty() {
                continue;
            }
            let rows = g.concat_rows(&pooled[t])?;
            let z = self.heads[t][0].forward(g, p, rows)?;
            let z = g.relu(z);
            let logits = self.heads[t][1].forward(g, p, z)?;
            out.push((t, std::mem::take(&mut positions[t]), logits));
        }
        Ok(out)
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        data: &ClevrSet,
        idx: &[usize],
        task_weights: [f64; 2],
    ) -> Result<Var> {
        let groups = self.forward(g, p, data, idx)?;
        let mut losses = Vec::new();
        let mut weights = Vec::new();
        for (t, positions, logits) in groups {
            let labels: Vec<usize> = positions.iter().map(|&pos| data.answer[idx[pos]]).collect();
            let ce = g.cross_entropy(logits, &labels)?;
            // Scale by the task's share of the batch so the sum is a per-sample mean.
            losses.push(ce);
            weights.push(task_weights[t] * positions.len() as f64 / idx.len() as f64);
        }
        Ok(mtl_loss_var(g, &losses, &weights)?)
    }

    pub fn predict(&self, data: &ClevrSet) -> Result<Vec<usize>> {
        let mut preds = vec![0; data.len()];
        let chunk = 64;
        let all: Vec<usize> = (0..data.len()).collect();
        for idx in all.chunks(chunk) {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            for (_, positions, logits) in self.forward(&mut g, &p, data, idx)? {
                let v = g.value(logits);
                for (r, &pos) in positions.iter().enumerate() {
                    preds[idx[pos]] = topk_indices(v.row(r), 1)[0];
                }
            }
        }
        Ok(preds)
    }

    pub fn evaluate(&self, data: &ClevrSet) -> Result<ClevrEval> {
        let preds = self.predict(data)?;
        let subset = |keep: &dyn Fn(usize) -> bool| -> Result<Option<f64>> {
            let (p, t): (Vec<usize>, Vec<usize>) = (0..data.len())
                .filter(|&i| keep(i))
                .map(|i| (preds[i], data.answer[i]))
                .unzip();
            if p.is_empty() {
                return Ok(None);
            }
            Ok(Some(accuracy(&p, &t)?))
        };
        let mut color_accuracy = [None; N_COLORS];
        for (c, slot) in color_accuracy.iter_mut().enumerate() {
            *slot = subset(&|i| data.color[i] == c)?;
        }
        Ok(ClevrEval {
            accuracy: accuracy(&preds, &data.answer)?,
            task_accuracy: [subset(&|i| data.task[i] == 0)?, subset(&|i| data.task[i] == 1)?],
            color_accuracy,
        })
    }
}

pub fn train_clevr(
    cfg: &ExperimentConfig,
    train_set: &ClevrSource,
    task_weights: [f64; 2],
) -> Result<(ClevrModel, Vec<LossPoint>)> {
    let mut model = ClevrModel::new(cfg)?;
    let mut batcher = Batcher::new(train_set.count, cfg.seed ^ BATCH_STREAM);
    let mut store = std::mem::take(&mut model.store);
    let curve = train(&mut store, cfg, |g, p, _| {
        let batch = train_set.fetch(&batcher.next_batch(cfg.batch_size));
        let idx: Vec<usize> = (0..batch.len()).collect();
        model.batch_loss(g, p, &batch, &idx, task_weights)
    })?;
    model.store = store;
    Ok((model, curve))
}

pub fn train_options(cfg: &ExperimentConfig, long_tailed: bool) -> ClevrOptions {
    ClevrOptions {
        imbalance: (long_tailed && !cfg.degenerate).then(|| ImbalanceSpec::with_exponent(cfg.imbalance_exponent)),
        degenerate: cfg.degenerate,
    }
}

pub fn test_set(cfg: &ExperimentConfig) -> Result<ClevrSet> {
    let options = ClevrOptions {
        imbalance: None,
        degenerate: cfg.degenerate,
    };
    let src = ClevrSource {
        seed: cfg.seed,
        start: TEST_OFFSET,
        count: cfg.test_count,
        options,
        patching: Patching::new(cfg.m)?,
    };
    Ok(src.materialize())
}

pub fn train_set(cfg: &ExperimentConfig, long_tailed: bool) -> Result<ClevrSource> {
    Ok(ClevrSource {
        seed: cfg.seed,
        start: 0,
        count: cfg.train_count,
        options: train_options(cfg, long_tailed),
        patching: Patching::new(cfg.m)?,
    })
}

fn push_eval(report: &mut RunReport, split: &str, eval: &ClevrEval) {
    report.push_metric("accuracy", split, eval.accuracy);
    let named = TASK_NAMES.iter().zip(eval.task_accuracy);
    let colors = kem_synth::clevr::COLOR_NAMES.iter().zip(eval.color_accuracy);
    for (name, acc) in named.chain(colors) {
        if let Some(acc) = acc {
            report.push_metric("accuracy", &format!("{split}/{name}"), acc);
        }
    }
}

/// Trains the configured mechanism on the balanced and on the long-tailed
/// split (same scenes, same initialization) and scores both on the balanced
/// test split.
pub fn run_imbalance(cfg: &ExperimentConfig) -> Result<RunReport> {
    if cfg.kind != ExperimentKind::Imbalance {
        return Err(kem_core::Error::Contract(format!("run_imbalance called with kind {}", cfg.kind)).into());
    }
    if cfg.mechanism == Mechanism::CrossAttention {
        return Err(ConfigError::Invalid("imbalance compares kem and skem".into()).into());
    }
    let start = Instant::now();
    let test = test_set(cfg)?;
    let mut report = RunReport::new(cfg);
    let mut acc = [0.0; 2];
    for (j, (label, long_tailed)) in [("balanced", false), ("imbalanced", true)].into_iter().enumerate() {
        let train_data = train_set(cfg, long_tailed)?;
        let (model, curve) = train_clevr(cfg, &train_data, [1.0, 1.0])?;
        let eval = model.evaluate(&test)?;
        acc[j] = eval.accuracy;
        push_eval(&mut report, label, &eval);
        report.losses.push(LossCurve {
            label: label.to_string(),
            points: curve,
        });
    }
    report.push_metric("accuracy_drop", "balanced-imbalanced", acc[0] - acc[1]);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
