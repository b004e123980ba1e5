//! Cross-attention baseline and the slot-memory bottleneck.
//!
//! The bottleneck runs three steps over the concatenated task tokens `F`
//! (`n_s × d`, task blocks contiguous) and learnable memory slots `R` (`L × d`):
//!
//! 1. retrieve: `R̂ = topk-softmax((R·Wqr)(F·Wkr)ᵀ / √d) · F·Wvr`
//! 2. write:    `F̂ = softmax((F·Wqw)(R̂·Wkw)ᵀ / √d) · R̂·Wvw`
//! 3. broadcast: `F ← F + w_r · F̂`
//!
//! Graph-level entry points live on the bound parameter structs
//! ([`KemVars`], [`CrossAttentionVars`]); the free functions evaluate on plain
//! tensors and exist for reference use and tests.

use rand::Rng;

use crate::error::{Error, Result};
use crate::etf::EtfFrame;
use crate::graph::{self, Graph, Var};
use crate::init::{slot_init, xavier_uniform};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-task token features `F = F₁ ⊕ … ⊕ Fₙ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeatureBlock<T> {
    n_tasks: usize,
    tokens_per_task: usize,
    features: Tensor<T>,
}

impl<T: Scalar> TaskFeatureBlock<T> {
    pub fn new(n_tasks: usize, tokens_per_task: usize, features: Tensor<T>) -> Result<Self> {
        if n_tasks == 0 || tokens_per_task == 0 {
            return Err(Error::contract("task block needs n_tasks, tokens_per_task >= 1"));
        }
        if !features.is_matrix() || features.rows() != n_tasks * tokens_per_task {
            return Err(Error::dim(
                "task_feature_block",
                features.shape(),
                &[n_tasks * tokens_per_task, 0],
            ));
        }
        Ok(TaskFeatureBlock {
            n_tasks,
            tokens_per_task,
            features,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn tokens_per_task(&self) -> usize {
        self.tokens_per_task
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tasks * self.tokens_per_task
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn task_of_token(&self, j: usize) -> usize {
        j / self.tokens_per_task
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            n_tasks: self.n_tasks,
            tokens_per_task: self.tokens_per_task,
        }
    }
}

/// How the rows of a token matrix split into task blocks.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub n_tasks: usize,
    pub tokens_per_task: usize,
}

impl BlockLayout {
    pub fn n_tokens(&self) -> usize {
        self.n_tasks * self.tokens_per_task
    }
}

/// Learnable memory slots `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlots<T> {
    pub slots: Tensor<T>,
}

impl<T: Scalar> MemorySlots<T> {
    pub fn new(slots: Tensor<T>) -> Result<Self> {
        slots.expect_matrix("memory_slots")?;
        Ok(MemorySlots { slots })
    }

    /// Slots drawn from `normal(0, 1/√d)`.
    pub fn init<R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> Self {
        MemorySlots {
            slots: slot_init(len, width, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.slots.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KemParams<T> {
    pub w_qr: Tensor<T>,
    pub w_kr: Tensor<T>,
    pub w_vr: Tensor<T>,
    pub w_qw: Tensor<T>,
    pub w_kw: Tensor<T>,
    pub w_vw: Tensor<T>,
    pub residual_weight: T,
    pub top_k: usize,
}

impl<T: Scalar> KemParams<T> {
    pub fn init<R: Rng + ?Sized>(width: usize, top_k: usize, rng: &mut R) -> Self {
        let mut w = || xavier_uniform(width, width, rng);
        KemParams {
            w_qr: w(),
            w_kr: w(),
            w_vr: w(),
            w_qw: w(),
            w_kw: w(),
            w_vw: w(),
            residual_weight: T::one(),
            top_k,
        }
    }

    pub fn projections(&self) -> [&Tensor<T>; 6] {
        [&self.w_qr, &self.w_kr, &self.w_vr, &self.w_qw, &self.w_kw, &self.w_vw]
    }

    pub fn projections_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.w_qr,
            &mut self.w_kr,
            &mut self.w_vr,
            &mut self.w_qw,
            &mut self.w_kw,
            &mut self.w_vw,
        ]
    }

    /// Registers the projections in `g`, as parameters or as constants.
    pub fn bind(&self, g: &mut Graph<T>, learnable: bool) -> KemVars<T> {
        let mut leaf = |t: &Tensor<T>| {
            if learnable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        KemVars {
            w_qr: leaf(&self.w_qr),
            w_kr: leaf(&self.w_kr),
            w_vr: leaf(&self.w_vr),
            w_qw: leaf(&self.w_qw),
            w_kw: leaf(&self.w_kw),
            w_vw: leaf(&self.w_vw),
            residual_weight: self.residual_weight,
            top_k: self.top_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Scalar> CrossAttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        CrossAttentionParams {
            w_q: xavier_uniform(width, width, rng),
            w_k: xavier_uniform(width, width, rng),
            w_v: xavier_uniform(width, width, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, learnable: bool) -> CrossAttentionVars {
        let mut leaf = |t: &Tensor<T>| {
            if learnable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        CrossAttentionVars {
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
        }
    }
}

/// Output of one attention step: the attended values and the weight matrix.
#[derive(Copy, Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

#[derive(Copy, Clone, Debug)]
pub struct KemOutput {
    pub output: Var,
    pub retrieve: Attended,
    pub write: Attended,
}

#[derive(Copy, Clone, Debug)]
pub struct CrossAttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl CrossAttentionVars {
    /// `softmax((F·Wq)(F·Wk)ᵀ / √d) · F·Wv`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, f: Var) -> Result<Attended> {
        let d = g.value(f).cols();
        let q = g.matmul(f, self.w_q)?;
        let k = g.matmul(f, self.w_k)?;
        let v = g.matmul(f, self.w_v)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, inv_sqrt(d));
        let weights = g.softmax_rows(logits)?;
        let output = g.matmul(weights, v)?;
        Ok(Attended { output, weights })
    }
}

#[derive(Copy, Clone, Debug)]
pub struct KemVars<T> {
    pub w_qr: Var,
    pub w_kr: Var,
    pub w_vr: Var,
    pub w_qw: Var,
    pub w_kw: Var,
    pub w_vw: Var,
    pub residual_weight: T,
    pub top_k: usize,
}

impl<T: Scalar> KemVars<T> {
    /// Retrieve step. With `etf`, the scaled logits are mixed along the task
    /// axis by the frame's Gram matrix before selection.
    pub fn retrieve(
        &self,
        g: &mut Graph<T>,
        f: Var,
        layout: BlockLayout,
        slots: Var,
        etf: Option<&EtfFrame<T>>,
    ) -> Result<Attended> {
        let n_s = g.value(f).rows();
        if n_s != layout.n_tokens() {
            return Err(Error::dim("kem_retrieve", g.value(f).shape(), &[layout.n_tokens(), 0]));
        }
        if self.top_k < 1 || self.top_k > n_s {
            return Err(Error::contract(format!("top_k = {} must lie in 1..={n_s}", self.top_k)));
        }
        if let Some(frame) = etf {
            if frame.etf_k() != layout.n_tasks {
                return Err(Error::contract(format!(
                    "ETF has {} vertices but there are {} tasks",
                    frame.etf_k(),
                    layout.n_tasks
                )));
            }
        }
        let d = g.value(f).cols();
        let q = g.matmul(slots, self.w_qr)?;
        let k = g.matmul(f, self.w_kr)?;
        let v = g.matmul(f, self.w_vr)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let mut logits = g.scale(logits, inv_sqrt(d));
        if let Some(frame) = etf {
            logits = g.mix_blocks(logits, frame.gram(), layout.tokens_per_task)?;
        }
        let weights = g.topk_softmax(logits, self.top_k)?;
        let output = g.matmul(weights, v)?;
        Ok(Attended { output, weights })
    }

    /// Write step: every token attends over all slots with plain softmax.
    pub fn write(&self, g: &mut Graph<T>, f: Var, r_hat: Var) -> Result<Attended> {
        let d = g.value(f).cols();
        let q = g.matmul(f, self.w_qw)?;
        let k = g.matmul(r_hat, self.w_kw)?;
        let v = g.matmul(r_hat, self.w_vw)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, inv_sqrt(d));
        let weights = g.softmax_rows(logits)?;
        let output = g.matmul(weights, v)?;
        Ok(Attended { output, weights })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        f: Var,
        layout: BlockLayout,
        slots: Var,
        etf: Option<&EtfFrame<T>>,
    ) -> Result<KemOutput> {
        let retrieve = self.retrieve(g, f, layout, slots, etf)?;
        let write = self.write(g, f, retrieve.output)?;
        let output = broadcast(g, f, write.output, self.residual_weight)?;
        Ok(KemOutput {
            output,
            retrieve,
            write,
        })
    }
}

/// `F + w_r · F̂`.
pub fn broadcast<T: Scalar>(g: &mut Graph<T>, f: Var, f_hat: Var, w_r: T) -> Result<Var> {
    let scaled = g.scale(f_hat, w_r);
    g.add(f, scaled)
}

fn inv_sqrt<T: Scalar>(d: usize) -> T {
    T::one() / T::from_usize_lossy(d).sqrt()
}

fn check_width<T: Scalar>(op: &'static str, f: &TaskFeatureBlock<T>, w: &Tensor<T>) -> Result<()> {
    if w.shape() != [f.width(), f.width()] {
        return Err(Error::dim(op, f.features().shape(), w.shape()));
    }
    Ok(())
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_matrix("softmax_rows")?;
    Ok(graph::softmax_rows(x))
}

pub fn topk_softmax<T: Scalar>(logits: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.topk_softmax(x, k)?;
    Ok(g.value(y).clone())
}

pub fn cross_attention<T: Scalar>(f: &TaskFeatureBlock<T>, params: &CrossAttentionParams<T>) -> Result<Tensor<T>> {
    for w in [&params.w_q, &params.w_k, &params.w_v] {
        check_width("cross_attention", f, w)?;
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let fv = g.constant(f.features().clone());
    let out = vars.forward(&mut g, fv)?;
    Ok(g.value(out.output).clone())
}

fn retrieve_value<T: Scalar>(
    f: &TaskFeatureBlock<T>,
    slots: &MemorySlots<T>,
    params: &KemParams<T>,
    etf: Option<&EtfFrame<T>>,
) -> Result<Tensor<T>> {
    for w in params.projections() {
        check_width("kem_retrieve", f, w)?;
    }
    if slots.width() != f.width() {
        return Err(Error::dim("kem_retrieve", f.features().shape(), slots.slots.shape()));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let fv = g.constant(f.features().clone());
    let r = g.constant(slots.slots.clone());
    let out = vars.retrieve(&mut g, fv, f.layout(), r, etf)?;
    Ok(g.value(out.output).clone())
}

pub fn kem_retrieve<T: Scalar>(
    f: &TaskFeatureBlock<T>,
    slots: &MemorySlots<T>,
    params: &KemParams<T>,
) -> Result<Tensor<T>> {
    retrieve_value(f, slots, params, None)
}

/// Retrieve with task-axis ETF mixing of the logits.
pub fn skem_retrieve<T: Scalar>(
    f: &TaskFeatureBlock<T>,
    slots: &MemorySlots<T>,
    params: &KemParams<T>,
    etf: &EtfFrame<T>,
) -> Result<Tensor<T>> {
    retrieve_value(f, slots, params, Some(etf))
}

pub fn kem_write<T: Scalar>(f: &TaskFeatureBlock<T>, r_hat: &Tensor<T>, params: &KemParams<T>) -> Result<Tensor<T>> {
    for w in params.projections() {
        check_width("kem_write", f, w)?;
    }
    if !r_hat.is_matrix() || r_hat.cols() != f.width() {
        return Err(Error::dim("kem_write", f.features().shape(), r_hat.shape()));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let fv = g.constant(f.features().clone());
    let r = g.constant(r_hat.clone());
    let out = vars.write(&mut g, fv, r)?;
    Ok(g.value(out.output).clone())
}

pub fn kem_broadcast<T: Scalar>(f: &TaskFeatureBlock<T>, f_hat: &Tensor<T>, w_r: T) -> Result<TaskFeatureBlock<T>> {
    if f_hat.shape() != f.features().shape() {
        return Err(Error::dim("kem_broadcast", f.features().shape(), f_hat.shape()));
    }
    let features = f.features().zip_with(f_hat, "kem_broadcast", |a, b| a + w_r * b)?;
    TaskFeatureBlock::new(f.n_tasks, f.tokens_per_task, features)
}

/// Retrieve, write and broadcast. Uses the ETF-mixed retrieve when `etf` is
/// given.
pub fn kem_forward<T: Scalar>(
    f: &TaskFeatureBlock<T>,
    slots: &MemorySlots<T>,
    params: &KemParams<T>,
    etf: Option<&EtfFrame<T>>,
) -> Result<TaskFeatureBlock<T>> {
    let r_hat = retrieve_value(f, slots, params, etf)?;
    let f_hat = kem_write(f, &r_hat, params)?;
    kem_broadcast(f, &f_hat, params.residual_weight)
}
