//! Reverse-mode differentiation over a define-by-run tape.
//!
//! A [`Ctx`] threads through every op. In inference mode it only counts
//! matmul FLOPs; in recording mode it additionally appends each op to a
//! Wengert tape. Nodes are keyed by buffer identity, so reusing the same
//! parameter tensor twice accumulates into one gradient, and the tape keeps
//! every buffer alive for the duration of the recording.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) struct Node<T> {
    pub data: Arc<Vec<T>>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<T>>,
}

#[allow(clippy::enum_variant_names)]
pub(crate) enum Op<T> {
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, out: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize, out: usize },
    AddRow { a: usize, row: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, out: usize, c: T },
    Silu { a: usize, out: usize },
    SiluMasked { a: usize, out: usize, mask: Arc<Vec<u8>> },
    MaskMul { a: usize, out: usize, mask: Arc<Vec<u8>> },
    Sigmoid { a: usize, out: usize },
    SoftmaxRows { a: usize, out: usize, scale: T },
    LayerNorm { a: usize, gain: usize, bias: usize, out: usize, xhat: Vec<T>, inv_std: Vec<T> },
    ConcatRows { inputs: Vec<usize>, out: usize },
    ConcatCols { inputs: Vec<usize>, out: usize },
    SliceRows { a: usize, out: usize, start: usize },
    SumRows { a: usize, out: usize },
    SumAll { a: usize, out: usize },
    RepeatRow { a: usize, out: usize },
    GatherRows { table: usize, out: usize, indices: Vec<usize> },
    BceWithLogits { logits: usize, out: usize, labels: Vec<T> },
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    by_buf: HashMap<usize, usize>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            ops: Vec::new(),
            by_buf: HashMap::new(),
            consumed: false,
        }
    }

    /// Node id for a tensor, inserting a leaf if unseen.
    pub(crate) fn track(&mut self, t: &Tensor<T>) -> usize {
        if let Some(&id) = self.by_buf.get(&t.buf_id()) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            data: t.data_arc(),
            shape: t.shape().to_vec(),
            grad: None,
        });
        self.by_buf.insert(t.buf_id(), id);
        id
    }

    fn lookup(&self, t: &Tensor<T>) -> Option<usize> {
        self.by_buf.get(&t.buf_id()).copied()
    }

    fn add_grad(&mut self, node: usize, g: &[T]) {
        let n = &mut self.nodes[node];
        let grad = g_buf(&mut n.grad, n.data.len());
        for (dst, &src) in grad.iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }
}

fn g_buf<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

/// Execution context: optional tape plus the matmul FLOP counter.
pub struct Ctx<T> {
    tape: Option<Tape<T>>,
    flops: u64,
}

impl<T: Scalar> Ctx<T> {
    /// Forward-only context; counts FLOPs, records nothing.
    pub fn inference() -> Self {
        Self { tape: None, flops: 0 }
    }

    /// Context that records every op for a later backward pass.
    pub fn recording() -> Self {
        Self {
            tape: Some(Tape::new()),
            flops: 0,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.tape.is_some()
    }

    #[inline]
    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub(crate) fn record(
        &mut self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        make: impl FnOnce(&[usize], usize) -> Op<T>,
    ) {
        if let Some(tape) = self.tape.as_mut() {
            let ids: Vec<usize> = inputs.iter().map(|t| tape.track(t)).collect();
            let out_id = tape.track(out);
            let op = make(&ids, out_id);
            tape.ops.push(op);
        }
    }

    /// Gradient of the recorded loss with respect to `t`, if `t` was part of
    /// the recording and `backward` has run.
    pub fn grad(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let tape = self.tape.as_ref()?;
        let id = tape.lookup(t)?;
        let node = &tape.nodes[id];
        let g = node.grad.as_ref()?;
        Some(Tensor::new(&node.shape, g.clone()).expect("grad shape"))
    }

    /// Reverse pass from a scalar loss. Rejects repeated invocations and
    /// losses that are not on this tape.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        let tape = self.tape.as_mut().ok_or(Error::DetachedTensor)?;
        if tape.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let loss_id = tape.lookup(loss).ok_or(Error::DetachedTensor)?;
        tape.consumed = true;
        tape.nodes[loss_id].grad = Some(vec![T::one()]);

        for idx in (0..tape.ops.len()).rev() {
            step_backward(tape, idx);
        }
        Ok(())
    }
}

fn out_grad<T: Scalar>(tape: &Tape<T>, out: usize) -> Option<Vec<T>> {
    tape.nodes[out].grad.clone()
}

fn data<T: Scalar>(tape: &Tape<T>, id: usize) -> Arc<Vec<T>> {
    Arc::clone(&tape.nodes[id].data)
}

fn shape<T: Scalar>(tape: &Tape<T>, id: usize) -> Vec<usize> {
    tape.nodes[id].shape.clone()
}

fn step_backward<T: Scalar>(tape: &mut Tape<T>, idx: usize) {
    // Ops are split out of the tape temporarily so we can mutate node grads.
    let op = std::mem::replace(&mut tape.ops[idx], Op::SumAll { a: 0, out: 0 });
    match &op {
        Op::Matmul { a, b, out, m, k, n } => {
            if let Some(g) = out_grad(tape, *out) {
                let (m, k, n) = (*m, *k, *n);
                let ad = data(tape, *a);
                let bd = data(tape, *b);
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = kernel::transpose(&bd, k, n);
                let da = kernel::matmul(&g, &bt, m, n, k);
                let at = kernel::transpose(&ad, m, k);
                let db = kernel::matmul(&at, &g, k, m, n);
                tape.add_grad(*a, &da);
                tape.add_grad(*b, &db);
            }
        }
        Op::Transpose { a, out, rows, cols } => {
            if let Some(g) = out_grad(tape, *out) {
                let gt = kernel::transpose(&g, *cols, *rows);
                tape.add_grad(*a, &gt);
            }
        }
        Op::Add { a, b, out } => {
            if let Some(g) = out_grad(tape, *out) {
                tape.add_grad(*a, &g);
                tape.add_grad(*b, &g);
            }
        }
        Op::AddRow { a, row, out } => {
            if let Some(g) = out_grad(tape, *out) {
                tape.add_grad(*a, &g);
                let cols = shape(tape, *row)[1];
                let rows = g.len() / cols;
                let mut rg = vec![T::zero(); cols];
                for i in 0..rows {
                    for j in 0..cols {
                        rg[j] += g[i * cols + j];
                    }
                }
                tape.add_grad(*row, &rg);
            }
        }
        Op::Mul { a, b, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let ad = data(tape, *a);
                let bd = data(tape, *b);
                let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&g, &b)| g * b).collect();
                let db: Vec<T> = g.iter().zip(ad.iter()).map(|(&g, &a)| g * a).collect();
                tape.add_grad(*a, &da);
                tape.add_grad(*b, &db);
            }
        }
        Op::Scale { a, out, c } => {
            if let Some(g) = out_grad(tape, *out) {
                let da: Vec<T> = g.iter().map(|&g| g * *c).collect();
                tape.add_grad(*a, &da);
            }
        }
        Op::Silu { a, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let ad = data(tape, *a);
                let da: Vec<T> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&g, &x)| g * kernel::silu_grad(x))
                    .collect();
                tape.add_grad(*a, &da);
            }
        }
        Op::SiluMasked { a, out, mask } => {
            if let Some(g) = out_grad(tape, *out) {
                let ad = data(tape, *a);
                let da: Vec<T> = g
                    .iter()
                    .zip(ad.iter())
                    .zip(mask.iter())
                    .map(|((&g, &x), &m)| {
                        if m != 0 {
                            g * kernel::silu_grad(x)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                tape.add_grad(*a, &da);
            }
        }
        Op::MaskMul { a, out, mask } => {
            if let Some(g) = out_grad(tape, *out) {
                let da: Vec<T> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| if m != 0 { g } else { T::zero() })
                    .collect();
                tape.add_grad(*a, &da);
            }
        }
        Op::Sigmoid { a, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let od = data(tape, *out);
                let da: Vec<T> = g
                    .iter()
                    .zip(od.iter())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                tape.add_grad(*a, &da);
            }
        }
        Op::SoftmaxRows { a, out, scale } => {
            if let Some(g) = out_grad(tape, *out) {
                let od = data(tape, *out);
                let sh = shape(tape, *out);
                let (rows, cols) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    let s = &od[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot += s[j] * gr[j];
                    }
                    for j in 0..cols {
                        da[i * cols + j] = *scale * s[j] * (gr[j] - dot);
                    }
                }
                tape.add_grad(*a, &da);
            }
        }
        Op::LayerNorm { a, gain, bias, out, xhat, inv_std } => {
            if let Some(g) = out_grad(tape, *out) {
                let gd = data(tape, *gain);
                let sh = shape(tape, *out);
                let (rows, cols) = (sh[0], sh[1]);
                let nf = T::from_f64(cols as f64);
                let mut da = vec![T::zero(); rows * cols];
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                for i in 0..rows {
                    let gr = &g[i * cols..(i + 1) * cols];
                    let xh = &xhat[i * cols..(i + 1) * cols];
                    let istd = inv_std[i];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..cols {
                        let dxh = gr[j] * gd[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                    }
                    mean_dxh = mean_dxh / nf;
                    mean_dxh_xh = mean_dxh_xh / nf;
                    for j in 0..cols {
                        let dxh = gr[j] * gd[j];
                        da[i * cols + j] = istd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                tape.add_grad(*a, &da);
                tape.add_grad(*gain, &dgain);
                tape.add_grad(*bias, &dbias);
            }
        }
        Op::ConcatRows { inputs, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let mut offset = 0;
                for &inp in inputs {
                    let len = tape.nodes[inp].data.len();
                    tape.add_grad(inp, &g[offset..offset + len]);
                    offset += len;
                }
            }
        }
        Op::ConcatCols { inputs, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let out_cols = shape(tape, *out)[1];
                let rows = shape(tape, *out)[0];
                let mut col0 = 0;
                for &inp in inputs {
                    let ci = shape(tape, inp)[1];
                    let mut gi = vec![T::zero(); rows * ci];
                    for r in 0..rows {
                        gi[r * ci..(r + 1) * ci]
                            .copy_from_slice(&g[r * out_cols + col0..r * out_cols + col0 + ci]);
                    }
                    tape.add_grad(inp, &gi);
                    col0 += ci;
                }
            }
        }
        Op::SliceRows { a, out, start } => {
            if let Some(g) = out_grad(tape, *out) {
                let cols = shape(tape, *a)[1];
                let total = tape.nodes[*a].data.len();
                let mut da = vec![T::zero(); total];
                let begin = start * cols;
                da[begin..begin + g.len()].copy_from_slice(&g);
                tape.add_grad(*a, &da);
            }
        }
        Op::SumRows { a, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let sh = shape(tape, *a);
                let (rows, cols) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    da[i * cols..(i + 1) * cols].copy_from_slice(&g);
                }
                tape.add_grad(*a, &da);
            }
        }
        Op::SumAll { a, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let da = vec![g[0]; tape.nodes[*a].data.len()];
                tape.add_grad(*a, &da);
            }
        }
        Op::RepeatRow { a, out } => {
            if let Some(g) = out_grad(tape, *out) {
                let cols = shape(tape, *a)[1];
                let rows = g.len() / cols;
                let mut da = vec![T::zero(); cols];
                for i in 0..rows {
                    for j in 0..cols {
                        da[j] += g[i * cols + j];
                    }
                }
                tape.add_grad(*a, &da);
            }
        }
        Op::GatherRows { table, out, indices } => {
            if let Some(g) = out_grad(tape, *out) {
                let cols = shape(tape, *table)[1];
                let mut dt = vec![T::zero(); tape.nodes[*table].data.len()];
                for (i, &row) in indices.iter().enumerate() {
                    for j in 0..cols {
                        dt[row * cols + j] += g[i * cols + j];
                    }
                }
                tape.add_grad(*table, &dt);
            }
        }
        Op::BceWithLogits { logits, out, labels } => {
            if let Some(g) = out_grad(tape, *out) {
                let zd = data(tape, *logits);
                let n = T::from_f64(zd.len() as f64);
                let da: Vec<T> = zd
                    .iter()
                    .zip(labels.iter())
                    .map(|(&z, &y)| g[0] * (kernel::sigmoid(z) - y) / n)
                    .collect();
                tape.add_grad(*logits, &da);
            }
        }
    }
    tape.ops[idx] = op;
}
