//! Differentiable tensor operations.
//!
//! Each op validates shapes, runs the raw kernel, bumps the FLOP counter
//! where matmuls are involved, and records itself when the context carries a
//! tape. Forward results are identical with and without recording.

use crate::error::{Error, Result};
use crate::kernel;
use crate::scalar::Scalar;
use crate::tape::{Ctx, Op};
use crate::tensor::Tensor;

fn want_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

fn mismatch<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error
where
    T: Scalar,
{
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// C = A · B with the counter incremented by `2·p·q·r`.
pub fn matmul<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    want_matrix("matmul", a)?;
    want_matrix("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let out = Tensor::matrix(m, n, kernel::matmul(a.data(), b.data(), m, k, n))?;
    ctx.add_flops(2 * (m as u64) * (k as u64) * (n as u64));
    ctx.record(&[a, b], &out, |ids, o| Op::Matmul {
        a: ids[0],
        b: ids[1],
        out: o,
        m,
        k,
        n,
    });
    Ok(out)
}

pub fn transpose<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    want_matrix("transpose", a)?;
    let (r, c) = (a.rows(), a.cols());
    let out = Tensor::matrix(c, r, kernel::transpose(a.data(), r, c))?;
    ctx.record(&[a], &out, |ids, o| Op::Transpose {
        a: ids[0],
        out: o,
        rows: r,
        cols: c,
    });
    Ok(out)
}

pub fn add<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a, b], &out, |ids, o| Op::Add {
        a: ids[0],
        b: ids[1],
        out: o,
    });
    Ok(out)
}

/// Broadcast a 1×d row over every row of `a` (the only broadcast supported).
pub fn add_row<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    want_matrix("add_row", a)?;
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(mismatch("add_row", a, row));
    }
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + row.data()[i % cols])
        .collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a, row], &out, |ids, o| Op::AddRow {
        a: ids[0],
        row: ids[1],
        out: o,
    });
    Ok(out)
}

pub fn mul<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a, b], &out, |ids, o| Op::Mul {
        a: ids[0],
        b: ids[1],
        out: o,
    });
    Ok(out)
}

pub fn scale<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    let data = a.data().iter().map(|&x| x * c).collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a], &out, |ids, o| Op::Scale {
        a: ids[0],
        out: o,
        c,
    });
    Ok(out)
}

pub fn sub<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let nb = scale(ctx, b, -T::one())?;
    add(ctx, a, &nb)
}

pub fn silu<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let data = a.data().iter().map(|&x| kernel::silu(x)).collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a], &out, |ids, o| Op::Silu { a: ids[0], out: o });
    Ok(out)
}

/// SiLU with masked entries forced to exact zeros, fused so large masked
/// score matrices cost one output buffer instead of three.
pub fn silu_masked<T: Scalar>(
    ctx: &mut Ctx<T>,
    a: &Tensor<T>,
    mask: std::sync::Arc<Vec<u8>>,
) -> Result<Tensor<T>> {
    if mask.len() != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "silu_masked",
            lhs: a.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let data = a
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&x, &m)| if m != 0 { kernel::silu(x) } else { T::zero() })
        .collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a], &out, |ids, o| Op::SiluMasked {
        a: ids[0],
        out: o,
        mask,
    });
    Ok(out)
}

/// Elementwise product with a constant binary mask.
pub fn mask_mul<T: Scalar>(
    ctx: &mut Ctx<T>,
    a: &Tensor<T>,
    mask: std::sync::Arc<Vec<u8>>,
) -> Result<Tensor<T>> {
    if mask.len() != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "mask_mul",
            lhs: a.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let data = a
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&x, &m)| if m != 0 { x } else { T::zero() })
        .collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a], &out, |ids, o| Op::MaskMul {
        a: ids[0],
        out: o,
        mask,
    });
    Ok(out)
}

pub fn sigmoid<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let data = a.data().iter().map(|&x| kernel::sigmoid(x)).collect();
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a], &out, |ids, o| Op::Sigmoid { a: ids[0], out: o });
    Ok(out)
}

/// Row-wise softmax of `scale · a`. Stable under max-shift.
pub fn softmax_rows<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    softmax_rows_masked(ctx, a, scale, None)
}

/// Softmax with logit masking: masked entries receive zero weight before
/// normalization, keeping live entries a proper distribution.
pub fn softmax_rows_masked<T: Scalar>(
    ctx: &mut Ctx<T>,
    a: &Tensor<T>,
    scale: T,
    mask: Option<&[u8]>,
) -> Result<Tensor<T>> {
    want_matrix("softmax_rows", a)?;
    if let Some(m) = mask {
        if m.len() != a.numel() {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows mask",
                lhs: a.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
    }
    let data = kernel::softmax_rows(a.data(), a.rows(), a.cols(), scale, mask);
    let out = Tensor::new(a.shape(), data)?;
    // Masked weights are exact zeros, so the unmasked Jacobian formula
    // applied in backward already routes them zero gradient.
    ctx.record(&[a], &out, |ids, o| Op::SoftmaxRows {
        a: ids[0],
        out: o,
        scale,
    });
    Ok(out)
}

pub fn layer_norm<T: Scalar>(
    ctx: &mut Ctx<T>,
    a: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    want_matrix("layer_norm", a)?;
    if gain.numel() != a.cols() || bias.numel() != a.cols() {
        return Err(mismatch("layer_norm", a, gain));
    }
    let (data, xhat, inv_std) =
        kernel::layer_norm(a.data(), a.rows(), a.cols(), gain.data(), bias.data());
    let out = Tensor::new(a.shape(), data)?;
    ctx.record(&[a, gain, bias], &out, |ids, o| Op::LayerNorm {
        a: ids[0],
        gain: ids[1],
        bias: ids[2],
        out: o,
        xhat,
        inv_std,
    });
    Ok(out)
}

/// Stack matrices vertically; trailing dimensions must agree.
pub fn concat_rows<T: Scalar>(ctx: &mut Ctx<T>, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts
        .first()
        .ok_or_else(|| Error::DegenerateInput("concat_rows of nothing".into()))?
        .cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        want_matrix("concat_rows", p)?;
        if p.cols() != cols {
            return Err(mismatch("concat_rows", parts[0], p));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    let out = Tensor::matrix(rows, cols, data)?;
    ctx.record(parts, &out, |ids, o| Op::ConcatRows {
        inputs: ids.to_vec(),
        out: o,
    });
    Ok(out)
}

/// Stack matrices side by side; row counts must agree.
pub fn concat_cols<T: Scalar>(ctx: &mut Ctx<T>, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts
        .first()
        .ok_or_else(|| Error::DegenerateInput("concat_cols of nothing".into()))?
        .rows();
    let mut cols = 0;
    for p in parts {
        want_matrix("concat_cols", p)?;
        if p.rows() != rows {
            return Err(mismatch("concat_cols", parts[0], p));
        }
        cols += p.cols();
    }
    let mut data = vec![T::zero(); rows * cols];
    let mut col0 = 0;
    for p in parts {
        let ci = p.cols();
        for r in 0..rows {
            data[r * cols + col0..r * cols + col0 + ci]
                .copy_from_slice(&p.data()[r * ci..(r + 1) * ci]);
        }
        col0 += ci;
    }
    let out = Tensor::matrix(rows, cols, data)?;
    ctx.record(parts, &out, |ids, o| Op::ConcatCols {
        inputs: ids.to_vec(),
        out: o,
    });
    Ok(out)
}

pub fn slice_rows<T: Scalar>(
    ctx: &mut Ctx<T>,
    a: &Tensor<T>,
    start: usize,
    end: usize,
) -> Result<Tensor<T>> {
    want_matrix("slice_rows", a)?;
    if start > end || end > a.rows() {
        return Err(Error::DegenerateInput(format!(
            "slice_rows {start}..{end} out of {} rows",
            a.rows()
        )));
    }
    let cols = a.cols();
    let data = a.data()[start * cols..end * cols].to_vec();
    let out = Tensor::matrix(end - start, cols, data)?;
    ctx.record(&[a], &out, |ids, o| Op::SliceRows {
        a: ids[0],
        out: o,
        start,
    });
    Ok(out)
}

/// Column-wise sum over rows: p×d → 1×d. Zero rows sum to zeros.
pub fn sum_rows<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    want_matrix("sum_rows", a)?;
    let cols = a.cols();
    let mut data = vec![T::zero(); cols];
    for i in 0..a.rows() {
        for j in 0..cols {
            data[j] += a.data()[i * cols + j];
        }
    }
    let out = Tensor::matrix(1, cols, data)?;
    ctx.record(&[a], &out, |ids, o| Op::SumRows { a: ids[0], out: o });
    Ok(out)
}

pub fn sum_all<T: Scalar>(ctx: &mut Ctx<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let mut total = T::zero();
    for &v in a.data() {
        total += v;
    }
    let out = Tensor::scalar(total);
    ctx.record(&[a], &out, |ids, o| Op::SumAll { a: ids[0], out: o });
    Ok(out)
}

/// Tile a 1×d row into p×d.
pub fn repeat_row<T: Scalar>(ctx: &mut Ctx<T>, row: &Tensor<T>, reps: usize) -> Result<Tensor<T>> {
    want_matrix("repeat_row", row)?;
    if row.rows() != 1 {
        return Err(Error::ShapeMismatch {
            op: "repeat_row",
            lhs: row.shape().to_vec(),
            rhs: vec![1, row.cols()],
        });
    }
    let mut data = Vec::with_capacity(reps * row.cols());
    for _ in 0..reps {
        data.extend_from_slice(row.data());
    }
    let out = Tensor::matrix(reps, row.cols(), data)?;
    ctx.record(&[row], &out, |ids, o| Op::RepeatRow { a: ids[0], out: o });
    Ok(out)
}

/// Embedding-style row lookup; gradient scatter-adds into the table.
pub fn gather_rows<T: Scalar>(
    ctx: &mut Ctx<T>,
    table: &Tensor<T>,
    indices: &[usize],
) -> Result<Tensor<T>> {
    want_matrix("gather_rows", table)?;
    let cols = table.cols();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        if i >= table.rows() {
            return Err(Error::DegenerateInput(format!(
                "gather_rows index {i} out of {} rows",
                table.rows()
            )));
        }
        data.extend_from_slice(&table.data()[i * cols..(i + 1) * cols]);
    }
    let out = Tensor::matrix(indices.len(), cols, data)?;
    let idx = indices.to_vec();
    ctx.record(&[table], &out, |ids, o| Op::GatherRows {
        table: ids[0],
        out: o,
        indices: idx,
    });
    Ok(out)
}

/// Mean binary cross-entropy over logits, as a 1×1 tensor.
pub fn bce_with_logits<T: Scalar>(
    ctx: &mut Ctx<T>,
    logits: &Tensor<T>,
    labels: &[T],
) -> Result<Tensor<T>> {
    if logits.numel() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "bce_with_logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let out = Tensor::scalar(kernel::bce_with_logits(logits.data(), labels));
    let labels = labels.to_vec();
    ctx.record(&[logits], &out, |ids, o| Op::BceWithLogits {
        logits: ids[0],
        out: o,
        labels,
    });
    Ok(out)
}
