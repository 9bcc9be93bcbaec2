//! Item embedding tower and plain MLPs.
//!
//! Items are described by categorical attribute ids (continuous attributes
//! are bucketized upstream). Each attribute has its own embedding table with
//! row 0 reserved for out-of-vocabulary ids; the concatenated attribute
//! embeddings are projected through an MLP into one unified d-vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Ctx;
use crate::tensor::Tensor;

// ── MLP ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenAct {
    Silu,
    /// Test hook for closed-form checks.
    Identity,
}

/// Dense MLP; hidden layers activated, output layer linear.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    pub hidden_act: HiddenAct,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes` = [input, hidden..., output].
    pub fn init<R: Rng>(rng: &mut R, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let std = 1.0 / (w[0] as f64).sqrt();
            weights.push(Tensor::randn(rng, w[0], w[1], std));
            biases.push(Tensor::zeros(1, w[1]));
        }
        Self {
            weights,
            biases,
            hidden_act: HiddenAct::Silu,
        }
    }

    /// Single linear layer selecting the first `out_dim` input columns.
    /// Test hook: with zero bias the MLP is exactly a column projection.
    pub fn select_first_cols(in_dim: usize, out_dim: usize) -> Self {
        assert!(out_dim <= in_dim);
        let mut w = vec![T::zero(); in_dim * out_dim];
        for i in 0..out_dim {
            w[i * out_dim + i] = T::one();
        }
        Self {
            weights: vec![Tensor::matrix(in_dim, out_dim, w).unwrap()],
            biases: vec![Tensor::zeros(1, out_dim)],
            hidden_act: HiddenAct::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let mut cur = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let lin = ops::matmul(ctx, &cur, w)?;
            cur = ops::add_row(ctx, &lin, b)?;
            if i < last && self.hidden_act == HiddenAct::Silu {
                cur = ops::silu(ctx, &cur)?;
            }
        }
        Ok(cur)
    }
}

// ── Bucketizer ───────────────────────────────────────────────────────

/// Maps a continuous value to a bucket index via sorted boundaries.
/// A value exactly on a boundary falls in the lower bucket.
#[derive(Clone, Debug)]
pub struct Bucketizer {
    boundaries: Vec<f64>,
}

impl Bucketizer {
    pub fn new(mut boundaries: Vec<f64>) -> Self {
        boundaries.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self { boundaries }
    }

    pub fn bucket(&self, v: f64) -> usize {
        self.boundaries.partition_point(|b| *b < v)
    }

    pub fn bucket_count(&self) -> usize {
        self.boundaries.len() + 1
    }
}

// ── Item tower ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ItemTower<T> {
    /// One table per attribute, shaped (vocab+1)×attr_dim; row 0 is the
    /// reserved out-of-vocabulary row.
    pub tables: Vec<Tensor<T>>,
    pub vocabs: Vec<usize>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> ItemTower<T> {
    /// `attrs` = per-attribute (vocab, embedding_dim); MLP maps the concat
    /// of attribute embeddings to `d`.
    pub fn init<R: Rng>(rng: &mut R, attrs: &[(usize, usize)], d: usize) -> Self {
        let tables = attrs
            .iter()
            .map(|&(vocab, dim)| Tensor::randn(rng, vocab + 1, dim, 0.5))
            .collect();
        let vocabs = attrs.iter().map(|&(v, _)| v).collect();
        let concat: usize = attrs.iter().map(|&(_, dim)| dim).sum();
        Self {
            tables,
            vocabs,
            mlp: Mlp::init(rng, &[concat, d]),
        }
    }

    /// Embed one batch of items given their raw attribute ids,
    /// `raw[item][attribute]`. Out-of-vocabulary ids hit row 0.
    pub fn embed_items(&self, ctx: &mut Ctx<T>, raw: &[Vec<usize>]) -> Result<Tensor<T>> {
        if raw.iter().any(|r| r.len() != self.tables.len()) {
            return Err(Error::DegenerateInput(format!(
                "expected {} attributes per item",
                self.tables.len()
            )));
        }
        let mut parts = Vec::with_capacity(self.tables.len());
        for (a, table) in self.tables.iter().enumerate() {
            let vocab = self.vocabs[a];
            let idx: Vec<usize> = raw
                .iter()
                .map(|r| if r[a] < vocab { r[a] + 1 } else { 0 })
                .collect();
            parts.push(ops::gather_rows(ctx, table, &idx)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let concat = if refs.len() == 1 {
            parts[0].clone()
        } else {
            ops::concat_cols(ctx, &refs)?
        };
        self.mlp.forward(ctx, &concat)
    }
}
