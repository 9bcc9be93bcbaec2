//! The model zoo: TTSN baseline, LIME-MHA, LIME-XOR, and the MHA/HSTU
//! skylines behind one scoring interface.
//!
//! All five share an item tower, a per-user context table, and a shallow
//! interaction MLP; they differ in how the user side meets the candidates.
//! The LIME variants route everything through a small set of link
//! embeddings whose candidate-facing attention weights depend only on
//! item-side data, which is what makes them cacheable.

mod checkpoint;
mod gated;
mod towers;

pub use checkpoint::{load_model, save_model};
pub use gated::GatedMlp;
pub use towers::{Bucketizer, HiddenAct, ItemTower, Mlp};

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    mha, mha_with_weights, xora_factored, xora_reference, Activation, AttentionMask,
    Mask, MhaParams,
};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Ctx;
use crate::tensor::Tensor;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Ttsn,
    LimeMha,
    LimeXor,
    MhaSky,
    HstuSky,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Ttsn,
        ModelKind::LimeMha,
        ModelKind::LimeXor,
        ModelKind::MhaSky,
        ModelKind::HstuSky,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Ttsn => "ttsn",
            ModelKind::LimeMha => "lime-mha",
            ModelKind::LimeXor => "lime-xor",
            ModelKind::MhaSky => "mha-sky",
            ModelKind::HstuSky => "hstu-sky",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}'")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters. Defaults are the desk-scale working point: d=32,
/// 16 links, 4 heads, 3 stacked layers, sequences capped at 256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub links: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub context_dim: usize,
    /// Width of the attention score projection; `None` means `d`.
    pub qk_dim: Option<usize>,
    /// Activation of the single-layer attention stages.
    pub single_layer_activation: Activation,
    /// Activation inside the stacked XOR/HSTU layers.
    pub stacked_activation: Activation,
    /// Hidden widths of the interaction MLP (input 2d, output 1).
    pub interaction: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            links: 16,
            heads: 4,
            n_layers: 3,
            max_seq_len: 256,
            context_dim: 8,
            qk_dim: None,
            single_layer_activation: Activation::ScaledSoftmax,
            stacked_activation: Activation::Silu,
            interaction: vec![64, 32],
            learning_rate: 3e-3,
            batch_size: 64,
            epochs: 2,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.links == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "links, n_layers and max_seq_len must be >= 1".into(),
            ));
        }
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} must be divisible by {} heads",
                self.d, self.heads
            )));
        }
        if let Some(qk) = self.qk_dim {
            if qk == 0 || qk % self.heads != 0 {
                return Err(Error::Config(format!(
                    "qk_dim {qk} must be divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn qk(&self) -> usize {
        self.qk_dim.unwrap_or(self.d)
    }
}

/// Embedding-table sizes, derived from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabInfo {
    /// Per item attribute: (vocabulary size, embedding width).
    pub item_attrs: Vec<(usize, usize)>,
    pub users: usize,
}

impl VocabInfo {
    /// Single id-attribute items, the synthetic-data shape.
    pub fn simple(items: usize, users: usize, d: usize) -> Self {
        Self {
            item_attrs: vec![(items, d)],
            users,
        }
    }
}

// ── Requests ─────────────────────────────────────────────────────────

/// One user's scoring request at the embedding level.
#[derive(Clone, Debug)]
pub struct RankingRequest<T> {
    /// N×d history embeddings (N may be 0 for cold users).
    pub history: Tensor<T>,
    /// 1×d_c context features.
    pub context: Tensor<T>,
    /// M×d candidate embeddings, M ≥ 1.
    pub candidates: Tensor<T>,
    /// Item ids aligned with candidate rows, for cache lookups.
    pub candidate_ids: Option<Vec<u64>>,
}

impl<T: Scalar> RankingRequest<T> {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.history.rows() > config.max_seq_len {
            return Err(Error::DegenerateInput(format!(
                "history length {} exceeds max_seq_len {}",
                self.history.rows(),
                config.max_seq_len
            )));
        }
        if self.candidates.rows() == 0 {
            return Err(Error::DegenerateInput("empty candidate set".into()));
        }
        if self.history.cols() != config.d && self.history.rows() > 0 {
            return Err(Error::ShapeMismatch {
                op: "request history",
                lhs: self.history.shape().to_vec(),
                rhs: vec![config.d],
            });
        }
        if self.candidates.cols() != config.d {
            return Err(Error::ShapeMismatch {
                op: "request candidates",
                lhs: self.candidates.shape().to_vec(),
                rhs: vec![config.d],
            });
        }
        if !self.history.all_finite() || !self.candidates.all_finite() || !self.context.all_finite()
        {
            return Err(Error::DegenerateInput("non-finite request embeddings".into()));
        }
        Ok(())
    }
}

// ── Variants ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct HstuLayer<T> {
    pub attn: MhaParams<T>,
    pub gated: GatedMlp<T>,
}

#[derive(Clone, Debug)]
pub enum Personalization<T> {
    /// Single softmax attention layer over the history.
    SingleMha(MhaParams<T>),
    /// Stacked factored-attention layers with gated MLPs and residuals.
    XorStack(Vec<HstuLayer<T>>),
}

#[derive(Clone, Debug)]
pub struct LimeParams<T> {
    /// ℓ×d global link embeddings, standard-normal init.
    pub links: Tensor<T>,
    /// Fuses links with user context: (d+d_c) → d, SiLU hidden layer.
    pub ctx_mlp: Mlp<T>,
    pub personalize: Personalization<T>,
    /// Single-head attention of candidates over the raw links; its weight
    /// matrix is what the cache stores, so it has exactly ℓ columns.
    pub decouple: MhaParams<T>,
}

#[derive(Clone, Debug)]
pub enum Variant<T> {
    Ttsn,
    LimeMha(LimeParams<T>),
    LimeXor(LimeParams<T>),
    MhaSky { attn: MhaParams<T> },
    HstuSky { layers: Vec<HstuLayer<T>> },
}

pub struct Model<T> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub vocab: VocabInfo,
    pub item_tower: ItemTower<T>,
    /// (users+1)×d_c learned context vectors, row 0 reserved.
    pub user_context: Tensor<T>,
    /// Shallow scorer over [candidate ⊕ user-side output].
    pub interaction: Mlp<T>,
    pub variant: Variant<T>,
    pub trained: bool,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(kind: ModelKind, config: &ModelConfig, vocab: &VocabInfo, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let item_tower = ItemTower::init(rng, &vocab.item_attrs, d);
        let user_context = Tensor::randn(rng, vocab.users + 1, config.context_dim, 0.1);
        let mut sizes = vec![2 * d];
        sizes.extend_from_slice(&config.interaction);
        sizes.push(1);
        let interaction = Mlp::init(rng, &sizes);

        let lime = |rng: &mut R, personalize: Personalization<T>| LimeParams {
            links: Tensor::randn(rng, config.links, d, 1.0),
            ctx_mlp: Mlp::init(rng, &[d + config.context_dim, d, d]),
            personalize,
            decouple: MhaParams::init_qk(rng, d, config.qk(), 1, config.single_layer_activation),
        };
        let stack = |rng: &mut R, act: Activation| -> Vec<HstuLayer<T>> {
            (0..config.n_layers)
                .map(|_| HstuLayer {
                    attn: MhaParams::init_qk(rng, d, config.qk(), config.heads, act),
                    gated: GatedMlp::init(rng, d),
                })
                .collect()
        };

        let variant = match kind {
            ModelKind::Ttsn => Variant::Ttsn,
            ModelKind::LimeMha => {
                let p = MhaParams::init_qk(rng, d, config.qk(), config.heads, config.single_layer_activation);
                Variant::LimeMha(lime(rng, Personalization::SingleMha(p)))
            }
            ModelKind::LimeXor => {
                let layers = stack(rng, config.stacked_activation);
                Variant::LimeXor(lime(rng, Personalization::XorStack(layers)))
            }
            ModelKind::MhaSky => Variant::MhaSky {
                attn: MhaParams::init_qk(rng, d, config.qk(), config.heads, config.single_layer_activation),
            },
            ModelKind::HstuSky => Variant::HstuSky {
                layers: stack(rng, config.stacked_activation),
            },
        };
        Ok(Self {
            kind,
            config: config.clone(),
            vocab: vocab.clone(),
            item_tower,
            user_context,
            interaction,
            variant,
            trained: false,
        })
    }

    /// Convenience constructor seeded from the config.
    pub fn seeded(kind: ModelKind, config: &ModelConfig, vocab: &VocabInfo) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        Self::new(kind, config, vocab, &mut rng)
    }

    pub fn lime_params(&self) -> Option<&LimeParams<T>> {
        match &self.variant {
            Variant::LimeMha(p) | Variant::LimeXor(p) => Some(p),
            _ => None,
        }
    }

    // ── Scoring ──────────────────────────────────────────────────

    /// Per-candidate logits, M×1.
    pub fn score(&self, ctx: &mut Ctx<T>, req: &RankingRequest<T>) -> Result<Tensor<T>> {
        req.validate(&self.config)?;
        let side = self.user_item_interaction(ctx, req)?;
        let inp = ops::concat_cols(ctx, &[&req.candidates, &side])?;
        self.interaction.forward(ctx, &inp)
    }

    /// The M×d user-side tensor each candidate row is paired with.
    fn user_item_interaction(&self, ctx: &mut Ctx<T>, req: &RankingRequest<T>) -> Result<Tensor<T>> {
        let m = req.candidates.rows();
        match &self.variant {
            Variant::Ttsn => {
                let pooled = ops::sum_rows(ctx, &req.history)?;
                ops::repeat_row(ctx, &pooled, m)
            }
            Variant::LimeMha(p) | Variant::LimeXor(p) => {
                let lp = self.lime_user_side(ctx, &req.history, &req.context)?;
                decoupled_interaction(ctx, &req.candidates, &p.links, &lp, &p.decouple)
            }
            Variant::MhaSky { attn } => {
                if req.history.rows() == 0 {
                    return Ok(Tensor::zeros(m, self.config.d));
                }
                mha(ctx, &req.candidates, &req.history, &req.history, &AttentionMask::AllOnes, attn)
            }
            Variant::HstuSky { layers } => {
                let (suffix, _) = hstu_forward(ctx, layers, &req.history, &req.candidates, false)?;
                Ok(suffix)
            }
        }
    }

    /// Personalized links for a LIME variant; candidates are not an input.
    pub fn lime_user_side(
        &self,
        ctx: &mut Ctx<T>,
        history: &Tensor<T>,
        context: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let p = self
            .lime_params()
            .ok_or(Error::UnsupportedModel(self.kind.name()))?;
        let lc = contextualize_links(ctx, &p.links, &p.ctx_mlp, context)?;
        match &p.personalize {
            Personalization::SingleMha(params) => personalize_links_mha(ctx, &lc, history, params),
            Personalization::XorStack(layers) => personalize_links_xor(ctx, &lc, history, layers),
        }
    }

    // ── Training-side embedding ──────────────────────────────────

    /// Build an embedding-level request from a logged example. History is
    /// windowed to the most recent `max_seq_len` events.
    pub fn embed_request(
        &self,
        ctx: &mut Ctx<T>,
        example: &Example,
        data: &Dataset,
    ) -> Result<RankingRequest<T>> {
        let start = example.history.len().saturating_sub(self.config.max_seq_len);
        let hist_attrs: Vec<Vec<usize>> = example.history[start..]
            .iter()
            .map(|&(item, _)| data.attrs_of(item))
            .collect();
        let history = if hist_attrs.is_empty() {
            Tensor::zeros(0, self.config.d)
        } else {
            self.item_tower.embed_items(ctx, &hist_attrs)?
        };
        let candidates = self
            .item_tower
            .embed_items(ctx, &[data.attrs_of(example.candidate)])?;
        let user_row = if (example.user as usize) < self.vocab.users {
            example.user as usize + 1
        } else {
            0
        };
        let context = ops::gather_rows(ctx, &self.user_context, &[user_row])?;
        Ok(RankingRequest {
            history,
            context,
            candidates,
            candidate_ids: Some(vec![example.candidate]),
        })
    }

    /// Mean BCE loss over a batch of examples; the entry point for training
    /// steps and gradient checks.
    pub fn loss_on_batch(&self, ctx: &mut Ctx<T>, batch: &[Example], data: &Dataset) -> Result<Tensor<T>> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for ex in batch {
            let req = self.embed_request(ctx, ex, data)?;
            logits.push(self.score(ctx, &req)?);
            labels.push(if ex.label { T::one() } else { T::zero() });
        }
        let refs: Vec<&Tensor<T>> = logits.iter().collect();
        let all = ops::concat_rows(ctx, &refs)?;
        ops::bce_with_logits(ctx, &all, &labels)
    }

    // ── Parameter plumbing ───────────────────────────────────────

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let mha_params = |f: &mut dyn FnMut(String, &Tensor<T>), prefix: &str, p: &MhaParams<T>| {
            for h in 0..p.heads {
                f(format!("{prefix}.w_q.{h}"), &p.w_q[h]);
                f(format!("{prefix}.w_k.{h}"), &p.w_k[h]);
                f(format!("{prefix}.w_v.{h}"), &p.w_v[h]);
            }
            for (tag, ln) in [("ln_q", &p.ln_q), ("ln_k", &p.ln_k), ("ln_v", &p.ln_v)] {
                if let Some(ln) = ln {
                    f(format!("{prefix}.{tag}.gain"), &ln.gain);
                    f(format!("{prefix}.{tag}.bias"), &ln.bias);
                }
            }
        };
        let mlp = |f: &mut dyn FnMut(String, &Tensor<T>), prefix: &str, m: &Mlp<T>| {
            for (i, (w, b)) in m.weights.iter().zip(m.biases.iter()).enumerate() {
                f(format!("{prefix}.w.{i}"), w);
                f(format!("{prefix}.b.{i}"), b);
            }
        };
        let gated = |f: &mut dyn FnMut(String, &Tensor<T>), prefix: &str, g: &GatedMlp<T>| {
            f(format!("{prefix}.ln.gain"), &g.ln.gain);
            f(format!("{prefix}.ln.bias"), &g.ln.bias);
            f(format!("{prefix}.w_gate"), &g.w_gate);
            f(format!("{prefix}.b_gate"), &g.b_gate);
            f(format!("{prefix}.w_hidden"), &g.w_hidden);
            f(format!("{prefix}.w_out"), &g.w_out);
        };
        let stack = |f: &mut dyn FnMut(String, &Tensor<T>), prefix: &str, layers: &[HstuLayer<T>]| {
            for (i, layer) in layers.iter().enumerate() {
                mha_params(f, &format!("{prefix}.{i}.attn"), &layer.attn);
                gated(f, &format!("{prefix}.{i}.gated"), &layer.gated);
            }
        };

        for (i, t) in self.item_tower.tables.iter().enumerate() {
            f(format!("item_tower.table.{i}"), t);
        }
        mlp(f, "item_tower.mlp", &self.item_tower.mlp);
        f("user_context".into(), &self.user_context);
        mlp(f, "interaction", &self.interaction);
        match &self.variant {
            Variant::Ttsn => {}
            Variant::LimeMha(p) | Variant::LimeXor(p) => {
                f("links".into(), &p.links);
                mlp(f, "ctx_mlp", &p.ctx_mlp);
                match &p.personalize {
                    Personalization::SingleMha(m) => mha_params(f, "personalize", m),
                    Personalization::XorStack(layers) => stack(f, "xor_layer", layers),
                }
                mha_params(f, "decouple", &p.decouple);
            }
            Variant::MhaSky { attn } => mha_params(f, "sky_attn", attn),
            Variant::HstuSky { layers } => stack(f, "hstu_layer", layers),
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        fn mha_params<T: Scalar>(
            f: &mut dyn FnMut(String, &mut Tensor<T>),
            prefix: &str,
            p: &mut MhaParams<T>,
        ) {
            for h in 0..p.heads {
                f(format!("{prefix}.w_q.{h}"), &mut p.w_q[h]);
                f(format!("{prefix}.w_k.{h}"), &mut p.w_k[h]);
                f(format!("{prefix}.w_v.{h}"), &mut p.w_v[h]);
            }
            for (tag, ln) in [
                ("ln_q", &mut p.ln_q),
                ("ln_k", &mut p.ln_k),
                ("ln_v", &mut p.ln_v),
            ] {
                if let Some(ln) = ln {
                    f(format!("{prefix}.{tag}.gain"), &mut ln.gain);
                    f(format!("{prefix}.{tag}.bias"), &mut ln.bias);
                }
            }
        }
        fn mlp<T: Scalar>(f: &mut dyn FnMut(String, &mut Tensor<T>), prefix: &str, m: &mut Mlp<T>) {
            for (i, (w, b)) in m.weights.iter_mut().zip(m.biases.iter_mut()).enumerate() {
                f(format!("{prefix}.w.{i}"), w);
                f(format!("{prefix}.b.{i}"), b);
            }
        }
        fn gated<T: Scalar>(
            f: &mut dyn FnMut(String, &mut Tensor<T>),
            prefix: &str,
            g: &mut GatedMlp<T>,
        ) {
            f(format!("{prefix}.ln.gain"), &mut g.ln.gain);
            f(format!("{prefix}.ln.bias"), &mut g.ln.bias);
            f(format!("{prefix}.w_gate"), &mut g.w_gate);
            f(format!("{prefix}.b_gate"), &mut g.b_gate);
            f(format!("{prefix}.w_hidden"), &mut g.w_hidden);
            f(format!("{prefix}.w_out"), &mut g.w_out);
        }
        fn stack<T: Scalar>(
            f: &mut dyn FnMut(String, &mut Tensor<T>),
            prefix: &str,
            layers: &mut [HstuLayer<T>],
        ) {
            for (i, layer) in layers.iter_mut().enumerate() {
                mha_params(f, &format!("{prefix}.{i}.attn"), &mut layer.attn);
                gated(f, &format!("{prefix}.{i}.gated"), &mut layer.gated);
            }
        }

        for (i, t) in self.item_tower.tables.iter_mut().enumerate() {
            f(format!("item_tower.table.{i}"), t);
        }
        mlp(f, "item_tower.mlp", &mut self.item_tower.mlp);
        f("user_context".into(), &mut self.user_context);
        mlp(f, "interaction", &mut self.interaction);
        match &mut self.variant {
            Variant::Ttsn => {}
            Variant::LimeMha(p) | Variant::LimeXor(p) => {
                f("links".into(), &mut p.links);
                mlp(f, "ctx_mlp", &mut p.ctx_mlp);
                match &mut p.personalize {
                    Personalization::SingleMha(m) => mha_params(f, "personalize", m),
                    Personalization::XorStack(layers) => stack(f, "xor_layer", layers),
                }
                mha_params(f, "decouple", &mut p.decouple);
            }
            Variant::MhaSky { attn } => mha_params(f, "sky_attn", attn),
            Variant::HstuSky { layers } => stack(f, "hstu_layer", layers),
        }
    }

    /// FNV-1a over the serialized decoupled-stage tensors (links, W_Q, W_K),
    /// the item-side state the weight cache depends on.
    pub fn decoupled_fingerprint(&self) -> Option<u64> {
        let p = self.lime_params()?;
        let mut h = Fnv1a::new();
        for t in [&p.links, &p.decouple.w_q[0], &p.decouple.w_k[0]] {
            for v in t.data() {
                h.write(&v.to_f32_le_bytes());
            }
        }
        Some(h.finish())
    }

    // ── Analysis hooks ───────────────────────────────────────────

    /// Post-mask attention weights of every HSTU layer and head for one
    /// request: the full (N+M)² matrices, history block first.
    pub fn hstu_attention_weights(
        &self,
        ctx: &mut Ctx<T>,
        req: &RankingRequest<T>,
    ) -> Result<Vec<Vec<Tensor<T>>>> {
        match &self.variant {
            Variant::HstuSky { layers } => {
                let (_, caps) = hstu_forward(ctx, layers, &req.history, &req.candidates, true)?;
                Ok(caps.unwrap())
            }
            _ => Err(Error::UnsupportedModel(self.kind.name())),
        }
    }

    /// Per-head candidate→history attention weights of the MHA skyline.
    pub fn sky_cross_weights(
        &self,
        ctx: &mut Ctx<T>,
        req: &RankingRequest<T>,
    ) -> Result<Vec<Tensor<T>>> {
        match &self.variant {
            Variant::MhaSky { attn } => {
                let (_, w) = mha_with_weights(
                    ctx,
                    &req.candidates,
                    &req.history,
                    &req.history,
                    &AttentionMask::AllOnes,
                    attn,
                )?;
                Ok(w)
            }
            _ => Err(Error::UnsupportedModel(self.kind.name())),
        }
    }

    /// LIME-MHA factor weight matrices for one request: the candidate→link
    /// weights (M×ℓ) and the per-head link→history weights (ℓ×N).
    pub fn lime_factor_weights(
        &self,
        ctx: &mut Ctx<T>,
        req: &RankingRequest<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let p = self
            .lime_params()
            .ok_or(Error::UnsupportedModel(self.kind.name()))?;
        let Personalization::SingleMha(pers) = &p.personalize else {
            return Err(Error::UnsupportedModel(self.kind.name()));
        };
        let wc = decoupled_weights(ctx, &req.candidates, &p.links, &p.decouple)?;
        let lc = contextualize_links(ctx, &p.links, &p.ctx_mlp, &req.context)?;
        let (_, wp) = mha_with_weights(
            ctx,
            &lc,
            &req.history,
            &req.history,
            &AttentionMask::AllOnes,
            pers,
        )?;
        Ok((wc, wp))
    }
}

// ── LIME building blocks ─────────────────────────────────────────────

/// L^C: broadcast the context row onto every link row and run the fusion
/// MLP back down to d.
pub fn contextualize_links<T: Scalar>(
    ctx: &mut Ctx<T>,
    links: &Tensor<T>,
    ctx_mlp: &Mlp<T>,
    context: &Tensor<T>,
) -> Result<Tensor<T>> {
    let reps = ops::repeat_row(ctx, context, links.rows())?;
    let fused = ops::concat_cols(ctx, &[links, &reps])?;
    ctx_mlp.forward(ctx, &fused)
}

/// L^P via one attention layer over the history. Cold users (empty history)
/// keep their contextualized links.
pub fn personalize_links_mha<T: Scalar>(
    ctx: &mut Ctx<T>,
    lc: &Tensor<T>,
    history: &Tensor<T>,
    params: &MhaParams<T>,
) -> Result<Tensor<T>> {
    if history.rows() == 0 {
        return Ok(lc.clone());
    }
    mha(ctx, lc, history, history, &AttentionMask::AllOnes, params)
}

/// L^P as the sum of the gated link blocks of stacked factored-attention
/// layers; each layer is residual in both streams.
pub fn personalize_links_xor<T: Scalar>(
    ctx: &mut Ctx<T>,
    lc: &Tensor<T>,
    history: &Tensor<T>,
    layers: &[HstuLayer<T>],
) -> Result<Tensor<T>> {
    if history.rows() == 0 {
        return Ok(lc.clone());
    }
    let mut e = history.clone();
    let mut l = lc.clone();
    let mut lp: Option<Tensor<T>> = None;
    for layer in layers {
        let (ea, la) = xora_factored(ctx, &e, &l, &layer.attn)?;
        let ge = layer.gated.forward(ctx, &ea)?;
        let gl = layer.gated.forward(ctx, &la)?;
        e = ops::add(ctx, &e, &ge)?;
        l = ops::add(ctx, &l, &gl)?;
        lp = Some(match lp {
            Some(acc) => ops::add(ctx, &acc, &gl)?,
            None => gl,
        });
    }
    Ok(lp.expect("n_layers >= 1"))
}

/// Masked-reference pipeline for the stacked layers; oracle for tests only.
/// Runs full attention over E ⊕ L under the exclusive-or mask.
pub fn personalize_links_xor_reference<T: Scalar>(
    ctx: &mut Ctx<T>,
    lc: &Tensor<T>,
    history: &Tensor<T>,
    layers: &[HstuLayer<T>],
) -> Result<Tensor<T>> {
    if history.rows() == 0 {
        return Ok(lc.clone());
    }
    let h = history.rows();
    let mut x = ops::concat_rows(ctx, &[history, lc])?;
    let mut lp: Option<Tensor<T>> = None;
    for layer in layers {
        let y = xora_reference(ctx, &x, h, &layer.attn)?;
        let g = layer.gated.forward(ctx, &y)?;
        x = ops::add(ctx, &x, &g)?;
        let gl = ops::slice_rows(ctx, &g, h, g.rows())?;
        lp = Some(match lp {
            Some(acc) => ops::add(ctx, &acc, &gl)?,
            None => gl,
        });
    }
    Ok(lp.expect("n_layers >= 1"))
}

/// The candidate-side attention weights φ((T W_Q)(L W_K)ᵀ): item-side data
/// only, hence precomputable per item. Exactly what the cache stores.
pub fn decoupled_weights<T: Scalar>(
    ctx: &mut Ctx<T>,
    candidates: &Tensor<T>,
    links: &Tensor<T>,
    params: &MhaParams<T>,
) -> Result<Tensor<T>> {
    let qn = match &params.ln_q {
        Some(p) => ops::layer_norm(ctx, candidates, &p.gain, &p.bias)?,
        None => candidates.clone(),
    };
    let kn = match &params.ln_k {
        Some(p) => ops::layer_norm(ctx, links, &p.gain, &p.bias)?,
        None => links.clone(),
    };
    let q = ops::matmul(ctx, &qn, &params.w_q[0])?;
    let k = ops::matmul(ctx, &kn, &params.w_k[0])?;
    let kt = ops::transpose(ctx, &k)?;
    let scores = ops::matmul(ctx, &q, &kt)?;
    let scale = T::from_f64(1.0 / (params.qk_head_dim() as f64).sqrt());
    match params.activation {
        Activation::ScaledSoftmax => ops::softmax_rows(ctx, &scores, scale),
        Activation::Silu => ops::silu(ctx, &scores),
        Activation::Identity => Ok(scores),
    }
}

/// O = W · (L^P W_V): candidate-side weights applied to the personalized
/// link values.
pub fn decoupled_interaction<T: Scalar>(
    ctx: &mut Ctx<T>,
    candidates: &Tensor<T>,
    links: &Tensor<T>,
    lp: &Tensor<T>,
    params: &MhaParams<T>,
) -> Result<Tensor<T>> {
    let w = decoupled_weights(ctx, candidates, links, params)?;
    let values = decoupled_values(ctx, lp, params)?;
    ops::matmul(ctx, &w, &values)
}

/// L^P W_V with the value-side norm: the per-request ℓ×d value matrix the
/// cached weights multiply against.
pub fn decoupled_values<T: Scalar>(
    ctx: &mut Ctx<T>,
    lp: &Tensor<T>,
    params: &MhaParams<T>,
) -> Result<Tensor<T>> {
    let vn = match &params.ln_v {
        Some(p) => ops::layer_norm(ctx, lp, &p.gain, &p.bias)?,
        None => lp.clone(),
    };
    ops::matmul(ctx, &vn, &params.w_v[0])
}

// ── HSTU skyline ─────────────────────────────────────────────────────

/// Causal mask over history ⊕ candidates with candidates isolated from one
/// another: history row i sees rows ≤ i; candidate rows see all history
/// plus themselves. Keeps candidate scores mutually independent.
pub fn hstu_mask(n_hist: usize, m_cand: usize) -> Mask {
    let size = n_hist + m_cand;
    let mut data = vec![0u8; size * size];
    for i in 0..size {
        for j in 0..size {
            let ok = if i < n_hist {
                j <= i
            } else {
                j < n_hist || j == i
            };
            if ok {
                data[i * size + j] = 1;
            }
        }
    }
    Mask::new(size, size, data)
}

fn hstu_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    layers: &[HstuLayer<T>],
    history: &Tensor<T>,
    candidates: &Tensor<T>,
    capture: bool,
) -> Result<(Tensor<T>, Option<Vec<Vec<Tensor<T>>>>)> {
    let (n, m) = (history.rows(), candidates.rows());
    let mut x = if n == 0 {
        candidates.clone()
    } else {
        ops::concat_rows(ctx, &[history, candidates])?
    };
    let mask = AttentionMask::Custom(hstu_mask(n, m));
    let mut caps = capture.then(Vec::new);
    for layer in layers {
        let y = if let Some(caps) = caps.as_mut() {
            let (y, w) = mha_with_weights(ctx, &x, &x, &x, &mask, &layer.attn)?;
            caps.push(w);
            y
        } else {
            mha(ctx, &x, &x, &x, &mask, &layer.attn)?
        };
        let g = layer.gated.forward(ctx, &y)?;
        x = ops::add(ctx, &x, &g)?;
    }
    let suffix = ops::slice_rows(ctx, &x, n, n + m)?;
    Ok((suffix, caps))
}

// ── Fingerprint hash ─────────────────────────────────────────────────

/// 64-bit FNV-1a.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}
