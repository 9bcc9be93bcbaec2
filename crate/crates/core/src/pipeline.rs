//! Three-stage cached inference.
//!
//! Stage 1 (offline): per-item decoupled attention weight rows, keyed by
//! item id and fingerprinted against the model's item-side parameters.
//! Stage 2 (per request): personalized link embeddings plus their value
//! projection, independent of any candidate data.
//! Stage 3 (per candidate): cached row × value matrix, then the
//! interaction MLP. Cost independent of history length and corpus size.
//!
//! Every stage reuses the exact code paths of the monolithic forward pass,
//! so pipeline scores match `Model::score` to within sign-of-zero.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{decoupled_values, decoupled_weights, Model, RankingRequest};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Ctx;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LIMEQK1\0";
const VERSION: u32 = 1;

// ── QK cache ─────────────────────────────────────────────────────────

/// Persisted map from item id to its decoupled attention weight row.
#[derive(Clone, Debug, PartialEq)]
pub struct QKCache<T> {
    link_count: usize,
    fingerprint: u64,
    entries: BTreeMap<u64, Vec<T>>,
}

impl<T: Scalar> QKCache<T> {
    pub fn link_count(&self) -> usize {
        self.link_count
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn row(&self, id: u64) -> Option<&[T]> {
        self.entries.get(&id).map(|v| v.as_slice())
    }
}

/// Stage 1: one weight row per corpus item. Deterministic given the model
/// bytes; keyed by id, so corpus order does not matter.
pub fn build_cache<T: Scalar>(
    ctx: &mut Ctx<T>,
    model: &Model<T>,
    corpus: &[(u64, Tensor<T>)],
) -> Result<QKCache<T>> {
    let params = model
        .lime_params()
        .ok_or(Error::UnsupportedModel(model.kind.name()))?;
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("empty item corpus".into()));
    }
    let fingerprint = model.decoupled_fingerprint().expect("lime model");
    let mut entries = BTreeMap::new();
    for (id, embedding) in corpus {
        if entries.contains_key(id) {
            return Err(Error::DuplicateItem(*id));
        }
        let row = decoupled_weights(ctx, embedding, &params.links, &params.decouple)?;
        entries.insert(*id, row.data().to_vec());
    }
    Ok(QKCache {
        link_count: model.config.links,
        fingerprint,
        entries,
    })
}

// ── User state ───────────────────────────────────────────────────────

/// Stage-2 output: a pure function of (model bytes, history, context).
#[derive(Clone, Debug)]
pub struct UserState<T> {
    /// Personalized links L^P, ℓ×d.
    pub lp: Tensor<T>,
    /// L^P through the value norm and projection, ℓ×d; what cached weight
    /// rows multiply against.
    pub lp_values: Tensor<T>,
    pub model_fingerprint: u64,
    pub request_id: u64,
}

/// Stage 2: runs once per request, never sees candidates.
pub fn compute_user_state<T: Scalar>(
    ctx: &mut Ctx<T>,
    model: &Model<T>,
    history: &Tensor<T>,
    context: &Tensor<T>,
    request_id: u64,
) -> Result<UserState<T>> {
    let params = model
        .lime_params()
        .ok_or(Error::UnsupportedModel(model.kind.name()))?;
    let lp = model.lime_user_side(ctx, history, context)?;
    let lp_values = decoupled_values(ctx, &lp, &params.decouple)?;
    Ok(UserState {
        lp,
        lp_values,
        model_fingerprint: model.decoupled_fingerprint().expect("lime model"),
        request_id,
    })
}

// ── Stage 3 ──────────────────────────────────────────────────────────

/// Stage 3: cached weight rows → link-value weighted sums → interaction
/// MLP. Misses are hard errors listing every absent id; a fingerprint
/// mismatch means the cache was built from different item-side parameters.
pub fn score_with_cache<T: Scalar>(
    ctx: &mut Ctx<T>,
    state: &UserState<T>,
    cache: &QKCache<T>,
    candidates: &Tensor<T>,
    candidate_ids: &[u64],
    interaction: &crate::model::Mlp<T>,
) -> Result<Tensor<T>> {
    if cache.fingerprint != state.model_fingerprint {
        return Err(Error::StaleCache {
            cache: cache.fingerprint,
            model: state.model_fingerprint,
        });
    }
    if candidates.rows() != candidate_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "score_with_cache",
            lhs: candidates.shape().to_vec(),
            rhs: vec![candidate_ids.len()],
        });
    }
    let missing: Vec<u64> = candidate_ids
        .iter()
        .copied()
        .filter(|id| !cache.entries.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::CacheMiss(missing));
    }

    // Assemble looked-up rows into one M×ℓ matrix; the per-candidate cost
    // stays O(ℓd + interaction), the batching is only dispatch economy.
    let m = candidate_ids.len();
    let mut rows = Vec::with_capacity(m * cache.link_count);
    for id in candidate_ids {
        rows.extend_from_slice(&cache.entries[id]);
    }
    let weights = Tensor::matrix(m, cache.link_count, rows)?;
    let o = ops::matmul(ctx, &weights, &state.lp_values)?;
    let inp = ops::concat_cols(ctx, &[candidates, &o])?;
    interaction.forward(ctx, &inp)
}

// ── Full pipeline run with stage accounting ──────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct StageFlops {
    pub stage2: u64,
    pub stage3: u64,
}

/// Serve one request through stages 2+3, reporting per-stage FLOP totals.
pub fn run_pipeline<T: Scalar>(
    model: &Model<T>,
    cache: &QKCache<T>,
    req: &RankingRequest<T>,
) -> Result<(Tensor<T>, StageFlops)> {
    let ids = req
        .candidate_ids
        .as_ref()
        .ok_or_else(|| Error::DegenerateInput("request has no candidate ids".into()))?;
    let mut ctx = Ctx::inference();
    let state = compute_user_state(&mut ctx, model, &req.history, &req.context, 0)?;
    let stage2 = ctx.flops();
    let scores = score_with_cache(&mut ctx, &state, cache, &req.candidates, ids, &model.interaction)?;
    let stage3 = ctx.flops() - stage2;
    Ok((scores, StageFlops { stage2, stage3 }))
}

/// Human-readable per-stage FLOP report.
pub fn flop_report(run: &StageFlops) -> String {
    format!(
        "stage2_flops={} stage3_flops={} total_flops={}",
        run.stage2,
        run.stage3,
        run.stage2 + run.stage3
    )
}

// ── Cache file format ────────────────────────────────────────────────

/// Bit-exact layout: magic "LIMEQK1\0", version u32, ℓ u32, entry count
/// u64, fingerprint u64, then entries (item id u64, ℓ little-endian f32)
/// sorted ascending by id.
pub fn write_cache<T: Scalar>(cache: &QKCache<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cache.link_count as u32).to_le_bytes());
    out.extend_from_slice(&(cache.entries.len() as u64).to_le_bytes());
    out.extend_from_slice(&cache.fingerprint.to_le_bytes());
    for (id, row) in &cache.entries {
        out.extend_from_slice(&id.to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_f32_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_cache<T: Scalar>(path: &Path) -> Result<QKCache<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let need = |pos: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format("unexpected end of cache file".into()))
    };
    if need(0, 8)? != MAGIC {
        return Err(Error::Format("bad magic, not a weight cache".into()));
    }
    let version = u32::from_le_bytes(need(8, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let link_count = u32::from_le_bytes(need(12, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(need(16, 8)?.try_into().unwrap()) as usize;
    let fingerprint = u64::from_le_bytes(need(24, 8)?.try_into().unwrap());
    let mut pos = 32;
    let mut entries = BTreeMap::new();
    let mut last_id: Option<u64> = None;
    for _ in 0..count {
        let id = u64::from_le_bytes(need(pos, 8)?.try_into().unwrap());
        pos += 8;
        if let Some(prev) = last_id {
            if id <= prev {
                return Err(Error::Format(format!(
                    "cache entries not sorted: id {id} after {prev}"
                )));
            }
        }
        last_id = Some(id);
        let mut row = Vec::with_capacity(link_count);
        for _ in 0..link_count {
            let raw: [u8; 4] = need(pos, 4)?.try_into().unwrap();
            row.push(T::from_f64(f32::from_le_bytes(raw) as f64));
            pos += 4;
        }
        entries.insert(id, row);
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after cache entries".into()));
    }
    Ok(QKCache {
        link_count,
        fingerprint,
        entries,
    })
}
