//! Latency and FLOP sweeps over candidate count, history length, and the
//! attention score width.
//!
//! Serving-latency boundary: stage 1 (cache build) is offline and excluded.
//! For LIME variants the timed quantity is `max(stage2, retrieval) + stage3`
//! where the retrieval term is a simulated corpus scan running in parallel
//! with the user-side computation, as a serving system would. Skylines and
//! the baseline cannot overlap anything, so they time the full forward
//! pass. The boundary is declared in the CSV header.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind, RankingRequest, VocabInfo};
use crate::pipeline::{build_cache, compute_user_state, score_with_cache, QKCache, UserState};
use crate::scalar::Scalar;
use crate::svg;
use crate::tape::Ctx;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Candidates,
    HistoryLength,
    QkDim,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Candidates => "candidates",
            SweepAxis::HistoryLength => "history",
            SweepAxis::QkDim => "qk_dim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "candidates" => Ok(SweepAxis::Candidates),
            "history" => Ok(SweepAxis::HistoryLength),
            "qk_dim" => Ok(SweepAxis::QkDim),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Strictly increasing axis values.
    pub grid: Vec<usize>,
    pub models: Vec<ModelKind>,
    pub warmup: usize,
    /// Timed iterations per grid point, at least 10.
    pub measured: usize,
    /// History length when not the swept axis.
    pub fixed_n: usize,
    /// Candidate count when not the swept axis.
    pub fixed_m: usize,
    pub d: usize,
    pub links: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub interaction: Vec<usize>,
    /// Items scanned by the simulated retrieval stage.
    pub retrieval_corpus: usize,
    /// Grid points whose transient buffers exceed this are skipped.
    pub memory_budget_bytes: u64,
    /// >1 shards stage 3 across threads (throughput experiments only).
    pub stage3_workers: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Candidates,
            grid: vec![256, 2048, 32768],
            models: vec![ModelKind::LimeMha, ModelKind::MhaSky],
            warmup: 2,
            measured: 10,
            fixed_n: 2048,
            fixed_m: 128,
            d: 32,
            links: 16,
            heads: 4,
            n_layers: 3,
            interaction: vec![32],
            retrieval_corpus: 1 << 23,
            memory_budget_bytes: 6 << 30,
            stage3_workers: 1,
            seed: 17,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("sweep grid must be strictly increasing".into()));
        }
        if self.measured < 10 {
            return Err(Error::Config("measured iterations must be >= 10".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("sweep needs at least one model".into()));
        }
        if self.axis == SweepAxis::QkDim {
            if let Some(&qk) = self.grid.iter().find(|&&v| v % self.heads != 0) {
                return Err(Error::Config(format!(
                    "qk_dim grid value {qk} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub model: String,
    pub axis: String,
    pub axis_value: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub flops_stage2: u64,
    pub flops_stage3: u64,
    pub skipped_reason: Option<String>,
}

// ── Retrieval stub ───────────────────────────────────────────────────

/// Brute-force two-tower scan over a synthetic corpus, tiled through a
/// fixed block so memory stays flat. Stands in for the candidate-retrieval
/// service that runs concurrently with stage 2.
pub struct RetrievalStub<T> {
    block: Vec<T>,
    query: Vec<T>,
    block_items: usize,
    d: usize,
    passes: usize,
}

impl<T: Scalar> RetrievalStub<T> {
    pub fn new(rng: &mut ChaCha8Rng, corpus_items: usize, d: usize) -> Self {
        let block_items = corpus_items.min(1 << 16);
        let passes = corpus_items.div_ceil(block_items.max(1)).max(1);
        let block = (0..block_items * d)
            .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        let query = (0..d).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
        Self {
            block,
            query,
            block_items,
            d,
            passes,
        }
    }

    /// Scan the corpus, returning the best score so the work is observable.
    pub fn run(&self) -> T {
        let mut best = T::neg_infinity();
        for pass in 0..self.passes {
            // Perturb the query per pass so no pass can be folded away.
            let bias = T::from_f64(pass as f64 * 1e-9);
            for i in 0..self.block_items {
                let row = &self.block[i * self.d..(i + 1) * self.d];
                let mut s = bias;
                for (q, r) in self.query.iter().zip(row.iter()) {
                    s += *q * *r;
                }
                if s > best {
                    best = s;
                }
            }
        }
        best
    }
}

// ── Sweep harness ────────────────────────────────────────────────────

struct Workload<T> {
    model: Model<T>,
    req: RankingRequest<T>,
    cache: Option<QKCache<T>>,
}

fn build_workload<T: Scalar>(
    spec: &SweepSpec,
    kind: ModelKind,
    n: usize,
    m: usize,
    qk: Option<usize>,
) -> Result<Workload<T>> {
    let config = ModelConfig {
        d: spec.d,
        links: spec.links,
        heads: spec.heads,
        n_layers: spec.n_layers,
        max_seq_len: n.max(1),
        qk_dim: qk,
        interaction: spec.interaction.clone(),
        seed: spec.seed,
        ..ModelConfig::default()
    };
    let vocab = VocabInfo::simple(1, 1, spec.d);
    let model = Model::<T>::seeded(kind, &config, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0b5e_55ed);
    let req = RankingRequest {
        history: Tensor::randn(&mut rng, n, spec.d, 1.0),
        context: Tensor::randn(&mut rng, 1, config.context_dim, 1.0),
        candidates: Tensor::randn(&mut rng, m, spec.d, 1.0),
        candidate_ids: Some((0..m as u64).collect()),
    };
    let cache = if model.lime_params().is_some() {
        let corpus: Vec<(u64, Tensor<T>)> = (0..m)
            .map(|i| {
                let row = req.candidates.data()[i * spec.d..(i + 1) * spec.d].to_vec();
                (i as u64, Tensor::matrix(1, spec.d, row).unwrap())
            })
            .collect();
        let mut ctx = Ctx::inference();
        Some(build_cache(&mut ctx, &model, &corpus)?)
    } else {
        None
    };
    Ok(Workload { model, req, cache })
}

/// Peak transient bytes of the dominant score matrices at one grid point.
fn estimated_bytes(kind: ModelKind, n: usize, m: usize, scalar_bytes: u64) -> u64 {
    match kind {
        // Raw scores, masked-activation output, mask bytes.
        ModelKind::HstuSky => {
            let s = (n + m) as u64;
            s * s * (2 * scalar_bytes + 1)
        }
        ModelKind::MhaSky => 3 * (n as u64) * (m as u64) * scalar_bytes,
        _ => (n.max(m) as u64) * scalar_bytes * 64,
    }
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

fn serve_lime<T: Scalar>(w: &Workload<T>, stub: &RetrievalStub<T>, workers: usize) -> Result<f64> {
    let mut ctx = Ctx::inference();
    let mut state: Option<UserState<T>> = None;
    let t2 = time_ms(|| {
        state = Some(
            compute_user_state(&mut ctx, &w.model, &w.req.history, &w.req.context, 0)
                .expect("stage 2"),
        );
    });
    let tr = time_ms(|| {
        std::hint::black_box(stub.run());
    });
    let state = state.unwrap();
    let cache = w.cache.as_ref().unwrap();
    let ids = w.req.candidate_ids.as_ref().unwrap();
    let t3 = time_ms(|| {
        if workers > 1 {
            score_stage3_sharded(&state, cache, &w.req, &w.model, workers).expect("stage 3");
        } else {
            let mut c3 = Ctx::inference();
            score_with_cache(&mut c3, &state, cache, &w.req.candidates, ids, &w.model.interaction)
                .expect("stage 3");
        }
    });
    Ok(t2.max(tr) + t3)
}

/// Stage 3 sharded over candidate ranges; each worker owns a context.
fn score_stage3_sharded<T: Scalar>(
    state: &UserState<T>,
    cache: &QKCache<T>,
    req: &RankingRequest<T>,
    model: &Model<T>,
    workers: usize,
) -> Result<Vec<f64>> {
    let ids = req.candidate_ids.as_ref().expect("candidate ids");
    let m = ids.len();
    let chunk = m.div_ceil(workers);
    let d = req.candidates.cols();
    let mut out: Vec<f64> = Vec::with_capacity(m);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = (w * chunk).min(m);
            let hi = ((w + 1) * chunk).min(m);
            if lo == hi {
                continue;
            }
            let ids = &ids[lo..hi];
            let cand = Tensor::matrix(hi - lo, d, req.candidates.data()[lo * d..hi * d].to_vec())?;
            handles.push(scope.spawn(move || -> Result<Vec<f64>> {
                let mut ctx = Ctx::inference();
                let s = score_with_cache(&mut ctx, state, cache, &cand, ids, &model.interaction)?;
                Ok(s.to_f64_vec())
            }));
        }
        for h in handles {
            out.extend(h.join().expect("stage-3 worker panicked")?);
        }
        Ok(())
    })?;
    Ok(out)
}

/// FLOP totals for one workload: (stage2, stage3) for LIME, (0, full
/// forward) for everything else.
fn measure_flops<T: Scalar>(w: &Workload<T>) -> Result<(u64, u64)> {
    let mut ctx = Ctx::inference();
    if let Some(cache) = &w.cache {
        let state = compute_user_state(&mut ctx, &w.model, &w.req.history, &w.req.context, 0)?;
        let stage2 = ctx.flops();
        let ids = w.req.candidate_ids.as_ref().unwrap();
        score_with_cache(&mut ctx, &state, cache, &w.req.candidates, ids, &w.model.interaction)?;
        Ok((stage2, ctx.flops() - stage2))
    } else {
        w.model.score(&mut ctx, &w.req)?;
        Ok((0, ctx.flops()))
    }
}

pub fn run_sweep<T: Scalar>(spec: &SweepSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    let scalar_bytes = std::mem::size_of::<T>() as u64;
    for &value in &spec.grid {
        let (n, m, qk) = match spec.axis {
            SweepAxis::Candidates => (spec.fixed_n, value, None),
            SweepAxis::HistoryLength => (value, spec.fixed_m, None),
            SweepAxis::QkDim => (spec.fixed_n, spec.fixed_m, Some(value)),
        };
        for &kind in &spec.models {
            let est = estimated_bytes(kind, n, m, scalar_bytes);
            if est > spec.memory_budget_bytes {
                rows.push(BenchRow {
                    model: kind.name().into(),
                    axis: spec.axis.name().into(),
                    axis_value: value,
                    median_ms: 0.0,
                    p90_ms: 0.0,
                    flops_stage2: 0,
                    flops_stage3: 0,
                    skipped_reason: Some(format!(
                        "estimated {est} bytes exceeds budget {}",
                        spec.memory_budget_bytes
                    )),
                });
                continue;
            }
            let w = build_workload::<T>(spec, kind, n, m, qk)?;
            let mut stub_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xfe7c);
            let stub = RetrievalStub::<T>::new(&mut stub_rng, spec.retrieval_corpus, spec.d);

            let iter = |_: usize| -> Result<f64> {
                if w.cache.is_some() {
                    serve_lime(&w, &stub, spec.stage3_workers)
                } else {
                    let mut ctx = Ctx::inference();
                    Ok(time_ms(|| {
                        std::hint::black_box(w.model.score(&mut ctx, &w.req).expect("forward"));
                    }))
                }
            };
            for i in 0..spec.warmup {
                iter(i)?;
            }
            let mut times = Vec::with_capacity(spec.measured);
            for i in 0..spec.measured {
                times.push(iter(i)?);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times[(times.len() - 1) / 2];
            let p90 = times[((times.len() as f64 * 0.9).ceil() as usize - 1).min(times.len() - 1)];
            let (f2, f3) = measure_flops(&w)?;
            rows.push(BenchRow {
                model: kind.name().into(),
                axis: spec.axis.name().into(),
                axis_value: value,
                median_ms: median,
                p90_ms: p90,
                flops_stage2: f2,
                flops_stage3: f3,
                skipped_reason: None,
            });
        }
    }
    Ok(rows)
}

pub const CSV_BOUNDARY_NOTE: &str = "# serving latency: lime rows report max(stage2, retrieval-scan) + stage3 (retrieval runs concurrently with the user-side stage); skyline/baseline rows report the full forward pass; stage-1 cache builds are offline and excluded";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_BOUNDARY_NOTE);
    out.push('\n');
    out.push_str("model,axis,axis_value,median_ms,p90_ms,flops_stage2,flops_stage3,skipped_reason\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{},{}\n",
            r.model,
            r.axis,
            r.axis_value,
            r.median_ms,
            r.p90_ms,
            r.flops_stage2,
            r.flops_stage3,
            r.skipped_reason.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    out
}

/// Log-log latency plot, one polyline per model; skipped points are left out.
pub fn plot_rows(rows: &[BenchRow], spec: &SweepSpec) -> Result<String> {
    let mut series: Vec<svg::Series> = Vec::new();
    for r in rows {
        if r.skipped_reason.is_some() {
            continue;
        }
        let s = match series.iter_mut().find(|s| s.label == r.model) {
            Some(s) => s,
            None => {
                series.push(svg::Series {
                    label: r.model.clone(),
                    points: Vec::new(),
                });
                series.last_mut().unwrap()
            }
        };
        s.points.push((r.axis_value as f64, r.median_ms));
    }
    svg::render(
        &series,
        &svg::PlotSpec {
            title: format!("serving latency vs {}", spec.axis.name()),
            x_label: spec.axis.name().into(),
            y_label: "median ms".into(),
            x_scale: svg::AxisScale::Log2,
            y_scale: svg::AxisScale::Log10,
            x_ticks: spec.grid.iter().map(|&v| v as f64).collect(),
        },
    )
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
