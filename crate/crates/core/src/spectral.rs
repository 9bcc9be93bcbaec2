//! SVD-based spectral analysis of trained attention.
//!
//! A one-sided Jacobi SVD (accurate and simple at desk scale) feeds
//! cumulative singular-value spectra of attention matrices and link
//! embeddings, plus a numerical check of the low-rank factorization of
//! cross-attention through the links.

use crate::error::{Error, Result};
use crate::kernel;
use crate::model::{Model, RankingRequest};
use crate::scalar::Scalar;
use crate::tape::Ctx;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-13;

pub struct Svd<T> {
    /// m×k left singular vectors (columns), k = min(m, n).
    pub u: Tensor<T>,
    /// Singular values, descending.
    pub s: Vec<T>,
    /// n×k right singular vectors (columns).
    pub v: Tensor<T>,
}

/// One-sided Jacobi SVD. Internally 64-bit regardless of `T`. Errors if the
/// sweep cap is hit before column pairs decouple.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<Svd<T>> {
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Err(Error::DegenerateInput("svd of an empty matrix".into()));
    }
    if !a.all_finite() {
        return Err(Error::DegenerateInput("svd of a non-finite matrix".into()));
    }
    if m < n {
        // Work on the transpose and swap the factor roles.
        let at = Tensor::matrix(n, m, kernel::transpose(a.data(), m, n))?;
        let r = svd(&at)?;
        return Ok(Svd {
            u: r.v,
            s: r.s,
            v: r.u,
        });
    }

    // W rows are the columns of A; rotations orthogonalize them.
    let ad = a.to_f64_vec();
    let mut w = vec![0.0f64; n * m];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = ad[i * n + j];
        }
    }
    // VT rows accumulate the right singular vectors.
    let mut vt = vec![0.0f64; n * n];
    for j in 0..n {
        vt[j * n + j] = 1.0;
    }
    let mut sq: Vec<f64> = (0..n)
        .map(|j| w[j * m..(j + 1) * m].iter().map(|x| x * x).sum())
        .collect();
    // Columns this far below the matrix scale count as zero; without the
    // floor, rank-deficient inputs chase roundoff noise forever.
    let floor = sq.iter().sum::<f64>() * 1e-28;

    let mut converged = false;
    let mut worst = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        worst = 0.0;
        for j in 0..n {
            sq[j] = w[j * m..(j + 1) * m].iter().map(|x| x * x).sum();
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (app, aqq) = (sq[p], sq[q]);
                if app <= floor || aqq <= floor {
                    continue;
                }
                let mut apq = 0.0;
                for i in 0..m {
                    apq += w[p * m + i] * w[q * m + i];
                }
                let rel = apq.abs() / (app * aqq).sqrt();
                worst = worst.max(rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..m {
                    let (vp, vq) = (w[p * m + i], w[q * m + i]);
                    w[p * m + i] = cs * vp - sn * vq;
                    w[q * m + i] = sn * vp + cs * vq;
                }
                for i in 0..n {
                    let (vp, vq) = (vt[p * n + i], vt[q * n + i]);
                    vt[p * n + i] = cs * vp - sn * vq;
                    vt[q * n + i] = sn * vp + cs * vq;
                }
                sq[p] = cs * cs * app - 2.0 * cs * sn * apq + sn * sn * aqq;
                sq[q] = sn * sn * app + 2.0 * cs * sn * apq + cs * cs * aqq;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    // Exact norms after convergence, then sort descending.
    for j in 0..n {
        sq[j] = w[j * m..(j + 1) * m].iter().map(|x| x * x).sum();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sq[b].partial_cmp(&sq[a]).unwrap());

    let mut u = vec![T::zero(); m * n];
    let mut v = vec![T::zero(); n * n];
    let mut s = Vec::with_capacity(n);
    for (col, &j) in order.iter().enumerate() {
        let sigma = sq[j].sqrt();
        s.push(T::from_f64(sigma));
        if sigma > 0.0 {
            for i in 0..m {
                u[i * n + col] = T::from_f64(w[j * m + i] / sigma);
            }
        }
        for i in 0..n {
            v[i * n + col] = T::from_f64(vt[j * n + i]);
        }
    }
    Ok(Svd {
        u: Tensor::matrix(m, n, u)?,
        s,
        v: Tensor::matrix(n, n, v)?,
    })
}

/// ‖U·diag(S)·Vᵀ − A‖_F / ‖A‖_F.
pub fn reconstruction_residual<T: Scalar>(a: &Tensor<T>, svd: &Svd<T>) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    let k = svd.s.len();
    let u = svd.u.to_f64_vec();
    let v = svd.v.to_f64_vec();
    let s: Vec<f64> = svd.s.iter().map(|x| x.as_f64()).collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        for j in 0..n {
            let mut r = 0.0;
            for c in 0..k {
                r += u[i * k + c] * s[c] * v[j * k + c];
            }
            let d = a.at(i, j).as_f64() - r;
            num += d * d;
            den += a.at(i, j).as_f64() * a.at(i, j).as_f64();
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

// ── Spectrum reports ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub label: String,
    /// Averaged normalized singular values, descending.
    pub singular: Vec<f64>,
    /// Averaged normalized cumulative curve; monotone, ends at 1.
    pub cumulative: Vec<f64>,
    /// Cumulative mass captured by the first `links` values.
    pub rank_l_mass: f64,
    pub warning: Option<String>,
}

/// Accumulates per-matrix normalized spectra and averages the curves, so
/// matrices of different total mass weigh equally.
struct SpectrumAvg {
    sum_sigma: Vec<f64>,
    count: usize,
}

impl SpectrumAvg {
    fn new() -> Self {
        Self {
            sum_sigma: Vec::new(),
            count: 0,
        }
    }

    fn add<T: Scalar>(&mut self, matrix: &Tensor<T>) -> Result<()> {
        let s = svd(matrix)?.s;
        let total: f64 = s.iter().map(|v| v.as_f64()).sum();
        if total <= 0.0 {
            return Ok(()); // zero matrix contributes nothing
        }
        if self.sum_sigma.is_empty() {
            self.sum_sigma = vec![0.0; s.len()];
        }
        if self.sum_sigma.len() != s.len() {
            return Err(Error::DegenerateInput(
                "averaging spectra of mismatched sizes".into(),
            ));
        }
        for (acc, v) in self.sum_sigma.iter_mut().zip(s.iter()) {
            *acc += v.as_f64() / total;
        }
        self.count += 1;
        Ok(())
    }

    fn report(&self, label: &str, links: usize, warning: Option<String>) -> SpectrumReport {
        let n = self.count.max(1) as f64;
        let singular: Vec<f64> = self.sum_sigma.iter().map(|v| v / n).collect();
        let mut cumulative = Vec::with_capacity(singular.len());
        let mut acc = 0.0;
        for &v in &singular {
            acc += v;
            cumulative.push(acc);
        }
        let rank_l_mass = if cumulative.is_empty() {
            0.0
        } else {
            cumulative[links.min(cumulative.len()).saturating_sub(1)]
        };
        SpectrumReport {
            label: label.into(),
            singular,
            cumulative,
            rank_l_mass,
            warning,
        }
    }
}

/// Spectra of the skyline's self-attention (N×N) and cross-attention (M×N)
/// weight matrices, averaged over layers, heads and requests after
/// per-matrix normalization. All requests must share N and M.
pub fn attention_spectra<T: Scalar>(
    model: &Model<T>,
    requests: &[RankingRequest<T>],
) -> Result<Vec<SpectrumReport>> {
    if requests.is_empty() {
        return Err(Error::DegenerateInput("no requests for spectra".into()));
    }
    let warning =
        (!model.trained).then(|| "model parameters are untrained (cold init)".to_string());
    let links = model.config.links;
    let mut self_avg = SpectrumAvg::new();
    let mut cross_avg = SpectrumAvg::new();
    for req in requests {
        let n = req.history.rows();
        let mut ctx = Ctx::inference();
        let per_layer = model.hstu_attention_weights(&mut ctx, req)?;
        for heads in per_layer {
            for w in heads {
                let full_rows = w.rows();
                self_avg.add(&w.block(0, n, 0, n))?;
                cross_avg.add(&w.block(n, full_rows, 0, n))?;
            }
        }
    }
    Ok(vec![
        self_avg.report("self_attention", links, warning.clone()),
        cross_avg.report("cross_attention", links, warning),
    ])
}

/// Spectra of the raw links L and of the personalized links L^P, the latter
/// averaged over requests.
pub fn link_spectra<T: Scalar>(
    model: &Model<T>,
    requests: &[RankingRequest<T>],
) -> Result<Vec<SpectrumReport>> {
    let params = model
        .lime_params()
        .ok_or(Error::UnsupportedModel(model.kind.name()))?;
    let warning =
        (!model.trained).then(|| "model parameters are untrained (cold init)".to_string());
    let links = model.config.links;
    let mut raw = SpectrumAvg::new();
    raw.add(&params.links)?;
    let mut pers = SpectrumAvg::new();
    for req in requests {
        let mut ctx = Ctx::inference();
        let lp = model.lime_user_side(&mut ctx, &req.history, &req.context)?;
        pers.add(&lp)?;
    }
    Ok(vec![
        raw.report("link_embeddings", links, warning.clone()),
        pers.report("personalized_link_embeddings", links, warning),
    ])
}

pub fn spectra_to_csv(reports: &[SpectrumReport]) -> String {
    let mut out = String::from("label,rank,sigma,cumulative\n");
    for r in reports {
        for (i, (s, c)) in r.singular.iter().zip(r.cumulative.iter()).enumerate() {
            out.push_str(&format!("{},{},{:.9},{:.9}\n", r.label, i + 1, s, c));
        }
    }
    out
}

// ── Decomposition residual ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ResidualReport {
    /// Frobenius relative residual per request.
    pub per_request: Vec<f64>,
    pub mean: f64,
    /// Residual when only the `l` most-used links carry the factorization,
    /// for l in 1, 2, 4, ... Scale-reported, never asserted against a
    /// reference value.
    pub per_link: Vec<(usize, f64)>,
}

fn head_average<T: Scalar>(ws: &[Tensor<T>]) -> (Vec<f64>, usize, usize) {
    let (r, c) = (ws[0].rows(), ws[0].cols());
    let mut avg = vec![0.0f64; r * c];
    for w in ws {
        for (a, v) in avg.iter_mut().zip(w.data().iter()) {
            *a += v.as_f64();
        }
    }
    let k = ws.len() as f64;
    for a in avg.iter_mut() {
        *a /= k;
    }
    (avg, r, c)
}

fn fro(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares the skyline's candidate→history attention weights with the
/// product of the LIME factors: candidate→link weights times link→history
/// weights (head-averaged where multi-headed).
pub fn decomposition_residual<T: Scalar>(
    lime: &Model<T>,
    sky: &Model<T>,
    requests: &[RankingRequest<T>],
) -> Result<ResidualReport> {
    if requests.is_empty() {
        return Err(Error::DegenerateInput("no requests for residual".into()));
    }
    lime.lime_params()
        .ok_or(Error::UnsupportedModel(lime.kind.name()))?;
    let links = lime.config.links;

    let mut per_request = Vec::with_capacity(requests.len());
    let mut per_link_acc: Vec<f64> = Vec::new();
    let mut link_grid: Vec<usize> = Vec::new();
    {
        let mut l = 1;
        while l < links {
            link_grid.push(l);
            l *= 2;
        }
        link_grid.push(links);
    }

    for req in requests {
        let mut ctx = Ctx::inference();
        let sky_ws = sky.sky_cross_weights(&mut ctx, req)?;
        let (wsky, m, n) = head_average(&sky_ws);
        let (wc_t, wp_heads) = lime.lime_factor_weights(&mut ctx, req)?;
        let wc = wc_t.to_f64_vec();
        let (wp, _, _) = head_average(&wp_heads);

        let denom = fro(&wsky);
        let full = kernel::matmul(&wc, &wp, m, links, n);
        let diff: Vec<f64> = wsky.iter().zip(full.iter()).map(|(a, b)| a - b).collect();
        per_request.push(if denom == 0.0 { 0.0 } else { fro(&diff) / denom });

        // Link importance = total candidate weight routed through the link.
        let mut importance: Vec<(usize, f64)> = (0..links)
            .map(|j| (j, (0..m).map(|i| wc[i * links + j]).sum()))
            .collect();
        importance.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        if per_link_acc.is_empty() {
            per_link_acc = vec![0.0; link_grid.len()];
        }
        for (gi, &l) in link_grid.iter().enumerate() {
            let keep: Vec<usize> = importance[..l].iter().map(|&(j, _)| j).collect();
            let mut approx = vec![0.0f64; m * n];
            for i in 0..m {
                for &j in &keep {
                    let w = wc[i * links + j];
                    for t in 0..n {
                        approx[i * n + t] += w * wp[j * n + t];
                    }
                }
            }
            let diff: Vec<f64> = wsky.iter().zip(approx.iter()).map(|(a, b)| a - b).collect();
            per_link_acc[gi] += if denom == 0.0 { 0.0 } else { fro(&diff) / denom };
        }
    }

    let mean = per_request.iter().sum::<f64>() / per_request.len() as f64;
    let per_link = link_grid
        .iter()
        .zip(per_link_acc.iter())
        .map(|(&l, &acc)| (l, acc / requests.len() as f64))
        .collect();
    Ok(ResidualReport {
        per_request,
        mean,
        per_link,
    })
}

pub fn residual_to_csv(report: &ResidualReport) -> String {
    let mut out = String::from("links,residual\n");
    for &(l, r) in &report.per_link {
        out.push_str(&format!("{l},{r:.9}\n"));
    }
    out.push_str(&format!("all,{:.9}\n", report.mean));
    out
}
