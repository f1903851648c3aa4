//! Tri-modal InfoNCE losses with analytic gradients.
//!
//! `x` holds touch embeddings, `y` language and `z` vision; row `i` of each
//! comes from the same record. For anchors `a` and targets `t` the
//! directional loss is
//!
//! ```text
//! L(a, t) = -1/K Σ_i log( exp(a_i·t_i / τ) / Σ_j exp(a_i·t_j / τ) )
//! ```
//!
//! and the reversed direction swaps the roles, which is a softmax over the
//! other axis of the same similarity matrix. The joint objective is
//! `(L_TL + L_LT) + α (L_VL + L_LV) + β (L_TV + L_VT)`, with either vision
//! term switched off by its ablation flag.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_TAU: f64 = 0.01;
pub const MAX_TAU: f64 = 1.0;
pub const INIT_TAU: f64 = 0.07;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("vision embeddings required by the active loss terms")]
    MissingVision,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Temperature and joint-loss weights. The temperature lives in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub log_tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_vl: bool,
    pub use_tv: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            log_tau: INIT_TAU.ln(),
            alpha: 0.1,
            beta: 0.1,
            use_vl: true,
            use_tv: true,
        }
    }
}

impl LossWeights {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            log_tau: tau.ln(),
            ..Self::default()
        }
    }

    pub fn clamp_log_tau(log_tau: f64) -> f64 {
        log_tau.clamp(MIN_TAU.ln(), MAX_TAU.ln())
    }

    pub fn tau(&self) -> f64 {
        Self::clamp_log_tau(self.log_tau).exp()
    }

    /// Whether the vision embeddings enter the objective at all.
    pub fn uses_vision(&self) -> bool {
        (self.use_vl && self.alpha != 0.0) || (self.use_tv && self.beta != 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tl: f64,
    pub l_lt: f64,
    pub l_vl: f64,
    pub l_lv: f64,
    pub l_tv: f64,
    pub l_vt: f64,
    pub total: f64,
}

/// Loss value plus gradients of one directional InfoNCE term.
struct Directional {
    loss: f64,
    /// dL/dS for the logits matrix `S = a tᵀ / τ`, oriented anchors × targets.
    dlogits: Array2<f64>,
    logits: Array2<f64>,
}

fn check(a: &ArrayView2<f64>, t: &ArrayView2<f64>, tau: f64) -> Result<()> {
    if a.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if a.dim() != t.dim() {
        return Err(LossError::Shape(a.dim(), t.dim()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::BadTemperature(tau));
    }
    Ok(())
}

/// Row-wise softmax cross-entropy against the diagonal.
fn directional(logits: Array2<f64>) -> Directional {
    let k = logits.nrows();
    let mut dlogits = Array2::zeros((k, k));
    let mut loss = 0.0;
    for i in 0..k {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        for j in 0..k {
            dlogits[[i, j]] = (row[j] - lse).exp();
        }
        dlogits[[i, i]] -= 1.0;
    }
    let inv_k = 1.0 / k as f64;
    dlogits.mapv_inplace(|v| v * inv_k);
    Directional {
        loss: (loss * inv_k).max(0.0),
        dlogits,
        logits,
    }
}

/// One directional InfoNCE term with anchors `a` and targets `t`.
pub fn infonce(a: ArrayView2<f64>, t: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check(&a, &t, tau)?;
    Ok(directional(a.dot(&t.t()) / tau).loss)
}

/// `infonce(a, b) + infonce(b, a)`.
pub fn symmetric_pair_loss(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    let (fwd, rev) = pair(a, b, tau)?;
    Ok(fwd.loss + rev.loss)
}

fn pair(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<(Directional, Directional)> {
    check(&a, &b, tau)?;
    let logits = a.dot(&b.t()) / tau;
    let reversed = logits.t().to_owned();
    Ok((directional(logits), directional(reversed)))
}

/// Gradients of a symmetric pair loss scaled by `weight`, accumulated into
/// `ga`, `gb`. Returns the pair's two directional losses and the
/// d/d(log τ) contribution.
fn accumulate_pair(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    tau: f64,
    weight: f64,
    ga: &mut Array2<f64>,
    gb: &mut Array2<f64>,
) -> Result<(f64, f64, f64)> {
    let (fwd, rev) = pair(a, b, tau)?;
    // total dL/dS for S = a bᵀ / τ, combining both directions
    let ds = &fwd.dlogits + &rev.dlogits.t();
    let scale = weight / tau;
    ga.scaled_add(scale, &ds.dot(&b));
    gb.scaled_add(scale, &ds.t().dot(&a));
    // S depends on log τ as S = G exp(-log τ), so dS/dlogτ = -S
    let dlog_tau = -weight * (&ds * &fwd.logits).sum();
    Ok((fwd.loss, rev.loss, dlog_tau))
}

#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
}

impl BatchEmbeddings {
    pub fn batch_size(&self) -> usize {
        self.x.nrows()
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        [&self.x, &self.y, &self.z]
            .iter()
            .flat_map(|m| m.axis_iter(Axis(0)).map(|r| (r.dot(&r).sqrt() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct JointGrad {
    pub breakdown: LossBreakdown,
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    /// All zeros when neither vision term is active.
    pub dz: Array2<f64>,
    pub dlog_tau: f64,
}

pub fn joint_loss(batch: &BatchEmbeddings, w: &LossWeights) -> Result<LossBreakdown> {
    joint_loss_views(batch.x.view(), batch.y.view(), Some(batch.z.view()), w)
}

pub fn joint_loss_grad(batch: &BatchEmbeddings, w: &LossWeights) -> Result<JointGrad> {
    joint_loss_grad_views(batch.x.view(), batch.y.view(), Some(batch.z.view()), w)
}

/// Loss only. `z` may be omitted when no vision term is active.
pub fn joint_loss_views(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    z: Option<ArrayView2<f64>>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let tau = w.tau();
    let mut b = LossBreakdown::default();
    let (tl, lt) = pair(x, y, tau)?;
    b.l_tl = tl.loss;
    b.l_lt = lt.loss;
    let mut total = b.l_tl + b.l_lt;
    if let Some(z) = z {
        if w.use_vl {
            let (vl, lv) = pair(z, y, tau)?;
            b.l_vl = vl.loss;
            b.l_lv = lv.loss;
            total += w.alpha * (b.l_vl + b.l_lv);
        }
        if w.use_tv {
            let (tv, vt) = pair(x, z, tau)?;
            b.l_tv = tv.loss;
            b.l_vt = vt.loss;
            total += w.beta * (b.l_tv + b.l_vt);
        }
    } else if w.uses_vision() {
        return Err(LossError::MissingVision);
    }
    b.total = total;
    Ok(b)
}

pub fn joint_loss_grad_views(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    z: Option<ArrayView2<f64>>,
    w: &LossWeights,
) -> Result<JointGrad> {
    let tau = w.tau();
    let mut dx = Array2::zeros(x.dim());
    let mut dy = Array2::zeros(y.dim());
    let mut dz = Array2::zeros(z.map(|z| z.dim()).unwrap_or(x.dim()));
    let mut b = LossBreakdown::default();
    let (l_tl, l_lt, mut dlog_tau) = accumulate_pair(x, y, tau, 1.0, &mut dx, &mut dy)?;
    b.l_tl = l_tl;
    b.l_lt = l_lt;
    let mut total = l_tl + l_lt;
    if let Some(z) = z {
        if w.use_vl {
            let (l_vl, l_lv, g) = accumulate_pair(z, y, tau, w.alpha, &mut dz, &mut dy)?;
            b.l_vl = l_vl;
            b.l_lv = l_lv;
            total += w.alpha * (l_vl + l_lv);
            dlog_tau += g;
        }
        if w.use_tv {
            let (l_tv, l_vt, g) = accumulate_pair(x, z, tau, w.beta, &mut dx, &mut dz)?;
            b.l_tv = l_tv;
            b.l_vt = l_vt;
            total += w.beta * (l_tv + l_vt);
            dlog_tau += g;
        }
    } else if w.uses_vision() {
        return Err(LossError::MissingVision);
    }
    // clamped temperature has no gradient past its bounds
    if w.log_tau != LossWeights::clamp_log_tau(w.log_tau) {
        dlog_tau = 0.0;
    }
    b.total = total;
    Ok(JointGrad {
        breakdown: b,
        dx,
        dy,
        dz,
        dlog_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m: Array2<f64> = Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0f64..1.0));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        m
    }

    /// Direct transcription of the InfoNCE sum, no stabilization.
    fn naive_infonce(a: &Array2<f64>, t: &Array2<f64>, tau: f64) -> f64 {
        let k = a.nrows();
        let mut total = 0.0;
        for i in 0..k {
            let num = (a.row(i).dot(&t.row(i)) / tau).exp();
            let den: f64 = (0..k).map(|j| (a.row(i).dot(&t.row(j)) / tau).exp()).sum();
            total += (num / den).ln();
        }
        -total / k as f64
    }

    #[test]
    fn single_element_batch_is_zero() {
        let a = array![[0.6, 0.8]];
        assert_eq!(infonce(a.view(), a.view(), 0.07).unwrap(), 0.0);
        assert_eq!(symmetric_pair_loss(a.view(), a.view(), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_log_k() {
        let a = Array2::from_shape_fn((4, 3), |(_, j)| [0.6, 0.0, 0.8][j]);
        let l = infonce(a.view(), a.view(), 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-9);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn basis_vectors_hand_value() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((expected - 0.313262).abs() < 1e-6);
        assert!((infonce(e.view(), e.view(), 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((symmetric_pair_loss(e.view(), e.view(), 1.0).unwrap() - 2.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn joint_weights() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let batch = BatchEmbeddings {
            x: e.clone(),
            y: e.clone(),
            z: e.clone(),
        };
        let w = LossWeights::with_tau(1.0);
        assert_eq!(w.alpha, 0.1);
        assert_eq!(w.beta, 0.1);
        let b = joint_loss(&batch, &w).unwrap();
        assert!((b.total - 0.751829).abs() < 1e-6, "{}", b.total);
        let off = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        let b0 = joint_loss(&batch, &off).unwrap();
        assert_eq!(b0.total, b0.l_tl + b0.l_lt);
    }

    #[test]
    fn errors() {
        let empty = Array2::<f64>::zeros((0, 3));
        assert_eq!(infonce(empty.view(), empty.view(), 0.1), Err(LossError::EmptyBatch));
        let a = array![[1.0, 0.0]];
        assert_eq!(
            infonce(a.view(), a.view(), 0.0),
            Err(LossError::BadTemperature(0.0))
        );
        let b = array![[1.0, 0.0, 0.0]];
        assert!(matches!(infonce(a.view(), b.view(), 0.1), Err(LossError::Shape(..))));
    }

    #[test]
    fn matches_naive_sum_and_stays_finite_at_low_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 1..7 {
            let a = unit_rows(k, 5, &mut rng);
            let t = unit_rows(k, 5, &mut rng);
            let got = infonce(a.view(), t.view(), 0.3).unwrap();
            assert!((got - naive_infonce(&a, &t, 0.3)).abs() < 1e-10);
        }
        let a = unit_rows(8, 4, &mut rng);
        let l = infonce(a.view(), (-&a).view(), MIN_TAU).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn large_margin_approaches_zero() {
        let e = Array2::<f64>::eye(4);
        assert!(infonce(e.view(), e.view(), MIN_TAU).unwrap() < 1e-6);
    }

    #[test]
    fn disabled_terms_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = BatchEmbeddings {
            x: unit_rows(4, 6, &mut rng),
            y: unit_rows(4, 6, &mut rng),
            z: unit_rows(4, 6, &mut rng),
        };
        for (use_vl, use_tv) in [(true, true), (true, false), (false, true), (false, false)] {
            let w = LossWeights {
                use_vl,
                use_tv,
                ..LossWeights::default()
            };
            let g = joint_loss_grad(&batch, &w).unwrap();
            let b = g.breakdown;
            assert_eq!(b.l_vl == 0.0 && b.l_lv == 0.0, !use_vl);
            assert_eq!(b.l_tv == 0.0 && b.l_vt == 0.0, !use_tv);
            let expected = (b.l_tl + b.l_lt)
                + if use_vl { w.alpha * (b.l_vl + b.l_lv) } else { 0.0 }
                + if use_tv { w.beta * (b.l_tv + b.l_vt) } else { 0.0 };
            assert_eq!(b.total, expected);
            if !use_vl && !use_tv {
                assert!(g.dz.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn single_row_gradient_is_zero() {
        let batch = BatchEmbeddings {
            x: array![[0.6, 0.8]],
            y: array![[1.0, 0.0]],
            z: array![[0.0, 1.0]],
        };
        let g = joint_loss_grad(&batch, &LossWeights::default()).unwrap();
        assert_eq!(g.breakdown.total, 0.0);
        for m in [&g.dx, &g.dy, &g.dz] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
        assert_eq!(g.dlog_tau, 0.0);
    }
}
