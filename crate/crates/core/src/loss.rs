//! Soft nearest-neighbor contrastive loss.
//!
//! For queries `q_i`, keys `k_j` and transmission ids `y`, with
//! `s_ij = -‖q_i - k_j‖² / τ`:
//!
//! ```text
//! L = -(1/N) Σ_i [ logsumexp_{j : y_j = y_i} s_ij  -  logsumexp_j s_ij ]
//! ```
//!
//! The positive set includes `j = i` and the denominator runs over all `N`
//! keys. Matrices are row-major `N × dim` in `f64`.

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.2;

/// Borrowed view of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub y: &'a [u64],
    pub dim: usize,
    pub tau: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(q: &'a [f64], k: &'a [f64], y: &'a [u64], dim: usize, tau: f64) -> Result<Self> {
        let b = ContrastiveBatch { q, k, y, dim, tau };
        b.validate()?;
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        let n = self.y.len();
        if n == 0 || self.dim == 0 {
            return Err(Error::invalid("contrastive batch must be non-empty"));
        }
        if self.q.len() != n * self.dim || self.k.len() != n * self.dim {
            return Err(Error::invalid(format!(
                "expected {n}x{} embeddings, got q={} k={} values",
                self.dim,
                self.q.len(),
                self.k.len()
            )));
        }
        if self.q.iter().chain(self.k).any(|v| v.is_nan()) {
            return Err(Error::invalid("embedding contains NaN"));
        }
        Ok(())
    }
}

/// Loss value and its gradients with respect to `q` and `k`.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
}

/// Pairwise logits `-‖q_i - k_j‖² / τ` via one Gram product.
fn logits(b: &ContrastiveBatch) -> Vec<f64> {
    let (n, d) = (b.n(), b.dim);
    let sq = |m: &[f64], i: usize| m[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>();
    let qn: Vec<f64> = (0..n).map(|i| sq(b.q, i)).collect();
    let kn: Vec<f64> = (0..n).map(|j| sq(b.k, j)).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        let qi = &b.q[i * d..(i + 1) * d];
        for j in 0..n {
            let kj = &b.k[j * d..(j + 1) * d];
            let dot: f64 = qi.iter().zip(kj).map(|(a, c)| a * c).sum();
            let dist = (qn[i] + kn[j] - 2.0 * dot).max(0.0);
            s[i * n + j] = -dist / b.tau;
        }
    }
    s
}

/// Returns `(logsumexp over positives, logsumexp over all)` for one row,
/// plus the softmax weights of each set.
fn row_stats(row: &[f64], y: &[u64], yi: u64) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let max_all = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_pos = row
        .iter()
        .zip(y)
        .filter(|(_, &yj)| yj == yi)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e_all: Vec<f64> = row.iter().map(|&v| (v - max_all).exp()).collect();
    let e_pos: Vec<f64> = row
        .iter()
        .zip(y)
        .map(|(&v, &yj)| if yj == yi { (v - max_pos).exp() } else { 0.0 })
        .collect();
    let z_all: f64 = e_all.iter().sum();
    let z_pos: f64 = e_pos.iter().sum();
    let p_all = e_all.iter().map(|e| e / z_all).collect();
    let p_pos = e_pos.iter().map(|e| e / z_pos).collect();
    (max_pos + z_pos.ln(), max_all + z_all.ln(), p_pos, p_all)
}

pub fn snn_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let n = batch.n();
    let s = logits(batch);
    let total: f64 = (0..n)
        .map(|i| {
            let (lse_pos, lse_all, _, _) = row_stats(&s[i * n..(i + 1) * n], batch.y, batch.y[i]);
            lse_all - lse_pos
        })
        .sum();
    Ok(total / n as f64)
}

/// Loss plus analytic gradients.
///
/// With `g_ij = (p_ij - p⁺_ij) / N` (all-key softmax minus positive-set
/// softmax), `dL/dq_i = Σ_j g_ij · (-2/τ)(q_i - k_j)` and
/// `dL/dk_j = Σ_i g_ij · (2/τ)(q_i - k_j)`.
pub fn snn_loss_with_grad(batch: &ContrastiveBatch) -> Result<LossGrad> {
    batch.validate()?;
    let (n, d, tau) = (batch.n(), batch.dim, batch.tau);
    let s = logits(batch);
    let mut loss = 0.0;
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let c = 2.0 / (tau * n as f64);
    for i in 0..n {
        let (lse_pos, lse_all, p_pos, p_all) =
            row_stats(&s[i * n..(i + 1) * n], batch.y, batch.y[i]);
        loss += lse_all - lse_pos;
        let qi = &batch.q[i * d..(i + 1) * d];
        for j in 0..n {
            let g = p_all[j] - p_pos[j];
            if g == 0.0 {
                continue;
            }
            let kj = &batch.k[j * d..(j + 1) * d];
            for t in 0..d {
                let diff = qi[t] - kj[t];
                dq[i * d + t] -= c * g * diff;
                dk[j * d + t] += c * g * diff;
            }
        }
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        dq,
        dk,
    })
}

/// Symmetrized objective over the two view pairings:
/// `2τ · [L(q_w, k_s) + L(q_s, k_w)]`.
pub fn symmetrized_loss(
    q_w: &[f64],
    k_s: &[f64],
    q_s: &[f64],
    k_w: &[f64],
    y: &[u64],
    dim: usize,
    tau: f64,
) -> Result<f64> {
    let a = snn_loss(&ContrastiveBatch::new(q_w, k_s, y, dim, tau)?)?;
    let b = snn_loss(&ContrastiveBatch::new(q_s, k_w, y, dim, tau)?)?;
    Ok(2.0 * tau * (a + b))
}

/// Gradients of the symmetrized loss with respect to the two query blocks.
pub struct SymmetrizedGrad {
    pub loss: f64,
    pub dq_w: Vec<f64>,
    pub dq_s: Vec<f64>,
}

pub fn symmetrized_loss_with_grad(
    q_w: &[f64],
    k_s: &[f64],
    q_s: &[f64],
    k_w: &[f64],
    y: &[u64],
    dim: usize,
    tau: f64,
) -> Result<SymmetrizedGrad> {
    let scale = 2.0 * tau;
    let a = snn_loss_with_grad(&ContrastiveBatch::new(q_w, k_s, y, dim, tau)?)?;
    let b = snn_loss_with_grad(&ContrastiveBatch::new(q_s, k_w, y, dim, tau)?)?;
    Ok(SymmetrizedGrad {
        loss: scale * (a.loss + b.loss),
        dq_w: a.dq.into_iter().map(|g| g * scale).collect(),
        dq_s: b.dq.into_iter().map(|g| g * scale).collect(),
    })
}

/// Fourth-order central differences of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |h: f64| {
                probe[i] = orig + h;
                f(&probe)
            };
            let d = 8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps));
            probe[i] = orig;
            d / (12.0 * eps)
        })
        .collect()
}

/// Absolute floor on the relative-error denominator. Components whose
/// true gradient vanishes are compared against it instead of against
/// finite-difference noise.
const REL_FLOOR: f64 = 1e-6;

/// Largest elementwise `|a - n| / max(|a|, |n|, 1e-6)` between the analytic
/// gradient of [`snn_loss`] with respect to `q` and central differences.
pub fn grad_check(batch: &ContrastiveBatch, epsilon: f64) -> Result<f64> {
    let analytic = snn_loss_with_grad(batch)?.dq;
    let numeric = central_difference(
        |q| {
            let b = ContrastiveBatch { q, ..*batch };
            snn_loss(&b).unwrap_or(f64::NAN)
        },
        batch.q,
        epsilon,
    );
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_labels_give_zero() {
        let q = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let k = [0.0, 1.0, 1.0, 0.0, 0.8, 0.6];
        let y = [4, 4, 4];
        let b = ContrastiveBatch::new(&q, &k, &y, 2, 0.2).unwrap();
        assert_eq!(snn_loss(&b).unwrap(), 0.0);
        let g = snn_loss_with_grad(&b).unwrap();
        assert!(g.dq.iter().chain(&g.dk).all(|v| *v == 0.0));
    }

    #[test]
    fn orthogonal_pair() {
        let q = [1.0, 0.0, 0.0, 1.0];
        let y = [0, 1];
        let b = ContrastiveBatch::new(&q, &q, &y, 2, 0.2).unwrap();
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((snn_loss(&b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_tau_and_nan() {
        let q = [1.0, 0.0];
        let y = [0];
        assert!(ContrastiveBatch::new(&q, &q, &y, 2, 0.0).is_err());
        assert!(ContrastiveBatch::new(&q, &q, &y, 2, -1.0).is_err());
        let bad = [f64::NAN, 0.0];
        assert!(ContrastiveBatch::new(&bad, &q, &y, 2, 0.2).is_err());
        assert!(ContrastiveBatch::new(&q, &q, &y, 3, 0.2).is_err());
    }

    #[test]
    fn symmetric_collapse() {
        let q = [0.6, 0.8, 1.0, 0.0, 0.0, 1.0];
        let k = [0.8, 0.6, 0.0, 1.0, 1.0, 0.0];
        let y = [0, 1, 0];
        let tau = 0.2;
        let single = snn_loss(&ContrastiveBatch::new(&q, &k, &y, 2, tau).unwrap()).unwrap();
        let sym = symmetrized_loss(&q, &k, &q, &k, &y, 2, tau).unwrap();
        assert!((sym - 4.0 * tau * single).abs() < 1e-12);
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
