//! Dense least-squares machinery backing the weight solver.
//!
//! Everything operates on `ndarray::Array2<f64>`. The SVD is a one-sided
//! (Hestenes) Jacobi: cyclic sweeps of plane rotations orthogonalize the
//! columns of a working copy, singular values fall out as column norms, and
//! the accumulated rotations give V. No external numerics backend — the
//! matrices this crate sees are a few hundred rows and columns at most, and
//! the solver's behavior must be bit-reproducible across machines.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("jacobi rotations did not converge within {max_sweeps} sweeps")]
    NoConvergence { max_sweeps: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Cap on cyclic sweeps before reporting failure.
const MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U · diag(s) · Vt` with `k = min(m, n)`.
///
/// `u` is m×k with orthonormal columns, `s` is descending and non-negative,
/// `vt` is k×n with orthonormal rows.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Array2<f64>,
    pub s: Array1<f64>,
    pub vt: Array2<f64>,
}

/// Minimum-norm least-squares solution together with the effective rank used.
#[derive(Debug, Clone)]
pub struct Lstsq {
    pub x: Array2<f64>,
    pub rank: usize,
}

/// Compute the thin SVD of `a` by one-sided Jacobi rotations.
///
/// Rotation policy: a column pair (p, q) is rotated while its off-diagonal
/// Gram entry γ = bp·bq exceeds `m·ε·√(α β)`, the worst-case rounding error of
/// an m-term dot product. Below that floor a measured γ carries no signal, and
/// pairs with near-equal norms would otherwise churn full-angle rotations on
/// fresh rounding noise every sweep; above it, small singular directions keep
/// rotating down to relative orthogonality so the returned factors stay
/// orthonormal even for rank-deficient input.
pub fn svd(a: &Array2<f64>) -> Result<SvdResult, LinalgError> {
    debug_assert!(a.iter().all(|v| v.is_finite()), "svd input must be finite");
    let (m, n) = a.dim();
    if m >= n {
        svd_tall(a)
    } else {
        // A = U S Vt  ⇔  Aᵀ = V S Uᵀ: factor the transpose and swap sides.
        let t = svd_tall(&a.t().to_owned())?;
        Ok(SvdResult {
            u: t.vt.t().to_owned(),
            s: t.s,
            vt: t.u.t().to_owned(),
        })
    }
}

fn svd_tall(a: &Array2<f64>) -> Result<SvdResult, LinalgError> {
    let (m, n) = a.dim();
    debug_assert!(m >= n);

    // Column-major working copies: rotations touch whole columns.
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = n < 2 || frob == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = col_moments(&b[p], &b[q]);
                // A column whose norm² underflowed is numerically zero; it
                // gets flushed and replaced at output, so grinding its
                // residual overlaps down would be wasted sweeps.
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let noise_floor = m as f64 * f64::EPSILON * (alpha * beta).sqrt();
                if gamma.abs() <= noise_floor {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                // Past 2/√ε the closed form t = 1/(2ζ) holds to machine
                // precision; evaluating it directly also keeps ζ² from
                // overflowing on the extreme ratios rank-deficiency debris
                // produces. A t that still underflows to zero is a rotation
                // the arithmetic cannot express — skipping it is convergence,
                // not progress left undone.
                let t = if zeta.abs() > 1e8 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                if t == 0.0 {
                    continue;
                }
                rotated = true;
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut b, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence { max_sweeps: MAX_SWEEPS });
    }

    // Singular values are the column norms; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = b.iter().map(|col| l2(col)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let s_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    // Columns at or below this are rounding debris, not singular directions;
    // their U columns get replaced by an orthonormal completion below.
    let zero_cutoff = s_max * m.max(n) as f64 * f64::EPSILON;

    let mut u = Array2::<f64>::zeros((m, n));
    let mut s = Array1::<f64>::zeros(n);
    let mut vt = Array2::<f64>::zeros((n, n));
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..n {
            vt[(slot, i)] = v[j][i];
        }
        if norms[j] > zero_cutoff {
            s[slot] = norms[j];
            for i in 0..m {
                u[(i, slot)] = b[j][i] / norms[j];
            }
        } else {
            s[slot] = 0.0;
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut u, &pending);

    Ok(SvdResult { u, s, vt })
}

fn col_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

fn l2(col: &[f64]) -> f64 {
    col.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every other
/// column, chosen deterministically from the canonical basis.
fn complete_orthonormal(u: &mut Array2<f64>, pending: &[usize]) {
    let (m, n) = u.dim();
    for &slot in pending {
        let mut chosen = None;
        'basis: for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // Two Gram-Schmidt passes keep the result orthogonal to ~ε.
            for _ in 0..2 {
                for j in 0..n {
                    if j == slot {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|i| cand[i] * u[(i, j)]).sum();
                    for i in 0..m {
                        cand[i] -= dot * u[(i, j)];
                    }
                }
            }
            let norm = l2(&cand);
            if norm > 0.1 {
                for x in cand.iter_mut() {
                    *x /= norm;
                }
                chosen = Some(cand);
                break 'basis;
            }
        }
        let cand = chosen.expect("orthonormal completion must succeed for m >= n");
        for i in 0..m {
            u[(i, slot)] = cand[i];
        }
    }
}

/// Moore–Penrose pseudoinverse via SVD.
///
/// Singular values at or below `rcond · max(s) · max(m, n) · ε` are treated as
/// zero (`rcond` defaults to 1, ε = binary64 machine epsilon).
pub fn pinv(a: &Array2<f64>, rcond: Option<f64>) -> Result<Array2<f64>, LinalgError> {
    Ok(pinv_detailed(a, rcond)?.0)
}

fn pinv_detailed(
    a: &Array2<f64>,
    rcond: Option<f64>,
) -> Result<(Array2<f64>, usize), LinalgError> {
    let (m, n) = a.dim();
    let dec = svd(a)?;
    let s_max = dec.s.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond.unwrap_or(1.0) * s_max * m.max(n) as f64 * f64::EPSILON;
    let mut rank = 0;
    // A⁺ = V · diag(s⁺) · Uᵀ, assembled as (scaled Vᵀ rows)ᵀ · Uᵀ.
    let mut v_scaled = dec.vt.clone();
    for (i, row) in v_scaled.rows_mut().into_iter().enumerate() {
        let s = dec.s[i];
        let inv = if s > cutoff {
            rank += 1;
            1.0 / s
        } else {
            0.0
        };
        for x in row {
            *x *= inv;
        }
    }
    Ok((v_scaled.t().dot(&dec.u.t()), rank))
}

/// Minimum-norm least-squares solve: the `x` minimizing ‖a·x − b‖_F, and of
/// minimal Frobenius norm among minimizers. `rank` is the effective rank of
/// `a` under the default pseudoinverse cutoff.
pub fn lstsq_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Lstsq, LinalgError> {
    lstsq_factor(a)?.solve(b, 0.0)
}

/// SVD factorization of a design matrix, reusable across right-hand sides
/// and truncation levels: the factorization is the expensive part, each
/// [`LstsqFactor::solve`] is two small matrix products.
#[derive(Debug, Clone)]
pub struct LstsqFactor {
    u: Array2<f64>,
    s: Array1<f64>,
    vt: Array2<f64>,
    m: usize,
    n: usize,
}

pub fn lstsq_factor(a: &Array2<f64>) -> Result<LstsqFactor, LinalgError> {
    let (m, n) = a.dim();
    let dec = svd(a)?;
    Ok(LstsqFactor { u: dec.u, s: dec.s, vt: dec.vt, m, n })
}

impl LstsqFactor {
    pub fn s_max(&self) -> f64 {
        self.s.iter().cloned().fold(0.0, f64::max)
    }

    /// Minimum-norm least squares against `b`, discarding singular directions
    /// at or below `rel_cutoff · s_max`. The machine-precision floor always
    /// applies; a larger `rel_cutoff` trades fit for a tamer solution on
    /// ill-conditioned systems.
    pub fn solve(&self, b: &Array2<f64>, rel_cutoff: f64) -> Result<Lstsq, LinalgError> {
        if b.nrows() != self.m {
            return Err(LinalgError::DimensionMismatch(format!(
                "lhs has {} rows, rhs has {}",
                self.m,
                b.nrows()
            )));
        }
        let s_max = self.s_max();
        let cutoff =
            (s_max * self.m.max(self.n) as f64 * f64::EPSILON).max(rel_cutoff * s_max);
        let mut proj = self.u.t().dot(b);
        let mut rank = 0;
        for (i, mut row) in proj.rows_mut().into_iter().enumerate() {
            if self.s[i] > cutoff {
                rank += 1;
                let inv = 1.0 / self.s[i];
                for x in row.iter_mut() {
                    *x *= inv;
                }
            } else {
                row.fill(0.0);
            }
        }
        Ok(Lstsq { x: self.vt.t().dot(&proj), rank })
    }
}

// ─── tests ──────────────────────────────────────────────────────────────────
