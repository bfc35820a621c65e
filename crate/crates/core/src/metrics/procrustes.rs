//! Similarity Procrustes alignment (Umeyama) on a hand-rolled two-sided
//! Jacobi 3x3 SVD, so the whole path is deterministic and dependency-free.

use super::MetricsError;
use crate::skeleton::{Mat3, Vec3};

const SVD_TOL: f64 = 1e-12;
const SVD_MAX_SWEEPS: usize = 60;

/// `x -> scale * rotation * x + translation`, with `rotation` proper
/// (orthogonal, det +1) and `scale > 0`.
#[derive(Clone, Debug)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2]) + self.translation[1],
            self.scale * (r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]) + self.translation[2],
        ]
    }
}

/// Least-squares similarity transform minimizing
/// `sum_i || s R pred_i + t - gt_i ||^2`, reflections excluded.
///
/// Needs at least 3 points whose covariance has rank >= 2; otherwise the
/// rotation is not identifiable and a degeneracy error is returned.
pub fn umeyama(pred: &[Vec3], gt: &[Vec3]) -> Result<SimilarityTransform, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::SizeMismatch {
            lhs: pred.len(),
            rhs: gt.len(),
        });
    }
    if pred.len() < 3 {
        return Err(MetricsError::TooFewPoints {
            need: 3,
            got: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let mut mu_p = [0.0; 3];
    let mut mu_g = [0.0; 3];
    for (p, g) in pred.iter().zip(gt) {
        for a in 0..3 {
            mu_p[a] += p[a] / n;
            mu_g[a] += g[a] / n;
        }
    }

    // covariance E[(g - mu_g)(p - mu_p)^T] and pred variance
    let mut cov = [[0.0; 3]; 3];
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let pc = [p[0] - mu_p[0], p[1] - mu_p[1], p[2] - mu_p[2]];
        let gc = [g[0] - mu_g[0], g[1] - mu_g[1], g[2] - mu_g[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += gc[r] * pc[c] / n;
            }
        }
        var_p += (pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2]) / n;
    }

    let (u, d, v) = svd3(&cov);
    let scale_ref = d[0].max(f64::MIN_POSITIVE);
    if d[1] <= 1e-9 * scale_ref || var_p <= 0.0 {
        return Err(MetricsError::Degenerate);
    }

    // reflection guard: flip the weakest direction when det(U V^T) < 0
    let det_uv = det3(&mat_mul_t(&u, &v));
    let sign = if det_uv < 0.0 { -1.0 } else { 1.0 };
    let mut rotation = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rotation[r][c] =
                u[r][0] * v[c][0] + u[r][1] * v[c][1] + sign * u[r][2] * v[c][2];
        }
    }
    let trace_ds = d[0] + d[1] + sign * d[2];
    let scale = trace_ds / var_p;
    let rp = [
        rotation[0][0] * mu_p[0] + rotation[0][1] * mu_p[1] + rotation[0][2] * mu_p[2],
        rotation[1][0] * mu_p[0] + rotation[1][1] * mu_p[1] + rotation[1][2] * mu_p[2],
        rotation[2][0] * mu_p[0] + rotation[2][1] * mu_p[1] + rotation[2][2] * mu_p[2],
    ];
    let translation = [
        mu_g[0] - scale * rp[0],
        mu_g[1] - scale * rp[1],
        mu_g[2] - scale * rp[2],
    ];
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Two-sided Jacobi SVD of a 3x3 matrix: `a = U diag(d) V^T` with
/// `d[0] >= d[1] >= d[2] >= 0` and orthogonal U, V.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let mut w = *a; // working matrix, driven to diagonal form
    let mut u = identity();
    let mut v = identity();

    let norm: f64 = frob(&w);
    if norm > 0.0 {
        for _ in 0..SVD_MAX_SWEEPS {
            if off_diag(&w) <= SVD_TOL * norm {
                break;
            }
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                // left rotation making the 2x2 block symmetric
                let theta = (w[q][p] - w[p][q]).atan2(w[p][p] + w[q][q]);
                let (s1, c1) = theta.sin_cos();
                rotate_left(&mut w, p, q, c1, s1);
                rotate_right_cols(&mut u, p, q, c1, s1);

                // Jacobi rotation zeroing the symmetric off-diagonal:
                // t = s/c solves gamma t^2 - (beta - alpha) t - gamma = 0,
                // smaller-magnitude root for stability
                let gamma = 0.5 * (w[p][q] + w[q][p]);
                let (c2, s2) = if gamma.abs() > 0.0 {
                    let tau = (w[q][q] - w[p][p]) / (2.0 * gamma);
                    let t = if tau >= 0.0 {
                        -1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    (c, t * c)
                } else {
                    (1.0, 0.0)
                };
                rotate_left(&mut w, p, q, c2, s2);
                rotate_right(&mut w, p, q, c2, s2);
                rotate_right_cols(&mut u, p, q, c2, s2);
                rotate_right_cols(&mut v, p, q, c2, s2);
            }
        }
    }

    // non-negative diagonal, columns sorted by descending singular value
    let mut d = [w[0][0], w[1][1], w[2][2]];
    for i in 0..3 {
        if d[i] < 0.0 {
            d[i] = -d[i];
            for r in 0..3 {
                u[r][i] = -u[r][i];
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap());
    let ds = [d[order[0]], d[order[1]], d[order[2]]];
    let mut us = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    for (new_c, &old_c) in order.iter().enumerate() {
        for r in 0..3 {
            us[r][new_c] = u[r][old_c];
            vs[r][new_c] = v[r][old_c];
        }
    }
    (us, ds, vs)
}

fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn frob(m: &Mat3) -> f64 {
    m.iter()
        .flat_map(|row| row.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn off_diag(m: &Mat3) -> f64 {
    (m[0][1] * m[0][1]
        + m[0][2] * m[0][2]
        + m[1][0] * m[1][0]
        + m[1][2] * m[1][2]
        + m[2][0] * m[2][0]
        + m[2][1] * m[2][1])
        .sqrt()
}

/// w <- G(p,q,theta)^T w, where G rotates the (p,q) plane.
fn rotate_left(w: &mut Mat3, p: usize, q: usize, c: f64, s: f64) {
    for j in 0..3 {
        let wp = w[p][j];
        let wq = w[q][j];
        w[p][j] = c * wp + s * wq;
        w[q][j] = -s * wp + c * wq;
    }
}

/// w <- w G(p,q,theta)
fn rotate_right(w: &mut Mat3, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..3 {
        let wp = w[i][p];
        let wq = w[i][q];
        w[i][p] = c * wp + s * wq;
        w[i][q] = -s * wp + c * wq;
    }
}

/// m <- m G(p,q,theta)  (accumulates column rotations)
fn rotate_right_cols(m: &mut Mat3, p: usize, q: usize, c: f64, s: f64) {
    rotate_right(m, p, q, c, s);
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// a * b^T
fn mat_mul_t(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[j][0] + a[i][1] * b[j][1] + a[i][2] * b[j][2];
        }
    }
    out
}
