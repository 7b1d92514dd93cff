use super::tensor::{dot, norm2};

/// Default guard for normalizing near-zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let n = norm2(v).max(eps);
    v.iter().map(|x| x / n).collect()
}

/// Negative cosine similarity `−⟨a,b⟩ / (‖a‖‖b‖)`, norms guarded by [`NORM_EPS`].
pub fn neg_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a).max(NORM_EPS);
    let nb = norm2(b).max(NORM_EPS);
    -dot(a, b) / (na * nb)
}

/// Gradient of [`neg_cosine`] with respect to `a`, holding `b` fixed.
///
/// Zero when either norm is below [`NORM_EPS`]; the guarded branch is treated as flat.
pub fn neg_cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm2(a), norm2(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return vec![0.0; a.len()];
    }
    let cos = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(&ai, &bi)| -(bi / (na * nb) - cos * ai / (na * na)))
        .collect()
}
