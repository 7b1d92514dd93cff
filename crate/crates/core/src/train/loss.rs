use crate::error::{shape_err, Error, Result};
use crate::numerics::{neg_cosine, neg_cosine_grad, Tensor2D, NORM_EPS};

/// Loss value plus gradients on the four head outputs of a view pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub d_z1: Tensor2D,
    pub d_z2: Tensor2D,
    pub d_p1: Tensor2D,
    pub d_p2: Tensor2D,
}

fn check(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> Result<()> {
    if !a.same_shape(b) {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Batch mean of `neg_cosine(p_r, target_r)` and its gradient on `p`; `target` is a constant.
pub fn neg_cosine_batch(p: &Tensor2D, target: &Tensor2D) -> Result<(f64, Tensor2D)> {
    check("neg_cosine_batch", p, target)?;
    let b = p.rows() as f64;
    let mut grad = Tensor2D::zeros(p.rows(), p.cols());
    let mut loss = 0.0;
    for r in 0..p.rows() {
        loss += neg_cosine(p.row(r), target.row(r));
        for (g, v) in grad.row_mut(r).iter_mut().zip(neg_cosine_grad(p.row(r), target.row(r))) {
            *g = v / b;
        }
    }
    Ok((loss / b, grad))
}

/// Symmetrized stop-gradient objective `½[D(p1, sg z2) + D(p2, sg z1)]`.
///
/// The projections only appear detached, so `d_z1` and `d_z2` are zero.
pub fn simsiam_loss(z1: &Tensor2D, z2: &Tensor2D, p1: &Tensor2D, p2: &Tensor2D) -> Result<PairLoss> {
    let (l1, g1) = neg_cosine_batch(p1, z2)?;
    let (l2, g2) = neg_cosine_batch(p2, z1)?;
    Ok(PairLoss {
        loss: 0.5 * (l1 + l2),
        d_z1: Tensor2D::zeros(z1.rows(), z1.cols()),
        d_z2: Tensor2D::zeros(z2.rows(), z2.cols()),
        d_p1: g1.scaled(0.5),
        d_p2: g2.scaled(0.5),
    })
}

/// Unilateral cosine distillation `½[D(p2_sub, sg z1_sup) + D(p1_sub, sg z2_sup)]`.
///
/// Gradients cover the sub-net side only; the returned `d_z*` are zero.
pub fn siamkd_loss(p1_sub: &Tensor2D, p2_sub: &Tensor2D, z1_sup: &Tensor2D, z2_sup: &Tensor2D) -> Result<PairLoss> {
    let (l2, g2) = neg_cosine_batch(p2_sub, z1_sup)?;
    let (l1, g1) = neg_cosine_batch(p1_sub, z2_sup)?;
    Ok(PairLoss {
        loss: 0.5 * (l1 + l2),
        d_z1: Tensor2D::zeros(p1_sub.rows(), p1_sub.cols()),
        d_z2: Tensor2D::zeros(p2_sub.rows(), p2_sub.cols()),
        d_p1: g1.scaled(0.5),
        d_p2: g2.scaled(0.5),
    })
}

/// Squared-error distillation `½[mse(z1_sub, sg z1_sup) + mse(z2_sub, sg z2_sup)]`
/// on row-normalized projections; `mse` is the batch mean of the squared l2 distance.
pub fn l2_distill_loss(z1_sub: &Tensor2D, z2_sub: &Tensor2D, z1_sup: &Tensor2D, z2_sup: &Tensor2D) -> Result<PairLoss> {
    check("l2_distill_loss", z1_sub, z1_sup)?;
    check("l2_distill_loss", z2_sub, z2_sup)?;
    let b = z1_sub.rows() as f64;
    let half = |sub: &Tensor2D, sup: &Tensor2D| -> (f64, Tensor2D) {
        let (u, t) = (sub.normalize_rows(NORM_EPS), sup.normalize_rows(NORM_EPS));
        let mut diff = u;
        diff.axpy(-1.0, &t).expect("shapes checked");
        let sq = diff.data().iter().map(|v| v * v).sum::<f64>() / b;
        // |u - t|^2 = 2 + 2 neg_cosine(z, t) away from the zero guard.
        let mut grad = Tensor2D::zeros(sub.rows(), sub.cols());
        for r in 0..sub.rows() {
            let g = neg_cosine_grad(sub.row(r), sup.row(r));
            grad.row_mut(r).iter_mut().zip(g).for_each(|(o, v)| *o = v / b);
        }
        (0.5 * sq, grad)
    };
    let (l1, g1) = half(z1_sub, z1_sup);
    let (l2, g2) = half(z2_sub, z2_sup);
    Ok(PairLoss {
        loss: l1 + l2,
        d_z1: g1,
        d_z2: g2,
        d_p1: Tensor2D::zeros(z1_sub.rows(), z1_sub.cols()),
        d_p2: Tensor2D::zeros(z2_sub.rows(), z2_sub.cols()),
    })
}

/// Mean over dimensions of the population standard deviation of the
/// row-normalized features. About `1/√d` when healthy, `0` when collapsed.
pub fn collapse_metric(features: &Tensor2D) -> Result<f64> {
    let (b, d) = features.shape();
    if b < 2 {
        return Err(shape_err("collapse_metric", format!("needs at least 2 rows, got {b}")));
    }
    if d == 0 {
        return Err(shape_err("collapse_metric", "features have no columns"));
    }
    let normed = features.normalize_rows(NORM_EPS);
    let mean: Vec<f64> = normed.sum_rows().data().iter().map(|s| s / b as f64).collect();
    let mut var = vec![0.0; d];
    for row in normed.iter_rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    Ok(var.iter().map(|v| (v / b as f64).sqrt()).sum::<f64>() / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Rng};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2D {
        Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn aligned_pairs_score_minus_one() {
        let mut rng = Rng::new(1);
        let z1 = random(3, 4, &mut rng);
        let z2 = random(3, 4, &mut rng);
        let out = simsiam_loss(&z1, &z2, &z2, &z1).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-12);
        assert!((siamkd_loss(&z2, &z1, &z1, &z2).unwrap().loss + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pairs_score_zero() {
        let e1 = Tensor2D::from_rows(&[[1.0, 0.0]]).unwrap();
        let e2 = Tensor2D::from_rows(&[[0.0, 3.0]]).unwrap();
        assert_eq!(simsiam_loss(&e1, &e1, &e2, &e2).unwrap().loss, 0.0);
        assert_eq!(siamkd_loss(&e2, &e2, &e1, &e1).unwrap().loss, 0.0);
    }

    #[test]
    fn detached_inputs_get_no_gradient() {
        let mut rng = Rng::new(2);
        let (z1, z2, p1, p2) = (random(4, 3, &mut rng), random(4, 3, &mut rng), random(4, 3, &mut rng), random(4, 3, &mut rng));
        let out = simsiam_loss(&z1, &z2, &p1, &p2).unwrap();
        assert!(out.d_z1.data().iter().chain(out.d_z2.data()).all(|&v| v == 0.0));
        // Perturbing a detached input leaves the p-gradient's dependence intact but never creates a z-gradient.
        let mut z2b = z2.clone();
        z2b.set(0, 0, z2b.get(0, 0) + 0.1);
        let again = simsiam_loss(&z1, &z2b, &p1, &p2).unwrap();
        assert!(again.d_z2.data().iter().all(|&v| v == 0.0));
        assert_eq!(again.d_p2, out.d_p2);
    }

    #[test]
    fn prediction_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let (z1, z2, p1, p2) = (random(5, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng));
        let out = simsiam_loss(&z1, &z2, &p1, &p2).unwrap();
        let fd = finite_diff_grad(
            |x| simsiam_loss(&z1, &z2, &Tensor2D::from_vec(5, 4, x.to_vec()).unwrap(), &p2).unwrap().loss,
            p1.data(),
            1e-6,
        )
        .unwrap();
        assert!(relative_error(out.d_p1.data(), &fd) < 1e-6);
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let (a, b, c, d) = (random(3, 2, &mut rng), random(3, 2, &mut rng), random(3, 2, &mut rng), random(3, 2, &mut rng));
        let out = l2_distill_loss(&a, &b, &c, &d).unwrap();
        let fd = finite_diff_grad(
            |x| l2_distill_loss(&Tensor2D::from_vec(3, 2, x.to_vec()).unwrap(), &b, &c, &d).unwrap().loss,
            a.data(),
            1e-6,
        )
        .unwrap();
        assert!(relative_error(out.d_z1.data(), &fd) < 1e-6);
        assert_eq!(l2_distill_loss(&a, &b, &a, &b).unwrap().loss, 0.0);
    }

    #[test]
    fn collapse_examples() {
        let same = Tensor2D::from_rows(&[[1.0, 2.0, 3.0]; 4]).unwrap();
        assert_eq!(collapse_metric(&same).unwrap(), 0.0);
        let d = 5;
        let basis = Tensor2D::identity(d);
        let expected = ((1.0 / d as f64) * (1.0 - 1.0 / d as f64)).sqrt();
        assert!((collapse_metric(&basis).unwrap() - expected).abs() < 1e-12);
        let mut rng = Rng::new(5);
        let x = random(6, 3, &mut rng);
        let mut scaled = x.clone();
        for r in 0..6 {
            let s = 0.5 + r as f64;
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        assert!((collapse_metric(&x).unwrap() - collapse_metric(&scaled).unwrap()).abs() < 1e-12);
        assert!(collapse_metric(&Tensor2D::zeros(1, 3)).is_err());
    }
}
