//! Classification, regression and multi-branch losses.

use crate::autodiff::{Graph, Var, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use crate::autodiff::smooth_l1;

/// `−ln p_y` with `p_y` floored at 1e-12.
pub fn cross_entropy(p: &[Real], y: usize) -> Result<Real> {
    let py = *p
        .get(y)
        .ok_or_else(|| Error::Invalid(format!("label {y} outside {} classes", p.len())))?;
    Ok(-py.max(PROB_FLOOR).ln())
}

/// Weighted sum `Σ_m α_m · l_m` of per-branch losses.
pub fn total_loss(branch_losses: &[Real], alphas: &[Real]) -> Result<Real> {
    check_weights(branch_losses.len(), alphas)?;
    Ok(branch_losses.iter().zip(alphas).map(|(l, a)| l * a).sum())
}

fn check_weights(m: usize, alphas: &[Real]) -> Result<()> {
    if alphas.len() != m || m == 0 {
        return Err(Error::Invalid(format!("{m} branch losses but {} weights", alphas.len())));
    }
    if alphas.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::Invalid(format!("loss weights {alphas:?} must be non-negative")));
    }
    Ok(())
}

/// Graph form of [`total_loss`].
pub fn weighted_loss(g: &mut Graph, branch_losses: &[Var], alphas: &[Real]) -> Result<Var> {
    check_weights(branch_losses.len(), alphas)?;
    let mut total = g.scale(branch_losses[0], alphas[0]);
    for (&l, &a) in branch_losses.iter().zip(alphas).skip(1) {
        let s = g.scale(l, a);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Summed smooth-L1 over the coordinates of the `rows` of `deltas[R×4]`
/// against `targets`, divided by `normalizer` (typically R).
pub fn regression_loss(g: &mut Graph, deltas: Var, rows: &[usize], targets: &[[Real; 4]], normalizer: usize) -> Result<Var> {
    if rows.len() != targets.len() {
        return Err(Error::Invalid(format!("{} rows but {} targets", rows.len(), targets.len())));
    }
    if rows.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..4).map(move |j| r * 4 + j)).collect();
    let picked = g.gather(deltas, &idx)?;
    let t = g.input(Tensor::from_slice(&targets.concat()));
    let diff = g.sub(picked, t)?;
    let l = g.smooth_l1(diff)?;
    let s = g.sum(l);
    Ok(g.scale(s, 1.0 / normalizer.max(1) as Real))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        let e = (-1.0 as Real).exp();
        assert!((cross_entropy(&[1.0 - e, e], 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2 as Real).abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 1e12_f64.ln() as Real).abs() < 1e-9);
        assert!(cross_entropy(&[1.0], 3).is_err());
    }

    #[test]
    fn smooth_l1_examples_and_continuity() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        let h = 1e-9;
        assert!((smooth_l1(1.0 - h) - 0.5).abs() < 1e-8 && (smooth_l1(1.0 + h) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn weighted_sum_examples() {
        assert_eq!(total_loss(&[0.7], &[1.0]).unwrap(), 0.7);
        assert!((total_loss(&[0.3, 0.1], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(total_loss(&[0.3, 0.1], &[2.0, 4.0]).unwrap(), 2.0 * total_loss(&[0.3, 0.1], &[1.0, 2.0]).unwrap());
        assert!(total_loss(&[0.3], &[1.0, 1.0]).is_err());
        assert!(total_loss(&[0.3], &[-1.0]).is_err());
        let mut g = Graph::new();
        let a = g.scalar(0.3);
        let b = g.scalar(0.1);
        let t = weighted_loss(&mut g, &[a, b], &[1.0, 2.0]).unwrap();
        assert!((g.value(t).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn regression_uses_only_listed_rows() {
        let mut g = Graph::new();
        let d = g.param(Tensor::new(vec![2, 4], vec![0.5, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0]).unwrap());
        let l = regression_loss(&mut g, d, &[0], &[[0.0, 0.0, 2.0, 0.0]], 2).unwrap();
        // (0.125 + 1.5) / 2
        assert!((g.value(l).item() - 0.8125).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(&g.grad(d).unwrap().data()[4..], &[0.0; 4]);
    }
}
