use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::problem::HyperparameterBox;

/// `n` points in `hyper_box`, one per stratum `[(i-1)/n, i/n)` in every
/// one-dimensional projection of the unit cube.
pub fn lhs_sample(hyper_box: &HyperparameterBox, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::DesignTooSmall(
            "a Latin hypercube needs at least one point".into(),
        ));
    }
    let dim = hyper_box.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = vec![vec![0.0; dim]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        strata.shuffle(&mut rng);
        for (point, &s) in unit.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            // u in [0,1) keeps the point inside its half-open stratum
            point[j] = (s as f64 + u) / n as f64;
        }
    }
    Ok(unit.iter().map(|u| hyper_box.from_unit(u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strata_ok(points: &[Vec<f64>], bx: &HyperparameterBox) -> bool {
        let n = points.len();
        (0..bx.dim()).all(|j| {
            let mut seen = vec![false; n];
            for p in points {
                let u = (p[j] - bx.lower()[j]) / (bx.upper()[j] - bx.lower()[j]);
                let s = ((u * n as f64).floor() as usize).min(n - 1);
                if seen[s] {
                    return false;
                }
                seen[s] = true;
            }
            true
        })
    }

    #[test]
    fn single_point() {
        let bx = HyperparameterBox::unnamed(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let pts = lhs_sample(&bx, 1, 3).unwrap();
        assert_eq!(pts.len(), 1);
        assert!(bx.contains(&pts[0]));
    }

    #[test]
    fn four_strata_on_unit_interval() {
        let bx = HyperparameterBox::unnamed(&[(0.0, 1.0)]).unwrap();
        let mut pts: Vec<f64> = lhs_sample(&bx, 4, 11).unwrap().into_iter().map(|p| p[0]).collect();
        pts.sort_by(f64::total_cmp);
        for (i, x) in pts.iter().enumerate() {
            assert!(*x >= i as f64 / 4.0 && *x < (i + 1) as f64 / 4.0, "{pts:?}");
        }
    }

    #[test]
    fn thousand_points_on_wide_box() {
        let bx = HyperparameterBox::unnamed(&[
            (-15.0, -5.0),
            (-2.25, -0.75),
            (-2.25, -0.75),
            (-2.25, -0.75),
            (0.5, 1.5),
            (0.5, 1.5),
            (0.5, 1.5),
            (0.5, 1.5),
        ])
        .unwrap();
        let pts = lhs_sample(&bx, 1000, 7).unwrap();
        assert_eq!(pts.len(), 1000);
        assert!(pts.iter().all(|p| bx.contains(p)));
        assert!(strata_ok(&pts, &bx));
    }

    #[test]
    fn deterministic_given_seed() {
        let bx = HyperparameterBox::unnamed(&[(0.0, 2.0), (1.0, 3.0)]).unwrap();
        assert_eq!(lhs_sample(&bx, 50, 5).unwrap(), lhs_sample(&bx, 50, 5).unwrap());
        assert_ne!(lhs_sample(&bx, 50, 5).unwrap(), lhs_sample(&bx, 50, 6).unwrap());
    }

    #[test]
    fn zero_points_rejected() {
        let bx = HyperparameterBox::unnamed(&[(0.0, 1.0)]).unwrap();
        assert!(lhs_sample(&bx, 0, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stratified(n in 1usize..200, dim in 1usize..6, seed in any::<u64>()) {
                let bounds: Vec<(f64, f64)> = (0..dim).map(|j| (j as f64 - 1.0, 2.0 * j as f64 + 0.5)).collect();
                let bx = HyperparameterBox::unnamed(&bounds).unwrap();
                let pts = lhs_sample(&bx, n, seed).unwrap();
                prop_assert!(strata_ok(&pts, &bx));
            }
        }
    }
}
