//! Pre-adaptation objective terms and the `lambda` decay schedule.

use crate::error::{ensure_finite, Error, Result};

/// Log clamp shared by every KL / cross-entropy in the crate.
pub const LOG_EPS: f64 = 1e-8;

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// `KL(a || b) = sum_c a_c * log(a_c / b_c)` with both arguments clamped at
/// [`LOG_EPS`] inside the logarithm.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&ac, &bc)| if ac == 0.0 { 0.0 } else { ac * (ac.max(LOG_EPS).ln() - bc.max(LOG_EPS).ln()) })
        .sum()
}

/// Smoothness term: `sum_j KL(p || q_j)` over the nearest-neighbor posteriors.
pub fn smoothness_loss(p: &[f64], neighbors: &[&[f64]]) -> Result<f64> {
    check_finite("query posterior", p)?;
    for q in neighbors {
        if q.len() != p.len() {
            return Err(Error::Input(format!("neighbor posterior has {} classes, query has {}", q.len(), p.len())));
        }
        check_finite("neighbor posterior", q)?;
    }
    ensure_finite("smoothness loss", neighbors.iter().map(|q| kl_divergence(p, q)).sum())
}

/// Gradient of [`smoothness_loss`] w.r.t. `p`, neighbors held constant.
pub fn smoothness_grad(p: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
    let z = neighbors.len() as f64;
    (0..p.len())
        .map(|c| {
            let own = z * (p[c].max(LOG_EPS).ln() + 1.0);
            own - neighbors.iter().map(|q| q[c].max(LOG_EPS).ln()).sum::<f64>()
        })
        .collect()
}

/// Dispersion term: `sum_j <p, q_j>` over the furthest-neighbor posteriors.
pub fn far_loss(p: &[f64], far: &[&[f64]]) -> Result<f64> {
    check_finite("query posterior", p)?;
    let mut total = 0.0;
    for q in far {
        if q.len() != p.len() {
            return Err(Error::Input(format!("far posterior has {} classes, query has {}", q.len(), p.len())));
        }
        check_finite("far posterior", q)?;
        total += p.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Gradient of [`far_loss`] w.r.t. `p`: the sum of the far posteriors.
pub fn far_grad(p: &[f64], far: &[&[f64]]) -> Vec<f64> {
    (0..p.len()).map(|c| far.iter().map(|q| q[c]).sum()).collect()
}

/// `lambda0 * (1 + 10 * iter / max_iter) ^ -5`.
pub fn lambda_schedule(iter: usize, max_iter: usize, lambda0: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Config("lambda schedule needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::Input(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    let progress = iter as f64 / max_iter as f64;
    Ok(lambda0 * (1.0 + 10.0 * progress).powi(-5))
}

/// Shannon entropy (nats) of the mean of the given posterior rows.
pub fn marginal_entropy<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut mean: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for row in rows {
        if mean.is_empty() {
            mean = vec![0.0; row.len()];
        }
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    mean.iter().map(|&m| m / n as f64).filter(|&m| m > 0.0).map(|m| -m * m.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn smoothness_is_zero_for_identical_neighbors() {
        let p = vec![0.2, 0.5, 0.3];
        let l = smoothness_loss(&p, &[&p, &p, &p]).unwrap();
        assert!(l.abs() <= 1e-6);
    }

    #[test]
    fn one_hot_against_uniform_is_log_two() {
        let l = smoothness_loss(&[1.0, 0.0], &[&[0.5, 0.5]]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_inputs_are_numeric_errors() {
        assert!(matches!(smoothness_loss(&[f64::NAN, 1.0], &[&[0.5, 0.5]]), Err(Error::Numeric(_))));
        assert!(matches!(far_loss(&[0.5, 0.5], &[&[f64::INFINITY, 0.0]]), Err(Error::Numeric(_))));
    }

    #[test]
    fn far_loss_closed_forms() {
        assert_eq!(far_loss(&[1.0, 0.0], &[&[0.0, 1.0]]).unwrap(), 0.0);
        let u = vec![0.25; 4];
        let l = far_loss(&u, &[&u, &u, &u]).unwrap();
        assert!((l - 3.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn lambda_endpoints_and_errors() {
        assert_eq!(lambda_schedule(0, 100, 1.0).unwrap(), 1.0);
        assert_eq!(lambda_schedule(100, 100, 1.0).unwrap(), 11f64.powi(-5));
        assert!((lambda_schedule(100, 100, 1.0).unwrap() - 6.209e-6).abs() < 1e-9);
        assert!(matches!(lambda_schedule(0, 0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_is_non_increasing() {
        let vals: Vec<f64> = (0..=50).map(|i| lambda_schedule(i, 50, 2.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = dist(&[0.3, 0.1, 0.6]);
        let q1 = dist(&[0.2, 0.5, 0.3]);
        let q2 = dist(&[0.7, 0.2, 0.1]);
        let nbrs: [&[f64]; 2] = [&q1, &q2];
        let g_sm = smoothness_grad(&p, &nbrs);
        let g_far = far_grad(&p, &nbrs);
        let eps = 1e-7;
        for c in 0..3 {
            let mut pp = p.clone();
            pp[c] += eps;
            let mut pm = p.clone();
            pm[c] -= eps;
            let fd_sm = (smoothness_loss(&pp, &nbrs).unwrap() - smoothness_loss(&pm, &nbrs).unwrap()) / (2.0 * eps);
            let fd_far = (far_loss(&pp, &nbrs).unwrap() - far_loss(&pm, &nbrs).unwrap()) / (2.0 * eps);
            assert!((fd_sm - g_sm[c]).abs() < 1e-6);
            assert!((fd_far - g_far[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn marginal_entropy_of_uniform_and_collapsed() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert!((marginal_entropy([&a[..], &b[..]]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(marginal_entropy([&a[..], &a[..]]), 0.0);
    }

    fn distribution(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, c).prop_filter_map("non-zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn smoothness_is_gibbs_non_negative(p in distribution(5), qs in proptest::collection::vec(distribution(5), 1..4)) {
            let refs: Vec<&[f64]> = qs.iter().map(|q| q.as_slice()).collect();
            prop_assert!(smoothness_loss(&p, &refs).unwrap() >= -1e-6);
        }

        #[test]
        fn far_loss_is_bounded_by_z(p in distribution(4), qs in proptest::collection::vec(distribution(4), 1..5)) {
            let refs: Vec<&[f64]> = qs.iter().map(|q| q.as_slice()).collect();
            let l = far_loss(&p, &refs).unwrap();
            prop_assert!(l >= 0.0 && l <= refs.len() as f64 + 1e-12);
        }
    }
}
