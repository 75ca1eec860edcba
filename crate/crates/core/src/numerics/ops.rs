use crate::error::{ComeError, Result};

/// Numerically stable softmax of one row of logits.
///
/// Rejects non-finite input instead of propagating NaN.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(k) = logits.iter().position(|x| !x.is_finite()) {
        return Err(ComeError::NonFinite(format!(
            "softmax input[{k}] = {}",
            logits[k]
        )));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-shifted softmax, in place. Caller guarantees finite input.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Backward of a softmax row: `dz = p ⊙ (dp − ⟨p, dp⟩)`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((z, &pi), &dpi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (dpi - inner);
    }
}

/// Standard normal CDF, `Φ(x) = erfc(−x/√2) / 2`.
///
/// `erfc` comes from the `libm` port of the FreeBSD/musl implementation,
/// accurate to about one ulp, which keeps the tails well inside 1e-10
/// absolute error.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Squared coefficient of variation with population variance.
///
/// Returns 0 when the mean is 0 (an all-zero vector is trivially balanced).
pub fn cv_squared(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var / (mean * mean)
}

/// Gradient of [`cv_squared`] with respect to each entry.
///
/// With `S2 = mean(x²)` and `μ = mean(x)`, `∂cv²/∂x_j = 2 (x_j − S2/μ) / (n μ²)`.
pub fn cv_squared_grad(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    if v.is_empty() {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return vec![0.0; v.len()];
    }
    let s2 = v.iter().map(|x| x * x).sum::<f64>() / n;
    let scale = 2.0 / (n * mean * mean);
    v.iter().map(|x| scale * (x - s2 / mean)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_and_analytic() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // Reference computed with 40-digit arithmetic on the exact binary inputs.
        let logits = [0.3, -1.7, 2.25, 0.0, -0.45, 4.1, -3.3, 1.05];
        let expected = [
            0.017786405095036317,
            0.002407128171297871,
            0.1250150845948119,
            0.013176492974829045,
            0.008401702860397525,
            0.7950733756258038,
            0.00048599079615188265,
            0.037653819881671644,
        ];
        let p = softmax(&logits).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    /// Composite Simpson on [-40, x] of the Gaussian density.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let a = -40.0;
        let n = 400_000;
        let h = (x - a) / n as f64;
        let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(x);
        for i in 1..n {
            let t = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        s * h / 3.0
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        let q = cdf_by_quadrature(1.0);
        assert!((q - 0.841345).abs() < 1e-6);
        assert!((normal_cdf(1.0) - q).abs() < 1e-10);
        assert!((normal_cdf(-2.0) - (1.0 - normal_cdf(2.0))).abs() < 1e-15);
        for x in [-6.0, -2.5, -0.3, 0.7, 3.2] {
            assert!((normal_cdf(x) - cdf_by_quadrature(x)).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn normal_cdf_monotone_on_grid() {
        let mut prev = normal_cdf(-8.0);
        for i in 1..=10_000 {
            let x = -8.0 + 16.0 * i as f64 / 10_000.0;
            let c = normal_cdf(x);
            assert!(c >= prev, "not monotone at {x}");
            prev = c;
        }
    }

    #[test]
    fn cv_squared_examples() {
        assert_eq!(cv_squared(&[2.0; 4]), 0.0);
        assert!((cv_squared(&[1.0, 3.0]) - 0.25).abs() < 1e-15);
        assert!((cv_squared(&[5.0, 15.0]) - 0.25).abs() < 1e-15);
        assert_eq!(cv_squared(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(cv_squared_grad(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn cv_squared_grad_matches_central_differences() {
        let v = [0.4, 2.5, 1.1, 0.05, 3.3];
        let g = cv_squared_grad(&v);
        let h = 1e-6;
        for j in 0..v.len() {
            let mut a = v;
            let mut b = v;
            a[j] += h;
            b[j] -= h;
            let num = (cv_squared(&a) - cv_squared(&b)) / (2.0 * h);
            assert!((num - g[j]).abs() < 1e-8, "coord {j}");
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            row in prop::collection::vec(-500.0f64..500.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&row).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0) && p.iter().all(|&x| x <= 1.0));
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cdf_reflection(x in -8.0f64..8.0) {
            prop_assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cv_squared_scale_and_permutation_invariant(
            v in prop::collection::vec(0.0f64..100.0, 1..10),
            c in 0.01f64..100.0,
            rot in 0usize..10,
        ) {
            let base = cv_squared(&v);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((cv_squared(&scaled) - base).abs() <= 1e-12 * base.max(1.0));
            let mut p = v.clone();
            let k = rot % p.len();
            p.rotate_left(k);
            p.reverse();
            prop_assert!((cv_squared(&p) - base).abs() <= 1e-12 * base.max(1.0));
            prop_assert!(base >= 0.0);
        }
    }
}
