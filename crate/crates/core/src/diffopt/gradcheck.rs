//! Central-difference gradient verification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Coordinates beyond this count are probed with random directions instead.
pub const MAX_COORDINATE_PROBES: usize = 64;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_probe: usize,
    pub probes: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `f`'s analytic gradient against central differences.
///
/// `f` returns `(value, gradient)`. For up to [`MAX_COORDINATE_PROBES`]
/// parameters every coordinate is perturbed; above that, directional
/// derivatives along seeded Gaussian directions are compared. The relative
/// error of a probe is `|a - n| / max(|a|, |n|, floor)` where `floor` is
/// `1e-6` times the largest numeric probe magnitude (and at least `1e-12`),
/// so probes with vanishing derivative are judged on absolute scale.
pub fn check_gradient<F>(f: F, params: &[f64], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(params)?;
    let eval = |x: &[f64]| -> Result<f64> { Ok(f(x)?.0) };

    let mut pairs = Vec::new();
    if params.len() <= MAX_COORDINATE_PROBES {
        for i in 0..params.len() {
            let mut p = params.to_vec();
            let mut m = params.to_vec();
            p[i] += h;
            m[i] -= h;
            let num = (eval(&p)? - eval(&m)?) / (2.0 * h);
            pairs.push((analytic[i], num));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        for _ in 0..MAX_COORDINATE_PROBES / 4 {
            let dir: Vec<f64> = (0..params.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|x| x / norm).collect();
            let p: Vec<f64> = params.iter().zip(&dir).map(|(x, d)| x + h * d).collect();
            let m: Vec<f64> = params.iter().zip(&dir).map(|(x, d)| x - h * d).collect();
            let num = (eval(&p)? - eval(&m)?) / (2.0 * h);
            let ana: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
            pairs.push((ana, num));
        }
    }
    Ok(report_from_pairs(&pairs, tol))
}

fn report_from_pairs(pairs: &[(f64, f64)], tol: f64) -> GradCheckReport {
    let scale = pairs.iter().map(|(_, n)| n.abs()).fold(0.0, f64::max);
    let floor = (1e-6 * scale).max(1e-12);
    let mut max_rel_err = 0.0;
    let mut worst_probe = 0;
    for (i, (a, n)) in pairs.iter().enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = rel;
            worst_probe = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_probe,
        probes: pairs.len(),
        tol,
        passed: max_rel_err < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::Tape;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let n = x.len();
        let a: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                if i == j { 2.0 + i as f64 } else { 0.1 * ((i + j) as f64).sin() }
            })
            .collect();
        let v = tape.param(x.to_vec(), n, 1);
        let am = tape.constant(a, n, n);
        let y = v.t().matmul(am.matmul(v)).sum();
        let g = tape.backward(y)?;
        Ok((y.item(), g.wrt(v)))
    }

    #[test]
    fn quadratic_form_is_near_exact() {
        let r = check_gradient(quadratic, &[0.3, -1.2, 0.8, 2.0], 1e-5, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn corrupted_adjoint_is_reported() {
        let bad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (v, mut g) = quadratic(x)?;
            g[1] *= 1.01;
            Ok((v, g))
        };
        let r = check_gradient(bad, &[0.3, -1.2, 0.8, 2.0], 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_probe, 1);
    }

    #[test]
    fn directional_probes_for_large_inputs() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = check_gradient(quadratic, &x, 1e-5, 1e-6).unwrap();
        assert_eq!(r.probes, MAX_COORDINATE_PROBES / 4);
        assert!(r.passed, "{r:?}");
    }
}
