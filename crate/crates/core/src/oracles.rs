//! Independent checks: Monte-Carlo mask averages, central finite
//! differences and relative-error comparison.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MaskVector;
use crate::error::{LabError, Result};
use crate::network::ActivationParams;

pub const DEFAULT_FD_STEP: f64 = 1e-6;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-12;
/// Minimum distance, per unit patch norm, of a pre-activation from `0` and
/// `ϱ` for a coordinate to count as kink-free.
pub const DEFAULT_KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    /// `|value − mean| ≤ z·stderr`.
    pub fn within(&self, value: f64, z: f64) -> bool {
        (value - self.mean).abs() <= z * self.stderr
    }
}

/// Averages `per_mask_loss` over `n` i.i.d. Bernoulli(θ) masks of length `P`.
pub fn mc_expected_loss<F, R>(
    mut per_mask_loss: F,
    theta: f64,
    num_patches: usize,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate>
where
    F: FnMut(&MaskVector) -> Result<f64>,
    R: Rng + ?Sized,
{
    if n < 100 {
        return Err(LabError::Argument(format!(
            "Monte-Carlo estimate needs at least 100 masks (got {n})"
        )));
    }
    // Welford keeps the variance accurate when the loss has a large offset
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let eps = MaskVector::sample(num_patches, theta, rng);
        let v = per_mask_loss(&eps)?;
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n,
    })
}

/// Central differences `(f(W + h·e) − f(W − h·e)) / 2h` at each coordinate.
pub fn fd_gradient<F>(
    mut loss: F,
    w: &ArrayView2<f64>,
    step: f64,
    coords: &[(usize, usize)],
) -> Result<Vec<f64>>
where
    F: FnMut(&ArrayView2<f64>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(LabError::Argument(format!("step = {step} must be positive")));
    }
    let mut probe = w.to_owned();
    let mut out = Vec::with_capacity(coords.len());
    for &(i, j) in coords {
        if i >= w.nrows() || j >= w.ncols() {
            return Err(LabError::Argument(format!(
                "coordinate ({i}, {j}) outside a {}×{} matrix",
                w.nrows(),
                w.ncols()
            )));
        }
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + step;
        let plus = loss(&probe.view())?;
        probe[[i, j]] = orig - step;
        let minus = loss(&probe.view())?;
        probe[[i, j]] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LabError::Domain(format!(
                "non-finite loss while differencing coordinate ({i}, {j})"
            )));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, abs_floor)`, maximized over the coordinate list.
pub fn grad_check(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "coordinate lists differ in length");
    let mut worst = 0;
    let mut max_rel_err = 0.0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(abs_floor);
        if err > max_rel_err {
            max_rel_err = err;
            worst = i;
        }
    }
    GradCheck {
        max_rel_err,
        worst_coordinate: worst,
        pass: max_rel_err <= rel_tol,
    }
}

/// Samples `count` coordinates of a `km × d` weight matrix whose kernel row
/// keeps every pre-activation `⟨w_r, x_p⟩` at least `margin·‖x_p‖` away
/// from both activation kinks (`0` and `ϱ`) across all `patch_sets`.
///
/// The margin scales with the patch norm because a step `h` on one weight
/// moves `⟨w_r, x_p⟩` by at most `h·‖x_p‖`; near-zero background patches
/// would otherwise disqualify every kernel.
///
/// Kernels failing the test are skipped; an error is returned if none pass.
pub fn kink_free_coords<R: Rng + ?Sized>(
    w: &ArrayView2<f64>,
    patch_sets: &[ArrayView2<f64>],
    scales: &[f64],
    act: &ActivationParams,
    margin: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let km = w.nrows();
    let d = w.ncols();
    let mut ok_rows = Vec::new();
    for r in 0..km {
        let row = w.row(r);
        let clean = patch_sets.iter().all(|x| {
            let pre = x.dot(&row);
            pre.iter().zip(x.rows()).all(|(&a, xp)| {
                let norm = xp.dot(&xp).sqrt();
                scales.iter().all(|&s| {
                    let z = s * a;
                    let m = margin * s.abs() * norm;
                    (z.abs() > m) && ((z - act.varrho).abs() > m)
                })
            })
        });
        if clean {
            ok_rows.push(r);
        }
    }
    if ok_rows.is_empty() {
        return Err(LabError::Domain(
            "every kernel has a pre-activation near an activation kink".into(),
        ));
    }
    Ok((0..count)
        .map(|_| (ok_rows[rng.random_range(0..ok_rows.len())], rng.random_range(0..d)))
        .collect())
}

/// Gathers `grad[i, j]` at each coordinate.
pub fn gather(grad: &Array2<f64>, coords: &[(usize, usize)]) -> Vec<f64> {
    coords.iter().map(|&(i, j)| grad[[i, j]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mc_constant_and_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = mc_expected_loss(|_| Ok(2.5), 0.5, 20, 200, &mut rng).unwrap();
        assert_eq!(est.mean, 2.5);
        assert_eq!(est.stderr, 0.0);

        let est = mc_expected_loss(|e| Ok(e.kept() as f64), 0.5, 20, 20_000, &mut rng).unwrap();
        assert!(est.within(10.0, 3.0), "{est:?}");

        let est = mc_expected_loss(|e| Ok(e.kept() as f64), 1.0, 20, 100, &mut rng).unwrap();
        assert_eq!(est.mean, 20.0);
        assert!(mc_expected_loss(|_| Ok(0.0), 0.5, 20, 99, &mut rng).is_err());
    }

    #[test]
    fn fd_quadratic_and_linear() {
        let w = array![[0.3, -1.2], [2.0, 0.5]];
        let coords = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let g = fd_gradient(|v| Ok(0.5 * v.iter().map(|x| x * x).sum::<f64>()), &w.view(), 1e-4, &coords)
            .unwrap();
        for (gi, &(i, j)) in g.iter().zip(&coords) {
            assert!((gi - w[[i, j]]).abs() < 1e-10);
        }
        let gmat = array![[1.5, -0.25], [3.0, 0.0]];
        let g = fd_gradient(|v| Ok((v * &gmat).sum()), &w.view(), 1e-3, &coords).unwrap();
        for (gi, &(i, j)) in g.iter().zip(&coords) {
            assert!((gi - gmat[[i, j]]).abs() < 1e-10);
        }
        assert!(fd_gradient(|_| Ok(f64::NAN), &w.view(), 1e-3, &coords).is_err());
        assert!(fd_gradient(|_| Ok(0.0), &w.view(), 0.0, &coords).is_err());
    }

    #[test]
    fn fd_error_is_second_order() {
        let w = array![[0.7]];
        let f = |v: &ArrayView2<f64>| Ok(v[[0, 0]].sin() * v[[0, 0]].exp());
        let exact = 0.7f64.exp() * (0.7f64.sin() + 0.7f64.cos());
        let e1 = (fd_gradient(f, &w.view(), 1e-2, &[(0, 0)]).unwrap()[0] - exact).abs();
        let e2 = (fd_gradient(f, &w.view(), 5e-3, &[(0, 0)]).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn grad_check_arithmetic() {
        let r = grad_check(&[1.0, 2.0], &[1.0, 2.0], 1e-5, DEFAULT_ABS_FLOOR);
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.pass);
        let r = grad_check(&[1.0], &[1.00002], 1e-5, DEFAULT_ABS_FLOOR);
        assert!((r.max_rel_err - 0.00002 / 1.00002).abs() < 1e-15);
        assert!(!r.pass);
        let r = grad_check(&[0.0], &[0.0], 1e-5, DEFAULT_ABS_FLOOR);
        assert_eq!(r.max_rel_err, 0.0);
    }
}
