//! Weighted least-squares fit of an anisotropic Gaussian peak on a flat
//! background to a normalized correlation map.
//!
//! Model: g2(v) = 1 + eta * exp(-vx^2/(2 sx^2) - (vy^2+vz^2)/(2 syz^2)).
//! The transverse axes share one width because the pair source is symmetric
//! around the collision axis x.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::correlator::G2Map;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct G2FitParams {
    /// Peak amplitude above the unit background.
    pub eta: f64,
    /// RMS width along the collision axis (units v_rec).
    pub sigma_x: f64,
    /// Shared RMS width of the two transverse axes (units v_rec).
    pub sigma_yz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub params: G2FitParams,
    /// One-sigma parameter errors from the curvature at the optimum,
    /// scaled by chi2/dof.
    pub se: G2FitParams,
    pub chi2: f64,
    pub dof: usize,
    pub n_bins: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after each accepted step.
    pub objective_history: Vec<f64>,
}

/// Evaluate the peak model at one velocity offset.
pub fn eval_model(p: &G2FitParams, v: [f64; 3]) -> f64 {
    let ex = v[0] * v[0] / (2.0 * p.sigma_x * p.sigma_x);
    let eyz = (v[1] * v[1] + v[2] * v[2]) / (2.0 * p.sigma_yz * p.sigma_yz);
    1.0 + p.eta * (-(ex + eyz)).exp()
}

/// Partial derivatives of the model wrt (eta, sigma_x, sigma_yz).
fn model_partials(p: &G2FitParams, v: [f64; 3]) -> [f64; 3] {
    let ex = v[0] * v[0] / (2.0 * p.sigma_x * p.sigma_x);
    let eyz = (v[1] * v[1] + v[2] * v[2]) / (2.0 * p.sigma_yz * p.sigma_yz);
    let e = (-(ex + eyz)).exp();
    [
        e,
        p.eta * e * v[0] * v[0] / (p.sigma_x * p.sigma_x * p.sigma_x),
        p.eta * e * (v[1] * v[1] + v[2] * v[2]) / (p.sigma_yz * p.sigma_yz * p.sigma_yz),
    ]
}

struct FitData {
    v: Vec<[f64; 3]>,
    g2: Vec<f64>,
    inv_err: Vec<f64>,
}

fn collect(map: &G2Map) -> FitData {
    let k = map.k_max;
    let mut data = FitData {
        v: Vec::new(),
        g2: Vec::new(),
        inv_err: Vec::new(),
    };
    for ix in -k..=k {
        for iy in -k..=k {
            for iz in -k..=k {
                let i = map.index(ix, iy, iz);
                if map.valid[i] && map.err[i] > 0.0 {
                    data.v
                        .push([map.center(ix), map.center(iy), map.center(iz)]);
                    data.g2.push(map.value[i]);
                    data.inv_err.push(1.0 / map.err[i]);
                }
            }
        }
    }
    data
}

/// Starting point from the map itself: amplitude from the central bin,
/// widths from second moments of the positive excess g2 - 1.
///
/// Falls back to a generic guess when the map shows no usable peak; the
/// fit refines from there.
pub fn init_from_moments(map: &G2Map) -> G2FitParams {
    let central = map.central_value();
    let eta0 = if central.is_finite() { central - 1.0 } else { 0.0 };

    let k = map.k_max;
    let mut wsum = 0.0;
    let mut mx = 0.0;
    let mut myz = 0.0;
    for ix in -k..=k {
        for iy in -k..=k {
            for iz in -k..=k {
                let i = map.index(ix, iy, iz);
                if !map.valid[i] {
                    continue;
                }
                let w = map.value[i] - 1.0;
                if w > 0.0 {
                    let vx = map.center(ix);
                    let vy = map.center(iy);
                    let vz = map.center(iz);
                    wsum += w;
                    mx += w * vx * vx;
                    myz += w * (vy * vy + vz * vz);
                }
            }
        }
    }

    let window = k as f64 * map.bin_width;
    let fallback = G2FitParams {
        eta: 0.1,
        sigma_x: window / 5.0,
        sigma_yz: window / 5.0,
    };
    if eta0 <= 0.0 || wsum <= 0.0 || mx <= 0.0 || myz <= 0.0 {
        log::warn!("correlation map shows no positive peak; using generic fit start");
        return fallback;
    }
    G2FitParams {
        eta: eta0,
        sigma_x: (mx / wsum).sqrt(),
        sigma_yz: (myz / (2.0 * wsum)).sqrt(),
    }
}

fn chi2_of(data: &FitData, p: &G2FitParams) -> f64 {
    let mut chi2 = 0.0;
    for i in 0..data.v.len() {
        let r = (data.g2[i] - eval_model(p, data.v[i])) * data.inv_err[i];
        chi2 += r * r;
    }
    chi2
}

fn normal_equations(data: &FitData, p: &G2FitParams) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for i in 0..data.v.len() {
        let w = data.inv_err[i];
        let r = (data.g2[i] - eval_model(p, data.v[i])) * w;
        let d = model_partials(p, data.v[i]);
        let j = Vector3::new(d[0] * w, d[1] * w, d[2] * w);
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (jtj, jtr)
}

/// Levenberg-Marquardt with analytic derivatives and multiplicative damping
/// of the normal-equation diagonal, which makes the iteration invariant
/// under rescaling of the velocity axes.
pub fn fit(map: &G2Map, init: &G2FitParams) -> Result<FitResult> {
    let data = collect(map);
    let n = data.v.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "{n} valid bins is not enough to constrain a 3-parameter fit"
        )));
    }
    if !(init.sigma_x > 0.0 && init.sigma_yz > 0.0 && init.eta > -1.0) {
        return Err(Error::InvalidInput(format!(
            "fit start out of domain: eta={} sigma_x={} sigma_yz={}",
            init.eta, init.sigma_x, init.sigma_yz
        )));
    }

    const MAX_ITER: usize = 200;
    const REL_STEP_TOL: f64 = 1e-8;
    const GRAD_TOL: f64 = 1e-10;
    const LAMBDA_MAX: f64 = 1e12;

    let mut p = *init;
    let mut chi2 = chi2_of(&data, &p);
    let mut lambda = 1e-3;
    let mut history = vec![chi2];
    let mut converged = false;
    let mut iterations = 0;
    let mut last_rel_change = f64::INFINITY;

    while iterations < MAX_ITER {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&data, &p);
        if jtr.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        // Inner loop: raise damping until a step is solvable, in-domain,
        // and reduces chi2.
        let mut stepped = false;
        while lambda <= LAMBDA_MAX {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] = jtj[(i, i)] * (1.0 + lambda);
            }
            let Some(delta) = nalgebra::Cholesky::new(damped).map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = G2FitParams {
                eta: p.eta + delta[0],
                sigma_x: p.sigma_x + delta[1],
                sigma_yz: p.sigma_yz + delta[2],
            };
            if !(trial.sigma_x > 0.0 && trial.sigma_yz > 0.0 && trial.eta > -1.0) {
                lambda *= 10.0;
                continue;
            }
            let trial_chi2 = chi2_of(&data, &trial);
            if trial_chi2.is_finite() && trial_chi2 <= chi2 {
                let rel_step = (delta[0].abs() / (p.eta.abs() + 1e-30))
                    .max(delta[1].abs() / p.sigma_x)
                    .max(delta[2].abs() / p.sigma_yz);
                last_rel_change = if chi2 > 0.0 {
                    (chi2 - trial_chi2) / chi2
                } else {
                    0.0
                };
                p = trial;
                chi2 = trial_chi2;
                history.push(chi2);
                lambda = (lambda * 0.3).max(1e-12);
                stepped = true;
                if rel_step < REL_STEP_TOL {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            // Damping exhausted without an acceptable step: the current
            // point is the best this surface offers.
            converged = jtr.amax() < 1e-6 * chi2.max(1.0);
            break;
        }
        if converged {
            break;
        }
    }

    if !converged {
        return Err(Error::NotConverged {
            iterations,
            residual: last_rel_change,
        });
    }

    let dof = n - 3;
    let (jtj, _) = normal_equations(&data, &p);
    let cov = jtj.try_inverse().ok_or(Error::SingularFit)?;
    let scale = if dof > 0 { chi2 / dof as f64 } else { 1.0 };
    let se = G2FitParams {
        eta: (cov[(0, 0)] * scale).max(0.0).sqrt(),
        sigma_x: (cov[(1, 1)] * scale).max(0.0).sqrt(),
        sigma_yz: (cov[(2, 2)] * scale).max(0.0).sqrt(),
    };
    Ok(FitResult {
        params: p,
        se,
        chi2,
        dof,
        n_bins: n,
        iterations,
        converged,
        objective_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlator::Variable;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_map(truth: &G2FitParams, k_max: i32, bin_width: f64, err: f64) -> G2Map {
        let n = (2 * k_max + 1) as usize;
        let mut map = G2Map {
            variable: Variable::Sum,
            bin_width,
            k_max,
            value: vec![f64::NAN; n * n * n],
            err: vec![f64::NAN; n * n * n],
            valid: vec![false; n * n * n],
            p_same: 1,
            p_cross: 1,
            shots: 1,
        };
        for ix in -k_max..=k_max {
            for iy in -k_max..=k_max {
                for iz in -k_max..=k_max {
                    let i = map.index(ix, iy, iz);
                    let v = [map.center(ix), map.center(iy), map.center(iz)];
                    map.value[i] = eval_model(truth, v);
                    map.err[i] = err;
                    map.valid[i] = true;
                }
            }
        }
        map
    }

    fn add_noise(map: &mut G2Map, rng: &mut ChaCha8Rng) {
        for i in 0..map.value.len() {
            if map.valid[i] {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                map.value[i] += z * map.err[i];
            }
        }
    }

    #[test]
    fn model_value_on_axis() {
        let p = G2FitParams {
            eta: 0.19,
            sigma_x: 0.017,
            sigma_yz: 0.081,
        };
        // One sigma out along x: 1 + 0.19 exp(-1/2).
        assert_relative_eq!(eval_model(&p, [0.017, 0.0, 0.0]), 1.1152, max_relative = 1e-4);
        assert_relative_eq!(eval_model(&p, [0.0, 0.0, 0.0]), 1.19, max_relative = 1e-12);
        assert!(eval_model(&p, [1.0, 1.0, 1.0]) - 1.0 < 1e-10);
    }

    #[test]
    fn partials_match_finite_differences() {
        let p = G2FitParams {
            eta: 0.25,
            sigma_x: 0.02,
            sigma_yz: 0.07,
        };
        let vs = [
            [0.0, 0.0, 0.0],
            [0.01, 0.02, -0.03],
            [-0.04, 0.05, 0.01],
            [0.02, 0.0, 0.0],
        ];
        for v in vs {
            let analytic = model_partials(&p, v);
            let h = 1e-7;
            let fd = [
                (eval_model(
                    &G2FitParams {
                        eta: p.eta + h,
                        ..p
                    },
                    v,
                ) - eval_model(
                    &G2FitParams {
                        eta: p.eta - h,
                        ..p
                    },
                    v,
                )) / (2.0 * h),
                (eval_model(
                    &G2FitParams {
                        sigma_x: p.sigma_x + h,
                        ..p
                    },
                    v,
                ) - eval_model(
                    &G2FitParams {
                        sigma_x: p.sigma_x - h,
                        ..p
                    },
                    v,
                )) / (2.0 * h),
                (eval_model(
                    &G2FitParams {
                        sigma_yz: p.sigma_yz + h,
                        ..p
                    },
                    v,
                ) - eval_model(
                    &G2FitParams {
                        sigma_yz: p.sigma_yz - h,
                        ..p
                    },
                    v,
                )) / (2.0 * h),
            ];
            for i in 0..3 {
                assert!(
                    (analytic[i] - fd[i]).abs() <= 1e-6 * (1.0 + fd[i].abs()),
                    "partial {i} at {v:?}: {} vs {}",
                    analytic[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn recovers_noiseless_surface() {
        let truth = G2FitParams {
            eta: 0.19,
            sigma_x: 0.017,
            sigma_yz: 0.081,
        };
        let map = synthetic_map(&truth, 25, 0.005, 0.05);
        let init = G2FitParams {
            eta: 0.5,
            sigma_x: 0.03,
            sigma_yz: 0.05,
        };
        let res = fit(&map, &init).unwrap();
        assert!(res.converged);
        assert_relative_eq!(res.params.eta, truth.eta, max_relative = 1e-6);
        assert_relative_eq!(res.params.sigma_x, truth.sigma_x, max_relative = 1e-6);
        assert_relative_eq!(res.params.sigma_yz, truth.sigma_yz, max_relative = 1e-6);
        assert!(res.chi2 < 1e-12);
    }

    #[test]
    fn objective_history_is_monotonic() {
        let truth = G2FitParams {
            eta: 0.3,
            sigma_x: 0.02,
            sigma_yz: 0.06,
        };
        let mut map = synthetic_map(&truth, 20, 0.005, 0.08);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        add_noise(&mut map, &mut rng);
        let res = fit(&map, &init_from_moments(&map)).unwrap();
        assert!(res.objective_history.len() >= 2);
        for w in res.objective_history.windows(2) {
            assert!(w[1] <= w[0], "objective increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn noisy_fit_recovers_truth_within_errors() {
        let truth = G2FitParams {
            eta: 0.19,
            sigma_x: 0.017,
            sigma_yz: 0.081,
        };
        let mut map = synthetic_map(&truth, 25, 0.005, 0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        add_noise(&mut map, &mut rng);
        let res = fit(&map, &init_from_moments(&map)).unwrap();
        assert!(res.converged);
        // 4 sigma against the reported parameter errors.
        assert!((res.params.eta - truth.eta).abs() < 4.0 * res.se.eta);
        assert!((res.params.sigma_x - truth.sigma_x).abs() < 4.0 * res.se.sigma_x);
        assert!((res.params.sigma_yz - truth.sigma_yz).abs() < 4.0 * res.se.sigma_yz);
        let reduced = res.chi2 / res.dof as f64;
        assert!((0.85..1.15).contains(&reduced), "chi2/dof = {reduced}");
    }

    #[test]
    fn moment_init_lands_near_truth() {
        let truth = G2FitParams {
            eta: 0.19,
            sigma_x: 0.017,
            sigma_yz: 0.081,
        };
        let map = synthetic_map(&truth, 50, 0.005, 0.02);
        let init = init_from_moments(&map);
        assert_relative_eq!(init.eta, truth.eta, max_relative = 0.2);
        assert_relative_eq!(init.sigma_x, truth.sigma_x, max_relative = 0.2);
        assert_relative_eq!(init.sigma_yz, truth.sigma_yz, max_relative = 0.2);
    }

    #[test]
    fn flat_map_falls_back_to_generic_start() {
        let flat = G2FitParams {
            eta: 0.0,
            sigma_x: 0.02,
            sigma_yz: 0.02,
        };
        let map = synthetic_map(&flat, 10, 0.005, 0.05);
        let init = init_from_moments(&map);
        assert_relative_eq!(init.eta, 0.1);
        assert_relative_eq!(init.sigma_x, 0.01); // window/5
    }

    #[test]
    fn null_map_fits_to_zero_amplitude() {
        let flat = G2FitParams {
            eta: 0.0,
            sigma_x: 0.05,
            sigma_yz: 0.05,
        };
        let mut map = synthetic_map(&flat, 15, 0.005, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        add_noise(&mut map, &mut rng);
        let res = fit(&map, &init_from_moments(&map)).unwrap();
        assert!(res.params.eta.abs() < 4.0 * res.se.eta.max(1e-3));
        let reduced = res.chi2 / res.dof as f64;
        assert!((0.85..1.15).contains(&reduced), "chi2/dof = {reduced}");
    }

    #[test]
    fn too_few_bins_is_an_error() {
        let truth = G2FitParams {
            eta: 0.2,
            sigma_x: 0.02,
            sigma_yz: 0.02,
        };
        let mut map = synthetic_map(&truth, 2, 0.005, 0.05);
        for i in 0..map.valid.len() {
            map.valid[i] = false;
        }
        assert!(fit(&map, &truth).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        // Rescaling every velocity axis by s must rescale the fitted widths
        // by s and leave the amplitude unchanged.
        #[test]
        fn fit_is_scale_equivariant(s in 0.25f64..4.0) {
            let truth = G2FitParams { eta: 0.22, sigma_x: 0.018, sigma_yz: 0.07 };
            let base = synthetic_map(&truth, 12, 0.01, 0.04);
            let scaled_truth = G2FitParams {
                eta: truth.eta,
                sigma_x: truth.sigma_x * s,
                sigma_yz: truth.sigma_yz * s,
            };
            let scaled = synthetic_map(&scaled_truth, 12, 0.01 * s, 0.04);
            let init = G2FitParams { eta: 0.4, sigma_x: 0.03, sigma_yz: 0.03 };
            let scaled_init = G2FitParams { eta: 0.4, sigma_x: 0.03 * s, sigma_yz: 0.03 * s };
            let a = fit(&base, &init).unwrap();
            let b = fit(&scaled, &scaled_init).unwrap();
            prop_assert!((a.params.eta - b.params.eta).abs() < 1e-6);
            prop_assert!((a.params.sigma_x * s - b.params.sigma_x).abs() < 1e-6 * s);
            prop_assert!((a.params.sigma_yz * s - b.params.sigma_yz).abs() < 1e-6 * s);
        }
    }
}
