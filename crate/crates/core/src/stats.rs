//! Derived quantities on top of the correlation pipeline: the peak-height
//! prediction from counting rates, amplitude-vs-number binning, the
//! Cauchy-Schwarz comparison of the two peaks, and number-difference
//! variance between opposite zones.

use serde::{Deserialize, Serialize};

use crate::correlator::{normalize, pair_histograms, CorrelationConfig};
use crate::error::{Error, Result};
use crate::fitter::{fit, init_from_moments, FitResult, G2FitParams};
use crate::kinematics::VelocityVector;

/// Inputs of the accidental-rate estimate for the pair-peak amplitude.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PeakHeightModel {
    /// Shell volume in (v_rec)^3.
    pub shell_volume: f64,
    /// Correlation volume in (v_rec)^3.
    pub correlation_volume: f64,
    /// Mean scattered atoms per shot (true number, not detected; efficiency
    /// and symmetric acceptance cancel in the ratio).
    pub scattered_number: f64,
}

/// Predicted pair-peak amplitude: true pairs over random coincidences,
/// eta = V / (N * dV).
pub fn peak_height_bb(model: &PeakHeightModel) -> Result<f64> {
    if !(model.scattered_number > 0.0) {
        return Err(Error::InvalidInput(
            "scattered_number must be positive".into(),
        ));
    }
    if !(model.shell_volume > 0.0 && model.correlation_volume > 0.0) {
        return Err(Error::InvalidInput("volumes must be positive".into()));
    }
    if model.correlation_volume > model.shell_volume {
        return Err(Error::InvalidInput(format!(
            "correlation volume {} exceeds shell volume {}",
            model.correlation_volume, model.shell_volume
        )));
    }
    Ok(model.shell_volume / (model.scattered_number * model.correlation_volume))
}

/// Effective shell volume 4 pi r^2 * (2 sqrt(pi) sigma_r). The thickness is
/// the inverse participation length of a Gaussian radial profile
/// (1 / integral of the squared normalized profile), which is the thickness
/// that makes the accidental-coincidence rate of a uniform shell exact.
pub fn shell_volume(radius: f64, rms_width: f64) -> Result<f64> {
    if !(radius > 0.0 && rms_width > 0.0) {
        return Err(Error::InvalidInput(
            "shell radius and width must be positive".into(),
        ));
    }
    Ok(4.0 * std::f64::consts::PI
        * radius
        * radius
        * (2.0 * std::f64::consts::PI.sqrt() * rms_width))
}

/// Gaussian-equivalent correlation volume (2 pi)^{3/2} sx * syz^2 of a
/// fitted peak.
pub fn correlation_volume(fit: &G2FitParams) -> Result<f64> {
    if !(fit.sigma_x > 0.0 && fit.sigma_yz > 0.0) {
        return Err(Error::InvalidInput(format!(
            "fit widths must be positive, got {} / {}",
            fit.sigma_x, fit.sigma_yz
        )));
    }
    Ok((2.0 * std::f64::consts::PI).powf(1.5) * fit.sigma_x * fit.sigma_yz * fit.sigma_yz)
}

/// One quantile bin of shots grouped by detected count.
#[derive(Clone, Debug, Serialize)]
pub struct EtaBin {
    pub mean_count: f64,
    pub n_shots: usize,
    /// None when the bin had too few pairs for a stable fit.
    pub fit: Option<FitResult>,
}

/// Partition shots into quantile bins by detected count and run the full
/// sum-variable correlation analysis within each bin (same-shot and
/// cross-shot pairs both restricted to the bin, so the normalization sees
/// the bin's own density).
pub fn eta_vs_n<S: AsRef<[VelocityVector]>>(
    shots: &[S],
    n_bins: usize,
    cfg: &CorrelationConfig,
) -> Result<Vec<EtaBin>> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    if shots.len() < 2 * n_bins {
        return Err(Error::InvalidInput(format!(
            "{} shots cannot fill {} bins with at least 2 shots each",
            shots.len(),
            n_bins
        )));
    }
    if shots.len() < 100 * n_bins {
        log::warn!(
            "eta_vs_n: {} shots over {} bins is below ~100 per bin; fits may be unstable",
            shots.len(),
            n_bins
        );
    }
    let mut order: Vec<usize> = (0..shots.len()).collect();
    order.sort_by_key(|&i| (shots[i].as_ref().len(), i));

    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let lo = b * shots.len() / n_bins;
        let hi = (b + 1) * shots.len() / n_bins;
        let members: Vec<&[VelocityVector]> =
            order[lo..hi].iter().map(|&i| shots[i].as_ref()).collect();
        let mean_count = members.iter().map(|s| s.len() as f64).sum::<f64>()
            / members.len() as f64;
        let fit_result = pair_histograms(&members, cfg)
            .and_then(|(same, cross)| normalize(&same, &cross))
            .and_then(|map| fit(&map, &init_from_moments(&map)));
        let fit = match fit_result {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("eta_vs_n: bin {b} skipped: {e}");
                None
            }
        };
        bins.push(EtaBin {
            mean_count,
            n_shots: hi - lo,
            fit,
        });
    }
    Ok(bins)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CauchySchwarzReport {
    /// (1 + eta_BB) / (1 + eta_CL); classical fields require <= 1 at equal
    /// times, so > 1 signals the pairing inequality violation.
    pub ratio: f64,
    /// Gaussian significance of eta_BB - eta_CL > 0 from the fit errors.
    pub significance: f64,
    pub violated: bool,
}

/// Compare the back-to-back and collinear peak amplitudes.
pub fn cauchy_schwarz(bb: &FitResult, cl: &FitResult) -> Result<CauchySchwarzReport> {
    if !bb.converged || !cl.converged {
        return Err(Error::InvalidInput(
            "Cauchy-Schwarz comparison requires converged fits".into(),
        ));
    }
    let ratio = (1.0 + bb.params.eta) / (1.0 + cl.params.eta);
    let d = bb.params.eta - cl.params.eta;
    let se = (bb.se.eta * bb.se.eta + cl.se.eta * cl.se.eta).sqrt();
    let significance = if se > 0.0 {
        d / se
    } else if d > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(CauchySchwarzReport {
        ratio,
        significance,
        violated: significance > 2.0,
    })
}

/// Pair of antipodal angular zones used for number-difference statistics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ZonePair {
    pub axis: [f64; 3],
    pub half_angle: f64,
}

impl ZonePair {
    pub fn new(axis: [f64; 3], half_angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > 0.0) {
            return Err(Error::InvalidInput("zone axis must be nonzero".into()));
        }
        if !(half_angle > 0.0 && half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidInput(format!(
                "zone half-angle {half_angle} outside (0, pi/2)"
            )));
        }
        Ok(Self {
            axis: [axis[0] / n, axis[1] / n, axis[2] / n],
            half_angle,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZonePairSet {
    pub pairs: Vec<ZonePair>,
}

impl ZonePairSet {
    /// Three antipodal zone pairs comfortably inside the region left open by
    /// the default exclusion zones.
    pub fn default_accepted() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            pairs: vec![
                ZonePair::new([0.0, 1.0, 0.0], 0.25).unwrap(),
                ZonePair::new([0.0, s, s], 0.25).unwrap(),
                ZonePair::new([0.0, s, -s], 0.25).unwrap(),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ZonePairStat {
    pub v_nd: Option<f64>,
    pub mean_sum: f64,
    pub empty: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NumberDifference {
    /// Var(N+ - N-) / <N+ + N->, pooled over shots and zone pairs; 1 for
    /// uncorrelated atoms, below 1 for pair-correlated zones.
    pub v_nd: f64,
    pub mean_sum: f64,
    pub n_samples: usize,
    pub per_pair: Vec<ZonePairStat>,
}

/// Normalized variance of atom-number differences between opposite zones.
pub fn number_difference_variance<S: AsRef<[VelocityVector]>>(
    shots: &[S],
    zones: &ZonePairSet,
) -> Result<NumberDifference> {
    if zones.pairs.is_empty() {
        return Err(Error::InvalidInput("no zone pairs given".into()));
    }
    if shots.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 shots for a variance".into(),
        ));
    }
    let mut diffs: Vec<Vec<f64>> = vec![Vec::with_capacity(shots.len()); zones.pairs.len()];
    let mut sums: Vec<f64> = vec![0.0; zones.pairs.len()];
    for shot in shots {
        for (zi, z) in zones.pairs.iter().enumerate() {
            let cos_half = z.half_angle.cos();
            let mut plus = 0i64;
            let mut minus = 0i64;
            for v in shot.as_ref() {
                let n = v.norm();
                if n == 0.0 {
                    continue;
                }
                let c = (v.vx * z.axis[0] + v.vy * z.axis[1] + v.vz * z.axis[2]) / n;
                if c >= cos_half {
                    plus += 1;
                } else if -c >= cos_half {
                    minus += 1;
                }
            }
            diffs[zi].push((plus - minus) as f64);
            sums[zi] += (plus + minus) as f64;
        }
    }

    let variance = |d: &[f64]| {
        let m = d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() as f64 - 1.0)
    };

    let mut per_pair = Vec::with_capacity(zones.pairs.len());
    let mut pooled: Vec<f64> = Vec::new();
    let mut pooled_sum = 0.0;
    for zi in 0..zones.pairs.len() {
        let mean_sum = sums[zi] / shots.len() as f64;
        if sums[zi] == 0.0 {
            log::warn!("zone pair {zi} saw no atoms");
            per_pair.push(ZonePairStat {
                v_nd: None,
                mean_sum: 0.0,
                empty: true,
            });
            continue;
        }
        per_pair.push(ZonePairStat {
            v_nd: Some(variance(&diffs[zi]) / mean_sum),
            mean_sum,
            empty: false,
        });
        pooled.extend_from_slice(&diffs[zi]);
        pooled_sum += sums[zi];
    }
    if pooled.is_empty() {
        return Err(Error::InvalidInput("every zone pair is empty".into()));
    }
    let mean_sum = pooled_sum / pooled.len() as f64;
    Ok(NumberDifference {
        v_nd: variance(&pooled) / mean_sum,
        mean_sum,
        n_samples: pooled.len(),
        per_pair,
    })
}
