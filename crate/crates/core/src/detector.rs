//! Detection chain: efficiency thinning, time-of-flight mapping, aperture,
//! exclusion zones, finite position resolution, and the event-file format.
//!
//! Blur is applied to the transverse velocity before the detector-plane
//! position is formed, so a reconstructed velocity always maps back inside
//! the aperture and outside every exclusion zone. Arrival time (and with it
//! the vertical velocity) is treated as exact.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halo::TrueShot;
use crate::kinematics::{forward_tof, invert_tof, DetectionEvent, DetectorGeometry,
    PhysicalConstants, VelocityVector};

/// Angular cap around a direction, removed from the analysis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExclusionZone {
    pub center: [f64; 3],
    /// Half-opening angle in radians.
    pub half_angle: f64,
}

impl ExclusionZone {
    pub fn new(center: [f64; 3], half_angle: f64) -> Result<Self> {
        let n = (center[0] * center[0] + center[1] * center[1] + center[2] * center[2]).sqrt();
        if !(n > 0.0) {
            return Err(Error::InvalidInput("zone center must be nonzero".into()));
        }
        if !(half_angle >= 0.0 && half_angle <= std::f64::consts::PI) {
            return Err(Error::InvalidInput(format!(
                "zone half-angle {half_angle} outside [0, pi]"
            )));
        }
        Ok(Self {
            center: [center[0] / n, center[1] / n, center[2] / n],
            half_angle,
        })
    }

    pub fn contains(&self, v: &VelocityVector) -> bool {
        let n = v.norm();
        if n == 0.0 {
            return false;
        }
        let dot = (v.vx * self.center[0] + v.vy * self.center[1] + v.vz * self.center[2]) / n;
        dot >= self.half_angle.cos()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Single-atom detection probability.
    pub efficiency: f64,
    /// RMS pair resolution in units of v_rec; each atom gets an independent
    /// transverse blur of this over sqrt(2).
    pub pair_resolution_x: f64,
    pub exclusion_zones: Vec<ExclusionZone>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::default_experiment()
    }
}

impl DetectorConfig {
    /// Experiment-scale defaults: q = 0.1, pair resolution 0.014 v_rec, and
    /// caps around the unscattered sources (+-x, 45 deg) plus two caps along
    /// +-z sized so the exclusions total exactly 40% of the sphere.
    pub fn default_experiment() -> Self {
        let cos_z = 1.6 - std::f64::consts::FRAC_1_SQRT_2;
        let zones = vec![
            ExclusionZone::new([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_4).unwrap(),
            ExclusionZone::new([-1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_4).unwrap(),
            ExclusionZone::new([0.0, 0.0, 1.0], cos_z.acos()).unwrap(),
            ExclusionZone::new([0.0, 0.0, -1.0], cos_z.acos()).unwrap(),
        ];
        Self {
            efficiency: 0.10,
            pair_resolution_x: 0.014,
            exclusion_zones: zones,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "efficiency must be in (0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.pair_resolution_x >= 0.0) {
            return Err(Error::InvalidInput(
                "pair resolution must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Reconstructed atoms of one shot plus the raw detector events they came
/// from (`events[i]` corresponds to `velocities[i]`, ordered by time).
#[derive(Clone, Debug)]
pub struct DetectedShot {
    pub shot_id: u32,
    pub velocities: Vec<VelocityVector>,
    pub events: Vec<DetectionEvent>,
    pub blurred: bool,
    pub n_true: usize,
}

impl AsRef<[VelocityVector]> for DetectedShot {
    fn as_ref(&self) -> &[VelocityVector] {
        &self.velocities
    }
}

/// Push one shot through the detection chain.
pub fn detect_shot<R: Rng + ?Sized>(
    shot: &TrueShot,
    cfg: &DetectorConfig,
    geom: &DetectorGeometry,
    consts: &PhysicalConstants,
    rng: &mut R,
) -> Result<DetectedShot> {
    cfg.validate()?;
    let sigma_blur = cfg.pair_resolution_x / std::f64::consts::SQRT_2;
    let cos_cache: Vec<f64> = cfg
        .exclusion_zones
        .iter()
        .map(|z| z.half_angle.cos())
        .collect();

    let mut kept: Vec<(DetectionEvent, VelocityVector)> = Vec::new();
    for v in &shot.atoms {
        if rng.random::<f64>() >= cfg.efficiency {
            continue;
        }
        let true_event = forward_tof(v, geom, consts)?;
        let mut vb = *v;
        if sigma_blur > 0.0 {
            vb.vx += sigma_blur * rng.sample::<f64, _>(StandardNormal);
            vb.vy += sigma_blur * rng.sample::<f64, _>(StandardNormal);
        }
        // Position from the blurred transverse velocity at the true arrival
        // time; timing is exact, so vz survives reconstruction unchanged.
        let t = true_event.t;
        let event = DetectionEvent {
            shot_id: shot.shot_id,
            t,
            x: (vb.vx * consts.v_rec + geom.com_velocity[0]) * t,
            y: (vb.vy * consts.v_rec + geom.com_velocity[1]) * t,
        };
        if event.x * event.x + event.y * event.y > geom.detector_radius * geom.detector_radius {
            continue;
        }
        let rec = invert_tof(&event, geom, consts)?;
        let n = rec.norm();
        if n > 0.0 {
            let excluded = cfg.exclusion_zones.iter().zip(&cos_cache).any(|(z, c)| {
                (rec.vx * z.center[0] + rec.vy * z.center[1] + rec.vz * z.center[2]) / n >= *c
            });
            if excluded {
                continue;
            }
        }
        kept.push((event, rec));
    }
    kept.sort_by(|a, b| a.0.t.total_cmp(&b.0.t));
    let (events, velocities) = kept.into_iter().unzip();
    Ok(DetectedShot {
        shot_id: shot.shot_id,
        velocities,
        events,
        blurred: sigma_blur > 0.0,
        n_true: shot.atoms.len(),
    })
}

/// Fraction of the sphere outside all exclusion zones, by midpoint
/// quadrature uniform in (cos theta, phi). Overlapping zones count once.
pub fn acceptance_fraction(cfg: &DetectorConfig) -> f64 {
    const NC: usize = 1024;
    const NP: usize = 2048;
    let cos_cache: Vec<(f64, [f64; 3])> = cfg
        .exclusion_zones
        .iter()
        .map(|z| (z.half_angle.cos(), z.center))
        .collect();
    let mut accepted = 0u64;
    for i in 0..NC {
        let c = -1.0 + 2.0 * (i as f64 + 0.5) / NC as f64;
        let s = (1.0 - c * c).sqrt();
        for j in 0..NP {
            let phi = std::f64::consts::TAU * (j as f64 + 0.5) / NP as f64;
            let p = [s * phi.cos(), s * phi.sin(), c];
            let excluded = cos_cache
                .iter()
                .any(|(cz, z)| p[0] * z[0] + p[1] * z[1] + p[2] * z[2] >= *cz);
            if !excluded {
                accepted += 1;
            }
        }
    }
    accepted as f64 / (NC * NP) as f64
}

const EVENT_HEADER: &str = "shot_id,t_s,x_m,y_m";

/// Write events as CSV (`shot_id,t_s,x_m,y_m`), one row per atom, in the
/// given order.
pub fn write_events(events: &[DetectionEvent], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{EVENT_HEADER}")?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.shot_id, e.t, e.x, e.y)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an event file written by [`write_events`]. Empty files yield an
/// empty stream; malformed rows and nonpositive times are rejected with
/// their line number; descending shot ids only warn.
pub fn read_events(path: &Path) -> Result<Vec<DetectionEvent>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut header_seen = false;
    let mut warned_order = false;
    let bad = |line: u64, message: String| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno as u64 + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if !header_seen {
            if line != EVENT_HEADER {
                return Err(bad(lineno, format!("expected header {EVENT_HEADER:?}")));
            }
            header_seen = true;
            continue;
        }
        let mut parts = line.split(',');
        let mut next = |name: &str| -> Result<&str> {
            parts
                .next()
                .ok_or_else(|| bad(lineno, format!("missing field {name}")))
        };
        let shot_id: u32 = next("shot_id")?
            .parse()
            .map_err(|e| bad(lineno, format!("bad shot_id: {e}")))?;
        let t: f64 = next("t_s")?
            .parse()
            .map_err(|e| bad(lineno, format!("bad t_s: {e}")))?;
        let x: f64 = next("x_m")?
            .parse()
            .map_err(|e| bad(lineno, format!("bad x_m: {e}")))?;
        let y: f64 = next("y_m")?
            .parse()
            .map_err(|e| bad(lineno, format!("bad y_m: {e}")))?;
        if parts.next().is_some() {
            return Err(bad(lineno, "too many fields".into()));
        }
        if !(t > 0.0) {
            return Err(bad(lineno, format!("nonpositive arrival time {t}")));
        }
        if let Some(prev) = events.last() {
            let prev: &DetectionEvent = prev;
            if shot_id < prev.shot_id && !warned_order {
                log::warn!("event file {} has non-monotone shot ids", path.display());
                warned_order = true;
            }
        }
        events.push(DetectionEvent { shot_id, t, x, y });
    }
    Ok(events)
}

/// Group a flat event stream by shot and reconstruct velocities. Shots come
/// back ordered by id; the blur provenance of stored events is unknown and
/// reported as true.
pub fn reconstruct_shots(
    events: &[DetectionEvent],
    geom: &DetectorGeometry,
    consts: &PhysicalConstants,
) -> Result<Vec<DetectedShot>> {
    let mut by_shot: BTreeMap<u32, Vec<DetectionEvent>> = BTreeMap::new();
    for e in events {
        by_shot.entry(e.shot_id).or_default().push(*e);
    }
    let mut shots = Vec::with_capacity(by_shot.len());
    for (shot_id, mut evs) in by_shot {
        evs.sort_by(|a, b| a.t.total_cmp(&b.t));
        let velocities = evs
            .iter()
            .map(|e| invert_tof(e, geom, consts))
            .collect::<Result<Vec<_>>>()?;
        let n = evs.len();
        shots.push(DetectedShot {
            shot_id,
            velocities,
            events: evs,
            blurred: true,
            n_true: n,
        });
    }
    Ok(shots)
}
