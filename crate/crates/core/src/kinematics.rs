//! Physical constants and the ballistic map between velocity space and detector coordinates.
//!
//! Velocities are expressed in units of the recoil velocity, in the frame
//! moving with the collision center of mass. The detector lies a fixed drop
//! height below the source; gravity points along -z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wavelength of the transition delivering the recoil kick (m).
const RECOIL_WAVELENGTH: f64 = 1083.3e-9;

/// Atom and lab constants. Construct via [`PhysicalConstants::new`] so that
/// `v_rec = hbar * k / m` holds exactly as stored.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PhysicalConstants {
    /// Atom mass (kg).
    pub m: f64,
    /// Gravitational acceleration (m/s^2).
    pub g: f64,
    /// Reduced Planck constant (J s).
    pub hbar: f64,
    /// Photon wavevector of the recoil transition (1/m).
    pub k: f64,
    /// Recoil velocity hbar*k/m (m/s).
    pub v_rec: f64,
}

impl PhysicalConstants {
    pub fn new(m: f64, g: f64, hbar: f64, k: f64) -> Self {
        Self {
            m,
            g,
            hbar,
            k,
            v_rec: hbar * k / m,
        }
    }
}

impl Default for PhysicalConstants {
    /// Metastable helium-4 dropped in standard gravity.
    fn default() -> Self {
        Self::new(
            6.6464731e-27,
            9.81,
            1.054571817e-34,
            2.0 * std::f64::consts::PI / RECOIL_WAVELENGTH,
        )
    }
}

/// Source-to-detector geometry and the center-of-mass velocity of the
/// colliding clouds in the lab frame.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DetectorGeometry {
    /// Vertical distance from source to detector plane (m).
    pub drop_height: f64,
    /// Radius of the sensitive detector area (m).
    pub detector_radius: f64,
    /// Center-of-mass velocity of the scattered shell in the lab frame (m/s).
    pub com_velocity: [f64; 3],
}

impl DetectorGeometry {
    /// Default geometry: 46.5 cm drop, 4 cm radius, center of mass recoiling
    /// straight up at one recoil velocity.
    pub fn default_for(consts: &PhysicalConstants) -> Self {
        Self {
            drop_height: 0.465,
            detector_radius: 0.04,
            com_velocity: [0.0, 0.0, consts.v_rec],
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.drop_height > 0.0) || !self.drop_height.is_finite() {
            return Err(Error::InvalidInput(format!(
                "drop_height must be positive, got {}",
                self.drop_height
            )));
        }
        if !(self.detector_radius > 0.0) || !self.detector_radius.is_finite() {
            return Err(Error::InvalidInput(format!(
                "detector_radius must be positive, got {}",
                self.detector_radius
            )));
        }
        if self.com_velocity.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite com_velocity".into()));
        }
        Ok(())
    }
}

/// Velocity in units of `v_rec`, in the collision center-of-mass frame.
/// x is the collision axis, z is vertical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityVector {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl VelocityVector {
    pub fn new(vx: f64, vy: f64, vz: f64) -> Self {
        Self { vx, vy, vz }
    }

    pub fn norm(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy + self.vz * self.vz).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.vx * other.vx + self.vy * other.vy + self.vz * other.vz
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.vx, self.vy, self.vz]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for VelocityVector {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.vx + o.vx, self.vy + o.vy, self.vz + o.vz)
    }
}

impl std::ops::Sub for VelocityVector {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.vx - o.vx, self.vy - o.vy, self.vz - o.vz)
    }
}

impl std::ops::Neg for VelocityVector {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.vx, -self.vy, -self.vz)
    }
}

impl std::ops::Mul<f64> for VelocityVector {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.vx * s, self.vy * s, self.vz * s)
    }
}

/// One reconstructed atom hit on the detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub shot_id: u32,
    /// Arrival time after release (s).
    pub t: f64,
    /// Detector-plane position (m).
    pub x: f64,
    pub y: f64,
}

/// Positive root of `H = -v_z t + g t^2 / 2` for a launch velocity `v_z`
/// (positive up). Returns an error when no positive root exists.
fn fall_time(h: f64, v_z: f64, g: f64) -> Result<f64> {
    if !(g > 0.0) {
        return Err(Error::NoArrival(format!("non-positive gravity {g}")));
    }
    let disc = v_z * v_z + 2.0 * g * h;
    if disc < 0.0 {
        return Err(Error::NoArrival(format!(
            "no real arrival time for v_z={v_z}, H={h}"
        )));
    }
    let t = (v_z + disc.sqrt()) / g;
    if t <= 0.0 && h > 0.0 {
        return Err(Error::NoArrival(format!(
            "no positive arrival time for v_z={v_z}, H={h}"
        )));
    }
    Ok(t)
}

/// Arrival time of the center of mass of the scattered shell.
pub fn com_arrival_time(geom: &DetectorGeometry, _consts: &PhysicalConstants) -> Result<f64> {
    geom.validate()?;
    fall_time(geom.drop_height, geom.com_velocity[2], _consts.g)
}

/// Map a center-of-mass-frame velocity to its detector hit. The source is
/// treated as a point: the hit position encodes the velocity alone.
pub fn forward_tof(
    v: &VelocityVector,
    geom: &DetectorGeometry,
    consts: &PhysicalConstants,
) -> Result<DetectionEvent> {
    geom.validate()?;
    let ux = v.vx * consts.v_rec + geom.com_velocity[0];
    let uy = v.vy * consts.v_rec + geom.com_velocity[1];
    let uz = v.vz * consts.v_rec + geom.com_velocity[2];
    let t = fall_time(geom.drop_height, uz, consts.g)?;
    Ok(DetectionEvent {
        shot_id: 0,
        t,
        x: ux * t,
        y: uy * t,
    })
}

/// Reconstruct the center-of-mass-frame velocity from a detector hit.
pub fn invert_tof(
    e: &DetectionEvent,
    geom: &DetectorGeometry,
    consts: &PhysicalConstants,
) -> Result<VelocityVector> {
    geom.validate()?;
    if !(e.t > 0.0) {
        return Err(Error::InvalidInput(format!(
            "arrival time must be positive, got {}",
            e.t
        )));
    }
    let uz = (consts.g * e.t * e.t / 2.0 - geom.drop_height) / e.t;
    Ok(VelocityVector::new(
        (e.x / e.t - geom.com_velocity[0]) / consts.v_rec,
        (e.y / e.t - geom.com_velocity[1]) / consts.v_rec,
        (uz - geom.com_velocity[2]) / consts.v_rec,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn recoil_velocity_is_stored_consistently() {
        let c = PhysicalConstants::default();
        assert_eq!(c.v_rec, c.hbar * c.k / c.m);
        assert_relative_eq!(c.v_rec, 9.2e-2, max_relative = 5e-3);
    }

    #[test]
    fn com_arrival_time_free_fall() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry {
            com_velocity: [0.0, 0.0, 0.0],
            ..DetectorGeometry::default_for(&c)
        };
        let t = com_arrival_time(&geom, &c).unwrap();
        assert_relative_eq!(t, 0.3079, max_relative = 1e-3);
        assert_relative_eq!(t, (2.0 * 0.465 / 9.81_f64).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn com_arrival_time_with_upward_recoil() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry::default_for(&c);
        let t = com_arrival_time(&geom, &c).unwrap();
        assert_relative_eq!(t, 0.3175, max_relative = 1e-3);
        assert!((0.31..=0.33).contains(&t));
    }

    #[test]
    fn com_arrival_time_vanishes_with_drop_height() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry {
            drop_height: 1e-12,
            detector_radius: 0.04,
            com_velocity: [0.0, 0.0, 0.0],
        };
        let t = com_arrival_time(&geom, &c).unwrap();
        assert!(t < 1e-5, "t = {t}");
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry {
            drop_height: -1.0,
            detector_radius: 0.04,
            com_velocity: [0.0, 0.0, 0.0],
        };
        assert!(com_arrival_time(&geom, &c).is_err());
    }

    #[test]
    fn forward_tof_at_rest_lands_on_axis_at_com_time() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry::default_for(&c);
        let t0 = com_arrival_time(&geom, &c).unwrap();
        let e = forward_tof(&VelocityVector::new(0.0, 0.0, 0.0), &geom, &c).unwrap();
        assert_eq!(e.t, t0);
        assert_eq!(e.x, 0.0);
        assert_eq!(e.y, 0.0);
    }

    #[test]
    fn forward_tof_unit_velocity_offset() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry::default_for(&c);
        let t0 = com_arrival_time(&geom, &c).unwrap();
        let e = forward_tof(&VelocityVector::new(1.0, 0.0, 0.0), &geom, &c).unwrap();
        assert_relative_eq!(e.x, c.v_rec * t0, max_relative = 1e-12);
        assert_relative_eq!(e.x, 0.0292, max_relative = 1e-3);
        assert_eq!(e.t, t0);
    }

    #[test]
    fn invert_tof_recovers_axis_examples() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry::default_for(&c);
        let t0 = com_arrival_time(&geom, &c).unwrap();

        let v = invert_tof(
            &DetectionEvent {
                shot_id: 0,
                t: t0,
                x: 0.0,
                y: 0.0,
            },
            &geom,
            &c,
        )
        .unwrap();
        assert_abs_diff_eq!(v.vx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.vy, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.vz, 0.0, epsilon = 1e-12);

        let v = invert_tof(
            &DetectionEvent {
                shot_id: 0,
                t: t0,
                x: 0.0292,
                y: 0.0,
            },
            &geom,
            &c,
        )
        .unwrap();
        assert_relative_eq!(v.vx, 1.0, max_relative = 1e-3);
    }

    // Very late hits reconstruct to a large upward launch velocity; the map
    // stays finite and error-free there.
    #[test]
    fn invert_tof_late_arrival_is_finite() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry::default_for(&c);
        let t0 = com_arrival_time(&geom, &c).unwrap();
        let v = invert_tof(
            &DetectionEvent {
                shot_id: 0,
                t: 2.0 * t0,
                x: 0.0,
                y: 0.0,
            },
            &geom,
            &c,
        )
        .unwrap();
        assert!(v.vz.is_finite());
        assert!(v.vz.abs() > 20.0, "vz = {}", v.vz);
    }

    #[test]
    fn invert_tof_rejects_nonpositive_time() {
        let c = PhysicalConstants::default();
        let geom = DetectorGeometry::default_for(&c);
        let e = DetectionEvent {
            shot_id: 0,
            t: 0.0,
            x: 0.0,
            y: 0.0,
        };
        assert!(invert_tof(&e, &geom, &c).is_err());
    }

    /// d(event)/d(v) of the forward map, from the closed form of the root.
    fn forward_jacobian(
        v: &VelocityVector,
        geom: &DetectorGeometry,
        consts: &PhysicalConstants,
    ) -> [[f64; 3]; 3] {
        let ux = v.vx * consts.v_rec + geom.com_velocity[0];
        let uy = v.vy * consts.v_rec + geom.com_velocity[1];
        let uz = v.vz * consts.v_rec + geom.com_velocity[2];
        let s = (uz * uz + 2.0 * consts.g * geom.drop_height).sqrt();
        let t = (uz + s) / consts.g;
        let dt_duz = t / s;
        let w = consts.v_rec;
        // rows: (t, x, y); columns: (vx, vy, vz)
        [
            [0.0, 0.0, w * dt_duz],
            [w * t, 0.0, w * ux * dt_duz],
            [0.0, w * t, w * uy * dt_duz],
        ]
    }

    proptest! {
        // Round trip over the full aperture-size velocity range.
        #[test]
        fn roundtrip_is_identity(
            vx in -1.5f64..1.5,
            vy in -1.5f64..1.5,
            vz in -1.5f64..1.5,
        ) {
            let c = PhysicalConstants::default();
            let geom = DetectorGeometry::default_for(&c);
            let v = VelocityVector::new(vx, vy, vz);
            let e = forward_tof(&v, &geom, &c).unwrap();
            let back = invert_tof(&e, &geom, &c).unwrap();
            let scale = v.norm().max(1.0);
            prop_assert!((back - v).norm() <= 1e-12 * scale);
        }

        // The analytic response of the forward map matches central finite
        // differences component by component.
        #[test]
        fn forward_map_matches_finite_differences(
            vx in -1.2f64..1.2,
            vy in -1.2f64..1.2,
            vz in -1.2f64..1.2,
        ) {
            let c = PhysicalConstants::default();
            let geom = DetectorGeometry::default_for(&c);
            let v = VelocityVector::new(vx, vy, vz);
            let jac = forward_jacobian(&v, &geom, &c);
            let h = 1e-6;
            for axis in 0..3 {
                let mut vp = v.to_array();
                let mut vm = v.to_array();
                vp[axis] += h;
                vm[axis] -= h;
                let ep = forward_tof(&VelocityVector::from_array(vp), &geom, &c).unwrap();
                let em = forward_tof(&VelocityVector::from_array(vm), &geom, &c).unwrap();
                let fd = [
                    (ep.t - em.t) / (2.0 * h),
                    (ep.x - em.x) / (2.0 * h),
                    (ep.y - em.y) / (2.0 * h),
                ];
                for row in 0..3 {
                    let a = jac[row][axis];
                    let scale = a.abs().max(1e-3);
                    prop_assert!(
                        (fd[row] - a).abs() / scale < 1e-6,
                        "row {row} axis {axis}: fd {} vs analytic {a}",
                        fd[row]
                    );
                }
            }
        }
    }
}
