//! Monte Carlo source of scattered-atom velocities on a spherical shell with
//! built-in pair correlations.
//!
//! The unit sphere is tiled into antipodal cell pairs sized like one
//! transverse mode of the source. Each pair holds a thermally (geometrically)
//! distributed number of atom pairs per shot; atoms are placed back to back
//! with anisotropic Gaussian smears, which produces both the sum-variable
//! pairing and the difference-variable (chaotic mode) bunching.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::VelocityVector;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HaloConfig {
    /// Shell radius in units of v_rec.
    pub shell_radius: f64,
    /// RMS radial thickness of the shell (units v_rec); the pipeline derives
    /// it from the source transverse spread and mean-field broadening in
    /// quadrature.
    pub shell_rms_width: f64,
    /// Mode width along the collision axis (units v_rec).
    pub mode_width_x: f64,
    /// Mode width transverse to the collision axis (units v_rec).
    pub mode_width_yz: f64,
    /// Mean pair occupation per mode pair. Mutually exclusive with
    /// `mean_scattered`; whichever is set derives the other from the grid.
    pub mean_occupation: Option<f64>,
    /// Mean scattered atoms per shot.
    pub mean_scattered: Option<f64>,
    /// Relative shot-to-shot spread of the source strength (lognormal with
    /// unit mean). Zero disables the fluctuation.
    pub number_spread_rel: f64,
    /// Pair-production time constant in seconds; reporting only.
    pub rate_tau: f64,
    /// Shots per run; consumed by the pipeline.
    pub n_shots: u32,
}

impl Default for HaloConfig {
    fn default() -> Self {
        Self {
            shell_radius: 1.0,
            shell_rms_width: 0.0958,
            mode_width_x: 0.0044,
            mode_width_yz: 0.091,
            mean_occupation: None,
            mean_scattered: Some(1700.0),
            number_spread_rel: 0.15,
            rate_tau: 150e-6,
            n_shots: 1100,
        }
    }
}

impl HaloConfig {
    fn validate(&self) -> Result<()> {
        if !(self.shell_radius > 0.0)
            || !(self.shell_rms_width > 0.0)
            || !(self.mode_width_x > 0.0)
            || !(self.mode_width_yz > 0.0)
        {
            return Err(Error::InvalidInput(
                "halo radius and widths must be positive".into(),
            ));
        }
        if self.mean_occupation.is_some() && self.mean_scattered.is_some() {
            return Err(Error::InvalidInput(
                "set either mean_occupation or mean_scattered, not both".into(),
            ));
        }
        if self.number_spread_rel < 0.0 {
            return Err(Error::InvalidInput(
                "number_spread_rel must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Mean pair occupation per mode pair, derived from `mean_scattered`
    /// when not set directly: N = 2 * n_pairs * occupation.
    pub fn resolved_mean_occupation(&self, grid: &ModeGrid) -> Result<f64> {
        self.validate()?;
        let occ = match (self.mean_occupation, self.mean_scattered) {
            (Some(o), _) => o,
            (None, Some(n)) => n / (2.0 * grid.pairs.len() as f64),
            (None, None) => 1700.0 / (2.0 * grid.pairs.len() as f64),
        };
        if !(occ >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "mean occupation must be nonnegative, got {occ}"
            )));
        }
        Ok(occ)
    }

    /// Mean scattered atoms per shot implied by the configuration.
    pub fn resolved_mean_scattered(&self, grid: &ModeGrid) -> Result<f64> {
        Ok(self.resolved_mean_occupation(grid)? * 2.0 * grid.pairs.len() as f64)
    }
}

/// One latitude-azimuth cell on the unit sphere. The polar axis is x (the
/// collision axis); cos refers to the x component of the direction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModeCell {
    /// Upper cosine bound (closer to +x).
    pub cos_a: f64,
    /// Lower cosine bound.
    pub cos_b: f64,
    pub phi_lo: f64,
    pub phi_hi: f64,
    pub solid_angle: f64,
    /// Index of the antipodal cell.
    pub partner: u32,
}

impl ModeCell {
    pub fn contains(&self, u: &VelocityVector) -> bool {
        let n = u.norm();
        if n == 0.0 {
            return false;
        }
        let c = u.vx / n;
        if !(c > self.cos_b && c <= self.cos_a || (c == -1.0 && self.cos_b == -1.0)) {
            return false;
        }
        let mut phi = u.vz.atan2(u.vy);
        if phi < 0.0 {
            phi += std::f64::consts::TAU;
        }
        phi >= self.phi_lo && phi < self.phi_hi
    }

    /// Uniform direction within the cell (uniform in cos, uniform in phi).
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        let c = self.cos_b + rng.random::<f64>() * (self.cos_a - self.cos_b);
        let phi = self.phi_lo + rng.random::<f64>() * (self.phi_hi - self.phi_lo);
        let s = (1.0 - c * c).max(0.0).sqrt();
        [c, s * phi.cos(), s * phi.sin()]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeGrid {
    pub cells: Vec<ModeCell>,
    /// Antipodal cell pairs (i, partner(i)) with i < partner(i).
    pub pairs: Vec<(u32, u32)>,
    /// Angular widths used to build the grid (radians).
    pub angular_width_x: f64,
    pub angular_width_yz: f64,
}

impl ModeGrid {
    /// Mean pair occupation per pair, weighted by pair solid angle so the
    /// scattering stays isotropic per unit solid angle.
    pub fn pair_occupations(&self, cfg: &HaloConfig) -> Result<Vec<f64>> {
        let base = cfg.resolved_mean_occupation(self)?;
        let mean_omega: f64 = self
            .pairs
            .iter()
            .map(|&(i, _)| self.cells[i as usize].solid_angle)
            .sum::<f64>()
            / self.pairs.len() as f64;
        Ok(self
            .pairs
            .iter()
            .map(|&(i, _)| base * self.cells[i as usize].solid_angle / mean_omega)
            .collect())
    }
}

/// Band height matched to the mode's angular extent along a meridian at
/// polar angle theta from the x axis.
fn band_height(theta: f64, ax: f64, ayz: f64) -> f64 {
    let s = theta.sin();
    let c = theta.cos();
    (ax * ax * s * s + ayz * ayz * c * c).sqrt()
}

/// Tile the unit sphere with antipodal latitude-band cells sized to the
/// anisotropic mode widths (angular sizes width/r). Polar caps are single
/// cells; each band holds an even number of azimuth cells so the antipode
/// of a cell is a cell of the mirror band.
pub fn build_mode_grid(mode_widths: (f64, f64), shell_radius: f64) -> Result<ModeGrid> {
    let (wx, wyz) = mode_widths;
    if !(wx > 0.0 && wyz > 0.0 && shell_radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "mode widths and radius must be positive, got ({wx}, {wyz}) / {shell_radius}"
        )));
    }
    let ax = wx / shell_radius;
    let ayz = wyz / shell_radius;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let tau = std::f64::consts::TAU;

    let cap = ayz / std::f64::consts::PI.sqrt();
    if cap >= half_pi {
        return Err(Error::InvalidInput(format!(
            "transverse mode width {wyz} too large for the sphere"
        )));
    }

    let mut cells: Vec<ModeCell> = Vec::new();
    // Polar caps as single mutually antipodal cells.
    cells.push(ModeCell {
        cos_a: 1.0,
        cos_b: cap.cos(),
        phi_lo: 0.0,
        phi_hi: tau,
        solid_angle: (1.0 - cap.cos()) * tau,
        partner: 1,
    });
    cells.push(ModeCell {
        cos_a: -cap.cos(),
        cos_b: -1.0,
        phi_lo: 0.0,
        phi_hi: tau,
        solid_angle: (1.0 - cap.cos()) * tau,
        partner: 0,
    });

    let mut theta = cap;
    while half_pi - theta > 1e-12 {
        let probe = band_height(theta, ax, ayz);
        let d = band_height((theta + 0.5 * probe).min(half_pi), ax, ayz);
        let theta_hi = (theta + d).min(half_pi);
        let theta_c = 0.5 * (theta + theta_hi);
        let k = 2 * ((std::f64::consts::PI * theta_c.sin() / ayz).round() as u32).max(1);
        let base = cells.len() as u32;
        let (cos_a, cos_b) = (theta.cos(), theta_hi.cos());
        let domega = (cos_a - cos_b) * tau / k as f64;
        for j in 0..k {
            cells.push(ModeCell {
                cos_a,
                cos_b,
                phi_lo: j as f64 * tau / k as f64,
                phi_hi: (j + 1) as f64 * tau / k as f64,
                solid_angle: domega,
                partner: base + k + (j + k / 2) % k,
            });
        }
        for j in 0..k {
            cells.push(ModeCell {
                cos_a: -cos_b,
                cos_b: -cos_a,
                phi_lo: j as f64 * tau / k as f64,
                phi_hi: (j + 1) as f64 * tau / k as f64,
                solid_angle: domega,
                partner: base + (j + k / 2) % k,
            });
        }
        theta = theta_hi;
    }

    if cells.len() < 8 {
        return Err(Error::InvalidInput(format!(
            "mode widths ({wx}, {wyz}) leave only {} cells; need at least 8",
            cells.len()
        )));
    }
    let pairs = (0..cells.len() as u32)
        .filter(|&i| i < cells[i as usize].partner)
        .map(|i| (i, cells[i as usize].partner))
        .collect();
    Ok(ModeGrid {
        cells,
        pairs,
        angular_width_x: ax,
        angular_width_yz: ayz,
    })
}

/// All scattered atoms of one shot, in COM-frame velocity units of v_rec.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueShot {
    pub shot_id: u32,
    pub atoms: Vec<VelocityVector>,
    /// Mode cell index per atom, parallel to `atoms`.
    pub modes: Vec<u32>,
}

impl AsRef<[VelocityVector]> for TrueShot {
    fn as_ref(&self) -> &[VelocityVector] {
        &self.atoms
    }
}

/// Draw one shot. Per mode pair the pair count is geometric (thermal) with
/// the configured mean times a lognormal per-shot source factor. All atoms
/// of a mode pair share one direction drawn uniformly in the + cell; each
/// pair instance shares a radial offset between its two sides (so the
/// velocity sum is blind to the shell thickness), and every atom gets an
/// independent anisotropic smear of width mode_width/sqrt(2) per axis.
pub fn sample_shot<R: Rng + ?Sized>(
    grid: &ModeGrid,
    cfg: &HaloConfig,
    shot_id: u32,
    rng: &mut R,
) -> Result<TrueShot> {
    let occupations = grid.pair_occupations(cfg)?;
    let r = cfg.shell_radius;
    let sig = [
        cfg.mode_width_x / std::f64::consts::SQRT_2,
        cfg.mode_width_yz / std::f64::consts::SQRT_2,
        cfg.mode_width_yz / std::f64::consts::SQRT_2,
    ];
    let var_r = cfg.shell_rms_width * cfg.shell_rms_width;

    let source_factor = if cfg.number_spread_rel > 0.0 {
        let s2 = (1.0 + cfg.number_spread_rel * cfg.number_spread_rel).ln();
        let z: f64 = rng.sample(StandardNormal);
        (-0.5 * s2 + s2.sqrt() * z).exp()
    } else {
        1.0
    };

    let mut atoms = Vec::new();
    let mut modes = Vec::new();
    for (p, &(plus, minus)) in grid.pairs.iter().enumerate() {
        let nu = occupations[p] * source_factor;
        if nu <= 0.0 {
            continue;
        }
        // Geometric occupation with mean nu via inversion of the survival
        // function; one uniform per mode pair.
        let q = nu / (1.0 + nu);
        let u: f64 = 1.0 - rng.random::<f64>();
        let n = (u.ln() / q.ln()).floor() as u64;
        if n == 0 {
            continue;
        }
        let u_hat = grid.cells[plus as usize].sample(rng);
        // Radial smear orthogonal to the per-atom smear along the mode
        // direction, so the total radial rms stays at shell_rms_width.
        let along = u_hat[0] * u_hat[0] * sig[0] * sig[0]
            + (u_hat[1] * u_hat[1] + u_hat[2] * u_hat[2]) * sig[1] * sig[1];
        let sd_r = (var_r - along).max(0.0).sqrt();
        for _ in 0..n {
            let s: f64 = sd_r * rng.sample::<f64, _>(StandardNormal);
            for (sign, cell) in [(1.0, plus), (-1.0, minus)] {
                let v = smear_onto_shell(rng, sign, r + s, &u_hat, &sig, r, cfg.shell_rms_width);
                atoms.push(v);
                modes.push(cell);
            }
        }
    }
    Ok(TrueShot {
        shot_id,
        atoms,
        modes,
    })
}

fn smear_onto_shell<R: Rng + ?Sized>(
    rng: &mut R,
    sign: f64,
    radius: f64,
    u_hat: &[f64; 3],
    sig: &[f64; 3],
    shell_r: f64,
    shell_w: f64,
) -> VelocityVector {
    // Redraw the smear in the rare case the atom leaves the 5-sigma shell
    // support; clamp radially if that keeps failing.
    for _ in 0..64 {
        let v = VelocityVector::new(
            sign * radius * u_hat[0] + sig[0] * rng.sample::<f64, _>(StandardNormal),
            sign * radius * u_hat[1] + sig[1] * rng.sample::<f64, _>(StandardNormal),
            sign * radius * u_hat[2] + sig[2] * rng.sample::<f64, _>(StandardNormal),
        );
        if (v.norm() - shell_r).abs() <= 5.0 * shell_w {
            return v;
        }
    }
    let v = VelocityVector::new(sign * radius * u_hat[0], sign * radius * u_hat[1], sign * radius * u_hat[2]);
    let n = v.norm();
    let clamped = shell_r + (n - shell_r).clamp(-5.0 * shell_w, 5.0 * shell_w);
    v * (clamped / n)
}

/// Fraction of the source scattered into the halo.
pub fn scattered_fraction(cfg: &HaloConfig, total_atoms: f64) -> Result<f64> {
    if !(total_atoms > 0.0) {
        return Err(Error::InvalidInput(format!(
            "total_atoms must be positive, got {total_atoms}"
        )));
    }
    let n = cfg
        .mean_scattered
        .ok_or_else(|| Error::InvalidInput("mean_scattered not configured".into()))?;
    Ok(n / total_atoms)
}

/// Cumulative fraction of the asymptotic pair number produced by time t.
pub fn scattered_fraction_at(cfg: &HaloConfig, t: f64) -> Result<f64> {
    if !(cfg.rate_tau > 0.0) {
        return Err(Error::InvalidInput("rate_tau must be positive".into()));
    }
    if t < 0.0 {
        return Err(Error::InvalidInput(format!("time must be nonnegative, got {t}")));
    }
    Ok(1.0 - (-t / cfg.rate_tau).exp())
}
