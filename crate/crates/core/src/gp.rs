//! Mean-field ground state of the anisotropic trap by imaginary-time
//! split-step propagation, and the source momentum widths, chemical
//! potential, sound speed, and mean-field broadening derived from it.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kinematics::PhysicalConstants;

/// Imaginary-time step as a fraction of the transverse trap period scale,
/// halved whenever a step raises the energy.
const DTAU_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Half extent of the box along each axis (m); points sit at cell
    /// centers of [-L, L).
    pub half_extents: [f64; 3],
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn steps(&self) -> [f64; 3] {
        [
            2.0 * self.half_extents[0] / self.nx as f64,
            2.0 * self.half_extents[1] / self.ny as f64,
            2.0 * self.half_extents[2] / self.nz as f64,
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        let d = self.steps();
        d[0] * d[1] * d[2]
    }

    /// Cell-center coordinate along one axis.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let n = self.dims()[axis] as f64;
        let l = self.half_extents[axis];
        -l + (i as f64 + 0.5) * (2.0 * l / n)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrapConfig {
    /// Axial trap frequency (rad/s).
    pub omega_x: f64,
    /// Transverse trap frequency (rad/s), same along y and z.
    pub omega_perp: f64,
    pub atom_number: f64,
    /// s-wave scattering length (m); a literature value, not measured here.
    pub scattering_length: f64,
    pub grid: GridSpec,
}

impl Default for TrapConfig {
    fn default() -> Self {
        Self::new(
            2.0 * std::f64::consts::PI * 47.0,
            2.0 * std::f64::consts::PI * 1150.0,
            3.0e4,
            7.5e-9,
            [384, 64, 64],
            &PhysicalConstants::default(),
        )
        .expect("default trap config is valid")
    }
}

impl TrapConfig {
    /// Build a config with box extents derived from the trap itself: large
    /// enough that both the interacting cloud and the ideal-gas ground
    /// state decay to negligible density well inside the boundary.
    pub fn new(
        omega_x: f64,
        omega_perp: f64,
        atom_number: f64,
        scattering_length: f64,
        sizes: [usize; 3],
        consts: &PhysicalConstants,
    ) -> Result<Self> {
        let mut cfg = Self {
            omega_x,
            omega_perp,
            atom_number,
            scattering_length,
            grid: GridSpec {
                nx: sizes[0],
                ny: sizes[1],
                nz: sizes[2],
                half_extents: [1.0; 3],
            },
        };
        if !(omega_x > 0.0 && omega_perp > 0.0) {
            return Err(Error::InvalidInput(
                "trap frequencies must be positive".into(),
            ));
        }
        let r_tf = cfg.tf_radii(consts);
        let a_ho = cfg.oscillator_lengths(consts);
        for i in 0..3 {
            cfg.grid.half_extents[i] = f64::max(3.2 * r_tf[i], 8.0 * a_ho[i]);
        }
        cfg.validate(consts)?;
        Ok(cfg)
    }

    pub fn validate(&self, consts: &PhysicalConstants) -> Result<()> {
        if !(self.omega_x > 0.0 && self.omega_perp > 0.0) {
            return Err(Error::InvalidInput(
                "trap frequencies must be positive".into(),
            ));
        }
        if !(self.atom_number >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "atom number must be at least 1, got {}",
                self.atom_number
            )));
        }
        if self.scattering_length < 0.0 {
            return Err(Error::InvalidInput(
                "scattering length must be nonnegative".into(),
            ));
        }
        let [nx, ny, nz] = self.grid.dims();
        if nx < 8 || ny < 8 || nz < 8 {
            return Err(Error::InvalidInput(format!(
                "grid sizes ({nx}, {ny}, {nz}) too small; need at least 8 per axis"
            )));
        }
        let r_tf = self.tf_radii(consts);
        for i in 0..3 {
            let l = self.grid.half_extents[i];
            if !(l > 0.0) {
                return Err(Error::InvalidInput("grid extents must be positive".into()));
            }
            // Full extent 2L must cover six Thomas-Fermi radii.
            if 2.0 * l < 6.0 * r_tf[i] {
                return Err(Error::InvalidInput(format!(
                    "axis {i} extent {} below 6 Thomas-Fermi radii {}",
                    2.0 * l,
                    6.0 * r_tf[i]
                )));
            }
        }
        Ok(())
    }

    /// Contact interaction strength 4 pi hbar^2 a / m.
    pub fn interaction_strength(&self, consts: &PhysicalConstants) -> f64 {
        4.0 * std::f64::consts::PI * consts.hbar * consts.hbar * self.scattering_length
            / consts.m
    }

    fn trap_frequencies(&self) -> [f64; 3] {
        [self.omega_x, self.omega_perp, self.omega_perp]
    }

    pub fn oscillator_lengths(&self, consts: &PhysicalConstants) -> [f64; 3] {
        let w = self.trap_frequencies();
        [
            (consts.hbar / (consts.m * w[0])).sqrt(),
            (consts.hbar / (consts.m * w[1])).sqrt(),
            (consts.hbar / (consts.m * w[2])).sqrt(),
        ]
    }

    /// Thomas-Fermi chemical potential estimate; zero for an ideal gas.
    pub fn mu_tf(&self, consts: &PhysicalConstants) -> f64 {
        if self.scattering_length == 0.0 {
            return 0.0;
        }
        let w_bar = (self.omega_x * self.omega_perp * self.omega_perp).powf(1.0 / 3.0);
        let a_bar = (consts.hbar / (consts.m * w_bar)).sqrt();
        0.5 * consts.hbar
            * w_bar
            * (15.0 * self.atom_number * self.scattering_length / a_bar).powf(0.4)
    }

    pub fn tf_radii(&self, consts: &PhysicalConstants) -> [f64; 3] {
        let mu = self.mu_tf(consts);
        let w = self.trap_frequencies();
        let mut r = [0.0; 3];
        for i in 0..3 {
            r[i] = (2.0 * mu / consts.m).sqrt() / w[i];
        }
        r
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GPSolution {
    /// Real ground-state amplitudes on the grid, row-major (x, y, z),
    /// normalized so that sum |psi|^2 dV = atom_number.
    pub psi: Vec<f64>,
    pub grid: GridSpec,
    pub atom_number: f64,
    /// Chemical potential <T + V + g|psi|^2> per atom (J).
    pub mu: f64,
    /// Total energy per atom (J).
    pub energy: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub interaction: f64,
    /// Relative energy change of the last accepted step.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Energies of accepted steps (J per atom).
    pub energy_history: Vec<f64>,
}

struct Workspace {
    dims: [usize; 3],
    dv: f64,
    v_trap: Vec<f64>,
    /// Squared wavenumbers per axis.
    k2: [Vec<f64>; 3],
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
    line: Vec<Complex64>,
    scratch: Vec<Complex64>,
    fft_buf: Vec<Complex64>,
}

fn axis_wavenumbers(n: usize, d: f64) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let f = if j <= n / 2 {
                j as f64
            } else {
                j as f64 - n as f64
            };
            std::f64::consts::TAU * f / (n as f64 * d)
        })
        .collect()
}

impl Workspace {
    fn new(cfg: &TrapConfig, consts: &PhysicalConstants) -> Self {
        let grid = &cfg.grid;
        let dims = grid.dims();
        let d = grid.steps();
        let w = cfg.trap_frequencies();
        let mut v_trap = Vec::with_capacity(grid.len());
        for ix in 0..dims[0] {
            let x = grid.coord(0, ix);
            let vx = 0.5 * consts.m * w[0] * w[0] * x * x;
            for iy in 0..dims[1] {
                let y = grid.coord(1, iy);
                let vy = 0.5 * consts.m * w[1] * w[1] * y * y;
                for iz in 0..dims[2] {
                    let z = grid.coord(2, iz);
                    v_trap.push(vx + vy + 0.5 * consts.m * w[2] * w[2] * z * z);
                }
            }
        }
        let k2 = [
            axis_wavenumbers(dims[0], d[0]).iter().map(|k| k * k).collect(),
            axis_wavenumbers(dims[1], d[1]).iter().map(|k| k * k).collect(),
            axis_wavenumbers(dims[2], d[2]).iter().map(|k| k * k).collect(),
        ];
        let mut planner = FftPlanner::new();
        let fwd = [
            planner.plan_fft_forward(dims[0]),
            planner.plan_fft_forward(dims[1]),
            planner.plan_fft_forward(dims[2]),
        ];
        let inv = [
            planner.plan_fft_inverse(dims[0]),
            planner.plan_fft_inverse(dims[1]),
            planner.plan_fft_inverse(dims[2]),
        ];
        let max_n = dims[0].max(dims[1]).max(dims[2]);
        let max_scratch = fwd
            .iter()
            .chain(inv.iter())
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Workspace {
            dims,
            dv: grid.cell_volume(),
            v_trap,
            k2,
            fwd,
            inv,
            line: vec![Complex64::default(); max_n],
            scratch: vec![Complex64::default(); max_scratch],
            fft_buf: vec![Complex64::default(); grid.len()],
        }
    }

    /// In-place 3D FFT by axis passes; the z axis is contiguous, the other
    /// two gather and scatter lines through a scratch buffer.
    fn fft3d(&mut self, buf: &mut [Complex64], inverse: bool) {
        let [nx, ny, nz] = self.dims;
        let plans = if inverse { &self.inv } else { &self.fwd };

        for chunk in buf.chunks_exact_mut(nz) {
            plans[2].process_with_scratch(chunk, &mut self.scratch);
        }
        for ix in 0..nx {
            for iz in 0..nz {
                let base = ix * ny * nz + iz;
                for iy in 0..ny {
                    self.line[iy] = buf[base + iy * nz];
                }
                plans[1].process_with_scratch(&mut self.line[..ny], &mut self.scratch);
                for iy in 0..ny {
                    buf[base + iy * nz] = self.line[iy];
                }
            }
        }
        let plane = ny * nz;
        for iy in 0..ny {
            for iz in 0..nz {
                let base = iy * nz + iz;
                for ix in 0..nx {
                    self.line[ix] = buf[base + ix * plane];
                }
                plans[0].process_with_scratch(&mut self.line[..nx], &mut self.scratch);
                for ix in 0..nx {
                    buf[base + ix * plane] = self.line[ix];
                }
            }
        }
        if inverse {
            let s = 1.0 / (nx * ny * nz) as f64;
            for c in buf.iter_mut() {
                *c *= s;
            }
        }
    }

    /// Total kinetic, trap, and interaction energies (J) of a state
    /// normalized to `n0` atoms.
    fn energy_parts(
        &mut self,
        psi: &[Complex64],
        g: f64,
        n0: f64,
        consts: &PhysicalConstants,
    ) -> (f64, f64, f64) {
        let [nx, ny, nz] = self.dims;
        self.fft_buf.copy_from_slice(psi);
        let mut buf = std::mem::take(&mut self.fft_buf);
        self.fft3d(&mut buf, false);
        let mut t_sum = 0.0;
        let mut w_sum = 0.0;
        let mut idx = 0;
        for ix in 0..nx {
            let kx2 = self.k2[0][ix];
            for iy in 0..ny {
                let kxy2 = kx2 + self.k2[1][iy];
                for iz in 0..nz {
                    let w = buf[idx].norm_sqr();
                    t_sum += (kxy2 + self.k2[2][iz]) * w;
                    w_sum += w;
                    idx += 1;
                }
            }
        }
        self.fft_buf = buf;
        let kinetic = consts.hbar * consts.hbar / (2.0 * consts.m) * t_sum / w_sum * n0;
        let mut pot = 0.0;
        let mut int = 0.0;
        for (c, v) in psi.iter().zip(&self.v_trap) {
            let n = c.norm_sqr();
            pot += v * n;
            int += n * n;
        }
        (kinetic, pot * self.dv, 0.5 * g * int * self.dv)
    }
}

fn renormalize(psi: &mut [Complex64], n0: f64, dv: f64) {
    let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * dv;
    let s = (n0 / norm).sqrt();
    for c in psi.iter_mut() {
        *c *= s;
    }
}

/// One split-step of width `dtau`: half potential, full kinetic, half
/// potential, then renormalization. The potential half-steps use the
/// instantaneous density and are shifted by the running energy per atom to
/// keep the exponents in floating-point range.
fn split_step(
    psi: &mut Vec<Complex64>,
    ws: &mut Workspace,
    kin_factors: &[Vec<f64>; 3],
    g: f64,
    n0: f64,
    dtau: f64,
    e_ref: f64,
    hbar: f64,
) {
    let half = dtau / (2.0 * hbar);
    for (c, v) in psi.iter_mut().zip(&ws.v_trap) {
        let arg = -(v + g * c.norm_sqr() - e_ref) * half;
        *c *= arg.exp();
    }
    ws.fft3d(psi, false);
    let [nx, ny, nz] = ws.dims;
    let mut idx = 0;
    for ix in 0..nx {
        let fx = kin_factors[0][ix];
        for iy in 0..ny {
            let fxy = fx * kin_factors[1][iy];
            for iz in 0..nz {
                psi[idx] *= fxy * kin_factors[2][iz];
                idx += 1;
            }
        }
    }
    ws.fft3d(psi, true);
    for (c, v) in psi.iter_mut().zip(&ws.v_trap) {
        let arg = -(v + g * c.norm_sqr() - e_ref) * half;
        *c *= arg.exp();
    }
    renormalize(psi, n0, ws.dv);
}

fn kinetic_factors(ws: &Workspace, dtau: f64, consts: &PhysicalConstants) -> [Vec<f64>; 3] {
    let scale = consts.hbar * dtau / (2.0 * consts.m);
    [
        ws.k2[0].iter().map(|k2| (-scale * k2).exp()).collect(),
        ws.k2[1].iter().map(|k2| (-scale * k2).exp()).collect(),
        ws.k2[2].iter().map(|k2| (-scale * k2).exp()).collect(),
    ]
}

/// Initial state: Thomas-Fermi profile when interactions dominate, the
/// oscillator Gaussian otherwise.
fn initial_state(cfg: &TrapConfig, ws: &Workspace, consts: &PhysicalConstants) -> Vec<Complex64> {
    let mu_tf = cfg.mu_tf(consts);
    let g = cfg.interaction_strength(consts);
    let grid = &cfg.grid;
    let [nx, ny, nz] = grid.dims();
    let mut psi = Vec::with_capacity(grid.len());
    if g > 0.0 && mu_tf > consts.hbar * cfg.omega_perp {
        for v in &ws.v_trap {
            psi.push(Complex64::new((f64::max(mu_tf - v, 0.0) / g).sqrt(), 0.0));
        }
    } else {
        let a = cfg.oscillator_lengths(consts);
        for ix in 0..nx {
            let x = grid.coord(0, ix) / a[0];
            for iy in 0..ny {
                let y = grid.coord(1, iy) / a[1];
                for iz in 0..nz {
                    let z = grid.coord(2, iz) / a[2];
                    psi.push(Complex64::new(
                        (-0.5 * (x * x + y * y + z * z)).exp(),
                        0.0,
                    ));
                }
            }
        }
    }
    psi
}

fn boundary_density_ratio(psi: &[Complex64], dims: [usize; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let peak = psi.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    if peak == 0.0 {
        return f64::INFINITY;
    }
    let mut edge: f64 = 0.0;
    let mut idx = 0;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                if ix == 0 || ix == nx - 1 || iy == 0 || iy == ny - 1 || iz == 0 || iz == nz - 1
                {
                    edge = edge.max(psi[idx].norm_sqr());
                }
                idx += 1;
            }
        }
    }
    edge / peak
}

/// Imaginary-time relaxation to the trap ground state. `tol` is the
/// relative energy change per accepted step at which the state counts as
/// converged; the step width halves whenever a step would raise the energy.
pub fn solve_ground_state(
    cfg: &TrapConfig,
    consts: &PhysicalConstants,
    tol: f64,
    max_iters: usize,
) -> Result<GPSolution> {
    cfg.validate(consts)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    if max_iters == 0 {
        return Err(Error::InvalidInput("need at least one iteration".into()));
    }
    let g = cfg.interaction_strength(consts);
    let n0 = cfg.atom_number;
    let mut ws = Workspace::new(cfg, consts);
    let mut psi = initial_state(cfg, &ws, consts);
    renormalize(&mut psi, n0, ws.dv);

    let mut dtau = DTAU_FRACTION / cfg.omega_perp;
    let dtau_floor = dtau * 2f64.powi(-24);
    let mut factors = kinetic_factors(&ws, dtau, consts);

    let (kin, pot, int) = ws.energy_parts(&psi, g, n0, consts);
    let mut e_prev = (kin + pot + int) / n0;
    let mut history = vec![e_prev];
    let mut residual = f64::INFINITY;
    let mut accepted = 0;
    let mut converged = false;
    let mut trial = psi.clone();

    for _ in 0..max_iters {
        trial.copy_from_slice(&psi);
        split_step(&mut trial, &mut ws, &factors, g, n0, dtau, e_prev, consts.hbar);
        let (kin, pot, int) = ws.energy_parts(&trial, g, n0, consts);
        let e_new = (kin + pot + int) / n0;
        if e_new > e_prev * (1.0 + 1e-12) + f64::MIN_POSITIVE {
            dtau *= 0.5;
            if dtau < dtau_floor {
                return Err(Error::NotConverged {
                    iterations: accepted,
                    residual,
                });
            }
            factors = kinetic_factors(&ws, dtau, consts);
            continue;
        }
        std::mem::swap(&mut psi, &mut trial);
        accepted += 1;
        residual = (e_prev - e_new).abs() / e_new.abs().max(f64::MIN_POSITIVE);
        e_prev = e_new;
        history.push(e_new);
        if residual < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations: accepted,
            residual,
        });
    }

    let edge = boundary_density_ratio(&psi, ws.dims);
    if edge > 1e-6 {
        return Err(Error::GridTooSmall {
            boundary: edge,
            limit: 1e-6,
        });
    }

    let (kin, pot, int) = ws.energy_parts(&psi, g, n0, consts);
    Ok(GPSolution {
        psi: psi.iter().map(|c| c.re).collect(),
        grid: cfg.grid,
        atom_number: n0,
        mu: (kin + pot + 2.0 * int) / n0,
        energy: (kin + pot + int) / n0,
        kinetic: kin / n0,
        potential: pot / n0,
        interaction: int / n0,
        residual,
        iterations: accepted,
        converged: true,
        energy_history: history,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SourceMoments {
    /// Axial momentum-space rms width (units of v_rec).
    pub v_x_rms: f64,
    /// Quadrature mean of the two transverse rms widths (units of v_rec).
    pub v_yz_rms: f64,
    /// Chemical potential (J).
    pub mu: f64,
    /// Sound speed sqrt(mu/m) (m/s).
    pub sound_speed: f64,
}

/// Momentum-space rms velocity widths of the ground state, from the
/// Fourier transform of the wavefunction.
pub fn momentum_widths(sol: &GPSolution, consts: &PhysicalConstants) -> Result<SourceMoments> {
    if !sol.converged {
        return Err(Error::InvalidInput(
            "momentum widths need a converged solution".into(),
        ));
    }
    let grid = &sol.grid;
    let [nx, ny, nz] = grid.dims();
    if sol.psi.len() != grid.len() {
        return Err(Error::InvalidInput(format!(
            "wavefunction length {} does not match grid {}",
            sol.psi.len(),
            grid.len()
        )));
    }
    let d = grid.steps();
    let ks = [
        axis_wavenumbers(nx, d[0]),
        axis_wavenumbers(ny, d[1]),
        axis_wavenumbers(nz, d[2]),
    ];
    let mut buf: Vec<Complex64> = sol.psi.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    // A throwaway workspace just for the transform: reuse the solver's
    // axis-pass FFT.
    let cfg_like = TrapConfig {
        omega_x: 1.0,
        omega_perp: 1.0,
        atom_number: sol.atom_number,
        scattering_length: 0.0,
        grid: *grid,
    };
    let mut ws = Workspace::new(&cfg_like, consts);
    ws.fft3d(&mut buf, false);

    let mut marg = [vec![0.0; nx], vec![0.0; ny], vec![0.0; nz]];
    let mut idx = 0;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let w = buf[idx].norm_sqr();
                marg[0][ix] += w;
                marg[1][iy] += w;
                marg[2][iz] += w;
                idx += 1;
            }
        }
    }
    let mut sigma_v = [0.0; 3];
    for axis in 0..3 {
        let total: f64 = marg[axis].iter().sum();
        let mean: f64 = marg[axis]
            .iter()
            .zip(&ks[axis])
            .map(|(w, k)| w * k)
            .sum::<f64>()
            / total;
        let var: f64 = marg[axis]
            .iter()
            .zip(&ks[axis])
            .map(|(w, k)| w * (k - mean) * (k - mean))
            .sum::<f64>()
            / total;
        sigma_v[axis] = consts.hbar * var.sqrt() / consts.m / consts.v_rec;
    }
    Ok(SourceMoments {
        v_x_rms: sigma_v[0],
        v_yz_rms: ((sigma_v[1] * sigma_v[1] + sigma_v[2] * sigma_v[2]) / 2.0).sqrt(),
        mu: sol.mu,
        sound_speed: (sol.mu.max(0.0) / consts.m).sqrt(),
    })
}

/// Radial velocity broadening from converting the chemical potential into
/// kinetic energy on top of the recoil: sqrt(v_rec^2 + 2 mu/m) - v_rec, in
/// units of v_rec.
pub fn mean_field_broadening(mu: f64, consts: &PhysicalConstants) -> Result<f64> {
    if mu < 0.0 {
        return Err(Error::InvalidInput(format!(
            "chemical potential must be nonnegative, got {mu}"
        )));
    }
    let v2 = consts.v_rec * consts.v_rec;
    Ok(((v2 + 2.0 * mu / consts.m).sqrt() - consts.v_rec) / consts.v_rec)
}

/// Ratio of the collision velocity 2 v_rec to the sound speed; deep in the
/// particle-like regime this is well above 1.
pub fn supersonic_check(consts: &PhysicalConstants, moments: &SourceMoments) -> Result<f64> {
    if !(moments.sound_speed > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sound speed must be positive, got {}",
            moments.sound_speed
        )));
    }
    Ok(2.0 * consts.v_rec / moments.sound_speed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn consts() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    /// Small trap for fast tests: milder anisotropy, modest grid.
    fn small_trap(scattering_length: f64, atom_number: f64, sizes: [usize; 3]) -> TrapConfig {
        TrapConfig::new(
            2.0 * std::f64::consts::PI * 200.0,
            2.0 * std::f64::consts::PI * 800.0,
            atom_number,
            scattering_length,
            sizes,
            &consts(),
        )
        .unwrap()
    }

    #[test]
    fn ideal_gas_matches_oscillator_analytics() {
        let c = consts();
        let cfg = small_trap(0.0, 1e4, [48, 48, 48]);
        let sol = solve_ground_state(&cfg, &c, 1e-11, 2000).unwrap();

        let mu_ho = 0.5 * c.hbar * (cfg.omega_x + 2.0 * cfg.omega_perp);
        assert_relative_eq!(sol.mu, mu_ho, max_relative = 1e-3);
        assert_relative_eq!(sol.energy, mu_ho, max_relative = 1e-3);

        // Virial balance of the oscillator ground state.
        assert_relative_eq!(sol.kinetic, sol.potential, max_relative = 1e-2);

        let m = momentum_widths(&sol, &c).unwrap();
        let sv = |w: f64| (c.hbar * w / (2.0 * c.m)).sqrt() / c.v_rec;
        assert_relative_eq!(m.v_x_rms, sv(cfg.omega_x), max_relative = 1e-2);
        assert_relative_eq!(m.v_yz_rms, sv(cfg.omega_perp), max_relative = 1e-2);
    }

    #[test]
    fn norm_is_conserved_and_energy_decreases() {
        let c = consts();
        let cfg = small_trap(7.5e-9, 5e3, [48, 32, 32]);
        let sol = solve_ground_state(&cfg, &c, 1e-10, 4000).unwrap();

        let norm: f64 = sol.psi.iter().map(|p| p * p).sum::<f64>() * sol.grid.cell_volume();
        assert_relative_eq!(norm, cfg.atom_number, max_relative = 1e-9);

        for w in sol.energy_history.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12),
                "energy rose from {} to {}",
                w[0],
                w[1]
            );
        }
        assert!(sol.residual < 1e-10);
        assert!(sol.converged);

        // Interactions push the chemical potential above the ideal-gas value
        // and stretch the cigar: axial momentum width narrows below radial.
        let mu_ho = 0.5 * c.hbar * (cfg.omega_x + 2.0 * cfg.omega_perp);
        assert!(sol.mu > mu_ho);
        let m = momentum_widths(&sol, &c).unwrap();
        assert!(m.v_x_rms < m.v_yz_rms);
        assert_relative_eq!(m.sound_speed, (sol.mu / c.m).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn widths_are_stable_under_grid_doubling() {
        let c = consts();
        let coarse = small_trap(7.5e-9, 5e3, [32, 24, 24]);
        let fine = small_trap(7.5e-9, 5e3, [64, 48, 48]);
        let mc = momentum_widths(&solve_ground_state(&coarse, &c, 1e-10, 4000).unwrap(), &c)
            .unwrap();
        let mf =
            momentum_widths(&solve_ground_state(&fine, &c, 1e-10, 4000).unwrap(), &c).unwrap();
        assert_relative_eq!(mc.v_x_rms, mf.v_x_rms, max_relative = 0.02);
        assert_relative_eq!(mc.v_yz_rms, mf.v_yz_rms, max_relative = 0.02);
    }

    #[test]
    fn atom_number_moves_the_widths() {
        let c = consts();
        let lo = small_trap(7.5e-9, 2.5e3, [48, 32, 32]);
        let hi = small_trap(7.5e-9, 7.5e3, [48, 32, 32]);
        let ml = momentum_widths(&solve_ground_state(&lo, &c, 1e-10, 4000).unwrap(), &c).unwrap();
        let mh = momentum_widths(&solve_ground_state(&hi, &c, 1e-10, 4000).unwrap(), &c).unwrap();
        // More atoms: longer cloud, so the axial momentum width narrows.
        // The radial width sits in the crossover between zero-point and
        // interaction dominated and barely moves at this scale.
        assert!(mh.v_x_rms < ml.v_x_rms);
        let ax = (mh.v_x_rms / ml.v_x_rms - 1.0).abs();
        let rad = (mh.v_yz_rms / ml.v_yz_rms - 1.0).abs();
        assert!(ax > 0.005 && ax < 0.5, "axial change {ax}");
        assert!(rad < 0.15, "radial change {rad}");
    }

    #[test]
    fn undersized_box_is_caught() {
        let c = consts();
        // Validation passes (no Thomas-Fermi radius for an ideal gas) but
        // the Gaussian tail is still 1e-4 of the peak at the boundary.
        let mut cfg = small_trap(0.0, 1e3, [32, 32, 32]);
        let a = cfg.oscillator_lengths(&c);
        cfg.grid.half_extents = [3.0 * a[0], 3.0 * a[1], 3.0 * a[2]];
        match solve_ground_state(&cfg, &c, 1e-10, 4000) {
            Err(Error::GridTooSmall { boundary, limit }) => {
                assert!(boundary > limit);
            }
            other => panic!("expected GridTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let c = consts();
        let cfg = small_trap(7.5e-9, 5e3, [32, 24, 24]);
        match solve_ground_state(&cfg, &c, 1e-14, 3) {
            Err(Error::NotConverged {
                iterations,
                residual,
            }) => {
                assert!(iterations <= 3);
                assert!(residual.is_finite() || residual == f64::INFINITY);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let c = consts();
        assert!(TrapConfig::new(0.0, 1.0, 1e3, 0.0, [32, 32, 32], &c).is_err());
        assert!(TrapConfig::new(100.0, 400.0, 0.5, 0.0, [32, 32, 32], &c).is_err());
        assert!(TrapConfig::new(100.0, 400.0, 1e3, -1e-9, [32, 32, 32], &c).is_err());
        assert!(TrapConfig::new(100.0, 400.0, 1e3, 0.0, [4, 32, 32], &c).is_err());

        let mut cfg = small_trap(7.5e-9, 5e3, [32, 32, 32]);
        cfg.grid.half_extents[0] = cfg.tf_radii(&c)[0];
        assert!(cfg.validate(&c).is_err());
    }

    #[test]
    fn unconverged_solution_is_rejected_for_widths() {
        let c = consts();
        let cfg = small_trap(0.0, 1e3, [16, 16, 16]);
        let sol = GPSolution {
            psi: vec![0.0; cfg.grid.len()],
            grid: cfg.grid,
            atom_number: 1e3,
            mu: 0.0,
            energy: 0.0,
            kinetic: 0.0,
            potential: 0.0,
            interaction: 0.0,
            residual: 1.0,
            iterations: 0,
            converged: false,
            energy_history: vec![],
        };
        assert!(momentum_widths(&sol, &c).is_err());
    }

    #[test]
    fn broadening_closed_form() {
        let c = consts();
        assert_eq!(mean_field_broadening(0.0, &c).unwrap(), 0.0);

        let mu = 0.0305 * c.v_rec * c.v_rec * c.m;
        let dv = mean_field_broadening(mu, &c).unwrap();
        assert_relative_eq!(dv, (1.061f64).sqrt() - 1.0, max_relative = 1e-12);
        assert!((dv - 0.030).abs() < 1e-3);

        let dv2 = mean_field_broadening(2.0 * mu, &c).unwrap();
        assert!(dv2 > dv && dv2 < 2.0 * dv);

        assert!(mean_field_broadening(-1e-30, &c).is_err());
    }



    #[test]
    fn supersonic_ratio_examples() {
        let c = consts();
        let m = SourceMoments {
            v_x_rms: 0.0044,
            v_yz_rms: 0.091,
            mu: 0.0,
            sound_speed: c.v_rec / 4.0,
        };
        assert_relative_eq!(supersonic_check(&c, &m).unwrap(), 8.0, max_relative = 1e-12);
        let silent = SourceMoments {
            sound_speed: 0.0,
            ..m
        };
        assert!(supersonic_check(&c, &silent).is_err());
    }
}
