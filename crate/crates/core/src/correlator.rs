//! Pair histograms in the sum and difference velocity variables, their
//! normalization by accidental coincidences, and 1D projections.
//!
//! The sum variable V1+V2 exposes back-to-back pairing, the difference
//! variable V1-V2 exposes collinear bunching. Same-shot histograms carry the
//! physical correlations; cross-shot histograms built from atoms of different
//! shots give the accidental-coincidence shape used for normalization.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::VelocityVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    /// V1 + V2: back-to-back pairs accumulate near zero.
    Sum,
    /// V1 - V2: collinear pairs accumulate near zero.
    Diff,
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variable::Sum => write!(f, "sum"),
            Variable::Diff => write!(f, "diff"),
        }
    }
}

impl std::str::FromStr for Variable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Variable::Sum),
            "diff" => Ok(Variable::Diff),
            other => Err(Error::InvalidInput(format!(
                "unknown correlation variable {other:?} (expected sum or diff)"
            ))),
        }
    }
}

/// Histogramming parameters. Bins are centered on integer multiples of
/// `bin_width`; a pair enters the histogram when every component of its
/// sum/difference falls within the bin coverage `(window + bin_width/2)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub variable: Variable,
    /// Half-width of the histogram domain per axis (units v_rec).
    pub window: f64,
    /// Bin width (units v_rec).
    pub bin_width: f64,
    /// Shell radius used for gating (units v_rec).
    pub shell_radius: f64,
    /// Atoms with | |v| - shell_radius | larger than this are ignored.
    pub shell_gate: f64,
}

impl CorrelationConfig {
    pub fn new(variable: Variable, shell_radius: f64, shell_rms_width: f64) -> Self {
        Self {
            variable,
            window: 0.25,
            bin_width: 0.005,
            shell_radius,
            shell_gate: 3.0 * shell_rms_width,
        }
    }

    /// Number of bins on each side of zero.
    pub fn k_max(&self) -> Result<i32> {
        if !(self.bin_width > 0.0) || !(self.window > 0.0) {
            return Err(Error::InvalidInput(format!(
                "window and bin_width must be positive, got {} / {}",
                self.window, self.bin_width
            )));
        }
        let ratio = self.window / self.bin_width;
        let k = ratio.round();
        if (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "window {} is not an integer multiple of bin_width {}",
                self.window, self.bin_width
            )));
        }
        if k < 1.0 {
            return Err(Error::InvalidInput("window narrower than one bin".into()));
        }
        Ok(k as i32)
    }
}

/// Raw 3D pair counts on an odd grid of bins centered at zero.
#[derive(Clone, Debug)]
pub struct PairHistogram3D {
    pub variable: Variable,
    pub bin_width: f64,
    pub k_max: i32,
    /// Row-major counts, axis order (x, y, z), index offset by `k_max`.
    pub counts: Vec<u32>,
    /// Sum of all bins = pairs inside the window.
    pub total_pairs: u64,
    /// Shots contributing (including empty ones).
    pub shots: u64,
    /// Atoms that survived the shell gate.
    pub gated_atoms: u64,
}

impl PairHistogram3D {
    pub fn n_axis(&self) -> usize {
        (2 * self.k_max + 1) as usize
    }

    #[inline]
    pub fn index(&self, ix: i32, iy: i32, iz: i32) -> usize {
        let n = self.n_axis();
        let k = self.k_max;
        (((ix + k) as usize * n) + (iy + k) as usize) * n + (iz + k) as usize
    }

    pub fn get(&self, ix: i32, iy: i32, iz: i32) -> u32 {
        self.counts[self.index(ix, iy, iz)]
    }
}

/// Normalized second-order correlation map with per-bin standard errors.
#[derive(Clone, Debug)]
pub struct G2Map {
    pub variable: Variable,
    pub bin_width: f64,
    pub k_max: i32,
    pub value: Vec<f64>,
    pub err: Vec<f64>,
    /// False where the normalization bin is empty; such bins carry NaN.
    pub valid: Vec<bool>,
    pub p_same: u64,
    pub p_cross: u64,
    pub shots: u64,
}

impl G2Map {
    pub fn n_axis(&self) -> usize {
        (2 * self.k_max + 1) as usize
    }

    #[inline]
    pub fn index(&self, ix: i32, iy: i32, iz: i32) -> usize {
        let n = self.n_axis();
        let k = self.k_max;
        (((ix + k) as usize * n) + (iy + k) as usize) * n + (iz + k) as usize
    }

    /// Bin center along one axis.
    pub fn center(&self, i: i32) -> f64 {
        i as f64 * self.bin_width
    }

    /// Value at the zero bin.
    pub fn central_value(&self) -> f64 {
        self.value[self.index(0, 0, 0)]
    }
}

struct GatedAtoms {
    pos: Vec<[f64; 3]>,
    shot: Vec<u32>,
    shots_seen: u64,
}

fn gate_atoms<S: AsRef<[VelocityVector]>>(shots: &[S], cfg: &CorrelationConfig) -> GatedAtoms {
    let mut pos = Vec::new();
    let mut shot = Vec::new();
    for (s, atoms) in shots.iter().enumerate() {
        for v in atoms.as_ref() {
            if (v.norm() - cfg.shell_radius).abs() <= cfg.shell_gate {
                pos.push([v.vx, v.vy, v.vz]);
                shot.push(s as u32);
            }
        }
    }
    GatedAtoms {
        pos,
        shot,
        shots_seen: shots.len() as u64,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PairKind {
    Same,
    Cross,
    Both,
}

/// Windowed pair accumulation via a uniform cell grid keyed on the query
/// point. Cell edge equals the per-axis acceptance half-width, so scanning
/// the 27 neighbor cells of the query cell covers all candidates.
fn accumulate(
    atoms: &GatedAtoms,
    cfg: &CorrelationConfig,
    kind: PairKind,
) -> Result<(Option<PairHistogram3D>, Option<PairHistogram3D>)> {
    let k_max = cfg.k_max()?;
    let b = cfg.bin_width;
    let half = (k_max as f64 + 0.5) * b;
    let inv_cell = 1.0 / half;
    let n = (2 * k_max + 1) as usize;

    let mut cells: HashMap<(i32, i32, i32), Vec<u32>> = HashMap::new();
    let key = |p: &[f64; 3]| -> (i32, i32, i32) {
        (
            (p[0] * inv_cell).floor() as i32,
            (p[1] * inv_cell).floor() as i32,
            (p[2] * inv_cell).floor() as i32,
        )
    };
    for (i, p) in atoms.pos.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i as u32);
    }

    let mk = |variable| PairHistogram3D {
        variable,
        bin_width: b,
        k_max,
        counts: vec![0u32; n * n * n],
        total_pairs: 0,
        shots: atoms.shots_seen,
        gated_atoms: atoms.pos.len() as u64,
    };
    let mut same = (kind != PairKind::Cross).then(|| mk(cfg.variable));
    let mut cross = (kind != PairKind::Same).then(|| mk(cfg.variable));

    let sum_mode = cfg.variable == Variable::Sum;
    for i in 0..atoms.pos.len() {
        let p = atoms.pos[i];
        let si = atoms.shot[i];
        let q = if sum_mode {
            [-p[0], -p[1], -p[2]]
        } else {
            p
        };
        let (cx, cy, cz) = key(&q);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(list) = cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in list {
                        // Sum pairs are unordered (dedupe by index); difference
                        // pairs are counted in both orders, which symmetrizes
                        // the histogram.
                        if sum_mode {
                            if j as usize <= i {
                                continue;
                            }
                        } else if j as usize == i {
                            continue;
                        }
                        let o = atoms.pos[j as usize];
                        let d = if sum_mode {
                            [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
                        } else {
                            [p[0] - o[0], p[1] - o[1], p[2] - o[2]]
                        };
                        let ix = (d[0] / b).round();
                        let iy = (d[1] / b).round();
                        let iz = (d[2] / b).round();
                        let lim = k_max as f64;
                        if ix.abs() > lim || iy.abs() > lim || iz.abs() > lim {
                            continue;
                        }
                        let target = if atoms.shot[j as usize] == si {
                            same.as_mut()
                        } else {
                            cross.as_mut()
                        };
                        if let Some(h) = target {
                            let idx = h.index(ix as i32, iy as i32, iz as i32);
                            h.counts[idx] = h.counts[idx]
                                .checked_add(1)
                                .expect("pair histogram bin overflow");
                            h.total_pairs += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((same, cross))
}

/// Histogram of all windowed same-shot pairs, summed over shots.
pub fn same_shot_histogram<S: AsRef<[VelocityVector]>>(
    shots: &[S],
    cfg: &CorrelationConfig,
) -> Result<PairHistogram3D> {
    let atoms = gate_atoms(shots, cfg);
    let (same, _) = accumulate(&atoms, cfg, PairKind::Same)?;
    Ok(same.expect("requested same histogram"))
}

/// Histogram of windowed pairs taken only between atoms of different shots.
pub fn cross_shot_histogram<S: AsRef<[VelocityVector]>>(
    shots: &[S],
    cfg: &CorrelationConfig,
) -> Result<PairHistogram3D> {
    if shots.len() < 2 {
        return Err(Error::InvalidInput(
            "cross-shot histogram needs at least 2 shots".into(),
        ));
    }
    let atoms = gate_atoms(shots, cfg);
    let (_, cross) = accumulate(&atoms, cfg, PairKind::Cross)?;
    Ok(cross.expect("requested cross histogram"))
}

/// Build both histograms in one pass over the pair candidates.
pub fn pair_histograms<S: AsRef<[VelocityVector]>>(
    shots: &[S],
    cfg: &CorrelationConfig,
) -> Result<(PairHistogram3D, PairHistogram3D)> {
    if shots.len() < 2 {
        return Err(Error::InvalidInput(
            "cross-shot normalization needs at least 2 shots".into(),
        ));
    }
    let atoms = gate_atoms(shots, cfg);
    let (same, cross) = accumulate(&atoms, cfg, PairKind::Both)?;
    Ok((
        same.expect("requested same histogram"),
        cross.expect("requested cross histogram"),
    ))
}

/// Normalize a same-shot histogram by the cross-shot accidentals:
/// `g2(bin) = (same/P_same) / (cross/P_cross)`.
///
/// The per-bin standard error is taken from the null expectation: under
/// g2 = 1 the same-shot count in a bin is Poisson with mean
/// `P_same * cross / P_cross`, so `var(g2) = P_cross / (P_same * cross)`.
/// Using the expectation instead of the observed count keeps the weights
/// independent of the fluctuations and the least-squares fit unbiased for
/// sparse counts.
pub fn normalize(same: &PairHistogram3D, cross: &PairHistogram3D) -> Result<G2Map> {
    if same.variable != cross.variable
        || same.k_max != cross.k_max
        || same.bin_width != cross.bin_width
    {
        return Err(Error::InvalidInput(
            "same and cross histograms were built with different configurations".into(),
        ));
    }
    if same.total_pairs == 0 || cross.total_pairs == 0 {
        return Err(Error::InvalidInput(
            "cannot normalize empty pair histograms".into(),
        ));
    }
    let p_s = same.total_pairs as f64;
    let p_c = cross.total_pairs as f64;
    let nbins = same.counts.len();
    let mut value = vec![f64::NAN; nbins];
    let mut err = vec![f64::NAN; nbins];
    let mut valid = vec![false; nbins];
    for i in 0..nbins {
        let c = cross.counts[i] as f64;
        if c > 0.0 {
            value[i] = (same.counts[i] as f64 * p_c) / (c * p_s);
            err[i] = (p_c / (p_s * c)).sqrt();
            valid[i] = true;
        }
    }
    Ok(G2Map {
        variable: same.variable,
        bin_width: same.bin_width,
        k_max: same.k_max,
        value,
        err,
        valid,
        p_same: same.total_pairs,
        p_cross: cross.total_pairs,
        shots: same.shots,
    })
}

/// A 1D cut through a [`G2Map`] with the transverse axes averaged out.
#[derive(Clone, Debug, Serialize)]
pub struct Projection {
    pub axis: usize,
    /// Bin centers along the projection axis.
    pub v: Vec<f64>,
    pub g2: Vec<f64>,
    pub err: Vec<f64>,
    /// Transverse bins averaged per point.
    pub bins_averaged: Vec<u32>,
}

/// Average `g2` over the two transverse axes within `half_widths` (velocity
/// units, one entry per transverse axis in increasing axis order).
pub fn project(map: &G2Map, axis: usize, half_widths: [f64; 2]) -> Result<Projection> {
    if axis > 2 {
        return Err(Error::InvalidInput(format!("axis {axis} out of range")));
    }
    if half_widths.iter().any(|w| *w < map.bin_width) {
        return Err(Error::InvalidInput(format!(
            "projection window {half_widths:?} narrower than one bin ({})",
            map.bin_width
        )));
    }
    let others: [usize; 2] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let k = map.k_max;
    // Transverse bins whose centers lie inside the window.
    let reach = |w: f64| ((w / map.bin_width) * (1.0 + 1e-12)).floor() as i32;
    let r0 = reach(half_widths[0]).min(k);
    let r1 = reach(half_widths[1]).min(k);

    let mut v = Vec::with_capacity(map.n_axis());
    let mut g2 = Vec::with_capacity(map.n_axis());
    let mut err = Vec::with_capacity(map.n_axis());
    let mut bins_averaged = Vec::with_capacity(map.n_axis());
    for i in -k..=k {
        let mut sum = 0.0;
        let mut var = 0.0;
        let mut n = 0u32;
        for j0 in -r0..=r0 {
            for j1 in -r1..=r1 {
                let mut idx3 = [0i32; 3];
                idx3[axis] = i;
                idx3[others[0]] = j0;
                idx3[others[1]] = j1;
                let flat = map.index(idx3[0], idx3[1], idx3[2]);
                if map.valid[flat] {
                    sum += map.value[flat];
                    var += map.err[flat] * map.err[flat];
                    n += 1;
                }
            }
        }
        v.push(map.center(i));
        if n > 0 {
            g2.push(sum / n as f64);
            err.push(var.sqrt() / n as f64);
        } else {
            g2.push(f64::NAN);
            err.push(f64::NAN);
        }
        bins_averaged.push(n);
    }
    Ok(Projection {
        axis,
        v,
        g2,
        err,
        bins_averaged,
    })
}

/// Serialize a map as commented metadata followed by CSV rows
/// `vx,vy,vz,g2,err,valid` (bin centers, shortest round-trip floats).
pub fn write_g2_map(map: &G2Map, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# variable={}", map.variable)?;
    writeln!(w, "# bin_width={}", map.bin_width)?;
    writeln!(w, "# k_max={}", map.k_max)?;
    writeln!(w, "# p_same={}", map.p_same)?;
    writeln!(w, "# p_cross={}", map.p_cross)?;
    writeln!(w, "# shots={}", map.shots)?;
    writeln!(w, "vx,vy,vz,g2,err,valid")?;
    let k = map.k_max;
    for ix in -k..=k {
        for iy in -k..=k {
            for iz in -k..=k {
                let i = map.index(ix, iy, iz);
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    map.center(ix),
                    map.center(iy),
                    map.center(iz),
                    map.value[i],
                    map.err[i],
                    u8::from(map.valid[i]),
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a map written by [`write_g2_map`].
pub fn read_g2_map(path: &Path) -> Result<G2Map> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut meta: HashMap<String, String> = HashMap::new();
    let mut rows: Vec<(f64, f64, f64, f64, f64, bool)> = Vec::new();
    let mut header_seen = false;
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
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, val)) = rest.trim().split_once('=') {
                meta.insert(key.trim().to_string(), val.trim().to_string());
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line != "vx,vy,vz,g2,err,valid" {
                return Err(bad(lineno, format!("unexpected header {line:?}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(lineno, format!("expected 6 fields, got {}", fields.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| bad(lineno, format!("bad float {s:?}: {e}")))
        };
        rows.push((
            parse(fields[0])?,
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
            fields[5] == "1",
        ));
    }
    let get = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::InvalidInput(format!("g2 map file missing # {key}= header")))
    };
    let variable: Variable = get("variable")?.parse()?;
    let bin_width: f64 = get("bin_width")?
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad bin_width: {e}")))?;
    let k_max: i32 = get("k_max")?
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad k_max: {e}")))?;
    let p_same: u64 = get("p_same")?
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad p_same: {e}")))?;
    let p_cross: u64 = get("p_cross")?
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad p_cross: {e}")))?;
    let shots: u64 = get("shots")?
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad shots: {e}")))?;
    let n = (2 * k_max + 1) as usize;
    if rows.len() != n * n * n {
        return Err(Error::InvalidInput(format!(
            "g2 map file has {} rows, expected {}",
            rows.len(),
            n * n * n
        )));
    }
    let mut map = G2Map {
        variable,
        bin_width,
        k_max,
        value: vec![f64::NAN; n * n * n],
        err: vec![f64::NAN; n * n * n],
        valid: vec![false; n * n * n],
        p_same,
        p_cross,
        shots,
    };
    for (vx, vy, vz, g2, err, valid) in rows {
        let to_idx = |c: f64| (c / bin_width).round() as i32;
        let i = map.index(to_idx(vx), to_idx(vy), to_idx(vz));
        map.value[i] = g2;
        map.err[i] = err;
        map.valid[i] = valid;
    }
    Ok(map)
}
