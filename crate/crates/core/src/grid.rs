//! The space-time lattice and the finite-difference operators on it.
//!
//! Spatial points are `x0 + h·Σ_k i_k ℓ_k` for integer `i` in a box of
//! `Z^{d1}`. Moving along `±ℓ_k` is moving `±1` along index axis `k`, so
//! neighbor lookups never touch coordinates. Points whose neighbors would
//! leave the box, and every point of the final level, carry `u = g`.

use std::collections::HashMap;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::problem::{ControlledProblem, Dir, DirectionBasis};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid parameters: {0}")]
    Parameters(String),
    #[error("coordinate collision: indices {a:?} and {b:?} map to the same point")]
    Collision { a: Vec<i64>, b: Vec<i64> },
    #[error("level {0} is the final level and has no forward time difference")]
    FinalLevel(usize),
    #[error("point {0} is not interior")]
    NotInterior(usize),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Relative slack when deciding whether `jτ` has reached `T`.
const TIME_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LatticeGrid {
    basis: DirectionBasis,
    h: f64,
    tau: f64,
    horizon: f64,
    x0: Vec<f64>,
    lo: Vec<i64>,
    hi: Vec<i64>,
    strides: Vec<usize>,
    n_points: usize,
    times: Vec<f64>,
    coords: Vec<f64>,
    interior: Vec<bool>,
    interior_points: Vec<usize>,
    /// `2·d1` neighbor slots per interior point, in [`Dir::all`] order.
    neighbors: Vec<usize>,
}

impl LatticeGrid {
    /// Builds the lattice over the index box `[lo_k, hi_k]` for each pair `k`.
    pub fn build(
        basis: &DirectionBasis,
        h: f64,
        tau: f64,
        horizon: f64,
        x0: Vec<f64>,
        index_box: &[(i64, i64)],
    ) -> Result<Self, GridError> {
        let bad = |m: String| Err(GridError::Parameters(m));
        if !(h > 0.0 && h.is_finite()) {
            return bad(format!("h must be positive, got {h}"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return bad(format!("tau must be positive, got {tau}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return bad(format!("T must be positive, got {horizon}"));
        }
        let d1 = basis.pairs();
        let d = basis.dim();
        if index_box.len() != d1 {
            return bad(format!("index box has {} axes, expected {d1}", index_box.len()));
        }
        if x0.len() != d {
            return bad(format!("origin has {} components, expected {d}", x0.len()));
        }
        if let Some((lo, hi)) = index_box.iter().find(|(lo, hi)| lo > hi) {
            return bad(format!("empty index range [{lo}, {hi}]"));
        }

        let lo: Vec<i64> = index_box.iter().map(|r| r.0).collect();
        let hi: Vec<i64> = index_box.iter().map(|r| r.1).collect();
        let extents: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| (h - l + 1) as usize).collect();
        let mut strides = vec![1usize; d1];
        for k in 1..d1 {
            strides[k] = strides[k - 1] * extents[k - 1];
        }
        let n_points = extents.iter().product::<usize>();
        if n_points > 50_000_000 {
            return bad(format!("{n_points} spatial points is beyond desk scale"));
        }

        let mut times = Vec::new();
        let mut j = 0usize;
        loop {
            let t = j as f64 * tau;
            if t >= horizon * (1.0 - TIME_EPS) {
                break;
            }
            times.push(t);
            j += 1;
        }
        times.push(horizon);

        let mut grid = LatticeGrid {
            basis: basis.clone(),
            h,
            tau,
            horizon,
            x0,
            lo,
            hi,
            strides,
            n_points,
            times,
            coords: Vec::with_capacity(n_points * d),
            interior: vec![false; n_points],
            interior_points: Vec::new(),
            neighbors: Vec::new(),
        };

        // Coordinates are hashed on a lattice much finer than h to detect
        // index vectors that land on the same point.
        let quantum = h * 1e-7;
        let mut seen: HashMap<Vec<i64>, usize> = HashMap::with_capacity(n_points);
        for p in 0..n_points {
            let idx = grid.multi_index(p);
            let x = grid.coordinate_of(&idx);
            let key: Vec<i64> = x.iter().map(|c| (c / quantum).round() as i64).collect();
            if let Some(&q) = seen.get(&key) {
                return Err(GridError::Collision {
                    a: grid.multi_index(q),
                    b: idx,
                });
            }
            seen.insert(key, p);
            let inside = idx.iter().zip(grid.lo.iter().zip(&grid.hi)).all(|(i, (l, h))| i > l && i < h);
            grid.interior[p] = inside;
            grid.coords.extend_from_slice(&x);
        }
        for p in 0..n_points {
            if grid.interior[p] {
                grid.interior_points.push(p);
                for dir in Dir::all(d1) {
                    let s = grid.strides[dir.pair];
                    grid.neighbors.push(if dir.positive { p + s } else { p - s });
                }
            }
        }
        Ok(grid)
    }

    /// Symmetric box `[-n, n]` on every index axis, centered at the origin.
    pub fn symmetric(basis: &DirectionBasis, h: f64, tau: f64, horizon: f64, n: i64) -> Result<Self, GridError> {
        let bx = vec![(-n, n); basis.pairs()];
        Self::build(basis, h, tau, horizon, vec![0.0; basis.dim()], &bx)
    }

    pub fn basis(&self) -> &DirectionBasis {
        &self.basis
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_levels(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, level: usize) -> f64 {
        self.times[level]
    }

    /// `τ_T(t)` at a non-final level: `τ`, or the short last step.
    pub fn step(&self, level: usize) -> Result<f64, GridError> {
        if level + 1 >= self.times.len() {
            return Err(GridError::FinalLevel(level));
        }
        Ok(self.times[level + 1] - self.times[level])
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn index_box(&self) -> Vec<(i64, i64)> {
        self.lo.iter().copied().zip(self.hi.iter().copied()).collect()
    }

    pub fn multi_index(&self, p: usize) -> Vec<i64> {
        let mut rest = p;
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| {
                let ext = (hi - lo + 1) as usize;
                let i = rest % ext;
                rest /= ext;
                lo + i as i64
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[i64]) -> Option<usize> {
        if idx.len() != self.lo.len() {
            return None;
        }
        let mut p = 0;
        for (k, &i) in idx.iter().enumerate() {
            if i < self.lo[k] || i > self.hi[k] {
                return None;
            }
            p += (i - self.lo[k]) as usize * self.strides[k];
        }
        Some(p)
    }

    fn coordinate_of(&self, idx: &[i64]) -> Vec<f64> {
        let mut x = self.x0.clone();
        for (k, &i) in idx.iter().enumerate() {
            let l = self.basis.positive(k);
            for (xc, lc) in x.iter_mut().zip(l) {
                *xc += self.h * i as f64 * lc;
            }
        }
        x
    }

    pub fn coord(&self, p: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[p * d..(p + 1) * d]
    }

    pub fn is_interior(&self, p: usize) -> bool {
        self.interior[p]
    }

    pub fn interior_points(&self) -> &[usize] {
        &self.interior_points
    }

    /// Neighbor `x + hℓ_dir` of an interior point.
    pub fn neighbor(&self, p: usize, dir: Dir) -> Result<usize, GridError> {
        if !self.interior[p] {
            return Err(GridError::NotInterior(p));
        }
        let s = self.strides[dir.pair];
        Ok(if dir.positive { p + s } else { p - s })
    }

    /// Neighbor table for the `n`-th interior point, in [`Dir::all`] order.
    #[inline]
    pub(crate) fn neighbor_slots(&self, n: usize) -> &[usize] {
        let w = 2 * self.basis.pairs();
        &self.neighbors[n * w..(n + 1) * w]
    }

    /// Point whose coordinate equals `x` (within `1e-9·h`).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let tol = 1e-9 * self.h;
        (0..self.n_points).find(|&p| self.coord(p).iter().zip(x).all(|(a, b)| (a - b).abs() <= tol))
    }

    /// Level whose time equals `t` (within `1e-9·τ`).
    pub fn locate_time(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.tau;
        self.times.iter().position(|s| (s - t).abs() <= tol)
    }

    /// Terminal reward at every point.
    pub fn terminal_values(&self, problem: &ControlledProblem) -> Result<Vec<f64>, GridError> {
        (0..self.n_points)
            .map(|p| problem.terminal(self.coord(p)).map_err(GridError::from))
            .collect()
    }
}

/// Per-level solver statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDiagnostics {
    pub level_time: f64,
    pub iterations: usize,
    /// Sup-norm of the last update.
    pub final_update: f64,
    /// Largest ratio of successive update norms above the round-off floor.
    pub observed_ratio: f64,
    pub epsilon: f64,
    /// Theoretical contraction factor of this level's map.
    pub delta_bound: f64,
    /// Sup-norm of the scheme expression on the returned level.
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub epsilon: f64,
    pub gamma: f64,
    pub delta_bound: f64,
    pub levels: Vec<LevelDiagnostics>,
}

impl SolveDiagnostics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics serialize")
    }
}

/// Control chosen at a point; `STOP` marks the obstacle being active.
pub const STOP: u32 = u32::MAX;

/// Grid values `u(t_j, x_i)` for every level.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    n_points: usize,
    values: Vec<f64>,
    /// Maximizing control per level and point (non-final levels).
    pub policy: Vec<Vec<u32>>,
    pub diagnostics: SolveDiagnostics,
}

impl SolutionField {
    pub fn new(grid: &LatticeGrid) -> Self {
        SolutionField {
            n_points: grid.n_points(),
            values: vec![0.0; grid.n_points() * grid.n_levels()],
            policy: Vec::new(),
            diagnostics: SolveDiagnostics::default(),
        }
    }

    /// Fills every level with `value(level, point)`.
    pub fn from_fn(grid: &LatticeGrid, value: impl Fn(f64, &[f64]) -> f64) -> Self {
        let mut field = Self::new(grid);
        for j in 0..grid.n_levels() {
            let t = grid.time(j);
            for p in 0..grid.n_points() {
                field.level_mut(j)[p] = value(t, grid.coord(p));
            }
        }
        field
    }

    pub fn n_levels(&self) -> usize {
        self.values.len() / self.n_points.max(1)
    }

    pub fn level(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_points..(j + 1) * self.n_points]
    }

    pub fn level_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.n_points..(j + 1) * self.n_points]
    }

    pub fn get(&self, j: usize, p: usize) -> f64 {
        self.values[j * self.n_points + p]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest value over the whole field.
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `t, x1..xd, u`, level by level.
    pub fn write_csv<W: Write>(&self, grid: &LatticeGrid, mut w: W) -> io::Result<()> {
        let d = grid.dim();
        let mut header = String::from("t");
        for i in 1..=d {
            header.push_str(&format!(",x{i}"));
        }
        header.push_str(",u\n");
        w.write_all(header.as_bytes())?;
        for j in 0..grid.n_levels() {
            let t = grid.time(j);
            for p in 0..grid.n_points() {
                let mut line = format!("{t}");
                for c in grid.coord(p) {
                    line.push_str(&format!(",{c}"));
                }
                line.push_str(&format!(",{}\n", self.get(j, p)));
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    /// Binary dump, all little-endian:
    /// `"BFD1"`, `u32 d`, `u32 levels`, `u64 points`, `f64 × levels` times,
    /// `f64 × points·d` coordinates, `f64 × levels·points` values.
    pub fn write_binary<W: Write>(&self, grid: &LatticeGrid, mut w: W) -> io::Result<()> {
        w.write_all(b"BFD1")?;
        w.write_all(&(grid.dim() as u32).to_le_bytes())?;
        w.write_all(&(grid.n_levels() as u32).to_le_bytes())?;
        w.write_all(&(grid.n_points() as u64).to_le_bytes())?;
        for t in grid.times() {
            w.write_all(&t.to_le_bytes())?;
        }
        for p in 0..grid.n_points() {
            for c in grid.coord(p) {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Decoded binary dump.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryField {
    pub d: usize,
    pub times: Vec<f64>,
    pub coords: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn read_binary(bytes: &[u8]) -> Result<BinaryField, GridError> {
    let bad = |m: &str| GridError::Parameters(format!("binary field: {m}"));
    if bytes.len() < 20 || &bytes[..4] != b"BFD1" {
        return Err(bad("missing BFD1 header"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let levels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let points = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = 20 + 8 * (levels + points * d + levels * points);
    if bytes.len() != expected {
        return Err(bad("length does not match header"));
    }
    let mut floats = bytes[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let times = floats.by_ref().take(levels).collect();
    let coords = floats.by_ref().take(points * d).collect();
    let values = floats.collect();
    Ok(BinaryField {
        d,
        times,
        coords,
        values,
    })
}

/// Forward time quotient `(u(t+τ_T, x) − u(t, x)) / τ_T(t)`.
pub fn delta_tau(grid: &LatticeGrid, field: &SolutionField, level: usize, p: usize) -> Result<f64, GridError> {
    let step = grid.step(level)?;
    if p >= grid.n_points() {
        return Err(GridError::OutOfRange(format!("point {p}")));
    }
    Ok((field.get(level + 1, p) - field.get(level, p)) / step)
}

/// Forward difference `(u(x + hℓ_dir) − u(x)) / h`.
pub fn delta_h(grid: &LatticeGrid, values: &[f64], p: usize, dir: Dir) -> Result<f64, GridError> {
    let q = grid.neighbor(p, dir)?;
    Ok((values[q] - values[p]) / grid.h())
}

/// Symmetric second difference along `ℓ_dir`; the same for `dir` and `-dir`.
pub fn second_difference(grid: &LatticeGrid, values: &[f64], p: usize, dir: Dir) -> Result<f64, GridError> {
    let up = values[grid.neighbor(p, dir)?];
    let down = values[grid.neighbor(p, dir.flip())?];
    let h = grid.h();
    Ok((up + down - 2.0 * values[p]) / (h * h))
}

/// `L_h^α u = Σ_{±k} a_k Δ_k u + Σ_{±k} b_k δ_k u − c u` at interior point `p`.
pub fn apply_lh(
    problem: &ControlledProblem,
    control: usize,
    grid: &LatticeGrid,
    values: &[f64],
    t: f64,
    p: usize,
) -> Result<f64, GridError> {
    let ctl = &problem.controls[control];
    let x = grid.coord(p);
    let mut acc = 0.0;
    for dir in Dir::all(grid.basis().pairs()) {
        let a = ctl.a(dir.pair, t, x)?;
        let b = ctl.b(dir).eval(t, x)?;
        acc += a * second_difference(grid, values, p, dir)? + b * delta_h(grid, values, p, dir)?;
    }
    let c = ctl.c.eval(t, x)?;
    Ok(acc - c * values[p])
}
