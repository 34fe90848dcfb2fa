//! Reference Bayesian filter.
//!
//! The likelihood of a measurement pair given the states at both ends of an
//! interval is a Gaussian mixture over the syndrome means. It is evaluated as
//! a Riemann sum over the composed histograms of [`crate::synd_density`]:
//!
//! ```text
//! P(m | prev, next) = sum over bins c of  mass(c) * N(m - c; k/T)
//! ```
//!
//! The sum depends on `prev` only through its parity frame, so one density per
//! flip pattern is kept in the `(+, +)` frame and evaluated at `(s1 m1, s2 m2)`.
//! In tabulated mode each of the eight densities is pre-evaluated on a grid
//! of measurement values and read back by bilinear interpolation of its log.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::markov::{transition_matrix, TransitionMatrix};
use crate::simulator::{MeasurementPair, TrajectoryRecord};
use crate::state::{positive, syndrome_of, FlipMask, StateIndex};
use crate::synd_density::{bin_center, compose_conditional_density, ComposedDensity, HistogramBank};
use crate::tracking::{argmax, TrackingFilter};

/// Normalized distribution over the eight states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub p: [f64; 8],
}

impl Posterior {
    pub fn point_mass(state: StateIndex) -> Self {
        let mut p = [0.0; 8];
        p[state.index()] = 1.0;
        Posterior { p }
    }

    pub fn uniform() -> Self {
        Posterior { p: [0.125; 8] }
    }

    pub fn argmax(&self) -> StateIndex {
        argmax(&self.p)
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// Normal density with fixed variance, tabulated on `[-range, range]` and
/// linearly interpolated. Arguments outside the range are evaluated directly.
#[derive(Debug, Clone)]
pub struct GaussianTable {
    pub h: f64,
    pub range: f64,
    pub variance: f64,
    values: Vec<f64>,
    inv_two_var: f64,
    norm: f64,
}

/// Knot spacing in units of the standard deviation.
const GAUSS_SPACING: f64 = 2e-4;
const GAUSS_MAX_KNOTS: usize = 1 << 22;

impl GaussianTable {
    pub fn new(variance: f64, range: f64, h: f64) -> Result<Self> {
        positive("variance", variance)?;
        positive("range", range)?;
        positive("h", h)?;
        let knots = (2.0 * range / h).ceil() as usize + 1;
        if knots > GAUSS_MAX_KNOTS {
            return Err(Error::param("h", format!("{knots} knots exceed the table limit")));
        }
        let inv_two_var = 0.5 / variance;
        let norm = (2.0 * PI * variance).sqrt().recip();
        let values = (0..knots)
            .map(|i| {
                let x = -range + i as f64 * h;
                norm * (-x * x * inv_two_var).exp()
            })
            .collect();
        Ok(GaussianTable {
            h,
            range,
            variance,
            values,
            inv_two_var,
            norm,
        })
    }

    /// Table covering `1 + 8 sigma` at the default resolution.
    pub fn for_variance(variance: f64) -> Result<Self> {
        let sigma = variance.sqrt();
        Self::new(variance, 1.0 + 8.0 * sigma, GAUSS_SPACING * sigma)
    }

    #[inline]
    pub fn direct(&self, x: f64) -> f64 {
        self.norm * (-x * x * self.inv_two_var).exp()
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let u = (x + self.range) / self.h;
        if !(u >= 0.0) || u >= (self.values.len() - 1) as f64 {
            return self.direct(x);
        }
        let i = u as usize;
        let f = u - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// One block of point masses of a composed density: `mass[a * c2.len() + b]`
/// sits at `(c1[a], c2[b])`.
#[derive(Debug, Clone)]
struct RiemannPart {
    c1: Vec<f64>,
    c2: Vec<f64>,
    mass: Vec<f64>,
}

impl RiemannPart {
    /// Compact one part of a composed density, dropping empty rows and columns.
    /// Atom axes keep only their `+1` coordinate.
    fn from_grid(grid: &[f64], n: usize, atoms: [bool; 2]) -> Option<Self> {
        let side = 2 * n;
        let w = 1.0 / (n * n) as f64;
        let coord = |i: usize, atom: bool| if atom { 1.0 } else { bin_center(n, i) };
        let rows: Vec<usize> = (0..side).filter(|&a| (0..side).any(|b| grid[a * side + b] > 0.0)).collect();
        let cols: Vec<usize> = (0..side).filter(|&b| (0..side).any(|a| grid[a * side + b] > 0.0)).collect();
        if rows.is_empty() {
            return None;
        }
        let mut mass = Vec::with_capacity(rows.len() * cols.len());
        for &a in &rows {
            for &b in &cols {
                mass.push(grid[a * side + b] * w);
            }
        }
        Some(RiemannPart {
            c1: rows.iter().map(|&a| coord(a, atoms[0])).collect(),
            c2: cols.iter().map(|&b| coord(b, atoms[1])).collect(),
            mass,
        })
    }

    fn eval(&self, x: f64, y: f64, g: &dyn Fn(f64) -> f64, g2: &mut Vec<f64>) -> f64 {
        g2.clear();
        g2.extend(self.c2.iter().map(|&c| g(y - c)));
        let r2 = self.c2.len();
        let mut total = 0.0;
        for (a, &c) in self.c1.iter().enumerate() {
            let ga = g(x - c);
            if ga == 0.0 {
                continue;
            }
            let row = &self.mass[a * r2..(a + 1) * r2];
            let inner: f64 = row.iter().zip(g2.iter()).map(|(m, v)| m * v).sum();
            total += ga * inner;
        }
        total
    }
}

/// Pre-evaluated log-density on a square grid of measurement values.
#[derive(Debug, Clone)]
struct DensityGrid {
    lo: f64,
    h: f64,
    points: usize,
    values: Vec<f64>,
}

impl DensityGrid {
    fn build(parts: &[RiemannPart], lo: f64, h: f64, points: usize, norm: f64, inv_two_var: f64) -> Self {
        let g = |x: f64| norm * (-x * x * inv_two_var).exp();
        let xs: Vec<f64> = (0..points).map(|i| lo + i as f64 * h).collect();
        let mut values = vec![0.0; points * points];
        for part in parts {
            let r1 = part.c1.len();
            let r2 = part.c2.len();
            let g2: Vec<f64> = xs.iter().flat_map(|&y| part.c2.iter().map(move |&c| g(y - c))).collect();
            values.par_chunks_mut(points).enumerate().for_each(|(i, out)| {
                let x = xs[i];
                let mut row = vec![0.0; r2];
                for a in 0..r1 {
                    let ga = g(x - part.c1[a]);
                    if ga == 0.0 {
                        continue;
                    }
                    for (r, m) in row.iter_mut().zip(&part.mass[a * r2..(a + 1) * r2]) {
                        *r += ga * m;
                    }
                }
                for (j, v) in out.iter_mut().enumerate() {
                    let gy = &g2[j * r2..(j + 1) * r2];
                    *v += row.iter().zip(gy).map(|(r, q)| r * q).sum::<f64>();
                }
            });
        }
        // log values: Gaussian tails are quadratic in log space
        values.iter_mut().for_each(|v| *v = v.max(f64::MIN_POSITIVE).ln());
        DensityGrid { lo, h, points, values }
    }

    #[inline]
    fn eval(&self, x: f64, y: f64) -> Option<f64> {
        let u = (x - self.lo) / self.h;
        let v = (y - self.lo) / self.h;
        let last = (self.points - 1) as f64;
        if !(u >= 0.0 && v >= 0.0 && u < last && v < last) {
            return None;
        }
        let (i, j) = (u as usize, v as usize);
        let (fu, fv) = (u - i as f64, v - j as f64);
        let p = self.points;
        let v00 = self.values[i * p + j];
        let v01 = self.values[i * p + j + 1];
        let v10 = self.values[(i + 1) * p + j];
        let v11 = self.values[(i + 1) * p + j + 1];
        Some(((v00 * (1.0 - fv) + v01 * fv) * (1.0 - fu) + (v10 * (1.0 - fv) + v11 * fv) * fu).exp())
    }
}

/// How the Riemann sums are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityMode {
    /// Direct sum with exact Gaussian factors at every call.
    Exact,
    /// Grid lookup with bilinear interpolation; direct tabulated sum outside the grid.
    #[default]
    Tabulated,
}

/// Grid points per standard deviation in tabulated mode.
const GRID_PER_SIGMA: f64 = 24.0;
const GRID_MAX_POINTS: usize = 2049;

#[derive(Debug, Clone)]
struct PatternDensity {
    parts: Vec<RiemannPart>,
    grid: Option<DensityGrid>,
}

/// Measurement likelihoods for every flip pattern at one `(mu, T, k)`.
#[derive(Debug, Clone)]
pub struct MeasurementDensityTable {
    pub mu: f64,
    pub dt: f64,
    pub k: f64,
    pub n_max: u32,
    pub mode: DensityMode,
    pub composed: Vec<ComposedDensity>,
    patterns: Vec<PatternDensity>,
    gauss: Option<GaussianTable>,
    inv_two_var: f64,
    norm: f64,
}

impl MeasurementDensityTable {
    pub fn build(mu: f64, dt: f64, k: f64, bank: &HistogramBank, n_max: u32, mode: DensityMode) -> Result<Self> {
        positive("mu", mu)?;
        positive("dt", dt)?;
        positive("k", k)?;
        if n_max > bank.n_max {
            return Err(Error::ConfigMismatch(format!("n_max {n_max} exceeds bank's {}", bank.n_max)));
        }
        let variance = k / dt;
        let sigma = variance.sqrt();
        let inv_two_var = 0.5 / variance;
        let norm = (2.0 * PI * variance).sqrt().recip();
        let composed = (0..8u8)
            .map(|f| compose_conditional_density(FlipMask::from_bits(f).unwrap(), mu, dt, bank, n_max))
            .collect::<Result<Vec<_>>>()?;

        let range = 1.0 + 8.0 * sigma;
        let h = sigma / GRID_PER_SIGMA;
        let points = (2.0 * range / h).ceil() as usize + 1;
        let tabulate = mode == DensityMode::Tabulated && points <= GRID_MAX_POINTS;
        let patterns = composed
            .iter()
            .map(|c| {
                let parts: Vec<RiemannPart> = c
                    .parts
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| !g.is_empty())
                    .filter_map(|(kind, g)| RiemannPart::from_grid(g, c.n, ComposedDensity::part_atoms(kind)))
                    .collect();
                let grid = tabulate.then(|| DensityGrid::build(&parts, -range, h, points, norm, inv_two_var));
                PatternDensity { parts, grid }
            })
            .collect();
        let gauss = match mode {
            DensityMode::Tabulated => GaussianTable::for_variance(variance).ok(),
            DensityMode::Exact => None,
        };
        Ok(MeasurementDensityTable {
            mu,
            dt,
            k,
            n_max,
            mode,
            composed,
            patterns,
            gauss,
            inv_two_var,
            norm,
        })
    }

    /// Whether measurement grids were built (tabulated mode with a manageable grid).
    pub fn has_grid(&self) -> bool {
        self.patterns.iter().all(|p| p.grid.is_some())
    }

    /// Density at `(x, y)` in the `(+, +)` frame for a net flip pattern.
    pub fn eval_reference(&self, flip: FlipMask, x: f64, y: f64) -> f64 {
        let pat = &self.patterns[flip.index()];
        if let Some(v) = pat.grid.as_ref().and_then(|g| g.eval(x, y)) {
            return v;
        }
        self.eval_direct(flip, x, y)
    }

    /// Riemann sum without the measurement grid.
    pub fn eval_direct(&self, flip: FlipMask, x: f64, y: f64) -> f64 {
        let pat = &self.patterns[flip.index()];
        let mut scratch = Vec::new();
        let exact = |d: f64| self.norm * (-d * d * self.inv_two_var).exp();
        match &self.gauss {
            Some(t) => pat.parts.iter().map(|p| p.eval(x, y, &|d| t.eval(d), &mut scratch)).sum(),
            None => pat.parts.iter().map(|p| p.eval(x, y, &exact, &mut scratch)).sum(),
        }
    }

    /// All 32 distinct likelihoods for one measurement: `[parity class][flip pattern]`.
    pub fn likelihoods(&self, m: MeasurementPair) -> [[f64; 8]; 4] {
        let mut out = [[0.0; 8]; 4];
        for (class, row) in out.iter_mut().enumerate() {
            let s1 = if class & 2 != 0 { -1.0 } else { 1.0 };
            let s2 = if class & 1 != 0 { -1.0 } else { 1.0 };
            for (f, v) in row.iter_mut().enumerate() {
                *v = self.eval_reference(FlipMask::from_bits(f as u8).unwrap(), s1 * m.m1, s2 * m.m2);
            }
        }
        out
    }
}

/// `P(m | prev, next)` from the table.
pub fn measurement_density(
    m: MeasurementPair,
    next: StateIndex,
    prev: StateIndex,
    table: &MeasurementDensityTable,
) -> f64 {
    let (s1, s2) = syndrome_of(prev).as_f64();
    table.eval_reference(FlipMask::between(prev, next), s1 * m.m1, s2 * m.m2)
}

fn update_with(prior: &Posterior, lik: &[[f64; 8]; 4], j: &TransitionMatrix) -> Result<Posterior> {
    let mut p = [0.0; 8];
    for a in StateIndex::all() {
        let pa = prior.p[a.index()];
        if pa == 0.0 {
            continue;
        }
        let row = &lik[syndrome_of(a).class()];
        for b in 0..8 {
            p[b] += pa * j.j[a.index()][b] * row[a.index() ^ b];
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Underflow);
    }
    p.iter_mut().for_each(|x| *x /= total);
    Ok(Posterior { p })
}

/// One Bayes step: predict through `j`, weight by the interval likelihood, renormalize.
pub fn update(
    prior: &Posterior,
    m: MeasurementPair,
    table: &MeasurementDensityTable,
    j: &TransitionMatrix,
) -> Result<Posterior> {
    update_with(prior, &table.likelihoods(m), j)
}

/// Filter a stored trajectory from a point mass on its initial state.
pub fn run(trajectory: &TrajectoryRecord, table: &MeasurementDensityTable) -> Result<Vec<(Posterior, StateIndex)>> {
    let c = &trajectory.config;
    if c.mu != table.mu || c.dt != table.dt || c.k != table.k {
        return Err(Error::ConfigMismatch(format!(
            "trajectory (mu={}, T={}, k={}) vs table (mu={}, T={}, k={})",
            c.mu, c.dt, c.k, table.mu, table.dt, table.k
        )));
    }
    let j = transition_matrix(table.mu, table.dt)?;
    let mut post = Posterior::point_mass(c.initial_state);
    let mut out = Vec::with_capacity(trajectory.len());
    for &m in &trajectory.measurements {
        post = update(&post, m, table, &j)?;
        out.push((post, post.argmax()));
    }
    Ok(out)
}

/// [`TrackingFilter`] wrapper around [`update`].
#[derive(Debug, Clone)]
pub struct OptimalFilter {
    table: Arc<MeasurementDensityTable>,
    j: TransitionMatrix,
    post: Posterior,
    last: StateIndex,
    failed: bool,
}

impl OptimalFilter {
    pub fn new(table: Arc<MeasurementDensityTable>) -> Result<Self> {
        let j = transition_matrix(table.mu, table.dt)?;
        Ok(OptimalFilter {
            table,
            j,
            post: Posterior::point_mass(StateIndex::ZERO),
            last: StateIndex::ZERO,
            failed: false,
        })
    }

    pub fn posterior(&self) -> &Posterior {
        &self.post
    }
}

impl TrackingFilter for OptimalFilter {
    fn name(&self) -> &'static str {
        "optimal"
    }

    fn reset(&mut self, initial: StateIndex) {
        self.post = Posterior::point_mass(initial);
        self.last = initial;
        self.failed = false;
    }

    fn step(&mut self, m: MeasurementPair) -> StateIndex {
        if self.failed {
            return self.last;
        }
        match update(&self.post, m, &self.table, &self.j) {
            Ok(p) => {
                self.post = p;
                self.last = p.argmax();
            }
            Err(_) => self.failed = true,
        }
        self.last
    }

    fn failed(&self) -> bool {
        self.failed
    }
}
