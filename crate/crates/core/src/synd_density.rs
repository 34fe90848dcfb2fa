//! Densities of the interval-averaged syndromes.
//!
//! Everything here lives in the reference frame where the interval starts in
//! the `(+, +)` parity subspace. A different starting subspace only flips the
//! sign of the corresponding axis, so callers reflect instead of resampling.
//!
//! Errors on a single qubit give a Beta density in closed form. Everything
//! else is estimated by Monte Carlo into `2n x 2n` histograms on `[-1, 1]^2`,
//! one per error signature `(e1, e2, e3)`, and mixed with conditional Poisson
//! weights for a given net flip pattern.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::simulator::{alternating_gap_sum, merge_sorted};
use crate::state::FlipMask;

/// Normalized 2-D density of `(s1bar, s2bar)` for one error signature.
///
/// `bins[a * 2n + b]` covers `s1bar` in bin `a` and `s2bar` in bin `b`; each bin
/// is `1/n` wide. An axis flagged in `atoms` carries an exact point mass at
/// `+1` (no error touched that syndrome), stored in its last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SyndromeHistogram2D {
    pub n: usize,
    pub bins: Vec<f64>,
    pub counts_total: u64,
    pub error_signature: [u32; 3],
    pub atoms: [bool; 2],
}

impl SyndromeHistogram2D {
    pub fn side(&self) -> usize {
        2 * self.n
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.bins[a * self.side() + b]
    }

    /// Integral of the density over the square; 1 for a valid histogram.
    pub fn total(&self) -> f64 {
        let w = 1.0 / self.n as f64;
        self.bins.iter().sum::<f64>() * w * w
    }

    /// Density of `s1bar`, summed over `s2bar`.
    pub fn marginal_1(&self) -> Vec<f64> {
        let s = self.side();
        let w = 1.0 / self.n as f64;
        (0..s).map(|a| (0..s).map(|b| self.at(a, b)).sum::<f64>() * w).collect()
    }

    /// Density of `s2bar`, summed over `s1bar`.
    pub fn marginal_2(&self) -> Vec<f64> {
        let s = self.side();
        let w = 1.0 / self.n as f64;
        (0..s).map(|b| (0..s).map(|a| self.at(a, b)).sum::<f64>() * w).collect()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        bin_center(self.n, i)
    }
}

pub fn bin_center(n: usize, i: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) / n as f64
}

#[inline]
fn bin_of(n: usize, s: f64) -> usize {
    (((s + 1.0) * n as f64) as usize).min(2 * n - 1)
}

fn factorial(n: u32) -> f64 {
    (2..=n).map(f64::from).product()
}

/// Density of the syndrome average when `count >= 1` errors, all on qubits
/// that touch this syndrome, hit an interval that starts at sign `start_sign`.
pub fn single_qubit_density(sbar: f64, count: u32, start_sign: i8) -> Result<f64> {
    if count == 0 {
        return Err(Error::PointMass);
    }
    if !(-1.0..=1.0).contains(&sbar) {
        return Err(Error::param("sbar", format!("{sbar} outside [-1, 1]")));
    }
    if start_sign.abs() != 1 {
        return Err(Error::param("start_sign", format!("{start_sign} is not a sign")));
    }
    let hi = count / 2;
    let lo = (count - 1) / 2;
    let s = sbar * start_sign as f64;
    let norm = factorial(count) / (2.0 * factorial(hi) * factorial(lo));
    Ok(norm * ((1.0 + s) / 2.0).powi(hi as i32) * ((1.0 - s) / 2.0).powi(lo as i32))
}

/// Joint density of both syndrome averages when each qubit flips exactly once
/// in an interval starting at `(+, +)`.
pub fn piecewise_density_111(s1bar: f64, s2bar: f64) -> f64 {
    (0.25 * (1.0 + s1bar.min(s2bar) + (s1bar + s2bar).max(0.0))).max(0.0)
}

type Times = SmallVec<[f64; 8]>;

fn sorted_uniforms<R: Rng + ?Sized>(count: u32, rng: &mut R, out: &mut Times) {
    out.clear();
    for _ in 0..count {
        out.push(rng.random::<f64>());
    }
    out.sort_unstable_by(f64::total_cmp);
}

/// One Monte Carlo draw of `(s1bar, s2bar)` in the reference frame.
fn sample_means<R: Rng + ?Sized>(sig: [u32; 3], rng: &mut R, t: &mut [Times; 3]) -> (f64, f64) {
    for q in 0..3 {
        sorted_uniforms(sig[q], rng, &mut t[q]);
    }
    let s1 = alternating_gap_sum(merge_sorted(&t[0], &t[1]));
    let s2 = alternating_gap_sum(merge_sorted(&t[1], &t[2]));
    (s1, s2)
}

fn check_histogram_args(n: usize, samples: u64) -> Result<()> {
    if n < 8 {
        return Err(Error::param("n", format!("need at least 8, got {n}")));
    }
    if samples < 10_000 {
        return Err(Error::param("samples", format!("need at least 1e4, got {samples}")));
    }
    Ok(())
}

fn finish_histogram(sig: [u32; 3], n: usize, samples: u64, counts: Vec<u64>) -> SyndromeHistogram2D {
    let scale = (n * n) as f64 / samples as f64;
    SyndromeHistogram2D {
        n,
        bins: counts.into_iter().map(|c| c as f64 * scale).collect(),
        counts_total: samples,
        error_signature: sig,
        atoms: [sig[0] + sig[1] == 0, sig[1] + sig[2] == 0],
    }
}

fn fill_counts<R: Rng + ?Sized>(sig: [u32; 3], n: usize, samples: u64, rng: &mut R, counts: &mut [u64]) {
    let side = 2 * n;
    let mut t: [Times; 3] = Default::default();
    for _ in 0..samples {
        let (s1, s2) = sample_means(sig, rng, &mut t);
        counts[bin_of(n, s1) * side + bin_of(n, s2)] += 1;
    }
}

/// Histogram of the syndrome means for error signature `sig`, drawing from `rng`.
pub fn estimate_histogram<R: Rng + ?Sized>(
    sig: [u32; 3],
    n: usize,
    samples: u64,
    rng: &mut R,
) -> Result<SyndromeHistogram2D> {
    check_histogram_args(n, samples)?;
    let mut counts = vec![0u64; 4 * n * n];
    fill_counts(sig, n, samples, rng, &mut counts);
    Ok(finish_histogram(sig, n, samples, counts))
}

const CHUNK: u64 = 1 << 16;

/// Parallel, thread-count independent variant of [`estimate_histogram`].
///
/// Samples are drawn in fixed chunks; chunk `c` reads the signature's stream
/// from word `c * 2^40` on, so the result depends only on `(sig, n, samples, seed)`.
pub fn estimate_histogram_seeded(sig: [u32; 3], n: usize, samples: u64, seed: u64) -> Result<SyndromeHistogram2D> {
    check_histogram_args(n, samples)?;
    let chunks = samples.div_ceil(CHUNK);
    let cells = 4 * n * n;
    let counts = (0..chunks)
        .into_par_iter()
        .fold(
            || vec![0u64; cells],
            |mut acc, c| {
                let mut r: StreamRng = rng::stream(seed, rng::signature_stream(sig));
                r.set_word_pos((c as u128) << 40);
                let len = CHUNK.min(samples - c * CHUNK);
                fill_counts(sig, n, len, &mut r, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0u64; cells],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(finish_histogram(sig, n, samples, counts))
}

/// Upper tail `P(X > n)` of a Poisson variable with mean `lambda`.
pub fn poisson_tail(lambda: f64, n: u32) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let mut term = (-lambda).exp();
    for j in 1..=n + 1 {
        term *= lambda / j as f64;
    }
    let mut sum = 0.0;
    let mut j = n + 1;
    while term > sum * 1e-17 && j < n + 400 {
        sum += term;
        j += 1;
        term *= lambda / j as f64;
    }
    sum
}

/// Smallest total error count `N >= 3` whose Poisson(`3 mu T`) tail beyond `N`
/// is below `1e-6`.
pub fn choose_n_max(max_mu_t: f64) -> u32 {
    let lambda = 3.0 * max_mu_t;
    (3..).find(|&n| poisson_tail(lambda, n) < 1e-6).unwrap()
}

/// All signatures with total count at most `n_max`.
pub fn signatures(n_max: u32) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for e1 in 0..=n_max {
        for e2 in 0..=n_max - e1 {
            for e3 in 0..=n_max - e1 - e2 {
                out.push([e1, e2, e3]);
            }
        }
    }
    out
}

/// Histograms for every signature up to `n_max` total errors.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBank {
    pub n: usize,
    pub samples: u64,
    pub seed: u64,
    pub n_max: u32,
    pub histograms: BTreeMap<[u32; 3], SyndromeHistogram2D>,
}

const MAGIC: &[u8; 4] = b"CQHB";
const VERSION: u32 = 1;

impl HistogramBank {
    pub fn build(n: usize, samples: u64, seed: u64, n_max: u32) -> Result<Self> {
        let sigs = signatures(n_max);
        let hists = sigs
            .par_iter()
            .map(|&s| estimate_histogram_seeded(s, n, samples, seed).map(|h| (s, h)))
            .collect::<Result<Vec<_>>>()?;
        Ok(HistogramBank {
            n,
            samples,
            seed,
            n_max,
            histograms: hists.into_iter().collect(),
        })
    }

    pub fn get(&self, sig: [u32; 3]) -> Result<&SyndromeHistogram2D> {
        self.histograms.get(&sig).ok_or(Error::MissingHistogram(sig))
    }

    pub fn file_name(n: usize, samples: u64, seed: u64, n_max: u32) -> String {
        format!("hist_n{n}_s{samples}_seed{seed}_N{n_max}.bin")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.n as u64)?;
        w.write_u64::<LittleEndian>(self.samples)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.n_max)?;
        w.write_u64::<LittleEndian>(self.histograms.len() as u64)?;
        for h in self.histograms.values() {
            for e in h.error_signature {
                w.write_u32::<LittleEndian>(e)?;
            }
            w.write_u8(h.atoms[0] as u8 | (h.atoms[1] as u8) << 1)?;
            w.write_u64::<LittleEndian>(h.counts_total)?;
            for &b in &h.bins {
                w.write_f64::<LittleEndian>(b)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Cache("not a histogram bank file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Cache(format!("unsupported version {version}")));
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let samples = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n_max = r.read_u32::<LittleEndian>()?;
        let count = r.read_u64::<LittleEndian>()?;
        let cells = 4 * n * n;
        let mut histograms = BTreeMap::new();
        for _ in 0..count {
            let mut sig = [0u32; 3];
            for e in &mut sig {
                *e = r.read_u32::<LittleEndian>()?;
            }
            let flags = r.read_u8()?;
            let counts_total = r.read_u64::<LittleEndian>()?;
            let mut bins = vec![0.0; cells];
            r.read_f64_into::<LittleEndian>(&mut bins)?;
            histograms.insert(
                sig,
                SyndromeHistogram2D {
                    n,
                    bins,
                    counts_total,
                    error_signature: sig,
                    atoms: [flags & 1 != 0, flags & 2 != 0],
                },
            );
        }
        Ok(HistogramBank {
            n,
            samples,
            seed,
            n_max,
            histograms,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::file_name(self.n, self.samples, self.seed, self.n_max));
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Reuse a cached bank with at least `n_max` in `dir`, or build and store one.
    /// Histograms do not depend on `n_max`, so a larger cached bank is trimmed.
    pub fn load_or_build(dir: Option<&Path>, n: usize, samples: u64, seed: u64, n_max: u32) -> Result<Self> {
        let Some(dir) = dir else {
            return Self::build(n, samples, seed, n_max);
        };
        if let Some(path) = Self::find_cached(dir, n, samples, seed, n_max) {
            if let Ok(mut bank) = Self::load(&path) {
                bank.histograms.retain(|s, _| s.iter().sum::<u32>() <= n_max);
                bank.n_max = n_max;
                return Ok(bank);
            }
        }
        let bank = Self::build(n, samples, seed, n_max)?;
        bank.save(dir)?;
        Ok(bank)
    }

    fn find_cached(dir: &Path, n: usize, samples: u64, seed: u64, n_max: u32) -> Option<PathBuf> {
        let prefix = format!("hist_n{n}_s{samples}_seed{seed}_N");
        fs::read_dir(dir)
            .ok()?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let stored: u32 = name.strip_prefix(&prefix)?.strip_suffix(".bin")?.parse().ok()?;
                (stored >= n_max).then(|| (stored, e.path()))
            })
            .min_by_key(|(stored, _)| *stored)
            .map(|(_, p)| p)
    }
}

/// Conditional probabilities `P(e | e has parity `odd`)` for a Poisson(`mu_t`)
/// count, for `e` in `0..=n_max`.
fn conditional_poisson(mu_t: f64, odd: bool, n_max: u32) -> Vec<f64> {
    let parity_prob = if odd {
        -(-2.0 * mu_t).exp_m1() / 2.0
    } else {
        1.0 + (-2.0 * mu_t).exp_m1() / 2.0
    };
    let mut out = Vec::with_capacity(n_max as usize + 1);
    let mut p = (-mu_t).exp();
    for e in 0..=n_max {
        if e > 0 {
            p *= mu_t / e as f64;
        }
        out.push(if (e % 2 == 1) == odd { p / parity_prob } else { 0.0 });
    }
    out
}

/// Mixture density of the syndrome means for one net flip pattern, kept in
/// four parts by which axes are exact point masses (bit 1: axis 1, bit 0: axis 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedDensity {
    pub n: usize,
    pub flip: FlipMask,
    /// Probability of the retained signatures before renormalization.
    pub retained: f64,
    /// Density grids per atom kind, each weighted by its share of the mixture.
    /// Empty when no retained signature has that kind.
    pub parts: [Vec<f64>; 4],
}

impl ComposedDensity {
    pub fn part_atoms(kind: usize) -> [bool; 2] {
        [kind & 2 != 0, kind & 1 != 0]
    }

    /// All parts summed into one histogram (point masses end up in boundary bins).
    pub fn merged(&self) -> SyndromeHistogram2D {
        let mut bins = vec![0.0; 4 * self.n * self.n];
        for p in self.parts.iter().filter(|p| !p.is_empty()) {
            bins.iter_mut().zip(p).for_each(|(b, x)| *b += x);
        }
        let atoms = [
            self.parts.iter().enumerate().all(|(k, p)| p.is_empty() || k & 2 != 0),
            self.parts.iter().enumerate().all(|(k, p)| p.is_empty() || k & 1 != 0),
        ];
        SyndromeHistogram2D {
            n: self.n,
            bins,
            counts_total: 0,
            error_signature: [0; 3],
            atoms,
        }
    }
}

/// Density of the syndrome means given the net flip pattern of an interval,
/// in the `(+, +)` start frame. Only signatures with at most `n_max` errors
/// are kept, and their conditional Poisson weights are renormalized.
pub fn compose_conditional_density(flip: FlipMask, mu: f64, dt: f64, bank: &HistogramBank, n_max: u32) -> Result<ComposedDensity> {
    let mu_t = mu * dt;
    if !(mu_t >= 0.0) {
        return Err(Error::param("mu_t", "must be >= 0"));
    }
    let odd = [0, 1, 2].map(|q| flip.bits() & (4 >> q) != 0);
    let w = odd.map(|o| conditional_poisson(mu_t, o, n_max));
    let n = bank.n;
    let mut parts: [Vec<f64>; 4] = Default::default();
    let mut retained = 0.0;
    for sig in signatures(n_max) {
        let weight = w[0][sig[0] as usize] * w[1][sig[1] as usize] * w[2][sig[2] as usize];
        if weight == 0.0 {
            continue;
        }
        let h = bank.get(sig)?;
        if h.n != n {
            return Err(Error::ConfigMismatch(format!("histogram resolution {} vs bank {}", h.n, n)));
        }
        let kind = (h.atoms[0] as usize) << 1 | h.atoms[1] as usize;
        let part = &mut parts[kind];
        if part.is_empty() {
            part.resize(4 * n * n, 0.0);
        }
        part.iter_mut().zip(&h.bins).for_each(|(p, b)| *p += weight * b);
        retained += weight;
    }
    if retained <= 0.0 {
        return Err(Error::param("n_max", "no signature compatible with the flip pattern"));
    }
    for p in &mut parts {
        p.iter_mut().for_each(|x| *x /= retained);
    }
    Ok(ComposedDensity {
        n,
        flip,
        retained,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_error_is_flat_half() {
        for s in [-1.0, -0.3, 0.0, 0.9, 1.0] {
            assert_eq!(single_qubit_density(s, 1, 1).unwrap(), 0.5);
            assert_eq!(single_qubit_density(s, 1, -1).unwrap(), 0.5);
        }
    }

    #[test]
    fn two_errors_linear_ramp() {
        for s in [-1.0, -0.5, 0.2, 1.0] {
            assert!((single_qubit_density(s, 2, 1).unwrap() - (1.0 + s) / 2.0).abs() < 1e-15);
            assert!((single_qubit_density(s, 2, -1).unwrap() - (1.0 - s) / 2.0).abs() < 1e-15);
        }
        assert_eq!(single_qubit_density(1.0, 2, 1).unwrap(), 1.0);
    }

    #[test]
    fn zero_errors_is_a_point_mass() {
        assert_eq!(single_qubit_density(0.0, 0, 1), Err(Error::PointMass));
        assert!(single_qubit_density(1.5, 2, 1).is_err());
    }

    #[test]
    fn triple_flip_density_values() {
        assert_eq!(piecewise_density_111(1.0, 1.0), 1.0);
        assert_eq!(piecewise_density_111(0.0, 0.0), 0.25);
        assert_eq!(piecewise_density_111(-1.0, -1.0), 0.0);
        assert_eq!(piecewise_density_111(-1.0, 1.0), 0.0);
        assert_eq!(piecewise_density_111(0.5, -0.5), 0.125);
    }

    #[test]
    fn signature_enumeration() {
        assert_eq!(signatures(0), vec![[0, 0, 0]]);
        assert_eq!(signatures(3).len(), 20);
        assert!(signatures(4).iter().all(|s| s.iter().sum::<u32>() <= 4));
    }

    #[test]
    fn poisson_tail_matches_complement() {
        let lambda: f64 = 0.7;
        let mut cdf = 0.0;
        let mut p = (-lambda).exp();
        for j in 0..=3u32 {
            if j > 0 {
                p *= lambda / j as f64;
            }
            cdf += p;
        }
        assert!((poisson_tail(lambda, 3) - (1.0 - cdf)).abs() < 1e-14);
        assert_eq!(choose_n_max(1e-5), 3);
        assert!(poisson_tail(0.3, choose_n_max(0.1)) < 1e-6);
        assert!(poisson_tail(0.3, choose_n_max(0.1) - 1) >= 1e-6);
    }

    #[test]
    fn zero_signature_is_corner_point_mass() {
        let mut r = rng::stream(3, 0);
        let h = estimate_histogram([0, 0, 0], 10, 10_000, &mut r).unwrap();
        assert_eq!(h.atoms, [true, true]);
        assert!((h.at(19, 19) - 100.0).abs() < 1e-9);
        assert!((h.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seeded_histogram_is_reproducible() {
        let a = estimate_histogram_seeded([1, 0, 2], 8, 200_000, 4).unwrap();
        let b = estimate_histogram_seeded([1, 0, 2], 8, 200_000, 4).unwrap();
        assert_eq!(a, b);
        assert!((a.total() - 1.0).abs() < 1e-9);
        assert!(a.bins.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn bank_round_trips_through_bytes() {
        let bank = HistogramBank::build(8, 10_000, 1, 3).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        let back = HistogramBank::read_from(&buf[..]).unwrap();
        assert_eq!(bank, back);
        assert!(HistogramBank::read_from(&buf[..10]).is_err());
    }

    #[test]
    fn conditional_poisson_normalizes() {
        for odd in [false, true] {
            let w = conditional_poisson(0.3, odd, 40);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composed_density_integrates_to_one() {
        let bank = HistogramBank::build(8, 10_000, 2, 4).unwrap();
        let j = crate::markov::transition_matrix(1.0, 0.1).unwrap();
        let mut kept = 0.0;
        for f in 0..8 {
            let c = compose_conditional_density(FlipMask::from_bits(f).unwrap(), 1.0, 0.1, &bank, 4).unwrap();
            assert!((c.merged().total() - 1.0).abs() < 1e-9);
            kept += j.j[0][f as usize] * c.retained;
        }
        // unconditional mass of the kept signatures
        assert!((kept - (1.0 - poisson_tail(0.3, 4))).abs() < 1e-12);
        assert!(kept >= 0.9999);
    }

    #[test]
    fn missing_histogram_reported() {
        let mut bank = HistogramBank::build(8, 10_000, 2, 3).unwrap();
        bank.histograms.remove(&[1, 0, 0]);
        let e = compose_conditional_density(FlipMask::from_bits(4).unwrap(), 1.0, 0.1, &bank, 3);
        assert_eq!(e, Err(Error::MissingHistogram([1, 0, 0])));
    }
}
