//! Deterministic noise generation for the driving Brownian motion and the
//! finite-mark Poisson random measure.
//!
//! All randomness is produced by a counter-based generator: every variate is
//! a pure function of `(seed, path, channel, index)`. This makes generation
//! order-independent, so path loops can run on any number of threads and a
//! bundle with more paths extends a smaller one without reshuffling the
//! paths they share.
//!
//! Per path the bundle holds:
//!
//! * Brownian increments `dW_k ~ N(0, dt)`, one per step, via the inverse
//!   normal CDF applied to the uniform stream;
//! * the exact jump times in `(0, T]` with their mark indices (the total
//!   count is Poisson with mean `lambda * T`; given the count, times are
//!   i.i.d. uniform and marks are categorical with probabilities
//!   `nu_j / lambda`);
//! * per-step jump tallies `dN_{k,j}` derived from the exact times, where a
//!   jump at time `t` belongs to step `k` when `t` lies in `(t_k, t_{k+1}]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MarkGrid, ScalarGrid};
use crate::markspace::MarkSpace;
use crate::numeric::KahanSum;

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Uniform time grid on `[0, T]` with `n_steps` steps.
///
/// Knot `k` is `k * dt` except the last knot, which is pinned to `T` exactly
/// so accumulated rounding cannot move the terminal time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Knot time `t_k`, with `t_K = T` exact.
    pub fn knot(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Step index holding time `t` under the convention `t in (t_k, t_{k+1}]`.
    pub fn step_of(&self, t: f64) -> usize {
        let k = (t / self.dt).ceil() as isize - 1;
        (k.max(0) as usize).min(self.n_steps - 1)
    }
}

// ---------------------------------------------------------------------------
// Counter-based generator
// ---------------------------------------------------------------------------

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a bijective 64-bit mixer with full avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Variate channels. Each (path, channel, index) triple owns one u64 draw.
#[derive(Clone, Copy)]
enum Channel {
    Brownian = 0,
    JumpCount = 1,
    JumpTime = 2,
    JumpMark = 3,
    /// Side channel for non-path uses (validation sampling, shuffles).
    Aux = 6,
}

#[inline]
fn counter_word(seed: u64, path: u64, channel: u64, index: u64) -> u64 {
    let mut h = seed.wrapping_add(GOLDEN);
    h = mix64(h ^ path.wrapping_mul(0xa24b_aed4_963e_e407));
    h = mix64(h ^ channel.wrapping_mul(0x9fb2_1c65_1e98_df25));
    h = mix64(h ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    mix64(h)
}

/// Deterministic auxiliary uniform in (0, 1) for non-path sampling needs.
pub(crate) fn aux_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    uniform_open(counter_word(seed, stream, Channel::Aux as u64, index))
}

/// Uniform in the open interval (0, 1): 53 significant bits, never 0 or 1.
#[inline]
fn uniform_open(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Inverse standard normal CDF (Wichura's rational approximations; relative
/// error below 1e-15 over (0, 1)).
// The published coefficients carry more digits than f64 resolves; keep them
// verbatim so the implementation can be diffed against the reference tables.
#[allow(clippy::excessive_precision)]
pub fn standard_normal_quantile(u: f64) -> f64 {
    debug_assert!(u > 0.0 && u < 1.0, "quantile needs u in (0,1), got {u}");
    let q = u - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987_1e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_608;
        let den = ((((((5.226_495_278_852_545_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let r = if q < 0.0 { u } else { 1.0 - u };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_132e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Poisson quantile by CDF inversion; exact for the moderate means used here.
fn poisson_count(u: f64, mean: f64) -> usize {
    debug_assert!(mean > 0.0);
    let cap = (mean + 40.0 * mean.sqrt() + 64.0) as usize;
    let mut k = 0usize;
    let mut pmf = (-mean).exp();
    let mut cdf = pmf;
    while u > cdf && k < cap {
        k += 1;
        pmf *= mean / k as f64;
        cdf += pmf;
    }
    k
}

/// Categorical mark index with probabilities `nu_j / lambda`.
fn categorical_mark(u: f64, ms: &MarkSpace) -> u32 {
    let target = u * ms.total_intensity();
    let mut cum = 0.0;
    for (j, &w) in ms.weights().iter().enumerate() {
        cum += w;
        if target <= cum {
            return j as u32;
        }
    }
    (ms.len() - 1) as u32
}

// ---------------------------------------------------------------------------
// Noise bundle
// ---------------------------------------------------------------------------

/// One ensemble of driving noise: Brownian increments, exact jump events,
/// and per-step jump tallies, for `n_paths` paths on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    markspace: MarkSpace,
    seed: u64,
    n_paths: usize,
    /// `dW_k` per (path, step).
    dw: ScalarGrid,
    /// Jump tallies per (path, step, mark); integer-valued.
    dn: MarkGrid,
    /// CSR layout of exact jump events, sorted by time within each path.
    jump_offsets: Vec<usize>,
    jump_times: Vec<f64>,
    jump_marks: Vec<u32>,
}

impl NoiseBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn markspace(&self) -> &MarkSpace {
        &self.markspace
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> f64 {
        self.dw.get(path, step)
    }

    /// Jump tally of mark `j` in step `k` of `path`.
    #[inline]
    pub fn dn(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.dn.get(path, step, mark)
    }

    /// All tallies at one (path, step), as a mark vector.
    #[inline]
    pub fn dn_at(&self, path: usize, step: usize) -> &[f64] {
        self.dn.at(path, step)
    }

    /// Whether any jump (of any mark) lands in this step of this path.
    #[inline]
    pub fn step_has_jump(&self, path: usize, step: usize) -> bool {
        self.dn.at(path, step).iter().any(|&c| c > 0.0)
    }

    /// Exact jump events of one path: `(time, mark index)`, time-sorted.
    pub fn jumps(&self, path: usize) -> impl Iterator<Item = (f64, u32)> + '_ {
        let lo = self.jump_offsets[path];
        let hi = self.jump_offsets[path + 1];
        self.jump_times[lo..hi]
            .iter()
            .copied()
            .zip(self.jump_marks[lo..hi].iter().copied())
    }

    pub fn total_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Integral of the mark vector `v` against the compensated jump measure
    /// over step `k`: `Σ_j v_j dN_{k,j} - dt Σ_j nu_j v_j`.
    pub fn compensated_increment(&self, path: usize, step: usize, v: &[f64]) -> f64 {
        let tallies = self.dn.at(path, step);
        debug_assert_eq!(v.len(), tallies.len());
        let mut jump_part = KahanSum::new();
        for (&c, &x) in tallies.iter().zip(v) {
            if c != 0.0 {
                jump_part.add(c * x);
            }
        }
        jump_part.value() - self.grid.dt() * self.markspace.integrate(v)
    }

    /// Content hash of the generation parameters (not the sampled arrays);
    /// embedded in reports so outputs are traceable to their noise.
    pub fn params_hash(&self) -> String {
        noise_params_hash(self.seed, self.n_paths, &self.grid, &self.markspace)
    }

    /// Binary audit dump: little-endian header
    /// `(seed, n_steps, n_paths, n_marks)` as u64, then the `dW` array as
    /// f64 (path-major), then the `dN` tallies as u64 (path, step, mark).
    pub fn write_binary(&self, w: &mut impl std::io::Write) -> Result<()> {
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.grid.n_steps() as u64).to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.markspace.len() as u64).to_le_bytes())?;
        for &x in self.dw.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        for &c in self.dn.as_slice() {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Raw arrays recovered from a binary audit dump.
pub struct NoiseAudit {
    pub seed: u64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub n_marks: usize,
    pub dw: Vec<f64>,
    pub dn: Vec<u64>,
}

/// Reads back a dump produced by [`NoiseBundle::write_binary`].
pub fn read_binary_audit(r: &mut impl std::io::Read) -> Result<NoiseAudit> {
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut dyn std::io::Read| -> Result<u64> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let seed = read_u64(r)?;
    let n_steps = read_u64(r)? as usize;
    let n_paths = read_u64(r)? as usize;
    let n_marks = read_u64(r)? as usize;
    let mut dw = vec![0.0; n_paths * n_steps];
    let mut buf = [0u8; 8];
    for x in dw.iter_mut() {
        r.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    let mut dn = vec![0u64; n_paths * n_steps * n_marks];
    for c in dn.iter_mut() {
        r.read_exact(&mut buf)?;
        *c = u64::from_le_bytes(buf);
    }
    Ok(NoiseAudit {
        seed,
        n_steps,
        n_paths,
        n_marks,
        dw,
        dn,
    })
}

/// Content hash of a noise parameter set, computable without generating the
/// bundle; [`NoiseBundle::params_hash`] returns the same digest for a bundle
/// generated from these parameters.
pub fn noise_params_hash(
    seed: u64,
    n_paths: usize,
    grid: &TimeGrid,
    markspace: &MarkSpace,
) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((n_paths as u64).to_le_bytes());
    h.update((grid.n_steps() as u64).to_le_bytes());
    h.update(grid.horizon().to_le_bytes());
    h.update((markspace.len() as u64).to_le_bytes());
    for (&e, &w) in markspace.marks().iter().zip(markspace.weights()) {
        h.update(e.to_le_bytes());
        h.update(w.to_le_bytes());
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Generates the driving noise for `n_paths` paths.
///
/// Path `p` draws exclusively from counters keyed by `(seed, p)`, so the
/// first `n` paths of a larger bundle coincide with an `n`-path bundle and
/// the fill order (and thread count) cannot change any value.
pub fn generate_noise(
    grid: &TimeGrid,
    ms: &MarkSpace,
    n_paths: usize,
    seed: u64,
) -> Result<NoiseBundle> {
    if n_paths == 0 {
        return Err(Error::EmptyEnsemble("n_paths must be at least 1".into()));
    }
    let k = grid.n_steps();
    let m = ms.len();
    let sqrt_dt = grid.dt().sqrt();
    let jump_mean = ms.total_intensity() * grid.horizon();

    // Brownian increments, one row per path.
    let mut dw = ScalarGrid::zeros(n_paths, k);
    dw.as_mut_slice()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(p, row)| {
            for (step, slot) in row.iter_mut().enumerate() {
                let u = uniform_open(counter_word(seed, p as u64, Channel::Brownian as u64, step as u64));
                *slot = sqrt_dt * standard_normal_quantile(u);
            }
        });

    // Exact jump events per path (count, then conditional uniform times and
    // categorical marks), sorted by time.
    let events: Vec<Vec<(f64, u32)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let pu = uniform_open(counter_word(seed, p as u64, Channel::JumpCount as u64, 0));
            let count = poisson_count(pu, jump_mean);
            let mut ev: Vec<(f64, u32)> = (0..count)
                .map(|i| {
                    let tu =
                        uniform_open(counter_word(seed, p as u64, Channel::JumpTime as u64, i as u64));
                    let mu =
                        uniform_open(counter_word(seed, p as u64, Channel::JumpMark as u64, i as u64));
                    (tu * grid.horizon(), categorical_mark(mu, ms))
                })
                .collect();
            ev.sort_by(|a, b| a.0.total_cmp(&b.0));
            ev
        })
        .collect();

    // Tallies derived from the exact times.
    let mut dn = MarkGrid::zeros(n_paths, k, m);
    dn.as_mut_slice()
        .par_chunks_mut(k * m)
        .zip(events.par_iter())
        .for_each(|(block, ev)| {
            for &(t, mark) in ev {
                let step = grid.step_of(t);
                block[step * m + mark as usize] += 1.0;
            }
        });

    // CSR assembly in path order.
    let mut jump_offsets = Vec::with_capacity(n_paths + 1);
    jump_offsets.push(0usize);
    let total: usize = events.iter().map(Vec::len).sum();
    let mut jump_times = Vec::with_capacity(total);
    let mut jump_marks = Vec::with_capacity(total);
    for ev in &events {
        for &(t, mark) in ev {
            jump_times.push(t);
            jump_marks.push(mark);
        }
        jump_offsets.push(jump_times.len());
    }

    Ok(NoiseBundle {
        grid: *grid,
        markspace: ms.clone(),
        seed,
        n_paths,
        dw,
        dn,
        jump_offsets,
        jump_times,
        jump_marks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::mean_se;

    fn ms2() -> MarkSpace {
        MarkSpace::new(vec![-0.5, 1.0], vec![0.4, 0.6]).unwrap()
    }

    #[test]
    fn grid_pins_terminal_knot() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.knot(3), 1.0, "last knot must be the horizon exactly");
        assert!((g.knot(1) - 1.0 / 3.0).abs() < 1e-16);
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn step_of_respects_half_open_bins() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.step_of(0.25), 0, "boundary time belongs to the earlier step");
        assert_eq!(g.step_of(0.2500001), 1);
        assert_eq!(g.step_of(1e-12), 0);
        assert_eq!(g.step_of(1.0), 3);
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert_eq!(standard_normal_quantile(0.5), 0.0);
        let cases = [
            (0.975, 1.959963984540054),
            (0.8413447460685429, 1.0),
            (0.9986501019683699, 3.0),
            (1e-10, -6.361340902404056),
        ];
        for (u, x) in cases {
            let got = standard_normal_quantile(u);
            assert!(
                (got - x).abs() <= 1e-9 * (1.0 + x.abs()),
                "quantile({u}) = {got}, want {x}"
            );
            let sym = standard_normal_quantile(1.0 - u);
            assert!(
                (sym + x).abs() <= 1e-8 * (1.0 + x.abs()),
                "quantile must be antisymmetric about 1/2"
            );
        }
    }

    #[test]
    fn poisson_inversion_matches_cdf() {
        // u just below / above the CDF knots flips the count.
        let mean = 2.0f64;
        let p0 = (-mean).exp();
        assert_eq!(poisson_count(p0 * 0.999, mean), 0);
        assert_eq!(poisson_count(p0 * 1.001, mean), 1);
        let p01 = p0 + p0 * mean; // P(N <= 1)
        assert_eq!(poisson_count(p01 * 0.999, mean), 1);
        assert_eq!(poisson_count(p01 * 1.001, mean), 2);
        // Far tail stays finite.
        assert!(poisson_count(1.0 - 1e-16, mean) < 100);
    }

    #[test]
    fn same_seed_reproduces_identical_bundle() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let ms = ms2();
        let a = generate_noise(&g, &ms, 50, 7).unwrap();
        let b = generate_noise(&g, &ms, 50, 7).unwrap();
        assert_eq!(a, b, "same parameters must reproduce the bundle bit-for-bit");
        let c = generate_noise(&g, &ms, 50, 8).unwrap();
        assert_ne!(a, c, "different seed must change the noise");
    }

    #[test]
    fn path_prefix_is_stable_under_growth() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let ms = ms2();
        let small = generate_noise(&g, &ms, 20, 123).unwrap();
        let large = generate_noise(&g, &ms, 60, 123).unwrap();
        for p in 0..20 {
            for k in 0..8 {
                assert_eq!(small.dw(p, k), large.dw(p, k));
                assert_eq!(small.dn_at(p, k), large.dn_at(p, k));
            }
            let a: Vec<_> = small.jumps(p).collect();
            let b: Vec<_> = large.jumps(p).collect();
            assert_eq!(a, b, "jump events of path {p} must not depend on n_paths");
        }
    }

    #[test]
    fn tallies_match_exact_jump_times() {
        let g = TimeGrid::new(2.0, 10).unwrap();
        let ms = ms2();
        let bundle = generate_noise(&g, &ms, 200, 99).unwrap();
        for p in 0..200 {
            let mut recount = [0.0; 10 * 2];
            for (t, mark) in bundle.jumps(p) {
                assert!(t > 0.0 && t <= 2.0, "jump time {t} outside (0, T]");
                recount[g.step_of(t) * 2 + mark as usize] += 1.0;
            }
            for k in 0..10 {
                assert_eq!(
                    bundle.dn_at(p, k),
                    &recount[k * 2..(k + 1) * 2],
                    "tallies must be derived from the exact times (path {p}, step {k})"
                );
            }
        }
    }

    #[test]
    fn brownian_moments_and_quadratic_variation() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let ms = MarkSpace::single(1.0);
        let bundle = generate_noise(&g, &ms, 200, 2024).unwrap();
        // Quadratic variation per path concentrates at T.
        let qv: Vec<f64> = (0..200)
            .map(|p| (0..1000).map(|k| bundle.dw(p, k).powi(2)).sum())
            .collect();
        let (mean_qv, _) = mean_se(&qv);
        assert!(
            (mean_qv - 1.0).abs() < 0.05,
            "mean quadratic variation {mean_qv} deviates from T=1 by more than 5%"
        );
        // Increment mean is 0 within 3 standard errors.
        let mut all = Vec::with_capacity(200 * 1000);
        for p in 0..200 {
            for k in 0..1000 {
                all.push(bundle.dw(p, k));
            }
        }
        let (m, se) = mean_se(&all);
        assert!(m.abs() <= 3.0 * se, "dW mean {m} exceeds 3 se {se}");
    }

    #[test]
    fn jump_counts_and_marks_follow_the_intensity() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let ms = ms2(); // lambda = 1
        let n = 20_000;
        let bundle = generate_noise(&g, &ms, n, 5).unwrap();
        let counts: Vec<f64> = (0..n).map(|p| bundle.jumps(p).count() as f64).collect();
        let (mean, se) = mean_se(&counts);
        assert!(
            (mean - 1.0).abs() <= 3.0 * se,
            "jump count mean {mean} (se {se}) deviates from lambda*T = 1"
        );
        // Mark-0 frequency should be nu_0 / lambda = 0.4.
        let mut mark0 = 0usize;
        let mut total = 0usize;
        for p in 0..n {
            for (_, mark) in bundle.jumps(p) {
                total += 1;
                if mark == 0 {
                    mark0 += 1;
                }
            }
        }
        let freq = mark0 as f64 / total as f64;
        let se_freq = (0.4 * 0.6 / total as f64).sqrt();
        assert!(
            (freq - 0.4).abs() <= 3.0 * se_freq,
            "mark-0 frequency {freq} deviates from 0.4"
        );
    }

    #[test]
    fn compensated_increment_is_centered() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let ms = ms2();
        let n = 10_000;
        let bundle = generate_noise(&g, &ms, n, 31).unwrap();
        let v = [2.0, -1.0];
        // Per-path sum over steps of the compensated integral.
        let sums: Vec<f64> = (0..n)
            .map(|p| (0..20).map(|k| bundle.compensated_increment(p, k, &v)).sum())
            .collect();
        let (mean, se) = mean_se(&sums);
        assert!(
            mean.abs() <= 3.0 * se,
            "compensated sum mean {mean} exceeds 3 se {se}; martingale property violated"
        );
        // Exact formula on a single step.
        let p = 3;
        let manual = v[0] * bundle.dn(p, 4, 0) + v[1] * bundle.dn(p, 4, 1)
            - g.dt() * (0.4 * v[0] + 0.6 * v[1]);
        assert!((bundle.compensated_increment(p, 4, &v) - manual).abs() < 1e-15);
    }

    #[test]
    fn brownian_and_jump_components_uncorrelated() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let ms = ms2();
        let bundle = generate_noise(&g, &ms, 500, 77).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for p in 0..500 {
            for k in 0..100 {
                xs.push(bundle.dw(p, k));
                ys.push(bundle.dn_at(p, k).iter().sum::<f64>());
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!(
            corr.abs() <= 3.0 / n.sqrt(),
            "corr(dW, jump tally) = {corr} exceeds 3/sqrt(n)"
        );
    }

    #[test]
    fn binary_dump_round_trips() {
        let g = TimeGrid::new(1.0, 6).unwrap();
        let ms = ms2();
        let bundle = generate_noise(&g, &ms, 9, 11).unwrap();
        let mut buf = Vec::new();
        bundle.write_binary(&mut buf).unwrap();
        assert_eq!(
            buf.len(),
            4 * 8 + 9 * 6 * 8 + 9 * 6 * 2 * 8,
            "dump layout: 4-word header + dW + dN"
        );
        let audit = read_binary_audit(&mut buf.as_slice()).unwrap();
        assert_eq!(audit.seed, 11);
        assert_eq!((audit.n_steps, audit.n_paths, audit.n_marks), (6, 9, 2));
        for p in 0..9 {
            for k in 0..6 {
                assert_eq!(audit.dw[p * 6 + k], bundle.dw(p, k));
                for j in 0..2 {
                    assert_eq!(
                        audit.dn[(p * 6 + k) * 2 + j],
                        bundle.dn(p, k, j) as u64
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_empty_ensemble() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert!(matches!(
            generate_noise(&g, &MarkSpace::single(0.0), 0, 1),
            Err(Error::EmptyEnsemble(_))
        ));
    }
}
