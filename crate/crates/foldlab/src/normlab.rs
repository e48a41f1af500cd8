//! Numerical operator-norm experiments for the dyadic pieces.
//!
//! Models with `S = x' − Φ(x3, y3)` commute with translations in `x'`, so a
//! frequency `ξ ∈ ℝ²` decouples and each piece acts on `F(ξ, ·)` as the
//! integral operator with kernel
//! `(2π)² e^{-iξ·Φ(x3, y3)} χ(ξ/2^k; x3, y3)` in `(x3, y3)`. The fiber engine
//! discretizes these one-dimensional operators: the `L²` norm is the supremum
//! of their largest singular values, and `L^p` quantities are computed on a
//! periodic `x'`-torus with the output sampled finely enough that the `L^6`
//! Riemann sums of band-limited fields are exact.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dyadic::{eta1, gauss_legendre, slab_cutoff, top_level, DyadicPiece, KernelQuadrature};
use crate::error::{Error, Result};
use crate::jets::{JetMode, MultiIndex};
use crate::models::DefiningModel;

// ---------------------------------------------------------------------------
// fiber geometry

/// Discretization parameters of the fiber engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    /// Quadrature nodes per oscillation period of the phase.
    #[serde(default = "default_nodes_per_period")]
    pub nodes_per_period: f64,
    /// Extra nodes added to each axis.
    #[serde(default = "default_extra_nodes")]
    pub extra_nodes: usize,
    /// Radii of the polar frequency samples, in units of `2^k`.
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    /// Number of angles in `[0, π)`.
    #[serde(default = "default_angles")]
    pub angles: usize,
    /// Torus period in units of `2^{-k}`.
    #[serde(default = "default_torus_cells")]
    pub torus_cells: f64,
    /// Power iterations used to screen every frequency sample.
    #[serde(default = "default_screen_iters")]
    pub screen_iterations: usize,
    /// Samples refined after screening.
    #[serde(default = "default_refine_top")]
    pub refine_top: usize,
    /// Iteration cap for the refined samples.
    #[serde(default = "default_power_iters")]
    pub power_iterations: usize,
}

fn default_nodes_per_period() -> f64 {
    5.0
}
fn default_extra_nodes() -> usize {
    16
}
fn default_radii() -> Vec<f64> {
    (0..7).map(|i| 0.5 + 0.25 * i as f64).collect()
}
fn default_angles() -> usize {
    48
}
fn default_torus_cells() -> f64 {
    64.0
}
fn default_power_iters() -> usize {
    400
}
fn default_screen_iters() -> usize {
    12
}
fn default_refine_top() -> usize {
    4
}

impl Default for FiberConfig {
    fn default() -> Self {
        FiberConfig {
            nodes_per_period: default_nodes_per_period(),
            extra_nodes: default_extra_nodes(),
            radii: default_radii(),
            angles: default_angles(),
            torus_cells: default_torus_cells(),
            screen_iterations: default_screen_iters(),
            refine_top: default_refine_top(),
            power_iterations: default_power_iters(),
        }
    }
}

impl FiberConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.nodes_per_period >= 2.0) {
            errs.push("fiber.nodes_per_period must be at least 2".into());
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.5 && *r < 2.0) && *r != 0.5 && *r != 2.0) {
            errs.push("fiber.radii must lie in [0.5, 2]".into());
        }
        if self.angles == 0 {
            errs.push("fiber.angles must be positive".into());
        }
        if !(self.torus_cells >= 8.0) {
            errs.push("fiber.torus_cells must be at least 8".into());
        }
        if self.screen_iterations == 0 {
            errs.push("fiber.screen_iterations must be positive".into());
        }
        if self.power_iterations == 0 {
            errs.push("fiber.power_iterations must be positive".into());
        }
        errs
    }
}

/// `(x3, y3)` quadrature for a horizontal model, with `Φ` and `Δ` tabulated.
pub struct FiberGeometry {
    pub k: u32,
    pub x3: Vec<f64>,
    pub wx: Vec<f64>,
    pub y3: Vec<f64>,
    pub wy: Vec<f64>,
    /// Slab index of each `y3` node.
    pub slab: Vec<usize>,
    pub n_slabs: usize,
    /// Row-major over `(x3, y3)`.
    pub phi: Vec<[f64; 2]>,
    pub delta: Vec<[f64; 2]>,
}

fn midpoints(lo: f64, hi: f64, n: usize, x: &mut Vec<f64>, w: &mut Vec<f64>) {
    let h = (hi - lo) / n as f64;
    for i in 0..n {
        x.push(lo + (i as f64 + 0.5) * h);
        w.push(h);
    }
}

impl FiberGeometry {
    /// Nodes resolve the phase `ξ·Φ` for `|ξ| ≤ 2^{k+1}`. With `slab_level`
    /// the `y3` nodes are aligned to slabs of length `2^{-slab_level}`.
    pub fn new(model: &DefiningModel, k: u32, slab_level: Option<u32>, cfg: &FiberConfig) -> Result<Self> {
        if !model.horizontal {
            return Err(Error::config(format!("model `{}` is not translation invariant in x'", model.name)));
        }
        let dom = model.domain();
        let (xl, xh, yl, yh) = (dom.lo[2], dom.hi[2], dom.lo[3], dom.hi[3]);
        let c = dom.center();
        // phase rates from a coarse probe
        let (mut rx, mut ry) = (0.0f64, 0.0f64);
        let m = 17;
        for i in 0..m {
            for j in 0..m {
                let p = [
                    c[0],
                    c[1],
                    xl + (xh - xl) * i as f64 / (m - 1) as f64,
                    yl + (yh - yl) * j as f64 / (m - 1) as f64,
                ];
                let [a, b] = model.jets(&p, 1, JetMode::Auto)?;
                let dx = MultiIndex::x_y3(2, 0);
                let dy = MultiIndex::y3(1);
                rx = rx.max(a.get(dx).hypot(b.get(dx)));
                ry = ry.max(a.get(dy).hypot(b.get(dy)));
            }
        }
        let fmax = 2f64.powi(k as i32 + 1);
        let count = |rate: f64, len: f64| {
            (len * rate * fmax / (2.0 * PI) * cfg.nodes_per_period).ceil() as usize + cfg.extra_nodes
        };
        let nx = count(rx, xh - xl);
        let ny = count(ry, yh - yl);
        let (mut x3, mut wx) = (Vec::new(), Vec::new());
        midpoints(xl, xh, nx, &mut x3, &mut wx);
        let (mut y3, mut wy, mut slab) = (Vec::new(), Vec::new(), Vec::new());
        let n_slabs = match slab_level {
            None => {
                midpoints(yl, yh, ny, &mut y3, &mut wy);
                slab.resize(y3.len(), 0);
                1
            }
            Some(l) => {
                let len = 2f64.powi(-(l as i32));
                let n = ((yh - yl) / len - 1e-9).ceil().max(1.0) as usize;
                for s in 0..n {
                    let a = yl + s as f64 * len;
                    let b = (a + len).min(yh);
                    let per = ((ny as f64 * (b - a) / (yh - yl)).ceil() as usize).max(2);
                    let before = y3.len();
                    midpoints(a, b, per, &mut y3, &mut wy);
                    slab.resize(slab.len() + y3.len() - before, s);
                }
                n
            }
        };
        let rows: Vec<Result<Vec<([f64; 2], [f64; 2])>>> = crate::par::map(x3.len(), |i| {
            let probe = DyadicPiece { model: model.clone(), k, ell: None, localizer: None };
            y3.iter()
                .map(|&t| {
                    let fr = probe.frame(&[c[0], c[1], x3[i], t])?;
                    Ok(([c[0] - fr.s[0], c[1] - fr.s[1]], fr.delta))
                })
                .collect()
        });
        let mut phi = Vec::with_capacity(x3.len() * y3.len());
        let mut delta = Vec::with_capacity(x3.len() * y3.len());
        for r in rows {
            for (p, d) in r? {
                phi.push(p);
                delta.push(d);
            }
        }
        Ok(FiberGeometry { k, x3, wx, y3, wy, slab, n_slabs, phi, delta })
    }

    pub fn nx(&self) -> usize {
        self.x3.len()
    }

    pub fn ny(&self) -> usize {
        self.y3.len()
    }

    /// Cutoff of the piece `ell` at frequency `ξ` and node `(i, j)`.
    #[inline]
    fn chi(&self, ell: Option<u32>, xi: [f64; 2], annulus: f64, idx: usize) -> f64 {
        match ell {
            None => annulus,
            Some(l) => {
                let d = self.delta[idx];
                let s = (xi[0] * d[0] + xi[1] * d[1]) * 2f64.powi(-(self.k as i32));
                annulus * slab_cutoff(l, top_level(self.k), s)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// L² norm

/// Largest singular value found at one frequency.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FiberSample {
    pub radius: f64,
    pub angle: f64,
    pub sigma: f64,
}

/// Weighted fiber matrix `√wx_i K(x3_i, y3_j) √wy_j` at frequency `ξ`.
fn fiber_matrix(g: &FiberGeometry, ell: Option<u32>, xi: [f64; 2]) -> Option<Vec<Complex64>> {
    let sc = 2f64.powi(g.k as i32);
    let ann = eta1(xi[0].hypot(xi[1]) / sc);
    if ann == 0.0 {
        return None;
    }
    let (nx, ny) = (g.nx(), g.ny());
    let mut m = vec![Complex64::new(0.0, 0.0); nx * ny];
    let mut any = false;
    for i in 0..nx {
        let sx = g.wx[i].sqrt();
        for j in 0..ny {
            let idx = i * ny + j;
            let c = g.chi(ell, xi, ann, idx);
            if c != 0.0 {
                let ph = -(xi[0] * g.phi[idx][0] + xi[1] * g.phi[idx][1]);
                m[idx] = Complex64::from_polar(c * sx * g.wy[j].sqrt(), ph);
                any = true;
            }
        }
    }
    any.then_some(m)
}

/// Power iteration on `MᴴM`; returns a lower bound for `‖M‖₂`.
fn top_singular_value(m: &[Complex64], nx: usize, ny: usize, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Complex64> =
        (0..ny).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let mut w = vec![Complex64::new(0.0, 0.0); nx];
    let mut sigma = 0.0;
    for _ in 0..iters {
        let nv = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        for z in &mut v {
            *z /= nv;
        }
        for (i, wi) in w.iter_mut().enumerate() {
            let row = &m[i * ny..(i + 1) * ny];
            *wi = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let s = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in v.iter_mut() {
            *z = Complex64::new(0.0, 0.0);
        }
        for (i, wi) in w.iter().enumerate() {
            let row = &m[i * ny..(i + 1) * ny];
            for (vj, a) in v.iter_mut().zip(row) {
                *vj += a.conj() * wi;
            }
        }
        let done = (s - sigma).abs() <= 1e-9 * s;
        sigma = s;
        if done {
            break;
        }
    }
    sigma
}

/// `L²` operator norm of a piece of a horizontal model, as
/// `(2π)² max σ_max` over the polar frequency samples.
pub fn fiber_l2_norm(
    model: &DefiningModel,
    k: u32,
    ell: Option<u32>,
    cfg: &FiberConfig,
    angle_offset: f64,
    seed: u64,
) -> Result<(f64, Vec<FiberSample>)> {
    let g = FiberGeometry::new(model, k, None, cfg)?;
    let sc = 2f64.powi(k as i32);
    let mut jobs = Vec::new();
    for &r in &cfg.radii {
        for t in 0..cfg.angles {
            jobs.push((r, PI * (t as f64 + angle_offset) / cfg.angles as f64));
        }
    }
    let run = |n: usize, iters: usize| {
        let (r, th) = jobs[n];
        let xi = [r * sc * th.cos(), r * sc * th.sin()];
        let sigma = match fiber_matrix(&g, ell, xi) {
            Some(m) => top_singular_value(&m, g.nx(), g.ny(), iters, seed ^ n as u64),
            None => 0.0,
        };
        FiberSample { radius: r, angle: th, sigma: sigma * (2.0 * PI).powi(2) }
    };
    let mut samples = crate::par::map(jobs.len(), |n| run(n, cfg.screen_iterations));
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| samples[b].sigma.total_cmp(&samples[a].sigma).then(a.cmp(&b)));
    order.truncate(cfg.refine_top);
    let refined = crate::par::map(order.len(), |i| run(order[i], cfg.power_iterations));
    for (i, r) in order.into_iter().zip(refined) {
        // power iteration only increases the Rayleigh quotient
        if r.sigma > samples[i].sigma {
            samples[i] = r;
        }
    }
    let best = samples.iter().map(|s| s.sigma).fold(0.0, f64::max);
    Ok((best, samples))
}

// ---------------------------------------------------------------------------
// torus fields

/// Periodic `x'` lattice carrying the annulus modes of frequency `2^k`.
#[derive(Clone, Debug)]
pub struct Torus {
    pub k: u32,
    pub period: f64,
    /// Points per axis.
    pub n: usize,
    /// Integer mode indices with `2^{k-1} < 2π|m|/P < 2^{k+1}`.
    pub modes: Vec<[i32; 2]>,
    pub mmax: i32,
    annulus: Vec<f64>,
}

impl Torus {
    pub fn new(k: u32, cfg: &FiberConfig) -> Result<Self> {
        let period = cfg.torus_cells * 2f64.powi(-(k as i32));
        // spacing 2^{-k-1}: the L^6 sums of annulus fields are exact
        let n = (cfg.torus_cells * 2.0).round() as usize;
        let step = 2.0 * PI / period;
        let sc = 2f64.powi(k as i32);
        let mmax = (2.0 * sc / step).ceil() as i32;
        if 2 * mmax * 3 >= n as i32 {
            return Err(Error::Resolution("torus grid too coarse for the annulus".into()));
        }
        let mut modes = Vec::new();
        let mut annulus = Vec::new();
        for m2 in -mmax..=mmax {
            for m1 in -mmax..=mmax {
                let a = eta1(step * (m1 as f64).hypot(m2 as f64) / sc);
                if a > 0.0 {
                    modes.push([m1, m2]);
                    annulus.push(a);
                }
            }
        }
        Ok(Torus { k, period, n, modes, mmax, annulus })
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.n as f64
    }

    pub fn xi(&self, m: [i32; 2]) -> [f64; 2] {
        let s = 2.0 * PI / self.period;
        [s * m[0] as f64, s * m[1] as f64]
    }

    fn slot(&self, m: [i32; 2]) -> usize {
        let n = self.n as i32;
        (m[0].rem_euclid(n) + n * m[1].rem_euclid(n)) as usize
    }
}

/// `f(y', y3_j) = Σ_m c_{j,m} e^{i ξ_m·y'}` over the annulus modes.
#[derive(Clone, Debug)]
pub struct TorusField {
    /// Row-major over `(y3 node, mode)`.
    pub coeffs: Vec<Complex64>,
    pub n_modes: usize,
}

struct Synth {
    fft: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Synth {
    fn new(n: usize) -> Self {
        Synth { fft: FftPlanner::new().plan_fft_inverse(n), n }
    }

    /// Values on the `n × n` grid from mode coefficients given per slot.
    fn synth(&self, buf: &mut [Complex64]) {
        let n = self.n;
        for row in buf.chunks_mut(n) {
            self.fft.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            for j in 0..n {
                col[j] = buf[i + n * j];
            }
            self.fft.process(&mut col);
            for j in 0..n {
                buf[i + n * j] = col[j];
            }
        }
    }
}

fn lp_accumulate(buf: &[Complex64], p: f64) -> f64 {
    if p.is_infinite() {
        buf.iter().map(|z| z.norm()).fold(0.0, f64::max)
    } else {
        buf.iter().map(|z| z.norm().powf(p)).sum()
    }
}

fn combine(acc: f64, v: f64, w: f64, p: f64) -> f64 {
    if p.is_infinite() {
        acc.max(v)
    } else {
        acc + v * w
    }
}

impl TorusField {
    /// `‖f‖_p^p` over the columns selected by `keep` (`‖f‖_∞` for `p = ∞`).
    pub fn lp_power(&self, torus: &Torus, g: &FiberGeometry, p: f64, keep: impl Fn(usize) -> bool) -> f64 {
        let synth = Synth::new(torus.n);
        let h2 = torus.spacing().powi(2);
        let mut acc = 0.0;
        let mut buf = vec![Complex64::new(0.0, 0.0); torus.n * torus.n];
        for j in 0..g.ny() {
            if !keep(j) {
                continue;
            }
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (n, m) in torus.modes.iter().enumerate() {
                buf[torus.slot(*m)] = self.coeffs[j * self.n_modes + n];
            }
            synth.synth(&mut buf);
            acc = combine(acc, lp_accumulate(&buf, p), h2 * g.wy[j], p);
        }
        acc
    }

    pub fn lp_norm(&self, torus: &Torus, g: &FiberGeometry, p: f64) -> f64 {
        let v = self.lp_power(torus, g, p, |_| true);
        if p.is_infinite() {
            v
        } else {
            v.powf(1.0 / p)
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.coeffs.iter_mut().for_each(|z| *z *= c);
    }
}

/// Test inputs for the norm experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TestFunctionSpec {
    /// Gaussian coefficients on the annulus modes, varying in `y3` on knots of
    /// spacing `correlation` with linear interpolation.
    RandomGaussianField {
        #[serde(default)]
        correlation: Option<f64>,
    },
    /// A random field restricted to the slab `ν` of length `2^{-level}`.
    Y3SlabIndicator { slab: usize, level: u32 },
    /// Frequency packet at angle `angle`, width `delta` across the direction
    /// and `delta` in `y3` around `center`.
    PlateWavePacket { angle: f64, delta: f64, center: f64 },
    /// Mollified point mass at `(y1, y2, y3)`, mollified at scale `2^{-k}` in `y3`.
    PointMassMollified { at: [f64; 3] },
}

impl TestFunctionSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match self {
            TestFunctionSpec::RandomGaussianField { correlation: Some(c) } if !(*c > 0.0) => {
                errs.push("test_function.correlation must be positive".into())
            }
            TestFunctionSpec::PlateWavePacket { delta, .. } if !(*delta > 0.0 && *delta <= 1.0) => {
                errs.push("test_function.delta must lie in (0, 1]".into())
            }
            _ => {}
        }
        errs
    }

    /// Build the field, normalized to unit `L^p` norm.
    pub fn build(&self, torus: &Torus, g: &FiberGeometry, p: f64, seed: u64) -> Result<TorusField> {
        let nm = torus.modes.len();
        let ny = g.ny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); ny * nm];
        let random = |rng: &mut ChaCha8Rng, corr: f64, coeffs: &mut [Complex64], keep: &dyn Fn(usize) -> bool| {
            let (lo, hi) = (g.y3[0] - 0.5 * g.wy[0], g.y3[ny - 1] + 0.5 * g.wy[ny - 1]);
            let knots = ((hi - lo) / corr).ceil() as usize + 1;
            let table: Vec<Complex64> = (0..knots * nm)
                .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            for j in 0..ny {
                if !keep(j) {
                    continue;
                }
                let t = (g.y3[j] - lo) / corr;
                let a = (t.floor() as usize).min(knots - 2);
                let f = t - a as f64;
                for n in 0..nm {
                    coeffs[j * nm + n] = table[a * nm + n] * (1.0 - f) + table[(a + 1) * nm + n] * f;
                }
            }
        };
        let default_corr = 2f64.powi(-((g.k as i32 + 1) / 2));
        match self {
            TestFunctionSpec::RandomGaussianField { correlation } => {
                random(&mut rng, correlation.unwrap_or(default_corr), &mut coeffs, &|_| true)
            }
            TestFunctionSpec::Y3SlabIndicator { slab, level } => {
                let len = 2f64.powi(-(*level as i32));
                let lo = g.y3[0] - 0.5 * g.wy[0] + *slab as f64 * len;
                if lo >= g.y3[ny - 1] {
                    return Err(Error::config(format!("slab {slab} lies outside the y3 range")));
                }
                let keep = |j: usize| g.y3[j] >= lo && g.y3[j] < lo + len;
                random(&mut rng, default_corr, &mut coeffs, &keep)
            }
            TestFunctionSpec::PlateWavePacket { angle, delta, center } => {
                let sc = 2f64.powi(g.k as i32);
                let dir = [angle.cos(), angle.sin()];
                let phase: f64 = rng.random::<f64>() * 2.0 * PI;
                for n in 0..nm {
                    let xi = torus.xi(torus.modes[n]);
                    let along = (xi[0] * dir[0] + xi[1] * dir[1]) / sc - 1.0;
                    let across = (-xi[0] * dir[1] + xi[1] * dir[0]) / sc;
                    let amp = (-(along * along) / 0.125 - across * across / (delta * delta)).exp();
                    for j in 0..ny {
                        let u = (g.y3[j] - center) / delta;
                        coeffs[j * nm + n] = Complex64::from_polar(amp * (-u * u).exp(), phase);
                    }
                }
            }
            TestFunctionSpec::PointMassMollified { at } => {
                let w = 2f64.powi(-(g.k as i32));
                for n in 0..nm {
                    let xi = torus.xi(torus.modes[n]);
                    let ph = -(xi[0] * at[0] + xi[1] * at[1]);
                    for j in 0..ny {
                        let u = (g.y3[j] - at[2]) / w;
                        coeffs[j * nm + n] = Complex64::from_polar((-u * u).exp(), ph);
                    }
                }
            }
        }
        let mut f = TorusField { coeffs, n_modes: nm };
        let norm = f.lp_norm(torus, g, p);
        if !(norm > 0.0) {
            return Err(Error::config("test function vanishes on the grid"));
        }
        f.scale(1.0 / norm);
        Ok(f)
    }
}

/// `‖·‖_p^p` (or sup for `p = ∞`) of `R f` and of each `R[1_ν f]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlabNorms {
    pub total: f64,
    pub per_slab: Vec<f64>,
}

/// Fiber engine on the `x'`-torus.
pub struct TorusEngine {
    pub model: DefiningModel,
    pub k: u32,
    pub geometry: FiberGeometry,
    pub torus: Torus,
}

impl TorusEngine {
    pub fn new(model: &DefiningModel, k: u32, slab_level: Option<u32>, cfg: &FiberConfig) -> Result<Self> {
        let geometry = FiberGeometry::new(model, k, slab_level, cfg)?;
        let torus = Torus::new(k, cfg)?;
        Ok(TorusEngine { model: model.clone(), k, geometry, torus })
    }

    /// Norms of `R_{k,ℓ} f` and of its slab pieces for every input.
    pub fn slab_norms(&self, ell: Option<u32>, inputs: &[TorusField], p: f64) -> Result<Vec<SlabNorms>> {
        if let Some(l) = ell {
            if l > top_level(self.k) {
                return Err(Error::config(format!("ℓ = {l} exceeds ⌊k/3⌋ = {}", top_level(self.k))));
            }
        }
        let g = &self.geometry;
        let t = &self.torus;
        let nm = t.modes.len();
        let ns = g.n_slabs;
        let ny = g.ny();
        let k2 = (2.0 * PI).powi(2);
        let xis: Vec<[f64; 2]> = t.modes.iter().map(|m| t.xi(*m)).collect();
        let h2 = t.spacing().powi(2);
        let width = (2 * t.mmax + 1) as usize;
        let rows = crate::par::map(g.nx(), |i| {
            let synth = Synth::new(t.n);
            // per input, per slab, per mode
            let mut out = vec![Complex64::new(0.0, 0.0); inputs.len() * ns * nm];
            let mut pa = vec![Complex64::new(0.0, 0.0); width];
            let mut pb = vec![Complex64::new(0.0, 0.0); width];
            let mut kern = vec![Complex64::new(0.0, 0.0); nm];
            for j in 0..ny {
                let idx = i * ny + j;
                let phi = g.phi[idx];
                let step = 2.0 * PI / t.period;
                let a = Complex64::from_polar(1.0, -step * phi[0]);
                let b = Complex64::from_polar(1.0, -step * phi[1]);
                powers(a, t.mmax, &mut pa);
                powers(b, t.mmax, &mut pb);
                for n in 0..nm {
                    let c = g.chi(ell, xis[n], t.annulus[n], idx);
                    kern[n] = if c == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        let m = t.modes[n];
                        pa[(m[0] + t.mmax) as usize] * pb[(m[1] + t.mmax) as usize] * (c * k2 * g.wy[j])
                    };
                }
                let s = g.slab[j];
                for (fi, f) in inputs.iter().enumerate() {
                    let src = &f.coeffs[j * nm..(j + 1) * nm];
                    let dst = &mut out[(fi * ns + s) * nm..(fi * ns + s + 1) * nm];
                    for ((d, kv), c) in dst.iter_mut().zip(&kern).zip(src) {
                        *d += kv * c;
                    }
                }
            }
            let mut buf = vec![Complex64::new(0.0, 0.0); t.n * t.n];
            let mut total_buf = vec![Complex64::new(0.0, 0.0); t.n * t.n];
            let mut res = Vec::with_capacity(inputs.len());
            for fi in 0..inputs.len() {
                total_buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                let mut per = vec![0.0; ns];
                for (s, slot) in per.iter_mut().enumerate() {
                    buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                    let src = &out[(fi * ns + s) * nm..(fi * ns + s + 1) * nm];
                    for (n, m) in t.modes.iter().enumerate() {
                        buf[t.slot(*m)] = src[n];
                    }
                    synth.synth(&mut buf);
                    *slot = lp_accumulate(&buf, p);
                    for (tz, z) in total_buf.iter_mut().zip(&buf) {
                        *tz += z;
                    }
                }
                res.push((lp_accumulate(&total_buf, p), per));
            }
            res
        });
        let mut acc: Vec<SlabNorms> =
            (0..inputs.len()).map(|_| SlabNorms { total: 0.0, per_slab: vec![0.0; ns] }).collect();
        for (i, row) in rows.into_iter().enumerate() {
            let w = h2 * g.wx[i];
            for (a, (tot, per)) in acc.iter_mut().zip(row) {
                a.total = combine(a.total, tot, w, p);
                for (x, v) in a.per_slab.iter_mut().zip(per) {
                    *x = combine(*x, v, w, p);
                }
            }
        }
        Ok(acc)
    }
}

fn powers(a: Complex64, mmax: i32, out: &mut [Complex64]) {
    let c = mmax as usize;
    out[c] = Complex64::new(1.0, 0.0);
    let inv = a.conj();
    for i in 1..=c {
        out[c + i] = out[c + i - 1] * a;
        out[c - i] = out[c - i + 1] * inv;
    }
}

fn root(v: f64, p: f64) -> f64 {
    if p.is_infinite() {
        v
    } else {
        v.powf(1.0 / p)
    }
}

// ---------------------------------------------------------------------------
// operator norm estimation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    /// Largest singular value of the frequency fibers.
    FiberSpectral,
    /// Best ratio over random inputs on the torus.
    RandomizedTorus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OpNormEstimate {
    pub value: f64,
    /// Running maximum after each trial.
    pub running_max: Vec<f64>,
    pub method: NormMethod,
}

/// Lower bound for `‖R_{k,ℓ}‖_{L^p → L^p}` from `trials` trials.
pub fn estimate_opnorm(
    model: &DefiningModel,
    k: u32,
    ell: Option<u32>,
    p: f64,
    trials: usize,
    seed: u64,
    cfg: &FiberConfig,
) -> Result<OpNormEstimate> {
    if trials == 0 {
        return Err(Error::config("trials must be positive"));
    }
    if !(p >= 2.0) {
        return Err(Error::config("p must lie in [2, ∞]"));
    }
    DyadicPiece::new(model.clone(), k, ell)?;
    let mut running = Vec::with_capacity(trials);
    let mut best = 0.0f64;
    if p == 2.0 {
        for t in 0..trials {
            let off = t as f64 / trials as f64;
            let (v, _) = fiber_l2_norm(model, k, ell, cfg, off, seed.wrapping_add(t as u64))?;
            best = best.max(v);
            running.push(best);
        }
        return Ok(OpNormEstimate { value: best, running_max: running, method: NormMethod::FiberSpectral });
    }
    let eng = TorusEngine::new(model, k, None, cfg)?;
    let spec = TestFunctionSpec::RandomGaussianField { correlation: None };
    for t in 0..trials {
        let f = spec.build(&eng.torus, &eng.geometry, p, seed.wrapping_add(t as u64))?;
        let r = eng.slab_norms(ell, std::slice::from_ref(&f), p)?;
        best = best.max(root(r[0].total, p));
        running.push(best);
    }
    Ok(OpNormEstimate { value: best, running_max: running, method: NormMethod::RandomizedTorus })
}

// ---------------------------------------------------------------------------
// decoupling and slab bounds

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecouplingSample {
    pub ratio: f64,
    pub slab_count: usize,
    pub floor_ok: bool,
    pub ceiling_ok: bool,
}

/// Slack on the trivial bounds of the decoupling ratio.
pub const INVARIANT_EPS: f64 = 1e-6;

/// `‖Σ_ν R f_ν‖_p / (Σ_ν ‖R f_ν‖_p^p)^{1/p}` for slabs of length `2^{-ℓ}`,
/// one sample per input. Slabs that carry no output are left out of the count.
pub fn decoupling_ratios(eng: &TorusEngine, ell: u32, p: f64, inputs: &[TorusField]) -> Result<Vec<DecouplingSample>> {
    if !(2.0..=6.0).contains(&p) {
        return Err(Error::config("decoupling needs 2 ≤ p ≤ 6"));
    }
    let norms = eng.slab_norms(Some(ell), inputs, p)?;
    Ok(norms
        .into_iter()
        .map(|n| {
            let num = n.total.powf(1.0 / p);
            let den = n.per_slab.iter().sum::<f64>().powf(1.0 / p);
            let ratio = num / den;
            let count = n.per_slab.iter().filter(|v| **v > 0.0).count().max(1);
            let ceiling = (count as f64).powf(1.0 - 1.0 / p);
            DecouplingSample {
                ratio,
                slab_count: count,
                floor_ok: ratio >= 1.0 - INVARIANT_EPS,
                ceiling_ok: ratio <= ceiling * (1.0 + INVARIANT_EPS),
            }
        })
        .collect())
}

/// [`decoupling_ratios`] for `n_inputs` random fields.
pub fn decoupling_ratio(
    model: &DefiningModel,
    k: u32,
    ell: u32,
    p: f64,
    n_inputs: usize,
    seed: u64,
    cfg: &FiberConfig,
) -> Result<Vec<DecouplingSample>> {
    let eng = TorusEngine::new(model, k, Some(ell), cfg)?;
    let spec = TestFunctionSpec::RandomGaussianField { correlation: None };
    let inputs = (0..n_inputs)
        .map(|i| spec.build(&eng.torus, &eng.geometry, p, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    decoupling_ratios(&eng, ell, p, &inputs)
}

/// `(Σ_ν ‖R[1_ν g]‖_p^p)^{1/p} / ‖g‖_p` for random `g`, with `p = ∞` read as sup.
pub fn lp_slab_ratio(
    model: &DefiningModel,
    k: u32,
    ell: u32,
    p: f64,
    trials: usize,
    seed: u64,
    cfg: &FiberConfig,
) -> Result<f64> {
    let eng = TorusEngine::new(model, k, Some(ell), cfg)?;
    let spec = TestFunctionSpec::RandomGaussianField { correlation: None };
    let mut best = 0.0f64;
    for t in 0..trials {
        let f = spec.build(&eng.torus, &eng.geometry, p, seed.wrapping_add(t as u64))?;
        let r = eng.slab_norms(Some(ell), std::slice::from_ref(&f), p)?;
        let num = if p.is_infinite() {
            r[0].per_slab.iter().cloned().fold(0.0, f64::max)
        } else {
            r[0].per_slab.iter().sum::<f64>().powf(1.0 / p)
        };
        best = best.max(num);
    }
    Ok(best)
}

/// Slopes predicted for the slab bound at exponent `p`: `(3/p − 1, −1/p)` in `(ℓ, k)`.
pub fn predicted_slab_slopes(p: f64) -> (f64, f64) {
    if p.is_infinite() {
        (-1.0, 0.0)
    } else {
        (3.0 / p - 1.0, -1.0 / p)
    }
}

/// Tolerance on each fitted slope of the slab bound.
pub const SLAB_SLOPE_TOL: f64 = 0.2;

/// Measure [`lp_slab_ratio`] over the `(k, ℓ)` grid with `ℓ ≤ ⌊k/3⌋` and fit
/// both slopes.
pub fn lp_slab_bound_check(
    model: &DefiningModel,
    p: f64,
    ks: &[u32],
    ells: &[u32],
    trials: usize,
    seed: u64,
    cfg: &FiberConfig,
) -> Result<(Vec<DecayRow>, DecayFit, bool)> {
    if !(p >= 2.0) {
        return Err(Error::config("p must lie in [2, ∞]"));
    }
    let mut rows = Vec::new();
    for &k in ks {
        for &l in ells.iter().filter(|&&l| l <= top_level(k)) {
            let v = lp_slab_ratio(model, k, l, p, trials, seed, cfg)?;
            rows.push(DecayRow { k, ell: l, p, value: v });
        }
    }
    let fit = fit_decay(&rows)?;
    let (pl, pk) = predicted_slab_slopes(p);
    let ok_l = fit.slope_ell.map(|s| (s - pl).abs() <= SLAB_SLOPE_TOL).unwrap_or(false);
    let ok_k = fit.slope_k.map(|s| (s - pk).abs() <= SLAB_SLOPE_TOL).unwrap_or(false);
    Ok((rows, fit, ok_l && ok_k))
}

/// `∫ |K(z)| dz` for `K(z) = ∫ e^{iτ·z} χ(τ) dτ`, the `L¹` norm of the kernel
/// in `y'` at fixed `(x, y3)`, computed from a 2-D FFT of the cutoff in
/// rotated coordinates.
pub fn kernel_l1_in_yprime(piece: &DyadicPiece, p: &[f64; 4], refine: usize) -> Result<f64> {
    let fr = piece.frame(p)?;
    let dn = fr.delta_norm();
    let level = piece.ell.unwrap_or(0) as i32;
    let sc = (fr.alpha * dn).abs().max(1e-12);
    // the cutoff varies on scale 2^{-ℓ}/(α|Δ|) along Δ̂ and O(1) across
    let du = (2f64.powi(-level) / sc).min(1.0) / (64.0 * refine as f64);
    let dv = 1.0 / (32.0 * refine as f64);
    let nu = (4.0 / du).ceil() as usize;
    let nv = (4.0 / dv).ceil() as usize;
    let (nu, nv) = (nu.next_power_of_two() * 2, nv.next_power_of_two() * 2);
    let (du, dv) = (8.0 / nu as f64, 8.0 / nv as f64);
    let dhat = [fr.delta[0] / dn, fr.delta[1] / dn];
    let mut buf = vec![Complex64::new(0.0, 0.0); nu * nv];
    for j in 0..nv {
        let v = -4.0 + j as f64 * dv;
        for i in 0..nu {
            let u = -4.0 + i as f64 * du;
            let tau = [u * dhat[0] - v * dhat[1], u * dhat[1] + v * dhat[0]];
            buf[i + nu * j] = Complex64::new(piece.cutoff(tau, &fr), 0.0);
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fu = planner.plan_fft_forward(nu);
    let fv = planner.plan_fft_forward(nv);
    for row in buf.chunks_mut(nu) {
        fu.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); nv];
    let mut total = 0.0;
    for i in 0..nu {
        for j in 0..nv {
            col[j] = buf[i + nu * j];
        }
        fv.process(&mut col);
        total += col.iter().map(|z| z.norm()).sum::<f64>();
    }
    // K(z) = du dv Σ χ e^{iτ·z}; dz = (2π/(nu du)) (2π/(nv dv))
    let dz = (2.0 * PI / (nu as f64 * du)) * (2.0 * PI / (nv as f64 * dv));
    Ok(total * du * dv * dz)
}

/// Sup over `x` samples and slabs `ν` of `∫_ν ∫ |R_{k,ℓ}(x, y)| dy' dy3`,
/// which is `sup ‖R[1_ν g]‖_∞` over `‖g‖_∞ ≤ 1` (attained by the kernel-aligned
/// choice `g = conj(R)/|R|`).
pub fn slab_linf_norm(model: &DefiningModel, k: u32, ell: u32, x_samples: usize) -> Result<f64> {
    let piece = DyadicPiece::new(model.clone(), k, Some(ell))?;
    let dom = model.domain();
    let len = 2f64.powi(-(ell as i32));
    let (yl, yh) = (dom.lo[3], dom.hi[3]);
    let n_slabs = ((yh - yl) / len - 1e-9).ceil().max(1.0) as usize;
    let c = dom.center();
    let mut xs = Vec::new();
    let n = x_samples.max(1);
    for i in 0..n {
        let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let x3 = dom.lo[2] + (0.1 + 0.8 * t) * (dom.hi[2] - dom.lo[2]);
        xs.push([c[0], c[1], x3]);
    }
    let jobs: Vec<(usize, usize)> = (0..xs.len()).flat_map(|i| (0..n_slabs).map(move |s| (i, s))).collect();
    let vals = crate::par::map(jobs.len(), |q| -> Result<f64> {
        let (i, s) = jobs[q];
        let a = yl + s as f64 * len;
        let b = (a + len).min(yh);
        let (t, w) = gauss_legendre(8);
        let mut acc = 0.0;
        for (ti, wi) in t.iter().zip(&w) {
            let y3 = 0.5 * (a + b) + 0.5 * (b - a) * ti;
            acc += 0.5 * (b - a) * wi * kernel_l1_in_yprime(&piece, &[xs[i][0], xs[i][1], xs[i][2], y3], 1)?;
        }
        Ok(acc)
    });
    let mut best = 0.0f64;
    for v in vals {
        best = best.max(v?);
    }
    Ok(best)
}

/// On-surface kernel value `2^{2k} ∫ χ`, exposed for sanity checks.
pub fn on_surface_kernel(piece: &DyadicPiece, p: &[f64; 4]) -> Result<f64> {
    let q = KernelQuadrature::new(piece, p, 0.0, 0.0, 1)?;
    Ok(q.mass() * 4f64.powi(piece.k as i32))
}

// ---------------------------------------------------------------------------
// fitting and reports

/// One measured value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: u32,
    pub ell: u32,
    pub p: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope_k: Option<f64>,
    pub slope_ell: Option<f64>,
    pub intercept: f64,
    /// RMS residual of the fit in `log₂`.
    pub residual: f64,
}

/// Least squares of `log₂ value` against whichever of `k`, `ℓ` vary.
pub fn fit_decay(rows: &[DecayRow]) -> Result<DecayFit> {
    if rows.len() < 3 {
        return Err(Error::config(format!("fit needs at least 3 rows, got {}", rows.len())));
    }
    if rows.iter().any(|r| !(r.value > 0.0) || !r.value.is_finite()) {
        return Err(Error::config("fit needs positive finite values"));
    }
    let vary_k = rows.iter().any(|r| r.k != rows[0].k);
    let vary_l = rows.iter().any(|r| r.ell != rows[0].ell);
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; rows.len()]];
    if vary_k {
        cols.push(rows.iter().map(|r| r.k as f64).collect());
    }
    if vary_l {
        cols.push(rows.iter().map(|r| r.ell as f64).collect());
    }
    if cols.len() == 1 {
        return Err(Error::config("fit needs k or ℓ to vary across rows"));
    }
    let y: Vec<f64> = rows.iter().map(|r| r.value.log2()).collect();
    let n = cols.len();
    let mut ata = vec![0.0; n * n];
    let mut aty = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            ata[a * n + b] = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
        }
        aty[a] = cols[a].iter().zip(&y).map(|(x, y)| x * y).sum();
    }
    let coef = solve_small(&mut ata, &mut aty, n)?;
    let mut ss = 0.0;
    for (i, yi) in y.iter().enumerate() {
        let pred: f64 = (0..n).map(|a| coef[a] * cols[a][i]).sum();
        ss += (yi - pred).powi(2);
    }
    let mut c = coef.into_iter();
    let intercept = c.next().unwrap_or(0.0);
    let slope_k = if vary_k { c.next() } else { None };
    let slope_ell = if vary_l { c.next() } else { None };
    Ok(DecayFit { slope_k, slope_ell, intercept, residual: (ss / rows.len() as f64).sqrt() })
}

fn solve_small(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap_or(c);
        if a[piv * n + c].abs() < 1e-12 {
            return Err(Error::config("fit design is singular"));
        }
        for j in 0..n {
            a.swap(c * n + j, piv * n + j);
        }
        b.swap(c, piv);
        for r in 0..n {
            if r != c {
                let f = a[r * n + c] / a[c * n + c];
                for j in 0..n {
                    a[r * n + j] -= f * a[c * n + j];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Ok((0..n).map(|i| b[i] / a[i * n + i]).collect())
}

/// Outcome of one experiment, written as `<stem>.csv` and `<stem>.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub rows: Vec<DecayRow>,
    pub fit: Option<DecayFit>,
    pub pass: bool,
    pub notes: Vec<String>,
    pub config: serde_json::Value,
}

impl DecayReport {
    /// CSV with fixed-precision values so equal runs give equal bytes.
    pub fn csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "model", "k", "ell", "p", "value"])?;
        for r in &self.rows {
            w.write_record([
                self.experiment.clone(),
                self.model.clone(),
                r.k.to_string(),
                r.ell.to_string(),
                format_p(r.p),
                format!("{:.15e}", r.value),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write(&self, dir: &std::path::Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.csv_string()?)?;
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)?;
        Ok((csv_path, json_path))
    }
}

fn format_p(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_model;

    #[test]
    fn fit_recovers_exact_slope() {
        let rows: Vec<DecayRow> =
            (5..=10).map(|k| DecayRow { k, ell: 0, p: 2.0, value: 2f64.powf(-0.5 * k as f64) }).collect();
        let f = fit_decay(&rows).unwrap();
        assert!((f.slope_k.unwrap() + 0.5).abs() < 1e-12);
        assert!(f.residual < 1e-12);
        assert!(f.slope_ell.is_none());
    }

    #[test]
    fn fit_reports_residual_for_alternating_data() {
        let rows: Vec<DecayRow> = (5..=10)
            .map(|k| DecayRow {
                k,
                ell: 0,
                p: 2.0,
                value: 2f64.powf(-0.5 * k as f64) * (1.0 + 0.1 * (-1f64).powi(k as i32)),
            })
            .collect();
        let f = fit_decay(&rows).unwrap();
        assert!((f.slope_k.unwrap() + 0.5).abs() < 0.05);
        assert!(f.residual > 1e-3);
    }

    #[test]
    fn fit_rejects_short_input() {
        let rows = vec![DecayRow { k: 5, ell: 0, p: 2.0, value: 1.0 }, DecayRow { k: 6, ell: 0, p: 2.0, value: 0.5 }];
        assert!(fit_decay(&rows).is_err());
    }

    #[test]
    fn powers_match_direct() {
        let a = Complex64::from_polar(1.0, 0.37);
        let mut out = vec![Complex64::new(0.0, 0.0); 11];
        powers(a, 5, &mut out);
        for (i, z) in out.iter().enumerate() {
            let m = i as i32 - 5;
            assert!((z - Complex64::from_polar(1.0, 0.37 * m as f64)).norm() < 1e-13);
        }
    }

    #[test]
    fn torus_lp_norm_of_single_mode() {
        let m = builtin_model("xray").unwrap();
        let cfg = FiberConfig::default();
        let k = 4;
        let g = FiberGeometry::new(&m, k, None, &cfg).unwrap();
        let t = Torus::new(k, &cfg).unwrap();
        let nm = t.modes.len();
        let mut coeffs = vec![Complex64::new(0.0, 0.0); g.ny() * nm];
        for j in 0..g.ny() {
            coeffs[j * nm] = Complex64::new(1.0, 0.0);
        }
        let f = TorusField { coeffs, n_modes: nm };
        // |e^{iξ·y}| = 1 on a torus of area P² times the y3 length 2
        let want = (t.period * t.period * 2.0).powf(1.0 / 6.0);
        assert!((f.lp_norm(&t, &g, 6.0) - want).abs() < 1e-10 * want);
    }

    #[test]
    fn decoupling_ratio_for_two_slabs_is_bounded() {
        let m = builtin_model("xray").unwrap();
        let cfg = FiberConfig::default();
        let r = decoupling_ratio(&m, 3, 1, 6.0, 2, 7, &cfg).unwrap();
        for s in r {
            assert!(s.ceiling_ok, "{s:?}");
        }
    }

    #[test]
    fn single_occupied_slab_gives_unit_ratio() {
        let m = builtin_model("xray").unwrap();
        let cfg = FiberConfig::default();
        let eng = TorusEngine::new(&m, 3, Some(1), &cfg).unwrap();
        let f =
            TestFunctionSpec::Y3SlabIndicator { slab: 1, level: 1 }.build(&eng.torus, &eng.geometry, 6.0, 3).unwrap();
        let r = decoupling_ratios(&eng, 1, 6.0, &[f]).unwrap();
        assert_eq!(r[0].slab_count, 1);
        assert!((r[0].ratio - 1.0).abs() < 1e-12, "{:?}", r[0]);
    }

    #[test]
    fn test_functions_have_unit_norm() {
        let m = builtin_model("xray").unwrap();
        let cfg = FiberConfig::default();
        let eng = TorusEngine::new(&m, 4, None, &cfg).unwrap();
        let specs = [
            TestFunctionSpec::RandomGaussianField { correlation: None },
            TestFunctionSpec::Y3SlabIndicator { slab: 0, level: 1 },
            TestFunctionSpec::PlateWavePacket { angle: 0.3, delta: 0.25, center: 0.1 },
            TestFunctionSpec::PointMassMollified { at: [0.0, 0.0, 0.2] },
        ];
        for s in specs {
            for p in [2.0, 6.0] {
                let f = s.build(&eng.torus, &eng.geometry, p, 1).unwrap();
                assert!((f.lp_norm(&eng.torus, &eng.geometry, p) - 1.0).abs() < 1e-8, "{s:?}");
            }
        }
    }
}
