//! Frequency localization of the operator: smooth cutoffs, the pieces
//! `R_{k,ℓ}` and `R_k`, their Schwartz kernels, kernel envelopes, and an FFT
//! pipeline applying a piece to a function sampled on a grid.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jets::JetMode;
use crate::linalg::det3;
use crate::models::DefiningModel;

// ---------------------------------------------------------------------------
// cutoffs

/// Smooth step: 0 for `t ≤ 0`, 1 for `t ≥ 1`.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

/// Even bump, equal to 1 on `[-1/2, 1/2]` and supported in `(-1, 1)`.
pub fn eta0(s: f64) -> f64 {
    1.0 - smooth_step(2.0 * s.abs() - 1.0)
}

/// `η0(s/2) − η0(s)`, supported in `1/2 < |s| < 2`.
pub fn eta1(s: f64) -> f64 {
    eta0(0.5 * s) - eta0(s)
}

/// Index of the last slab piece, `⌊k/3⌋`.
pub fn top_level(k: u32) -> u32 {
    k / 3
}

/// Distance-to-fold cutoff `ψ_ℓ(s)` with `s = τ·Δ`. The pieces telescope:
/// `Σ_{ℓ ≤ L} ψ_ℓ ≡ 1` with `L = ⌊k/3⌋`.
pub fn slab_cutoff(ell: u32, top: u32, s: f64) -> f64 {
    if top == 0 {
        return 1.0;
    }
    if ell == 0 {
        1.0 - eta0(s)
    } else if ell < top {
        eta1(2f64.powi(ell as i32) * s)
    } else {
        eta0(2f64.powi(top as i32 - 1) * s)
    }
}

/// `|s|`-interval carrying `ψ_ℓ`, as `(inner, outer)`; `outer = ∞` for `ℓ = 0`.
fn slab_support(ell: u32, top: u32) -> (f64, f64) {
    if top == 0 {
        (0.0, f64::INFINITY)
    } else if ell == 0 {
        (0.5, f64::INFINITY)
    } else if ell < top {
        (2f64.powi(-(ell as i32) - 1), 2f64.powi(1 - ell as i32))
    } else {
        (0.0, 2f64.powi(1 - top as i32))
    }
}

// ---------------------------------------------------------------------------
// Gauss–Legendre

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                z
            } else {
                p1
            };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static R: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    R.get_or_init(|| gauss_legendre(16))
}

/// Composite 16-point rule with `panels` equal panels on `[a, b]`.
pub fn composite_rule(a: f64, b: f64, panels: usize, out: &mut Vec<(f64, f64)>) {
    let (x, w) = gl16();
    let h = (b - a) / panels as f64;
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(w) {
            out.push((c + 0.5 * h * xi, 0.5 * h * wi));
        }
    }
}

// ---------------------------------------------------------------------------
// pieces

/// Scalar factor multiplying the slab argument, as a function of `(x, y3)`.
pub type Localizer = Arc<dyn Fn(&[f64; 4]) -> f64 + Send + Sync>;

/// A dyadic piece. `ell = None` is the whole annulus piece `R_k`.
#[derive(Clone)]
pub struct DyadicPiece {
    pub model: DefiningModel,
    pub k: u32,
    pub ell: Option<u32>,
    pub localizer: Option<Localizer>,
}

impl std::fmt::Debug for DyadicPiece {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DyadicPiece")
            .field("model", &self.model.name)
            .field("k", &self.k)
            .field("ell", &self.ell)
            .finish()
    }
}

/// Local data of the defining functions at `(x, y3)`.
#[derive(Clone, Copy, Debug)]
pub struct LocalFrame {
    pub s: [f64; 2],
    pub delta: [f64; 2],
    pub alpha: f64,
}

impl LocalFrame {
    pub fn delta_norm(&self) -> f64 {
        self.delta[0].hypot(self.delta[1])
    }
}

impl DyadicPiece {
    pub fn new(model: DefiningModel, k: u32, ell: Option<u32>) -> Result<Self> {
        if k < 1 {
            return Err(Error::config("k must be at least 1"));
        }
        if let Some(l) = ell {
            if l > top_level(k) {
                return Err(Error::config(format!("ℓ = {l} exceeds ⌊k/3⌋ = {}", top_level(k))));
            }
        }
        Ok(DyadicPiece { model, k, ell, localizer: None })
    }

    pub fn with_localizer(mut self, alpha: Localizer) -> Self {
        self.localizer = Some(alpha);
        self
    }

    /// `ℓ` used in the envelope; `R_k` counts as `ℓ = 0`.
    pub fn ell_or_zero(&self) -> u32 {
        self.ell.unwrap_or(0)
    }

    pub fn frame(&self, p: &[f64; 4]) -> Result<LocalFrame> {
        self.model.domain().check(p)?;
        let [j1, j2] = self.model.jets(p, 2, JetMode::Auto)?;
        let (pp, q) = (j1.grad_x_y3(0), j2.grad_x_y3(0));
        let delta = [det3(&pp, &q, &j1.grad_x_y3(1)), det3(&pp, &q, &j2.grad_x_y3(1))];
        let alpha = self.localizer.as_ref().map(|a| a(p)).unwrap_or(1.0);
        Ok(LocalFrame { s: [j1.value(), j2.value()], delta, alpha })
    }

    /// `χ` at the rescaled frequency `τ` (so `|τ| ≈ 1`).
    pub fn cutoff(&self, tau: [f64; 2], fr: &LocalFrame) -> f64 {
        let r = tau[0].hypot(tau[1]);
        let a = eta1(r);
        if a == 0.0 {
            return 0.0;
        }
        match self.ell {
            None => a,
            Some(l) => {
                let s = fr.alpha * (tau[0] * fr.delta[0] + tau[1] * fr.delta[1]);
                a * slab_cutoff(l, top_level(self.k), s)
            }
        }
    }

    /// Intervals in `u = τ·Δ̂` carrying the cutoff.
    fn u_intervals(&self, fr: &LocalFrame) -> Vec<(f64, f64)> {
        let (inner, outer) = match self.ell {
            None => (0.0, f64::INFINITY),
            Some(l) => {
                let (i, o) = slab_support(l, top_level(self.k));
                let sc = (fr.alpha * fr.delta_norm()).abs();
                (i / sc, o / sc)
            }
        };
        let outer = outer.min(2.0);
        if inner >= outer {
            return vec![];
        }
        if inner == 0.0 {
            vec![(-outer, outer)]
        } else {
            vec![(-outer, -inner), (inner, outer)]
        }
    }

    /// `C·U1·U2` with `C = 1` and exponent `n`.
    pub fn envelope(&self, x: &[f64; 3], y: &[f64; 3], n: i32) -> Result<f64> {
        let fr = self.frame(&[x[0], x[1], x[2], y[2]])?;
        let d = [y[0] - fr.s[0], y[1] - fr.s[1]];
        Ok(envelope_from(self.k, self.ell_or_zero(), &fr, d, n))
    }
}

/// `U1·U2` for the displacement `d = y' − S(x, y3)`.
pub fn envelope_from(k: u32, ell: u32, fr: &LocalFrame, d: [f64; 2], n: i32) -> f64 {
    let a = 2f64.powi(k as i32 - ell as i32);
    let b = 2f64.powi(k as i32);
    let par = fr.delta[0] * d[0] + fr.delta[1] * d[1];
    let perp = -fr.delta[1] * d[0] + fr.delta[0] * d[1];
    a / (1.0 + a * par.abs()).powi(n) * b / (1.0 + b * perp.abs()).powi(n)
}

// ---------------------------------------------------------------------------
// kernel quadrature

const MIN_NODES_PER_PERIOD: f64 = 8.0;

/// Tensor quadrature in rotated coordinates `u = τ·Δ̂`, `v = τ·Δ̂⊥` at a fixed
/// `(x, y3)`, resolving displacements with `|2^k d·Δ̂| ≤ a_max` and
/// `|2^k d·Δ̂⊥| ≤ b_max`.
pub struct KernelQuadrature {
    pub k: u32,
    pub frame: LocalFrame,
    dhat: [f64; 2],
    u: Vec<f64>,
    v: Vec<f64>,
    /// Row-major `χ(u_i, v_j) w_i w_j`.
    weights: Vec<f64>,
}

impl KernelQuadrature {
    pub fn new(piece: &DyadicPiece, p: &[f64; 4], a_max: f64, b_max: f64, refine: usize) -> Result<Self> {
        let fr = piece.frame(p)?;
        let dn = fr.delta_norm();
        if !(dn > 1e-12) {
            return Err(Error::DegenerateFrame("Δ vanishes".into()));
        }
        let dhat = [fr.delta[0] / dn, fr.delta[1] / dn];
        let mut u = Vec::new();
        let mut wu = Vec::new();
        for (a, b) in piece.u_intervals(&fr) {
            let len = b - a;
            let periods = a_max * len / (2.0 * PI);
            let nodes = (MIN_NODES_PER_PERIOD * periods).max(256.0 * len / 4.0).max(128.0);
            let panels = ((nodes / 16.0).ceil() as usize).max(1) * refine;
            let mut rule = Vec::new();
            composite_rule(a, b, panels, &mut rule);
            for (x, w) in rule {
                u.push(x);
                wu.push(w);
            }
        }
        let periods = b_max * 4.0 / (2.0 * PI);
        let nodes = (MIN_NODES_PER_PERIOD * periods).max(512.0);
        let panels = (nodes / 16.0).ceil() as usize * refine;
        let mut rule = Vec::new();
        composite_rule(-2.0, 2.0, panels, &mut rule);
        let (v, wv): (Vec<f64>, Vec<f64>) = rule.into_iter().unzip();
        let mut weights = vec![0.0; u.len() * v.len()];
        for (i, (&ui, &wi)) in u.iter().zip(&wu).enumerate() {
            for (j, (&vj, &wj)) in v.iter().zip(&wv).enumerate() {
                let tau = [ui * dhat[0] - vj * dhat[1], ui * dhat[1] + vj * dhat[0]];
                weights[i * v.len() + j] = piece.cutoff(tau, &fr) * wi * wj;
            }
        }
        Ok(KernelQuadrature { k: piece.k, frame: fr, dhat, u, v, weights })
    }

    /// `∫ χ dτ`, the kernel at `y' = S(x, y3)` divided by `2^{2k}`.
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `2^{2k} ∫ e^{i 2^k ⟨τ, d⟩} χ(τ) dτ` for the displacement `d = y' − S`.
    pub fn eval_displacement(&self, d: [f64; 2]) -> Complex64 {
        let sc = 2f64.powi(self.k as i32);
        let a = sc * (d[0] * self.dhat[0] + d[1] * self.dhat[1]);
        let b = sc * (-d[0] * self.dhat[1] + d[1] * self.dhat[0]);
        let ev: Vec<Complex64> = self.v.iter().map(|&vj| Complex64::from_polar(1.0, b * vj)).collect();
        let nv = self.v.len();
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &ui) in self.u.iter().enumerate() {
            let row = &self.weights[i * nv..(i + 1) * nv];
            let mut inner = Complex64::new(0.0, 0.0);
            for (w, e) in row.iter().zip(&ev) {
                inner += e * *w;
            }
            acc += inner * Complex64::from_polar(1.0, a * ui);
        }
        acc * (sc * sc)
    }

    pub fn eval(&self, y_prime: [f64; 2]) -> Complex64 {
        self.eval_displacement([y_prime[0] - self.frame.s[0], y_prime[1] - self.frame.s[1]])
    }
}

/// Tolerance on the quadrature error estimate, relative to the envelope at the
/// evaluation point.
pub const KERNEL_REL_TOL: f64 = 1e-6;

/// Schwartz kernel `R_{k,ℓ}(x, y)`, with a refinement-based error check.
pub fn kernel_rkl(piece: &DyadicPiece, x: &[f64; 3], y: &[f64; 3]) -> Result<Complex64> {
    let p = [x[0], x[1], x[2], y[2]];
    let fr = piece.frame(&p)?;
    let d = [y[0] - fr.s[0], y[1] - fr.s[1]];
    let sc = 2f64.powi(piece.k as i32);
    let dn = fr.delta_norm().max(1e-300);
    let a = sc * (d[0] * fr.delta[0] + d[1] * fr.delta[1]).abs() / dn;
    let b = sc * (-d[0] * fr.delta[1] + d[1] * fr.delta[0]).abs() / dn;
    let coarse = KernelQuadrature::new(piece, &p, a, b, 1)?.eval(*y0(y));
    let fine = KernelQuadrature::new(piece, &p, a, b, 2)?.eval(*y0(y));
    let env = envelope_from(piece.k, piece.ell_or_zero(), &fr, d, 4);
    let err = (fine - coarse).norm();
    if err > KERNEL_REL_TOL * env.max(1e-300) && err > 1e-12 * sc * sc {
        return Err(Error::Solve(format!("kernel quadrature did not converge: error {err:.3e}, envelope {env:.3e}")));
    }
    Ok(fine)
}

fn y0(y: &[f64; 3]) -> &[f64; 2] {
    y[..2].try_into().expect("two components")
}

/// One probe of the envelope comparison.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnvelopeProbe {
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub kernel_abs: f64,
    pub envelope: f64,
}

/// Probe grid: `n_base` points `(x, y3)` starting at index `first_base` of a
/// fixed lattice in the domain, and for each an `n_side × n_side` grid of displacements
/// `d = (2^{ℓ-k} d1 Δ + 2^{-k} d2 Δ⊥)/|Δ|²` with `d1, d2 ∈ [-span, span]`.
pub fn envelope_probes(
    piece: &DyadicPiece,
    first_base: usize,
    n_base: usize,
    n_side: usize,
    span: f64,
) -> Result<Vec<EnvelopeProbe>> {
    let dom = piece.model.domain().shrink(0.0);
    let (lo, hi) = (dom.lo, dom.hi);
    let base: Vec<[f64; 4]> = (0..n_base)
        .map(|i| {
            // low-discrepancy lattice in the inner 60% of the box
            let g = [0.618_033_988_749_895, 0.754_877_666_246_693, 0.569_840_290_998_053, 0.855_579_253_395_359];
            std::array::from_fn(|c| {
                let t = (((first_base + i) as f64 + 0.5) * g[c]).fract();
                lo[c] + (0.2 + 0.6 * t) * (hi[c] - lo[c])
            })
        })
        .collect();
    let k = piece.k as i32;
    let ell = piece.ell_or_zero() as i32;
    let grid: Vec<f64> = (0..n_side)
        .map(|i| if n_side == 1 { 0.0 } else { -span + 2.0 * span * i as f64 / (n_side - 1) as f64 })
        .collect();
    let per_base = crate::par::map(base.len(), |bi| -> Result<Vec<EnvelopeProbe>> {
        let p = base[bi];
        let fr = piece.frame(&p)?;
        let dn2 = fr.delta[0] * fr.delta[0] + fr.delta[1] * fr.delta[1];
        let dn = dn2.sqrt();
        let a_max = 2f64.powi(ell) * span / dn;
        let b_max = span / dn;
        let q = KernelQuadrature::new(piece, &p, a_max, b_max, 1)?;
        let mut out = Vec::with_capacity(n_side * n_side);
        for &d1 in &grid {
            for &d2 in &grid {
                let par = 2f64.powi(ell - k) * d1;
                let perp = 2f64.powi(-k) * d2;
                let d =
                    [(par * fr.delta[0] - perp * fr.delta[1]) / dn2, (par * fr.delta[1] + perp * fr.delta[0]) / dn2];
                let kv = q.eval_displacement(d);
                out.push(EnvelopeProbe {
                    x: [p[0], p[1], p[2]],
                    y: [fr.s[0] + d[0], fr.s[1] + d[1], p[3]],
                    kernel_abs: kv.norm(),
                    envelope: envelope_from(piece.k, ell as u32, &fr, d, 4),
                });
            }
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for v in per_base {
        all.extend(v?);
    }
    Ok(all)
}

/// `max |kernel| / (U1 U2)` over the probes.
pub fn calibrate_c4(probes: &[EnvelopeProbe]) -> f64 {
    probes.iter().map(|p| p.kernel_abs / p.envelope).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// grid functions

/// Regular grid geometry. Axis 0 is fastest in the flat layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub shape: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

impl GridSpec {
    pub fn new(shape: [usize; 3], origin: [f64; 3], spacing: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config("grid shape must be positive"));
        }
        if spacing.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::config("grid spacing must be positive"));
        }
        Ok(GridSpec { shape, origin, spacing })
    }

    /// Grid with `n` nodes per axis spanning the box `[lo, hi]`.
    pub fn spanning(lo: [f64; 3], hi: [f64; 3], n: [usize; 3]) -> Result<Self> {
        let spacing = std::array::from_fn(|i| if n[i] > 1 { (hi[i] - lo[i]) / (n[i] - 1) as f64 } else { 1.0 });
        GridSpec::new(n, lo, spacing)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        i[0] + self.shape[0] * (i[1] + self.shape[1] * i[2])
    }

    pub fn point(&self, i: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|c| self.origin[c] + i[c] as f64 * self.spacing[c])
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for i2 in 0..self.shape[2] {
            for i1 in 0..self.shape[1] {
                for i0 in 0..self.shape[0] {
                    out.push(self.point([i0, i1, i2]));
                }
            }
        }
        out
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: GridSpec,
    pub samples: Vec<Complex64>,
}

const GRID_MAGIC: &[u8; 8] = b"FLGRID01";
/// Bytes before the first sample.
pub const GRID_HEADER_BYTES: usize = 8 + 3 * 8 + 3 * 8 + 3 * 8 + 8;

/// JSON sidecar describing a binary grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub shape: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub axis_order: [String; 3],
    pub sample_format: String,
    pub header_bytes: usize,
}

impl GridFunction {
    pub fn new(grid: GridSpec, samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::config(format!("{} samples for a grid of {}", samples.len(), grid.len())));
        }
        Ok(GridFunction { grid, samples })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        GridFunction { grid, samples: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64; 3]) -> Complex64) -> Self {
        let samples = grid.points().iter().map(f).collect();
        GridFunction { grid, samples }
    }

    pub fn get(&self, i: [usize; 3]) -> Complex64 {
        self.samples[self.grid.index(i)]
    }

    /// Riemann-sum `L^p` norm; `p = ∞` is the max over nodes.
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.samples.iter().map(|z| z.norm()).fold(0.0, f64::max);
        }
        let s: f64 = self.samples.iter().map(|z| z.norm().powf(p)).sum();
        (s * self.grid.cell_volume()).powf(1.0 / p)
    }

    pub fn scale(&mut self, c: f64) {
        for z in &mut self.samples {
            *z *= c;
        }
    }

    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar {
            shape: self.grid.shape,
            origin: self.grid.origin,
            spacing: self.grid.spacing,
            axis_order: ["y1".into(), "y2".into(), "y3".into()],
            sample_format: "complex64-le".into(),
            header_bytes: GRID_HEADER_BYTES,
        }
    }

    /// Header, then `(re, im)` as little-endian `f32` pairs, axis 0 fastest.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        for n in self.grid.shape {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for v in self.grid.origin.iter().chain(&self.grid.spacing) {
            w.write_all(&v.to_le_bytes())?;
        }
        // axis roles, fastest first, then padding
        w.write_all(&[0, 1, 2, 0, 0, 0, 0, 0])?;
        for z in &self.samples {
            w.write_all(&(z.re as f32).to_le_bytes())?;
            w.write_all(&(z.im as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::config("not a grid function file"));
        }
        let mut u = [0u8; 8];
        let mut shape = [0usize; 3];
        for s in &mut shape {
            r.read_exact(&mut u)?;
            *s = u64::from_le_bytes(u) as usize;
        }
        let mut vals = [0f64; 6];
        for v in &mut vals {
            r.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
        let mut roles = [0u8; 8];
        r.read_exact(&mut roles)?;
        if roles[..3] != [0, 1, 2] {
            return Err(Error::config("unsupported axis order"));
        }
        let grid = GridSpec::new(shape, [vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]])?;
        let mut samples = Vec::with_capacity(grid.len());
        let mut b = [0u8; 4];
        for _ in 0..grid.len() {
            r.read_exact(&mut b)?;
            let re = f32::from_le_bytes(b) as f64;
            r.read_exact(&mut b)?;
            let im = f32::from_le_bytes(b) as f64;
            samples.push(Complex64::new(re, im));
        }
        Ok(GridFunction { grid, samples })
    }

    /// Write `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let f = std::io::BufWriter::new(std::fs::File::create(&bin)?);
        self.write_binary(f)?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(stem.with_extension("bin"))?);
        Self::read_binary(f)
    }
}

// ---------------------------------------------------------------------------
// FFT pipeline

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TauGrid {
    /// Frequency nodes of the padded FFT.
    FftNodes,
    /// Cartesian grid with the given step in `τ`, spectrum interpolated bilinearly.
    Cartesian { step: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub padding: usize,
    pub tau_grid: TauGrid,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { padding: 4, tau_grid: TauGrid::FftNodes }
    }
}

/// Partial Fourier transform `F(ξ', y3) = ∫ e^{i ξ'·y'} f(y', y3) dy'` on the
/// frequency annulus `2^{k-1} < |ξ'| < 2^{k+1}`, per `y3` slice.
pub struct Spectrum {
    pub k: u32,
    /// Lattice step of the frequency nodes.
    pub step: [f64; 2],
    /// Integer lattice coordinates of each node.
    pub nodes: Vec<[i32; 2]>,
    pub node_weight: f64,
    /// Annulus factor `η1(|ξ|/2^k)` per node.
    annulus: Vec<f64>,
    center: [f64; 2],
    y3: Vec<f64>,
    y3_weight: Vec<f64>,
    /// `e^{-iξ·c} F(ξ, y3)` per slice and node.
    values: Vec<Vec<Complex64>>,
    qmax: [i32; 2],
}

/// Largest `y'` spacing the pipeline accepts at frequency `2^k`.
pub fn max_spacing(k: u32) -> f64 {
    2f64.powi(-(k as i32) - 2)
}

impl Spectrum {
    pub fn new(f: &GridFunction, k: u32, opts: &PipelineOptions) -> Result<Self> {
        let g = &f.grid;
        let hmax = max_spacing(k);
        for c in 0..2 {
            if g.spacing[c] > hmax * (1.0 + 1e-12) {
                return Err(Error::Resolution(format!(
                    "spacing {} on axis y{} exceeds 2^(-k-2) = {hmax}",
                    g.spacing[c],
                    c + 1
                )));
            }
        }
        if opts.padding < 1 {
            return Err(Error::config("padding must be at least 1"));
        }
        let [n1, n2, n3] = g.shape;
        let (m1, m2) = (n1 * opts.padding, n2 * opts.padding);
        let dxi = [2.0 * PI / (m1 as f64 * g.spacing[0]), 2.0 * PI / (m2 as f64 * g.spacing[1])];
        let center =
            [g.origin[0] + 0.5 * (n1 - 1) as f64 * g.spacing[0], g.origin[1] + 0.5 * (n2 - 1) as f64 * g.spacing[1]];
        let sc = 2f64.powi(k as i32);
        let rmax = 2.0 * sc;
        let nyq = [PI / g.spacing[0], PI / g.spacing[1]];
        if rmax >= nyq[0].min(nyq[1]) {
            return Err(Error::Resolution("frequency annulus exceeds the FFT band".into()));
        }
        let step = match opts.tau_grid {
            TauGrid::FftNodes => dxi,
            TauGrid::Cartesian { step } => {
                if !(step > 0.0) {
                    return Err(Error::config("τ step must be positive"));
                }
                [step * sc, step * sc]
            }
        };
        let qmax = [(rmax / step[0]).ceil() as i32, (rmax / step[1]).ceil() as i32];
        let mut nodes = Vec::new();
        let mut annulus = Vec::new();
        for q2 in -qmax[1]..=qmax[1] {
            for q1 in -qmax[0]..=qmax[0] {
                let xi = [q1 as f64 * step[0], q2 as f64 * step[1]];
                let a = eta1(xi[0].hypot(xi[1]) / sc);
                if a > 0.0 {
                    nodes.push([q1, q2]);
                    annulus.push(a);
                }
            }
        }
        let h12 = g.spacing[0] * g.spacing[1];
        let mut planner = FftPlanner::<f64>::new();
        let fft1 = planner.plan_fft_inverse(m1);
        let fft2 = planner.plan_fft_inverse(m2);
        let slices: Vec<Vec<Complex64>> = crate::par::map(n3, |j| {
            let mut buf = vec![Complex64::new(0.0, 0.0); m1 * m2];
            for i2 in 0..n2 {
                for i1 in 0..n1 {
                    buf[i1 + m1 * i2] = f.get([i1, i2, j]);
                }
            }
            // rows then columns, e^{+2πi qn/m}
            for row in buf.chunks_mut(m1) {
                fft1.process(row);
            }
            let mut col = vec![Complex64::new(0.0, 0.0); m2];
            for i1 in 0..m1 {
                for i2 in 0..m2 {
                    col[i2] = buf[i1 + m1 * i2];
                }
                fft2.process(&mut col);
                for i2 in 0..m2 {
                    buf[i1 + m1 * i2] = col[i2];
                }
            }
            // G(ξ) = h1 h2 e^{-iξ·(c - origin)} Σ f e^{iξ·(y - origin)}
            let lookup = |q1: i64, q2: i64| -> Complex64 {
                let i1 = q1.rem_euclid(m1 as i64) as usize;
                let i2 = q2.rem_euclid(m2 as i64) as usize;
                let xi = [q1 as f64 * dxi[0], q2 as f64 * dxi[1]];
                let shift = xi[0] * (center[0] - g.origin[0]) + xi[1] * (center[1] - g.origin[1]);
                buf[i1 + m1 * i2] * Complex64::from_polar(h12, -shift)
            };
            nodes
                .iter()
                .map(|q| {
                    let xi = [q[0] as f64 * step[0], q[1] as f64 * step[1]];
                    let t = [xi[0] / dxi[0], xi[1] / dxi[1]];
                    let (f1, f2) = (t[0].floor(), t[1].floor());
                    let (a1, a2) = (t[0] - f1, t[1] - f2);
                    if a1 == 0.0 && a2 == 0.0 {
                        return lookup(f1 as i64, f2 as i64);
                    }
                    let (q1, q2) = (f1 as i64, f2 as i64);
                    lookup(q1, q2) * ((1.0 - a1) * (1.0 - a2))
                        + lookup(q1 + 1, q2) * (a1 * (1.0 - a2))
                        + lookup(q1, q2 + 1) * ((1.0 - a1) * a2)
                        + lookup(q1 + 1, q2 + 1) * (a1 * a2)
                })
                .collect()
        });
        let y3: Vec<f64> = (0..n3).map(|j| g.origin[2] + j as f64 * g.spacing[2]).collect();
        let y3_weight: Vec<f64> = (0..n3)
            .map(|j| {
                if n3 == 1 {
                    1.0
                } else if j == 0 || j == n3 - 1 {
                    0.5 * g.spacing[2]
                } else {
                    g.spacing[2]
                }
            })
            .collect();
        Ok(Spectrum {
            k,
            step,
            nodes,
            node_weight: step[0] * step[1],
            annulus,
            center,
            y3,
            y3_weight,
            values: slices,
            qmax,
        })
    }

    pub fn y3_nodes(&self) -> &[f64] {
        &self.y3
    }

    /// `∫ dy3 ∫ dξ e^{-iξ·S(x, y3)} χ(ξ/2^k) F(ξ, y3)` at one output point.
    pub fn apply_at(&self, piece: &DyadicPiece, x: &[f64; 3]) -> Result<Complex64> {
        if piece.k != self.k {
            return Err(Error::config(format!("spectrum built for k = {}, piece has k = {}", self.k, piece.k)));
        }
        let sc = 2f64.powi(self.k as i32);
        let mut e1 = vec![Complex64::new(0.0, 0.0); (2 * self.qmax[0] + 1) as usize];
        let mut e2 = vec![Complex64::new(0.0, 0.0); (2 * self.qmax[1] + 1) as usize];
        let mut total = Complex64::new(0.0, 0.0);
        for (j, &y3) in self.y3.iter().enumerate() {
            let fr = piece.frame(&[x[0], x[1], x[2], y3])?;
            let d = [fr.s[0] - self.center[0], fr.s[1] - self.center[1]];
            for (i, e) in e1.iter_mut().enumerate() {
                *e = Complex64::from_polar(1.0, -(i as i32 - self.qmax[0]) as f64 * self.step[0] * d[0]);
            }
            for (i, e) in e2.iter_mut().enumerate() {
                *e = Complex64::from_polar(1.0, -(i as i32 - self.qmax[1]) as f64 * self.step[1] * d[1]);
            }
            let vals = &self.values[j];
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, q) in self.nodes.iter().enumerate() {
                let chi = match piece.ell {
                    None => self.annulus[n],
                    Some(l) => {
                        let xi = [q[0] as f64 * self.step[0], q[1] as f64 * self.step[1]];
                        let s = fr.alpha * (xi[0] * fr.delta[0] + xi[1] * fr.delta[1]) / sc;
                        let c = slab_cutoff(l, top_level(piece.k), s);
                        if c == 0.0 {
                            continue;
                        }
                        self.annulus[n] * c
                    }
                };
                let ph = e1[(q[0] + self.qmax[0]) as usize] * e2[(q[1] + self.qmax[1]) as usize];
                acc += ph * vals[n] * chi;
            }
            total += acc * self.y3_weight[j];
        }
        Ok(total * self.node_weight)
    }
}

/// Evaluate `piece` applied to `f` on the output grid.
pub fn apply_rkl(
    piece: &DyadicPiece,
    f: &GridFunction,
    out: &GridSpec,
    opts: &PipelineOptions,
) -> Result<GridFunction> {
    let spec = Spectrum::new(f, piece.k, opts)?;
    apply_with_spectrum(piece, &spec, out)
}

/// `R_k f`: the piece without the distance-to-fold cutoff.
pub fn apply_rk(
    model: &DefiningModel,
    k: u32,
    f: &GridFunction,
    out: &GridSpec,
    opts: &PipelineOptions,
) -> Result<GridFunction> {
    let piece = DyadicPiece::new(model.clone(), k, None)?;
    apply_rkl(&piece, f, out, opts)
}

pub fn apply_with_spectrum(piece: &DyadicPiece, spec: &Spectrum, out: &GridSpec) -> Result<GridFunction> {
    let dom = piece.model.domain();
    for y3 in spec.y3_nodes() {
        if *y3 < dom.lo[3] || *y3 > dom.hi[3] {
            return Err(Error::OutOfDomain { point: [0.0, 0.0, 0.0, *y3], axis: 3 });
        }
    }
    let pts = out.points();
    let vals = crate::par::map(pts.len(), |i| spec.apply_at(piece, &pts[i]));
    let samples = vals.into_iter().collect::<Result<Vec<_>>>()?;
    GridFunction::new(out.clone(), samples)
}

/// Default output lattice: `17³` points in the model's x-box.
pub fn default_output_grid(model: &DefiningModel) -> Result<GridSpec> {
    let d = model.domain();
    GridSpec::spanning([d.lo[0], d.lo[1], d.lo[2]], [d.hi[0], d.hi[1], d.hi[2]], [17, 17, 17])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_model;

    #[test]
    fn cutoff_profile() {
        assert_eq!(eta0(0.5), 1.0);
        assert_eq!(eta0(-0.3), 1.0);
        assert_eq!(eta0(1.0), 0.0);
        assert!(eta0(0.75) > 0.0 && eta0(0.75) < 1.0);
        assert!((eta0(0.75) - 0.5).abs() < 1e-15);
        assert_eq!(eta1(0.4), 0.0);
        assert_eq!(eta1(2.0), 0.0);
        assert_eq!(eta1(1.0), 1.0);
    }

    #[test]
    fn slab_cutoffs_telescope() {
        for k in [1u32, 3, 6, 9, 12] {
            let top = top_level(k);
            for i in 0..400 {
                let s = -3.0 + 6.0 * i as f64 / 399.0;
                let sum: f64 = (0..=top).map(|l| slab_cutoff(l, top, s)).sum();
                assert!((sum - 1.0).abs() < 1e-14, "k={k} s={s} sum={sum}");
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((i - 2.0 / 31.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn piece_rejects_bad_levels() {
        let m = builtin_model("xray").unwrap();
        assert!(DyadicPiece::new(m.clone(), 0, None).is_err());
        assert!(DyadicPiece::new(m.clone(), 6, Some(3)).is_err());
        assert!(DyadicPiece::new(m, 6, Some(2)).is_ok());
    }

    #[test]
    fn on_surface_kernel_is_cutoff_mass() {
        let m = builtin_model("xray").unwrap();
        let piece = DyadicPiece::new(m, 6, Some(1)).unwrap();
        let p = [0.1, 0.0, 0.2, 0.3];
        let q = KernelQuadrature::new(&piece, &p, 0.0, 0.0, 1).unwrap();
        let v = q.eval_displacement([0.0, 0.0]);
        assert!(v.im.abs() < 1e-9 * v.re);
        assert!((v.re - 2f64.powi(12) * q.mass()).abs() < 1e-9 * v.re);
        // direct Riemann sum of the cutoff on a fine grid
        let fr = piece.frame(&p).unwrap();
        let n = 2000;
        let h = 4.0 / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let tau = [-2.0 + (i as f64 + 0.5) * h, -2.0 + (j as f64 + 0.5) * h];
                mass += piece.cutoff(tau, &fr) * h * h;
            }
        }
        assert!((mass - q.mass()).abs() < 1e-4 * mass, "{mass} {}", q.mass());
    }

    #[test]
    fn grid_binary_round_trip() {
        let g = GridSpec::new([3, 2, 2], [0.0, -1.0, 0.5], [0.1, 0.2, 0.3]).unwrap();
        let f = GridFunction::from_fn(g, |p| Complex64::new(p[0] + p[1], p[2]));
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), GRID_HEADER_BYTES + 12 * 8);
        let r = GridFunction::read_binary(&buf[..]).unwrap();
        assert_eq!(r.grid, f.grid);
        for (a, b) in r.samples.iter().zip(&f.samples) {
            assert!((a - b).norm() < 1e-6);
        }
    }
}
