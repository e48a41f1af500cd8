//! Normalizing changes of variables at a base point `(a, b)`.
//!
//! The output side uses `w = 𝔴(x)` (inverted by Newton's method), the input
//! side uses the explicit pair `z = 𝔷(y)`, `y = 𝔶(z)`, and the normalized
//! defining functions are
//!
//! ```text
//! 𝔖¹(w, z3) = S¹(𝔵(w), b+z3) − S¹(a, b+z3)
//! 𝔖²(w, z3) = (1 − ρ2 z3)(S²(𝔵, b+z3) − S²(a, b+z3)) − (ρ3 + ρ1 z3)(S¹(𝔵, b+z3) − S¹(a, b+z3))
//! ```
//!
//! which is what `B(z3)(S(𝔵(w), b+z3) − 𝔶'(z)) = 𝔖(w, z3) − z'` forces.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canrel::fold_data;
use crate::error::{Error, Result};
use crate::jets::{eval_jet, indices, Domain, JetMode, MultiIndex, ScalarField};
use crate::linalg::{mat_det, mat_inv, mat_vec, M3, V3};
use crate::models::DefiningModel;

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX: usize = 50;

/// Radii of the construction: `r2 = r1/(50 M^5)`, `r3 < min(r1, 1/(24 M^4))`,
/// plus the working radii actually used for the normalized box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Radii {
    pub m: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub w_radius: f64,
    pub z3_radius: f64,
}

struct Inner {
    model: DefiningModel,
    a: V3,
    b: f64,
    rho: V3,
    j0_inv: M3,
}

/// A model normalized at a base point.
#[derive(Clone)]
pub struct Normalization {
    inner: Arc<Inner>,
    pub swapped: bool,
    pub delta1: f64,
    pub kappa: f64,
    pub radii: Radii,
    /// The normalized model in variables `(w1, w2, w3, z3)`.
    pub normalized: DefiningModel,
}

impl Inner {
    fn p(&self, x: &V3, y3: f64) -> [f64; 4] {
        [x[0], x[1], x[2], y3]
    }

    fn w_map(&self, x: &V3) -> V3 {
        let (m, b, a) = (&self.model, self.b, &self.a);
        let sx = m.eval(&self.p(x, b));
        let sa = m.eval(&self.p(a, b));
        let d1 = |p: &[f64; 4]| m.s1.closed_form(p, MultiIndex::y3(1));
        let dy = match (d1(&self.p(x, b)), d1(&self.p(a, b))) {
            (Some(u), Some(v)) => u - v,
            _ => {
                let jx = eval_jet(&*m.s1, &self.p(x, b), 1, JetMode::Auto);
                let ja = eval_jet(&*m.s1, &self.p(a, b), 1, JetMode::Auto);
                match (jx, ja) {
                    (Ok(u), Ok(v)) => u.get(MultiIndex::y3(1)) - v.get(MultiIndex::y3(1)),
                    _ => f64::NAN,
                }
            }
        };
        [sx[0] - sa[0], (sx[1] - self.rho[2] * sx[0]) - (sa[1] - self.rho[2] * sa[0]), dy]
    }

    fn w_jacobian(&self, x: &V3) -> Result<M3> {
        let [j1, j2] = self.model.jets(&self.p(x, self.b), 2, JetMode::Auto)?;
        let p = j1.grad_x_y3(0);
        let q = j2.grad_x_y3(0);
        let p1 = j1.grad_x_y3(1);
        Ok([p, std::array::from_fn(|i| q[i] - self.rho[2] * p[i]), p1])
    }

    fn x_map(&self, w: &V3) -> Result<V3> {
        let dom = self.model.domain();
        let mut x = {
            let d = mat_vec(&self.j0_inv, w);
            [self.a[0] + d[0], self.a[1] + d[1], self.a[2] + d[2]]
        };
        for _ in 0..NEWTON_MAX {
            if !dom.contains(&self.p(&x, self.b)) {
                return Err(Error::Solve(format!("Newton iterate {x:?} left the domain")));
            }
            let r = self.w_map(&x);
            let res = [r[0] - w[0], r[1] - w[1], r[2] - w[2]];
            let rn = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if rn <= NEWTON_TOL {
                return Ok(x);
            }
            let j = self.w_jacobian(&x)?;
            let ji = mat_inv(&j, 1e-14).ok_or_else(|| Error::Solve("singular Jacobian".into()))?;
            let d = mat_vec(&ji, &res);
            x = [x[0] - d[0], x[1] - d[1], x[2] - d[2]];
        }
        Err(Error::Solve(format!("Newton did not converge for w = {w:?}")))
    }

    fn s_at(&self, x: &V3, y3: f64) -> [f64; 2] {
        self.model.eval(&self.p(x, y3))
    }

    fn z_map(&self, y: &V3) -> V3 {
        let sa = self.s_at(&self.a, y[2]);
        let (d1, d2) = (y[0] - sa[0], y[1] - sa[1]);
        let z3 = y[2] - self.b;
        let rho = &self.rho;
        [d1, d2 - rho[2] * d1 - z3 * (rho[0] * d1 + rho[1] * d2), z3]
    }

    fn y_map(&self, z: &V3) -> V3 {
        let y3 = self.b + z[2];
        let sa = self.s_at(&self.a, y3);
        let rho = &self.rho;
        let y2 = sa[1] + (z[1] + z[0] * (rho[2] + rho[0] * z[2])) / (1.0 - rho[1] * z[2]);
        [z[0] + sa[0], y2, y3]
    }

    fn frak_s(&self, w: &V3, z3: f64) -> Result<[f64; 2]> {
        let x = self.x_map(w)?;
        let y3 = self.b + z3;
        let sx = self.s_at(&x, y3);
        let sa = self.s_at(&self.a, y3);
        let (d1, d2) = (sx[0] - sa[0], sx[1] - sa[1]);
        let rho = &self.rho;
        Ok([d1, (1.0 - rho[1] * z3) * d2 - (rho[2] + rho[0] * z3) * d1])
    }

    /// Closed-form partials of 𝔖^comp for multi-indices of w-order at most one.
    fn frak_partials(&self, comp: usize, q: &[f64; 4], alphas: &[MultiIndex]) -> Vec<Option<f64>> {
        let w = [q[0], q[1], q[2]];
        let z3 = q[3];
        let y3 = self.b + z3;
        let x = match self.x_map(&w) {
            Ok(x) => x,
            Err(_) => return vec![None; alphas.len()],
        };
        let jac = match self.w_jacobian(&x).ok().and_then(|j| mat_inv(&j, 1e-14)) {
            Some(j) => j,
            None => return vec![None; alphas.len()],
        };
        let (jx, ja) = match (
            self.model.jets(&self.p(&x, y3), 4, JetMode::Auto),
            self.model.jets(&self.p(&self.a, y3), 3, JetMode::Auto),
        ) {
            (Ok(u), Ok(v)) => (u, v),
            _ => return vec![None; alphas.len()],
        };
        // D_i^{(m)} and its w_j derivative
        let d = |i: usize, m: u8| jx[i].get(MultiIndex::y3(m)) - ja[i].get(MultiIndex::y3(m));
        let dw = |i: usize, m: u8, j: usize| {
            let g = jx[i].grad_x_y3(m);
            // ∂x_k/∂w_j = jac[k][j]
            g[0] * jac[0][j] + g[1] * jac[1][j] + g[2] * jac[2][j]
        };
        let rho = self.rho;
        alphas
            .iter()
            .map(|a| {
                let [w1, w2, w3, m] = a.0;
                let wo = w1 + w2 + w3;
                if wo > 1 || m > 3 {
                    return None;
                }
                let j = if w1 == 1 {
                    0
                } else if w2 == 1 {
                    1
                } else {
                    2
                };
                let f = |i: usize, mm: u8| if wo == 0 { d(i, mm) } else { dw(i, mm, j) };
                if comp == 0 {
                    return Some(f(0, m));
                }
                let mf = m as f64;
                let mut v = (1.0 - rho[1] * z3) * f(1, m) - (rho[2] + rho[0] * z3) * f(0, m);
                if m > 0 {
                    v -= mf * (rho[1] * f(1, m - 1) + rho[0] * f(0, m - 1));
                }
                Some(v)
            })
            .collect()
    }
}

struct FrakField {
    inner: Arc<Inner>,
    comp: usize,
    domain: Domain,
}

impl ScalarField for FrakField {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn eval(&self, q: &[f64; 4]) -> f64 {
        self.inner.frak_s(&[q[0], q[1], q[2]], q[3]).map(|v| v[self.comp]).unwrap_or(f64::NAN)
    }
    fn closed_form(&self, q: &[f64; 4], alpha: MultiIndex) -> Option<f64> {
        self.inner.frak_partials(self.comp, q, &[alpha])[0]
    }
    fn closed_forms(&self, q: &[f64; 4], alphas: &[MultiIndex]) -> Vec<Option<f64>> {
        self.inner.frak_partials(self.comp, q, alphas)
    }
}

/// Estimate of `2 + ‖S‖_{C^4} + max |Δ1|^{-1}` from jets on a probe grid
/// around the base point.
fn estimate_m(model: &DefiningModel, a: &V3, b: f64, r: f64) -> Result<f64> {
    let dom = model.domain();
    let mut cnorm = 0.0f64;
    let mut inv_d1 = 0.0f64;
    for i in 0..27 {
        let o = [(i % 3) as f64 - 1.0, ((i / 3) % 3) as f64 - 1.0, (i / 9) as f64 - 1.0];
        let p = [a[0] + r * o[0], a[1] + r * o[1], a[2] + r * o[2], b];
        if !dom.contains(&p) {
            continue;
        }
        let [j1, j2] = model.jets(&p, 4, JetMode::Auto)?;
        for al in indices(4) {
            cnorm = cnorm.max(j1.get(*al).abs()).max(j2.get(*al).abs());
        }
        let fd = crate::canrel::fold_data_from_jets(&j1, &j2);
        inv_d1 = inv_d1.max(1.0 / fd.delta[0].abs().max(fd.delta[1].abs()));
    }
    Ok(2.0 + cnorm + inv_d1)
}

/// Normalize `model` at `(a, b)`. The defining functions are exchanged first
/// when `|Δ1(a, b)| < |Δ2(a, b)|`.
pub fn normalize(model: &DefiningModel, a: V3, b: f64) -> Result<Normalization> {
    let p = [a[0], a[1], a[2], b];
    let fd0 = fold_data(model, &p, JetMode::Auto)?;
    let swapped = fd0.delta[0].abs() < fd0.delta[1].abs();
    let model = if swapped { model.swapped() } else { model.clone() };
    let fd = fold_data(&model, &p, JetMode::Auto)?;
    let d1 = fd.delta[0];
    if !(d1.abs() > 1e-10) {
        return Err(Error::Normalization(format!("Δ vanishes at the base point {p:?}")));
    }
    let rho = [-fd.gamma[1] / d1, fd.gamma[0] / d1, fd.delta[1] / d1];
    let mut inner = Inner { model: model.clone(), a, b, rho, j0_inv: [[0.0; 3]; 3] };
    let j0 = inner.w_jacobian(&a)?;
    inner.j0_inv = mat_inv(&j0, 1e-14).ok_or_else(|| Error::Normalization("singular D𝔴/Dx".into()))?;
    let dom = model.domain();
    let margin = crate::jets::default_reach(dom, 4) * 1.01;
    let dist_x = (0..3).map(|i| (a[i] - dom.lo[i]).min(dom.hi[i] - a[i])).fold(f64::INFINITY, f64::min) - margin;
    let dist_y = (b - dom.lo[3]).min(dom.hi[3] - b) - margin;
    if !(dist_x > 0.0 && dist_y > 0.0) {
        return Err(Error::Normalization(format!("base point {p:?} is too close to the boundary")));
    }
    let jinv_norm = (0..3).map(|i| inner.j0_inv[i].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let inner = Arc::new(inner);
    // working radius in w: shrink until Newton succeeds on the box corners
    let mut rw = 0.5 * dist_x / jinv_norm;
    let mut ok = false;
    for _ in 0..40 {
        let inside = (0..27).all(|i| {
            let o = [(i % 3) as f64 - 1.0, ((i / 3) % 3) as f64 - 1.0, (i / 9) as f64 - 1.0];
            let w = [rw * o[0], rw * o[1], rw * o[2]];
            inner.x_map(&w).map(|x| dom.shrink(margin).contains(&[x[0], x[1], x[2], b])).unwrap_or(false)
        });
        if inside {
            ok = true;
            break;
        }
        rw *= 0.5;
    }
    if !ok {
        return Err(Error::Normalization("no working radius found for 𝔵".into()));
    }
    let mut rz = dist_y;
    if rho[1] != 0.0 {
        rz = rz.min(0.5 / rho[1].abs());
    }
    let m = estimate_m(&model, &a, b, 0.5 * dist_x.min(0.1))?;
    let r1 = rw.min(rz);
    let r2 = r1 / (50.0 * m.powi(5));
    let r3 = 0.99 * r1.min(1.0 / (24.0 * m.powi(4)));
    let ndom = Domain::new([-rw, -rw, -rw, -rz], [rw, rw, rw, rz]);
    let mk =
        |comp| -> Arc<dyn ScalarField> { Arc::new(FrakField { inner: inner.clone(), comp, domain: ndom.clone() }) };
    let normalized =
        DefiningModel { name: format!("{}-normalized", model.name), s1: mk(0), s2: mk(1), horizontal: false };
    Ok(Normalization {
        inner,
        swapped,
        delta1: d1,
        kappa: fd.kappa,
        radii: Radii { m, r1, r2, r3, w_radius: rw, z3_radius: rz },
        normalized,
    })
}

impl Normalization {
    pub fn base(&self) -> (V3, f64) {
        (self.inner.a, self.inner.b)
    }
    pub fn rho(&self) -> V3 {
        self.inner.rho
    }
    pub fn model(&self) -> &DefiningModel {
        &self.inner.model
    }
    pub fn w_map(&self, x: &V3) -> V3 {
        self.inner.w_map(x)
    }
    pub fn x_map(&self, w: &V3) -> Result<V3> {
        self.inner.x_map(w)
    }
    pub fn z_map(&self, y: &V3) -> V3 {
        self.inner.z_map(y)
    }
    pub fn y_map(&self, z: &V3) -> V3 {
        self.inner.y_map(z)
    }
    /// `(𝔖¹, 𝔖²)(w, z3)`.
    pub fn frak_s(&self, w: &V3, z3: f64) -> Result<[f64; 2]> {
        self.inner.frak_s(w, z3)
    }
    /// First w-derivatives of 𝔖 and of 𝔖_{z3} at `(w, z3)`, together with
    /// `Δ^𝔖 = (det(𝔖¹_w, 𝔖²_w, 𝔖ⁱ_{wz3}))ᵢ`.
    pub fn w_gradients(&self, w: &V3, z3: f64) -> Result<WGradients> {
        let q = [w[0], w[1], w[2], z3];
        let al: Vec<MultiIndex> =
            (0..3).map(|j| MultiIndex::x_y3(j, 0)).chain((0..3).map(|j| MultiIndex::x_y3(j, 1))).collect();
        let mut s_w = [[0.0; 3]; 2];
        let mut s_wz3 = [[0.0; 3]; 2];
        for c in 0..2 {
            let v = self.inner.frak_partials(c, &q, &al);
            for j in 0..3 {
                s_w[c][j] = v[j].ok_or_else(|| Error::Solve(format!("𝔖 undefined at {q:?}")))?;
                s_wz3[c][j] = v[3 + j].ok_or_else(|| Error::Solve(format!("𝔖 undefined at {q:?}")))?;
            }
        }
        let delta =
            [crate::linalg::det3(&s_w[0], &s_w[1], &s_wz3[0]), crate::linalg::det3(&s_w[0], &s_w[1], &s_wz3[1])];
        Ok(WGradients { s_w, s_wz3, delta })
    }

    /// `κ(a, b) / Δ1(a, b)²`, the curvature of the normalized model at the origin.
    pub fn kappa0(&self) -> f64 {
        self.kappa / (self.delta1 * self.delta1)
    }
    /// `B(z3)` as a row-major 2x2 matrix.
    pub fn b_matrix(&self, z3: f64) -> [[f64; 2]; 2] {
        let r = self.inner.rho;
        [[1.0, 0.0], [-r[2] - r[0] * z3, 1.0 - r[1] * z3]]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WGradients {
    pub s_w: [V3; 2],
    pub s_wz3: [V3; 2],
    pub delta: [f64; 2],
}

/// One line of the change-of-variables report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChangevarsReport {
    pub lemma_item: String,
    pub basepoint: [f64; 4],
    pub max_residual: f64,
    pub pass: bool,
}

pub const CHANGEVARS_TOL: f64 = 1e-4;

fn jac_fd(f: &dyn Fn(&V3) -> Result<V3>, x: &V3, h: f64) -> Result<M3> {
    let mut cols = [[0.0; 3]; 3];
    for (j, col) in cols.iter_mut().enumerate() {
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp)?, f(&xm)?);
        *col = std::array::from_fn(|i| (fp[i] - fm[i]) / (2.0 * h));
    }
    // rows = components, columns = variables
    Ok(std::array::from_fn(|i| std::array::from_fn(|j| cols[j][i])))
}

/// Verify items (i)-(v) of the normalization lemma at one base point,
/// using `n` seeded random samples inside the working radii.
pub fn check_lemma(model: &DefiningModel, a: V3, b: f64, n: usize, seed: u64) -> Result<Vec<ChangevarsReport>> {
    let nz = normalize(model, a, b)?;
    let inner = &nz.inner;
    let basepoint = [a[0], a[1], a[2], b];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rw = 0.5 * nz.radii.w_radius;
    let rz = 0.5 * nz.radii.z3_radius;
    let mut rnd = |r: f64| -> V3 { std::array::from_fn(|_| r * (2.0 * rng.random::<f64>() - 1.0)) };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rnd(rw);
        let z = rnd(1.0);
        samples.push((w, rz * z[2], [z[0], z[1]]));
    }
    let mut reports = Vec::new();
    let mut push = |item: &str, r: f64, tol: f64| {
        reports.push(ChangevarsReport { lemma_item: item.into(), basepoint, max_residual: r, pass: r <= tol });
    };

    // (i): exact identities
    let x0 = nz.x_map(&[0.0; 3])?;
    let sab = inner.s_at(&a, b);
    let y0 = nz.y_map(&[0.0; 3]);
    let z0 = nz.z_map(&[sab[0], sab[1], b]);
    let mut r = 0.0f64;
    for i in 0..3 {
        r = r.max((x0[i] - a[i]).abs()).max(z0[i].abs());
    }
    r = r.max((y0[0] - sab[0]).abs()).max((y0[1] - sab[1]).abs()).max((y0[2] - b).abs());
    push("i", r, 0.0);

    // (ii): Jacobian determinants by differences, and the round trips
    let mut r = 0.0f64;
    let h = 1e-5;
    for (w, z3, zp) in &samples {
        let x = nz.x_map(w)?;
        let jx = jac_fd(&|v: &V3| inner.x_map(v), w, h)?;
        let [j1, j2] = inner.model.jets(&[x[0], x[1], x[2], b], 3, JetMode::Auto)?;
        let d1 = crate::canrel::fold_data_from_jets(&j1, &j2).delta[0];
        r = r.max((mat_det(&jx) * d1 - 1.0).abs());
        let wb = nz.w_map(&x);
        r = r.max((0..3).map(|i| (wb[i] - w[i]).abs()).fold(0.0, f64::max));
        let z = [zp[0], zp[1], *z3];
        let y = nz.y_map(&z);
        let jz = jac_fd(&|v: &V3| Ok(inner.z_map(v)), &y, h)?;
        r = r.max((mat_det(&jz) - (1.0 - inner.rho[1] * z3)).abs());
        let zb = nz.z_map(&y);
        r = r.max((0..3).map(|i| (zb[i] - z[i]).abs()).fold(0.0, f64::max));
    }
    push("ii", r, CHANGEVARS_TOL);

    // (iii): the defining relation and the normalizations
    let mut r = 0.0f64;
    for (w, z3, zp) in &samples {
        let x = nz.x_map(w)?;
        let z = [zp[0], zp[1], *z3];
        let y = nz.y_map(&z);
        let s = inner.s_at(&x, b + z3);
        let bm = nz.b_matrix(*z3);
        let u = [s[0] - y[0], s[1] - y[1]];
        let lhs = [bm[0][0] * u[0] + bm[0][1] * u[1], bm[1][0] * u[0] + bm[1][1] * u[1]];
        let fs = nz.frak_s(w, *z3)?;
        r = r.max((lhs[0] - (fs[0] - z[0])).abs()).max((lhs[1] - (fs[1] - z[1])).abs());
        let f0 = nz.frak_s(w, 0.0)?;
        r = r.max((f0[0] - w[0]).abs()).max((f0[1] - w[1]).abs());
        let q = [w[0], w[1], w[2], 0.0];
        let j = eval_jet(&*nz.normalized.s1, &q, 1, JetMode::FiniteDifference { step: None })?;
        r = r.max((j.get(MultiIndex::y3(1)) - w[2]).abs());
    }
    let j2 = eval_jet(&*nz.normalized.s2, &[0.0; 4], 2, JetMode::FiniteDifference { step: None })?;
    for i in 0..3 {
        r = r.max(j2.get(MultiIndex::x_y3(i, 1)).abs());
    }
    push("iii", r, CHANGEVARS_TOL);

    // (iv): transformation of Δ under B
    let mut r = 0.0f64;
    for (k, (w, z3, _)) in samples.iter().enumerate() {
        let mu = [((k * 7 + 3) % 11) as f64 / 5.0 - 1.0, ((k * 5 + 1) % 13) as f64 / 6.0 - 1.0];
        let bm = nz.b_matrix(*z3);
        let tau = [mu[0] * bm[0][0] + mu[1] * bm[1][0], mu[1] * bm[1][1]];
        let x = nz.x_map(w)?;
        let ds = fold_data(&inner.model, &[x[0], x[1], x[2], b + z3], JetMode::Auto)?.delta;
        let d1b = fold_data(&inner.model, &[x[0], x[1], x[2], b], JetMode::Auto)?.delta[0];
        let dn = fold_data(&nz.normalized, &[w[0], w[1], w[2], *z3], JetMode::FiniteDifference { step: None })?.delta;
        let lhs = tau[0] * ds[0] + tau[1] * ds[1];
        let rhs = d1b / (1.0 - inner.rho[1] * z3) * (mu[0] * dn[0] + mu[1] * dn[1]);
        r = r.max((lhs - rhs).abs());
    }
    push("iv", r, CHANGEVARS_TOL);

    // (v): third mixed derivative by differences of the composition
    let j = eval_jet(&*nz.normalized.s2, &[0.0; 4], 3, JetMode::FiniteDifference { step: None })?;
    let v = j.get(MultiIndex([0, 0, 1, 2]));
    push("v", (v - nz.kappa0()).abs(), CHANGEVARS_TOL);
    Ok(reports)
}

/// `n x n` grid of base points: `a3` and `b` vary over the inner half of the
/// domain, `a1`, `a2` sit at the center.
pub fn basepoint_grid(model: &DefiningModel, n: usize) -> Vec<(V3, f64)> {
    let d = model.domain();
    let c = d.center();
    let lerp = |i: usize, k: usize| {
        let t = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
        let (lo, hi) = (0.75 * d.lo[i] + 0.25 * d.hi[i], 0.25 * d.lo[i] + 0.75 * d.hi[i]);
        lo + t * (hi - lo)
    };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(([c[0], c[1], lerp(2, i)], lerp(3, j)));
        }
    }
    out
}

/// Measured Taylor errors of the normalized gradients, as fractions of their
/// bounds: `E¹` against `8 M0 δ0²`, the tangential part of `E²` against the
/// same, and `⟨e3, E²⟩` against `M0 (8 δ0 2^{-ℓ} + 2 δ0³)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaylorReport {
    pub ell: u32,
    pub delta0: f64,
    pub m0: f64,
    pub n_samples: usize,
    pub normalized: bool,
    pub ratio_e1: f64,
    pub ratio_e2_tangential: f64,
    pub ratio_e2_normal: f64,
    pub pass: bool,
}

/// Sample `|w|∞ ≤ 2^{-ℓ}`, `|z3| ≤ δ0` and compare `𝔖¹_w − e1 − z3 e3` and
/// `𝔖²_w − e2 − κ0 z3²/2 e3` with their bounds. With `normalized = false` the
/// raw gradients `S_x(a + w, b + z3)` are used instead, as a control.
pub fn verify_taylor_structure(
    nz: &Normalization,
    ell: u32,
    delta0: f64,
    n: usize,
    seed: u64,
    normalized: bool,
) -> Result<TaylorReport> {
    let r_w = 2f64.powi(-(ell as i32));
    if r_w > delta0 {
        return Err(Error::config(format!("need 2^-ℓ ≤ δ0, got 2^-{ell} > {delta0}")));
    }
    if r_w > nz.radii.w_radius || delta0 > nz.radii.z3_radius {
        return Err(Error::config(format!(
            "sample box (|w| ≤ {r_w}, |z3| ≤ {delta0}) exceeds the normalized domain ({}, {})",
            nz.radii.w_radius, nz.radii.z3_radius
        )));
    }
    let m0 = nz.radii.m;
    let kappa0 = nz.kappa0();
    let (a, b) = nz.base();
    let bound_t = 8.0 * m0 * delta0 * delta0;
    let bound_n = m0 * (8.0 * delta0 * r_w + 2.0 * delta0.powi(3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..n {
        let w: V3 = std::array::from_fn(|_| r_w * (2.0 * rng.random::<f64>() - 1.0));
        let z3 = delta0 * (2.0 * rng.random::<f64>() - 1.0);
        let grads = if normalized {
            nz.w_gradients(&w, z3)?.s_w
        } else {
            let p = [a[0] + w[0], a[1] + w[1], a[2] + w[2], b + z3];
            let [j1, j2] = nz.model().jets(&p, 1, JetMode::Auto)?;
            [j1.grad_x_y3(0), j2.grad_x_y3(0)]
        };
        let e1 = [grads[0][0] - 1.0, grads[0][1], grads[0][2] - z3];
        let e2 = [grads[1][0], grads[1][1] - 1.0, grads[1][2] - 0.5 * kappa0 * z3 * z3];
        worst[0] = worst[0].max(e1.iter().fold(0.0f64, |m, v| m.max(v.abs())) / bound_t);
        worst[1] = worst[1].max(e2[0].abs().max(e2[1].abs()) / bound_t);
        worst[2] = worst[2].max(e2[2].abs() / bound_n);
    }
    Ok(TaylorReport {
        ell,
        delta0,
        m0,
        n_samples: n,
        normalized,
        ratio_e1: worst[0],
        ratio_e2_tangential: worst[1],
        ratio_e2_normal: worst[2],
        pass: worst.iter().all(|r| *r <= 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_model;

    #[test]
    fn xray_at_origin_is_explicit() {
        let m = builtin_model("xray").unwrap();
        let nz = normalize(&m, [0.0; 3], 0.0).unwrap();
        assert_eq!(nz.rho(), [0.0, 0.0, 0.0]);
        let x = nz.x_map(&[0.01, -0.02, 0.03]).unwrap();
        assert!((x[0] - 0.01).abs() < 1e-14 && (x[1] + 0.02).abs() < 1e-14 && (x[2] + 0.03).abs() < 1e-14);
        let s = nz.frak_s(&[0.01, -0.02, 0.03], 0.1).unwrap();
        assert!((s[0] - (0.01 + 0.03 * 0.1)).abs() < 1e-14);
        assert!((s[1] - (-0.02 + 0.03 * 0.01 / 2.0)).abs() < 1e-14);
        assert!((nz.kappa0() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn xray_taylor_errors_within_bounds() {
        let m = builtin_model("xray").unwrap();
        let nz = normalize(&m, [0.0; 3], 0.0).unwrap();
        let r = verify_taylor_structure(&nz, 6, 2f64.powi(-4), 200, 3, true).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
