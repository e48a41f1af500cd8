//! Fold quantities of the canonical relation and the cone generated by the
//! kernel of `π_L`.
//!
//! With `P = S¹_x`, `Q = S²_x` and primes for `∂_{y3}`:
//! `Δ_i = det(P, Q, ∂_{y3}S^i_x)`, `Γ1 = det(P, Q', P')`, `Γ2 = det(P', Q, Q')`
//! and `κ = Γ2 Δ1 − Γ1 Δ2 + Δ1 Δ2' − Δ2 Δ1'`. The fold surface is
//! `τ·Δ = 0` and the cone generator is `Ξ = −Δ2 P + Δ1 Q`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jets::{default_reach, Domain, Jet, JetMode};
use crate::linalg::{axpy, cross, det3, norm, scale, V3};
use crate::models::DefiningModel;

/// Degeneracy floor for `|Ξ ∧ Ξ_{y3}|`.
pub const DEGENERACY_FLOOR: f64 = 1e-10;

/// Taylor data of a vector function of y3: derivatives 0..=N-1.
#[derive(Clone, Copy, Debug)]
struct VSeries<const N: usize>([V3; N]);

/// Scalar Taylor data: derivatives 0..=N-1.
#[derive(Clone, Copy, Debug)]
struct SSeries<const N: usize>([f64; N]);

fn multinomial3(n: usize, i: usize, j: usize) -> f64 {
    let f = |k: usize| (1..=k).fold(1.0, |a, m| a * m as f64);
    f(n) / (f(i) * f(j) * f(n - i - j))
}

/// Derivatives of `det(a, b, c)` by the trilinear Leibniz rule.
fn det_series<const N: usize>(a: &VSeries<N>, b: &VSeries<N>, c: &VSeries<N>) -> SSeries<N> {
    let mut out = [0.0; N];
    for (n, o) in out.iter_mut().enumerate() {
        for i in 0..=n {
            for j in 0..=n - i {
                *o += multinomial3(n, i, j) * det3(&a.0[i], &b.0[j], &c.0[n - i - j]);
            }
        }
    }
    SSeries(out)
}

/// Derivatives of `f · v`.
fn mul_series<const N: usize>(f: &SSeries<N>, v: &VSeries<N>) -> VSeries<N> {
    let mut out = [[0.0; 3]; N];
    for (n, o) in out.iter_mut().enumerate() {
        for i in 0..=n {
            let c = crate::linalg::binom(n, i) * f.0[i];
            *o = axpy(c, &v.0[n - i], o);
        }
    }
    VSeries(out)
}

fn shift<const N: usize, const M: usize>(v: &VSeries<N>) -> VSeries<M> {
    VSeries(std::array::from_fn(|k| v.0[k + 1]))
}

/// Fold quantities at one point `(x, y3)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldData {
    pub point: [f64; 4],
    pub delta: [f64; 2],
    pub delta_y3: [f64; 2],
    pub delta_y3y3: [f64; 2],
    pub gamma: [f64; 2],
    pub kappa: f64,
    pub s1_x: V3,
    pub s2_x: V3,
    pub s1_xy3: V3,
    pub s2_xy3: V3,
    /// Ξ and its first two y3-derivatives (available for jets of order 4).
    pub xi: Option<[V3; 3]>,
}

impl FoldData {
    /// Residual of `Γ2 S¹_x − Γ1 S²_x − Δ2 S¹_{xy3} + Δ1 S²_{xy3} = 0`.
    pub fn kernel_field_residual(&self) -> f64 {
        let w = axpy(self.gamma[1], &self.s1_x, &scale(-self.gamma[0], &self.s2_x));
        let w = axpy(-self.delta[1], &self.s1_xy3, &w);
        let w = axpy(self.delta[0], &self.s2_xy3, &w);
        norm(&w)
    }

    /// `det π_L = τ1 Δ1 + τ2 Δ2`.
    pub fn det_pi_l(&self, tau: [f64; 2]) -> f64 {
        tau[0] * self.delta[0] + tau[1] * self.delta[1]
    }

    /// The fold direction `(−Δ2, Δ1)` scaled by `rho`.
    pub fn fold_tau(&self, rho: f64) -> [f64; 2] {
        [-rho * self.delta[1], rho * self.delta[0]]
    }

    /// `det(Ξ, Ξ', Ξ'')`, which equals `−κ²` on a fold.
    pub fn cone_det(&self) -> Option<f64> {
        self.xi.map(|x| det3(&x[0], &x[1], &x[2]))
    }
}

/// Fold quantities from the jets of `S¹` and `S²` (order 3, or 4 for Ξ'').
pub fn fold_data_from_jets(j1: &Jet, j2: &Jet) -> FoldData {
    let order = j1.order.min(j2.order);
    let p: [V3; 4] = std::array::from_fn(|m| if m < order { j1.grad_x_y3(m as u8) } else { [0.0; 3] });
    let q: [V3; 4] = std::array::from_fn(|m| if m < order { j2.grad_x_y3(m as u8) } else { [0.0; 3] });
    let pv = VSeries(p);
    let qv = VSeries(q);
    let p1: VSeries<3> = shift(&pv);
    let q1: VSeries<3> = shift(&qv);
    let p0 = VSeries([p[0], p[1], p[2]]);
    let q0 = VSeries([q[0], q[1], q[2]]);
    let d1 = det_series(&p0, &q0, &p1);
    let d2 = det_series(&p0, &q0, &q1);
    let g1 = det3(&p[0], &q[1], &p[1]);
    let g2 = det3(&p[1], &q[0], &q[1]);
    let kappa = g2 * d1.0[0] - g1 * d2.0[0] + d1.0[0] * d2.0[1] - d2.0[0] * d1.0[1];
    let xi = if order >= 4 {
        let nd2 = SSeries(d2.0.map(|v| -v));
        let a = mul_series(&nd2, &p0);
        let b = mul_series(&d1, &q0);
        Some(std::array::from_fn(|k| axpy(1.0, &a.0[k], &b.0[k])))
    } else {
        None
    };
    FoldData {
        point: j1.point,
        delta: [d1.0[0], d2.0[0]],
        delta_y3: [d1.0[1], d2.0[1]],
        delta_y3y3: if order >= 4 { [d1.0[2], d2.0[2]] } else { [f64::NAN; 2] },
        gamma: [g1, g2],
        kappa,
        s1_x: p[0],
        s2_x: q[0],
        s1_xy3: p[1],
        s2_xy3: q[1],
        xi,
    }
}

/// Fold quantities of `model` at `p = (x, y3)`.
pub fn fold_data(model: &DefiningModel, p: &[f64; 4], mode: JetMode) -> Result<FoldData> {
    let [j1, j2] = model.jets(p, 4, mode)?;
    Ok(fold_data_from_jets(&j1, &j2))
}

/// Ξ and its y3-derivatives with the principal curvature of the cone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConeFrame {
    pub xi: V3,
    pub xi_y3: V3,
    pub xi_y3y3: V3,
    pub det: f64,
    pub kappa: f64,
    /// `−ρ κ² / |Ξ ∧ Ξ_{y3}|` for the generator scaled by `ρ`.
    pub principal_curvature: f64,
}

/// Cone frame from jets at `p`.
pub fn cone_frame(model: &DefiningModel, p: &[f64; 4], rho: f64, mode: JetMode) -> Result<ConeFrame> {
    let fd = fold_data(model, p, mode)?;
    let [xi, xi1, xi2] = fd.xi.expect("order-4 jets provide Ξ''");
    frame_from(xi, xi1, xi2, fd.kappa, rho)
}

fn frame_from(xi: V3, xi1: V3, xi2: V3, kappa: f64, rho: f64) -> Result<ConeFrame> {
    let w = norm(&cross(&xi, &xi1));
    if w < DEGENERACY_FLOOR {
        return Err(Error::DegenerateFrame(format!("|Ξ ∧ Ξ_y3| = {w:e}")));
    }
    Ok(ConeFrame {
        xi,
        xi_y3: xi1,
        xi_y3y3: xi2,
        det: det3(&xi, &xi1, &xi2),
        kappa,
        principal_curvature: -rho * kappa * kappa / w,
    })
}

/// Cone frame with Ξ' and Ξ'' from central differences of `y3 ↦ Ξ(x, y3)`.
pub fn cone_frame_fd(model: &DefiningModel, p: &[f64; 4], rho: f64, h: f64, mode: JetMode) -> Result<ConeFrame> {
    let xi_at = |t: f64| -> Result<(V3, f64)> {
        let q = [p[0], p[1], p[2], t];
        let [j1, j2] = model.jets(&q, 3, mode)?;
        let fd = fold_data_from_jets(&j1, &j2);
        Ok((axpy(-fd.delta[1], &fd.s1_x, &scale(fd.delta[0], &fd.s2_x)), fd.kappa))
    };
    let (x0, kappa) = xi_at(p[3])?;
    let (xp, _) = xi_at(p[3] + h)?;
    let (xm, _) = xi_at(p[3] - h)?;
    let xi1 = std::array::from_fn(|i| (xp[i] - xm[i]) / (2.0 * h));
    let xi2 = std::array::from_fn(|i| (xp[i] - 2.0 * x0[i] + xm[i]) / (h * h));
    frame_from(x0, xi1, xi2, kappa, rho)
}

/// `V_L^± (τ·Δ)` at `τ = ±ρ(−Δ2, Δ1)`, by a central difference along the
/// field `±|τ|/|Δ| (Γ2 ∂_{τ1} − Γ1 ∂_{τ2}) + ∂_{y3}`.
pub fn vl_derivative(model: &DefiningModel, p: &[f64; 4], rho: f64, sign: f64, h: f64, mode: JetMode) -> Result<f64> {
    let fd = fold_data(model, p, mode)?;
    let tau = fd.fold_tau(sign * rho);
    let dn = (fd.delta[0].powi(2) + fd.delta[1].powi(2)).sqrt();
    let tn = (tau[0].powi(2) + tau[1].powi(2)).sqrt();
    let v = [sign * tn / dn * fd.gamma[1], -sign * tn / dn * fd.gamma[0]];
    let delta_at = |t: f64| -> Result<[f64; 2]> {
        let q = [p[0], p[1], p[2], t];
        let [j1, j2] = model.jets(&q, 3, mode)?;
        Ok(fold_data_from_jets(&j1, &j2).delta)
    };
    let dp = delta_at(p[3] + h)?;
    let dm = delta_at(p[3] - h)?;
    let fp = (tau[0] + h * v[0]) * dp[0] + (tau[1] + h * v[1]) * dp[1];
    let fm = (tau[0] - h * v[0]) * dm[0] + (tau[1] - h * v[1]) * dm[1];
    Ok((fp - fm) / (2.0 * h))
}

/// One line of the identity suite.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CanrelReport {
    pub check: String,
    pub model: String,
    pub n_samples: usize,
    pub max_residual: f64,
    pub pass: bool,
}

/// Tolerances for [`verify_identities`].
#[derive(Clone, Copy, Debug)]
pub struct IdentityTolerances {
    pub algebraic: f64,
    pub directional: f64,
}

impl IdentityTolerances {
    pub fn for_mode(mode: JetMode) -> Self {
        match mode {
            JetMode::FiniteDifference { .. } => IdentityTolerances { algebraic: 1e-3, directional: 1e-4 },
            _ => IdentityTolerances { algebraic: 1e-6, directional: 1e-4 },
        }
    }
}

/// Check the kernel-field identity, `det(Ξ, Ξ', Ξ'') = −κ²` and the
/// `V_L`-derivative identity at `n` seeded random points.
pub fn verify_identities(model: &DefiningModel, n: usize, seed: u64, mode: JetMode) -> Result<Vec<CanrelReport>> {
    let tol = IdentityTolerances::for_mode(mode);
    let h = 1e-4 * model.domain().diameter();
    let margin = default_reach(model.domain(), 4).max(2.0 * h) * 1.01;
    let inner = model.domain().shrink(margin);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..n {
        let p = inner.sample(&mut rng);
        let fd = fold_data(model, &p, mode)?;
        worst[0] = worst[0].max(fd.kernel_field_residual());
        let det = fd.cone_det().unwrap_or(f64::NAN);
        worst[1] = worst[1].max((det + fd.kappa * fd.kappa).abs());
        for (k, sign) in [(2, 1.0), (3, -1.0)] {
            let d = vl_derivative(model, &p, 1.0, sign, h, mode)?;
            worst[k] = worst[k].max((d - sign * fd.kappa).abs());
        }
    }
    let names = ["kernel_field", "cone_curvature", "vl_kappa_plus", "vl_kappa_minus"];
    Ok(names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let t = if k < 2 { tol.algebraic } else { tol.directional };
            CanrelReport {
                check: name.to_string(),
                model: model.name.clone(),
                n_samples: n,
                max_residual: worst[k],
                pass: worst[k] < t,
            }
        })
        .collect())
}

/// Result of [`nondegeneracy_scan`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NondegeneracyReport {
    pub model: String,
    pub n_samples: usize,
    /// Smallest `|Δ1| + |Δ2|` seen, and where.
    pub min_delta_sum: f64,
    pub argmin: [f64; 4],
    pub floor: f64,
    pub pass: bool,
}

/// Minimum of `|Δ1| + |Δ2|` over `n` seeded points of `region`.
pub fn nondegeneracy_scan(
    model: &DefiningModel,
    region: &Domain,
    n: usize,
    seed: u64,
    mode: JetMode,
    floor: f64,
) -> Result<NondegeneracyReport> {
    if n == 0 {
        return Err(Error::config("nondegeneracy scan needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (f64::INFINITY, [0.0; 4]);
    for _ in 0..n {
        let p = region.sample(&mut rng);
        let d = fold_data(model, &p, mode)?.delta;
        let v = d[0].abs() + d[1].abs();
        if v < best.0 {
            best = (v, p);
        }
    }
    Ok(NondegeneracyReport {
        model: model.name.clone(),
        n_samples: n,
        min_delta_sum: best.0,
        argmin: best.1,
        floor,
        pass: best.0 > floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_model;

    #[test]
    fn xray_anchor_values() {
        let m = builtin_model("xray").unwrap();
        let fd = fold_data(&m, &[0.0; 4], JetMode::ClosedForm).unwrap();
        assert_eq!(fd.delta, [-1.0, 0.0]);
        assert_eq!(fd.kappa, 1.0);
        let cf = cone_frame(&m, &[0.0; 4], 1.0, JetMode::ClosedForm).unwrap();
        assert!((cf.det + 1.0).abs() < 1e-14);
        assert!((cf.principal_curvature + 1.0).abs() < 1e-14);
    }

    #[test]
    fn xray_delta_sum_is_one() {
        let m = builtin_model("xray").unwrap();
        let r = nondegeneracy_scan(&m, &m.domain().shrink(0.1), 200, 1, JetMode::ClosedForm, 0.5).unwrap();
        // Δ1 ≡ −1, so the sum never drops below one
        assert!(r.min_delta_sum >= 1.0 - 1e-12 && r.min_delta_sum < 1.1 && r.pass);
    }

    #[test]
    fn fd_cone_frame_agrees() {
        let m = builtin_model("heisenberg_plane").unwrap();
        let p = [0.1, -0.05, 0.2, 0.15];
        let a = cone_frame(&m, &p, 1.0, JetMode::ClosedForm).unwrap();
        let b = cone_frame_fd(&m, &p, 1.0, 1e-3, JetMode::ClosedForm).unwrap();
        for i in 0..3 {
            assert!((a.xi_y3[i] - b.xi_y3[i]).abs() < 1e-5);
            assert!((a.xi_y3y3[i] - b.xi_y3y3[i]).abs() < 1e-5);
        }
    }
}
