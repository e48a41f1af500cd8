//! Plate frames on the model cone `κ0 ξ2 ξ3 + ξ1²/2 = 0`, plate membership,
//! admissible scale pairs and the plate localization check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::changevars::Normalization;
use crate::error::{Error, Result};
use crate::linalg::{cross, dot, norm, scale, V3};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlateFrame {
    pub b: f64,
    pub kappa0: f64,
    pub t1: V3,
    pub t2: V3,
    pub t2_tilde: V3,
    pub n: V3,
}

/// `T1 = −κ0 b e1 + e2 − ½κ0 b² e3`, `T̃2 = e1 + b e3`, `N = T1 ∧ T̃2` and the
/// component `T2` of the tangent plane perpendicular to `T1`.
pub fn plate_frame(b: f64, kappa0: f64) -> PlateFrame {
    let k = kappa0;
    let t1 = [-k * b, 1.0, -0.5 * k * b * b];
    let t2_tilde = [1.0, 0.0, b];
    let t2 = [1.0 - 0.25 * k * k * b.powi(4), k * b * (1.0 + 0.5 * b * b), b + 0.5 * k * k * b.powi(3)];
    let n = cross(&t1, &t2_tilde);
    PlateFrame { b, kappa0, t1, t2, t2_tilde, n }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Plate {
    pub frame: PlateFrame,
    pub a: f64,
    pub delta: f64,
}

impl Plate {
    /// Components of `ξ` along the unit frame vectors.
    pub fn components(&self, xi: &V3) -> [f64; 3] {
        let f = &self.frame;
        [dot(&f.t1, xi) / norm(&f.t1), dot(&f.t2, xi) / norm(&f.t2), dot(&f.n, xi) / norm(&f.n)]
    }

    /// Signed margins of the three inequalities, each normalized by its bound.
    /// Positive means strictly inside. The first entry is the smaller of the
    /// lower and upper margins of `A⁻¹ ≤ |⟨T̂1, ξ⟩| ≤ A`.
    pub fn margins(&self, xi: &V3) -> [f64; 3] {
        let [c1, c2, c3] = self.components(xi);
        let a = self.a;
        let lower = (c1.abs() - 1.0 / a) * a;
        let upper = (a - c1.abs()) / a;
        [lower.min(upper), 1.0 - c2.abs() / (a * self.delta), 1.0 - c3.abs() / (a * self.delta * self.delta)]
    }

    pub fn contains(&self, xi: &V3) -> bool {
        let [c1, c2, c3] = self.components(xi);
        let a = self.a;
        1.0 / a <= c1.abs() && c1.abs() <= a && c2.abs() <= a * self.delta && c3.abs() <= a * self.delta * self.delta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Strict,
    Relaxed,
}

/// Constants of the admissibility window. Strict mode uses `c1 = 2^20`,
/// `c2 = 2^100` and keeps the `M0` factors; relaxed mode drops the `M0`
/// factors and uses the configured constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScaleRule {
    pub mode: ScaleMode,
    pub c1: f64,
    pub c2: f64,
    pub eps: f64,
    pub m0: f64,
}

impl ScaleRule {
    pub fn strict(eps: f64, m0: f64) -> Self {
        ScaleRule { mode: ScaleMode::Strict, c1: 2f64.powi(20), c2: 2f64.powi(100), eps, m0 }
    }

    pub fn relaxed(eps: f64, m0: f64, c1: f64, c2: f64) -> Self {
        ScaleRule { mode: ScaleMode::Relaxed, c1, c2, eps, m0 }
    }

    fn m_factor(&self) -> f64 {
        match self.mode {
            ScaleMode::Strict => self.m0,
            ScaleMode::Relaxed => 1.0,
        }
    }

    /// Open window `(lo, hi)` that both scales must lie in.
    pub fn window(&self, ell: u32) -> (f64, f64) {
        let m = self.m_factor();
        let l = ell as f64;
        let e2 = self.eps * self.eps;
        (m * m * self.c1 * 2f64.powf(-l * (1.0 - e2)), 2f64.powf(-l * e2) / (self.c1 * m * m))
    }

    pub fn admissible(&self, ell: u32, delta0: f64, delta1: f64) -> bool {
        let (lo, hi) = self.window(ell);
        let inside = |d: f64| lo < d && d < hi;
        let scale_ell = 2f64.powi(-(ell as i32));
        let floor = self.c2 * self.m_factor() * (scale_ell * delta0).sqrt().max(delta0.powf(1.5));
        inside(delta0) && inside(delta1) && floor < delta1 && delta1 < delta0
    }

    /// All admissible dyadic pairs `(2^{-i}, 2^{-j})`, `i < j ≤ 4ℓ`.
    pub fn dyadic_pairs(&self, ell: u32) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let jmax = (4 * ell).max(8) as i32;
        for i in 1..jmax {
            for j in (i + 1)..=jmax {
                let (d0, d1) = (2f64.powi(-i), 2f64.powi(-j));
                if self.admissible(ell, d0, d1) {
                    out.push((d0, d1));
                }
            }
        }
        out
    }

    /// The admissible dyadic pair with the most `δ1`-intervals per `δ0`
    /// interval, ties broken towards larger `δ0`.
    pub fn widest(&self, ell: u32) -> Option<(f64, f64)> {
        self.dyadic_pairs(ell)
            .into_iter()
            .max_by(|a, b| (a.0 / a.1).partial_cmp(&(b.0 / b.1)).unwrap().then(a.0.partial_cmp(&b.0).unwrap()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateReport {
    pub model: String,
    pub ell: u32,
    pub delta0: f64,
    pub delta1: f64,
    pub mode: ScaleMode,
    pub n: usize,
    pub contained_fraction: f64,
    /// Fraction satisfying the second and third inequalities only.
    pub contained_fraction_t2_n: f64,
    pub worst_margins: [f64; 3],
    pub kappa0: f64,
    pub a: f64,
    pub m0: f64,
    pub acceptance_rate: f64,
    pub hypothesis_enabled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateCheckConfig {
    pub ell: u32,
    pub delta0: f64,
    pub delta1: f64,
    pub n_samples: usize,
    pub mode: ScaleMode,
    pub m0: f64,
    /// When false, the band `|μ·Δ| ≤ M0 2^{-ℓ}` is widened by `2^{ℓ/2}`.
    pub hypothesis: bool,
    pub seed: u64,
}

const BATCH: usize = 500;
const MIN_ACCEPTANCE: f64 = 1e-4;

struct Batch {
    accepted: usize,
    tried: usize,
    contained: usize,
    contained_t2n: usize,
    worst: [f64; 3],
}

fn run_batch(nz: &Normalization, cfg: &PlateCheckConfig, a: f64, kappa0: f64, seed: u64, want: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_w = 2f64.powi(-(cfg.ell as i32));
    let band = cfg.m0 * r_w * if cfg.hypothesis { 1.0 } else { 2f64.powf(cfg.ell as f64 / 2.0) };
    let mut out = Batch { accepted: 0, tried: 0, contained: 0, contained_t2n: 0, worst: [f64::INFINITY; 3] };
    let max_tries = ((want as f64) / MIN_ACCEPTANCE) as usize;
    while out.accepted < want {
        if out.tried >= max_tries {
            return Err(Error::Solve(format!(
                "plate sampler starved: {} of {} draws accepted",
                out.accepted, out.tried
            )));
        }
        out.tried += 1;
        let w: V3 = std::array::from_fn(|_| r_w * (2.0 * rng.random::<f64>() - 1.0));
        let z3 = cfg.delta0 * (2.0 * rng.random::<f64>() - 1.0);
        let g = nz.w_gradients(&w, z3)?;
        let dn = norm(&[g.delta[0], g.delta[1], 0.0]);
        // μ = s·Δ̂ + t·Δ̂⊥, with |s| |Δ| ≤ band and |t| ≤ 4
        let s = band / dn * (2.0 * rng.random::<f64>() - 1.0);
        let t = 4.0 * (2.0 * rng.random::<f64>() - 1.0);
        let (u, v) = ([g.delta[0] / dn, g.delta[1] / dn], [-g.delta[1] / dn, g.delta[0] / dn]);
        let mu = [s * u[0] + t * v[0], s * u[1] + t * v[1]];
        let mn = (mu[0] * mu[0] + mu[1] * mu[1]).sqrt();
        if !(mn > 0.25 && mn <= 4.0) || (mu[0] * g.delta[0] + mu[1] * g.delta[1]).abs() > band {
            continue;
        }
        out.accepted += 1;
        let b = cfg.delta1 * (z3 / cfg.delta1).floor();
        let plate = Plate { frame: plate_frame(b, kappa0), a, delta: cfg.delta1 };
        let xi: V3 = std::array::from_fn(|i| mu[0] * g.s_w[0][i] + mu[1] * g.s_w[1][i]);
        let m = plate.margins(&xi);
        for i in 0..3 {
            out.worst[i] = out.worst[i].min(m[i]);
        }
        if plate.contains(&xi) {
            out.contained += 1;
        }
        if m[1] >= 0.0 && m[2] >= 0.0 {
            out.contained_t2n += 1;
        }
    }
    Ok(out)
}

/// Sample `(w, z3, μ)` under the hypotheses of the localization lemma and test
/// whether `μ1 𝔖¹_w + μ2 𝔖²_w` lies in `Π_{A,b}(δ1)`, `A = 2(1 + |κ0|)`, where
/// `b` is the left endpoint of the `δ1`-interval containing `z3`.
pub fn plate_localization_check(nz: &Normalization, cfg: &PlateCheckConfig) -> Result<PlateReport> {
    if cfg.delta1 >= cfg.delta0 || cfg.delta1 <= 0.0 {
        return Err(Error::config(format!("need 0 < δ1 < δ0, got δ0 = {}, δ1 = {}", cfg.delta0, cfg.delta1)));
    }
    let kappa0 = nz.kappa0();
    if kappa0.abs() < 1e-10 {
        return Err(Error::Normalization("κ0 vanishes; the cone is flat".into()));
    }
    let r_w = 2f64.powi(-(cfg.ell as i32));
    if r_w > nz.radii.w_radius || cfg.delta0 > nz.radii.z3_radius {
        return Err(Error::config(format!(
            "sample box (|w| ≤ {r_w}, |z3| ≤ {}) exceeds the normalized domain ({}, {})",
            cfg.delta0, nz.radii.w_radius, nz.radii.z3_radius
        )));
    }
    let a = 2.0 * (1.0 + kappa0.abs());
    let nb = cfg.n_samples.div_ceil(BATCH);
    let batches = crate::par::map(nb, |i| {
        let want = BATCH.min(cfg.n_samples - i * BATCH);
        run_batch(nz, cfg, a, kappa0, cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64), want)
    });
    let mut tot = Batch { accepted: 0, tried: 0, contained: 0, contained_t2n: 0, worst: [f64::INFINITY; 3] };
    for b in batches {
        let b = b?;
        tot.accepted += b.accepted;
        tot.tried += b.tried;
        tot.contained += b.contained;
        tot.contained_t2n += b.contained_t2n;
        for i in 0..3 {
            tot.worst[i] = tot.worst[i].min(b.worst[i]);
        }
    }
    let n = tot.accepted;
    Ok(PlateReport {
        model: nz.model().name.clone(),
        ell: cfg.ell,
        delta0: cfg.delta0,
        delta1: cfg.delta1,
        mode: cfg.mode,
        n,
        contained_fraction: tot.contained as f64 / n as f64,
        contained_fraction_t2_n: tot.contained_t2n as f64 / n as f64,
        worst_margins: tot.worst,
        kappa0,
        a,
        m0: cfg.m0,
        acceptance_rate: n as f64 / tot.tried as f64,
        hypothesis_enabled: cfg.hypothesis,
    })
}

/// Unit vector helper used by tests and reports.
pub fn unit(v: &V3) -> V3 {
    scale(1.0 / norm(v), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_at_zero() {
        let f = plate_frame(0.0, 0.7);
        assert_eq!(f.t1, [0.0, 1.0, 0.0]);
        assert_eq!(f.t2, [1.0, 0.0, 0.0]);
        assert_eq!(f.n, [0.0, 0.0, -1.0]);
    }

    #[test]
    fn normal_matches_closed_form() {
        let (b, k) = (0.3, -1.7);
        let f = plate_frame(b, k);
        let n = [b, 0.5 * k * b * b, -1.0];
        for i in 0..3 {
            assert!((f.n[i] - n[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn strict_window_is_empty_at_desk_scale() {
        let r = ScaleRule::strict(0.1, 4.0);
        assert!(r.dyadic_pairs(30).is_empty());
        assert!(!r.admissible(12, 2f64.powi(-4), 2f64.powi(-4)));
    }

    #[test]
    fn interior_point_is_contained() {
        let f = plate_frame(0.2, 1.0);
        let p = Plate { frame: f, a: 4.0, delta: 0.05 };
        let xi: V3 = std::array::from_fn(|i| unit(&f.t1)[i] + 0.1 * unit(&f.t2)[i] + 0.005 * unit(&f.n)[i]);
        assert!(p.contains(&xi));
        let far = scale(2.0 * p.a, &unit(&f.n));
        assert!(!p.contains(&far));
    }
}
