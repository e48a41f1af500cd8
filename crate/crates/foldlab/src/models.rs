//! Built-in defining functions `S = (S¹, S²)` in the normal form where
//! `y' = S(x, y3)` and `y3` is the free variable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jets::{eval_jet, Domain, Jet, JetMode, MultiIndex, ScalarField};
use crate::linalg::{binom, cross, det3, norm};
use crate::poly::{MPoly, Poly, Series};

/// A pair of defining functions on a common box.
#[derive(Clone)]
pub struct DefiningModel {
    pub name: String,
    pub s1: Arc<dyn ScalarField>,
    pub s2: Arc<dyn ScalarField>,
    /// True when `S(x, y3) = x' - Φ(x3, y3)`, i.e. the model commutes with
    /// translations in `x'`.
    pub horizontal: bool,
}

impl DefiningModel {
    pub fn domain(&self) -> &Domain {
        self.s1.domain()
    }

    pub fn eval(&self, p: &[f64; 4]) -> [f64; 2] {
        [self.s1.eval(p), self.s2.eval(p)]
    }

    pub fn jets(&self, p: &[f64; 4], order: usize, mode: JetMode) -> Result<[Jet; 2]> {
        Ok([eval_jet(&*self.s1, p, order, mode)?, eval_jet(&*self.s2, p, order, mode)?])
    }

    /// Model with the two defining functions exchanged.
    pub fn swapped(&self) -> DefiningModel {
        DefiningModel {
            name: format!("{}-swapped", self.name),
            s1: self.s2.clone(),
            s2: self.s1.clone(),
            horizontal: self.horizontal,
        }
    }
}

/// Field given by a polynomial in `(x1, x2, x3, y3)`.
pub struct PolyField {
    domain: Domain,
    poly: MPoly,
}

impl PolyField {
    pub fn new(domain: Domain, poly: MPoly) -> Self {
        PolyField { domain, poly }
    }
}

impl ScalarField for PolyField {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn eval(&self, p: &[f64; 4]) -> f64 {
        self.poly.eval(p)
    }
    fn closed_form(&self, p: &[f64; 4], alpha: MultiIndex) -> Option<f64> {
        Some(self.poly.deriv_at(p, alpha.0))
    }
}

/// `S²(x, y3) = (x2 - x3 g(y3)) / (1 + β x3)`.
pub struct XrayS2 {
    domain: Domain,
    g: Poly,
    beta: f64,
}

impl XrayS2 {
    fn f_partial(&self, p: &[f64; 4], a2: u8, c: u8, d: u8) -> f64 {
        match (a2, c) {
            (1, 0) if d == 0 => 1.0,
            (0, 0) if d == 0 => p[1] - p[2] * self.g.eval(p[3]),
            (0, 0) => -p[2] * self.g.eval_deriv(p[3], d as usize),
            (0, 1) => -self.g.eval_deriv(p[3], d as usize),
            _ => 0.0,
        }
    }
}

impl ScalarField for XrayS2 {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn eval(&self, p: &[f64; 4]) -> f64 {
        (p[1] - p[2] * self.g.eval(p[3])) / (1.0 + self.beta * p[2])
    }
    fn closed_form(&self, p: &[f64; 4], alpha: MultiIndex) -> Option<f64> {
        let [a1, a2, a3, a4] = alpha.0;
        if a1 > 0 {
            return Some(0.0);
        }
        let q = 1.0 + self.beta * p[2];
        let mut acc = 0.0;
        let mut fact = 1.0;
        for m in 0..=a3 {
            if m > 0 {
                fact *= m as f64;
            }
            let hm = (-self.beta).powi(m as i32) * fact * q.powi(-(m as i32) - 1);
            acc += binom(a3 as usize, m as usize) * self.f_partial(p, a2, a3 - m, a4) * hm;
        }
        Some(acc)
    }
}

/// Component of a translation model: `S^i = x_i - γ_i(s(x3 - y3))` with
/// `γ3(s(t)) = t`.
pub struct TranslationField {
    domain: Domain,
    gamma: [Poly; 3],
    s_range: [f64; 2],
    comp: usize,
}

/// Newton iteration tolerance for the curve parameter.
pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;

/// Solve `p(s) = t` for `s` near `[lo, hi]`, assuming `p` is monotone there.
/// Safeguarded Newton with bisection fallback, followed by one polishing step.
pub fn solve_monotone(p: &Poly, t: f64, lo: f64, hi: f64) -> Option<f64> {
    let width = hi - lo;
    let (mut a, mut b) = (lo - 0.5 * width, hi + 0.5 * width);
    let (fa, fb) = (p.eval(a) - t, p.eval(b) - t);
    if fa * fb > 0.0 {
        return None;
    }
    let increasing = fb > fa;
    let dp = p.derivative();
    let mut s = 0.5 * (lo + hi);
    for _ in 0..NEWTON_MAX_ITER {
        let f = p.eval(s) - t;
        if (f > 0.0) == increasing {
            b = s;
        } else {
            a = s;
        }
        let d = dp.eval(s);
        let mut next = s - f / d;
        if !(next > a && next < b) || d == 0.0 {
            next = 0.5 * (a + b);
        }
        let step = (next - s).abs();
        s = next;
        if step <= NEWTON_TOL * (1.0 + s.abs()) {
            let f = p.eval(s) - t;
            let d = dp.eval(s);
            if d != 0.0 {
                s -= f / d;
            }
            return Some(s);
        }
    }
    None
}

impl TranslationField {
    fn param(&self, t: f64) -> f64 {
        solve_monotone(&self.gamma[2], t, self.s_range[0], self.s_range[1]).unwrap_or(f64::NAN)
    }

    fn series(&self, p: &[f64; 4]) -> Series<5> {
        let s = self.param(p[2] - p[3]);
        let sigma = Series::<5>::invert_poly(&self.gamma[2], s);
        sigma.compose_poly(&self.gamma[self.comp], s)
    }

    fn partial_from(&self, p: &[f64; 4], g: &Series<5>, alpha: MultiIndex) -> f64 {
        let [a1, a2, a3, a4] = alpha.0;
        if a1 + a2 > 0 {
            let unit = if self.comp == 0 { [1, 0, 0, 0] } else { [0, 1, 0, 0] };
            return if alpha.0 == unit { 1.0 } else { 0.0 };
        }
        let n = (a3 + a4) as usize;
        if n == 0 {
            return p[self.comp] - g.0[0];
        }
        let sign = if a4 % 2 == 0 { -1.0 } else { 1.0 };
        sign * g.deriv(n)
    }
}

impl ScalarField for TranslationField {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn eval(&self, p: &[f64; 4]) -> f64 {
        let s = self.param(p[2] - p[3]);
        p[self.comp] - self.gamma[self.comp].eval(s)
    }
    fn closed_form(&self, p: &[f64; 4], alpha: MultiIndex) -> Option<f64> {
        let g = self.series(p);
        Some(self.partial_from(p, &g, alpha))
    }
    fn closed_forms(&self, p: &[f64; 4], alphas: &[MultiIndex]) -> Vec<Option<f64>> {
        let g = self.series(p);
        alphas.iter().map(|a| Some(self.partial_from(p, &g, *a))).collect()
    }
}

/// Which family a [`ModelSpec`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Xray,
    HeisenbergPlane,
    HeisenbergMoment,
    Translation,
}

/// Serializable model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Coefficients of `g` in ascending order (X-ray and Heisenberg plane).
    #[serde(default)]
    pub coeffs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Component polynomials of the curve (translation model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<[Vec<f64>; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

pub const BUILTIN_MODELS: [&str; 4] = ["xray", "heisenberg_plane", "heisenberg_moment", "translation"];

fn half_box(y3: [f64; 2]) -> Domain {
    Domain::new([-0.5, -0.5, -0.5, y3[0]], [0.5, 0.5, 0.5, y3[1]])
}

impl ModelSpec {
    /// Description of a built-in model by name.
    pub fn builtin(name: &str) -> Result<ModelSpec> {
        let base = ModelSpec {
            kind: ModelKind::Xray,
            coeffs: vec![],
            beta: None,
            alpha: None,
            gamma: None,
            s_range: None,
            domain: None,
        };
        match name {
            "xray" => Ok(ModelSpec { coeffs: vec![0.0, 0.0, 0.5], beta: Some(0.0), ..base }),
            "heisenberg_plane" => {
                Ok(ModelSpec { kind: ModelKind::HeisenbergPlane, coeffs: vec![0.0, 0.0, 1.0], ..base })
            }
            "heisenberg_moment" => Ok(ModelSpec { kind: ModelKind::HeisenbergMoment, alpha: Some(1.0 / 3.0), ..base }),
            "translation" => Ok(ModelSpec {
                kind: ModelKind::Translation,
                gamma: Some([vec![0.0, 1.0], vec![0.0, 0.0, 0.5], vec![0.0, 0.0, 0.0, 1.0 / 6.0]]),
                s_range: Some([0.5, 2.0]),
                ..base
            }),
            other => {
                Err(Error::config_with(format!("unknown model `{other}`"), crate::suggest(other, &BUILTIN_MODELS)))
            }
        }
    }

    pub fn default_domain(&self) -> Domain {
        match self.kind {
            ModelKind::Xray => half_box([-1.0, 1.0]),
            ModelKind::HeisenbergPlane | ModelKind::HeisenbergMoment => half_box([-0.5, 0.5]),
            ModelKind::Translation => Domain::new([-0.5, -0.5, 0.5, -0.25], [0.5, 0.5, 1.0, 0.25]),
        }
    }

    pub fn build(&self, name: &str) -> Result<DefiningModel> {
        let domain = self.domain.clone().unwrap_or_else(|| self.default_domain());
        for i in 0..4 {
            if !(domain.lo[i] < domain.hi[i]) {
                return Err(Error::config(format!("domain axis {i} is empty")));
            }
        }
        let mut m = match self.kind {
            ModelKind::Xray => make_xray_model(Poly::new(self.coeffs.clone()), self.beta.unwrap_or(0.0), domain)?,
            ModelKind::HeisenbergPlane => make_heisenberg_plane_model(Poly::new(self.coeffs.clone()), domain)?,
            ModelKind::HeisenbergMoment => make_heisenberg_moment_model(
                self.alpha.ok_or_else(|| Error::config("heisenberg_moment requires `alpha`"))?,
                domain,
            )?,
            ModelKind::Translation => {
                let g = self.gamma.clone().ok_or_else(|| Error::config("translation requires `gamma`"))?;
                let s = self.s_range.ok_or_else(|| Error::config("translation requires `s_range`"))?;
                make_translation_model(g.map(Poly::new), s, domain)?
            }
        };
        m.name = name.to_string();
        Ok(m)
    }
}

/// Build a built-in model by name.
pub fn builtin_model(name: &str) -> Result<DefiningModel> {
    ModelSpec::builtin(name)?.build(name)
}

/// Check that `f` has no zero on `[a, b]`, returning the offending point otherwise.
fn check_nonvanishing(f: impl Fn(f64) -> f64, a: f64, b: f64, what: &str) -> Result<()> {
    let n = 2000;
    let mut worst = (f64::INFINITY, a);
    let mut prev: Option<f64> = None;
    for i in 0..=n {
        let t = a + (b - a) * i as f64 / n as f64;
        let v = f(t);
        if v.abs() < worst.0 {
            worst = (v.abs(), t);
        }
        if let Some(p) = prev {
            if p * v < 0.0 {
                return Err(Error::Curvature { what: what.into(), t: worst.1 });
            }
        }
        prev = Some(v);
    }
    if worst.0 < 1e-10 {
        return Err(Error::Curvature { what: what.into(), t: worst.1 });
    }
    Ok(())
}

fn u_poly() -> MPoly {
    MPoly::var(0).add(&MPoly::var(3).scale(-1.0))
}

/// `S¹ = x1 - x3 y3`, `S² = (x2 - x3 g(y3)) / (1 + β x3)`.
pub fn make_xray_model(g: Poly, beta: f64, domain: Domain) -> Result<DefiningModel> {
    let g2 = g.derivative().derivative();
    check_nonvanishing(|t| g2.eval(t), domain.lo[3], domain.hi[3], "g''")?;
    for x3 in [domain.lo[2], domain.hi[2]] {
        if 1.0 + beta * x3 <= 0.0 {
            return Err(Error::config(format!("1 + beta x3 must stay positive (x3 = {x3})")));
        }
    }
    let s1 = MPoly::var(0).add(&MPoly::var(2).mul(&MPoly::var(3)).scale(-1.0));
    let s1: Arc<dyn ScalarField> = Arc::new(PolyField::new(domain.clone(), s1));
    let s2: Arc<dyn ScalarField> = if beta == 0.0 {
        let p = MPoly::var(1).add(&MPoly::var(2).mul(&MPoly::var(3).compose(&g)).scale(-1.0));
        Arc::new(PolyField::new(domain.clone(), p))
    } else {
        Arc::new(XrayS2 { domain: domain.clone(), g, beta })
    };
    Ok(DefiningModel { name: "xray".into(), s1, s2, horizontal: beta == 0.0 })
}

/// Operator `f ↦ f(x2 - g(x1 - y1), x3 - x1 g(x1 - y1)/2 + x2 (x1 - y1)/2)` in the
/// normal form: the integration variable `y1` becomes the free variable and
/// `(y2, y3)` become the solved coordinates.
pub fn make_heisenberg_plane_model(g: Poly, domain: Domain) -> Result<DefiningModel> {
    let g2 = g.derivative().derivative();
    let (ulo, uhi) = (domain.lo[0] - domain.hi[3], domain.hi[0] - domain.lo[3]);
    check_nonvanishing(|t| g2.eval(t), ulo, uhi, "g''")?;
    let u = u_poly();
    let gu = u.compose(&g);
    let s1 = MPoly::var(1).add(&gu.scale(-1.0));
    let s2 = MPoly::var(2).add(&MPoly::var(0).mul(&gu).scale(-0.5)).add(&MPoly::var(1).mul(&u).scale(0.5));
    Ok(DefiningModel {
        name: "heisenberg_plane".into(),
        s1: Arc::new(PolyField::new(domain.clone(), s1)),
        s2: Arc::new(PolyField::new(domain, s2)),
        horizontal: false,
    })
}

/// Convolution with `s ↦ (s, s², α s³)` on the Heisenberg group, in normal
/// form with free variable `y1` (so `s = x1 - y1`).
pub fn make_heisenberg_moment_model(alpha: f64, domain: Domain) -> Result<DefiningModel> {
    let u = u_poly();
    let u2 = u.mul(&u);
    let u3 = u2.mul(&u);
    let s1 = MPoly::var(1).add(&u2.scale(-1.0));
    let s2 = MPoly::var(2)
        .add(&u3.scale(-alpha))
        .add(&MPoly::var(0).mul(&u2).scale(-0.5))
        .add(&MPoly::var(1).mul(&u).scale(0.5));
    Ok(DefiningModel {
        name: "heisenberg_moment".into(),
        s1: Arc::new(PolyField::new(domain.clone(), s1)),
        s2: Arc::new(PolyField::new(domain, s2)),
        horizontal: false,
    })
}

/// Averages over translates of a curve: `y = x - γ(s)`, solved for `s` from
/// the third coordinate.
pub fn make_translation_model(gamma: [Poly; 3], s_range: [f64; 2], domain: Domain) -> Result<DefiningModel> {
    let [a, b] = s_range;
    let d: Vec<[Poly; 3]> = {
        let d1 = gamma.clone().map(|p| p.derivative());
        let d2 = d1.clone().map(|p| p.derivative());
        let d3 = d2.clone().map(|p| p.derivative());
        vec![d1, d2, d3]
    };
    let ev = |k: usize, s: f64| -> [f64; 3] { std::array::from_fn(|i| d[k][i].eval(s)) };
    check_nonvanishing(|s| d[0][2].eval(s), a, b, "gamma_3'")?;
    check_nonvanishing(|s| det3(&ev(0, s), &ev(1, s), &ev(2, s)), a, b, "det(gamma', gamma'', gamma''')")?;
    check_nonvanishing(|s| norm(&cross(&ev(0, s), &ev(1, s))), a, b, "gamma' ^ gamma''")?;
    let (t0, t1) = (gamma[2].eval(a), gamma[2].eval(b));
    let (tlo, thi) = (t0.min(t1), t0.max(t1));
    let (dlo, dhi) = (domain.lo[2] - domain.hi[3], domain.hi[2] - domain.lo[3]);
    if dlo < tlo || dhi > thi {
        return Err(Error::config(format!("x3 - y3 ranges over [{dlo}, {dhi}] but the curve covers [{tlo}, {thi}]")));
    }
    let mk = |comp| -> Arc<dyn ScalarField> {
        Arc::new(TranslationField { domain: domain.clone(), gamma: gamma.clone(), s_range, comp })
    };
    Ok(DefiningModel { name: "translation".into(), s1: mk(0), s2: mk(1), horizontal: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jets::indices;

    #[test]
    fn xray_beta_closed_forms_match_differences() {
        let m = make_xray_model(Poly::new(vec![0.1, 0.0, 0.5, 0.1]), 0.3, half_box([-1.0, 1.0])).unwrap();
        let p = [0.1, -0.2, 0.15, 0.3];
        let cf = eval_jet(&*m.s2, &p, 3, JetMode::ClosedForm).unwrap();
        let fd = eval_jet(&*m.s2, &p, 3, JetMode::FiniteDifference { step: None }).unwrap();
        for a in indices(3) {
            assert!((cf.get(*a) - fd.get(*a)).abs() < 1e-5, "{a:?}");
        }
    }

    #[test]
    fn translation_matches_cube_root() {
        let m = builtin_model("translation").unwrap();
        let p = [0.1, 0.2, 0.8, -0.1];
        let s = (6.0f64 * 0.9).cbrt();
        assert!((m.s1.eval(&p) - (0.1 - s)).abs() < 1e-13);
        assert!((m.s2.eval(&p) - (0.2 - s * s / 2.0)).abs() < 1e-13);
        let cf = eval_jet(&*m.s2, &p, 4, JetMode::ClosedForm).unwrap();
        let fd = eval_jet(&*m.s2, &p, 4, JetMode::FiniteDifference { step: None }).unwrap();
        for a in indices(4) {
            assert!(
                (cf.get(*a) - fd.get(*a)).abs() < 1e-3 * cf.get(*a).abs().max(1.0),
                "{a:?} {} {}",
                cf.get(*a),
                fd.get(*a)
            );
        }
    }

    #[test]
    fn cubic_g_is_rejected_with_location() {
        let r = make_xray_model(Poly::new(vec![0.0, 0.0, 0.0, 1.0]), 0.0, half_box([-1.0, 1.0]));
        match r {
            Err(Error::Curvature { t, .. }) => assert!(t.abs() < 1e-2),
            _ => panic!("expected a curvature violation"),
        }
    }

    #[test]
    fn unknown_model_gets_suggestions() {
        match ModelSpec::builtin("xrya") {
            Err(Error::Config { suggestions, .. }) => assert!(suggestions.contains(&"xray".to_string())),
            _ => panic!(),
        }
    }
}
