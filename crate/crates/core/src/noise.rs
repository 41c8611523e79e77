//! Transport-noise family: divergence-free polynomial fields built as rotated
//! gradients of polynomial stream functions, and the keyed Brownian driver.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::mesh::Point;

/// Smallness surrogate of a noise family; computed by the operator lab.
pub use crate::operator_lab::estimate_kappa;

/// Bivariate polynomial `Σ c_ij x^i y^j`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Polynomial {
    terms: BTreeMap<(u32, u32), f64>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (u32, u32, f64)>) -> Self {
        let mut p = Self::zero();
        for (i, j, c) in terms {
            p.add_term(i, j, c);
        }
        p
    }

    pub fn monomial(i: u32, j: u32, c: f64) -> Self {
        Self::from_terms([(i, j, c)])
    }

    fn add_term(&mut self, i: u32, j: u32, c: f64) {
        let e = self.terms.entry((i, j)).or_insert(0.0);
        *e += c;
        if *e == 0.0 {
            self.terms.remove(&(i, j));
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.terms.iter().map(|(&(i, j), &c)| (i, j, c))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms
            .keys()
            .map(|&(i, j)| (i + j) as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, p: Point) -> f64 {
        self.terms
            .iter()
            .map(|(&(i, j), &c)| c * p[0].powi(i as i32) * p[1].powi(j as i32))
            .sum()
    }

    pub fn dx(&self) -> Self {
        Self::from_terms(
            self.terms()
                .filter(|t| t.0 > 0)
                .map(|(i, j, c)| (i - 1, j, c * i as f64)),
        )
    }

    pub fn dy(&self) -> Self {
        Self::from_terms(
            self.terms()
                .filter(|t| t.1 > 0)
                .map(|(i, j, c)| (i, j - 1, c * j as f64)),
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_terms(self.terms().map(|(i, j, c)| (i, j, s * c)))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_terms(self.terms().chain(other.terms()))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for (i, j, c) in self.terms() {
            for (k, l, d) in other.terms() {
                out.add_term(i + k, j + l, c * d);
            }
        }
        out
    }

    /// `(x - a)` and `(y - b)` style linear factors.
    fn shifted_x(a: f64) -> Self {
        Self::from_terms([(1, 0, 1.0), (0, 0, -a)])
    }

    fn shifted_y(b: f64) -> Self {
        Self::from_terms([(0, 1, 1.0), (0, 0, -b)])
    }

    /// Parses `i,j,c;i,j,c;...` (exponent of x, exponent of y, coefficient).
    pub fn parse_coefficients(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for chunk in s.split(';').map(str::trim).filter(|c| !c.is_empty()) {
            let f: Vec<&str> = chunk.split(',').map(str::trim).collect();
            let bad = || {
                Error::Config(format!(
                    "polynomial term '{chunk}' must be 'i,j,coefficient'"
                ))
            };
            if f.len() != 3 {
                return Err(bad());
            }
            let i: u32 = f[0].parse().map_err(|_| bad())?;
            let j: u32 = f[1].parse().map_err(|_| bad())?;
            let c: f64 = f[2].parse().map_err(|_| bad())?;
            if !c.is_finite() {
                return Err(bad());
            }
            terms.push((i, j, c));
        }
        Ok(Self::from_terms(terms))
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms()
            .map(|(i, j, c)| format!("{i},{j},{c:e}"))
            .collect();
        write!(f, "{}", parts.join(";"))
    }
}

/// Stream function source: a named builtin or explicit coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamFunction {
    Named(String),
    Coefficients(Polynomial),
}

/// `x²(1−x)²y²(1−y)²`, vanishing with its gradient on the unit-square boundary.
pub fn square_bump() -> Polynomial {
    let bx = Polynomial::from_terms([(2, 0, 1.0), (3, 0, -2.0), (4, 0, 1.0)]);
    let by = Polynomial::from_terms([(0, 2, 1.0), (0, 3, -2.0), (0, 4, 1.0)]);
    bx.mul(&by)
}

impl StreamFunction {
    pub const BUILTINS: [&'static str; 8] = [
        "translate_x",
        "translate_y",
        "rotation",
        "strain",
        "bump",
        "bump_x",
        "bump_y",
        "bump_xy",
    ];

    pub fn polynomial(&self) -> Result<Polynomial> {
        match self {
            StreamFunction::Coefficients(p) => Ok(p.clone()),
            StreamFunction::Named(name) => {
                let cx = Polynomial::shifted_x(0.5);
                let cy = Polynomial::shifted_y(0.5);
                Ok(match name.as_str() {
                    // ψ = y: uniform flow along x
                    "translate_x" => Polynomial::monomial(0, 1, 1.0),
                    "translate_y" => Polynomial::monomial(1, 0, -1.0),
                    "rotation" => cx.mul(&cx).add(&cy.mul(&cy)).scaled(0.5),
                    "strain" => cx.mul(&cy),
                    "bump" => square_bump(),
                    "bump_x" => square_bump().mul(&cx),
                    "bump_y" => square_bump().mul(&cy),
                    "bump_xy" => square_bump().mul(&cx).mul(&cy),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown stream function '{other}' (builtins: {})",
                            Self::BUILTINS.join(", ")
                        )))
                    }
                })
            }
        }
    }
}

impl fmt::Display for StreamFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamFunction::Named(n) => write!(f, "{n}"),
            StreamFunction::Coefficients(p) => write!(f, "poly({p})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    pub stream: StreamFunction,
    pub amplitude: f64,
}

/// One transport field `ζ = ε (∂_y ψ, −∂_x ψ)`, amplitude folded in.
#[derive(Debug, Clone)]
pub struct TransportField {
    pub stream: Polynomial,
    pub amplitude: f64,
    components: [Polynomial; 2],
    gradient: [[Polynomial; 2]; 2],
}

impl TransportField {
    pub fn new(stream: Polynomial, amplitude: f64) -> Self {
        let components = [
            stream.dy().scaled(amplitude),
            stream.dx().scaled(-amplitude),
        ];
        let gradient = [
            [components[0].dx(), components[0].dy()],
            [components[1].dx(), components[1].dy()],
        ];
        Self {
            stream,
            amplitude,
            components,
            gradient,
        }
    }

    #[inline]
    pub fn eval(&self, p: Point) -> [f64; 2] {
        [self.components[0].eval(p), self.components[1].eval(p)]
    }

    /// `g[c][k] = ∂_k ζ_c`
    pub fn gradient(&self, p: Point) -> [[f64; 2]; 2] {
        self.gradient.clone().map(|row| row.map(|q| q.eval(p)))
    }

    pub fn divergence(&self, p: Point) -> f64 {
        self.gradient[0][0].eval(p) + self.gradient[1][1].eval(p)
    }

    /// Symbolic divergence `∂_x ζ_x + ∂_y ζ_y`.
    pub fn divergence_polynomial(&self) -> Polynomial {
        self.gradient[0][0].add(&self.gradient[1][1])
    }

    /// Polynomial degree of the field components.
    pub fn degree(&self) -> usize {
        self.components
            .iter()
            .map(Polynomial::degree)
            .max()
            .unwrap_or(0)
    }
}

/// Truncated noise family with its summability constant.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub modes: Vec<TransportField>,
    pub specs: Vec<ModeSpec>,
    /// Σ_n ‖ζ_n‖²_{W^{1,∞}}, sup norms taken on a dense grid over the unit square.
    pub c_zeta: f64,
    /// Discrete surrogate for the smallness constant, when it has been estimated.
    pub kappa_estimate: Option<f64>,
}

/// Grid resolution per side of the sup-norm oracle.
pub const SUP_GRID: usize = 201;

/// `max(|ζ|) + max(|∇ζ|)` over a uniform grid of the unit square, with
/// Euclidean and Frobenius pointwise norms.
pub fn w1inf_norm(field: &TransportField) -> f64 {
    let mut sup0: f64 = 0.0;
    let mut sup1: f64 = 0.0;
    for i in 0..SUP_GRID {
        for j in 0..SUP_GRID {
            let p = [
                i as f64 / (SUP_GRID - 1) as f64,
                j as f64 / (SUP_GRID - 1) as f64,
            ];
            let v = field.eval(p);
            let g = field.gradient(p);
            sup0 = sup0.max(v[0].hypot(v[1]));
            sup1 = sup1.max(
                (g[0][0].powi(2) + g[0][1].powi(2) + g[1][0].powi(2) + g[1][1].powi(2)).sqrt(),
            );
        }
    }
    sup0 + sup1
}

impl NoiseModel {
    pub fn build(specs: Vec<ModeSpec>) -> Result<Self> {
        let mut modes = Vec::with_capacity(specs.len());
        for s in &specs {
            if !s.amplitude.is_finite() {
                return Err(Error::invalid(format!(
                    "amplitude of mode '{}' is not finite",
                    s.stream
                )));
            }
            let field = TransportField::new(s.stream.polynomial()?, s.amplitude);
            debug_assert!(field.divergence_polynomial().is_zero());
            modes.push(field);
        }
        let c_zeta = modes.iter().map(|m| w1inf_norm(m).powi(2)).sum();
        Ok(Self {
            modes,
            specs,
            c_zeta,
            kappa_estimate: None,
        })
    }

    pub fn empty() -> Self {
        Self::build(Vec::new()).expect("empty family is valid")
    }

    /// Shipped default: four fields that do not vanish on the boundary.
    pub fn default_family() -> Self {
        Self::build(default_specs()).expect("builtin family is valid")
    }

    /// Comparison family whose fields vanish on the boundary.
    pub fn boundary_vanishing_family() -> Self {
        Self::build(boundary_vanishing_specs()).expect("builtin family is valid")
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Same fields with every amplitude multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::build(
            self.specs
                .iter()
                .map(|m| ModeSpec {
                    stream: m.stream.clone(),
                    amplitude: m.amplitude * s,
                })
                .collect(),
        )
    }

    pub fn max_degree(&self) -> usize {
        self.modes
            .iter()
            .map(TransportField::degree)
            .max()
            .unwrap_or(0)
    }
}

pub const DEFAULT_AMPLITUDE: f64 = 0.25;

pub fn default_specs() -> Vec<ModeSpec> {
    ["translate_x", "translate_y", "rotation", "strain"]
        .into_iter()
        .map(|n| ModeSpec {
            stream: StreamFunction::Named(n.into()),
            amplitude: DEFAULT_AMPLITUDE,
        })
        .collect()
}

pub fn boundary_vanishing_specs() -> Vec<ModeSpec> {
    [
        ("bump", 8.0),
        ("bump_x", 16.0),
        ("bump_y", 16.0),
        ("bump_xy", 32.0),
    ]
    .into_iter()
    .map(|(n, a)| ModeSpec {
        stream: StreamFunction::Named(n.into()),
        amplitude: a,
    })
    .collect()
}

/// Threshold above which the explicit treatment of the correction term is
/// flagged as potentially unstable.
pub const KAPPA_STABILITY_WARN: f64 = 0.75;

/// Brownian increments for one sample: `steps × n_modes`, row-major, each
/// entry `N(0, dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianDriver {
    pub base_seed: u64,
    pub sample_index: u64,
    pub dt: f64,
    pub steps: usize,
    pub n_modes: usize,
    increments: Vec<f64>,
}

fn standard_normal(rng: &mut ChaCha20Rng, stream: u64, counter: u64) -> f64 {
    rng.set_stream(stream);
    rng.set_word_pos(4 * counter as u128);
    let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl BrownianDriver {
    /// Counter-based draw: the increment of mode `n` at step `m` depends only
    /// on `(base_seed, sample_index, n, m)`.
    pub fn sample_path(
        base_seed: u64,
        sample_index: u64,
        steps: usize,
        dt: f64,
        n_modes: usize,
    ) -> Result<Self> {
        if steps == 0 || !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("Brownian path needs steps >= 1 and dt > 0"));
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&base_seed.to_le_bytes());
        key[8..16].copy_from_slice(&sample_index.to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(key);
        let sd = dt.sqrt();
        let mut increments = Vec::with_capacity(steps * n_modes);
        for m in 0..steps {
            for n in 0..n_modes {
                increments.push(sd * standard_normal(&mut rng, n as u64, m as u64));
            }
        }
        Ok(Self {
            base_seed,
            sample_index,
            dt,
            steps,
            n_modes,
            increments,
        })
    }

    /// A path with no noise modes (or deterministic runs).
    pub fn zero(steps: usize, dt: f64, n_modes: usize) -> Self {
        Self {
            base_seed: 0,
            sample_index: 0,
            dt,
            steps,
            n_modes,
            increments: vec![0.0; steps * n_modes],
        }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.increments[m * self.n_modes..(m + 1) * self.n_modes]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Path on the grid with step `factor·dt`: consecutive fine increments summed.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut increments = vec![0.0; steps * self.n_modes];
        for m in 0..steps {
            for k in 0..factor {
                let fine = self.row(m * factor + k);
                for n in 0..self.n_modes {
                    increments[m * self.n_modes + n] += fine[n];
                }
            }
        }
        Ok(Self {
            base_seed: self.base_seed,
            sample_index: self.sample_index,
            dt: self.dt * factor as f64,
            steps,
            n_modes: self.n_modes,
            increments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_mode_is_divergence_free() {
        let f = TransportField::new(square_bump(), 0.1);
        assert!(f.divergence_polynomial().is_zero());
        let n = 100;
        for i in 0..n {
            for j in 0..n {
                let p = [i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64];
                assert!(f.divergence(p).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn builtins_are_divergence_free() {
        for name in StreamFunction::BUILTINS {
            let f = TransportField::new(
                StreamFunction::Named(name.into()).polynomial().unwrap(),
                1.3,
            );
            assert!(f.divergence_polynomial().is_zero(), "{name}");
        }
        assert!(StreamFunction::Named("nope".into()).polynomial().is_err());
    }

    #[test]
    fn c_zeta_scales_quadratically() {
        let a = NoiseModel::default_family();
        let b = a.scaled(3.0).unwrap();
        assert!((b.c_zeta - 9.0 * a.c_zeta).abs() < 1e-12 * b.c_zeta);
        assert!(a.c_zeta > 0.0);
    }

    #[test]
    fn empty_family() {
        let e = NoiseModel::empty();
        assert_eq!(e.c_zeta, 0.0);
        assert!(e.is_empty());
    }

    #[test]
    fn w1inf_of_rotation() {
        // ζ = (y - 1/2, -(x - 1/2)): sup |ζ| = √2/2 at corners, |∇ζ|_F = √2.
        let f = TransportField::new(
            StreamFunction::Named("rotation".into())
                .polynomial()
                .unwrap(),
            1.0,
        );
        assert!((w1inf_norm(&f) - (0.5f64.sqrt() + 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn polynomial_parsing() {
        let p = Polynomial::parse_coefficients("2,0,1.5; 0,1,-2").unwrap();
        assert_eq!(p.eval([2.0, 3.0]), 1.5 * 4.0 - 6.0);
        assert_eq!(Polynomial::parse_coefficients(&p.to_string()).unwrap(), p);
        assert!(Polynomial::parse_coefficients("1,2").is_err());
        assert!(Polynomial::parse_coefficients("1,2,nan").is_err());
    }

    #[test]
    fn path_is_deterministic() {
        let a = BrownianDriver::sample_path(7, 3, 50, 0.01, 4).unwrap();
        let b = BrownianDriver::sample_path(7, 3, 50, 0.01, 4).unwrap();
        assert_eq!(a.increments(), b.increments());
        let c = BrownianDriver::sample_path(7, 4, 50, 0.01, 4).unwrap();
        assert_ne!(a.increments(), c.increments());
        assert!(BrownianDriver::sample_path(7, 3, 0, 0.01, 4).is_err());
        assert!(BrownianDriver::sample_path(7, 3, 4, -1.0, 4).is_err());
    }

    #[test]
    fn coarsening_sums_fine_increments() {
        let fine = BrownianDriver::sample_path(11, 0, 64, 1e-3, 3).unwrap();
        let coarse = fine.coarsen(2).unwrap();
        for m in 0..32 {
            for n in 0..3 {
                assert_eq!(
                    coarse.row(m)[n],
                    fine.row(2 * m)[n] + fine.row(2 * m + 1)[n]
                );
            }
        }
        assert_eq!(coarse.dt, 2e-3);
        assert!(fine.coarsen(3).is_err());
    }

    #[test]
    fn increment_statistics() {
        let dt = 0.01;
        let n = 100_000;
        let p = BrownianDriver::sample_path(2024, 0, n / 2, dt, 2).unwrap();
        let x = p.increments();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma_mean = (dt / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * sigma_mean, "mean {mean}");
        assert!((var - dt).abs() < 0.05 * dt, "var {var}");
        // modes independent
        let (a, b): (Vec<f64>, Vec<f64>) = (0..n / 2).map(|m| (p.row(m)[0], p.row(m)[1])).unzip();
        let cov = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (n / 2) as f64;
        assert!((cov / dt).abs() < 0.02);
    }
}
