//! Trapezoidal rules on the periodic cube V = [−½, ½)^d, synthetic integrands
//! with algebraic singularities, empirical rate measurement and a numerical
//! singularity-order estimator.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::pairwise_sum;
use crate::C64;

/// Nodes closer than this (mod 1) to a declared singular manifold are zeroed.
pub const PUNCTURE_TOL: f64 = 1e-10;

const GAUSS_WIDTH: f64 = 0.06;
const CHUNK: usize = 4096;

/// Representative of x mod 1 in [−½, ½).
pub fn wrap(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

/// Radial cutoff η(r) = exp(−1/(1 − 4r²)) for r < ½, zero outside.
pub fn bump(r: f64) -> f64 {
    if r < 0.5 {
        (-1.0 / (1.0 - 4.0 * r * r)).exp()
    } else {
        0.0
    }
}

/// Uniform m^d grid with nodes (j + offset)/m per axis, wrapped into V.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: usize,
    pub d: usize,
    pub offset: f64,
}

impl Grid {
    pub fn new(m: usize, d: usize, offset: f64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Invalid(format!("grid needs m >= 1 and d >= 1, got m={m}, d={d}")));
        }
        if !(0.0..1.0).contains(&offset) {
            return Err(Error::Invalid(format!("grid offset {offset} outside [0, 1)")));
        }
        if (m as f64).powi(d as i32) > 1e13 {
            return Err(Error::Invalid(format!("grid {m}^{d} is too large")));
        }
        Ok(Grid { m, d, offset })
    }

    /// Γ-containing grid.
    pub fn gamma(m: usize, d: usize) -> Result<Self> {
        Self::new(m, d, 0.0)
    }

    pub fn n_points(&self) -> usize {
        self.m.pow(self.d as u32)
    }

    pub fn coord(&self, j: usize) -> f64 {
        wrap((j as f64 + self.offset) / self.m as f64)
    }

    /// Coordinates of the node with row-major flat index `flat`.
    pub fn point(&self, mut flat: usize, out: &mut [f64]) {
        for k in (0..self.d).rev() {
            out[k] = self.coord(flat % self.m);
            flat /= self.m;
        }
    }
}

/// Deterministic chunked pairwise sum of g(0..n).
fn chunked_sum<G: Fn(usize) -> f64 + Sync>(n: usize, g: G) -> f64 {
    let n_chunks = n.div_ceil(CHUNK);
    let sums: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let vals: Vec<f64> = (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&g).collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&sums)
}

/// Q(f) = (|V|/m^d) Σ f(x_j) with |V| = 1.
pub fn trapezoid<F: Fn(&[f64]) -> f64 + Sync>(f: F, grid: &Grid) -> f64 {
    let n = grid.n_points();
    let d = grid.d;
    chunked_sum(n, |flat| {
        let mut x = [0.0; 8];
        grid.point(flat, &mut x[..d]);
        f(&x[..d])
    }) / n as f64
}

/// The set Σ_b c_b x_b ≡ shift (mod 1), where x = (x_1, …, x_B) is split into
/// blocks of the shift's dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularManifold {
    pub coeffs: Vec<i64>,
    pub shift: Vec<f64>,
    /// Declared algebraic order.
    pub order: f64,
}

impl SingularManifold {
    pub fn point(shift: Vec<f64>, order: f64) -> Self {
        SingularManifold {
            coeffs: vec![1],
            shift,
            order,
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        let d = self.shift.len();
        (0..d).all(|k| {
            let s: f64 = self.coeffs.iter().enumerate().map(|(b, &c)| c as f64 * x[b * d + k]).sum();
            wrap(s - self.shift[k]).abs() < tol
        })
    }
}

pub trait Integrand: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    fn singular_set(&self) -> &[SingularManifold] {
        &[]
    }
}

/// A closure with a declared singular set.
pub struct FnIntegrand<F> {
    pub dim: usize,
    pub f: F,
    pub singular: Vec<SingularManifold>,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Integrand for FnIntegrand<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn singular_set(&self) -> &[SingularManifold] {
        &self.singular
    }
}

/// Trapezoid with f := 0 at nodes on a declared singular manifold.
pub fn punctured_trapezoid(f: &dyn Integrand, grid: &Grid) -> Result<f64> {
    if grid.d != f.dim() {
        return Err(Error::Dimension {
            expected: f.dim(),
            got: grid.d,
        });
    }
    let sing = f.singular_set();
    Ok(trapezoid(
        |x| {
            if sing.iter().any(|s| s.contains(x, PUNCTURE_TOL)) {
                0.0
            } else {
                f.eval(x)
            }
        },
        grid,
    ))
}

/// The five integral families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegralClass {
    /// ∫ f, f smooth.
    Smooth,
    /// ∫ f, f singular at 0 with order γ.
    Point,
    /// ∫ f₁f₂, f₁ singular at 0 (order γ), f₂ at z (order 0).
    PointAndShifted,
    /// ∫∫ f₁f₂ over V×V, f_i singular at x_i = 0 (order γ_i).
    Product,
    /// ∫∫ f₁f₂f₃(x₁, x₂ ± x₁), f₃ of order 0 at x₂ ± x₁ = 0.
    ShiftedProduct,
}

impl IntegralClass {
    pub fn from_index(i: u8) -> Result<Self> {
        Ok(match i {
            1 => IntegralClass::Smooth,
            2 => IntegralClass::Point,
            3 => IntegralClass::PointAndShifted,
            4 => IntegralClass::Product,
            5 => IntegralClass::ShiftedProduct,
            _ => return Err(Error::Invalid(format!("integral class must be 1..5, got {i}"))),
        })
    }

    pub fn index(&self) -> u8 {
        match self {
            IntegralClass::Smooth => 1,
            IntegralClass::Point => 2,
            IntegralClass::PointAndShifted => 3,
            IntegralClass::Product => 4,
            IntegralClass::ShiftedProduct => 5,
        }
    }

    fn n_gammas(&self) -> usize {
        match self {
            IntegralClass::Smooth => 0,
            IntegralClass::Point | IntegralClass::PointAndShifted => 1,
            IntegralClass::Product | IntegralClass::ShiftedProduct => 2,
        }
    }
}

/// η(x)|x|^γ(1 + x̂₁ + x̂₁²): order γ at the origin, and for γ = 0 still
/// direction dependent there.
pub fn singular_factor(gamma: f64, x: &[f64]) -> f64 {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        return f64::NAN;
    }
    let c = x[0] / r;
    bump(r) * r.powf(gamma) * (1.0 + c + c * c)
}

fn coupling(y: &[f64]) -> f64 {
    1.0 + 0.5 * (2.0 * PI * y.iter().sum::<f64>()).cos()
}

fn periodic_gaussian(x: f64) -> f64 {
    (-4..=4)
        .map(|n| {
            let u = x - n as f64;
            (-u * u / (2.0 * GAUSS_WIDTH * GAUSS_WIDTH)).exp()
        })
        .sum()
}

fn wrapped(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = wrap(*v);
    }
}

/// Reproducible member of one of the five integral families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIntegrand {
    pub class: IntegralClass,
    /// Dimension of each block; the integration domain is V or V×V.
    pub d: usize,
    pub gammas: Vec<f64>,
    /// Singular point of f₂ (class 3).
    pub z: Vec<f64>,
    /// ± in f₃(x₁, x₂ ± x₁) (class 5).
    pub sign: i64,
    singular: Vec<SingularManifold>,
}

pub fn synthetic_integrand(
    class: IntegralClass,
    d: usize,
    gammas: &[f64],
    z: Option<&[f64]>,
    sign: i64,
) -> Result<SyntheticIntegrand> {
    if !(1..=3).contains(&d) {
        return Err(Error::Invalid(format!("block dimension must be 1..3, got {d}")));
    }
    if gammas.len() != class.n_gammas() {
        return Err(Error::Invalid(format!(
            "class {} takes {} order(s), got {}",
            class.index(),
            class.n_gammas(),
            gammas.len()
        )));
    }
    let floor = -(d as f64) + 1.0;
    if let Some(g) = gammas.iter().find(|g| !g.is_finite() || **g < floor - 1e-12) {
        return Err(Error::Invalid(format!("order {g} below the admissible minimum {floor} for d = {d}")));
    }
    if class == IntegralClass::ShiftedProduct && sign != 1 && sign != -1 {
        return Err(Error::Invalid(format!("sign must be +1 or -1, got {sign}")));
    }
    let z: Vec<f64> = match (class, z) {
        (IntegralClass::PointAndShifted, Some(z)) => {
            if z.len() != d {
                return Err(Error::Dimension { expected: d, got: z.len() });
            }
            let zw: Vec<f64> = z.iter().map(|v| wrap(*v)).collect();
            if zw.iter().all(|v| v.abs() < 1e-12) {
                return Err(Error::Invalid("shifted singularity must differ from the origin".into()));
            }
            zw
        }
        (IntegralClass::PointAndShifted, None) => {
            let mut z = vec![0.0; d];
            z[0] = 0.25;
            z
        }
        _ => Vec::new(),
    };
    let origin = vec![0.0; d];
    let singular = match class {
        IntegralClass::Smooth => vec![],
        IntegralClass::Point => vec![SingularManifold::point(origin, gammas[0])],
        IntegralClass::PointAndShifted => vec![
            SingularManifold::point(origin, gammas[0]),
            SingularManifold::point(z.clone(), 0.0),
        ],
        IntegralClass::Product | IntegralClass::ShiftedProduct => {
            let mut s = vec![
                SingularManifold {
                    coeffs: vec![1, 0],
                    shift: origin.clone(),
                    order: gammas[0],
                },
                SingularManifold {
                    coeffs: vec![0, 1],
                    shift: origin.clone(),
                    order: gammas[1],
                },
            ];
            if class == IntegralClass::ShiftedProduct {
                s.push(SingularManifold {
                    coeffs: vec![sign, 1],
                    shift: origin,
                    order: 0.0,
                });
            }
            s
        }
    };
    Ok(SyntheticIntegrand {
        class,
        d,
        gammas: gammas.to_vec(),
        z,
        sign,
        singular,
    })
}

impl SyntheticIntegrand {
    /// Predicted exponent of the quadrature error in m; `None` for the smooth
    /// family (faster than any power).
    pub fn predicted_rate(&self) -> Option<f64> {
        let min = self.gammas.iter().cloned().fold(f64::INFINITY, f64::min);
        match self.class {
            IntegralClass::Smooth => None,
            _ => Some(self.d as f64 + min),
        }
    }

    /// The individual factors as functions on the full domain.
    pub fn factor(&self, i: usize, x: &[f64]) -> f64 {
        let d = self.d;
        let mut w = [0.0; 6];
        let w = &mut w[..x.len()];
        wrapped(x, w);
        match (self.class, i) {
            (IntegralClass::Smooth, _) => w.iter().map(|v| periodic_gaussian(*v)).product(),
            (IntegralClass::Point, _) | (IntegralClass::PointAndShifted, 0) => singular_factor(self.gammas[0], w),
            (IntegralClass::PointAndShifted, _) => {
                let mut y = [0.0; 3];
                for k in 0..d {
                    y[k] = wrap(w[k] - self.z[k]);
                }
                singular_factor(0.0, &y[..d])
            }
            (_, 0) => {
                let mut y = [0.0; 3];
                for k in 0..d {
                    y[k] = wrap(w[k] - w[d + k]);
                }
                singular_factor(self.gammas[0], &w[..d]) * coupling(&y[..d])
            }
            (_, 1) => singular_factor(self.gammas[1], &w[d..]),
            _ => {
                let mut y = [0.0; 3];
                for k in 0..d {
                    y[k] = wrap(w[d + k] + self.sign as f64 * w[k]);
                }
                singular_factor(0.0, &y[..d])
            }
        }
    }

    pub fn n_factors(&self) -> usize {
        match self.class {
            IntegralClass::Smooth | IntegralClass::Point => 1,
            IntegralClass::PointAndShifted | IntegralClass::Product => 2,
            IntegralClass::ShiftedProduct => 3,
        }
    }

    /// Closed-form (or 1-D quadrature) value of the integral where available.
    pub fn exact_integral(&self) -> Option<f64> {
        match self.class {
            IntegralClass::Smooth => Some((GAUSS_WIDTH * (2.0 * PI).sqrt()).powi(self.d as i32)),
            IntegralClass::Point => {
                let p = self.gammas[0] + self.d as f64 - 1.0;
                let radial = quadrature::double_exponential::integrate(|r| bump(r) * r.powf(p), 0.0, 0.5, 1e-16).integral;
                let sphere = match self.d {
                    1 => 2.0,
                    2 => 2.0 * PI,
                    _ => 4.0 * PI,
                };
                Some(sphere * (1.0 + 1.0 / self.d as f64) * radial)
            }
            _ => None,
        }
    }

    /// Punctured trapezoid on the Γ-offset grid with m points per axis. The
    /// two-block families use tabulated factors, which gives the same sum as
    /// [`punctured_trapezoid`] at a fraction of the cost.
    pub fn rule(&self, m: usize) -> Result<f64> {
        match self.class {
            IntegralClass::Product | IntegralClass::ShiftedProduct => self.rule_tabulated(m),
            _ => punctured_trapezoid(self, &Grid::gamma(m, self.dim())?),
        }
    }

    fn rule_tabulated(&self, m: usize) -> Result<f64> {
        let d = self.d;
        let grid = Grid::gamma(m, d)?;
        let n = grid.n_points();
        let mut x = [0.0; 3];
        let mut table = |g: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
            (0..n)
                .map(|j| {
                    grid.point(j, &mut x[..d]);
                    if x[..d].iter().all(|v| v.abs() < PUNCTURE_TOL) {
                        0.0
                    } else {
                        g(&x[..d])
                    }
                })
                .collect()
        };
        let s1 = table(&|y| singular_factor(self.gammas[0], y));
        let s2 = table(&|y| singular_factor(self.gammas[1], y));
        let gt: Vec<f64> = {
            let mut v = Vec::with_capacity(n);
            let mut y = [0.0; 3];
            for j in 0..n {
                grid.point(j, &mut y[..d]);
                v.push(coupling(&y[..d]));
            }
            v
        };
        let s3 = if self.class == IntegralClass::ShiftedProduct {
            table(&|y| singular_factor(0.0, y))
        } else {
            vec![1.0; n]
        };
        // per-axis sizes, unused axes of size 1
        let mut dims = [1usize; 3];
        for k in 0..d {
            dims[k] = m;
        }
        let strides = [dims[1] * dims[2], dims[2], 1];
        let sign = self.sign;
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j1| {
                if s1[j1] == 0.0 {
                    return 0.0;
                }
                let a = [j1 / strides[0], (j1 / strides[1]) % dims[1], j1 % dims[2]];
                let mut acc = 0.0;
                for b0 in 0..dims[0] {
                    let gm0 = (a[0] + dims[0] - b0) % dims[0] * strides[0];
                    let sp0 = (b0 as i64 + sign * a[0] as i64).rem_euclid(dims[0] as i64) as usize * strides[0];
                    for b1 in 0..dims[1] {
                        let gm1 = gm0 + (a[1] + dims[1] - b1) % dims[1] * strides[1];
                        let sp1 = sp0 + (b1 as i64 + sign * a[1] as i64).rem_euclid(dims[1] as i64) as usize * strides[1];
                        let base2 = b0 * strides[0] + b1 * strides[1];
                        for b2 in 0..dims[2] {
                            let gi = gm1 + (a[2] + dims[2] - b2) % dims[2];
                            let si = sp1 + (b2 as i64 + sign * a[2] as i64).rem_euclid(dims[2] as i64) as usize;
                            acc += s2[base2 + b2] * gt[gi] * s3[si];
                        }
                    }
                }
                s1[j1] * acc
            })
            .collect();
        Ok(pairwise_sum(&rows) / (n as f64 * n as f64))
    }
}

impl Integrand for SyntheticIntegrand {
    fn dim(&self) -> usize {
        match self.class {
            IntegralClass::Product | IntegralClass::ShiftedProduct => 2 * self.d,
            _ => self.d,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (0..self.n_factors()).map(|i| self.factor(i, x)).product()
    }

    fn singular_set(&self) -> &[SingularManifold] {
        &self.singular
    }
}

/// F(y) = ∫_V f(x, x − y) dx for a one-dimensional two-block integrand,
/// integrated piecewise between the points where a factor is singular or
/// leaves its support.
pub fn partially_integrated(f: &SyntheticIntegrand, y: f64) -> Result<f64> {
    if f.dim() != 2 {
        return Err(Error::Invalid("partial integration needs a two-block family with d = 1".into()));
    }
    // x ↦ (x, x − y): manifold c₁x₁ + c₂x₂ ≡ s becomes (c₁ + c₂)x ≡ s + c₂y
    let mut cuts = vec![-0.5, 0.5];
    for man in f.singular_set() {
        let c = man.coeffs[0] + man.coeffs[1];
        if c == 0 {
            continue;
        }
        for target in [man.shift[0], man.shift[0] + 0.5] {
            let rhs = target + man.coeffs[1] as f64 * y;
            for n in -4..=4 {
                let x = (rhs + n as f64) / c as f64;
                if x > -0.5 && x < 0.5 {
                    cuts.push(x);
                }
            }
        }
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let g = |x: f64| {
        let v = f.eval(&[x, x - y]);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let parts: Vec<f64> = cuts
        .windows(2)
        .map(|w| quadrature::double_exponential::integrate(g, w[0], w[1], 1e-15).integral)
        .collect();
    Ok(pairwise_sum(&parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    NonMonotone,
    NoPowerLaw,
    TooFewPoints,
}

/// y ≈ C₀ + C₁ x^{−s}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub c0: f64,
    pub c1: f64,
    pub s: f64,
    /// The (x, y) data the fit was built from.
    pub points: Vec<[f64; 2]>,
    /// (x, y − fit(x)) over every recorded point, including held-out ones.
    pub residuals: Vec<[f64; 2]>,
    pub flags: Vec<FitFlag>,
}

impl RateFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.c0 + self.c1 * x.powf(-self.s)
    }

    pub fn reliable(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Least-squares slope and intercept of y against x.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// How the reference value of a rate measurement is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    Exact,
    /// C₀ of the three-point power law through the rules on these meshes.
    Extrapolated { meshes: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMeasurement {
    pub integrand: SyntheticIntegrand,
    pub predicted: Option<f64>,
    pub meshes: Vec<usize>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub reference: f64,
    pub reference_uncertainty: f64,
    pub reference_rule: ReferenceRule,
    /// Log-log fit of error against m; c0 holds the reference.
    pub fit: Option<RateFit>,
    /// Exponents between consecutive meshes above the noise floor.
    pub local_exponents: Vec<f64>,
    pub super_algebraic: bool,
}

/// C₀ + C₁x^{−s} through three points, s by bisection on the ratio of
/// differences over [s_lo, s_hi]. `None` when no exponent in range fits.
pub fn three_point_power_law(x: [f64; 3], y: [f64; 3], s_lo: f64, s_hi: f64) -> Option<(f64, f64, f64)> {
    let d12 = y[0] - y[1];
    let d23 = y[1] - y[2];
    if d23 == 0.0 || !(d12 / d23).is_finite() {
        return None;
    }
    let target = d12 / d23;
    let model = |s: f64| (x[0].powf(-s) - x[1].powf(-s)) / (x[1].powf(-s) - x[2].powf(-s));
    let (mut lo, mut hi) = (s_lo, s_hi);
    let (flo, fhi) = (model(lo) - target, model(hi) - target);
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = model(mid) - target;
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let s = 0.5 * (lo + hi);
    let c1 = d23 / (x[1].powf(-s) - x[2].powf(-s));
    let c0 = y[2] - c1 * x[2].powf(-s);
    Some((c0, c1, s))
}

/// Quadrature errors on `meshes` against a reference, with a log-log
/// exponent fit over the errors that clear the reference's noise floor.
pub fn measure_rate(f: &SyntheticIntegrand, meshes: &[usize], reference: Option<ReferenceRule>) -> Result<RateMeasurement> {
    if meshes.len() < 4 {
        return Err(Error::Invalid(format!("rate measurement needs at least 4 meshes, got {}", meshes.len())));
    }
    if meshes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("meshes must be strictly increasing".into()));
    }
    if f.class == IntegralClass::PointAndShifted {
        let dz = f.z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if let Some(&m) = meshes.iter().find(|&&m| dz < 4.0 / m as f64) {
            return Err(Error::Invalid(format!(
                "singular points {dz:.3} apart are closer than 4/m on the m = {m} mesh"
            )));
        }
    }
    let last = *meshes.last().expect("nonempty");
    let rule = reference.unwrap_or(match f.exact_integral() {
        Some(_) => ReferenceRule::Exact,
        None => ReferenceRule::Extrapolated {
            meshes: [2 * last, 3 * last, 4 * last],
        },
    });
    let values: Vec<f64> = meshes.iter().map(|&m| f.rule(m)).collect::<Result<_>>()?;
    let (reference, uncertainty) = match &rule {
        ReferenceRule::Exact => {
            let v = f
                .exact_integral()
                .ok_or_else(|| Error::Invalid("no closed-form value for this class".into()))?;
            (v, 1e-14 * v.abs().max(1e-300))
        }
        ReferenceRule::Extrapolated { meshes: rm } => {
            if rm[0] <= last || rm[1] <= rm[0] || rm[2] <= rm[1] {
                return Err(Error::Invalid("reference meshes must be increasing and beyond the study meshes".into()));
            }
            let rv: Vec<f64> = rm.iter().map(|&m| f.rule(m)).collect::<Result<_>>()?;
            let xs = [rm[0] as f64, rm[1] as f64, rm[2] as f64];
            let fine = three_point_power_law(xs, [rv[0], rv[1], rv[2]], 0.05, 12.0);
            let coarse = three_point_power_law([last as f64, xs[0], xs[1]], [values[values.len() - 1], rv[0], rv[1]], 0.05, 12.0);
            match (fine, coarse) {
                (Some((c0, _, _)), Some((c0b, _, _))) => (c0, (c0 - c0b).abs().max(1e-14 * c0.abs())),
                // no power law among the finest rules: they already agree to
                // rounding, so the finest is the reference
                _ => (rv[2], (rv[2] - rv[1]).abs().max(1e-14 * rv[2].abs())),
            }
        }
    };
    let errors: Vec<f64> = values.iter().map(|v| (v - reference).abs()).collect();
    let floor = 100.0 * uncertainty;
    let above: Vec<usize> = (0..meshes.len()).filter(|&i| errors[i] > floor).collect();
    let mut flags = Vec::new();
    if above.windows(2).any(|w| errors[w[1]] > errors[w[0]]) {
        flags.push(FitFlag::NonMonotone);
    }
    let fit = if above.len() >= 2 {
        let lx: Vec<f64> = above.iter().map(|&i| (meshes[i] as f64).ln()).collect();
        let ly: Vec<f64> = above.iter().map(|&i| errors[i].ln()).collect();
        let (slope, icpt) = linear_fit(&lx, &ly);
        if above.len() < 3 {
            flags.push(FitFlag::TooFewPoints);
        }
        Some(RateFit {
            c0: reference,
            c1: icpt.exp(),
            s: -slope,
            points: above.iter().map(|&i| [meshes[i] as f64, errors[i]]).collect(),
            residuals: (0..meshes.len())
                .map(|i| [meshes[i] as f64, errors[i].ln() - (icpt + slope * (meshes[i] as f64).ln())])
                .collect(),
            flags,
        })
    } else {
        None
    };
    let local_exponents: Vec<f64> = above
        .windows(2)
        .filter(|w| w[1] == w[0] + 1)
        .map(|w| (errors[w[0]] / errors[w[1]]).ln() / (meshes[w[1]] as f64 / meshes[w[0]] as f64).ln())
        .collect();
    let super_algebraic = local_exponents.len() >= 2
        && local_exponents.windows(2).all(|w| w[1] > w[0])
        && local_exponents[local_exponents.len() - 1] - local_exponents[0] >= 2.0;
    Ok(RateMeasurement {
        integrand: f.clone(),
        predicted: f.predicted_rate(),
        meshes: meshes.to_vec(),
        values,
        errors,
        reference,
        reference_uncertainty: uncertainty,
        reference_rule: rule,
        fit,
        local_exponents,
        super_algebraic,
    })
}

/// Where and how `estimate_order` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderProbe {
    /// Probe radii t, decreasing.
    pub radii: Vec<f64>,
    /// Rays u; they come in ± pairs sharing a derivative direction.
    pub rays: Vec<Vec<f64>>,
    /// Derivative direction v per ray (oblique to the ray).
    pub derivative_dirs: Vec<Vec<f64>>,
    /// Central-difference step as a fraction of t, divided by max|v|.
    pub step_fraction: f64,
    /// Relative accuracy of f itself, for the noise floor.
    pub relative_noise: f64,
}

impl OrderProbe {
    /// Axis, face- and body-diagonal rays (both signs) with radii
    /// 1/(25·2^j), j = 0..levels.
    pub fn standard(d: usize, levels: usize) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::Invalid(format!("probe dimension must be 1..3, got {d}")));
        }
        let mut base: Vec<Vec<f64>> = Vec::new();
        for mask in 1u32..(1 << d) {
            base.push((0..d).map(|k| if mask & (1 << k) != 0 { 1.0 } else { 0.0 }).collect());
        }
        let tilt = [1.0, 2.0, 3.0];
        let mut rays = Vec::new();
        let mut dirs = Vec::new();
        for u in base {
            let v: Vec<f64> = (0..d).map(|k| u[k] + tilt[k]).collect();
            rays.push(u.clone());
            dirs.push(v.clone());
            rays.push(u.iter().map(|c| -c).collect());
            dirs.push(v);
        }
        Ok(OrderProbe {
            radii: (0..levels).map(|j| 1.0 / (25.0 * 2f64.powi(j as i32))).collect(),
            rays,
            derivative_dirs: dirs,
            step_fraction: 0.125,
            relative_noise: 1e-15,
        })
    }

    /// A denominator D such that every probe coordinate relative to x₀ is an
    /// integer multiple of 1/D (the standard probe has integer rays and
    /// directions).
    pub fn common_denominator(&self) -> i64 {
        let levels = self.radii.len().max(1) as i32 - 1;
        // t = 1/(25·2^j), h = t/(8·max|v|) with max|v| ∈ {2, 3, 4, 5, 6}
        25 * 8 * 60 * 2i64.pow(levels as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaySlope {
    pub ray: usize,
    pub alpha: usize,
    /// Slope of log|∂^α f| against log t; `None` below the noise floor.
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityProfile {
    pub location: Vec<f64>,
    /// Estimated order γ̂; `None` when no singularity was detected.
    pub order: Option<f64>,
    /// Median over rays of slope + α, per derivative order 0, 1, 2.
    pub per_order: Vec<Option<f64>>,
    pub slopes: Vec<RaySlope>,
    /// Per derivative order, whether the values on opposite rays fail to
    /// merge as t → 0.
    pub jumps: Vec<bool>,
    pub ambiguous: bool,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Samples ∂_v^α f (α = 0, 1, 2) at x₀ + t·u over shrinking t and fits the
/// power of t. The order is the largest γ compatible with every derivative
/// bound |∂^α f| ≲ |x − x₀|^{γ − α}, i.e. the minimum over α of the per-order
/// estimates; f counts as singular when a derivative blows up or the values
/// on opposite rays stay apart.
pub fn estimate_order<F>(f: F, x0: &[f64], probe: &OrderProbe) -> Result<SingularityProfile>
where
    F: Fn(&[f64]) -> Result<C64> + Sync,
{
    let d = x0.len();
    if probe.rays.len() != probe.derivative_dirs.len() || probe.rays.iter().chain(&probe.derivative_dirs).any(|r| r.len() != d) {
        return Err(Error::Invalid("probe rays and directions must match the point's dimension".into()));
    }
    if probe.radii.len() < 3 {
        return Err(Error::Invalid("order estimation needs at least 3 radii".into()));
    }
    let n_r = probe.radii.len();
    // samples[ray][radius] = ([D0, D1, D2] signed, [noise0, noise1, noise2])
    type Sample = ([C64; 3], [f64; 3]);
    let samples: Vec<Vec<Sample>> = probe
        .rays
        .par_iter()
        .zip(&probe.derivative_dirs)
        .map(|(u, v)| -> Result<Vec<Sample>> {
            let vmax = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let mut out = Vec::with_capacity(n_r);
            for &t in &probe.radii {
                let h = t * probe.step_fraction / vmax;
                let at = |s: f64| -> Result<C64> {
                    let x: Vec<f64> = (0..d).map(|k| x0[k] + t * u[k] + s * h * v[k]).collect();
                    f(&x)
                };
                let (fm, f0, fp) = (at(-1.0)?, at(0.0)?, at(1.0)?);
                let scale = fm.norm().max(f0.norm()).max(fp.norm());
                let eps = probe.relative_noise.max(f64::EPSILON) * scale;
                out.push((
                    [f0, (fp - fm) / (2.0 * h), (fp - f0 * 2.0 + fm) / (h * h)],
                    [eps, eps / h, 4.0 * eps / (h * h)],
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let log_t: Vec<f64> = probe.radii.iter().map(|t| t.ln()).collect();
    // slope of log y against log t over the points above their noise floor
    let fit_above = |pts: Vec<(f64, f64, f64)>| -> Option<f64> {
        let keep: Vec<(f64, f64)> = pts.into_iter().filter(|&(_, y, n)| y > 10.0 * n).map(|(x, y, _)| (x, y.ln())).collect();
        if keep.len() < 3 {
            return None;
        }
        let (lx, ly): (Vec<f64>, Vec<f64>) = keep.into_iter().unzip();
        Some(linear_fit(&lx, &ly).0)
    };
    let mut slopes = Vec::new();
    let mut per_ray: Vec<[Option<f64>; 3]> = Vec::new();
    let mut blows_up = false;
    for (ri, s) in samples.iter().enumerate() {
        let mut row = [None; 3];
        for alpha in 0..3 {
            let slope = fit_above((0..n_r).map(|j| (log_t[j], s[j].0[alpha].norm(), s[j].1[alpha])).collect());
            row[alpha] = slope;
            slopes.push(RaySlope { ray: ri, alpha, slope });
            // A bounded derivative has increments that shrink at least like t;
            // unlike |D| itself these are unaffected by a zero crossing.
            let increments = fit_above(
                (0..n_r - 1)
                    .map(|j| (log_t[j], (s[j].0[alpha] - s[j + 1].0[alpha]).norm(), s[j].1[alpha] + s[j + 1].1[alpha]))
                    .collect(),
            );
            if increments.is_some_and(|g| g < 0.5) && slope.is_some_and(|g| g < 0.0) {
                blows_up = true;
            }
        }
        per_ray.push(row);
    }
    let per_order: Vec<Option<f64>> = (0..3)
        .map(|alpha| median(per_ray.iter().filter_map(|r| r[alpha].map(|s| s + alpha as f64)).collect()))
        .collect();

    // values on opposite rays must merge as t → 0
    let pairs: Vec<(usize, usize)> = (0..probe.rays.len())
        .flat_map(|a| ((a + 1)..probe.rays.len()).map(move |b| (a, b)))
        .filter(|&(a, b)| {
            probe.derivative_dirs[a] == probe.derivative_dirs[b]
                && probe.rays[a].iter().zip(&probe.rays[b]).all(|(x, y)| (x + y).abs() < 1e-15)
        })
        .collect();
    let mut jumps = vec![false; 3];
    for &(a, b) in &pairs {
        for (alpha, jump) in jumps.iter_mut().enumerate() {
            let gap = fit_above(
                (0..n_r)
                    .map(|j| {
                        let (sa, sb) = (&samples[a][j], &samples[b][j]);
                        (log_t[j], (sa.0[alpha] - sb.0[alpha]).norm(), sa.1[alpha].max(sb.1[alpha]))
                    })
                    .collect(),
            );
            if gap.is_some_and(|g| g < 0.5) {
                *jump = true;
            }
        }
    }
    let singular = blows_up || jumps.iter().any(|&j| j);
    let known: Vec<f64> = per_order.iter().flatten().cloned().collect();
    let order = if singular { known.iter().cloned().reduce(f64::min) } else { None };
    let ambiguous = singular
        && known.len() > 1
        && known.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - known.iter().cloned().fold(f64::INFINITY, f64::min) > 0.3;
    Ok(SingularityProfile {
        location: x0.to_vec(),
        order,
        per_order,
        slopes,
        jumps,
        ambiguous,
    })
}
