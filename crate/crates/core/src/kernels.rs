//! Stationary covariance functions over 2-D displacements.
//!
//! Three kernels are provided: the isotropic squared exponential (RBF) and
//! two wind-informed variants that add structure along a prevailing wind
//! axis `b = [cos γ, sin γ]`:
//!
//! * **Sum**: `σ_R² exp(-τᵀτ / l²) + σ_D² exp(-τᵀAτ / l_D²)`
//! * **Product**: `σ_P² exp(-τᵀEτ / l_D²)` with `E = (l_D²/l²) I + A`
//!
//! where `A = I - b bᵀ` projects onto the cross-wind direction. Note that the
//! exponent has no factor of two: `exp(-d²/l²)`, not `exp(-d²/2l²)`.
//!
//! Hyperparameters are exposed in an *optimisation domain*: positive
//! quantities as natural logarithms, the wind angle in raw radians.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix2, Vector2};

/// A point in the plane, in coordinate units (pixel index times pixel scale).
pub type Location = [f64; 2];

/// Displacement `τ = x_i - x_j` between two locations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
}

impl Displacement {
    pub fn new(dx: f64, dy: f64) -> Self {
        Displacement { dx, dy }
    }

    pub fn between(a: &Location, b: &Location) -> Self {
        Displacement {
            dx: a[0] - b[0],
            dy: a[1] - b[1],
        }
    }

    #[inline]
    pub fn norm_sq(&self) -> f64 {
        self.dx * self.dx + self.dy * self.dy
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }
}

/// Wraps an angle into `[0, π)`. Both wind kernels are π-periodic in γ.
pub fn canonical_angle(gamma: f64) -> f64 {
    let g = gamma.rem_euclid(PI);
    // rem_euclid can return exactly PI for tiny negative inputs
    if g >= PI {
        0.0
    } else {
        g
    }
}

/// Along-wind and cross-wind components `(τᵀb, τᵀb⊥)` with `b⊥ = [-sin γ, cos γ]`.
#[inline]
fn wind_components(tau: &Displacement, gamma: f64) -> (f64, f64) {
    let (s, c) = gamma.sin_cos();
    (tau.dx * c + tau.dy * s, -tau.dx * s + tau.dy * c)
}

/// Squared cross-wind distance `τᵀAτ`.
#[inline]
fn cross_wind_sq(tau: &Displacement, gamma: f64) -> f64 {
    let (_, cross) = wind_components(tau, gamma);
    cross * cross
}

/// Norm of the component of `τ` orthogonal to the wind direction.
pub fn orthogonal_distance(tau: &Displacement, gamma: f64) -> f64 {
    wind_components(tau, gamma).1.abs()
}

/// Matrices derived from the wind angle and the two length scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindGeometry {
    /// Unit wind vector `[cos γ, sin γ]`.
    pub b: Vector2<f64>,
    /// Projection onto the direction orthogonal to `b`.
    pub a: Matrix2<f64>,
    /// `(l_D² / l²) I + A`.
    pub e: Matrix2<f64>,
}

impl WindGeometry {
    pub fn new(gamma: f64, length_scale: f64, dir_length_scale: f64) -> Self {
        let (s, c) = gamma.sin_cos();
        let b = Vector2::new(c, s);
        let a = Matrix2::new(s * s, -s * c, -s * c, c * c);
        let ratio = (dir_length_scale / length_scale).powi(2);
        let e = Matrix2::identity() * ratio + a;
        WindGeometry { b, a, e }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfParams {
    pub length_scale: f64,
    pub variance: f64,
}

/// Hyperparameters of the Sum kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumParams {
    pub length_scale: f64,
    pub dir_length_scale: f64,
    pub rbf_variance: f64,
    pub dir_variance: f64,
    /// Wind angle in radians.
    pub gamma: f64,
}

/// Hyperparameters of the Product kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductParams {
    pub length_scale: f64,
    pub dir_length_scale: f64,
    pub variance: f64,
    /// Wind angle in radians.
    pub gamma: f64,
}

pub fn rbf(tau: &Displacement, p: &RbfParams) -> f64 {
    p.variance * (-tau.norm_sq() / (p.length_scale * p.length_scale)).exp()
}

pub fn sum_kernel(tau: &Displacement, p: &SumParams) -> f64 {
    let l2 = p.length_scale * p.length_scale;
    let ld2 = p.dir_length_scale * p.dir_length_scale;
    p.rbf_variance * (-tau.norm_sq() / l2).exp()
        + p.dir_variance * (-cross_wind_sq(tau, p.gamma) / ld2).exp()
}

/// Closed form `σ_P² exp(-τᵀEτ / l_D²)`.
pub fn product_kernel(tau: &Displacement, p: &ProductParams) -> f64 {
    let l2 = p.length_scale * p.length_scale;
    let ld2 = p.dir_length_scale * p.dir_length_scale;
    // τᵀEτ / l_D² = τᵀτ / l² + τᵀAτ / l_D²
    let quad = tau.norm_sq() / l2 + cross_wind_sq(tau, p.gamma) / ld2;
    p.variance * (-quad).exp()
}

/// Which covariance family a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    Rbf,
    Sum,
    Product,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::Rbf, KernelKind::Sum, KernelKind::Product];

    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Rbf => "rbf",
            KernelKind::Sum => "sum",
            KernelKind::Product => "product",
        }
    }

    /// Number of kernel hyperparameters (noise excluded).
    pub fn n_params(&self) -> usize {
        self.param_names().len()
    }

    /// Names in canonical order. Positive parameters are optimised as logs.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            KernelKind::Rbf => &["length_scale", "variance"],
            KernelKind::Sum => &[
                "length_scale",
                "dir_length_scale",
                "rbf_variance",
                "dir_variance",
                "gamma",
            ],
            KernelKind::Product => &["length_scale", "dir_length_scale", "variance", "gamma"],
        }
    }

    /// Index of γ in the canonical vector, if the kernel has one.
    pub fn gamma_index(&self) -> Option<usize> {
        match self {
            KernelKind::Rbf => None,
            KernelKind::Sum => Some(4),
            KernelKind::Product => Some(3),
        }
    }

    /// Whether the `i`-th canonical parameter is a length scale.
    pub fn is_length_scale(&self, i: usize) -> bool {
        self.param_names()[i].contains("length_scale")
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown kernel '{0}' (expected rbf, sum or product)")]
pub struct UnknownKernel(pub String);

impl FromStr for KernelKind {
    type Err = UnknownKernel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelKind::Rbf),
            "sum" => Ok(KernelKind::Sum),
            "product" => Ok(KernelKind::Product),
            other => Err(UnknownKernel(other.to_string())),
        }
    }
}

/// A kernel family together with concrete hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Rbf(RbfParams),
    Sum(SumParams),
    Product(ProductParams),
}

impl KernelSpec {
    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Rbf(_) => KernelKind::Rbf,
            KernelSpec::Sum(_) => KernelKind::Sum,
            KernelSpec::Product(_) => KernelKind::Product,
        }
    }

    #[inline]
    pub fn eval(&self, tau: &Displacement) -> f64 {
        match self {
            KernelSpec::Rbf(p) => rbf(tau, p),
            KernelSpec::Sum(p) => sum_kernel(tau, p),
            KernelSpec::Product(p) => product_kernel(tau, p),
        }
    }

    /// `k(0)`, the marginal signal variance.
    pub fn variance_at_zero(&self) -> f64 {
        match self {
            KernelSpec::Rbf(p) => p.variance,
            KernelSpec::Sum(p) => p.rbf_variance + p.dir_variance,
            KernelSpec::Product(p) => p.variance,
        }
    }

    pub fn is_valid(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match self {
            KernelSpec::Rbf(p) => pos(p.length_scale) && pos(p.variance),
            KernelSpec::Sum(p) => {
                pos(p.length_scale)
                    && pos(p.dir_length_scale)
                    && pos(p.rbf_variance)
                    && pos(p.dir_variance)
                    && p.gamma.is_finite()
            }
            KernelSpec::Product(p) => {
                pos(p.length_scale)
                    && pos(p.dir_length_scale)
                    && pos(p.variance)
                    && p.gamma.is_finite()
            }
        }
    }

    /// Same kernel with γ wrapped into `[0, π)`.
    pub fn canonical(&self) -> KernelSpec {
        match *self {
            KernelSpec::Rbf(p) => KernelSpec::Rbf(p),
            KernelSpec::Sum(p) => KernelSpec::Sum(SumParams {
                gamma: canonical_angle(p.gamma),
                ..p
            }),
            KernelSpec::Product(p) => KernelSpec::Product(ProductParams {
                gamma: canonical_angle(p.gamma),
                ..p
            }),
        }
    }

    /// Natural-domain values in canonical order (γ in radians, others positive).
    pub fn values(&self) -> Vec<f64> {
        match self {
            KernelSpec::Rbf(p) => vec![p.length_scale, p.variance],
            KernelSpec::Sum(p) => vec![
                p.length_scale,
                p.dir_length_scale,
                p.rbf_variance,
                p.dir_variance,
                p.gamma,
            ],
            KernelSpec::Product(p) => {
                vec![p.length_scale, p.dir_length_scale, p.variance, p.gamma]
            }
        }
    }

    /// Build from natural-domain values in canonical order.
    pub fn from_values(kind: KernelKind, v: &[f64]) -> KernelSpec {
        assert_eq!(v.len(), kind.n_params(), "wrong parameter count for {kind}");
        match kind {
            KernelKind::Rbf => KernelSpec::Rbf(RbfParams {
                length_scale: v[0],
                variance: v[1],
            }),
            KernelKind::Sum => KernelSpec::Sum(SumParams {
                length_scale: v[0],
                dir_length_scale: v[1],
                rbf_variance: v[2],
                dir_variance: v[3],
                gamma: v[4],
            }),
            KernelKind::Product => KernelSpec::Product(ProductParams {
                length_scale: v[0],
                dir_length_scale: v[1],
                variance: v[2],
                gamma: v[3],
            }),
        }
    }

    /// Optimisation-domain vector: logs of positive parameters, raw γ.
    pub fn to_opt(&self) -> Vec<f64> {
        let gi = self.kind().gamma_index();
        self.values()
            .into_iter()
            .enumerate()
            .map(|(i, v)| if Some(i) == gi { v } else { v.ln() })
            .collect()
    }

    pub fn from_opt(kind: KernelKind, u: &[f64]) -> KernelSpec {
        let gi = kind.gamma_index();
        let v: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(i, &x)| if Some(i) == gi { x } else { x.exp() })
            .collect();
        KernelSpec::from_values(kind, &v)
    }

    /// Partial derivatives of `k(τ)` with respect to the optimisation-domain
    /// parameters, in canonical order.
    pub fn gradient(&self, tau: &Displacement) -> Vec<f64> {
        let mut out = vec![0.0; self.kind().n_params()];
        self.gradient_into(tau, &mut out);
        out
    }

    /// Allocation-free form of [`KernelSpec::gradient`]; returns `k(τ)`.
    #[inline]
    pub fn gradient_into(&self, tau: &Displacement, out: &mut [f64]) -> f64 {
        let d2 = tau.norm_sq();
        match self {
            KernelSpec::Rbf(p) => {
                let l2 = p.length_scale * p.length_scale;
                let k = p.variance * (-d2 / l2).exp();
                out[0] = k * 2.0 * d2 / l2;
                out[1] = k;
                k
            }
            KernelSpec::Sum(p) => {
                let l2 = p.length_scale * p.length_scale;
                let ld2 = p.dir_length_scale * p.dir_length_scale;
                let (along, cross) = wind_components(tau, p.gamma);
                let q = cross * cross;
                let kr = p.rbf_variance * (-d2 / l2).exp();
                let kd = p.dir_variance * (-q / ld2).exp();
                out[0] = kr * 2.0 * d2 / l2;
                out[1] = kd * 2.0 * q / ld2;
                out[2] = kr;
                out[3] = kd;
                // ∂(τᵀAτ)/∂γ = -2 (τᵀb)(τᵀb⊥)
                out[4] = kd * 2.0 * along * cross / ld2;
                kr + kd
            }
            KernelSpec::Product(p) => {
                let l2 = p.length_scale * p.length_scale;
                let ld2 = p.dir_length_scale * p.dir_length_scale;
                let (along, cross) = wind_components(tau, p.gamma);
                let q = cross * cross;
                let k = p.variance * (-(d2 / l2) - q / ld2).exp();
                out[0] = k * 2.0 * d2 / l2;
                out[1] = k * 2.0 * q / ld2;
                out[2] = k;
                out[3] = k * 2.0 * along * cross / ld2;
                k
            }
        }
    }
}

/// Free-function form of [`KernelSpec::gradient`].
pub fn kernel_gradient(tau: &Displacement, spec: &KernelSpec) -> Vec<f64> {
    spec.gradient(tau)
}

/// Gram matrix with `noise + jitter` on the diagonal.
pub fn gram_matrix(points: &[Location], spec: &KernelSpec, noise: f64, jitter: f64) -> DMatrix<f64> {
    let n = points.len();
    let diag = spec.variance_at_zero() + noise + jitter;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = diag;
        for i in (j + 1)..n {
            let v = spec.eval(&Displacement::between(&points[i], &points[j]));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cross-covariance `K[i][j] = k(a_i - b_j)`.
pub fn cross_covariance(a: &[Location], b: &[Location], spec: &KernelSpec) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        spec.eval(&Displacement::between(&a[i], &b[j]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn fig1_sum() -> SumParams {
        SumParams {
            length_scale: 105.0,
            dir_length_scale: 35.0,
            rbf_variance: 0.5,
            dir_variance: 0.5,
            gamma: FRAC_PI_4,
        }
    }

    fn fig1_product() -> ProductParams {
        ProductParams {
            length_scale: 105.0,
            dir_length_scale: 35.0,
            variance: 1.0,
            gamma: FRAC_PI_4,
        }
    }

    // Explicit vector projection ||τ - (τᵀb)b||.
    fn projection_oracle(tau: &Displacement, gamma: f64) -> f64 {
        let b = [gamma.cos(), gamma.sin()];
        let dot = tau.dx * b[0] + tau.dy * b[1];
        let r = [tau.dx - dot * b[0], tau.dy - dot * b[1]];
        (r[0] * r[0] + r[1] * r[1]).sqrt()
    }

    #[test]
    fn orthogonal_distance_examples() {
        for &g in &[0.0, 0.3, 1.2, 2.9] {
            let tau = Displacement::new(4.5 * f64::cos(g), 4.5 * f64::sin(g));
            assert!(orthogonal_distance(&tau, g) < 1e-12);
        }
        assert_relative_eq!(
            orthogonal_distance(&Displacement::new(0.0, 7.0), 0.0),
            7.0,
            epsilon = 1e-12
        );
        let tau = Displacement::new(35.0, -35.0);
        let oracle = projection_oracle(&tau, FRAC_PI_4);
        assert_relative_eq!(oracle, 49.497474683058329, epsilon = 1e-9);
        assert_relative_eq!(orthogonal_distance(&tau, FRAC_PI_4), oracle, epsilon = 1e-12);
    }

    #[test]
    fn rbf_examples() {
        let p = RbfParams {
            length_scale: 105.0,
            variance: 1.0,
        };
        assert_eq!(rbf(&Displacement::new(0.0, 0.0), &p), 1.0);
        let on_scale = Displacement::new(105.0 * 0.6, 105.0 * 0.8);
        assert_relative_eq!(rbf(&on_scale, &p), (-1.0f64).exp(), epsilon = 1e-14);
        let v = rbf(&Displacement::new(30.0, 40.0), &p);
        assert_relative_eq!(v, (-2500.0f64 / 11025.0).exp(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.797114, epsilon = 5e-7);
    }

    #[test]
    fn sum_examples() {
        let p = fig1_sum();
        assert_eq!(sum_kernel(&Displacement::new(0.0, 0.0), &p), 1.0);

        let along = Displacement::new(300.0 * FRAC_PI_4.cos(), 300.0 * FRAC_PI_4.sin());
        let oracle = 0.5 * (-90000.0f64 / 11025.0).exp() + 0.5;
        assert_relative_eq!(sum_kernel(&along, &p), oracle, epsilon = 1e-12);
        assert_relative_eq!(oracle, 0.500142, epsilon = 5e-7);

        let tau = Displacement::new(35.0, -35.0);
        let cross = projection_oracle(&tau, FRAC_PI_4);
        let oracle = 0.5 * (-2450.0f64 / 11025.0).exp() + 0.5 * (-cross * cross / 1225.0).exp();
        assert_relative_eq!(sum_kernel(&tau, &p), oracle, epsilon = 1e-12);
        assert_relative_eq!(oracle, 0.468036, epsilon = 5e-7);
    }

    #[test]
    fn product_examples() {
        let p = fig1_product();
        assert_eq!(product_kernel(&Displacement::new(0.0, 0.0), &p), 1.0);
        let tau = Displacement::new(35.0, -35.0);
        let oracle = (-2450.0f64 / 11025.0 - 2450.0 / 1225.0).exp();
        assert_relative_eq!(product_kernel(&tau, &p), oracle, epsilon = 1e-14);
        assert_relative_eq!(oracle, 0.108368, epsilon = 5e-7);
    }

    #[test]
    fn product_matches_explicit_e_matrix() {
        let p = fig1_product();
        let geo = WindGeometry::new(p.gamma, p.length_scale, p.dir_length_scale);
        let t = Vector2::new(12.0, -3.5);
        let quad = (t.transpose() * geo.e * t)[(0, 0)];
        let via_e = p.variance * (-quad / (p.dir_length_scale * p.dir_length_scale)).exp();
        assert_relative_eq!(
            product_kernel(&Displacement::new(t[0], t[1]), &p),
            via_e,
            epsilon = 1e-14
        );
    }

    #[test]
    fn wind_geometry_invariants() {
        for &g in &[0.0, 0.4, FRAC_PI_4, 2.0, 3.1] {
            let geo = WindGeometry::new(g, 3.0, 1.5);
            assert!((geo.b.dot(&geo.b) - 1.0).abs() < 1e-12);
            assert!((geo.a - geo.a.transpose()).abs().max() < 1e-15);
            assert!((geo.a * geo.a - geo.a).abs().max() < 1e-12);
            let mut eig: Vec<f64> = geo.a.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!(eig[0].abs() < 1e-12 && (eig[1] - 1.0).abs() < 1e-12);
            assert!((geo.a * geo.b).norm() < 1e-12);
            assert!(geo.e.cholesky().is_some());
        }
    }

    #[test]
    fn gram_single_point_and_duplicates() {
        let spec = KernelSpec::Rbf(RbfParams {
            length_scale: 2.0,
            variance: 1.0,
        });
        let k = gram_matrix(&[[1.0, 2.0]], &spec, 0.01, 0.0);
        assert_eq!(k.shape(), (1, 1));
        assert_relative_eq!(k[(0, 0)], 1.01, epsilon = 1e-15);

        let k = gram_matrix(&[[1.0, 2.0], [1.0, 2.0]], &spec, 0.0, 0.0);
        assert_eq!(k[(0, 1)], spec.variance_at_zero());
        assert_eq!(k[(1, 0)], spec.variance_at_zero());
    }

    #[test]
    fn gram_matches_pairwise_loop() {
        let pts = [[0.3, 1.0], [2.0, 5.5], [7.1, 0.2], [3.3, 3.3], [6.0, 6.5]];
        let p = ProductParams {
            length_scale: 3.0,
            dir_length_scale: 1.2,
            variance: 0.8,
            gamma: 0.7,
        };
        let k = gram_matrix(&pts, &KernelSpec::Product(p), 0.0, 0.0);
        for i in 0..5 {
            for j in 0..5 {
                let tau = Displacement::new(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]);
                assert!((k[(i, j)] - product_kernel(&tau, &p)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rbf_gradient_at_origin() {
        let spec = KernelSpec::Rbf(RbfParams {
            length_scale: 2.0,
            variance: 1.7,
        });
        let g = spec.gradient(&Displacement::new(0.0, 0.0));
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1.7);
    }

    fn finite_difference(spec: &KernelSpec, tau: &Displacement, h: f64) -> Vec<f64> {
        let u = spec.to_opt();
        (0..u.len())
            .map(|i| {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                let kp = KernelSpec::from_opt(spec.kind(), &up).eval(tau);
                let km = KernelSpec::from_opt(spec.kind(), &dn).eval(tau);
                (kp - km) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn sum_gamma_gradient_parallel_tau() {
        let p = SumParams {
            gamma: 0.9,
            ..fig1_sum()
        };
        let spec = KernelSpec::Sum(p);
        let tau = Displacement::new(40.0 * 0.9f64.cos(), 40.0 * 0.9f64.sin());
        let g = spec.gradient(&tau);
        let fd = finite_difference(&spec, &tau, 1e-6);
        assert!((g[4] - fd[4]).abs() < 1e-5 * fd[4].abs().max(1e-8) + 1e-9);
    }

    fn arb_tau() -> impl Strategy<Value = Displacement> {
        (-20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y)| Displacement::new(x, y))
    }

    fn arb_product() -> impl Strategy<Value = ProductParams> {
        (0.5..15.0f64, 0.3..10.0f64, 0.05..5.0f64, -4.0..4.0f64).prop_map(|(l, ld, s, g)| {
            ProductParams {
                length_scale: l,
                dir_length_scale: ld,
                variance: s,
                gamma: g,
            }
        })
    }

    fn arb_sum() -> impl Strategy<Value = SumParams> {
        (0.5..15.0f64, 0.3..10.0f64, 0.05..5.0f64, 0.05..5.0f64, -4.0..4.0f64).prop_map(
            |(l, ld, sr, sd, g)| SumParams {
                length_scale: l,
                dir_length_scale: ld,
                rbf_variance: sr,
                dir_variance: sd,
                gamma: g,
            },
        )
    }

    proptest! {
        #[test]
        fn product_gradient_matches_finite_difference(tau in arb_tau(), p in arb_product()) {
            let spec = KernelSpec::Product(p);
            let g = spec.gradient(&tau);
            let fd = finite_difference(&spec, &tau, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                // below ~1e-4·k(0) the central difference is dominated by cancellation
                if a.abs().max(b.abs()) > 1e-4 * spec.variance_at_zero() {
                    prop_assert!((a - b).abs() / a.abs().max(b.abs()) < 1e-5, "{} vs {}", a, b);
                }
            }
        }

        #[test]
        fn sum_gradient_matches_finite_difference(tau in arb_tau(), p in arb_sum()) {
            let spec = KernelSpec::Sum(p);
            let g = spec.gradient(&tau);
            let fd = finite_difference(&spec, &tau, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                if a.abs().max(b.abs()) > 1e-4 * spec.variance_at_zero() {
                    prop_assert!((a - b).abs() / a.abs().max(b.abs()) < 1e-5, "{} vs {}", a, b);
                }
            }
        }

        #[test]
        fn kernels_symmetric_bounded_and_periodic(tau in arb_tau(), s in arb_sum(), p in arb_product()) {
            let neg = Displacement::new(-tau.dx, -tau.dy);
            let specs = [
                KernelSpec::Rbf(RbfParams { length_scale: s.length_scale, variance: s.rbf_variance }),
                KernelSpec::Sum(s),
                KernelSpec::Product(p),
            ];
            for spec in &specs {
                let k = spec.eval(&tau);
                prop_assert_eq!(k, spec.eval(&neg));
                prop_assert!(k > 0.0 || tau.norm_sq() > 100.0);
                prop_assert!(k <= spec.variance_at_zero() * (1.0 + 1e-15));
            }
            let s2 = SumParams { gamma: s.gamma + PI, ..s };
            prop_assert!((sum_kernel(&tau, &s) - sum_kernel(&tau, &s2)).abs() < 1e-12);
            let p2 = ProductParams { gamma: p.gamma + PI, ..p };
            prop_assert!((product_kernel(&tau, &p) - product_kernel(&tau, &p2)).abs() < 1e-12);
        }

        #[test]
        fn product_is_two_factor_composition(tau in arb_tau(), p in arb_product()) {
            let cross = orthogonal_distance(&tau, p.gamma);
            let composed = rbf(&tau, &RbfParams { length_scale: p.length_scale, variance: p.variance })
                * rbf(&Displacement::new(cross, 0.0), &RbfParams { length_scale: p.dir_length_scale, variance: 1.0 });
            prop_assert!((product_kernel(&tau, &p) - composed).abs() < 1e-12);
        }

        #[test]
        fn orthogonal_distance_bounded(tau in arb_tau(), g in -7.0..7.0f64) {
            let d = orthogonal_distance(&tau, g);
            prop_assert!(d >= 0.0 && d <= tau.norm_sq().sqrt() + 1e-12);
            prop_assert!((d - projection_oracle(&tau, g)).abs() < 1e-10);
        }

        #[test]
        fn canonical_angle_in_range(g in -50.0..50.0f64) {
            let c = canonical_angle(g);
            prop_assert!((0.0..PI).contains(&c));
        }
    }

    #[test]
    fn product_reduces_to_rbf_for_huge_dir_scale() {
        let p = ProductParams {
            length_scale: 3.0,
            dir_length_scale: 1e8,
            variance: 1.3,
            gamma: 0.2,
        };
        let r = RbfParams {
            length_scale: 3.0,
            variance: 1.3,
        };
        for &(x, y) in &[(0.5, 0.1), (3.0, -2.0), (10.0, 4.0)] {
            let tau = Displacement::new(x, y);
            assert!((product_kernel(&tau, &p) - rbf(&tau, &r)).abs() < 1e-6);
        }
    }

    #[test]
    fn opt_roundtrip_and_parsing() {
        let spec = KernelSpec::Sum(fig1_sum());
        let back = KernelSpec::from_opt(KernelKind::Sum, &spec.to_opt());
        for (a, b) in spec.values().iter().zip(back.values()) {
            assert_relative_eq!(*a, b, max_relative = 1e-14);
        }
        assert_eq!("Product".parse::<KernelKind>().unwrap(), KernelKind::Product);
        assert!("matern".parse::<KernelKind>().is_err());
    }
}
