//! Exact Gaussian-process inference with a zero prior mean.
//!
//! All linear algebra goes through a single Cholesky factor of
//! `K + (σ_n² + jitter) I`. When the factorisation fails, the jitter is
//! escalated tenfold up to [`MAX_JITTER`].

use nalgebra::{Cholesky, DVector, Dyn};

use crate::kernels::{gram_matrix, Displacement, KernelKind, KernelSpec, Location};

/// Default diagonal stabiliser added to every Gram matrix.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("Cholesky factorisation failed (last jitter tried {jitter:e})")]
    FactorizationFailure { jitter: f64 },
    #[error("duplicate location {0:?} with zero noise and zero jitter")]
    DuplicateLocation(Location),
    #[error("dataset has {locations} locations but {values} values")]
    LengthMismatch { locations: usize, values: usize },
    #[error("operation requires a nonempty dataset")]
    EmptyDataset,
}

/// Observed `(location, value)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub values: Vec<f64>,
}

impl Dataset {
    pub fn new(locations: Vec<Location>, values: Vec<f64>) -> Result<Self, GpError> {
        if locations.len() != values.len() {
            return Err(GpError::LengthMismatch {
                locations: locations.len(),
                values: values.len(),
            });
        }
        Ok(Dataset { locations, values })
    }

    pub fn push(&mut self, location: Location, value: f64) {
        self.locations.push(location);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn first_duplicate(&self) -> Option<Location> {
        let mut sorted: Vec<Location> = self.locations.clone();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        sorted.windows(2).find(|w| w[0] == w[1]).map(|w| w[0])
    }
}

/// Kernel plus observation-noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kernel: KernelSpec,
    pub noise: f64,
}

impl ModelSpec {
    pub fn new(kernel: KernelSpec, noise: f64) -> Self {
        ModelSpec { kernel, noise }
    }

    pub fn kind(&self) -> KernelKind {
        self.kernel.kind()
    }

    /// Number of optimised hyperparameters, noise included.
    pub fn n_params(&self) -> usize {
        self.kind().n_params() + 1
    }

    /// Optimisation-domain vector: kernel parameters then `ln σ_n²`.
    pub fn to_opt(&self) -> Vec<f64> {
        let mut u = self.kernel.to_opt();
        u.push(self.noise.ln());
        u
    }

    pub fn from_opt(kind: KernelKind, u: &[f64]) -> ModelSpec {
        let (k, n) = u.split_at(kind.n_params());
        ModelSpec {
            kernel: KernelSpec::from_opt(kind, k),
            noise: n[0].exp(),
        }
    }

    /// Prior predictive variance `k(0) + σ_n²`.
    pub fn prior_variance(&self) -> f64 {
        self.kernel.variance_at_zero() + self.noise
    }
}

/// Posterior mean and standard deviation at a set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A model conditioned on a dataset. Immutable once built.
#[derive(Debug, Clone)]
pub struct FittedGp {
    model: ModelSpec,
    locations: Vec<Location>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y: DVector<f64>,
    jitter: f64,
}

fn factorize(
    data: &Dataset,
    model: &ModelSpec,
    jitter: f64,
) -> Option<Cholesky<f64, Dyn>> {
    let k = gram_matrix(&data.locations, &model.kernel, model.noise, jitter);
    Cholesky::new(k)
}

impl FittedGp {
    /// Factorises with jitter escalation starting at `jitter`.
    pub fn fit(data: &Dataset, model: &ModelSpec, jitter: f64) -> Result<Self, GpError> {
        if data.is_empty() {
            return Err(GpError::EmptyDataset);
        }
        if model.noise + jitter <= 0.0 {
            if let Some(dup) = data.first_duplicate() {
                return Err(GpError::DuplicateLocation(dup));
            }
        }
        let mut j = jitter;
        loop {
            if let Some(chol) = factorize(data, model, j) {
                return Ok(Self::from_factor(data, model, chol, j));
            }
            if j >= MAX_JITTER {
                return Err(GpError::FactorizationFailure { jitter: j });
            }
            j = if j > 0.0 { (j * 10.0).min(MAX_JITTER) } else { DEFAULT_JITTER };
        }
    }

    /// Factorises at exactly `jitter`, with no escalation.
    pub fn fit_fixed(data: &Dataset, model: &ModelSpec, jitter: f64) -> Result<Self, GpError> {
        if data.is_empty() {
            return Err(GpError::EmptyDataset);
        }
        factorize(data, model, jitter)
            .map(|chol| Self::from_factor(data, model, chol, jitter))
            .ok_or(GpError::FactorizationFailure { jitter })
    }

    fn from_factor(data: &Dataset, model: &ModelSpec, chol: Cholesky<f64, Dyn>, jitter: f64) -> Self {
        let y = DVector::from_column_slice(&data.values);
        let alpha = chol.solve(&y);
        FittedGp {
            model: *model,
            locations: data.locations.clone(),
            chol,
            alpha,
            y,
            jitter,
        }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Jitter actually used after escalation.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n() as f64;
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * self.y.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * LN_2PI
    }

    /// `∂LML/∂u` over the optimisation-domain vector (noise last).
    pub fn lml_gradient(&self) -> Vec<f64> {
        let n = self.n();
        let kind = self.model.kind();
        let np = kind.n_params();
        let k_inv = self.chol.inverse();
        // W = ααᵀ - K⁻¹; ∂LML/∂θ = ½ Σ_ij W_ij ∂K_ij/∂θ
        let mut grad = vec![0.0; np + 1];
        let mut g = vec![0.0; np];
        for j in 0..n {
            for i in j..n {
                let w = self.alpha[i] * self.alpha[j] - k_inv[(i, j)];
                let tau = Displacement::between(&self.locations[i], &self.locations[j]);
                self.model.kernel.gradient_into(&tau, &mut g);
                let weight = if i == j { 0.5 * w } else { w };
                for (acc, gp) in grad.iter_mut().zip(&g) {
                    *acc += weight * gp;
                }
            }
        }
        // ∂K/∂ln σ_n² = σ_n² I
        let trace_w: f64 = (0..n)
            .map(|i| self.alpha[i] * self.alpha[i] - k_inv[(i, i)])
            .sum();
        grad[np] = 0.5 * self.model.noise * trace_w;
        grad
    }

    pub fn posterior(&self, queries: &[Location]) -> Posterior {
        let n = self.n();
        let prior_var = self.model.prior_variance();
        let mut mean = Vec::with_capacity(queries.len());
        let mut std = Vec::with_capacity(queries.len());
        let mut kstar = DVector::zeros(n);
        for q in queries {
            for (i, x) in self.locations.iter().enumerate() {
                kstar[i] = self.model.kernel.eval(&Displacement::between(q, x));
            }
            mean.push(kstar.dot(&self.alpha));
            let v = self
                .chol
                .l_dirty()
                .solve_lower_triangular(&kstar)
                .expect("Cholesky factor has a positive diagonal");
            std.push((prior_var - v.norm_squared()).max(0.0).sqrt());
        }
        Posterior { mean, std }
    }
}

/// Posterior at `queries`; the prior (mean 0, std `√(k(0)+σ_n²)`) when `data` is empty.
pub fn posterior(
    data: &Dataset,
    model: &ModelSpec,
    queries: &[Location],
    jitter: f64,
) -> Result<Posterior, GpError> {
    if data.is_empty() {
        let s = model.prior_variance().sqrt();
        return Ok(Posterior {
            mean: vec![0.0; queries.len()],
            std: vec![s; queries.len()],
        });
    }
    Ok(FittedGp::fit(data, model, jitter)?.posterior(queries))
}

pub fn log_marginal_likelihood(data: &Dataset, model: &ModelSpec, jitter: f64) -> Result<f64, GpError> {
    Ok(FittedGp::fit(data, model, jitter)?.log_marginal_likelihood())
}

pub fn lml_gradient(data: &Dataset, model: &ModelSpec, jitter: f64) -> Result<Vec<f64>, GpError> {
    Ok(FittedGp::fit(data, model, jitter)?.lml_gradient())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ProductParams, RbfParams, SumParams};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rbf_model(l: f64, s: f64, noise: f64) -> ModelSpec {
        ModelSpec::new(
            KernelSpec::Rbf(RbfParams {
                length_scale: l,
                variance: s,
            }),
            noise,
        )
    }

    fn random_model(kind: KernelKind, rng: &mut ChaCha8Rng) -> ModelSpec {
        let kernel = match kind {
            KernelKind::Rbf => KernelSpec::Rbf(RbfParams {
                length_scale: rng.gen_range(0.8..4.0),
                variance: rng.gen_range(0.3..2.0),
            }),
            KernelKind::Sum => KernelSpec::Sum(SumParams {
                length_scale: rng.gen_range(0.8..4.0),
                dir_length_scale: rng.gen_range(0.5..3.0),
                rbf_variance: rng.gen_range(0.3..2.0),
                dir_variance: rng.gen_range(0.3..2.0),
                gamma: rng.gen_range(0.0..std::f64::consts::PI),
            }),
            KernelKind::Product => KernelSpec::Product(ProductParams {
                length_scale: rng.gen_range(0.8..4.0),
                dir_length_scale: rng.gen_range(0.5..3.0),
                variance: rng.gen_range(0.3..2.0),
                gamma: rng.gen_range(0.0..std::f64::consts::PI),
            }),
        };
        ModelSpec::new(kernel, rng.gen_range(0.01..0.3))
    }

    fn random_data(n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let locs = (0..n)
            .map(|_| [rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)])
            .collect();
        let vals = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Dataset::new(locs, vals).unwrap()
    }

    #[test]
    fn noiseless_interpolation() {
        let data = Dataset::new(vec![[0.0, 0.0], [3.0, 1.0], [1.0, 4.0]], vec![0.7, -1.2, 2.0]).unwrap();
        let model = rbf_model(1.5, 1.0, 0.0);
        let post = posterior(&data, &model, &data.locations, 0.0).unwrap();
        for (m, y) in post.mean.iter().zip(&data.values) {
            assert!((m - y).abs() < 1e-9);
        }
        assert!(post.std.iter().all(|&s| s < 1e-6));
    }

    #[test]
    fn prior_reversion_far_away() {
        let data = Dataset::new(vec![[0.0, 0.0], [1.0, 0.0]], vec![1.0, 2.0]).unwrap();
        let model = ModelSpec::new(
            KernelSpec::Product(ProductParams {
                length_scale: 2.0,
                dir_length_scale: 1.0,
                variance: 1.5,
                gamma: 0.3,
            }),
            0.05,
        );
        let post = posterior(&data, &model, &[[500.0, -400.0]], DEFAULT_JITTER).unwrap();
        assert!(post.mean[0].abs() < 1e-6);
        assert!((post.std[0] - model.prior_variance().sqrt()).abs() < 1e-6);
    }

    #[test]
    fn empty_dataset_gives_prior() {
        let model = rbf_model(1.0, 2.0, 0.25);
        let post = posterior(&Dataset::default(), &model, &[[0.0, 0.0], [5.0, 5.0]], 0.0).unwrap();
        assert_eq!(post.mean, vec![0.0, 0.0]);
        assert_eq!(post.std, vec![1.5, 1.5]);
    }

    #[test]
    fn one_point_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let model = rbf_model(rng.gen_range(0.5..5.0), rng.gen_range(0.1..3.0), rng.gen_range(0.0..0.5));
            let x0 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let y0 = rng.gen_range(-3.0..3.0);
            let q = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let data = Dataset::new(vec![x0], vec![y0]).unwrap();
            let post = posterior(&data, &model, &[q], 0.0).unwrap();
            let k = model.kernel.eval(&Displacement::between(&q, &x0));
            let expected = y0 * k / model.prior_variance();
            assert!((post.mean[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lml_scalar_cases() {
        let data = Dataset::new(vec![[0.0, 0.0]], vec![0.0]).unwrap();
        let lml = log_marginal_likelihood(&data, &rbf_model(1.0, 0.75, 0.25), 0.0).unwrap();
        assert_relative_eq!(lml, -0.918_938_533_204_672_7, epsilon = 1e-12);

        let data = Dataset::new(vec![[0.0, 0.0]], vec![2.0]).unwrap();
        let lml = log_marginal_likelihood(&data, &rbf_model(1.0, 3.0, 1.0), 0.0).unwrap();
        let oracle = -0.5 * 4.0 / 4.0 - 0.5 * 4.0f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(lml, oracle, epsilon = 1e-12);
        assert_relative_eq!(lml, -2.112086, epsilon = 1e-6);
    }

    #[test]
    fn agrees_with_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=10 {
            for kind in KernelKind::ALL {
                let data = random_data(n, &mut rng);
                let model = random_model(kind, &mut rng);
                let queries: Vec<Location> = (0..4)
                    .map(|_| [rng.gen_range(-1.0..7.0), rng.gen_range(-1.0..7.0)])
                    .collect();
                let fast = FittedGp::fit(&data, &model, DEFAULT_JITTER).unwrap();
                assert!((fast.log_marginal_likelihood() - naive::lml(&data, &model, DEFAULT_JITTER)).abs() < 1e-10);
                let p = fast.posterior(&queries);
                let q = naive::posterior(&data, &model, &queries, DEFAULT_JITTER);
                for i in 0..queries.len() {
                    assert!((p.mean[i] - q.mean[i]).abs() < 1e-10);
                    assert!((p.std[i] - q.std[i]).abs() < 1e-10);
                }
            }
        }
    }

    fn fd_gradient(data: &Dataset, model: &ModelSpec, h: f64) -> Vec<f64> {
        let u = model.to_opt();
        (0..u.len())
            .map(|i| {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                let fp = FittedGp::fit_fixed(data, &ModelSpec::from_opt(model.kind(), &up), DEFAULT_JITTER)
                    .unwrap()
                    .log_marginal_likelihood();
                let fm = FittedGp::fit_fixed(data, &ModelSpec::from_opt(model.kind(), &dn), DEFAULT_JITTER)
                    .unwrap()
                    .log_marginal_likelihood();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn lml_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            for kind in KernelKind::ALL {
                let data = random_data(8, &mut rng);
                let model = random_model(kind, &mut rng);
                let g = lml_gradient(&data, &model, DEFAULT_JITTER).unwrap();
                let fd = fd_gradient(&data, &model, 1e-5);
                for (a, b) in g.iter().zip(&fd) {
                    let scale = a.abs().max(b.abs()).max(1e-6);
                    assert!((a - b).abs() / scale < 1e-4, "{kind}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sum_gradient_reduces_to_rbf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_data(8, &mut rng);
        let sum = ModelSpec::new(
            KernelSpec::Sum(SumParams {
                length_scale: 2.0,
                dir_length_scale: 1.0,
                rbf_variance: 1.2,
                dir_variance: 1e-14,
                gamma: 0.5,
            }),
            0.1,
        );
        let rbf = rbf_model(2.0, 1.2, 0.1);
        let gs = lml_gradient(&data, &sum, DEFAULT_JITTER).unwrap();
        let gr = lml_gradient(&data, &rbf, DEFAULT_JITTER).unwrap();
        assert!((gs[0] - gr[0]).abs() < 1e-8);
        assert!((gs[2] - gr[1]).abs() < 1e-8);
        assert!((gs[5] - gr[2]).abs() < 1e-8);
    }

    #[test]
    fn variance_never_increases_with_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in KernelKind::ALL {
            for _ in 0..10 {
                let model = random_model(kind, &mut rng);
                let data = random_data(9, &mut rng);
                let queries: Vec<Location> = (0..10)
                    .map(|_| [rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)])
                    .collect();
                let mut prev = posterior(&Dataset::default(), &model, &queries, DEFAULT_JITTER).unwrap().std;
                let mut partial = Dataset::default();
                for (x, y) in data.locations.iter().zip(&data.values) {
                    partial.push(*x, *y);
                    let next = posterior(&partial, &model, &queries, DEFAULT_JITTER).unwrap().std;
                    for (a, b) in next.iter().zip(&prev) {
                        assert!(*a <= b + 1e-9);
                    }
                    prev = next;
                }
            }
        }
    }

    #[test]
    fn lml_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_data(10, &mut rng);
        let model = random_model(KernelKind::Sum, &mut rng);
        let a = log_marginal_likelihood(&data, &model, DEFAULT_JITTER).unwrap();
        let mut idx: Vec<usize> = (0..10).collect();
        idx.reverse();
        idx.swap(2, 7);
        let perm = Dataset::new(
            idx.iter().map(|&i| data.locations[i]).collect(),
            idx.iter().map(|&i| data.values[i]).collect(),
        )
        .unwrap();
        let b = log_marginal_likelihood(&perm, &model, DEFAULT_JITTER).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn duplicates_rejected_without_noise() {
        let data = Dataset::new(vec![[1.0, 1.0], [1.0, 1.0]], vec![0.0, 1.0]).unwrap();
        let err = FittedGp::fit(&data, &rbf_model(1.0, 1.0, 0.0), 0.0).unwrap_err();
        assert!(matches!(err, GpError::DuplicateLocation(_)));
        assert!(FittedGp::fit(&data, &rbf_model(1.0, 1.0, 0.0), DEFAULT_JITTER).is_ok());
    }

    #[test]
    fn jitter_escalates_on_near_singular_gram() {
        // duplicated point: the jitter is lost to rounding against k(0) = 1
        let data = Dataset::new(vec![[0.0, 0.0], [0.0, 0.0]], vec![0.0, 0.1]).unwrap();
        let fit = FittedGp::fit(&data, &rbf_model(1.0, 1.0, 0.0), 1e-20).unwrap();
        assert!(fit.jitter() > 1e-20);
        assert!(fit.jitter() <= MAX_JITTER);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            Dataset::new(vec![[0.0, 0.0]], vec![]),
            Err(GpError::LengthMismatch { .. })
        ));
    }
}
