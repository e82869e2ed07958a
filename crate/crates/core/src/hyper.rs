//! Hyperparameter priors, multi-start MAP fitting and BIC scoring.
//!
//! Positive hyperparameters carry independent log-normal priors; the wind
//! angle γ is uniform on `[0, π)`. Fitting maximises
//! `LML + ln p(θ)` (or the bare LML when no prior is given) by quasi-Newton
//! ascent in the optimisation domain from many random starts.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Image;
use crate::format::{derive_seed, fmt_f64, fnv1a};
use crate::gp::{Dataset, FittedGp, GpError, ModelSpec, DEFAULT_JITTER};
use crate::kernels::{canonical_angle, KernelKind};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Width substituted for a zero-variance log-normal component.
pub const DEGENERATE_SIGMA_LOG: f64 = 0.1;
/// Components narrower than this are treated as degenerate.
const DEGENERATE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HyperError {
    #[error("log-normal fit needs at least one sample")]
    NoSamples,
    #[error("sample {index} is {value}, log-normal samples must be > 0")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("all {0} restarts failed to factorise")]
    AllRestartsFailed(usize),
    #[error("no tuning image produced a usable fit")]
    PriorConstructionFailure,
    #[error("prior file line {line}: {reason}")]
    PriorParse { line: usize, reason: String },
    #[error("prior is for {found} but {expected} was requested")]
    KindMismatch { expected: KernelKind, found: KernelKind },
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Log-normal distribution of a positive quantity, parameterised in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormal {
    pub mu_log: f64,
    pub sigma_log: f64,
}

impl LogNormal {
    /// Width used for densities and sampling; zero widths are replaced.
    pub fn effective_sigma(&self) -> f64 {
        if self.sigma_log < DEGENERATE_THRESHOLD {
            DEGENERATE_SIGMA_LOG
        } else {
            self.sigma_log
        }
    }

    /// `ln p(x)` evaluated through `u = ln x`.
    pub fn ln_pdf_at_log(&self, u: f64) -> f64 {
        let s = self.effective_sigma();
        let z = (u - self.mu_log) / s;
        -u - s.ln() - LN_SQRT_2PI - 0.5 * z * z
    }

    /// `d ln p(x) / d ln x`.
    pub fn d_ln_pdf_at_log(&self, u: f64) -> f64 {
        let s = self.effective_sigma();
        -1.0 - (u - self.mu_log) / (s * s)
    }

    pub fn median(&self) -> f64 {
        self.mu_log.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalFit {
    pub dist: LogNormal,
    /// Fitted from a single sample, so `sigma_log` is zero.
    pub degenerate: bool,
}

/// Maximum-likelihood log-normal fit; `bessel` switches the variance divisor
/// from `n` to `n - 1`.
pub fn fit_lognormal(samples: &[f64], bessel: bool) -> Result<LogNormalFit, HyperError> {
    if samples.is_empty() {
        return Err(HyperError::NoSamples);
    }
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, v)| v.is_nan() || **v <= 0.0) {
        return Err(HyperError::NonPositiveSample { index, value });
    }
    let logs: Vec<f64> = samples.iter().map(|v| v.ln()).collect();
    let n = logs.len();
    let mu = logs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(LogNormalFit {
            dist: LogNormal {
                mu_log: mu,
                sigma_log: 0.0,
            },
            degenerate: true,
        });
    }
    let ss: f64 = logs.iter().map(|x| (x - mu) * (x - mu)).sum();
    let divisor = if bessel { n - 1 } else { n } as f64;
    Ok(LogNormalFit {
        dist: LogNormal {
            mu_log: mu,
            sigma_log: (ss / divisor).sqrt(),
        },
        degenerate: false,
    })
}

/// Independent priors over a model's hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrior {
    pub kind: KernelKind,
    /// One per positive hyperparameter, in canonical order, noise last.
    pub components: Vec<LogNormal>,
    pub degenerate: bool,
}

impl HyperPrior {
    /// Names of the log-normal components, matching `components`.
    pub fn component_names(kind: KernelKind) -> Vec<&'static str> {
        let gi = kind.gamma_index();
        kind.param_names()
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != gi)
            .map(|(_, n)| *n)
            .chain(std::iter::once("noise_variance"))
            .collect()
    }

    /// Positions in the optimisation vector that carry a log-normal prior.
    fn positive_slots(kind: KernelKind) -> Vec<usize> {
        let gi = kind.gamma_index();
        (0..=kind.n_params()).filter(|i| Some(*i) != gi).collect()
    }

    /// Log prior density over an optimisation-domain vector.
    pub fn ln_density_opt(&self, u: &[f64]) -> f64 {
        let mut total: f64 = Self::positive_slots(self.kind)
            .into_iter()
            .zip(&self.components)
            .map(|(i, c)| c.ln_pdf_at_log(u[i]))
            .sum();
        if self.kind.gamma_index().is_some() {
            total -= PI.ln();
        }
        total
    }

    pub fn ln_density(&self, model: &ModelSpec) -> f64 {
        self.ln_density_opt(&model.to_opt())
    }

    fn gradient_opt(&self, u: &[f64], out: &mut [f64]) {
        for (i, c) in Self::positive_slots(self.kind).into_iter().zip(&self.components) {
            out[i] += c.d_ln_pdf_at_log(u[i]);
        }
    }

    /// A starting point drawn from the prior.
    pub fn sample_opt<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = vec![0.0; self.kind.n_params() + 1];
        for (i, c) in Self::positive_slots(self.kind).into_iter().zip(&self.components) {
            let z: f64 = rng.sample(StandardNormal);
            u[i] = c.mu_log + c.effective_sigma() * z;
        }
        if let Some(gi) = self.kind.gamma_index() {
            u[gi] = rng.gen_range(0.0..PI);
        }
        u
    }

    /// Plain-text form: `name mu_log sigma_log` per line, then `gamma uniform 0 pi`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# kernel: {}", self.kind).unwrap();
        writeln!(out, "# degenerate: {}", self.degenerate).unwrap();
        for (name, c) in Self::component_names(self.kind).iter().zip(&self.components) {
            writeln!(out, "{name} {} {}", fmt_f64(c.mu_log), fmt_f64(c.sigma_log)).unwrap();
        }
        if self.kind.gamma_index().is_some() {
            out.push_str("gamma uniform 0 pi\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<HyperPrior, HyperError> {
        let err = |line: usize, reason: String| HyperError::PriorParse { line, reason };
        let mut kind = None;
        let mut degenerate = false;
        let mut entries: Vec<(String, LogNormal)> = Vec::new();
        let mut saw_gamma = false;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.split_once(':') {
                    match k.trim() {
                        "kernel" => kind = Some(v.trim().parse::<KernelKind>().map_err(|e| err(lineno, e.to_string()))?),
                        "degenerate" => degenerate = v.trim() == "true",
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.first() == Some(&"gamma") {
                if fields[1..] != ["uniform", "0", "pi"] {
                    return Err(err(lineno, format!("unsupported gamma prior '{line}'")));
                }
                saw_gamma = true;
                continue;
            }
            if fields.len() != 3 {
                return Err(err(lineno, format!("expected 'name mu_log sigma_log', got '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(lineno, format!("'{s}' is not a number")));
            entries.push((
                fields[0].to_string(),
                LogNormal {
                    mu_log: num(fields[1])?,
                    sigma_log: num(fields[2])?,
                },
            ));
        }
        let kind = kind.ok_or_else(|| err(0, "missing '# kernel:' header".into()))?;
        let names = Self::component_names(kind);
        if entries.len() != names.len() || entries.iter().zip(&names).any(|((a, _), b)| a != b) {
            return Err(err(0, format!("expected components {names:?} for {kind}")));
        }
        if saw_gamma != kind.gamma_index().is_some() {
            return Err(err(0, format!("gamma line does not match kernel {kind}")));
        }
        Ok(HyperPrior {
            kind,
            components: entries.into_iter().map(|(_, c)| c).collect(),
            degenerate,
        })
    }
}

/// Stopping rules for the per-restart ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub max_iters: usize,
    /// Stop once an accepted step improves the objective by less than this.
    pub tol: f64,
    /// Sufficient-increase constant of the backtracking line search.
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            max_iters: 200,
            tol: 1e-6,
            armijo: 1e-4,
            max_halvings: 40,
        }
    }
}

/// Source of the per-image samples that [`build_priors`] fits log-normals to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorSamples {
    /// The single best optimum per tuning image.
    #[default]
    BestPerImage,
    /// Every converged restart endpoint of every tuning image.
    AllRestarts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub jitter: f64,
    pub ascent: AscentConfig,
    /// Scale for the broad initialisation ranges; defaults to the diagonal of
    /// the data's bounding box.
    pub grid_diagonal: Option<f64>,
    /// Coordinate units per pixel when images are converted to datasets.
    pub pixel_scale: f64,
    pub prior_samples: PriorSamples,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            jitter: DEFAULT_JITTER,
            ascent: AscentConfig::default(),
            grid_diagonal: None,
            pixel_scale: 1.0,
            prior_samples: PriorSamples::BestPerImage,
        }
    }
}

/// Best hyperparameters found by [`multistart_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// γ already wrapped into `[0, π)`.
    pub model: ModelSpec,
    /// `lml` plus the log prior density (equal to `lml` without a prior).
    pub objective: f64,
    pub lml: f64,
    /// Restarts that produced a finite optimum.
    pub n_restarts_used: usize,
    pub converged: bool,
}

/// Endpoint of a single restart.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartOutcome {
    pub index: usize,
    pub opt: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
}

fn bounding_diagonal(data: &Dataset) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &data.locations {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let d = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    if d.is_finite() && d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Box on the optimisation domain; steps leaving it are rejected.
#[derive(Debug, Clone)]
struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn new(kind: KernelKind, diag: f64) -> Self {
        let np = kind.n_params();
        let mut lo = Vec::with_capacity(np + 1);
        let mut hi = Vec::with_capacity(np + 1);
        for i in 0..np {
            if Some(i) == kind.gamma_index() {
                lo.push(-20.0 * PI);
                hi.push(20.0 * PI);
            } else if kind.is_length_scale(i) {
                lo.push((1e-3 * diag).ln());
                hi.push((1e2 * diag).ln());
            } else {
                lo.push(1e-6f64.ln());
                hi.push(1e4f64.ln());
            }
        }
        lo.push(1e-10f64.ln());
        hi.push(1e2f64.ln());
        Bounds { lo, hi }
    }

    fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (l, h))| x >= l && x <= h)
    }
}

/// Broad start distribution used when no prior is available.
fn broad_start<R: Rng>(kind: KernelKind, diag: f64, rng: &mut R) -> Vec<f64> {
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(lo.ln()..hi.ln());
    let mut u = Vec::with_capacity(kind.n_params() + 1);
    for i in 0..kind.n_params() {
        if Some(i) == kind.gamma_index() {
            u.push(rng.gen_range(0.0..PI));
        } else if kind.is_length_scale(i) {
            u.push(log_uniform(rng, 0.1 * diag, 3.0 * diag));
        } else {
            u.push(log_uniform(rng, 0.01, 10.0));
        }
    }
    u.push(log_uniform(rng, 1e-6, 1.0));
    u
}

/// The MAP (or ML) objective over the optimisation domain.
struct Objective<'a> {
    data: &'a Dataset,
    kind: KernelKind,
    prior: Option<&'a HyperPrior>,
    jitter: f64,
    bounds: Bounds,
}

impl Objective<'_> {
    /// Value and the fitted GP it came from; `None` outside the box or when
    /// the Gram matrix does not factorise.
    fn value(&self, u: &[f64]) -> Option<(f64, FittedGp)> {
        if !self.bounds.contains(u) {
            return None;
        }
        let model = ModelSpec::from_opt(self.kind, u);
        let gp = FittedGp::fit_fixed(self.data, &model, self.jitter).ok()?;
        let mut f = gp.log_marginal_likelihood();
        if let Some(p) = self.prior {
            f += p.ln_density_opt(u);
        }
        f.is_finite().then_some((f, gp))
    }

    fn gradient(&self, u: &[f64], gp: &FittedGp) -> Vec<f64> {
        let mut g = gp.lml_gradient();
        if let Some(p) = self.prior {
            p.gradient_opt(u, &mut g);
        }
        g
    }

    /// BFGS ascent with Armijo backtracking (step halving).
    fn ascend(&self, mut x: Vec<f64>, cfg: &AscentConfig) -> Option<(Vec<f64>, f64, bool)> {
        let n = x.len();
        let (mut fx, gp) = self.value(&x)?;
        let mut g = self.gradient(&x, &gp);
        let mut h = identity(n);
        let mut converged = false;
        let mut first = true;
        for _ in 0..cfg.max_iters {
            let mut d = mat_vec(&h, &g);
            let mut slope = dot(&g, &d);
            if slope.is_nan() || slope <= 0.0 {
                h = identity(n);
                d = g.clone();
                slope = dot(&g, &g);
            }
            if slope < 1e-20 {
                converged = true;
                break;
            }
            // keep the very first (steepest) step to a unit move in log space
            let mut t = if first { 1.0f64.min(1.0 / norm(&d)) } else { 1.0 };
            first = false;
            let mut accepted = None;
            for _ in 0..cfg.max_halvings {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                if let Some((ft, gpt)) = self.value(&trial) {
                    if ft >= fx + cfg.armijo * t * slope {
                        accepted = Some((trial, ft, gpt));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((x_new, f_new, gp_new)) = accepted else {
                // no ascent possible along this direction: numerically stationary
                converged = true;
                break;
            };
            let g_new = self.gradient(&x_new, &gp_new);
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            // curvature pair for the minimisation of -f
            let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
            bfgs_update(&mut h, &s, &y);
            let improvement = f_new - fx;
            x = x_new;
            fx = f_new;
            g = g_new;
            if improvement < cfg.tol {
                converged = true;
                break;
            }
        }
        Some((x, fx, converged))
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Inverse-Hessian BFGS update; skipped when the curvature condition fails.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64]) {
    let sy = dot(s, y);
    if sy <= 1e-12 * norm(s) * norm(y) {
        return;
    }
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let n = s.len();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Runs every restart and returns the endpoints in restart order.
pub fn multistart_endpoints(
    data: &Dataset,
    kind: KernelKind,
    prior: Option<&HyperPrior>,
    n_restarts: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<Vec<RestartOutcome>, HyperError> {
    if data.is_empty() {
        return Err(GpError::EmptyDataset.into());
    }
    if let Some(p) = prior {
        if p.kind != kind {
            return Err(HyperError::KindMismatch {
                expected: kind,
                found: p.kind,
            });
        }
    }
    let diag = opts.grid_diagonal.unwrap_or_else(|| bounding_diagonal(data));
    let objective = Objective {
        data,
        kind,
        prior,
        jitter: opts.jitter,
        bounds: Bounds::new(kind, diag),
    };
    let outcomes: Vec<Option<RestartOutcome>> = (0..n_restarts)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
            let mut start = match prior {
                Some(p) => p.sample_opt(&mut rng),
                None => broad_start(kind, diag, &mut rng),
            };
            // clamp prior draws that land outside the search box
            for (x, (lo, hi)) in start.iter_mut().zip(objective.bounds.lo.iter().zip(&objective.bounds.hi)) {
                *x = x.clamp(*lo, *hi);
            }
            objective
                .ascend(start, &opts.ascent)
                .map(|(opt, objective, converged)| RestartOutcome {
                    index,
                    opt,
                    objective,
                    converged,
                })
        })
        .collect();
    let ok: Vec<RestartOutcome> = outcomes.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(HyperError::AllRestartsFailed(n_restarts));
    }
    Ok(ok)
}

/// Best-of-`n_restarts` hyperparameter fit. Deterministic in `seed`; restart
/// `i` always uses the same stream, so the result only improves with more
/// restarts.
pub fn multistart_fit(
    data: &Dataset,
    kind: KernelKind,
    prior: Option<&HyperPrior>,
    n_restarts: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult, HyperError> {
    let outcomes = multistart_endpoints(data, kind, prior, n_restarts, seed, opts)?;
    let n_used = outcomes.len();
    let best = outcomes
        .iter()
        .fold(None::<&RestartOutcome>, |acc, o| match acc {
            Some(b) if b.objective >= o.objective => Some(b),
            _ => Some(o),
        })
        .expect("at least one outcome");
    finish_fit(data, kind, prior, best, n_used, opts)
}

fn finish_fit(
    data: &Dataset,
    kind: KernelKind,
    prior: Option<&HyperPrior>,
    best: &RestartOutcome,
    n_used: usize,
    opts: &FitOptions,
) -> Result<FitResult, HyperError> {
    let mut u = best.opt.clone();
    if let Some(gi) = kind.gamma_index() {
        u[gi] = canonical_angle(u[gi]);
    }
    let model = ModelSpec::from_opt(kind, &u);
    let lml = FittedGp::fit_fixed(data, &model, opts.jitter)?.log_marginal_likelihood();
    let objective = lml + prior.map_or(0.0, |p| p.ln_density_opt(&u));
    Ok(FitResult {
        model,
        objective,
        lml,
        n_restarts_used: n_used,
        converged: best.converged,
    })
}

/// Per-image fits together with the prior built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBuild {
    pub prior: HyperPrior,
    /// `(image id, best maximum-likelihood fit)` for every usable image.
    pub fits: Vec<(String, FitResult)>,
    pub skipped: Vec<String>,
}

/// Fits each (preprocessed) tuning image by maximum likelihood and fits
/// log-normals to the resulting hyperparameters; γ gets a uniform prior.
pub fn build_priors(
    tuning_images: &[Image],
    kind: KernelKind,
    n_restarts: usize,
    bessel: bool,
    seed: u64,
    opts: &FitOptions,
) -> Result<PriorBuild, HyperError> {
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for image in tuning_images {
        let data = image.to_dataset(opts.pixel_scale);
        let image_seed = derive_seed(seed, fnv1a(image.id.as_bytes()));
        let outcomes = match multistart_endpoints(&data, kind, None, n_restarts, image_seed, opts) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("skipping tuning image {}: {e}", image.id);
                skipped.push(image.id.clone());
                continue;
            }
        };
        let best = outcomes
            .iter()
            .fold(None::<&RestartOutcome>, |acc, o| match acc {
                Some(b) if b.objective >= o.objective => Some(b),
                _ => Some(o),
            })
            .expect("nonempty");
        let fit = match finish_fit(&data, kind, None, best, outcomes.len(), opts) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("skipping tuning image {}: {e}", image.id);
                skipped.push(image.id.clone());
                continue;
            }
        };
        match opts.prior_samples {
            PriorSamples::BestPerImage => samples.push(positive_values(&fit.model)),
            PriorSamples::AllRestarts => samples.extend(
                outcomes
                    .iter()
                    .filter(|o| o.converged)
                    .map(|o| positive_values(&ModelSpec::from_opt(kind, &o.opt))),
            ),
        }
        fits.push((image.id.clone(), fit));
    }
    if samples.is_empty() {
        return Err(HyperError::PriorConstructionFailure);
    }
    let n_components = samples[0].len();
    let mut components = Vec::with_capacity(n_components);
    let mut degenerate = false;
    for c in 0..n_components {
        let column: Vec<f64> = samples.iter().map(|s| s[c]).collect();
        let fit = fit_lognormal(&column, bessel)?;
        degenerate |= fit.degenerate;
        components.push(fit.dist);
    }
    if degenerate {
        log::warn!("{kind} prior fitted from a single sample; widths are zero");
    }
    Ok(PriorBuild {
        prior: HyperPrior {
            kind,
            components,
            degenerate,
        },
        fits,
        skipped,
    })
}

/// Positive hyperparameters (γ dropped), noise last.
fn positive_values(model: &ModelSpec) -> Vec<f64> {
    let gi = model.kind().gamma_index();
    model
        .kernel
        .values()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != gi)
        .map(|(_, v)| v)
        .chain(std::iter::once(model.noise))
        .collect()
}

/// Penalised log-likelihood; higher is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicScore {
    pub value: f64,
    pub n: usize,
    pub p: usize,
}

/// `lml - (p/2) ln n`, with `p` counting kernel hyperparameters plus noise.
pub fn bic(data: &Dataset, fit: &FitResult) -> BicScore {
    bic_from_parts(fit.lml, data.len(), fit.model.n_params())
}

pub fn bic_from_parts(lml: f64, n: usize, p: usize) -> BicScore {
    BicScore {
        value: lml - 0.5 * p as f64 * (n as f64).ln(),
        n,
        p,
    }
}
