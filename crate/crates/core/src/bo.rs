//! Maximum search over an image grid: UCB-driven Bayesian optimisation, the
//! uniform random baseline, and the distance/ratio metrics.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{Image, Pixel};
use crate::format::{derive_seed, fmt_f64};
use crate::gp::{Dataset, FittedGp, GpError};
use crate::hyper::{multistart_fit, FitOptions, FitResult, HyperError, HyperPrior};
use crate::kernels::KernelKind;

/// Header of per-run trace files.
pub const TRACE_HEADER: &str = "iter,x_row,x_col,raw_value,xhat_row,xhat_col,distance,ratio";
/// Header of mean traces (random baseline).
pub const MEAN_TRACE_HEADER: &str = "iter,distance,ratio";

#[derive(Debug, thiserror::Error)]
pub enum BoError {
    #[error("no unsampled, non-missing pixel remains")]
    NoCandidates,
    #[error("image has {available} observed pixels, {required} needed")]
    NotEnoughPixels { available: usize, required: usize },
    #[error("image '{0}' must be normalised before running BO")]
    NotNormalized(String),
    #[error("hyperparameter fit failed: {0}")]
    Fit(#[from] HyperError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("trace parse error on line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
}

/// How the estimated maximiser x̂ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaximiserEstimate {
    /// Highest raw concentration observed so far.
    #[default]
    BestObserved,
    /// Posterior-mean argmax over observed pixels under the latest fit.
    PosteriorMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoConfig {
    /// UCB exploration weight.
    pub beta: f64,
    pub n_init: usize,
    pub n_iters: usize,
    pub n_restarts_per_iter: usize,
    /// Std of the Gaussian noise added to each normalised observation.
    pub sample_noise_std: f64,
    pub rng_seed: u64,
    pub estimator: MaximiserEstimate,
    pub fit: FitOptions,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            beta: 1.0,
            n_init: 10,
            n_iters: 100,
            n_restarts_per_iter: 100,
            sample_noise_std: 1e-6,
            rng_seed: 0,
            estimator: MaximiserEstimate::BestObserved,
            fit: FitOptions::default(),
        }
    }
}

#[inline]
pub fn ucb(mean: f64, std: f64, beta: f64) -> f64 {
    mean + beta * std
}

/// Posterior summary and UCB score for each candidate pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionField {
    /// Row-major order.
    pub candidates: Vec<Pixel>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub score: Vec<f64>,
}

impl AcquisitionField {
    pub fn new(candidates: Vec<Pixel>, mean: Vec<f64>, std: Vec<f64>, beta: f64) -> Self {
        let score = mean.iter().zip(&std).map(|(m, s)| ucb(*m, *s, beta)).collect();
        AcquisitionField {
            candidates,
            mean,
            std,
            score,
        }
    }

    /// Index of the highest score; the earliest candidate wins ties.
    pub fn argmax_index(&self) -> Option<usize> {
        first_argmax(&self.score)
    }

    pub fn argmax(&self) -> Option<Pixel> {
        self.argmax_index().map(|i| self.candidates[i])
    }
}

fn first_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// UCB over `candidates` under an already-fitted GP.
pub fn acquisition_field(gp: &FittedGp, candidates: &[Pixel], beta: f64, scale: f64) -> AcquisitionField {
    let locs: Vec<_> = candidates.iter().map(|p| p.location(scale)).collect();
    let post = gp.posterior(&locs);
    AcquisitionField::new(candidates.to_vec(), post.mean, post.std, beta)
}

/// Observations gathered so far in a BO run.
#[derive(Debug, Clone, PartialEq)]
pub struct BoState {
    pub data: Dataset,
    /// Pixels in sampling order, aligned with `data`.
    pub pixels: Vec<Pixel>,
    /// Per-pixel sampled flag, row-major.
    pub sampled: Vec<bool>,
}

impl BoState {
    pub fn new(image: &Image) -> Self {
        BoState {
            data: Dataset::default(),
            pixels: Vec::new(),
            sampled: vec![false; image.len()],
        }
    }

    pub fn observe(&mut self, image: &Image, pixel: Pixel, value: f64, scale: f64) {
        self.data.push(pixel.location(scale), value);
        self.pixels.push(pixel);
        self.sampled[image.index(pixel)] = true;
    }

    /// Non-missing, unsampled pixels in row-major order.
    pub fn candidates(&self, image: &Image) -> Vec<Pixel> {
        (0..image.len())
            .filter(|&i| !image.missing[i] && !self.sampled[i])
            .map(|i| image.pixel(i))
            .collect()
    }
}

/// Result of one BO iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Pixel,
    pub fit: FitResult,
    pub field: AcquisitionField,
}

/// Refits hyperparameters on the current data and picks the UCB maximiser
/// among unsampled, non-missing pixels.
pub fn bo_step(
    image: &Image,
    state: &BoState,
    prior: Option<&HyperPrior>,
    cfg: &BoConfig,
    kind: KernelKind,
    seed: u64,
) -> Result<StepOutcome, BoError> {
    let candidates = state.candidates(image);
    if candidates.is_empty() {
        return Err(BoError::NoCandidates);
    }
    let fit = multistart_fit(&state.data, kind, prior, cfg.n_restarts_per_iter, seed, &cfg.fit)?;
    let gp = FittedGp::fit(&state.data, &fit.model, cfg.fit.jitter)?;
    let field = acquisition_field(&gp, &candidates, cfg.beta, cfg.fit.pixel_scale);
    let next = field.argmax().expect("candidates are nonempty");
    Ok(StepOutcome { next, fit, field })
}

/// One sample of a run together with the metrics after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub pixel: Pixel,
    pub raw_value: f64,
    pub xhat: Pixel,
    /// `‖x̂ − x*‖` in pixels.
    pub distance: f64,
    /// `ŷ / y*` on raw concentrations.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoTrace {
    /// One record per sample: `n_init` seeds followed by the BO iterations.
    pub records: Vec<TraceRecord>,
    pub true_max: Pixel,
    pub true_max_value: f64,
    /// The run stopped early because no candidates remained.
    pub truncated: bool,
}

impl BoTrace {
    pub fn distances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.distance).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ratio).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.pixel.row,
                r.pixel.col,
                fmt_f64(r.raw_value),
                r.xhat.row,
                r.xhat.col,
                fmt_f64(r.distance),
                fmt_f64(r.ratio)
            )
            .unwrap();
        }
        out
    }
}

/// Parses the records of a trace CSV written by [`BoTrace::to_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>, BoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        _ => {
            return Err(BoError::TraceParse {
                line: 1,
                reason: "missing trace header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |reason: String| BoError::TraceParse { line: i + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields, got {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("'{s}' is not an integer")));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("'{s}' is not a number")));
            Ok(TraceRecord {
                iter: int(f[0])?,
                pixel: Pixel::new(int(f[1])?, int(f[2])?),
                raw_value: num(f[3])?,
                xhat: Pixel::new(int(f[4])?, int(f[5])?),
                distance: num(f[6])?,
                ratio: num(f[7])?,
            })
        })
        .collect()
}

/// Distance and ratio series for a sequence of sampled pixels, with x̂ the
/// best raw value seen so far (earliest row-major pixel on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub xhat: Vec<Pixel>,
    pub distance: Vec<f64>,
    pub ratio: Vec<f64>,
}

pub fn best_observed_metrics(samples: &[Pixel], image: &Image) -> Metrics {
    let (star, y_star) = image.raw_argmax().expect("image has observed pixels");
    let raw = image.raw_values();
    let mut best: Option<(Pixel, f64)> = None;
    let mut out = Metrics {
        xhat: Vec::with_capacity(samples.len()),
        distance: Vec::with_capacity(samples.len()),
        ratio: Vec::with_capacity(samples.len()),
    };
    for p in samples {
        let v = raw[image.index(*p)];
        let better = match best {
            None => true,
            Some((bp, bv)) => v > bv || (v == bv && *p < bp),
        };
        if better {
            best = Some((*p, v));
        }
        let (xhat, yhat) = best.unwrap();
        out.xhat.push(xhat);
        out.distance.push(xhat.distance(&star));
        out.ratio.push(yhat / y_star);
    }
    out
}

/// Recomputes the metric series of a trace from its sampled pixels.
pub fn evaluate(trace: &BoTrace, image: &Image) -> (Vec<f64>, Vec<f64>) {
    let pixels: Vec<Pixel> = trace.records.iter().map(|r| r.pixel).collect();
    let m = best_observed_metrics(&pixels, image);
    (m.distance, m.ratio)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Full BO run: `n_init` uniform seeds, then `n_iters` UCB steps.
pub fn run_bo(
    image: &Image,
    prior: Option<&HyperPrior>,
    cfg: &BoConfig,
    kind: KernelKind,
) -> Result<BoTrace, BoError> {
    if !image.is_normalized() {
        return Err(BoError::NotNormalized(image.id.clone()));
    }
    let observed = image.observed_pixels();
    if observed.len() < cfg.n_init.max(1) {
        return Err(BoError::NotEnoughPixels {
            available: observed.len(),
            required: cfg.n_init.max(1),
        });
    }
    let scale = cfg.fit.pixel_scale;
    let (true_max, true_max_value) = image.raw_argmax().expect("nonempty");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = BoState::new(image);

    let observe = |state: &mut BoState, rng: &mut ChaCha8Rng, p: Pixel| {
        let y = image.values[image.index(p)] + cfg.sample_noise_std * standard_normal(rng);
        state.observe(image, p, y, scale);
    };

    for i in index::sample(&mut rng, observed.len(), cfg.n_init).into_iter() {
        observe(&mut state, &mut rng, observed[i]);
    }
    let mut posterior_xhat: Vec<Option<Pixel>> = vec![None; cfg.n_init];
    let mut truncated = false;
    for it in 0..cfg.n_iters {
        let step_seed = derive_seed(cfg.rng_seed, 1 + it as u64);
        let step = match bo_step(image, &state, prior, cfg, kind, step_seed) {
            Ok(s) => s,
            Err(BoError::NoCandidates) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        observe(&mut state, &mut rng, step.next);
        if cfg.estimator == MaximiserEstimate::PosteriorMean {
            let gp = FittedGp::fit(&state.data, &step.fit.model, cfg.fit.jitter)?;
            let mean = gp.posterior(&state.data.locations).mean;
            let best = first_argmax(&mean).expect("data nonempty");
            posterior_xhat.push(Some(state.pixels[best]));
        } else {
            posterior_xhat.push(None);
        }
    }

    let metrics = best_observed_metrics(&state.pixels, image);
    let raw = image.raw_values();
    let records = state
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (xhat, distance, ratio) = match posterior_xhat[i] {
                Some(x) => (x, x.distance(&true_max), raw[image.index(x)] / true_max_value),
                None => (metrics.xhat[i], metrics.distance[i], metrics.ratio[i]),
            };
            TraceRecord {
                iter: i,
                pixel: p,
                raw_value: raw[image.index(p)],
                xhat,
                distance,
                ratio,
            }
        })
        .collect();
    Ok(BoTrace {
        records,
        true_max,
        true_max_value,
        truncated,
    })
}

/// Per-sample metrics averaged over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrace {
    pub distance: Vec<f64>,
    pub ratio: Vec<f64>,
    pub n_repeats: usize,
}

impl MeanTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MEAN_TRACE_HEADER);
        out.push('\n');
        for (i, (d, r)) in self.distance.iter().zip(&self.ratio).enumerate() {
            writeln!(out, "{i},{},{}", fmt_f64(*d), fmt_f64(*r)).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<MeanTrace, BoError> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, h)| h) != Some(MEAN_TRACE_HEADER) {
            return Err(BoError::TraceParse {
                line: 1,
                reason: "missing mean-trace header".into(),
            });
        }
        let mut distance = vec![];
        let mut ratio = vec![];
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[1].parse::<f64>().ok()?, f[2].parse::<f64>().ok()?)))
                .flatten();
            let Some((d, r)) = parsed else {
                return Err(BoError::TraceParse {
                    line: i + 1,
                    reason: format!("malformed row '{line}'"),
                });
            };
            distance.push(d);
            ratio.push(r);
        }
        Ok(MeanTrace {
            distance,
            ratio,
            n_repeats: 0,
        })
    }
}

/// Uniform sampling without replacement, repeated and averaged.
pub fn random_baseline(image: &Image, n_samples: usize, n_repeats: usize, seed: u64) -> MeanTrace {
    let observed = image.observed_pixels();
    assert!(!observed.is_empty(), "image has no observed pixels");
    assert!(n_repeats >= 1, "need at least one repeat");
    let n = n_samples.min(observed.len());
    let runs: Vec<Metrics> = (0..n_repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            let picks: Vec<Pixel> = index::sample(&mut rng, observed.len(), n)
                .into_iter()
                .map(|i| observed[i])
                .collect();
            best_observed_metrics(&picks, image)
        })
        .collect();
    // summed in repeat order so the mean does not depend on scheduling
    let mut distance = vec![0.0; n];
    let mut ratio = vec![0.0; n];
    for m in &runs {
        for i in 0..n {
            distance[i] += m.distance[i];
            ratio[i] += m.ratio[i];
        }
    }
    let k = n_repeats as f64;
    MeanTrace {
        distance: distance.into_iter().map(|v| v / k).collect(),
        ratio: ratio.into_iter().map(|v| v / k).collect(),
        n_repeats,
    }
}

/// Trailing mean over at most `window` values ending at each index.
pub fn running_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be positive");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        let len = (i + 1).min(window);
        // recompute periodically to stop drift from the running sum
        if i % 1024 == 1023 {
            sum = series[i + 1 - len..=i].iter().sum();
        }
        out.push(sum / len as f64);
    }
    out
}
