//! Experiment driver behind the `windbo` binary: synthetic corpora, subset
//! manifests, prior tuning with BIC reports, and BO runs with summaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bo::{parse_trace_csv, random_baseline, run_bo, BoConfig, BoError, MaximiserEstimate, MeanTrace};
use crate::data::{
    build_subsets, compute_norm_stats, filter_missing, load_image, normalize, save_image, synth_plume_with, DataError,
    Image, NormStats, PlumeConfig, SubsetBundle,
};
use crate::format::{derive_seed, fmt_f64, fnv1a};
use crate::gp::DEFAULT_JITTER;
use crate::hyper::{bic, build_priors, FitOptions, HyperError, HyperPrior};
use crate::kernels::KernelKind;

/// File extension of grid images inside an image directory.
pub const IMAGE_EXT: &str = "csv";
pub const NORM_FILE: &str = "norm.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const WINDOW_FILE: &str = "concentration_window20.csv";
pub const TRACE_DIR: &str = "traces";
pub const RANDOM_METHOD: &str = "random";
/// Window of the concentration-ordered running averages.
pub const CONCENTRATION_WINDOW: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hyper(#[from] HyperError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error("manifest {0} lists no images")]
    EmptyManifest(PathBuf),
    #[error("image '{0}' is not in the image directory")]
    UnknownImage(String),
    #[error("every run failed")]
    AllRunsFailed,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(DataError::InsufficientImages { .. }) => 2,
            CliError::Hyper(HyperError::PriorConstructionFailure) => 3,
            CliError::AllRunsFailed => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary file so that readers never see partial output.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Every setting of an experiment, stored as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub image_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Directory holding the subset manifests.
    pub manifest_dir: PathBuf,
    /// Directory holding `norm.txt` and the prior files.
    pub prior_dir: PathBuf,
    pub subset: String,
    pub tune_subset: String,
    pub kernels: Vec<KernelKind>,
    pub use_priors: bool,
    pub bessel: bool,
    pub pixel_scale: f64,
    pub missing_threshold: f64,
    pub beta: f64,
    pub n_init: usize,
    pub n_iters: usize,
    pub n_restarts_per_iter: usize,
    pub n_tune_restarts: usize,
    pub n_random_repeats: usize,
    pub sample_noise_std: f64,
    pub estimator: MaximiserEstimate,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bo = BoConfig::default();
        ExperimentConfig {
            image_dir: PathBuf::from("images"),
            out_dir: PathBuf::from("out"),
            manifest_dir: PathBuf::from("out/manifests"),
            prior_dir: PathBuf::from("out/priors"),
            subset: "strong".into(),
            tune_subset: "strong_tune".into(),
            kernels: KernelKind::ALL.to_vec(),
            use_priors: true,
            bessel: true,
            pixel_scale: 1.0,
            missing_threshold: 0.10,
            beta: bo.beta,
            n_init: bo.n_init,
            n_iters: bo.n_iters,
            n_restarts_per_iter: bo.n_restarts_per_iter,
            n_tune_restarts: 100,
            n_random_repeats: 100,
            sample_noise_std: bo.sample_noise_std,
            estimator: bo.estimator,
            jitter: DEFAULT_JITTER,
            seed: 0,
        }
    }
}

fn estimator_name(e: MaximiserEstimate) -> &'static str {
    match e {
        MaximiserEstimate::BestObserved => "best_observed",
        MaximiserEstimate::PosteriorMean => "posterior_mean",
    }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 21] = [
        "image_dir",
        "out_dir",
        "manifest_dir",
        "prior_dir",
        "subset",
        "tune_subset",
        "kernels",
        "use_priors",
        "bessel",
        "pixel_scale",
        "missing_threshold",
        "beta",
        "n_init",
        "n_iters",
        "n_restarts_per_iter",
        "n_tune_restarts",
        "n_random_repeats",
        "sample_noise_std",
        "estimator",
        "jitter",
        "seed",
    ];

    /// Current value of `key` in its file representation.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Path| p.display().to_string();
        Some(match key {
            "image_dir" => path(&self.image_dir),
            "out_dir" => path(&self.out_dir),
            "manifest_dir" => path(&self.manifest_dir),
            "prior_dir" => path(&self.prior_dir),
            "subset" => self.subset.clone(),
            "tune_subset" => self.tune_subset.clone(),
            "kernels" => self.kernels.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            "use_priors" => self.use_priors.to_string(),
            "bessel" => self.bessel.to_string(),
            "pixel_scale" => self.pixel_scale.to_string(),
            "missing_threshold" => self.missing_threshold.to_string(),
            "beta" => self.beta.to_string(),
            "n_init" => self.n_init.to_string(),
            "n_iters" => self.n_iters.to_string(),
            "n_restarts_per_iter" => self.n_restarts_per_iter.to_string(),
            "n_tune_restarts" => self.n_tune_restarts.to_string(),
            "n_random_repeats" => self.n_random_repeats.to_string(),
            "sample_noise_std" => self.sample_noise_std.to_string(),
            "estimator" => estimator_name(self.estimator).into(),
            "jitter" => self.jitter.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let bad = |what: &str| CliError::Config(format!("{key}: '{value}' is not {what}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let flag = || value.parse::<bool>().map_err(|_| bad("true or false"));
        match key {
            "image_dir" => self.image_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "manifest_dir" => self.manifest_dir = value.into(),
            "prior_dir" => self.prior_dir = value.into(),
            "subset" => self.subset = value.into(),
            "tune_subset" => self.tune_subset = value.into(),
            "kernels" => {
                self.kernels = value
                    .split(',')
                    .map(|s| s.trim().parse::<KernelKind>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Config(format!("kernels: {e}")))?;
                if self.kernels.is_empty() {
                    return Err(bad("a kernel list"));
                }
            }
            "use_priors" => self.use_priors = flag()?,
            "bessel" => self.bessel = flag()?,
            "pixel_scale" => self.pixel_scale = float()?,
            "missing_threshold" => self.missing_threshold = float()?,
            "beta" => self.beta = float()?,
            "n_init" => self.n_init = count()?,
            "n_iters" => self.n_iters = count()?,
            "n_restarts_per_iter" => self.n_restarts_per_iter = count()?,
            "n_tune_restarts" => self.n_tune_restarts = count()?,
            "n_random_repeats" => self.n_random_repeats = count()?,
            "sample_noise_std" => self.sample_noise_std = float()?,
            "estimator" => {
                self.estimator = match value {
                    "best_observed" => MaximiserEstimate::BestObserved,
                    "posterior_mean" => MaximiserEstimate::PosteriorMean,
                    _ => return Err(bad("best_observed or posterior_mean")),
                }
            }
            "jitter" => self.jitter = float()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            _ => return Err(CliError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::parse(&read(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            if let Some(v) = self.get(key) {
                writeln!(out, "{key} = {v}").unwrap();
            }
        }
        out
    }

    pub fn bo_config(&self, rng_seed: u64) -> BoConfig {
        BoConfig {
            beta: self.beta,
            n_init: self.n_init,
            n_iters: self.n_iters,
            n_restarts_per_iter: self.n_restarts_per_iter,
            sample_noise_std: self.sample_noise_std,
            rng_seed,
            estimator: self.estimator,
            fit: self.fit_options(),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            jitter: self.jitter,
            pixel_scale: self.pixel_scale,
            ..FitOptions::default()
        }
    }

    pub fn manifest_path(&self, subset: &str) -> PathBuf {
        self.manifest_dir.join(format!("{subset}.txt"))
    }

    pub fn prior_path(&self, kind: KernelKind) -> PathBuf {
        self.prior_dir.join(format!("prior_{}.txt", kind.name()))
    }
}

/// Seed of one (image, method) task; independent of which other images exist.
pub fn task_seed(seed: u64, image_id: &str, method: &str) -> u64 {
    derive_seed(derive_seed(seed, fnv1a(image_id.as_bytes())), fnv1a(method.as_bytes()))
}

pub fn method_name(kind: KernelKind) -> String {
    kind.name().to_string()
}

pub fn trace_path(out_dir: &Path, image_id: &str, method: &str) -> PathBuf {
    out_dir.join(TRACE_DIR).join(format!("{image_id}__{method}.csv"))
}

/// Loads every `*.csv` grid in `dir`, sorted by file name. Unreadable files
/// are skipped with a warning.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == IMAGE_EXT))
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for p in paths {
        match load_image(&p) {
            Ok(im) => images.push(im),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(images)
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>, CliError> {
    let ids: Vec<String> = read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(CliError::EmptyManifest(path.to_path_buf()));
    }
    Ok(ids)
}

fn select_images(all: Vec<Image>, ids: &[String]) -> Result<Vec<Image>, CliError> {
    let mut by_id: HashMap<String, Image> = all.into_iter().map(|im| (im.id.clone(), im)).collect();
    ids.iter()
        .map(|id| by_id.remove(id).ok_or_else(|| CliError::UnknownImage(id.clone())))
        .collect()
}

pub fn format_norm_stats(stats: &NormStats) -> String {
    format!("mean {}\nstd {}\n", fmt_f64(stats.mean), fmt_f64(stats.std))
}

pub fn parse_norm_stats(text: &str) -> Result<NormStats, CliError> {
    let mut mean = None;
    let mut std = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let key = parts.next();
        let val = parts.next().and_then(|v| v.parse::<f64>().ok());
        match (key, val) {
            (Some("mean"), Some(v)) => mean = Some(v),
            (Some("std"), Some(v)) => std = Some(v),
            _ => return Err(CliError::Config(format!("malformed normalisation line '{line}'"))),
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) if std > 0.0 => Ok(NormStats { mean, std }),
        _ => Err(CliError::Config("normalisation file needs mean and a positive std".into())),
    }
}

/// Options of the `synth` command.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Wind angle shared by every image; drawn per image when `None`.
    pub gamma: Option<f64>,
    pub n_sources: usize,
    pub noise_level: f64,
    pub seed: u64,
}

/// Writes `count` synthetic plume images named `plume_0000.csv`, ...
pub fn cmd_synth(out_dir: &Path, opts: &SynthOptions) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let images: Vec<Image> = (0..opts.count)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(opts.seed, i as u64);
            let gamma = opts
                .gamma
                .unwrap_or_else(|| (derive_seed(seed, 0) >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::PI);
            let cfg = PlumeConfig::new(opts.width, opts.height, gamma, opts.n_sources, opts.noise_level);
            let (mut im, _) = synth_plume_with(&cfg, seed);
            im.id = format!("plume_{i:04}");
            im
        })
        .collect();
    let mut ids = Vec::with_capacity(images.len());
    for im in &images {
        save_image(im, &out_dir.join(format!("{}.{IMAGE_EXT}", im.id)))?;
        ids.push(im.id.clone());
    }
    Ok(ids)
}

/// Filters the corpus, builds the subsets and writes one manifest per subset.
pub fn cmd_subsets(image_dir: &Path, manifest_dir: &Path, missing_threshold: f64) -> Result<SubsetBundle, CliError> {
    let images = load_image_dir(image_dir)?;
    let found = images.len();
    let kept = filter_missing(images, missing_threshold);
    if kept.len() < found {
        log::info!("dropped {} images above the missing-value threshold", found - kept.len());
    }
    let bundle = build_subsets(&kept)?;
    if bundle.scaled {
        log::warn!("only {} usable images; subset sizes were scaled down", kept.len());
    }
    for (name, ids) in bundle.subsets() {
        let mut text = ids.join("\n");
        text.push('\n');
        write_atomic(&manifest_dir.join(format!("{name}.txt")), &text)?;
    }
    Ok(bundle)
}

/// Per-image BIC scores and pairwise differences from `cmd_tune`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub norm: NormStats,
    pub kernels: Vec<KernelKind>,
    /// `(image id, BIC per kernel in `kernels` order)`.
    pub bic: Vec<(String, Vec<f64>)>,
    /// `(label, mean, standard deviation of the mean, n)`.
    pub differences: Vec<(String, f64, f64, usize)>,
    pub degenerate: Vec<KernelKind>,
}

impl TuneReport {
    /// `Sum - RBF: 1.23 (0.45)` style lines: mean and standard deviation of the mean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (label, mean, sem, _) in &self.differences {
            writeln!(out, "{label}: {mean:.2} ({sem:.2})").unwrap();
        }
        out
    }
}

/// Mean and standard deviation of the mean (sample std over `sqrt(n)`);
/// the latter is NaN for fewer than two values.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn report_label(kind: KernelKind) -> &'static str {
    match kind {
        KernelKind::Rbf => "RBF",
        KernelKind::Sum => "Sum",
        KernelKind::Product => "Product",
    }
}

/// Kernel pairs in report order: Sum - Product, Sum - RBF, Product - RBF.
const DIFF_PAIRS: [(KernelKind, KernelKind); 3] = [
    (KernelKind::Sum, KernelKind::Product),
    (KernelKind::Sum, KernelKind::Rbf),
    (KernelKind::Product, KernelKind::Rbf),
];

/// Fits priors for every configured kernel on the tuning manifest and writes
/// `norm.txt`, `prior_<kernel>.txt`, `bic.csv` and `bic_differences.csv`.
pub fn cmd_tune(cfg: &ExperimentConfig) -> Result<TuneReport, CliError> {
    let ids = read_manifest(&cfg.manifest_path(&cfg.tune_subset))?;
    let raw = select_images(load_image_dir(&cfg.image_dir)?, &ids)?;
    let norm = compute_norm_stats(&raw)?;
    let images: Vec<Image> = raw.iter().map(|im| normalize(im, &norm)).collect();
    write_atomic(&cfg.prior_dir.join(NORM_FILE), &format_norm_stats(&norm))?;

    let opts = cfg.fit_options();
    let mut per_kernel: Vec<HashMap<String, f64>> = Vec::new();
    let mut degenerate = Vec::new();
    for &kind in &cfg.kernels {
        let build = build_priors(&images, kind, cfg.n_tune_restarts, cfg.bessel, task_seed(cfg.seed, "tune", kind.name()), &opts)?;
        if build.prior.degenerate {
            degenerate.push(kind);
        }
        write_atomic(&cfg.prior_path(kind), &build.prior.to_text())?;
        let by_image = build
            .fits
            .iter()
            .map(|(id, fit)| {
                let im = images.iter().find(|im| &im.id == id).expect("fitted image exists");
                (id.clone(), bic(&im.to_dataset(cfg.pixel_scale), fit).value)
            })
            .collect();
        per_kernel.push(by_image);
    }

    let bic_rows: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|id| {
            let row = per_kernel.iter().map(|m| m.get(id).copied().unwrap_or(f64::NAN)).collect();
            (id.clone(), row)
        })
        .collect();
    let mut csv = String::from("image_id");
    for k in &cfg.kernels {
        write!(csv, ",{}", method_name(*k)).unwrap();
    }
    csv.push('\n');
    for (id, row) in &bic_rows {
        csv.push_str(id);
        for v in row {
            write!(csv, ",{}", fmt_f64(*v)).unwrap();
        }
        csv.push('\n');
    }
    write_atomic(&cfg.prior_dir.join("bic.csv"), &csv)?;

    let mut differences = Vec::new();
    let col = |k: KernelKind| cfg.kernels.iter().position(|x| *x == k);
    for (a, b) in DIFF_PAIRS {
        let (Some(ia), Some(ib)) = (col(a), col(b)) else { continue };
        let diffs: Vec<f64> = bic_rows
            .iter()
            .map(|(_, r)| r[ia] - r[ib])
            .filter(|d| d.is_finite())
            .collect();
        let (mean, sem) = mean_sem(&diffs);
        differences.push((format!("{} - {}", report_label(a), report_label(b)), mean, sem, diffs.len()));
    }
    let mut dcsv = String::from("pair,mean,sem,n\n");
    for (label, mean, sem, n) in &differences {
        writeln!(dcsv, "{label},{},{},{n}", fmt_f64(*mean), fmt_f64(*sem)).unwrap();
    }
    write_atomic(&cfg.prior_dir.join("bic_differences.csv"), &dcsv)?;

    Ok(TuneReport {
        norm,
        kernels: cfg.kernels.clone(),
        bic: bic_rows,
        differences,
        degenerate,
    })
}

/// Outcome of `cmd_run`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub completed: Vec<String>,
    pub failed: Vec<String>,
    /// Traces reused from an earlier run.
    pub resumed: usize,
}

/// Per-sample metric series of one method on one image.
#[derive(Debug, Clone, PartialEq)]
struct Series {
    distance: Vec<f64>,
    ratio: Vec<f64>,
}

fn read_series(path: &Path, method: &str) -> Result<Series, CliError> {
    let text = read(path)?;
    if method == RANDOM_METHOD {
        let m = MeanTrace::parse_csv(&text)?;
        Ok(Series {
            distance: m.distance,
            ratio: m.ratio,
        })
    } else {
        let recs = parse_trace_csv(&text)?;
        Ok(Series {
            distance: recs.iter().map(|r| r.distance).collect(),
            ratio: recs.iter().map(|r| r.ratio).collect(),
        })
    }
}

/// Runs every configured kernel and the random baseline on each image of the
/// run manifest, then writes the summary files from the trace files on disk.
pub fn cmd_run(cfg: &ExperimentConfig, resume: bool) -> Result<RunReport, CliError> {
    let ids = read_manifest(&cfg.manifest_path(&cfg.subset))?;
    let raw = select_images(load_image_dir(&cfg.image_dir)?, &ids)?;
    let norm = parse_norm_stats(&read(&cfg.prior_dir.join(NORM_FILE))?)?;
    let mut priors: BTreeMap<String, HyperPrior> = BTreeMap::new();
    if cfg.use_priors {
        for &kind in &cfg.kernels {
            let prior = HyperPrior::parse(&read(&cfg.prior_path(kind))?)?;
            if prior.kind != kind {
                return Err(HyperError::KindMismatch {
                    expected: kind,
                    found: prior.kind,
                }
                .into());
            }
            priors.insert(method_name(kind), prior);
        }
    }
    fs::create_dir_all(cfg.out_dir.join(TRACE_DIR)).map_err(io_err(&cfg.out_dir))?;
    write_atomic(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_text())?;

    let images: Vec<Image> = raw.iter().map(|im| normalize(im, &norm)).collect();
    let mut methods: Vec<(String, Option<KernelKind>)> = cfg.kernels.iter().map(|k| (method_name(*k), Some(*k))).collect();
    methods.push((RANDOM_METHOD.to_string(), None));

    let tasks: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..methods.len()).map(move |m| (i, m)))
        .collect();
    let outcomes: Vec<Result<bool, CliError>> = tasks
        .par_iter()
        .map(|&(i, m)| {
            let image = &images[i];
            let (method, kind) = &methods[m];
            let path = trace_path(&cfg.out_dir, &image.id, method);
            if resume && read_series(&path, method).is_ok() {
                return Ok(true);
            }
            let seed = task_seed(cfg.seed, &image.id, method);
            let text = match kind {
                Some(kind) => {
                    let bo = cfg.bo_config(seed);
                    run_bo(image, priors.get(method), &bo, *kind)?.to_csv()
                }
                None => random_baseline(image, cfg.n_init + cfg.n_iters, cfg.n_random_repeats.max(1), seed).to_csv(),
            };
            write_atomic(&path, &text)?;
            Ok(false)
        })
        .collect();

    let mut completed = Vec::new();
    let mut failed = Vec::new();
    let mut resumed = 0;
    for (i, image) in images.iter().enumerate() {
        let mut ok = true;
        for (m, (method, _)) in methods.iter().enumerate() {
            match &outcomes[i * methods.len() + m] {
                Ok(reused) => resumed += usize::from(*reused),
                Err(e) => {
                    log::warn!("{} / {method} failed: {e}", image.id);
                    ok = false;
                }
            }
        }
        if ok {
            completed.push(image.id.clone());
        } else {
            failed.push(image.id.clone());
        }
    }
    if completed.is_empty() {
        return Err(CliError::AllRunsFailed);
    }

    let method_names: Vec<String> = methods.iter().map(|(m, _)| m.clone()).collect();
    let max_raw: HashMap<&str, f64> = images
        .iter()
        .map(|im| (im.id.as_str(), im.max_raw().unwrap_or(f64::NAN)))
        .collect();
    let (summary, window) = summarize(&cfg.out_dir, &completed, &method_names, &max_raw)?;
    write_atomic(&cfg.out_dir.join(SUMMARY_FILE), &summary)?;
    write_atomic(&cfg.out_dir.join(WINDOW_FILE), &window)?;
    Ok(RunReport {
        completed,
        failed,
        resumed,
    })
}

/// Builds the summary and concentration-window files from the traces on
/// disk. Returns `(summary.csv, concentration_window20.csv)` contents.
pub fn summarize(
    out_dir: &Path,
    image_ids: &[String],
    methods: &[String],
    max_raw: &HashMap<&str, f64>,
) -> Result<(String, String), CliError> {
    let mut summary = String::from("method,iter,n,distance_mean,distance_sem,ratio_mean,ratio_sem\n");
    let mut window = String::from("method,rank,image_id,max_concentration,distance,ratio,distance_avg,ratio_avg\n");

    let mut by_conc: Vec<&String> = image_ids.iter().collect();
    by_conc.sort_by(|a, b| max_raw[a.as_str()].total_cmp(&max_raw[b.as_str()]).then_with(|| a.cmp(b)));

    for method in methods {
        let series: HashMap<&str, Series> = image_ids
            .iter()
            .map(|id| Ok((id.as_str(), read_series(&trace_path(out_dir, id, method), method)?)))
            .collect::<Result<_, CliError>>()?;
        let len = series.values().map(|s| s.distance.len()).max().unwrap_or(0);
        for it in 0..len {
            let at = |f: fn(&Series) -> &Vec<f64>| -> Vec<f64> {
                image_ids
                    .iter()
                    .filter_map(|id| f(&series[id.as_str()]).get(it).copied())
                    .collect()
            };
            let d = at(|s| &s.distance);
            let r = at(|s| &s.ratio);
            let (dm, ds) = mean_sem(&d);
            let (rm, rs) = mean_sem(&r);
            writeln!(summary, "{method},{it},{},{},{},{},{}", d.len(), fmt_f64(dm), fmt_f64(ds), fmt_f64(rm), fmt_f64(rs)).unwrap();
        }

        let finals: Vec<(f64, f64)> = by_conc
            .iter()
            .map(|id| {
                let s = &series[id.as_str()];
                (
                    s.distance.last().copied().unwrap_or(f64::NAN),
                    s.ratio.last().copied().unwrap_or(f64::NAN),
                )
            })
            .collect();
        let d_avg = crate::bo::running_average(&finals.iter().map(|f| f.0).collect::<Vec<_>>(), CONCENTRATION_WINDOW);
        let r_avg = crate::bo::running_average(&finals.iter().map(|f| f.1).collect::<Vec<_>>(), CONCENTRATION_WINDOW);
        for (rank, id) in by_conc.iter().enumerate() {
            writeln!(
                window,
                "{method},{rank},{id},{},{},{},{},{}",
                fmt_f64(max_raw[id.as_str()]),
                fmt_f64(finals[rank].0),
                fmt_f64(finals[rank].1),
                fmt_f64(d_avg[rank]),
                fmt_f64(r_avg[rank])
            )
            .unwrap();
        }
    }
    Ok((summary, window))
}
