//! Concentration images: grid I/O, filtering, subset construction,
//! log-normalisation and synthetic plume generation.
//!
//! Grid files are plain CSV with one line per image row, `NaN` for a missing
//! pixel, and optional `# key: value` header lines (`id`, `pixel_size`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::format::fmt_f64;
use crate::gp::{Dataset, ModelSpec};
use crate::kernels::{gram_matrix, Location};

/// Main subset size under the full protocol.
pub const SUBSET_SIZE: usize = 50;
/// Tuning subset size under the full protocol.
pub const TUNE_SIZE: usize = 10;
/// Upper bound on the Selection subset under the full protocol.
pub const SELECTION_SIZE: usize = 100;
/// Selection takes every `SELECTION_STRIDE`-th remaining image.
pub const SELECTION_STRIDE: usize = 9;
/// Below this many images the subset sizes shrink proportionally.
pub const FULL_PROTOCOL_MIN: usize = 280;
/// Smallest corpus the scaled protocol accepts.
pub const SCALED_PROTOCOL_MIN: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse '{token}' at row {row}, column {col}")]
    Parse { row: usize, col: usize, token: String },
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("bad header line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("grid file contains no data rows")]
    Empty,
    #[error("{found} images available, at least {required} needed")]
    InsufficientImages { found: usize, required: usize },
    #[error("normalisation needs at least 2 observed pixels, found {0}")]
    TooFewPixels(usize),
    #[error("log concentrations have zero spread (mean {mean})")]
    DegenerateStats { mean: f64 },
}

/// Row/column index into an image grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }

    /// Coordinates `[x, y] = [col, row] · scale`.
    pub fn location(&self, scale: f64) -> Location {
        [self.col as f64 * scale, self.row as f64 * scale]
    }

    /// Euclidean distance in pixel units.
    pub fn distance(&self, other: &Pixel) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// A rectangular grid of concentrations with a missing-value mask.
///
/// After [`normalize`], `values` hold normalised log concentrations and
/// `raw` keeps the original concentrations for metric computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major; NaN where missing.
    pub values: Vec<f64>,
    /// Row-major; `true` where missing.
    pub missing: Vec<bool>,
    pub raw: Option<Vec<f64>>,
    pub pixel_size: Option<f64>,
}

impl Image {
    /// Builds an image; non-finite cells become missing.
    pub fn new(id: impl Into<String>, width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "grid size mismatch");
        let missing: Vec<bool> = values.iter().map(|v| !v.is_finite()).collect();
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() { v } else { f64::NAN })
            .collect();
        Image {
            id: id.into(),
            width,
            height,
            values,
            missing,
            raw: None,
            pixel_size: None,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: Pixel) -> usize {
        p.row * self.width + p.col
    }

    pub fn pixel(&self, index: usize) -> Pixel {
        Pixel::new(index / self.width, index % self.width)
    }

    pub fn get(&self, p: Pixel) -> Option<f64> {
        let i = self.index(p);
        (!self.missing[i]).then(|| self.values[i])
    }

    /// Untransformed concentration at `p`.
    pub fn raw_value(&self, p: Pixel) -> Option<f64> {
        let i = self.index(p);
        (!self.missing[i]).then(|| self.raw_values()[i])
    }

    /// Original concentrations: `raw` when normalised, `values` otherwise.
    pub fn raw_values(&self) -> &[f64] {
        self.raw.as_deref().unwrap_or(&self.values)
    }

    pub fn is_normalized(&self) -> bool {
        self.raw.is_some()
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|m| **m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.n_missing() as f64 / self.len() as f64
    }

    /// Non-missing pixels in row-major order.
    pub fn observed_pixels(&self) -> Vec<Pixel> {
        (0..self.len())
            .filter(|&i| !self.missing[i])
            .map(|i| self.pixel(i))
            .collect()
    }

    /// Location and value of the largest raw concentration; first in
    /// row-major order on ties.
    pub fn raw_argmax(&self) -> Option<(Pixel, f64)> {
        let raw = self.raw_values();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.len() {
            if self.missing[i] {
                continue;
            }
            if best.is_none_or(|(_, b)| raw[i] > b) {
                best = Some((i, raw[i]));
            }
        }
        best.map(|(i, v)| (self.pixel(i), v))
    }

    pub fn max_raw(&self) -> Option<f64> {
        self.raw_argmax().map(|(_, v)| v)
    }

    /// Every observed pixel as a GP dataset of its current `values`.
    pub fn to_dataset(&self, scale: f64) -> Dataset {
        let pixels = self.observed_pixels();
        let locs = pixels.iter().map(|p| p.location(scale)).collect();
        let vals = pixels.iter().map(|p| self.values[self.index(*p)]).collect();
        Dataset::new(locs, vals).expect("equal lengths by construction")
    }
}

/// Result of parsing a grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedImage {
    pub image: Image,
    /// Cells that parsed but were non-positive or infinite and became missing.
    pub n_invalid: usize,
}

/// Parses grid text. `default_id` is used when no `# id:` header is present.
pub fn parse_image(text: &str, default_id: &str) -> Result<ParsedImage, DataError> {
    let mut id = default_id.to_string();
    let mut pixel_size = None;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    let mut n_invalid = 0;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let Some((key, value)) = header.split_once(':') else {
                continue;
            };
            match key.trim() {
                "id" => id = value.trim().to_string(),
                "pixel_size" => {
                    let v: f64 = value.trim().parse().map_err(|_| DataError::Header {
                        line: lineno + 1,
                        reason: format!("pixel_size '{}' is not a number", value.trim()),
                    })?;
                    pixel_size = Some(v);
                }
                _ => {}
            }
            continue;
        }
        let row = height;
        let mut count = 0;
        for (col, token) in line.split(',').enumerate() {
            let token = token.trim();
            count += 1;
            let v = if token.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                let v: f64 = token.parse().map_err(|_| DataError::Parse {
                    row,
                    col,
                    token: token.to_string(),
                })?;
                if v > 0.0 && v.is_finite() {
                    v
                } else {
                    n_invalid += 1;
                    f64::NAN
                }
            };
            values.push(v);
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(DataError::Ragged {
                    row,
                    expected: w,
                    found: count,
                })
            }
            _ => {}
        }
        height += 1;
    }
    let width = width.ok_or(DataError::Empty)?;
    let mut image = Image::new(id, width, height, values);
    image.pixel_size = pixel_size;
    Ok(ParsedImage { image, n_invalid })
}

pub fn load_image(path: &Path) -> Result<Image, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parsed = parse_image(&text, &stem)?;
    if parsed.n_invalid > 0 {
        log::warn!(
            "{}: {} non-positive or non-finite cells marked missing",
            path.display(),
            parsed.n_invalid
        );
    }
    Ok(parsed.image)
}

/// Canonical text form of an image's `values`.
pub fn format_image(image: &Image) -> String {
    let mut out = String::new();
    writeln!(out, "# id: {}", image.id).unwrap();
    if let Some(ps) = image.pixel_size {
        writeln!(out, "# pixel_size: {}", fmt_f64(ps)).unwrap();
    }
    for r in 0..image.height {
        for c in 0..image.width {
            if c > 0 {
                out.push(',');
            }
            let i = r * image.width + c;
            if image.missing[i] {
                out.push_str("NaN");
            } else {
                out.push_str(&fmt_f64(image.values[i]));
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_image(image: &Image, path: &Path) -> Result<(), DataError> {
    fs::write(path, format_image(image)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Keeps images whose missing fraction is at most `threshold`.
pub fn filter_missing(images: Vec<Image>, threshold: f64) -> Vec<Image> {
    assert!((0.0..=1.0).contains(&threshold), "threshold must lie in [0, 1]");
    images
        .into_iter()
        .filter(|im| im.n_missing() as f64 <= threshold * im.len() as f64)
        .collect()
}

/// Image ids per subset, each in rank order (highest maximum first).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubsetBundle {
    pub strong: Vec<String>,
    pub median: Vec<String>,
    pub weak: Vec<String>,
    pub strong_tune: Vec<String>,
    pub median_tune: Vec<String>,
    pub weak_tune: Vec<String>,
    pub selection: Vec<String>,
    /// Sizes were shrunk because fewer than [`FULL_PROTOCOL_MIN`] images exist.
    pub scaled: bool,
}

impl SubsetBundle {
    pub const NAMES: [&'static str; 7] = [
        "strong",
        "median",
        "weak",
        "strong_tune",
        "median_tune",
        "weak_tune",
        "selection",
    ];

    pub fn subsets(&self) -> [(&'static str, &[String]); 7] {
        [
            ("strong", &self.strong),
            ("median", &self.median),
            ("weak", &self.weak),
            ("strong_tune", &self.strong_tune),
            ("median_tune", &self.median_tune),
            ("weak_tune", &self.weak_tune),
            ("selection", &self.selection),
        ]
    }
}

/// Subset sizes `(main, tune, selection cap)` for a corpus of `n` images.
pub fn protocol_sizes(n: usize) -> (usize, usize, usize) {
    if n >= FULL_PROTOCOL_MIN {
        (SUBSET_SIZE, TUNE_SIZE, SELECTION_SIZE)
    } else {
        (
            (SUBSET_SIZE * n / FULL_PROTOCOL_MIN).max(5),
            (TUNE_SIZE * n / FULL_PROTOCOL_MIN).max(2),
            (SELECTION_SIZE * n / FULL_PROTOCOL_MIN).max(1),
        )
    }
}

/// Ranks images by their largest observed concentration and carves out the
/// Strong/Median/Weak sets, their adjacent tuning sets, and Selection.
///
/// Ties in the maximum are broken by ascending id.
pub fn build_subsets(images: &[Image]) -> Result<SubsetBundle, DataError> {
    let n = images.len();
    if n < SCALED_PROTOCOL_MIN {
        return Err(DataError::InsufficientImages {
            found: n,
            required: SCALED_PROTOCOL_MIN,
        });
    }
    let mut ranked: Vec<(f64, &str)> = images
        .iter()
        .map(|im| (im.max_raw().unwrap_or(f64::NEG_INFINITY), im.id.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let ids: Vec<String> = ranked.iter().map(|(_, id)| id.to_string()).collect();

    let (main, tune, sel_cap) = protocol_sizes(n);
    let median_start = (n - main) / 2;
    let ranges = [
        0..main,
        median_start..median_start + main,
        n - main..n,
        main..main + tune,
        median_start + main..median_start + main + tune,
        n - main - tune..n - main,
    ];
    let mut used = vec![false; n];
    for r in &ranges {
        for i in r.clone() {
            if used[i] {
                return Err(DataError::InsufficientImages {
                    found: n,
                    required: SCALED_PROTOCOL_MIN,
                });
            }
            used[i] = true;
        }
    }
    let take = |r: &std::ops::Range<usize>| ids[r.clone()].to_vec();
    let remaining: Vec<&String> = ids.iter().zip(&used).filter(|(_, u)| !**u).map(|(id, _)| id).collect();
    let selection = remaining
        .iter()
        .step_by(SELECTION_STRIDE)
        .take(sel_cap)
        .map(|s| s.to_string())
        .collect();

    Ok(SubsetBundle {
        strong: take(&ranges[0]),
        median: take(&ranges[1]),
        weak: take(&ranges[2]),
        strong_tune: take(&ranges[3]),
        median_tune: take(&ranges[4]),
        weak_tune: take(&ranges[5]),
        selection,
        scaled: n < FULL_PROTOCOL_MIN,
    })
}

/// Pooled mean and population standard deviation of log concentrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn forward(&self, raw: f64) -> f64 {
        (raw.ln() - self.mean) / self.std
    }

    pub fn inverse(&self, normalized: f64) -> f64 {
        (normalized * self.std + self.mean).exp()
    }
}

pub fn compute_norm_stats(images: &[Image]) -> Result<NormStats, DataError> {
    let mut logs: Vec<f64> = images
        .iter()
        .flat_map(|im| {
            let raw = im.raw_values();
            (0..im.len()).filter(|&i| !im.missing[i]).map(move |i| raw[i].ln())
        })
        .collect();
    if logs.len() < 2 {
        return Err(DataError::TooFewPixels(logs.len()));
    }
    // sorted accumulation keeps the result independent of image order
    logs.sort_by(f64::total_cmp);
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std <= 0.0 {
        return Err(DataError::DegenerateStats { mean });
    }
    Ok(NormStats { mean, std })
}

/// Log-transforms and standardises observed pixels; raw values are kept.
pub fn normalize(image: &Image, stats: &NormStats) -> Image {
    let raw = image.raw_values().to_vec();
    let values = raw
        .iter()
        .zip(&image.missing)
        .map(|(&v, &m)| if m { f64::NAN } else { stats.forward(v) })
        .collect();
    Image {
        values,
        raw: Some(raw),
        ..image.clone()
    }
}

/// Maps normalised values back to concentrations.
pub fn denormalize(image: &Image, stats: &NormStats) -> Image {
    let values = image
        .values
        .iter()
        .zip(&image.missing)
        .map(|(&v, &m)| if m { f64::NAN } else { stats.inverse(v) })
        .collect();
    Image {
        values,
        raw: None,
        ..image.clone()
    }
}

/// Parameters for synthetic plume images.
#[derive(Debug, Clone, PartialEq)]
pub struct PlumeConfig {
    pub width: usize,
    pub height: usize,
    /// Wind angle in radians, measured from the column axis towards the row axis.
    pub gamma: f64,
    pub n_sources: usize,
    /// Std of the multiplicative log-normal noise.
    pub noise_level: f64,
    /// Along-wind / cross-wind scale ratio; drawn from [3, 6] per source when `None`.
    pub anisotropy: Option<f64>,
    /// Cross-wind Gaussian scale in pixels; drawn from this range per source.
    pub cross_scale: (f64, f64),
    /// Peak amplitude above background; drawn from this range per source.
    pub amplitude: (f64, f64),
    pub background: f64,
}

impl PlumeConfig {
    pub fn new(width: usize, height: usize, gamma: f64, n_sources: usize, noise_level: f64) -> Self {
        PlumeConfig {
            width,
            height,
            gamma,
            n_sources,
            noise_level,
            anisotropy: None,
            cross_scale: (1.0, 2.0),
            amplitude: (5.0, 20.0),
            background: 1.0,
        }
    }
}

/// A source placed by [`synth_plume_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlumeSource {
    pub pixel: Pixel,
    pub amplitude: f64,
    pub cross_scale: f64,
    pub along_scale: f64,
}

/// Noise-free plume intensity above background at `(x, y)` for one source.
pub fn plume_excess(source: &PlumeSource, gamma: f64, x: f64, y: f64) -> f64 {
    let (s, c) = gamma.sin_cos();
    let dx = x - source.pixel.col as f64;
    let dy = y - source.pixel.row as f64;
    let along = dx * c + dy * s;
    let cross = -dx * s + dy * c;
    source.amplitude
        * (-0.5 * (along * along / (source.along_scale * source.along_scale)
            + cross * cross / (source.cross_scale * source.cross_scale)))
            .exp()
}

/// Background plus anisotropic Gaussian bumps elongated along the wind,
/// times log-normal noise. Returns the image and the sources placed.
pub fn synth_plume_with(cfg: &PlumeConfig, seed: u64) -> (Image, Vec<PlumeSource>) {
    assert!(cfg.width >= 8 && cfg.height >= 8, "plume images need at least 8x8 pixels");
    assert!(cfg.n_sources >= 1, "need at least one source");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let sources: Vec<PlumeSource> = (0..cfg.n_sources)
        .map(|_| {
            let pixel = Pixel::new(rng.gen_range(0..cfg.height), rng.gen_range(0..cfg.width));
            let amplitude = draw(&mut rng, cfg.amplitude);
            let cross_scale = draw(&mut rng, cfg.cross_scale);
            let ratio = cfg.anisotropy.unwrap_or_else(|| rng.gen_range(3.0..6.0));
            PlumeSource {
                pixel,
                amplitude,
                cross_scale,
                along_scale: cross_scale * ratio,
            }
        })
        .collect();
    let mut values = Vec::with_capacity(cfg.width * cfg.height);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let excess: f64 = sources
                .iter()
                .map(|s| plume_excess(s, cfg.gamma, c as f64, r as f64))
                .sum();
            let noise: f64 = rng.sample(StandardNormal);
            values.push((cfg.background + excess) * (cfg.noise_level * noise).exp());
        }
    }
    (Image::new(format!("plume_{seed}"), cfg.width, cfg.height, values), sources)
}

pub fn synth_plume(width: usize, height: usize, gamma: f64, n_sources: usize, noise_level: f64, seed: u64) -> Image {
    synth_plume_with(&PlumeConfig::new(width, height, gamma, n_sources, noise_level), seed).0
}

/// Draws one field from a zero-mean GP (noise included) on a pixel grid and
/// returns `exp(field)` so the image holds positive concentrations.
pub fn synth_gp_image(width: usize, height: usize, model: &ModelSpec, scale: f64, seed: u64) -> Image {
    let locs: Vec<Location> = (0..height)
        .flat_map(|r| (0..width).map(move |c| Pixel::new(r, c).location(scale)))
        .collect();
    let k = gram_matrix(&locs, &model.kernel, model.noise, crate::gp::DEFAULT_JITTER);
    let l = k
        .cholesky()
        .expect("noise-inflated Gram matrix is positive definite")
        .unpack();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = nalgebra::DVector::from_iterator(locs.len(), (0..locs.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let f = l * z;
    Image::new(format!("gp_{seed}"), width, height, f.iter().map(|v| v.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_with_max(id: &str, max: f64) -> Image {
        let mut v = vec![1.0; 64];
        v[10] = max;
        Image::new(id, 8, 8, v)
    }

    #[test]
    fn parse_marks_missing() {
        let p = parse_image("1.0,2.0\n3.0,NaN\n", "x").unwrap();
        assert_eq!((p.image.width, p.image.height), (2, 2));
        assert_eq!(p.image.n_missing(), 1);
        assert!(p.image.missing[3]);
        assert_eq!(p.image.id, "x");
    }

    #[test]
    fn parse_error_names_cell() {
        match parse_image("1.0,2.0\n3.0,abc\n", "x") {
            Err(DataError::Parse { row, col, token }) => {
                assert_eq!((row, col, token.as_str()), (1, 1, "abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_cells_become_missing() {
        let p = parse_image("# id: neg\n1.0,-2.0\n0.0,4.0\n", "x").unwrap();
        assert_eq!(p.n_invalid, 2);
        assert_eq!(p.image.n_missing(), 2);
        assert_eq!(p.image.id, "neg");
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matches!(
            parse_image("1,2,3\n4,5\n", "x"),
            Err(DataError::Ragged { row: 1, expected: 3, found: 2 })
        ));
        assert!(matches!(parse_image("# only header\n", "x"), Err(DataError::Empty)));
    }

    #[test]
    fn canonical_roundtrip_is_byte_exact() {
        let mut im = synth_plume(9, 8, 0.4, 2, 0.1, 3);
        im.missing[5] = true;
        im.values[5] = f64::NAN;
        im.pixel_size = Some(0.25);
        let text = format_image(&im);
        let back = parse_image(&text, "ignored").unwrap().image;
        assert_eq!(format_image(&back), text);
        assert_eq!(back.id, im.id);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let im = synth_plume(8, 8, 1.0, 1, 0.2, 9);
        save_image(&im, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        save_image(&load_image(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), text);
    }

    fn with_missing(n: usize) -> Image {
        let mut v = vec![1.0; 784];
        for x in v.iter_mut().take(n) {
            *x = f64::NAN;
        }
        Image::new(format!("m{n}"), 28, 28, v)
    }

    #[test]
    fn filter_threshold_boundary() {
        let kept = filter_missing(vec![with_missing(78), with_missing(79), with_missing(0)], 0.10);
        let ids: Vec<&str> = kept.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["m78", "m0"]);
        let again = filter_missing(kept.clone(), 0.10);
        assert_eq!(again.len(), kept.len());
    }

    fn corpus(n: usize) -> Vec<Image> {
        (0..n).map(|i| image_with_max(&format!("img_{i:04}"), 2.0 + i as f64)).collect()
    }

    #[test]
    fn full_protocol_subsets() {
        let images = corpus(1000);
        let b = build_subsets(&images).unwrap();
        assert!(!b.scaled);
        let mut expected: Vec<String> = (950..1000).rev().map(|i| format!("img_{i:04}")).collect();
        assert_eq!(b.strong, expected);
        expected = (940..950).rev().map(|i| format!("img_{i:04}")).collect();
        assert_eq!(b.strong_tune, expected);
        expected = (0..50).rev().map(|i| format!("img_{i:04}")).collect();
        assert_eq!(b.weak, expected);
        assert_eq!(b.weak_tune.len(), 10);
        assert_eq!(b.median.len(), 50);
        // ranks 476..=525 (1-based) hold maxima 524 down to 475
        assert_eq!(b.median[0], "img_0524");
        assert_eq!(b.median_tune[0], "img_0474");
        assert!(b.selection.len() <= SELECTION_SIZE && !b.selection.is_empty());

        let mut seen = std::collections::HashSet::new();
        for (_, ids) in b.subsets() {
            for id in ids {
                assert!(seen.insert(id.clone()), "{id} appears twice");
            }
        }
    }

    #[test]
    fn ties_broken_by_id() {
        let mut images: Vec<Image> = (0..60).map(|i| image_with_max(&format!("t{i:02}"), 5.0)).collect();
        let a = build_subsets(&images).unwrap();
        images.reverse();
        let b = build_subsets(&images).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.strong[0], "t00");
    }

    #[test]
    fn scaled_protocol_and_minimum() {
        let b = build_subsets(&corpus(40)).unwrap();
        assert!(b.scaled);
        assert_eq!((b.strong.len(), b.strong_tune.len()), (7, 2));
        assert_eq!(protocol_sizes(30), (5, 2, 10));
        assert!(matches!(
            build_subsets(&corpus(29)),
            Err(DataError::InsufficientImages { found: 29, .. })
        ));
    }

    #[test]
    fn norm_stats_examples() {
        let e = std::f64::consts::E;
        let flat = Image::new("flat", 8, 8, vec![e; 64]);
        assert!(matches!(compute_norm_stats(&[flat]), Err(DataError::DegenerateStats { .. })));

        let pair = Image::new("pair", 2, 1, vec![1.0, e * e]);
        let s = compute_norm_stats(&[pair]).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-15 && (s.std - 1.0).abs() < 1e-15);

        let a = synth_plume(8, 8, 0.1, 1, 0.3, 1);
        let b = synth_plume(8, 8, 0.1, 2, 0.3, 2);
        let s1 = compute_norm_stats(&[a.clone(), b.clone()]).unwrap();
        let s2 = compute_norm_stats(&[b, a]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats { mean: 0.7, std: 1.3 };
        let im = Image::new("n", 2, 1, vec![0.7f64.exp(), 2.0f64.exp()]);
        let z = normalize(&im, &stats);
        assert!(z.values[0].abs() < 1e-15);
        assert!((z.values[1] - 1.0).abs() < 1e-15);
        assert!(z.is_normalized());

        let im = synth_plume(12, 10, 0.5, 3, 0.4, 4);
        let stats = compute_norm_stats(std::slice::from_ref(&im)).unwrap();
        let back = denormalize(&normalize(&im, &stats), &stats);
        for (a, b) in back.values.iter().zip(&im.values) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn normalized_pool_is_standard() {
        let images: Vec<Image> = (0..4).map(|s| synth_plume(10, 10, 0.3, 2, 0.5, s)).collect();
        let stats = compute_norm_stats(&images).unwrap();
        let pooled: Vec<f64> = images
            .iter()
            .flat_map(|im| normalize(im, &stats).values)
            .collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_noiseless_plume_peaks_at_source() {
        for seed in 0..20 {
            let (im, src) = synth_plume_with(&PlumeConfig::new(16, 12, 0.8, 1, 0.0), seed);
            assert_eq!(im.raw_argmax().unwrap().0, src[0].pixel);
            assert!(im.values.iter().all(|v| *v > 0.0));
        }
        assert_eq!(synth_plume(10, 10, 0.2, 3, 0.2, 5), synth_plume(10, 10, 0.2, 3, 0.2, 5));
    }

    #[test]
    fn half_level_contour_has_configured_anisotropy() {
        // Second moments of the half-maximum superlevel set of a Gaussian bump
        // are those of a filled ellipse, so sqrt(λ_max/λ_min) is the axis ratio.
        for &(gamma, ratio) in &[(0.5f64, 4.0f64), (2.0, 3.0), (1.2, 5.0)] {
            let mut cfg = PlumeConfig::new(96, 96, gamma, 1, 0.0);
            cfg.anisotropy = Some(ratio);
            cfg.cross_scale = (3.0, 3.0);
            let (im, src) = synth_plume_with(&cfg, 77);
            let src = PlumeSource {
                pixel: Pixel::new(48, 48),
                ..src[0]
            };
            let mut pts = vec![];
            for r in 0..im.height {
                for c in 0..im.width {
                    if plume_excess(&src, gamma, c as f64, r as f64) >= 0.5 * src.amplitude {
                        pts.push((c as f64, r as f64));
                    }
                }
            }
            let n = pts.len() as f64;
            let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for (x, y) in &pts {
                sxx += (x - mx).powi(2) / n;
                syy += (y - my).powi(2) / n;
                sxy += (x - mx) * (y - my) / n;
            }
            let tr = sxx + syy;
            let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
            let measured = ((tr + disc) / (tr - disc)).sqrt();
            assert!((measured / ratio - 1.0).abs() < 0.10, "{measured} vs {ratio}");
            // major axis aligned with the wind
            let major = 0.5 * (2.0 * sxy).atan2(sxx - syy);
            let diff = crate::kernels::canonical_angle(major - gamma);
            assert!(diff.min(std::f64::consts::PI - diff) < 0.05);
        }
    }

    proptest! {
        #[test]
        fn subsets_independent_of_input_order(seed in 0u64..1000) {
            let mut images = corpus(300);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..images.len()).rev() {
                images.swap(i, rand::Rng::gen_range(&mut rng, 0..=i));
            }
            prop_assert_eq!(build_subsets(&images).unwrap(), build_subsets(&corpus(300)).unwrap());
        }
    }
}
