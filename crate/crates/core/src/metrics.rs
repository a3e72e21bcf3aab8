//! Image reconstruction metrics: PixCorr, SSIM, two-way identification in
//! feature space, and feature distances, plus a report type.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{dot, norm, pearson};
use crate::rng::{gaussian_vec_seeded, split_seed};

pub const DEFAULT_EVAL_SIDE: usize = 425;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config("ssim window must be odd and positive".into()));
        }
        if !(self.sigma > 0.0 && self.data_range > 0.0 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("ssim parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// `1 − corr(a, b)`, in `[0, 2]`.
    #[default]
    Correlation,
    /// `1 − cos(a, b)`, in `[0, 2]`.
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Both images are resized to this square side before PixCorr and SSIM.
    pub eval_side: usize,
    pub ssim: SsimParams,
    pub distance: DistanceKind,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            eval_side: DEFAULT_EVAL_SIDE,
            ssim: SsimParams::default(),
            distance: DistanceKind::Correlation,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if self.eval_side < self.ssim.window {
            return Err(Error::Config(format!(
                "eval_side {} smaller than the ssim window",
                self.eval_side
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("metric config serialises");
        hex::encode(Sha256::digest(json))
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pearson correlation over all pixel values, no resizing.
pub fn pixcorr_raw(recon: &Image, gt: &Image) -> Result<f64> {
    check_shapes(recon, gt)?;
    pearson(&recon.data, &gt.data).ok_or(Error::ZeroVariance("pixcorr"))
}

pub fn pixcorr(recon: &Image, gt: &Image, eval_side: usize) -> Result<f64> {
    pixcorr_raw(
        &recon.resize_bilinear(eval_side, eval_side),
        &gt.resize_bilinear(eval_side, eval_side),
    )
}

/// Valid-mode separable filtering of a single-channel `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = dot(&src[x..x + k], taps);
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (i, &t) in taps.iter().enumerate() {
        for y in 0..oh {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += t * s;
            }
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over every valid window position of two same-size images,
/// computed on their grayscale versions.
pub fn ssim_raw(recon: &Image, gt: &Image, params: &SsimParams) -> Result<f64> {
    check_shapes(recon, gt)?;
    params.validate()?;
    if recon.height < params.window || recon.width < params.window {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {}-pixel ssim window",
            recon.height, recon.width, params.window
        )));
    }
    let (h, w) = (recon.height, recon.width);
    let a = recon.to_grayscale().data;
    let b = gt.to_grayscale().data;
    let taps = params.taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, ..) = filter_valid(&a, h, w, &taps);
    let (mu_b, ..) = filter_valid(&b, h, w, &taps);
    let (e_aa, ..) = filter_valid(&prod(&a, &a), h, w, &taps);
    let (e_bb, ..) = filter_valid(&prod(&b, &b), h, w, &taps);
    let (e_ab, ..) = filter_valid(&prod(&a, &b), h, w, &taps);
    let (c1, c2) = (params.c1(), params.c2());
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn ssim(recon: &Image, gt: &Image, eval_side: usize, params: &SsimParams) -> Result<f64> {
    ssim_raw(
        &recon.resize_bilinear(eval_side, eval_side),
        &gt.resize_bilinear(eval_side, eval_side),
        params,
    )
}

fn check_feature_sets(recon: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<()> {
    if recon.len() != gt.len() {
        return Err(Error::dims("feature rows", gt.len(), recon.len()));
    }
    if recon.is_empty() {
        return Err(Error::EmptyDataset("feature set"));
    }
    let d = gt[0].len();
    if let Some(bad) = recon.iter().chain(gt).find(|r| r.len() != d) {
        return Err(Error::dims("feature width", d, bad.len()));
    }
    Ok(())
}

/// Percentage of ordered pairs `(i, j)`, `i ≠ j`, for which reconstruction
/// `i` correlates more with its own ground truth than with ground truth `j`.
pub fn two_way_identification(recon: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_feature_sets(recon, gt)?;
    let n = recon.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "two-way identification needs at least 2 rows".into(),
        ));
    }
    let standardise = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / r.len() as f64;
                let c: Vec<f64> = r.iter().map(|v| v - m).collect();
                let s = norm(&c);
                if !(s > 1e-12 * norm(r)) {
                    return Err(Error::ZeroVariance("feature row"));
                }
                Ok(c.into_iter().map(|v| v / s).collect())
            })
            .collect()
    };
    let r = standardise(recon)?;
    let g = standardise(gt)?;
    let mut wins = 0usize;
    for i in 0..n {
        let own = dot(&r[i], &g[i]);
        wins += (0..n)
            .filter(|&j| j != i && own > dot(&r[i], &g[j]))
            .count();
    }
    Ok(100.0 * wins as f64 / (n * (n - 1)) as f64)
}

pub fn row_distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    match kind {
        DistanceKind::Correlation => pearson(a, b)
            .map(|c| 1.0 - c)
            .ok_or(Error::ZeroVariance("feature row")),
        DistanceKind::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if !(na > 0.0 && nb > 0.0) {
                return Err(Error::ZeroVariance("feature row"));
            }
            Ok(1.0 - (dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
        }
        DistanceKind::Euclidean => {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            Ok(norm(&d))
        }
    }
}

/// Mean per-row distance between aligned feature sets.
pub fn feature_distance(recon: &[Vec<f64>], gt: &[Vec<f64>], kind: DistanceKind) -> Result<f64> {
    check_feature_sets(recon, gt)?;
    let mut total = 0.0;
    for (a, b) in recon.iter().zip(gt) {
        total += row_distance(a, b, kind)?;
    }
    Ok(total / recon.len() as f64)
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Seeded random-projection features of a downsampled image, optionally
/// passed through `tanh`. Stands in for a pretrained network layer.
#[derive(Debug, Clone)]
pub struct RandomProjectionExtractor {
    name: String,
    side: usize,
    dim: usize,
    nonlinear: bool,
    weights: Vec<f64>,
}

impl RandomProjectionExtractor {
    pub fn new(name: &str, side: usize, dim: usize, nonlinear: bool, seed: u64) -> Self {
        let input = side * side * 3;
        let scale = 1.0 / (input as f64).sqrt();
        let weights =
            gaussian_vec_seeded(split_seed(seed, &format!("extractor/{name}")), dim * input)
                .into_iter()
                .map(|w| w * scale)
                .collect();
        Self {
            name: name.to_string(),
            side,
            dim,
            nonlinear,
            weights,
        }
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels != 3 {
            return Err(Error::Image(format!(
                "{} expects RGB input, got {} channels",
                self.name, image.channels
            )));
        }
        let x: Vec<f64> = image
            .resize_bilinear(self.side, self.side)
            .data
            .into_iter()
            .map(|v| v - 0.5)
            .collect();
        let input = x.len();
        Ok((0..self.dim)
            .map(|k| {
                let v = dot(&self.weights[k * input..(k + 1) * input], &x);
                if self.nonlinear {
                    (2.0 * v).tanh()
                } else {
                    v
                }
            })
            .collect())
    }
}

pub const TWOWAY_ROLES: [&str; 4] = ["alex2", "alex5", "incep", "clip"];
pub const DISTANCE_ROLES: [&str; 2] = ["eff", "swav"];

/// One extractor per report column.
pub struct ExtractorSet {
    pub twoway: Vec<Box<dyn FeatureExtractor>>,
    pub distance: Vec<Box<dyn FeatureExtractor>>,
}

impl ExtractorSet {
    pub fn reference(seed: u64) -> Self {
        let p = |name, side, dim, nonlinear| -> Box<dyn FeatureExtractor> {
            Box::new(RandomProjectionExtractor::new(
                name, side, dim, nonlinear, seed,
            ))
        };
        Self {
            twoway: vec![
                p("alex2", 32, 256, false),
                p("alex5", 16, 128, true),
                p("incep", 12, 128, true),
                p("clip", 8, 64, true),
            ],
            distance: vec![p("eff", 12, 96, true), p("swav", 20, 96, true)],
        }
    }

    fn all(&self) -> impl Iterator<Item = &dyn FeatureExtractor> {
        self.twoway.iter().chain(&self.distance).map(|b| b.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixcorr: f64,
    pub ssim: f64,
    /// Percentages keyed by extractor name.
    pub twoway: BTreeMap<String, f64>,
    pub dist: BTreeMap<String, f64>,
    pub n_pairs: usize,
    pub config_digest: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let ok = self.pixcorr.is_finite()
            && (-1.0..=1.0).contains(&self.ssim)
            && self.twoway.values().all(|p| (0.0..=100.0).contains(p))
            && self.dist.values().all(|d| d.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "metric report out of range: {self:?}"
            )))
        }
    }

    /// Column values in display order: PixCorr, SSIM, two-way rates, distances.
    fn cells(&self) -> Vec<String> {
        let mut out = vec![format!("{:.3}", self.pixcorr), format!("{:.3}", self.ssim)];
        out.extend(display_order(&self.twoway, &TWOWAY_ROLES).map(|(_, p)| format!("{p:.1}%")));
        out.extend(display_order(&self.dist, &DISTANCE_ROLES).map(|(_, d)| format!("{d:.3}")));
        out
    }
}

/// Evaluates aligned reconstruction and ground-truth sets.
pub fn evaluate(
    recon: &[Image],
    gt: &[Image],
    extractors: &ExtractorSet,
    config: &MetricConfig,
) -> Result<MetricReport> {
    config.validate()?;
    if recon.len() != gt.len() {
        return Err(Error::dims("evaluation set", gt.len(), recon.len()));
    }
    if recon.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let per_pair: Vec<(f64, f64)> = recon
        .par_iter()
        .zip(gt.par_iter())
        .map(|(r, g)| {
            let side = config.eval_side;
            let (r, g) = (r.resize_bilinear(side, side), g.resize_bilinear(side, side));
            Ok((pixcorr_raw(&r, &g)?, ssim_raw(&r, &g, &config.ssim)?))
        })
        .collect::<Result<_>>()?;
    let n = per_pair.len() as f64;
    let pixcorr = per_pair.iter().map(|p| p.0).sum::<f64>() / n;
    let ssim = per_pair.iter().map(|p| p.1).sum::<f64>() / n;

    let feats = |ex: &dyn FeatureExtractor, set: &[Image]| -> Result<Vec<Vec<f64>>> {
        set.par_iter().map(|im| ex.features(im)).collect()
    };
    let mut twoway = BTreeMap::new();
    for ex in &extractors.twoway {
        let v = two_way_identification(&feats(ex.as_ref(), recon)?, &feats(ex.as_ref(), gt)?)?;
        twoway.insert(ex.name().to_string(), v);
    }
    let mut dist = BTreeMap::new();
    for ex in &extractors.distance {
        let v = feature_distance(
            &feats(ex.as_ref(), recon)?,
            &feats(ex.as_ref(), gt)?,
            config.distance,
        )?;
        dist.insert(ex.name().to_string(), v);
    }
    let names: Vec<&str> = extractors.all().map(|e| e.name()).collect();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(Error::Config("duplicate extractor names".into()));
    }
    Ok(MetricReport {
        pixcorr,
        ssim,
        twoway,
        dist,
        n_pairs: recon.len(),
        config_digest: config.digest(),
    })
}

/// Full-scale reference results for the three-level configuration.
const REFERENCE_JSON: &str = r#"{
  "pixcorr": 0.342, "ssim": 0.365,
  "twoway": {"alex2": 94.7, "alex5": 97.0, "incep": 94.0, "clip": 95.2},
  "dist": {"eff": 0.651, "swav": 0.357},
  "n_pairs": 982, "config_digest": "reference"
}"#;

pub fn reference_report() -> MetricReport {
    serde_json::from_str(REFERENCE_JSON).expect("reference row parses")
}

/// Known roles first in their usual column order, then any others by name.
fn display_order<'a>(
    map: &'a BTreeMap<String, f64>,
    roles: &[&str],
) -> impl Iterator<Item = (&'a str, f64)> {
    let mut entries: Vec<(&str, f64)> = map.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    entries.sort_by_key(|(k, _)| (roles.iter().position(|r| r == k).unwrap_or(roles.len()), *k));
    entries.into_iter()
}

fn header(report: &MetricReport) -> Vec<String> {
    let mut h = vec!["PixCorr".to_string(), "SSIM".to_string()];
    h.extend(display_order(&report.twoway, &TWOWAY_ROLES).map(|(k, _)| k.to_string()));
    h.extend(display_order(&report.dist, &DISTANCE_ROLES).map(|(k, _)| k.to_string()));
    h
}

/// Plain-text table with one row per labelled report and a reference
/// footer.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let reference = reference_report();
    let head = rows
        .first()
        .map(|(_, r)| header(r))
        .unwrap_or_else(|| header(&reference));
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([9])
        .max()
        .unwrap_or(9);
    let mut out = String::new();
    let line = |out: &mut String, label: &str, cells: &[String]| {
        let _ = write!(out, "{label:<label_w$}");
        for c in cells {
            let _ = write!(out, " {c:>8}");
        }
        out.push('\n');
    };
    line(&mut out, "", &head);
    for (label, r) in rows {
        line(&mut out, label, &r.cells());
    }
    line(&mut out, "reference", &reference.cells());
    out
}
