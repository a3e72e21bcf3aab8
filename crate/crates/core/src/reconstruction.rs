//! Composition of the three guidance levels and img2img generation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FmriRecord, RoiName};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{gaussian_vec_seeded, split_seed};
use crate::stream_high::{
    content_tokens, decode_captions, predict_h, refine_to_caption, CaptionRefiner, HighModel,
    TextCodec, DEFAULT_CAPTION_SAMPLES,
};
use crate::stream_low::{predict_l, LatentCodec, LowModel};
use crate::stream_mid::{predict_m, MidModel, PatchStatsEncoder};
use crate::EMBED_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GuidanceFlags {
    pub high: bool,
    pub mid: bool,
    pub low: bool,
}

impl GuidanceFlags {
    pub const ALL: GuidanceFlags = GuidanceFlags {
        high: true,
        mid: true,
        low: true,
    };

    pub fn any(&self) -> bool {
        self.high || self.mid || self.low
    }

    /// The seven non-empty subsets, single levels first and the full
    /// three-level configuration last.
    pub fn subsets() -> Vec<GuidanceFlags> {
        let f = |high, mid, low| GuidanceFlags { high, mid, low };
        vec![
            f(true, false, false),
            f(false, true, false),
            f(false, false, true),
            f(true, true, false),
            f(true, false, true),
            f(false, true, true),
            f(true, true, true),
        ]
    }
}

impl Default for GuidanceFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for GuidanceFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.high, "high"), (self.mid, "mid"), (self.low, "low")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for GuidanceFlags {
    type Err = Error;

    /// Parses comma- or plus-separated level names, e.g. `high,low`.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = GuidanceFlags {
            high: false,
            mid: false,
            low: false,
        };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "high" => flags.high = true,
                "mid" => flags.mid = true,
                "low" => flags.low = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown guidance level `{other}`"
                    )))
                }
            }
        }
        if !flags.any() {
            return Err(Error::InvalidArgument("no guidance level enabled".into()));
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub caption: Option<String>,
    pub embedding: Option<Vec<f64>>,
    pub layout: Option<Image>,
    pub flags: GuidanceFlags,
}

impl GuidanceBundle {
    pub fn validate(&self) -> Result<()> {
        if !self.flags.any() {
            return Err(Error::InvalidArgument("no guidance level enabled".into()));
        }
        if self.flags.high && self.caption.is_none() {
            return Err(Error::MissingGuidance("high"));
        }
        if self.flags.mid && self.embedding.is_none() {
            return Err(Error::MissingGuidance("mid"));
        }
        if self.flags.low && self.layout.is_none() {
            return Err(Error::MissingGuidance("low"));
        }
        Ok(())
    }
}

/// Keeps exactly the payloads of the enabled levels.
pub fn build_guidance(
    caption: Option<String>,
    embedding: Option<Vec<f64>>,
    layout: Option<Image>,
    flags: GuidanceFlags,
) -> Result<GuidanceBundle> {
    let bundle = GuidanceBundle {
        caption: caption.filter(|_| flags.high),
        embedding: embedding.filter(|_| flags.mid),
        layout: layout.filter(|_| flags.low),
        flags,
    };
    bundle.validate()?;
    if let Some(m) = &bundle.embedding {
        if m.len() != EMBED_LEN {
            return Err(Error::dims("image embedding", EMBED_LEN, m.len()));
        }
    }
    Ok(bundle)
}

pub fn decode_layout(l_pred: &[f64], codec: &dyn LatentCodec) -> Result<Image> {
    codec.decode(l_pred)
}

pub trait Generator: Send + Sync {
    fn generate(
        &self,
        bundle: &GuidanceBundle,
        strength: f64,
        steps: usize,
        seed: u64,
    ) -> Result<Image>;
}

/// Deterministic img2img stand-in. The starting image is the layout when
/// the low level is enabled and seeded noise otherwise; the result moves a
/// `strength` fraction of the way from it to a guidance field. The field
/// is the embedding decoded back to colour cells, the caption rendered as
/// a colour wash with token textures, a 0.7/0.3 blend of both, or the
/// blurred layout when low is the only level.
#[derive(Debug, Clone)]
pub struct CompositorGenerator {
    pub output_side: usize,
    seed: u64,
    cells: PatchStatsEncoder,
}

const TEXT_WEIGHT: f64 = 0.3;
const NOISE_SD: f64 = 0.25;

const COLOR_WORDS: [(&str, [f64; 3]); 11] = [
    ("red", [0.85, 0.2, 0.2]),
    ("green", [0.25, 0.7, 0.3]),
    ("blue", [0.2, 0.3, 0.85]),
    ("yellow", [0.9, 0.85, 0.25]),
    ("white", [0.92, 0.92, 0.92]),
    ("black", [0.1, 0.1, 0.1]),
    ("orange", [0.95, 0.55, 0.15]),
    ("purple", [0.55, 0.25, 0.65]),
    ("brown", [0.5, 0.32, 0.18]),
    ("gray", [0.5, 0.5, 0.5]),
    ("pink", [0.95, 0.6, 0.7]),
];

impl CompositorGenerator {
    /// `encoder_seed` must match the image encoder whose embeddings this
    /// generator will receive.
    pub fn new(seed: u64, encoder_seed: u64, output_side: usize) -> Result<Self> {
        if output_side == 0 {
            return Err(Error::Config(
                "generator output_side must be positive".into(),
            ));
        }
        Ok(Self {
            output_side,
            seed,
            cells: PatchStatsEncoder::new(encoder_seed),
        })
    }

    fn caption_field(&self, caption: &str) -> Image {
        let side = self.output_side;
        let tokens = content_tokens(caption);
        let colors: Vec<[f64; 3]> = tokens
            .iter()
            .filter_map(|t| COLOR_WORDS.iter().find(|(w, _)| w == t).map(|(_, c)| *c))
            .collect();
        let mut base = [0.5; 3];
        if !colors.is_empty() {
            for (c, b) in base.iter_mut().enumerate() {
                *b = colors.iter().map(|rgb| rgb[c]).sum::<f64>() / colors.len() as f64;
            }
        }
        let textures: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| gaussian_vec_seeded(split_seed(self.seed, &format!("texture/{t}")), 6))
            .collect();
        let mut img = Image::filled(side, side, 3, 0.0);
        for y in 0..side {
            for x in 0..side {
                let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
                for c in 0..3 {
                    let mut s = 0.5 + 0.5 * (base[c] - 0.5);
                    for t in &textures {
                        let arg = std::f64::consts::TAU * (t[0].abs() * u + t[1].abs() * v) + t[2];
                        s += 0.04 * t[3 + c] * arg.cos();
                    }
                    *img.at_mut(y, x, c) = s;
                }
            }
        }
        img
    }

    fn noise(&self, seed: u64) -> Image {
        let side = self.output_side;
        let data = gaussian_vec_seeded(split_seed(seed, "generator/noise"), side * side * 3)
            .into_iter()
            .map(|z| 0.5 + NOISE_SD * z)
            .collect();
        Image {
            height: side,
            width: side,
            channels: 3,
            data,
        }
    }
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        let (h, w) = (src.height, src.width);
        for y in 0..h {
            for x in 0..w {
                for c in 0..src.channels {
                    let mut s = 0.0;
                    let mut n = 0.0;
                    for d in -(radius as isize)..=radius as isize {
                        let (yy, xx) = if horizontal {
                            (y as isize, x as isize + d)
                        } else {
                            (y as isize + d, x as isize)
                        };
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += src.at(yy as usize, xx as usize, c);
                            n += 1.0;
                        }
                    }
                    *out.at_mut(y, x, c) = s / n;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn blend(a: &Image, b: &Image, wb: f64) -> Image {
    Image {
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| x + wb * (y - x))
            .collect(),
        ..a.clone()
    }
}

impl Generator for CompositorGenerator {
    fn generate(
        &self,
        bundle: &GuidanceBundle,
        strength: f64,
        _steps: usize,
        seed: u64,
    ) -> Result<Image> {
        bundle.validate()?;
        let side = self.output_side;
        let text = bundle
            .caption
            .as_deref()
            .filter(|_| bundle.flags.high)
            .map(|c| self.caption_field(c));
        let mid = match bundle.embedding.as_deref().filter(|_| bundle.flags.mid) {
            Some(m) => Some(self.cells.decode_cells(m)?.resize_bilinear(side, side)),
            None => None,
        };
        let semantic = match (text, mid) {
            (Some(t), Some(m)) => Some(blend(&m, &t, TEXT_WEIGHT)),
            (t, m) => t.or(m),
        };
        let layout = bundle
            .layout
            .as_ref()
            .filter(|_| bundle.flags.low)
            .map(|l| l.resize_bilinear(side, side));
        let (init, field) = match (layout, semantic) {
            (Some(l), Some(s)) => (l, s),
            (Some(l), None) => {
                let b = box_blur(&l, 2);
                (l, b)
            }
            (None, Some(s)) => (self.noise(seed), s),
            (None, None) => return Err(Error::InvalidArgument("no guidance level enabled".into())),
        };
        Ok(blend(&init, &field, strength))
    }
}

pub const DEFAULT_STRENGTH: f64 = 0.75;

pub fn reconstruct(
    bundle: &GuidanceBundle,
    generator: &dyn Generator,
    strength: f64,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "strength {strength} outside [0, 1]"
        )));
    }
    bundle.validate()?;
    generator.generate(bundle, strength, steps, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub flags: GuidanceFlags,
    pub n_captions: usize,
    pub strength: f64,
    pub generator_steps: usize,
    /// Reverse steps of the diffusion prior; 0 uses the MLP estimate.
    pub prior_steps: usize,
    /// Set from the experiment seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            flags: GuidanceFlags::ALL,
            n_captions: DEFAULT_CAPTION_SAMPLES,
            strength: DEFAULT_STRENGTH,
            generator_steps: 50,
            prior_steps: 100,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.flags.any() {
            return Err(Error::Config("no guidance level enabled".into()));
        }
        if self.n_captions == 0 {
            return Err(Error::Config("n_captions must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct StreamModels {
    pub high: Option<HighModel>,
    pub mid: Option<MidModel>,
    pub low: Option<LowModel>,
}

#[derive(Clone, Copy)]
pub struct Plugins<'a> {
    pub text: &'a dyn TextCodec,
    pub refiner: &'a dyn CaptionRefiner,
    pub latent: &'a dyn LatentCodec,
    pub generator: &'a dyn Generator,
}

/// Guidance payloads predicted for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Payloads {
    pub caption: Option<String>,
    pub embedding: Option<Vec<f64>>,
    pub layout: Option<Image>,
}

pub fn record_seed(base: u64, stimulus_id: &str) -> u64 {
    split_seed(base, &format!("record/{stimulus_id}"))
}

/// Runs only the streams enabled in `config.flags`.
pub fn compute_payloads(
    record: &FmriRecord,
    models: &StreamModels,
    plugins: Plugins<'_>,
    config: &InferenceConfig,
) -> Result<Payloads> {
    let seed = record_seed(config.seed, &record.stimulus_id);
    let flags = config.flags;
    let caption = if flags.high {
        let model = models.high.as_ref().ok_or(Error::MissingGuidance("high"))?;
        let h = predict_h(record.roi(RoiName::Ventral)?, model)?;
        let candidates = decode_captions(
            &h,
            config.n_captions,
            plugins.text,
            split_seed(seed, "captions"),
        )?;
        Some(refine_to_caption(&candidates, plugins.refiner)?)
    } else {
        None
    };
    let embedding = if flags.mid {
        let model = models.mid.as_ref().ok_or(Error::MissingGuidance("mid"))?;
        Some(predict_m(
            record.roi(RoiName::Nsdgeneral)?,
            model,
            config.prior_steps,
            split_seed(seed, "prior"),
        )?)
    } else {
        None
    };
    let layout = if flags.low {
        let model = models.low.as_ref().ok_or(Error::MissingGuidance("low"))?;
        let l = predict_l(record.roi(RoiName::Early)?, model)?;
        Some(decode_layout(&l, plugins.latent)?)
    } else {
        None
    };
    Ok(Payloads {
        caption,
        embedding,
        layout,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub stimulus_id: String,
    pub image: Image,
    pub caption: Option<String>,
}

pub fn reconstruct_payloads(
    stimulus_id: &str,
    payloads: &Payloads,
    flags: GuidanceFlags,
    plugins: Plugins<'_>,
    config: &InferenceConfig,
) -> Result<Reconstruction> {
    let bundle = build_guidance(
        payloads.caption.clone(),
        payloads.embedding.clone(),
        payloads.layout.clone(),
        flags,
    )?;
    let seed = split_seed(record_seed(config.seed, stimulus_id), "generator");
    let image = reconstruct(
        &bundle,
        plugins.generator,
        config.strength,
        config.generator_steps,
        seed,
    )?;
    Ok(Reconstruction {
        stimulus_id: stimulus_id.to_string(),
        image,
        caption: bundle.caption,
    })
}

/// One reconstruction per record, in record order. Records run in
/// parallel; each one's randomness depends only on the base seed and its
/// stimulus id.
pub fn run_inference(
    records: &[FmriRecord],
    models: &StreamModels,
    plugins: Plugins<'_>,
    config: &InferenceConfig,
) -> Result<Vec<Reconstruction>> {
    config.validate()?;
    records
        .par_iter()
        .map(|r| {
            let p = compute_payloads(r, models, plugins, config)?;
            reconstruct_payloads(&r.stimulus_id, &p, config.flags, plugins, config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::rng::gaussian_vec_seeded;

    fn gen() -> CompositorGenerator {
        CompositorGenerator::new(3, 4, 32).unwrap()
    }

    fn layout() -> Image {
        let data = gaussian_vec_seeded(9, 32 * 32 * 3)
            .into_iter()
            .map(|z| 0.5 + 0.1 * z)
            .collect();
        Image::new(32, 32, 3, data).unwrap()
    }

    fn embedding() -> Vec<f64> {
        gaussian_vec_seeded(5, EMBED_LEN)
    }

    fn full() -> GuidanceBundle {
        build_guidance(
            Some("a red bus on a street".into()),
            Some(embedding()),
            Some(layout()),
            GuidanceFlags::ALL,
        )
        .unwrap()
    }

    fn dist(a: &Image, b: &Image) -> f64 {
        let d: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        norm(&d)
    }

    #[test]
    fn flags_parse_and_list() {
        assert_eq!(
            "high,low".parse::<GuidanceFlags>().unwrap().to_string(),
            "high+low"
        );
        assert!("".parse::<GuidanceFlags>().is_err());
        assert!("texture".parse::<GuidanceFlags>().is_err());
        let subsets = GuidanceFlags::subsets();
        assert_eq!(subsets.len(), 7);
        let mut dedup = subsets.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 7);
    }

    #[test]
    fn bundle_drops_disabled_payloads_and_reports_missing_ones() {
        let flags = "mid".parse().unwrap();
        let b = build_guidance(Some("x".into()), Some(embedding()), Some(layout()), flags).unwrap();
        assert!(b.caption.is_none() && b.layout.is_none() && b.embedding.is_some());
        let err = build_guidance(None, Some(embedding()), None, GuidanceFlags::ALL).unwrap_err();
        assert!(matches!(err, Error::MissingGuidance("high")));
        let none = GuidanceFlags {
            high: false,
            mid: false,
            low: false,
        };
        assert!(build_guidance(None, None, None, none).is_err());
    }

    #[test]
    fn zero_strength_returns_the_layout() {
        let out = reconstruct(&full(), &gen(), 0.0, 10, 1).unwrap();
        assert_eq!(out, layout());
        assert!(reconstruct(&full(), &gen(), 1.5, 10, 1).is_err());
    }

    #[test]
    fn distance_from_layout_grows_with_strength() {
        let g = gen();
        let l = layout();
        let d: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&s| dist(&reconstruct(&full(), &g, s, 10, 1).unwrap(), &l))
            .collect();
        assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive_without_layout() {
        let g = gen();
        let mut b = full();
        b.flags.low = false;
        b.layout = None;
        let a1 = reconstruct(&b, &g, 0.5, 10, 7).unwrap();
        let a2 = reconstruct(&b, &g, 0.5, 10, 7).unwrap();
        let a3 = reconstruct(&b, &g, 0.5, 10, 8).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, a3);
    }

    #[test]
    fn caption_changes_the_output() {
        let g = gen();
        let mut b = full();
        let red = reconstruct(&b, &g, 0.75, 10, 1).unwrap();
        b.caption = Some("a blue boat on the water".into());
        let blue = reconstruct(&b, &g, 0.75, 10, 1).unwrap();
        assert!(dist(&red, &blue) > 0.1);
        let mean = |img: &Image, c| {
            (0..img.height * img.width)
                .map(|i| img.data[i * 3 + c])
                .sum::<f64>()
                / (img.height * img.width) as f64
        };
        assert!(mean(&red, 0) - mean(&blue, 0) > mean(&red, 2) - mean(&blue, 2));
    }

    #[test]
    fn low_only_moves_towards_blurred_layout() {
        let g = gen();
        let b = build_guidance(None, None, Some(layout()), "low".parse().unwrap()).unwrap();
        let out = reconstruct(&b, &g, 1.0, 10, 1).unwrap();
        assert_eq!(out, box_blur(&layout(), 2));
    }
}
