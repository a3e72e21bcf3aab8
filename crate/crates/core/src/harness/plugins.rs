//! Name-based selection of the pluggable model backends.
//!
//! Every slot has built-in backends. Any other name is looked up as
//! `<name>.toml` in the directories listed in `BRAINSTREAMS_PLUGIN_PATH`;
//! such a descriptor names its slot and the built-in backend it binds to.

use std::env;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ExtractorSet;
use crate::reconstruction::{CompositorGenerator, Generator, Plugins};
use crate::rng::split_seed;
use crate::stream_high::{CaptionRefiner, ConsensusRefiner, ReferenceTextCodec, TextCodec};
use crate::stream_low::{BlockProjectionCodec, FeatureTeacher, LatentCodec, RandomConvTeacher};
use crate::stream_mid::{ImageEncoder, PatchStatsEncoder};

pub const PLUGIN_PATH_ENV: &str = "BRAINSTREAMS_PLUGIN_PATH";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    TextCodec,
    Refiner,
    ImageEncoder,
    LatentCodec,
    Teacher,
    Generator,
    Extractors,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::TextCodec => "text_codec",
            Slot::Refiner => "refiner",
            Slot::ImageEncoder => "image_encoder",
            Slot::LatentCodec => "latent_codec",
            Slot::Teacher => "teacher",
            Slot::Generator => "generator",
            Slot::Extractors => "extractors",
        }
    }

    fn builtins(self) -> &'static [&'static str] {
        match self {
            Slot::TextCodec => &["reference"],
            Slot::Refiner => &["consensus"],
            Slot::ImageEncoder => &["patch-stats"],
            Slot::LatentCodec => &["block-projection"],
            Slot::Teacher => &["random-conv"],
            Slot::Generator => &["compositor"],
            Slot::Extractors => &["random-projection"],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    slot: String,
    backend: String,
}

fn search_path() -> Vec<PathBuf> {
    env::var_os(PLUGIN_PATH_ENV)
        .map(|v| env::split_paths(&v).collect())
        .unwrap_or_default()
}

/// Maps a configured plugin name to a built-in backend name.
pub fn resolve(slot: Slot, name: &str) -> Result<&'static str> {
    if let Some(b) = slot.builtins().iter().find(|b| **b == name) {
        return Ok(b);
    }
    for dir in search_path() {
        let path = dir.join(format!("{name}.toml"));
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let d: Descriptor = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        if d.slot != slot.name() {
            return Err(Error::Config(format!(
                "plugin `{name}` is a {} plugin, not a {}",
                d.slot,
                slot.name()
            )));
        }
        return slot
            .builtins()
            .iter()
            .find(|b| **b == d.backend)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "plugin `{name}` binds unknown backend `{}`",
                    d.backend
                ))
            });
    }
    Err(Error::Config(format!(
        "unknown {} plugin `{name}`",
        slot.name()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PluginConfig {
    pub text_codec: String,
    pub text_temperature: f64,
    pub refiner: String,
    pub image_encoder: String,
    pub latent_codec: String,
    pub teacher: String,
    pub teacher_filters: usize,
    pub generator: String,
    pub generator_side: usize,
    pub extractors: String,
}

impl Default for PluginConfig {
    fn default() -> Self {
        Self {
            text_codec: "reference".into(),
            text_temperature: 0.1,
            refiner: "consensus".into(),
            image_encoder: "patch-stats".into(),
            latent_codec: "block-projection".into(),
            teacher: "random-conv".into(),
            teacher_filters: 8,
            generator: "compositor".into(),
            generator_side: 128,
            extractors: "random-projection".into(),
        }
    }
}

impl PluginConfig {
    /// Checks numeric fields only; names are resolved when plugins are
    /// built, so the search path is read at run time.
    pub fn validate(&self) -> Result<()> {
        if !(self.text_temperature > 0.0) {
            return Err(Error::Config("text_temperature must be positive".into()));
        }
        if self.teacher_filters == 0 || self.generator_side == 0 {
            return Err(Error::Config(
                "teacher_filters and generator_side must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct PluginSet {
    pub text: Box<dyn TextCodec>,
    pub refiner: Box<dyn CaptionRefiner>,
    pub encoder: Box<dyn ImageEncoder>,
    pub latent: Box<dyn LatentCodec>,
    pub teacher: Box<dyn FeatureTeacher>,
    pub generator: Box<dyn Generator>,
    pub extractors: ExtractorSet,
}

impl PluginSet {
    /// Each plugin gets its own seed stream derived from `seed`.
    /// `vocabulary` feeds the text codec's decoder.
    pub fn build(config: &PluginConfig, seed: u64, vocabulary: &[String]) -> Result<Self> {
        config.validate()?;
        // one built-in backend per slot for now, so resolving is validation
        for (slot, name) in [
            (Slot::TextCodec, &config.text_codec),
            (Slot::Refiner, &config.refiner),
            (Slot::ImageEncoder, &config.image_encoder),
            (Slot::LatentCodec, &config.latent_codec),
            (Slot::Teacher, &config.teacher),
            (Slot::Generator, &config.generator),
            (Slot::Extractors, &config.extractors),
        ] {
            resolve(slot, name)?;
        }
        let encoder_seed = split_seed(seed, "plugin/encoder");
        let text = Box::new(ReferenceTextCodec::new(
            split_seed(seed, "plugin/text"),
            vocabulary,
            config.text_temperature,
        )?);
        let refiner = Box::new(ConsensusRefiner);
        let encoder = Box::new(PatchStatsEncoder::new(encoder_seed));
        let latent = Box::new(BlockProjectionCodec);
        let teacher = Box::new(RandomConvTeacher::new(
            split_seed(seed, "plugin/teacher"),
            config.teacher_filters,
        ));
        let generator = Box::new(CompositorGenerator::new(
            split_seed(seed, "plugin/generator"),
            encoder_seed,
            config.generator_side,
        )?);
        let extractors = ExtractorSet::reference(split_seed(seed, "plugin/extractors"));
        Ok(Self {
            text,
            refiner,
            encoder,
            latent,
            teacher,
            generator,
            extractors,
        })
    }

    pub fn inference(&self) -> Plugins<'_> {
        Plugins {
            text: self.text.as_ref(),
            refiner: self.refiner.as_ref(),
            latent: self.latent.as_ref(),
            generator: self.generator.as_ref(),
        }
    }
}
