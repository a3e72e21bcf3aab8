//! High-level stream: ventral voxels to a 768-d text latent, decoded into
//! candidate captions and refined to one.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FmriRecord, RoiName, StimulusRecord, CAPTIONS_PER_STIMULUS};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::nn::{apply_input_mask, mse_loss_grad, Adam, Mlp, MlpBackboneConfig};
use crate::rng::{gaussian_vec_seeded, rng_from_seed, split_seed, split_seed_index};
use crate::training::{
    mean_vector, pack_checkpoint, roi_examples, scale_grads, shuffled_batches, TrainReport,
    TrainSchedule,
};
use crate::TEXT_LATENT_DIM;

pub const HIGH_KIND: &str = "stream_high";
pub const DEFAULT_CAPTION_SAMPLES: usize = 15;

pub trait TextCodec: Send + Sync {
    fn encode(&self, caption: &str) -> Result<Vec<f64>>;
    /// Stochastic decode, deterministic for a given seed.
    fn decode(&self, latent: &[f64], seed: u64) -> Result<String>;
}

pub trait CaptionRefiner: Send + Sync {
    fn refine(&self, candidates: &[String]) -> Result<String>;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "in", "at", "there", "on", "of", "and", "with", "to",
];

pub(crate) fn content_tokens(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Bag-of-words hash embedding. Each content token maps to a fixed seeded
/// Gaussian vector; a caption is their sum over `√n`. Decoding samples a
/// vocabulary caption with probability `softmax(cos / temperature)`.
///
/// Captions with the same content tokens share one embedding, so the
/// vocabulary keeps only the lexicographically smallest of each group.
#[derive(Debug, Clone)]
pub struct ReferenceTextCodec {
    seed: u64,
    temperature: f64,
    vocabulary: Vec<(String, Vec<f64>)>,
}

impl ReferenceTextCodec {
    pub fn new(seed: u64, vocabulary: &[String], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config("codec temperature must be positive".into()));
        }
        let mut codec = Self {
            seed,
            temperature,
            vocabulary: Vec::new(),
        };
        let mut groups: BTreeMap<Vec<String>, String> = BTreeMap::new();
        for cap in vocabulary {
            let mut key = content_tokens(cap);
            key.sort();
            if key.is_empty() {
                continue;
            }
            groups
                .entry(key)
                .and_modify(|c| {
                    if cap < c {
                        c.clone_from(cap);
                    }
                })
                .or_insert_with(|| cap.clone());
        }
        let mut vocab: Vec<String> = groups.into_values().collect();
        vocab.sort();
        for cap in vocab {
            let e = codec.encode(&cap)?;
            codec.vocabulary.push((cap, e));
        }
        Ok(codec)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocabulary.iter().map(|(c, _)| c.as_str())
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        gaussian_vec_seeded(
            split_seed(self.seed, &format!("token/{token}")),
            TEXT_LATENT_DIM,
        )
    }
}

impl TextCodec for ReferenceTextCodec {
    fn encode(&self, caption: &str) -> Result<Vec<f64>> {
        let tokens = content_tokens(caption);
        let mut out = vec![0.0; TEXT_LATENT_DIM];
        for t in &tokens {
            for (o, v) in out.iter_mut().zip(self.token_vector(t)) {
                *o += v;
            }
        }
        if !tokens.is_empty() {
            let k = 1.0 / (tokens.len() as f64).sqrt();
            out.iter_mut().for_each(|o| *o *= k);
        }
        Ok(out)
    }

    fn decode(&self, latent: &[f64], seed: u64) -> Result<String> {
        if latent.len() != TEXT_LATENT_DIM {
            return Err(Error::dims("text latent", TEXT_LATENT_DIM, latent.len()));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::InvalidArgument("codec vocabulary is empty".into()));
        }
        let ln = norm(latent).max(f64::MIN_POSITIVE);
        let logits: Vec<f64> = self
            .vocabulary
            .iter()
            .map(|(_, e)| dot(latent, e) / (ln * norm(e)) / self.temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng_from_seed(seed).gen::<f64>() * total;
        for ((cap, _), w) in self.vocabulary.iter().zip(&weights) {
            if u < *w {
                return Ok(cap.clone());
            }
            u -= w;
        }
        Ok(self.vocabulary.last().expect("nonempty").0.clone())
    }
}

/// Position-wise majority vote over whitespace tokens. The output length is
/// the most common candidate length; ties go to the shorter length and to
/// the lexicographically smaller token, so the result ignores input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConsensusRefiner;

fn majority<K: Ord>(items: impl IntoIterator<Item = K>) -> Option<K> {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in items {
        *counts.entry(k).or_default() += 1;
    }
    // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
    // so reverse to prefer the smallest key on ties.
    counts
        .into_iter()
        .rev()
        .max_by_key(|(_, c)| *c)
        .map(|(k, _)| k)
}

impl CaptionRefiner for ConsensusRefiner {
    fn refine(&self, candidates: &[String]) -> Result<String> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("no candidate captions".into()));
        }
        if candidates.iter().all(|c| c == &candidates[0]) && !candidates[0].trim().is_empty() {
            return Ok(candidates[0].clone());
        }
        let tokenised: Vec<Vec<&str>> = candidates
            .iter()
            .map(|c| c.split_whitespace().collect::<Vec<_>>())
            .filter(|t| !t.is_empty())
            .collect();
        let len = majority(tokenised.iter().map(Vec::len))
            .ok_or_else(|| Error::InvalidArgument("all candidate captions are blank".into()))?;
        let words: Vec<&str> = (0..len)
            .filter_map(|i| majority(tokenised.iter().filter_map(|t| t.get(i).copied())))
            .collect();
        Ok(words.join(" "))
    }
}

pub fn select_training_caption(captions: &[String], rng_seed: u64) -> Result<&str> {
    if captions.len() != CAPTIONS_PER_STIMULUS {
        return Err(Error::schema(
            "captions",
            format!(
                "expected {CAPTIONS_PER_STIMULUS} captions, got {}",
                captions.len()
            ),
        ));
    }
    let i = rng_from_seed(rng_seed).gen_range(0..captions.len());
    Ok(&captions[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighConfig {
    /// `input_dim` and `output_dim` are filled in from the data.
    pub mlp: MlpBackboneConfig,
    pub schedule: TrainSchedule,
    pub n_samples: usize,
}

impl Default for HighConfig {
    fn default() -> Self {
        Self {
            mlp: MlpBackboneConfig {
                hidden_dims: vec![32],
                dropout_rate: 0.3,
                ..Default::default()
            },
            schedule: TrainSchedule {
                epochs: 80,
                ..Default::default()
            },
            n_samples: DEFAULT_CAPTION_SAMPLES,
        }
    }
}

impl HighConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone)]
pub struct HighModel {
    pub mlp: Mlp,
}

impl HighModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(HIGH_KIND)?;
        let config: MlpBackboneConfig = ck.typed_config()?;
        if config.output_dim != TEXT_LATENT_DIM {
            return Err(Error::Checkpoint(format!(
                "text latent width {}",
                config.output_dim
            )));
        }
        let mut mlp = Mlp::new(config, 0)?;
        mlp.params.load_from(&ck.params)?;
        Ok(Self { mlp })
    }

    pub fn to_checkpoint(&self, seed: u64, report: &TrainReport) -> Result<Checkpoint> {
        pack_checkpoint(HIGH_KIND, self.mlp.config(), seed, &self.mlp.params, report)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.config().input_dim
    }
}

/// Evaluation-mode prediction; masking and dropout never apply here.
pub fn predict_h(ventral: &[f64], model: &HighModel) -> Result<Vec<f64>> {
    if ventral.len() != model.input_dim() {
        return Err(Error::dims(
            "ventral voxels",
            model.input_dim(),
            ventral.len(),
        ));
    }
    model.mlp.forward(ventral)
}

/// Caption encodings per stimulus, so every step can pick one afresh.
pub fn caption_targets(
    ids: impl IntoIterator<Item = String>,
    stimuli: &BTreeMap<String, StimulusRecord>,
    codec: &dyn TextCodec,
) -> Result<HashMap<String, Vec<Vec<f64>>>> {
    let mut out = HashMap::new();
    for id in ids {
        if out.contains_key(&id) {
            continue;
        }
        let stim = stimuli.get(&id).ok_or_else(|| Error::DanglingStimulus {
            record: id.clone(),
            stimulus_id: id.clone(),
        })?;
        if stim.captions.len() != CAPTIONS_PER_STIMULUS {
            return Err(Error::schema(
                "captions",
                format!(
                    "expected {CAPTIONS_PER_STIMULUS} captions, got {}",
                    stim.captions.len()
                ),
            ));
        }
        let enc = stim
            .captions
            .iter()
            .map(|c| codec.encode(c))
            .collect::<Result<Vec<_>>>()?;
        out.insert(id, enc);
    }
    Ok(out)
}

/// Trains the ventral-to-text-latent MLP with per-step input masking and a
/// freshly drawn caption target for every example.
pub fn train_high(
    records: &[FmriRecord],
    stimuli: &BTreeMap<String, StimulusRecord>,
    codec: &dyn TextCodec,
    config: &HighConfig,
    seed: u64,
) -> Result<(HighModel, TrainReport)> {
    config.validate()?;
    let examples = roi_examples(records, RoiName::Ventral)?;
    let targets = caption_targets(examples.iter().map(|(_, id)| id.clone()), stimuli, codec)?;
    let mut mlp_config = config.mlp.clone();
    mlp_config.input_dim = examples[0].0.len();
    mlp_config.output_dim = TEXT_LATENT_DIM;
    if let Some((v, _)) = examples
        .iter()
        .find(|(v, _)| v.len() != mlp_config.input_dim)
    {
        return Err(Error::dims("ventral voxels", mlp_config.input_dim, v.len()));
    }
    let masking = mlp_config.masking();
    let mut mlp = Mlp::new(mlp_config, split_seed(seed, "high/init"))?;
    let mean_caption = examples
        .iter()
        .flat_map(|(_, id)| targets[id].iter().map(Vec::as_slice));
    mlp.set_output_bias(&mean_vector(mean_caption))?;
    let mut opt = Adam::new(config.schedule.adam, &mlp.params);
    let mut rng = rng_from_seed(split_seed(seed, "high/order"));
    let mut report = TrainReport::default();
    let mut draw = 0u64;
    for _ in 0..config.schedule.epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(examples.len(), config.schedule.batch_size, &mut rng) {
            let mut grads = mlp.params.zeros_like();
            for &i in &batch {
                draw += 1;
                let (voxels, id) = &examples[i];
                let caps = &targets[id];
                let pick = rng_from_seed(split_seed_index(seed, "high/caption", draw))
                    .gen_range(0..caps.len());
                let x =
                    apply_input_mask(voxels, &masking, split_seed_index(seed, "high/mask", draw));
                let (out, cache) =
                    mlp.forward_train(&x, split_seed_index(seed, "high/dropout", draw))?;
                let (loss, g) = mse_loss_grad(&out, &caps[pick])?;
                mlp.backward(&cache, &g, &mut grads);
                total += loss;
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut mlp.params, &grads);
            report.steps += 1;
        }
        report.epoch_losses.push(total / examples.len() as f64);
    }
    Ok((HighModel { mlp }, report))
}

/// Mean MSE of predictions against every caption encoding of each record's
/// stimulus.
pub fn high_validation_loss(
    records: &[FmriRecord],
    stimuli: &BTreeMap<String, StimulusRecord>,
    codec: &dyn TextCodec,
    predict: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let examples = roi_examples(records, RoiName::Ventral)?;
    let targets = caption_targets(examples.iter().map(|(_, id)| id.clone()), stimuli, codec)?;
    let mut total = 0.0;
    let mut n = 0;
    for (v, id) in &examples {
        let p = predict(v)?;
        for t in &targets[id] {
            total += crate::nn::mse_loss(&p, t)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Sample `k` is decoded with seed `base_seed + k`.
pub fn decode_captions(
    h: &[f64],
    n_samples: usize,
    codec: &dyn TextCodec,
    base_seed: u64,
) -> Result<Vec<String>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "n_samples must be at least 1".into(),
        ));
    }
    (0..n_samples as u64)
        .map(|k| codec.decode(h, base_seed.wrapping_add(k)))
        .collect()
}

pub fn refine_to_caption(candidates: &[String], refiner: &dyn CaptionRefiner) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate captions".into()));
    }
    let out = refiner.refine(candidates)?;
    if out.trim().is_empty() {
        return Err(Error::InvalidArgument(
            "refiner returned an empty caption".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, prepare_splits, SynthConfig};

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn caption_selection() {
        let same = strings(&["x"; 5]);
        assert_eq!(select_training_caption(&same, 3).unwrap(), "x");
        let caps = strings(&["a", "b", "c", "d", "e"]);
        assert_eq!(
            select_training_caption(&caps, 9).unwrap(),
            select_training_caption(&caps, 9).unwrap()
        );
        assert!(select_training_caption(&caps[..4], 0).is_err());
        let mut counts = [0usize; 5];
        for s in 0..100_000 {
            let c = select_training_caption(&caps, s).unwrap();
            counts[caps.iter().position(|x| x == c).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((0.19..=0.21).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn refiner_consensus() {
        let r = ConsensusRefiner;
        assert_eq!(
            r.refine(&strings(&["a red dog", "a red cat", "a red dog"]))
                .unwrap(),
            "a red dog"
        );
        assert_eq!(r.refine(&strings(&["only one"])).unwrap(), "only one");
        assert_eq!(
            r.refine(&strings(&["same  text"; 15])).unwrap(),
            "same  text"
        );
        let a = strings(&[
            "blue bus in park",
            "a blue bus",
            "blue kite in park",
            "blue bus in room",
        ]);
        let mut b = a.clone();
        b.reverse();
        assert_eq!(r.refine(&a).unwrap(), r.refine(&b).unwrap());
        assert!(refine_to_caption(&[], &r).is_err());
        assert!(r.refine(&strings(&["", " "])).is_err());
    }

    #[test]
    fn codec_shares_embeddings_across_templates() {
        let codec = ReferenceTextCodec::new(1, &[], 0.1).unwrap();
        let a = codec.encode("a red dog in the park").unwrap();
        let b = codec.encode("there is a red dog in the park").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, codec.encode("a red cat in the park").unwrap());
        assert_eq!(a.len(), TEXT_LATENT_DIM);
    }

    #[test]
    fn decoding_is_seeded_and_varied() {
        let vocab = strings(&[
            "red dog park",
            "blue cat room",
            "green bus street",
            "white kite beach",
        ]);
        let codec = ReferenceTextCodec::new(2, &vocab, 0.1).unwrap();
        let h = gaussian_vec_seeded(4, TEXT_LATENT_DIM);
        let caps = decode_captions(&h, 15, &codec, 100).unwrap();
        assert_eq!(caps.len(), 15);
        assert_eq!(caps, decode_captions(&h, 15, &codec, 100).unwrap());
        assert!(caps.iter().any(|c| c != &caps[0]));
        assert_eq!(decode_captions(&h, 1, &codec, 7).unwrap().len(), 1);
        assert!(decode_captions(&h, 0, &codec, 7).is_err());
        // a latent equal to an entry's encoding decodes to it almost surely
        let e = codec.encode("red dog park").unwrap();
        let near = decode_captions(&e, 15, &codec, 0).unwrap();
        assert!(near.iter().filter(|c| *c == "red dog park").count() >= 14);
    }

    #[test]
    fn vocabulary_collapses_templates() {
        let codec = ReferenceTextCodec::new(
            0,
            &strings(&[
                "the red dog is in a park",
                "a red dog in the park",
                "red dog in park",
            ]),
            0.1,
        )
        .unwrap();
        assert_eq!(
            codec.vocabulary().collect::<Vec<_>>(),
            vec!["a red dog in the park"]
        );
    }

    #[test]
    fn zero_weights_predict_bias() {
        let ds = generate_synthetic_dataset(&SynthConfig::default(), 1).unwrap();
        let (train, _) = prepare_splits(&ds.manifest);
        let codec = ReferenceTextCodec::new(0, &[], 0.1).unwrap();
        let config = HighConfig {
            schedule: TrainSchedule {
                epochs: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let (mut model, _) =
            train_high(&train[..4], &ds.manifest.stimuli, &codec, &config, 3).unwrap();
        model.mlp.params.fill(0.0);
        let n = model.mlp.params.len();
        model
            .mlp
            .params
            .get_mut(n - 1)
            .iter_mut()
            .for_each(|b| *b = 0.5);
        let h = predict_h(train[0].roi(RoiName::Ventral).unwrap(), &model).unwrap();
        assert!(h.iter().all(|&v| v == 0.5));
        assert!(predict_h(&[0.0; 3], &model).is_err());
    }

    #[test]
    fn single_record_is_memorised_and_round_trips() {
        let ds = generate_synthetic_dataset(&SynthConfig::default(), 5).unwrap();
        let (train, _) = prepare_splits(&ds.manifest);
        let one = &train[..1];
        let codec = ReferenceTextCodec::new(0, &[], 0.1).unwrap();
        let config = HighConfig {
            mlp: MlpBackboneConfig {
                hidden_dims: vec![64],
                dropout_rate: 0.0,
                mask_ratio: 0.0,
                ..Default::default()
            },
            schedule: TrainSchedule {
                epochs: 300,
                batch_size: 1,
                adam: crate::nn::AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
            },
            n_samples: 15,
        };
        let (model, report) = train_high(one, &ds.manifest.stimuli, &codec, &config, 1).unwrap();
        assert!(
            *report.epoch_losses.last().unwrap() < 1e-3,
            "{:?}",
            report.epoch_losses.last()
        );
        let target = codec
            .encode(&ds.manifest.stimuli[&one[0].stimulus_id].captions[0])
            .unwrap();
        let v = one[0].roi(RoiName::Ventral).unwrap();
        let h = predict_h(v, &model).unwrap();
        let linf = h
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf < 1e-2, "{linf}");
        let ck = model.to_checkpoint(1, &report).unwrap();
        let a = HighModel::from_checkpoint(&ck).unwrap();
        let b =
            HighModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(predict_h(v, &a).unwrap(), predict_h(v, &b).unwrap());
    }
}
