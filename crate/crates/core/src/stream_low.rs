//! Low-level stream: early visual cortex voxels through an MLP and a CNN
//! upsampler to the 64×64×4 layout latent of the generator's autoencoder.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FmriRecord, RoiName, StimulusRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    apply_input_mask, huber_loss, huber_loss_grad, mse_loss, mse_loss_grad, Adam, CnnDecoder,
    CnnDecoderConfig, Mlp, MlpBackboneConfig, ParamStore, DEFAULT_HUBER_DELTA,
};
use crate::rng::{gaussian_vec_seeded, rng_from_seed, split_seed, split_seed_index};
use crate::training::{
    mean_vector, pack_checkpoint, roi_examples, scale_grads, shuffled_batches, TrainReport,
    TrainSchedule,
};
use crate::{LAYOUT_SHAPE, LOW_MLP_SHAPE};

pub const LOW_KIND: &str = "stream_low";
pub const LAYOUT_LEN: usize = LAYOUT_SHAPE.0 * LAYOUT_SHAPE.1 * LAYOUT_SHAPE.2;
pub const LOW_MLP_LEN: usize = LOW_MLP_SHAPE.0 * LOW_MLP_SHAPE.1 * LOW_MLP_SHAPE.2;

/// Autoencoder between images and layout latents (HWC, 64×64×4).
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Vec<f64>>;
    fn decode(&self, latent: &[f64]) -> Result<Image>;
    /// Pulls an image-space gradient back through `decode`. Needed only
    /// when the feature-distillation term is active.
    fn decode_vjp(&self, latent: &[f64], grad_image: &[f64]) -> Result<Vec<f64>>;
}

/// Feature extractor whose outputs the low stream distils from.
pub trait FeatureTeacher: Send + Sync {
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
    fn features_vjp(&self, image: &Image, grad_features: &[f64]) -> Result<Vec<f64>>;
}

/// Each latent pixel carries the orthonormal projection of a 2×2×3 block
/// of the 128×128 image onto the three channel means and a horizontal
/// gradient. `decode` is the transpose, so `decode ∘ encode` is an
/// orthogonal projection: a blur that keeps block colour and left/right
/// contrast.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockProjectionCodec;

pub const CODEC_IMAGE_SIDE: usize = 2 * LAYOUT_SHAPE.0;
const BLOCK: usize = 12;

impl BlockProjectionCodec {
    /// Row `k` of the 4×12 projection; block element `i` is
    /// `(dy * 2 + dx) * 3 + c`.
    pub fn basis() -> [[f64; BLOCK]; 4] {
        let mut q = [[0.0; BLOCK]; 4];
        let g = 1.0 / (BLOCK as f64).sqrt();
        for dy in 0..2 {
            for dx in 0..2 {
                for c in 0..3 {
                    let i = (dy * 2 + dx) * 3 + c;
                    q[c][i] = 0.5;
                    q[3][i] = if dx == 0 { -g } else { g };
                }
            }
        }
        q
    }
}

fn check_latent(latent: &[f64]) -> Result<()> {
    if latent.len() != LAYOUT_LEN {
        return Err(Error::dims("layout latent", LAYOUT_LEN, latent.len()));
    }
    Ok(())
}

impl LatentCodec for BlockProjectionCodec {
    fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels != 3 {
            return Err(Error::Image(format!(
                "codec expects 3 channels, got {}",
                image.channels
            )));
        }
        let img = image.resize_bilinear(CODEC_IMAGE_SIDE, CODEC_IMAGE_SIDE);
        let q = Self::basis();
        let (h, w, k) = LAYOUT_SHAPE;
        let mut out = vec![0.0; LAYOUT_LEN];
        for y in 0..h {
            for x in 0..w {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..3 {
                            let v = img.at(2 * y + dy, 2 * x + dx, c);
                            let i = (dy * 2 + dx) * 3 + c;
                            for (kk, row) in q.iter().enumerate().take(k) {
                                out[(y * w + x) * k + kk] += row[i] * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, latent: &[f64]) -> Result<Image> {
        check_latent(latent)?;
        let q = Self::basis();
        let (h, w, k) = LAYOUT_SHAPE;
        let mut img = Image::filled(CODEC_IMAGE_SIDE, CODEC_IMAGE_SIDE, 3, 0.0);
        for y in 0..h {
            for x in 0..w {
                let l = &latent[(y * w + x) * k..(y * w + x + 1) * k];
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..3 {
                            let i = (dy * 2 + dx) * 3 + c;
                            *img.at_mut(2 * y + dy, 2 * x + dx, c) =
                                (0..k).map(|kk| q[kk][i] * l[kk]).sum();
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    fn decode_vjp(&self, latent: &[f64], grad_image: &[f64]) -> Result<Vec<f64>> {
        check_latent(latent)?;
        let n = CODEC_IMAGE_SIDE * CODEC_IMAGE_SIDE * 3;
        if grad_image.len() != n {
            return Err(Error::dims("decoded image gradient", n, grad_image.len()));
        }
        let q = Self::basis();
        let (h, w, k) = LAYOUT_SHAPE;
        let mut out = vec![0.0; LAYOUT_LEN];
        for y in 0..h {
            for x in 0..w {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..3 {
                            let i = (dy * 2 + dx) * 3 + c;
                            let g =
                                grad_image[((2 * y + dy) * CODEC_IMAGE_SIDE + 2 * x + dx) * 3 + c];
                            for kk in 0..k {
                                out[(y * w + x) * k + kk] += q[kk][i] * g;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Linear stride-2, zero-padded 3×3 convolution with seeded random
/// filters over the 128×128 image.
#[derive(Debug, Clone)]
pub struct RandomConvTeacher {
    filters: usize,
    weights: Vec<f64>,
}

const TEACHER_SIDE: usize = CODEC_IMAGE_SIDE;
const TEACHER_OUT: usize = TEACHER_SIDE / 2;

impl RandomConvTeacher {
    pub fn new(seed: u64, filters: usize) -> Self {
        let scale = 1.0 / 27f64.sqrt();
        let weights = gaussian_vec_seeded(split_seed(seed, "teacher"), filters * 27)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Self { filters, weights }
    }

    fn taps(oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize, usize)> {
        (0..3).flat_map(move |ky| {
            (0..3).filter_map(move |kx| {
                let y = (2 * oy + ky) as isize - 1;
                let x = (2 * ox + kx) as isize - 1;
                let inside = (0..TEACHER_SIDE as isize).contains(&y)
                    && (0..TEACHER_SIDE as isize).contains(&x);
                inside.then(|| (ky * 3 + kx, y as usize, x as usize))
            })
        })
    }

    fn prepared(image: &Image) -> Result<Image> {
        if image.channels != 3 {
            return Err(Error::Image("teacher expects 3 channels".into()));
        }
        Ok(image.resize_bilinear(TEACHER_SIDE, TEACHER_SIDE))
    }
}

impl FeatureTeacher for RandomConvTeacher {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let img = Self::prepared(image)?;
        let f = self.filters;
        let mut out = vec![0.0; TEACHER_OUT * TEACHER_OUT * f];
        for oy in 0..TEACHER_OUT {
            for ox in 0..TEACHER_OUT {
                let o = &mut out[(oy * TEACHER_OUT + ox) * f..(oy * TEACHER_OUT + ox + 1) * f];
                for (tap, y, x) in Self::taps(oy, ox) {
                    for c in 0..3 {
                        let v = img.at(y, x, c);
                        for (fi, of) in o.iter_mut().enumerate() {
                            *of += self.weights[fi * 27 + tap * 3 + c] * v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Only defined for 128×128 inputs, which is what the codec decodes to.
    fn features_vjp(&self, image: &Image, grad_features: &[f64]) -> Result<Vec<f64>> {
        if image.height != TEACHER_SIDE || image.width != TEACHER_SIDE || image.channels != 3 {
            return Err(Error::Image(
                "teacher gradient needs a 128×128×3 image".into(),
            ));
        }
        let f = self.filters;
        if grad_features.len() != TEACHER_OUT * TEACHER_OUT * f {
            return Err(Error::dims(
                "teacher feature gradient",
                TEACHER_OUT * TEACHER_OUT * f,
                grad_features.len(),
            ));
        }
        let mut out = vec![0.0; TEACHER_SIDE * TEACHER_SIDE * 3];
        for oy in 0..TEACHER_OUT {
            for ox in 0..TEACHER_OUT {
                let g =
                    &grad_features[(oy * TEACHER_OUT + ox) * f..(oy * TEACHER_OUT + ox + 1) * f];
                for (tap, y, x) in Self::taps(oy, ox) {
                    for c in 0..3 {
                        let s: f64 = g
                            .iter()
                            .enumerate()
                            .map(|(fi, gv)| self.weights[fi * 27 + tap * 3 + c] * gv)
                            .sum();
                        out[(y * TEACHER_SIDE + x) * 3 + c] += s;
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn compute_target_latent(image: &Image, codec: &dyn LatentCodec) -> Result<Vec<f64>> {
    image.validate_stimulus()?;
    let l = codec.encode(image)?;
    check_latent(&l)?;
    Ok(l)
}

/// Mean squared difference between two teacher feature maps.
pub fn aux_distill_loss(pred_features: &[f64], teacher_features: &[f64]) -> Result<f64> {
    mse_loss(pred_features, teacher_features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLossWeights {
    pub gamma_huber: f64,
    pub gamma_aux: f64,
}

impl Default for LowLossWeights {
    fn default() -> Self {
        Self {
            gamma_huber: 1.0,
            gamma_aux: 0.1,
        }
    }
}

impl LowLossWeights {
    pub fn validate(&self) -> Result<()> {
        let g = [self.gamma_huber, self.gamma_aux];
        if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if g.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `γ_huber·huber(l_pred, l_gt) + γ_aux·mse(T(D(l_pred)), target_features)`
/// and its gradient with respect to `l_pred`. The teacher and codec are
/// not called when `γ_aux == 0`.
pub fn low_loss_grad(
    l_pred: &[f64],
    l_gt: &[f64],
    target_features: Option<&[f64]>,
    weights: &LowLossWeights,
    huber_delta: f64,
    codec: &dyn LatentCodec,
    teacher: &dyn FeatureTeacher,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; l_pred.len()];
    if weights.gamma_huber > 0.0 {
        let (v, g) = huber_loss_grad(l_pred, l_gt, huber_delta)?;
        value += weights.gamma_huber * v;
        crate::linalg::axpy(weights.gamma_huber, &g, &mut grad);
    }
    if weights.gamma_aux > 0.0 {
        let target = target_features.ok_or_else(|| {
            Error::InvalidArgument("aux term needs teacher target features".into())
        })?;
        let decoded = codec.decode(l_pred)?;
        let feats = teacher.features(&decoded)?;
        let (v, gf) = mse_loss_grad(&feats, target)?;
        value += weights.gamma_aux * v;
        let gi = teacher.features_vjp(&decoded, &gf)?;
        let gl = codec.decode_vjp(l_pred, &gi)?;
        crate::linalg::axpy(weights.gamma_aux, &gl, &mut grad);
    }
    Ok((value, grad))
}

pub fn low_loss(
    l_pred: &[f64],
    l_gt: &[f64],
    target_features: Option<&[f64]>,
    weights: &LowLossWeights,
    huber_delta: f64,
    codec: &dyn LatentCodec,
    teacher: &dyn FeatureTeacher,
) -> Result<f64> {
    let mut value = 0.0;
    if weights.gamma_huber > 0.0 {
        value += weights.gamma_huber * huber_loss(l_pred, l_gt, huber_delta)?;
    }
    if weights.gamma_aux > 0.0 {
        let target = target_features.ok_or_else(|| {
            Error::InvalidArgument("aux term needs teacher target features".into())
        })?;
        let feats = teacher.features(&codec.decode(l_pred)?)?;
        value += weights.gamma_aux * aux_distill_loss(&feats, target)?;
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowConfig {
    /// `input_dim` and `output_dim` are filled in from the data.
    pub mlp: MlpBackboneConfig,
    pub cnn: CnnDecoderConfig,
    pub schedule: TrainSchedule,
    pub weights: LowLossWeights,
    pub huber_delta: f64,
}

impl Default for LowConfig {
    fn default() -> Self {
        Self {
            mlp: MlpBackboneConfig {
                hidden_dims: vec![128],
                output_init_scale: 0.1,
                ..Default::default()
            },
            cnn: CnnDecoderConfig::default(),
            schedule: TrainSchedule {
                epochs: 12,
                ..Default::default()
            },
            weights: LowLossWeights::default(),
            huber_delta: DEFAULT_HUBER_DELTA,
        }
    }
}

impl LowConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.cnn.validate()?;
        if self.cnn.input_shape != [LOW_MLP_SHAPE.0, LOW_MLP_SHAPE.1, LOW_MLP_SHAPE.2]
            || self.cnn.output_shape != [LAYOUT_SHAPE.0, LAYOUT_SHAPE.1, LAYOUT_SHAPE.2]
        {
            return Err(Error::Config(
                "low stream decoder must map 16×16×64 to 64×64×4".into(),
            ));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LowArchitecture {
    mlp: MlpBackboneConfig,
    cnn: CnnDecoderConfig,
}

#[derive(Debug, Clone)]
pub struct LowModel {
    pub mlp: Mlp,
    pub cnn: CnnDecoder,
}

impl LowModel {
    fn merged_params(&self) -> ParamStore {
        let mut out = ParamStore::default();
        for (prefix, store) in [("mlp", &self.mlp.params), ("cnn", &self.cnn.params)] {
            for p in &store.params {
                out.push(
                    format!("{prefix}.{}", p.name),
                    p.shape.clone(),
                    p.value.clone(),
                );
            }
        }
        out
    }

    pub fn to_checkpoint(&self, seed: u64, report: &TrainReport) -> Result<Checkpoint> {
        let arch = LowArchitecture {
            mlp: self.mlp.config().clone(),
            cnn: self.cnn.config().clone(),
        };
        pack_checkpoint(LOW_KIND, &arch, seed, &self.merged_params(), report)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(LOW_KIND)?;
        let arch: LowArchitecture = ck.typed_config()?;
        if arch.mlp.output_dim != LOW_MLP_LEN {
            return Err(Error::Checkpoint(format!(
                "low mlp output {} is not 16×16×64",
                arch.mlp.output_dim
            )));
        }
        let mut model = Self {
            mlp: Mlp::new(arch.mlp, 0)?,
            cnn: CnnDecoder::new(arch.cnn, 0)?,
        };
        let mut merged = model.merged_params();
        merged.load_from(&ck.params)?;
        let n = model.mlp.params.len();
        for (i, p) in merged.params.into_iter().enumerate() {
            let dst = if i < n {
                model.mlp.params.get_mut(i)
            } else {
                model.cnn.params.get_mut(i - n)
            };
            dst.copy_from_slice(&p.value);
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.config().input_dim
    }
}

/// MLP output reshaped to 16×16×64, before the decoder.
pub fn predict_l_mlp(early: &[f64], model: &LowModel) -> Result<Vec<f64>> {
    if early.len() != model.input_dim() {
        return Err(Error::dims("early voxels", model.input_dim(), early.len()));
    }
    let l = model.mlp.forward(early)?;
    if l.len() != LOW_MLP_LEN {
        return Err(Error::dims("low mlp output", LOW_MLP_LEN, l.len()));
    }
    Ok(l)
}

pub fn predict_l(early: &[f64], model: &LowModel) -> Result<Vec<f64>> {
    let l = model.cnn.forward(&predict_l_mlp(early, model)?)?;
    check_latent(&l)?;
    Ok(l)
}

/// Target latents, and teacher features of the target images when the
/// auxiliary term is active.
pub fn latent_targets(
    ids: impl IntoIterator<Item = String>,
    stimuli: &BTreeMap<String, StimulusRecord>,
    codec: &dyn LatentCodec,
    teacher: Option<&dyn FeatureTeacher>,
) -> Result<HashMap<String, (Vec<f64>, Option<Vec<f64>>)>> {
    let mut out = HashMap::new();
    for id in ids {
        if out.contains_key(&id) {
            continue;
        }
        let stim = stimuli.get(&id).ok_or_else(|| Error::DanglingStimulus {
            record: id.clone(),
            stimulus_id: id.clone(),
        })?;
        let l = compute_target_latent(&stim.image, codec)?;
        let f = teacher.map(|t| t.features(&stim.image)).transpose()?;
        out.insert(id, (l, f));
    }
    Ok(out)
}

pub fn train_low(
    records: &[FmriRecord],
    stimuli: &BTreeMap<String, StimulusRecord>,
    codec: &dyn LatentCodec,
    teacher: &dyn FeatureTeacher,
    config: &LowConfig,
    seed: u64,
) -> Result<(LowModel, TrainReport)> {
    config.validate()?;
    let examples = roi_examples(records, RoiName::Early)?;
    let use_teacher = config.weights.gamma_aux > 0.0;
    let targets = latent_targets(
        examples.iter().map(|(_, id)| id.clone()),
        stimuli,
        codec,
        use_teacher.then_some(teacher),
    )?;
    let mut mlp_config = config.mlp.clone();
    mlp_config.input_dim = examples[0].0.len();
    mlp_config.output_dim = LOW_MLP_LEN;
    if let Some((v, _)) = examples
        .iter()
        .find(|(v, _)| v.len() != mlp_config.input_dim)
    {
        return Err(Error::dims("early voxels", mlp_config.input_dim, v.len()));
    }
    let masking = mlp_config.masking();
    let mut model = LowModel {
        mlp: Mlp::new(mlp_config, split_seed(seed, "low/init"))?,
        cnn: CnnDecoder::new(config.cnn.clone(), split_seed(seed, "low/cnn_init"))?,
    };
    let mean_latent = mean_vector(examples.iter().map(|(_, id)| targets[id].0.as_slice()));
    let n_stages = config.cnn.channels.len() - 1;
    // the last decoder bias starts at the per-channel mean target
    let channels = LAYOUT_SHAPE.2;
    let mut channel_mean = vec![0.0; channels];
    for (i, v) in mean_latent.iter().enumerate() {
        channel_mean[i % channels] += v / (LAYOUT_LEN / channels) as f64;
    }
    model
        .cnn
        .params
        .get_mut(2 * n_stages - 1)
        .copy_from_slice(&channel_mean);

    let mut mlp_opt = Adam::new(config.schedule.adam, &model.mlp.params);
    let mut cnn_opt = Adam::new(config.schedule.adam, &model.cnn.params);
    let mut rng = rng_from_seed(split_seed(seed, "low/order"));
    let mut report = TrainReport::default();
    let mut draw = 0u64;
    for _ in 0..config.schedule.epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(examples.len(), config.schedule.batch_size, &mut rng) {
            let mut mlp_grads = model.mlp.params.zeros_like();
            let mut cnn_grads = model.cnn.params.zeros_like();
            for &i in &batch {
                draw += 1;
                let (voxels, id) = &examples[i];
                let (l_gt, feats) = &targets[id];
                let x =
                    apply_input_mask(voxels, &masking, split_seed_index(seed, "low/mask", draw));
                let (l_mlp, mcache) = model
                    .mlp
                    .forward_train(&x, split_seed_index(seed, "low/dropout", draw))?;
                let (l_pred, ccache) = model.cnn.forward_train(&l_mlp)?;
                let (loss, g) = low_loss_grad(
                    &l_pred,
                    l_gt,
                    feats.as_deref(),
                    &config.weights,
                    config.huber_delta,
                    codec,
                    teacher,
                )?;
                total += loss;
                let g_mlp = model.cnn.backward(&ccache, &g, &mut cnn_grads);
                model.mlp.backward(&mcache, &g_mlp, &mut mlp_grads);
            }
            let k = 1.0 / batch.len() as f64;
            scale_grads(&mut mlp_grads, k);
            scale_grads(&mut cnn_grads, k);
            mlp_opt.step(&mut model.mlp.params, &mlp_grads);
            cnn_opt.step(&mut model.cnn.params, &cnn_grads);
            report.steps += 1;
        }
        report.epoch_losses.push(total / examples.len() as f64);
    }
    Ok((model, report))
}

/// Mean latent Huber loss of `predict` against the target latents.
pub fn low_validation_loss(
    records: &[FmriRecord],
    stimuli: &BTreeMap<String, StimulusRecord>,
    codec: &dyn LatentCodec,
    huber_delta: f64,
    predict: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let examples = roi_examples(records, RoiName::Early)?;
    let targets = latent_targets(
        examples.iter().map(|(_, id)| id.clone()),
        stimuli,
        codec,
        None,
    )?;
    let mut total = 0.0;
    for (v, id) in &examples {
        total += huber_loss(&predict(v)?, &targets[id].0, huber_delta)?;
    }
    Ok(total / examples.len() as f64)
}
