//! Mid-level stream: nsdgeneral voxels to a 257×768 image embedding,
//! trained jointly with a conditional diffusion prior that refines it.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FmriRecord, RoiName, StimulusRecord};
use crate::diffusion_prior::{
    ddpm_loss, ddpm_loss_grad, forward_noise, sample, PriorConfig, PriorModel,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    apply_input_mask, huber_loss, huber_loss_grad, info_nce_loss, info_nce_loss_grad_pred, Adam,
    AdamConfig, Mlp, MlpBackboneConfig, DEFAULT_HUBER_DELTA, DEFAULT_NCE_TEMPERATURE,
};
use crate::rng::{gaussian_vec, gaussian_vec_seeded, rng_from_seed, split_seed, split_seed_index};
use crate::training::{
    mean_vector, pack_checkpoint, roi_examples, shuffled_batches, TrainReport, TrainSchedule,
};
use crate::{EMBED_COLS, EMBED_LEN, EMBED_ROWS};

pub const MID_KIND: &str = "stream_mid";
pub const ENCODER_SIDE: usize = 512;

pub trait ImageEncoder: Send + Sync {
    /// Encodes an `H×W×3` image to a flat row-major 257×768 embedding.
    fn encode(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Linear patch-statistics encoder. On the 512×512 image, row 0 describes
/// the whole image and rows 1..=256 the 16×16 grid of 32-pixel patches.
/// Each region contributes its 12 channel-by-quadrant means, centred at
/// 0.5, projected to 768 columns by a fixed seeded matrix.
#[derive(Debug, Clone)]
pub struct PatchStatsEncoder {
    projection: Vec<f64>,
    /// `12 × 768` pseudo-inverse of the projection.
    inverse: nalgebra::DMatrix<f64>,
}

const PATCH_FEATURES: usize = 12;
const PATCH_GRID: usize = 16;

impl PatchStatsEncoder {
    pub fn new(seed: u64) -> Self {
        let scale = (1.0 / PATCH_FEATURES as f64).sqrt();
        let projection = gaussian_vec_seeded(
            split_seed(seed, "encoder/projection"),
            EMBED_COLS * PATCH_FEATURES,
        )
        .into_iter()
        .map(|v| v * scale)
        .collect::<Vec<_>>();
        let inverse = nalgebra::DMatrix::from_row_slice(EMBED_COLS, PATCH_FEATURES, &projection)
            .pseudo_inverse(1e-12)
            .expect("nonnegative tolerance");
        Self {
            projection,
            inverse,
        }
    }

    /// Least-squares inversion of [`ImageEncoder::encode`] back to the
    /// 32×32 grid of quadrant colour means.
    pub fn decode_cells(&self, embedding: &[f64]) -> Result<Image> {
        if embedding.len() != EMBED_LEN {
            return Err(Error::dims("image embedding", EMBED_LEN, embedding.len()));
        }
        let cells = 2 * PATCH_GRID;
        let mut img = Image::filled(cells, cells, 3, 0.0);
        for py in 0..PATCH_GRID {
            for px in 0..PATCH_GRID {
                let row = 1 + py * PATCH_GRID + px;
                let m = nalgebra::DVector::from_column_slice(
                    &embedding[row * EMBED_COLS..(row + 1) * EMBED_COLS],
                );
                let f = &self.inverse * m;
                for q in 0..4 {
                    for c in 0..3 {
                        *img.at_mut(2 * py + q / 2, 2 * px + q % 2, c) = f[q * 3 + c] + 0.5;
                    }
                }
            }
        }
        Ok(img)
    }

    fn project(&self, features: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = crate::linalg::dot(
                &self.projection[k * PATCH_FEATURES..(k + 1) * PATCH_FEATURES],
                features,
            );
        }
    }
}

impl ImageEncoder for PatchStatsEncoder {
    fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels != 3 {
            return Err(Error::Image(format!(
                "encoder expects 3 channels, got {}",
                image.channels
            )));
        }
        let img = image.resize_bilinear(ENCODER_SIDE, ENCODER_SIDE);
        // means over 16×16-pixel cells, i.e. the quadrants of each patch
        let cells = 2 * PATCH_GRID;
        let cell = ENCODER_SIDE / cells;
        let mut sums = vec![0.0; cells * cells * 3];
        for y in 0..ENCODER_SIDE {
            for x in 0..ENCODER_SIDE {
                let base = ((y / cell) * cells + x / cell) * 3;
                for c in 0..3 {
                    sums[base + c] += img.at(y, x, c);
                }
            }
        }
        let area = (cell * cell) as f64;
        sums.iter_mut().for_each(|s| *s = *s / area - 0.5);
        let quad = |cy: usize, cx: usize, c: usize| sums[(cy * cells + cx) * 3 + c];
        let mut out = vec![0.0; EMBED_LEN];
        let mut global = [0.0; PATCH_FEATURES];
        for py in 0..PATCH_GRID {
            for px in 0..PATCH_GRID {
                let mut f = [0.0; PATCH_FEATURES];
                for q in 0..4 {
                    for c in 0..3 {
                        let v = quad(2 * py + q / 2, 2 * px + q % 2, c);
                        f[q * 3 + c] = v;
                        // global quadrant q covers patch-grid quadrant q
                        let gq = (py / (PATCH_GRID / 2)) * 2 + px / (PATCH_GRID / 2);
                        global[gq * 3 + c] += v / (4.0 * (PATCH_GRID * PATCH_GRID / 4) as f64);
                    }
                }
                let row = 1 + py * PATCH_GRID + px;
                self.project(&f, &mut out[row * EMBED_COLS..(row + 1) * EMBED_COLS]);
            }
        }
        self.project(&global, &mut out[..EMBED_COLS]);
        Ok(out)
    }
}

/// Resizes the stimulus to 512×512, then encodes it.
pub fn compute_target_embedding(image: &Image, encoder: &dyn ImageEncoder) -> Result<Vec<f64>> {
    image.validate_stimulus()?;
    let out = encoder.encode(&image.resize_bilinear(ENCODER_SIDE, ENCODER_SIDE))?;
    if out.len() != EMBED_LEN {
        return Err(Error::dims("image embedding", EMBED_LEN, out.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MidLossWeights {
    pub gamma_ddpm: f64,
    pub gamma_huber: f64,
    pub gamma_nce: f64,
}

impl Default for MidLossWeights {
    fn default() -> Self {
        Self {
            gamma_ddpm: 1.0,
            gamma_huber: 1.0,
            gamma_nce: 0.1,
        }
    }
}

impl MidLossWeights {
    pub fn validate(&self) -> Result<()> {
        let g = [self.gamma_ddpm, self.gamma_huber, self.gamma_nce];
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

fn check_batch(x0_hat: &[f64], m_mlp: &[f64], m_gt: &[f64], batch: usize) -> Result<()> {
    if batch == 0 || m_gt.len() % batch != 0 {
        return Err(Error::dims(
            "mid batch",
            format!("multiple of {batch}"),
            m_gt.len(),
        ));
    }
    for (name, v) in [("x0_hat", x0_hat), ("m_mlp", m_mlp)] {
        if v.len() != m_gt.len() {
            return Err(Error::dims(
                "mid loss",
                m_gt.len(),
                format!("{} ({name})", v.len()),
            ));
        }
    }
    Ok(())
}

/// `γ_ddpm·ddpm(x0_hat, m_gt) + γ_huber·huber(m_mlp, m_gt) + γ_nce·nce(m_mlp, m_gt)`
/// over a batch of `batch` flattened embeddings. Terms with zero weight are
/// not evaluated.
pub fn mid_loss(
    x0_hat: &[f64],
    m_mlp: &[f64],
    m_gt: &[f64],
    batch: usize,
    w: &MidLossWeights,
    temperature: f64,
    huber_delta: f64,
) -> Result<f64> {
    check_batch(x0_hat, m_mlp, m_gt, batch)?;
    let mut total = 0.0;
    if w.gamma_ddpm > 0.0 {
        total += w.gamma_ddpm * ddpm_loss(x0_hat, m_gt)?;
    }
    if w.gamma_huber > 0.0 {
        total += w.gamma_huber * huber_loss(m_mlp, m_gt, huber_delta)?;
    }
    if w.gamma_nce > 0.0 {
        total += w.gamma_nce * info_nce_loss(m_mlp, m_gt, batch, temperature)?;
    }
    Ok(total)
}

pub struct MidLossGrad {
    pub value: f64,
    pub x0_hat: Vec<f64>,
    pub m_mlp: Vec<f64>,
}

pub fn mid_loss_grad(
    x0_hat: &[f64],
    m_mlp: &[f64],
    m_gt: &[f64],
    batch: usize,
    w: &MidLossWeights,
    temperature: f64,
    huber_delta: f64,
) -> Result<MidLossGrad> {
    check_batch(x0_hat, m_mlp, m_gt, batch)?;
    let mut out = MidLossGrad {
        value: 0.0,
        x0_hat: vec![0.0; x0_hat.len()],
        m_mlp: vec![0.0; m_mlp.len()],
    };
    if w.gamma_ddpm > 0.0 {
        let (v, g) = ddpm_loss_grad(x0_hat, m_gt)?;
        out.value += w.gamma_ddpm * v;
        crate::linalg::axpy(w.gamma_ddpm, &g, &mut out.x0_hat);
    }
    if w.gamma_huber > 0.0 {
        let (v, g) = huber_loss_grad(m_mlp, m_gt, huber_delta)?;
        out.value += w.gamma_huber * v;
        crate::linalg::axpy(w.gamma_huber, &g, &mut out.m_mlp);
    }
    if w.gamma_nce > 0.0 {
        let (v, g) = info_nce_loss_grad_pred(m_mlp, m_gt, batch, temperature)?;
        out.value += w.gamma_nce * v;
        crate::linalg::axpy(w.gamma_nce, &g, &mut out.m_mlp);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MidConfig {
    /// `input_dim` and `output_dim` are filled in from the data.
    pub mlp: MlpBackboneConfig,
    pub prior: PriorConfig,
    pub schedule: TrainSchedule,
    pub weights: MidLossWeights,
    pub nce_temperature: f64,
    pub huber_delta: f64,
    /// Reverse steps used at inference; 0 bypasses the prior.
    pub sample_steps: usize,
}

impl Default for MidConfig {
    fn default() -> Self {
        Self {
            mlp: MlpBackboneConfig {
                hidden_dims: vec![64, 16],
                output_init_scale: 0.1,
                ..Default::default()
            },
            prior: PriorConfig {
                hidden: 16,
                ..Default::default()
            },
            schedule: TrainSchedule {
                epochs: 8,
                batch_size: 16,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
            },
            weights: MidLossWeights::default(),
            nce_temperature: DEFAULT_NCE_TEMPERATURE,
            huber_delta: DEFAULT_HUBER_DELTA,
            sample_steps: 100,
        }
    }
}

impl MidConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.prior.validate()?;
        if !self.prior.conditional || self.prior.len() != EMBED_LEN {
            return Err(Error::Config(
                "mid prior must be conditional over the 257×768 embedding".into(),
            ));
        }
        if !(self.nce_temperature > 0.0) || !(self.huber_delta > 0.0) {
            return Err(Error::Config(
                "nce_temperature and huber_delta must be positive".into(),
            ));
        }
        if self.sample_steps > self.prior.schedule.steps {
            return Err(Error::Config(format!(
                "sample_steps {} exceeds the {}-step schedule",
                self.sample_steps, self.prior.schedule.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MidModel {
    pub mlp: Mlp,
    pub prior: PriorModel,
}

impl MidModel {
    pub fn from_checkpoints(mlp_ck: &Checkpoint, prior_ck: &Checkpoint) -> Result<Self> {
        mlp_ck.expect_kind(MID_KIND)?;
        let config: MlpBackboneConfig = mlp_ck.typed_config()?;
        if config.output_dim != EMBED_LEN {
            return Err(Error::Checkpoint(format!(
                "image embedding length {}",
                config.output_dim
            )));
        }
        let mut mlp = Mlp::new(config, 0)?;
        mlp.params.load_from(&mlp_ck.params)?;
        let prior = PriorModel::from_checkpoint(prior_ck)?;
        if prior.config().len() != EMBED_LEN || !prior.config().conditional {
            return Err(Error::Checkpoint(
                "prior does not match the image embedding".into(),
            ));
        }
        Ok(Self { mlp, prior })
    }

    pub fn to_checkpoints(
        &self,
        seed: u64,
        report: &TrainReport,
    ) -> Result<(Checkpoint, Checkpoint)> {
        let mlp = pack_checkpoint(MID_KIND, self.mlp.config(), seed, &self.mlp.params, report)?;
        let prior = self.prior.to_checkpoint(
            seed,
            report.steps,
            serde_json::to_value(report).unwrap_or_default(),
        )?;
        Ok((mlp, prior))
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.config().input_dim
    }
}

pub fn predict_m_mlp(voxels: &[f64], model: &MidModel) -> Result<Vec<f64>> {
    if voxels.len() != model.input_dim() {
        return Err(Error::dims(
            "nsdgeneral voxels",
            model.input_dim(),
            voxels.len(),
        ));
    }
    model.mlp.forward(voxels)
}

/// The MLP estimate refined by `steps` reverse steps of the prior,
/// conditioned on that estimate.
pub fn predict_m(voxels: &[f64], model: &MidModel, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let m_mlp = predict_m_mlp(voxels, model)?;
    sample(&model.prior, Some(&m_mlp), steps, seed)
}

/// Target embeddings for every distinct stimulus referenced by `ids`.
pub fn embedding_targets(
    ids: impl IntoIterator<Item = String>,
    stimuli: &BTreeMap<String, StimulusRecord>,
    encoder: &dyn ImageEncoder,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for id in ids {
        if out.contains_key(&id) {
            continue;
        }
        let stim = stimuli.get(&id).ok_or_else(|| Error::DanglingStimulus {
            record: id.clone(),
            stimulus_id: id.clone(),
        })?;
        out.insert(id, compute_target_embedding(&stim.image, encoder)?);
    }
    Ok(out)
}

/// Joint training of the voxel MLP and the conditional prior. The prior
/// denoises the noised target conditioned on the MLP output, so the DDPM
/// term also sends gradient into the MLP. With `gamma_ddpm == 0` the prior
/// is never evaluated and its parameters stay at initialisation.
pub fn train_mid(
    records: &[FmriRecord],
    stimuli: &BTreeMap<String, StimulusRecord>,
    encoder: &dyn ImageEncoder,
    config: &MidConfig,
    seed: u64,
) -> Result<(MidModel, TrainReport)> {
    config.validate()?;
    let examples = roi_examples(records, RoiName::Nsdgeneral)?;
    let targets = embedding_targets(examples.iter().map(|(_, id)| id.clone()), stimuli, encoder)?;
    let mut mlp_config = config.mlp.clone();
    mlp_config.input_dim = examples[0].0.len();
    mlp_config.output_dim = EMBED_LEN;
    if let Some((v, _)) = examples
        .iter()
        .find(|(v, _)| v.len() != mlp_config.input_dim)
    {
        return Err(Error::dims(
            "nsdgeneral voxels",
            mlp_config.input_dim,
            v.len(),
        ));
    }
    let masking = mlp_config.masking();
    let mut mlp = Mlp::new(mlp_config, split_seed(seed, "mid/init"))?;
    mlp.set_output_bias(&mean_vector(
        examples.iter().map(|(_, id)| targets[id].as_slice()),
    ))?;
    let mut prior = PriorModel::new(config.prior.clone(), split_seed(seed, "mid/prior_init"))?;
    let mut mlp_opt = Adam::new(config.schedule.adam, &mlp.params);
    let mut prior_opt = Adam::new(config.schedule.adam, &prior.params);
    let mut rng = rng_from_seed(split_seed(seed, "mid/order"));
    let mut report = TrainReport::default();
    let w = config.weights;
    let mut draw = 0u64;
    for _ in 0..config.schedule.epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(examples.len(), config.schedule.batch_size, &mut rng) {
            let b = batch.len();
            let mut m_mlp = Vec::with_capacity(b * EMBED_LEN);
            let mut m_gt = Vec::with_capacity(b * EMBED_LEN);
            let mut x0_hat = Vec::with_capacity(b * EMBED_LEN);
            let mut mlp_caches = Vec::with_capacity(b);
            let mut prior_caches = Vec::with_capacity(b);
            for &i in &batch {
                draw += 1;
                let (voxels, id) = &examples[i];
                let x =
                    apply_input_mask(voxels, &masking, split_seed_index(seed, "mid/mask", draw));
                let (out, cache) =
                    mlp.forward_train(&x, split_seed_index(seed, "mid/dropout", draw))?;
                let gt = &targets[id];
                if w.gamma_ddpm > 0.0 {
                    let mut nrng = rng_from_seed(split_seed_index(seed, "mid/noise", draw));
                    let t = nrng.gen_range(0..prior.schedule().len());
                    let eps = gaussian_vec(&mut nrng, EMBED_LEN);
                    let x_t = forward_noise(gt, t, &eps, prior.schedule())?;
                    let (hat, pc) = prior.predict_x0_train(&x_t, t, Some(&out))?;
                    x0_hat.extend_from_slice(&hat);
                    prior_caches.push(pc);
                } else {
                    x0_hat.extend_from_slice(gt);
                }
                m_mlp.extend_from_slice(&out);
                m_gt.extend_from_slice(gt);
                mlp_caches.push(cache);
            }
            let g = mid_loss_grad(
                &x0_hat,
                &m_mlp,
                &m_gt,
                b,
                &w,
                config.nce_temperature,
                config.huber_delta,
            )?;
            total += g.value * b as f64;
            let mut mlp_grads = mlp.params.zeros_like();
            let mut prior_grads = prior.params.zeros_like();
            for (k, cache) in mlp_caches.iter().enumerate() {
                let range = k * EMBED_LEN..(k + 1) * EMBED_LEN;
                let mut g_out = g.m_mlp[range.clone()].to_vec();
                if let Some(pc) = prior_caches.get(k) {
                    if let Some(gc) = prior.backward(pc, &g.x0_hat[range], &mut prior_grads) {
                        crate::linalg::axpy(1.0, &gc, &mut g_out);
                    }
                }
                mlp.backward(cache, &g_out, &mut mlp_grads);
            }
            // the loss terms are batch means, so the gradients are already scaled
            mlp_opt.step(&mut mlp.params, &mlp_grads);
            prior_opt.step(&mut prior.params, &prior_grads);
            report.steps += 1;
        }
        report.epoch_losses.push(total / examples.len() as f64);
    }
    Ok((MidModel { mlp, prior }, report))
}

/// Mean Huber loss of `predict` against the target embeddings.
pub fn mid_validation_loss(
    records: &[FmriRecord],
    stimuli: &BTreeMap<String, StimulusRecord>,
    encoder: &dyn ImageEncoder,
    huber_delta: f64,
    predict: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let examples = roi_examples(records, RoiName::Nsdgeneral)?;
    let targets = embedding_targets(examples.iter().map(|(_, id)| id.clone()), stimuli, encoder)?;
    let mut total = 0.0;
    for (v, id) in &examples {
        total += huber_loss(&predict(v)?, &targets[id], huber_delta)?;
    }
    Ok(total / examples.len() as f64)
}

/// Mean over rows of the cosine similarity between two 257×768 embeddings.
pub fn rowwise_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in 0..EMBED_ROWS {
        let (x, y) = (
            &a[r * EMBED_COLS..(r + 1) * EMBED_COLS],
            &b[r * EMBED_COLS..(r + 1) * EMBED_COLS],
        );
        let d = crate::linalg::norm(x) * crate::linalg::norm(y);
        total += if d > 0.0 {
            crate::linalg::dot(x, y) / d
        } else {
            0.0
        };
    }
    total / EMBED_ROWS as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, prepare_splits, SynthConfig};
    use crate::nn::gradcheck::{central_difference, relative_error};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn target_embedding_resizes_first() {
        let enc = PatchStatsEncoder::new(1);
        let big = random_image(512, 512, 2);
        assert_eq!(
            compute_target_embedding(&big, &enc).unwrap(),
            enc.encode(&big).unwrap()
        );
        let c256 = Image::filled(256, 256, 3, 0.3);
        let c512 = Image::filled(512, 512, 3, 0.3);
        let a = compute_target_embedding(&c256, &enc).unwrap();
        let b = compute_target_embedding(&c512, &enc).unwrap();
        assert_eq!(a.len(), EMBED_LEN);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_decoding_inverts_encoding() {
        let enc = PatchStatsEncoder::new(4);
        let img = random_image(32, 32, 5);
        let cells = enc.decode_cells(&enc.encode(&img).unwrap()).unwrap();
        let direct = img.resize_bilinear(ENCODER_SIDE, ENCODER_SIDE);
        for (cy, cx) in [(0, 0), (7, 30), (31, 31)] {
            for c in 0..3 {
                let mut s = 0.0;
                for y in 0..16 {
                    for x in 0..16 {
                        s += direct.at(cy * 16 + y, cx * 16 + x, c);
                    }
                }
                assert!((cells.at(cy, cx, c) - s / 256.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bilinear_resize_matches_pointwise_oracle() {
        let img = random_image(100, 80, 3);
        let out = img.resize_bilinear(ENCODER_SIDE, ENCODER_SIDE);
        let sample = |src: &Image, y: f64, x: f64, c: usize| {
            let cy = y.clamp(0.0, (src.height - 1) as f64);
            let cx = x.clamp(0.0, (src.width - 1) as f64);
            let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(src.height - 1), (x0 + 1).min(src.width - 1));
            let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
            (1.0 - fy) * (1.0 - fx) * src.at(y0, x0, c)
                + (1.0 - fy) * fx * src.at(y0, x1, c)
                + fy * (1.0 - fx) * src.at(y1, x0, c)
                + fy * fx * src.at(y1, x1, c)
        };
        for oy in (0..ENCODER_SIDE).step_by(7) {
            for ox in (0..ENCODER_SIDE).step_by(5) {
                let y = (oy as f64 + 0.5) * 100.0 / 512.0 - 0.5;
                let x = (ox as f64 + 0.5) * 80.0 / 512.0 - 0.5;
                for c in 0..3 {
                    assert!((out.at(oy, ox, c) - sample(&img, y, x, c)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn mid_loss_decomposes() {
        let (b, d) = (3, 10);
        let x0 = gaussian_vec_seeded(1, b * d);
        let mm = gaussian_vec_seeded(2, b * d);
        let gt = gaussian_vec_seeded(3, b * d);
        let w = MidLossWeights {
            gamma_ddpm: 1.0,
            gamma_huber: 1.0,
            gamma_nce: 1.0,
        };
        let total = mid_loss(&x0, &mm, &gt, b, &w, 0.05, 1.0).unwrap();
        let sum = ddpm_loss(&x0, &gt).unwrap()
            + huber_loss(&mm, &gt, 1.0).unwrap()
            + info_nce_loss(&mm, &gt, b, 0.05).unwrap();
        assert!((total - sum).abs() <= 1e-12 * sum.abs());
        let only_huber = MidLossWeights {
            gamma_ddpm: 0.0,
            gamma_huber: 1.0,
            gamma_nce: 0.0,
        };
        assert_eq!(
            mid_loss(&x0, &gt, &gt, b, &only_huber, 0.05, 1.0).unwrap(),
            0.0
        );
        let only_nce = MidLossWeights {
            gamma_ddpm: 0.0,
            gamma_huber: 0.0,
            gamma_nce: 1.0,
        };
        assert!(
            mid_loss(&x0[..d], &mm[..d], &gt[..d], 1, &only_nce, 0.05, 1.0)
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!(MidLossWeights {
            gamma_ddpm: 0.0,
            gamma_huber: 0.0,
            gamma_nce: 0.0
        }
        .validate()
        .is_err());
        assert!(mid_loss(&x0[..d], &mm, &gt, b, &w, 0.05, 1.0).is_err());
    }

    #[test]
    fn mid_loss_gradients() {
        let (b, d) = (4, 6);
        let x0 = gaussian_vec_seeded(4, b * d);
        let mm = gaussian_vec_seeded(5, b * d);
        let gt = gaussian_vec_seeded(6, b * d);
        let w = MidLossWeights {
            gamma_ddpm: 0.7,
            gamma_huber: 1.3,
            gamma_nce: 0.4,
        };
        let g = mid_loss_grad(&x0, &mm, &gt, b, &w, 0.5, 1.0).unwrap();
        let fx = central_difference(
            |v| mid_loss(v, &mm, &gt, b, &w, 0.5, 1.0).unwrap(),
            &x0,
            1e-6,
        );
        let fm = central_difference(
            |v| mid_loss(&x0, v, &gt, b, &w, 0.5, 1.0).unwrap(),
            &mm,
            1e-6,
        );
        assert!(relative_error(&g.x0_hat, &fx) < 1e-4);
        assert!(relative_error(&g.m_mlp, &fm) < 1e-4);
    }

    fn tiny_config(weights: MidLossWeights, epochs: usize) -> MidConfig {
        MidConfig {
            mlp: MlpBackboneConfig {
                hidden_dims: vec![16, 8],
                dropout_rate: 0.0,
                mask_ratio: 0.0,
                ..Default::default()
            },
            prior: PriorConfig {
                hidden: 8,
                ..Default::default()
            },
            schedule: TrainSchedule {
                epochs,
                batch_size: 4,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
            },
            weights,
            ..Default::default()
        }
    }

    #[test]
    fn zero_ddpm_weight_leaves_prior_untouched_and_runs_repeat() {
        let ds = generate_synthetic_dataset(&SynthConfig::default(), 2).unwrap();
        let (train, _) = prepare_splits(&ds.manifest);
        let enc = PatchStatsEncoder::new(0);
        let w = MidLossWeights {
            gamma_ddpm: 0.0,
            ..Default::default()
        };
        let config = tiny_config(w, 2);
        let (model, report) =
            train_mid(&train[..8], &ds.manifest.stimuli, &enc, &config, 7).unwrap();
        let fresh = PriorModel::new(config.prior.clone(), split_seed(7, "mid/prior_init")).unwrap();
        assert_eq!(model.prior.params, fresh.params);
        let (_, again) = train_mid(&train[..8], &ds.manifest.stimuli, &enc, &config, 7).unwrap();
        assert_eq!(report, again);
        let v = train[0].roi(RoiName::Nsdgeneral).unwrap();
        let m = predict_m_mlp(v, &model).unwrap();
        assert_eq!(predict_m(v, &model, 0, 1).unwrap(), m);
        assert_ne!(
            predict_m(v, &model, 100, 1).unwrap(),
            predict_m(v, &model, 100, 2).unwrap()
        );
    }

    #[test]
    fn reshape_places_flat_index_at_row_and_column() {
        let ds = generate_synthetic_dataset(&SynthConfig::default(), 2).unwrap();
        let (train, _) = prepare_splits(&ds.manifest);
        let enc = PatchStatsEncoder::new(0);
        let (mut model, _) = train_mid(
            &train[..2],
            &ds.manifest.stimuli,
            &enc,
            &tiny_config(MidLossWeights::default(), 1),
            1,
        )
        .unwrap();
        model.mlp.params.fill(0.0);
        let last = model.mlp.params.len() - 1;
        model
            .mlp
            .params
            .get_mut(last)
            .iter_mut()
            .enumerate()
            .for_each(|(k, b)| *b = k as f64);
        let m = predict_m_mlp(train[0].roi(RoiName::Nsdgeneral).unwrap(), &model).unwrap();
        for (i, j) in [(0, 0), (5, 17), (256, 767)] {
            assert_eq!(m[EMBED_COLS * i + j], (EMBED_COLS * i + j) as f64);
        }
    }

    #[test]
    fn single_sample_is_memorised() {
        let ds = generate_synthetic_dataset(&SynthConfig::default(), 3).unwrap();
        let (train, _) = prepare_splits(&ds.manifest);
        let one = &train[..1];
        let enc = PatchStatsEncoder::new(0);
        let mut config = tiny_config(MidLossWeights::default(), 300);
        config.schedule.batch_size = 1;
        let (model, report) = train_mid(one, &ds.manifest.stimuli, &enc, &config, 4).unwrap();
        let v = one[0].roi(RoiName::Nsdgeneral).unwrap();
        let gt = compute_target_embedding(&ds.manifest.stimuli[&one[0].stimulus_id].image, &enc)
            .unwrap();
        let huber = huber_loss(&predict_m_mlp(v, &model).unwrap(), &gt, 1.0).unwrap();
        assert!(
            huber < 1e-3,
            "huber {huber}, trace tail {:?}",
            report.epoch_losses.last()
        );
        let m = predict_m(v, &model, 100, 9).unwrap();
        let cos = rowwise_cosine(&m, &gt);
        assert!(cos > 0.99, "cos {cos}");
        let (a, b) = model.to_checkpoints(4, &report).unwrap();
        let back = MidModel::from_checkpoints(&a, &b).unwrap();
        let again = MidModel::from_checkpoints(
            &Checkpoint::from_bytes(&a.to_bytes().unwrap()).unwrap(),
            &b,
        )
        .unwrap();
        assert_eq!(
            predict_m(v, &back, 100, 9).unwrap(),
            predict_m(v, &again, 100, 9).unwrap()
        );
    }
}
