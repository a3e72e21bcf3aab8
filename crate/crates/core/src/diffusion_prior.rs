//! Denoising diffusion over flat embeddings with an x0-prediction
//! objective: the network predicts the clean embedding directly and the
//! reverse chain uses the Gaussian posterior `q(x_{t-1} | x_t, x0)`.
//!
//! The denoiser treats an embedding as `rows × cols`. Each row passes
//! through the same two-layer MLP, with learned row and sinusoidal
//! timestep embeddings added to its hidden layer. The output adds a
//! noise-level dependent skip of `x_t` and, in conditional mode, a
//! noise-level dependent multiple of the condition, which is how the
//! condition is injected at every denoising step. With `rows == 1` this is
//! a plain MLP over the flattened vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{affine, axpy, dot, matvec_t_acc, outer_acc};
use crate::nn::{gelu, gelu_grad, mse_loss, mse_loss_grad, Adam, AdamConfig, ParamStore};
use crate::rng::{gaussian_vec, gaussian_vec_seeded, rng_from_seed, split_seed, split_seed_index};

pub const PRIOR_KIND: &str = "prior";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// Linear betas for a 100-step chain, i.e. the 1e-4..0.02 range of a
    /// 1000-step chain rescaled by 1000/100 so that `ᾱ_T` ends near zero.
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config(
                "noise schedule needs at least one step".into(),
            ));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config(
                "noise schedule needs at least one step".into(),
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::StepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean
    /// `c_x0 · x0 + c_xt · x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let beta = self.betas[t];
        let ab = self.alphas_cumprod[t];
        let ab_prev = self.alpha_bar_prev(t);
        Ok((
            ab_prev.sqrt() * beta / (1.0 - ab),
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        ))
    }

    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t] * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alphas_cumprod[t]))
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if eps.len() != x0.len() {
        return Err(Error::dims("forward_noise eps", x0.len(), eps.len()));
    }
    let ab = schedule.alphas_cumprod[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Mean squared error between the predicted and true clean embedding.
pub fn ddpm_loss(x0_hat: &[f64], x0: &[f64]) -> Result<f64> {
    mse_loss(x0_hat, x0)
}

pub fn ddpm_loss_grad(x0_hat: &[f64], x0: &[f64]) -> Result<(f64, Vec<f64>)> {
    mse_loss_grad(x0_hat, x0)
}

/// One reverse step: the posterior mean from `(x_t, x0_hat)` plus, for
/// `t > 0`, posterior-variance Gaussian noise drawn from `eps_seed`.
pub fn denoise_step(
    x_t: &[f64],
    t: usize,
    x0_hat: &[f64],
    schedule: &NoiseSchedule,
    eps_seed: u64,
) -> Result<Vec<f64>> {
    if x0_hat.len() != x_t.len() {
        return Err(Error::dims("denoise_step x0_hat", x_t.len(), x0_hat.len()));
    }
    let (c0, ct) = schedule.posterior_coefficients(t)?;
    let mut out: Vec<f64> = x0_hat
        .iter()
        .zip(x_t)
        .map(|(a, b)| c0 * a + ct * b)
        .collect();
    if t > 0 {
        let sigma = schedule.posterior_variance(t)?.sqrt();
        let z = gaussian_vec_seeded(eps_seed, out.len());
        axpy(sigma, &z, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub rows: usize,
    pub cols: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub conditional: bool,
    /// Symmetric clamp applied to `x0_hat` while sampling.
    pub clamp: Option<f64>,
    pub schedule: ScheduleConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            rows: crate::EMBED_ROWS,
            cols: crate::EMBED_COLS,
            hidden: 32,
            time_embed_dim: 16,
            conditional: true,
            clamp: None,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.hidden == 0 {
            return Err(Error::Config("prior dims must be at least 1".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return Err(Error::Config("clamp must be positive".into()));
            }
        }
        NoiseSchedule::from_config(&self.schedule).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const W_IN: usize = 0;
const B_IN: usize = 1;
const ROW_EMB: usize = 2;
const TIME_PROJ: usize = 3;
const W_OUT: usize = 4;
const ROW_BIAS: usize = 5;
const SKIP: usize = 6;
const COND: usize = 7;

#[derive(Debug, Clone)]
pub struct PriorModel {
    config: PriorConfig,
    schedule: NoiseSchedule,
    pub params: ParamStore,
}

/// Intermediate values of one denoiser evaluation.
pub struct PriorCache {
    t: usize,
    x_t: Vec<f64>,
    cond: Option<Vec<f64>>,
    temb: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl PriorModel {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        let (r, c, h, e) = (
            config.rows,
            config.cols,
            config.hidden,
            config.time_embed_dim,
        );
        let mut rng = rng_from_seed(seed);
        let mut scaled = |n: usize, s: f64| -> Vec<f64> {
            gaussian_vec(&mut rng, n)
                .into_iter()
                .map(|v| v * s)
                .collect()
        };
        let mut params = ParamStore::default();
        params.push("w_in", vec![h, c], scaled(h * c, (1.0 / c as f64).sqrt()));
        params.push("b_in", vec![h], vec![0.0; h]);
        params.push("row_embedding", vec![r, h], scaled(r * h, 0.1));
        params.push(
            "time_proj",
            vec![h, e],
            scaled(h * e, (1.0 / e as f64).sqrt()),
        );
        params.push(
            "w_out",
            vec![h, c],
            scaled(c * h, 0.1 * (1.0 / h as f64).sqrt()),
        );
        params.push("row_bias", vec![r, c], vec![0.0; r * c]);
        params.push("skip_coef", vec![3], vec![0.0; 3]);
        params.push("cond_coef", vec![3], vec![0.0; 3]);
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn noise_features(&self, t: usize) -> [f64; 3] {
        let ab = self.schedule.alphas_cumprod[t];
        [1.0, ab.sqrt(), (1.0 - ab).sqrt()]
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_embed_dim / 2;
        let mut out = Vec::with_capacity(2 * half);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos());
        }
        out
    }

    fn check_inputs(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>) -> Result<()> {
        self.schedule.check(t)?;
        let n = self.config.len();
        if x_t.len() != n {
            return Err(Error::dims("prior input", n, x_t.len()));
        }
        match (self.config.conditional, cond) {
            (true, Some(c)) if c.len() != n => Err(Error::dims("prior condition", n, c.len())),
            (true, None) => Err(Error::InvalidArgument(
                "conditional prior needs a condition".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidArgument(
                "unconditional prior given a condition".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Predicts the clean embedding from `x_t` at step `t`.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_inputs(x_t, t, cond)?;
        Ok(self.run(x_t, t, cond, false).0)
    }

    pub fn predict_x0_train(
        &self,
        x_t: &[f64],
        t: usize,
        cond: Option<&[f64]>,
    ) -> Result<(Vec<f64>, PriorCache)> {
        self.check_inputs(x_t, t, cond)?;
        let (out, cache) = self.run(x_t, t, cond, true);
        Ok((out, cache.expect("training pass keeps a cache")))
    }

    fn run(
        &self,
        x_t: &[f64],
        t: usize,
        cond: Option<&[f64]>,
        keep: bool,
    ) -> (Vec<f64>, Option<PriorCache>) {
        let (rows, cols, h) = (self.config.rows, self.config.cols, self.config.hidden);
        let e = self.config.time_embed_dim;
        let temb = self.time_embedding(t);
        let mut tvec = vec![0.0; h];
        affine(
            self.params.get(TIME_PROJ),
            self.params.get(B_IN),
            &temb,
            h,
            e,
            &mut tvec,
        );
        let phi = self.noise_features(t);
        let skip = dot(&phi, self.params.get(SKIP));
        let cgain = dot(&phi, self.params.get(COND));

        let mut pre = vec![0.0; rows * h];
        let mut hidden = vec![0.0; rows * h];
        let mut out = self.params.get(ROW_BIAS).to_vec();
        let w_in = self.params.get(W_IN);
        let w_out = self.params.get(W_OUT);
        let row_emb = self.params.get(ROW_EMB);
        for r in 0..rows {
            let xr = &x_t[r * cols..(r + 1) * cols];
            let a = &mut pre[r * h..(r + 1) * h];
            for (j, aj) in a.iter_mut().enumerate() {
                *aj = tvec[j] + row_emb[r * h + j] + dot(&w_in[j * cols..(j + 1) * cols], xr);
            }
            let u = &mut hidden[r * h..(r + 1) * h];
            for (uj, aj) in u.iter_mut().zip(a.iter()) {
                *uj = gelu(*aj);
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            // w_out is stored hidden-major, so o += W_outᵀ u row by row
            matvec_t_acc(w_out, u, h, cols, o);
            axpy(skip, xr, o);
            if let Some(c) = cond {
                axpy(cgain, &c[r * cols..(r + 1) * cols], o);
            }
        }
        let cache = keep.then(|| PriorCache {
            t,
            x_t: x_t.to_vec(),
            cond: cond.map(<[f64]>::to_vec),
            temb,
            pre,
            hidden,
        });
        (out, cache)
    }

    /// Accumulates parameter gradients; returns the gradient with respect
    /// to the condition when one was supplied.
    pub fn backward(
        &self,
        cache: &PriorCache,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Option<Vec<f64>> {
        let (rows, cols, h) = (self.config.rows, self.config.cols, self.config.hidden);
        let e = self.config.time_embed_dim;
        let phi = self.noise_features(cache.t);
        let cgain = dot(&phi, self.params.get(COND));
        let w_out = self.params.get(W_OUT);

        for (gb, g) in grads[ROW_BIAS].iter_mut().zip(grad_out) {
            *gb += g;
        }
        let gx = dot(grad_out, &cache.x_t);
        for (gs, p) in grads[SKIP].iter_mut().zip(phi) {
            *gs += p * gx;
        }
        let cond_grad = cache.cond.as_ref().map(|c| {
            let gc = dot(grad_out, c);
            for (gs, p) in grads[COND].iter_mut().zip(phi) {
                *gs += p * gc;
            }
            grad_out.iter().map(|g| cgain * g).collect::<Vec<_>>()
        });

        let mut d_t = vec![0.0; h];
        let mut d_pre = vec![0.0; h];
        for r in 0..rows {
            let g = &grad_out[r * cols..(r + 1) * cols];
            let u = &cache.hidden[r * h..(r + 1) * h];
            let a = &cache.pre[r * h..(r + 1) * h];
            outer_acc(u, g, &mut grads[W_OUT]);
            for (j, (d, av)) in d_pre.iter_mut().zip(a).enumerate() {
                *d = dot(&w_out[j * cols..(j + 1) * cols], g) * gelu_grad(*av);
            }
            outer_acc(
                &d_pre,
                &cache.x_t[r * cols..(r + 1) * cols],
                &mut grads[W_IN],
            );
            axpy(1.0, &d_pre, &mut grads[ROW_EMB][r * h..(r + 1) * h]);
            axpy(1.0, &d_pre, &mut d_t);
        }
        axpy(1.0, &d_t, &mut grads[B_IN]);
        let mut gtp = vec![0.0; h * e];
        outer_acc(&d_t, &cache.temb, &mut gtp);
        axpy(1.0, &gtp, &mut grads[TIME_PROJ]);
        cond_grad
    }

    fn clamp(&self, mut x0: Vec<f64>) -> Vec<f64> {
        if let Some(c) = self.config.clamp {
            x0.iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
        x0
    }

    pub fn to_checkpoint(
        &self,
        seed: u64,
        step: u64,
        metadata: serde_json::Value,
    ) -> Result<Checkpoint> {
        let mut params = self.params.clone();
        params.round_to_f32();
        Ok(Checkpoint {
            kind: PRIOR_KIND.into(),
            config: serde_json::to_value(&self.config)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            seed,
            step,
            metadata,
            params,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(PRIOR_KIND)?;
        let config: PriorConfig = ck.typed_config()?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }
}

/// Draws from the prior. `steps == 0` returns the condition unchanged.
/// A full-length chain starts from pure Gaussian noise; a shorter
/// conditional chain starts from the condition noised to step `steps − 1`.
pub fn sample(
    prior: &PriorModel,
    condition: Option<&[f64]>,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let total = prior.schedule.len();
    if steps > total {
        return Err(Error::StepOutOfRange {
            t: steps,
            len: total,
        });
    }
    if steps == 0 {
        return condition
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::InvalidArgument("zero-step sampling needs a condition".into()));
    }
    let n = prior.config.len();
    let noise = gaussian_vec_seeded(split_seed(seed, "prior/init"), n);
    let mut x = match condition {
        Some(c) if steps < total => forward_noise(c, steps - 1, &noise, &prior.schedule)?,
        _ => noise,
    };
    for t in (0..steps).rev() {
        let x0_hat = prior.clamp(prior.predict_x0(&x, t, condition)?);
        x = denoise_step(
            &x,
            t,
            &x0_hat,
            &prior.schedule,
            split_seed_index(seed, "prior/step", t as u64),
        )?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// One x0-prediction training example: the noised input, its step and the
/// noise that produced it.
pub fn draw_training_step(
    schedule: &NoiseSchedule,
    x0: &[f64],
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, usize)> {
    let t = rng.gen_range(0..schedule.len());
    let eps = gaussian_vec(rng, x0.len());
    Ok((forward_noise(x0, t, &eps, schedule)?, t))
}

/// Trains an unconditional prior on a fixed set of embeddings. Returns the
/// model and the per-epoch mean loss.
pub fn train_unconditional(
    data: &[Vec<f64>],
    config: PriorConfig,
    train: &PriorTrainConfig,
    seed: u64,
) -> Result<(PriorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("prior training data"));
    }
    if config.conditional {
        return Err(Error::Config(
            "train_unconditional needs conditional = false".into(),
        ));
    }
    let mut model = PriorModel::new(config, split_seed(seed, "prior/init"))?;
    let mut opt = Adam::new(train.adam, &model.params);
    let mut rng = rng_from_seed(split_seed(seed, "prior/train"));
    let mut trace = Vec::with_capacity(train.epochs);
    let batch = train.batch_size.max(1);
    for _ in 0..train.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = model.params.zeros_like();
            for &i in chunk {
                let (x_t, t) = draw_training_step(&model.schedule, &data[i], &mut rng)?;
                let (x0_hat, cache) = model.predict_x0_train(&x_t, t, None)?;
                let (loss, mut g) = ddpm_loss_grad(&x0_hat, &data[i])?;
                g.iter_mut().for_each(|v| *v /= chunk.len() as f64);
                model.backward(&cache, &g, &mut grads);
                epoch_loss += loss;
            }
            opt.step(&mut model.params, &grads);
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok((model, trace))
}
