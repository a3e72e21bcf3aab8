//! The subcommand pipelines, callable without going through the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{
    generate_synthetic_dataset, load_manifest, prepare_splits, save_manifest, DatasetManifest,
    FmriRecord, SynthConfig,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate, render_table, MetricReport};
use crate::reconstruction::{
    compute_payloads, reconstruct_payloads, run_inference, GuidanceFlags, InferenceConfig,
    Reconstruction, StreamModels,
};
use crate::rng::split_seed;
use crate::stream_high::{caption_targets, high_validation_loss, predict_h, train_high, HighModel};
use crate::stream_low::{latent_targets, low_validation_loss, predict_l, train_low, LowModel};
use crate::stream_mid::{
    embedding_targets, mid_validation_loss, predict_m_mlp, train_mid, MidModel,
};
use crate::training::{mean_vector, TrainReport};

use super::config::ExperimentConfig;
use super::plugins::PluginSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    High,
    Mid,
    Low,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::High => "high",
            Stream::Mid => "mid",
            Stream::Low => "low",
        }
    }
}

pub fn checkpoint_path(config: &ExperimentConfig, name: &str) -> PathBuf {
    config.checkpoint_dir().join(format!("{name}.ckpt"))
}

/// Summary of one command invocation, written to `runs/<command>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_digest: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    pub scalars: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunRecord {
    pub fn start(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config_digest: config.digest(),
            started_unix: now(),
            ..Self::default()
        }
    }

    pub fn finish(mut self, config: &ExperimentConfig) -> Result<Self> {
        self.finished_unix = now();
        let path = config
            .output_path()
            .join("runs")
            .join(format!("{}.json", self.command));
        write_json(&path, &self)?;
        Ok(self)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(value).expect("serialisable value");
    write_atomic(path, (text + "\n").as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

pub fn synth(config: &SynthConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let ds = generate_synthetic_dataset(config, seed)?;
    create_dir(out)?;
    save_manifest(&ds.manifest, out)?;
    info!(
        "wrote {} records and {} stimuli to {}",
        ds.manifest.records.len(),
        ds.manifest.stimuli.len(),
        out.display()
    );
    Ok(ds.manifest)
}

/// A loaded dataset with normalised train and averaged test records.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub train: Vec<FmriRecord>,
    pub test: Vec<FmriRecord>,
    pub plugins: PluginSet,
}

impl Experiment {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let manifest = match config.manifest_path() {
            Some(path) => load_manifest(&path)?,
            None => {
                generate_synthetic_dataset(&config.data.synth, split_seed(config.seed, "synth"))?
                    .manifest
            }
        };
        manifest.validate()?;
        let (train, test) = prepare_splits(&manifest);
        let plugins = PluginSet::build(&config.plugins, config.seed, &manifest.train_captions())?;
        Ok(Self {
            config,
            manifest,
            train,
            test,
            plugins,
        })
    }

    fn train_ids(&self) -> impl Iterator<Item = String> + '_ {
        self.train.iter().map(|r| r.stimulus_id.clone())
    }

    fn seed(&self, label: &str) -> u64 {
        split_seed(self.config.seed, label)
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            seed: self.seed("infer"),
            ..self.config.inference.clone()
        }
    }

    /// Trains one stream and writes its checkpoint(s). Validation losses
    /// and the constant-predictor baseline are measured on the test split.
    pub fn train(&self, stream: Stream) -> Result<RunRecord> {
        let mut run = RunRecord::start(&format!("train-{}", stream.name()), &self.config);
        let stimuli = &self.manifest.stimuli;
        let seed = self.seed(&format!("train/{}", stream.name()));
        let p = &self.plugins;
        let (report, val, baseline, checkpoints): (
            TrainReport,
            f64,
            f64,
            Vec<(String, Checkpoint)>,
        ) = match stream {
            Stream::High => {
                let cfg = &self.config.high;
                let (model, report) = train_high(&self.train, stimuli, p.text.as_ref(), cfg, seed)?;
                let targets = caption_targets(self.train_ids(), stimuli, p.text.as_ref())?;
                let mean = mean_vector(
                    self.train
                        .iter()
                        .flat_map(|r| targets[&r.stimulus_id].iter().map(Vec::as_slice)),
                );
                let val = high_validation_loss(&self.test, stimuli, p.text.as_ref(), |v| {
                    predict_h(v, &model)
                })?;
                let base = high_validation_loss(&self.test, stimuli, p.text.as_ref(), |_| {
                    Ok(mean.clone())
                })?;
                let ck = model.to_checkpoint(seed, &report)?;
                (report, val, base, vec![("high".into(), ck)])
            }
            Stream::Mid => {
                let cfg = &self.config.mid;
                let (model, report) =
                    train_mid(&self.train, stimuli, p.encoder.as_ref(), cfg, seed)?;
                let targets = embedding_targets(self.train_ids(), stimuli, p.encoder.as_ref())?;
                let mean = mean_vector(
                    self.train
                        .iter()
                        .map(|r| targets[&r.stimulus_id].as_slice()),
                );
                let val = mid_validation_loss(
                    &self.test,
                    stimuli,
                    p.encoder.as_ref(),
                    cfg.huber_delta,
                    |v| predict_m_mlp(v, &model),
                )?;
                let base = mid_validation_loss(
                    &self.test,
                    stimuli,
                    p.encoder.as_ref(),
                    cfg.huber_delta,
                    |_| Ok(mean.clone()),
                )?;
                let (mlp, prior) = model.to_checkpoints(seed, &report)?;
                (
                    report,
                    val,
                    base,
                    vec![("mid".into(), mlp), ("mid_prior".into(), prior)],
                )
            }
            Stream::Low => {
                let cfg = &self.config.low;
                let (model, report) = train_low(
                    &self.train,
                    stimuli,
                    p.latent.as_ref(),
                    p.teacher.as_ref(),
                    cfg,
                    seed,
                )?;
                let targets = latent_targets(self.train_ids(), stimuli, p.latent.as_ref(), None)?;
                let mean = mean_vector(
                    self.train
                        .iter()
                        .map(|r| targets[&r.stimulus_id].0.as_slice()),
                );
                let val = low_validation_loss(
                    &self.test,
                    stimuli,
                    p.latent.as_ref(),
                    cfg.huber_delta,
                    |v| predict_l(v, &model),
                )?;
                let base = low_validation_loss(
                    &self.test,
                    stimuli,
                    p.latent.as_ref(),
                    cfg.huber_delta,
                    |_| Ok(mean.clone()),
                )?;
                let ck = model.to_checkpoint(seed, &report)?;
                (report, val, base, vec![("low".into(), ck)])
            }
        };
        info!(
            "{}: validation loss {val:.6}, constant baseline {baseline:.6}",
            stream.name()
        );
        create_dir(&self.config.checkpoint_dir())?;
        for (name, ck) in checkpoints {
            let path = checkpoint_path(&self.config, &name);
            ck.save(&path)?;
            run.artifacts.push(path);
        }
        run.loss_curves.insert("train".into(), report.epoch_losses);
        run.scalars.insert("validation_loss".into(), val);
        run.scalars.insert("baseline_loss".into(), baseline);
        run.finish(&self.config)
    }

    /// Loads the checkpoints needed by `flags`.
    pub fn load_models(&self, flags: GuidanceFlags) -> Result<StreamModels> {
        let load = |name: &str| Checkpoint::load(&checkpoint_path(&self.config, name));
        Ok(StreamModels {
            high: flags
                .high
                .then(|| HighModel::from_checkpoint(&load("high")?))
                .transpose()?,
            mid: flags
                .mid
                .then(|| MidModel::from_checkpoints(&load("mid")?, &load("mid_prior")?))
                .transpose()?,
            low: flags
                .low
                .then(|| LowModel::from_checkpoint(&load("low")?))
                .transpose()?,
        })
    }

    fn ground_truth(&self) -> Result<Vec<Image>> {
        self.test
            .iter()
            .map(|r| Ok(self.manifest.stimulus(&r.stimulus_id)?.image.quantized()))
            .collect()
    }

    /// Reconstructs the test split and writes `recon/<flags>/<id>.png`,
    /// `captions.json` beside them and the ground truth under `gt/`.
    pub fn infer(&self, flags: GuidanceFlags) -> Result<(Vec<Reconstruction>, RunRecord)> {
        let mut run = RunRecord::start("infer", &self.config);
        let config = InferenceConfig {
            flags,
            ..self.inference_config()
        };
        let models = self.load_models(flags)?;
        let recons = run_inference(&self.test, &models, self.plugins.inference(), &config)?;
        let dir = self
            .config
            .output_path()
            .join("recon")
            .join(flags.to_string());
        create_dir(&dir)?;
        let mut captions = BTreeMap::new();
        for r in &recons {
            r.image
                .save_png(&dir.join(format!("{}.png", r.stimulus_id)))?;
            if let Some(c) = &r.caption {
                captions.insert(r.stimulus_id.clone(), c.clone());
            }
        }
        write_json(&dir.join("captions.json"), &captions)?;
        let gt_dir = self.config.output_path().join("gt");
        create_dir(&gt_dir)?;
        for r in &self.test {
            self.manifest
                .stimulus(&r.stimulus_id)?
                .image
                .save_png(&gt_dir.join(format!("{}.png", r.stimulus_id)))?;
        }
        run.artifacts.push(dir);
        run.artifacts.push(gt_dir);
        Ok((recons, run.finish(&self.config)?))
    }

    /// Runs all three streams once per record, then reconstructs and scores
    /// every non-empty guidance subset from those shared payloads.
    pub fn ablate(&self) -> Result<Vec<(String, MetricReport)>> {
        let mut run = RunRecord::start("ablate", &self.config);
        let config = InferenceConfig {
            flags: GuidanceFlags::ALL,
            ..self.inference_config()
        };
        config.validate()?;
        let models = self.load_models(GuidanceFlags::ALL)?;
        let plugins = self.plugins.inference();
        let payloads = self
            .test
            .par_iter()
            .map(|r| compute_payloads(r, &models, plugins, &config))
            .collect::<Result<Vec<_>>>()?;
        let gt = self.ground_truth()?;
        let mut rows = Vec::new();
        for flags in GuidanceFlags::subsets() {
            let images = self
                .test
                .par_iter()
                .zip(payloads.par_iter())
                .map(|(r, p)| {
                    reconstruct_payloads(&r.stimulus_id, p, flags, plugins, &config)
                        .map(|rec| rec.image.quantized())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut report =
                evaluate(&images, &gt, &self.plugins.extractors, &self.config.metrics)?;
            report.config_digest = self.config.digest();
            info!(
                "{flags}: pixcorr {:.3} ssim {:.3}",
                report.pixcorr, report.ssim
            );
            rows.push((flags.to_string(), report));
        }
        let json_path = self.config.output_path().join("ablation.json");
        let table_path = self.config.output_path().join("ablation.txt");
        let as_map: Vec<_> = rows
            .iter()
            .map(|(l, r)| serde_json::json!({"guidance": l, "report": r}))
            .collect();
        write_json(&json_path, &as_map)?;
        write_text(&table_path, &render_table(&rows))?;
        run.artifacts.extend([json_path, table_path]);
        for (label, r) in &rows {
            run.scalars.insert(format!("{label}/pixcorr"), r.pixcorr);
        }
        run.finish(&self.config)?;
        Ok(rows)
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset("image directory"));
    }
    Ok(names)
}

/// Scores every PNG in `gt_dir` against the same-named file in `recon_dir`
/// and writes `report.json` and `report.txt` to `out_dir`.
pub fn evaluate_dirs(
    recon_dir: &Path,
    gt_dir: &Path,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<MetricReport> {
    config.validate()?;
    let names = png_names(gt_dir)?;
    let load = |dir: &Path| -> Result<Vec<Image>> {
        names
            .iter()
            .map(|n| Image::load_png(&dir.join(n)))
            .collect()
    };
    let gt = load(gt_dir)?;
    let recon = load(recon_dir)?;
    let plugins = PluginSet::build(&config.plugins, config.seed, &[])?;
    let mut report = evaluate(&recon, &gt, &plugins.extractors, &config.metrics)?;
    report.config_digest = config.digest();
    create_dir(out_dir)?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_text(
        &out_dir.join("report.txt"),
        &render_table(&[("reconstruction".into(), report.clone())]),
    )?;
    Ok(report)
}
