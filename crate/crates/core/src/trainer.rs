//! Alternating adversarial training: one discriminator update, then one
//! generator update, per step.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::{num_workers_from_env, PatchBatch, PatchConfig, PatchSampler};
use crate::degrade::TrainingTriple;
use crate::discriminator::{d_init, BnMode, DiscriminatorConfig, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::generator::{
    init_params, super_resolve_triple, GeneratorConfig, GeneratorInput, GeneratorParams,
    TileOptions,
};
use crate::losses::{
    adversarial_loss_g, adversarial_loss_g_grad, content_loss, content_loss_grad,
    discriminator_loss, discriminator_loss_grad, LossWeights,
};
use crate::metrics::{evaluate, MetricsOptions, MetricsReport, ReportMeta};
use crate::nn::{Adam, AdamConfig, Parameters};
use crate::raster::ScalingMode;

/// Offset between the generator and discriminator init seeds.
const D_SEED_OFFSET: u64 = 0x5EED_D15C;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: ScalingMode,
    pub batch_size: usize,
    pub epochs: u64,
    /// Derived from the data when absent.
    pub steps_per_epoch: Option<u64>,
    /// Patch side on the gt grid; per-mode default when absent.
    pub patch_size: Option<usize>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub ablation_content_only: bool,
    /// Content-only steps before the adversarial term is enabled.
    pub g_pretrain_steps: u64,
    /// Write a numbered checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Validate every this many epochs (0 disables).
    pub validate_every: u64,
    /// Print a progress line every this many steps (0 disables).
    pub progress_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            mode: ScalingMode::X2,
            batch_size: 128,
            epochs: 56,
            steps_per_epoch: None,
            patch_size: None,
            lr_g: adam.lr,
            lr_d: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            loss_weights: LossWeights::default(),
            ablation_content_only: false,
            g_pretrain_steps: 0,
            checkpoint_every: 0,
            validate_every: 1,
            progress_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps must be positive");
        }
        self.loss_weights.validate()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
            .unwrap_or_else(|| PatchConfig::default_patch(self.mode))
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: Option<f64>,
    pub g_content: f64,
    pub g_adv: Option<f64>,
    pub d_real_mean: Option<f64>,
    pub d_fake_mean: Option<f64>,
    /// Optimizer update counters after this step.
    pub d_updates: u64,
    pub g_updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    /// Mean absolute error of the validation SR in normalized units.
    pub val_content: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    /// Newline-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json("<log>", e)))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

pub struct Trainer {
    config: TrainConfig,
    pub generator: GeneratorParams<f32>,
    pub discriminator: Option<DiscriminatorParams<f32>>,
    opt_g: Adam<f32>,
    opt_d: Option<Adam<f32>>,
    sampler: PatchSampler,
    validation: Vec<TrainingTriple>,
    step: u64,
    best_val: Option<f64>,
    best: Option<GeneratorParams<f32>>,
    log: TrainLog,
    out_dir: Option<PathBuf>,
    workers: usize,
}

fn check_consistency(
    t: &TrainConfig,
    g: &GeneratorConfig,
    d: Option<&DiscriminatorConfig>,
) -> Result<()> {
    t.validate()?;
    g.validate()?;
    if g.mode != t.mode {
        return Err(Error::InvalidConfig(format!(
            "generator mode {} differs from training mode {}",
            g.mode, t.mode
        )));
    }
    if let Some(d) = d {
        d.validate()?;
        if d.input_bands != g.out_bands {
            return Err(Error::InvalidConfig(format!(
                "discriminator reads {} bands, generator emits {}",
                d.input_bands, g.out_bands
            )));
        }
        if d.patch_size != t.patch_size() {
            return Err(Error::InvalidConfig(format!(
                "discriminator patch {} differs from training patch {}",
                d.patch_size,
                t.patch_size()
            )));
        }
    }
    Ok(())
}

fn mean(v: &Array1<f32>) -> f64 {
    v.iter().map(|&p| p as f64).sum::<f64>() / v.len().max(1) as f64
}

impl Trainer {
    pub fn new(
        train: Vec<TrainingTriple>,
        validation: Vec<TrainingTriple>,
        g_cfg: &GeneratorConfig,
        d_cfg: &DiscriminatorConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        let d_cfg = (!config.ablation_content_only).then_some(d_cfg);
        check_consistency(&config, g_cfg, d_cfg)?;
        let generator = init_params::<f32>(g_cfg, config.seed)?;
        let discriminator = d_cfg
            .map(|c| d_init::<f32>(c, config.seed.wrapping_add(D_SEED_OFFSET)))
            .transpose()?;
        let opt_g = Adam::new(config.adam(config.lr_g), &generator);
        let opt_d = discriminator
            .as_ref()
            .map(|d| Adam::new(config.adam(config.lr_d), d));
        let sampler = Self::sampler(train, &config, g_cfg.norm_scale)?;
        Ok(Self {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            sampler,
            validation,
            step: 0,
            best_val: None,
            best: None,
            log: TrainLog::default(),
            out_dir: None,
            workers: num_workers_from_env(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ck: Checkpoint,
        train: Vec<TrainingTriple>,
        validation: Vec<TrainingTriple>,
    ) -> Result<Self> {
        let config = ck.train_config.ok_or_else(|| {
            Error::InvalidConfig("checkpoint carries no training configuration".into())
        })?;
        check_consistency(
            &config,
            &ck.generator.config,
            ck.discriminator.as_ref().map(|d| &d.config),
        )?;
        if config.ablation_content_only != ck.discriminator.is_none() {
            return Err(Error::InvalidConfig(
                "checkpoint discriminator does not match the ablation flag".into(),
            ));
        }
        let opt_g = ck
            .opt_g
            .ok_or_else(|| Error::InvalidConfig("checkpoint has no optimizer state".into()))?;
        if ck.discriminator.is_some() && ck.opt_d.is_none() {
            return Err(Error::InvalidConfig(
                "checkpoint has no discriminator optimizer state".into(),
            ));
        }
        let sampler = Self::sampler(train, &config, ck.generator.config.norm_scale)?;
        Ok(Self {
            config,
            generator: ck.generator,
            discriminator: ck.discriminator,
            opt_g,
            opt_d: ck.opt_d,
            sampler,
            validation,
            step: ck.step,
            best_val: ck.best_val,
            best: None,
            log: TrainLog::default(),
            out_dir: None,
            workers: num_workers_from_env(),
        })
    }

    fn sampler(train: Vec<TrainingTriple>, config: &TrainConfig, norm: f64) -> Result<PatchSampler> {
        if let Some(t) = train.iter().find(|t| t.mode != config.mode) {
            return Err(Error::InvalidConfig(format!(
                "triple {} is {}, training mode is {}",
                t.scene_id, t.mode, config.mode
            )));
        }
        PatchSampler::new(
            train,
            PatchConfig {
                patch_size: config.patch_size(),
                batch_size: config.batch_size,
                seed: config.seed,
                norm_scale: norm,
                steps_per_epoch: config.steps_per_epoch,
            },
        )
    }

    /// Directory for the log, numbered/best/final checkpoints and failure dumps.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.sampler.steps_per_epoch()
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs * self.steps_per_epoch()
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn best_generator(&self) -> Option<&GeneratorParams<f32>> {
        self.best.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            opt_g: Some(self.opt_g.clone()),
            opt_d: self.opt_d.clone(),
            train_config: Some(self.config.clone()),
            best_val: self.best_val,
        }
    }

    fn adversarial_active(&self) -> bool {
        self.discriminator.is_some() && self.step >= self.config.g_pretrain_steps
    }

    /// One D update (when active) followed by one G update on `batch`.
    pub fn train_step(&mut self, batch: &PatchBatch<f32>) -> Result<StepRecord> {
        let step = self.step;
        let weights = self.config.loss_weights;
        let input = GeneratorInput {
            lr20: &batch.lr,
            lr60: batch.lr60.as_ref(),
            hr: &batch.hr,
        };
        let (sr, g_cache) = self.generator.forward_cached(&input)?;
        let g_content = content_loss(sr.view(), batch.gt.view())?;
        let mut d_sr = content_loss_grad(sr.view(), batch.gt.view())?;

        let mut rec = StepRecord {
            step,
            d_loss: None,
            g_content,
            g_adv: None,
            d_real_mean: None,
            d_fake_mean: None,
            d_updates: 0,
            g_updates: 0,
        };

        if self.adversarial_active() {
            let d = self.discriminator.as_mut().unwrap();
            let opt_d = self.opt_d.as_mut().unwrap();

            // D-step; generator outputs are constants here
            let real = d.forward_cached(&batch.gt, BnMode::Batch)?;
            let fake = d.forward_cached(&sr, BnMode::Batch)?;
            let (pr, pf) = (real.probs().to_vec(), fake.probs().to_vec());
            rec.d_loss = Some(discriminator_loss(&pr, &pf, weights.eps)?);
            rec.d_real_mean = Some(mean(real.probs()));
            rec.d_fake_mean = Some(mean(fake.probs()));
            let (gr, gf) = discriminator_loss_grad(&pr, &pf, weights.eps)?;
            let mut d_grads = d.zeros_like();
            d.backward(&real, &Array1::from(gr), &mut d_grads, false);
            d.backward(&fake, &Array1::from(gf), &mut d_grads, false);
            d.update_running_stats(&real);
            d.update_running_stats(&fake);
            opt_d.step(d, &d_grads);

            // G-step against the updated discriminator
            let fake = d.forward_cached(&sr, BnMode::Batch)?;
            let pf = fake.probs().to_vec();
            rec.g_adv = Some(adversarial_loss_g(&pf, &weights)?);
            if weights.lambda_adv != 0.0 {
                let lam = weights.lambda_adv as f32;
                let g_adv: Array1<f32> = adversarial_loss_g_grad(&pf, &weights)?
                    .into_iter()
                    .map(|v| v * lam)
                    .collect();
                d_sr += &d.input_gradient(&fake, &g_adv);
            }
        }

        let g_grads = self.generator.backward(&g_cache, &d_sr);
        self.opt_g.step(&mut self.generator, &g_grads);
        self.step += 1;
        rec.d_updates = self.opt_d.as_ref().map_or(0, |o| o.t);
        rec.g_updates = self.opt_g.t;
        self.check_finite(&rec)?;
        Ok(rec)
    }

    fn check_finite(&self, rec: &StepRecord) -> Result<()> {
        let values = [
            ("d_loss", rec.d_loss),
            ("g_content", Some(rec.g_content)),
            ("g_adv", rec.g_adv),
            ("d_real_mean", rec.d_real_mean),
            ("d_fake_mean", rec.d_fake_mean),
        ];
        let mut bad: Vec<String> = values
            .iter()
            .filter(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n.to_string())
            .collect();
        if !self.generator.all_finite() {
            bad.push("generator parameters".into());
        }
        if self.discriminator.as_ref().is_some_and(|d| !d.all_finite()) {
            bad.push("discriminator parameters".into());
        }
        if bad.is_empty() {
            return Ok(());
        }
        let mut what = bad.join(", ");
        if let Some(dir) = &self.out_dir {
            let dump = dir.join(format!("nonfinite_step{}.json", rec.step));
            let state = serde_json::json!({
                "step": rec.step,
                "record": rec,
                "non_finite": bad,
                "config": self.config,
            });
            if fs::create_dir_all(dir).is_ok()
                && fs::write(&dump, serde_json::to_vec_pretty(&state).unwrap_or_default()).is_ok()
            {
                what = format!("{what} (state dumped to {})", dump.display());
            }
        }
        Err(Error::NonFiniteLoss {
            step: rec.step,
            what,
        })
    }

    /// Validation SR metrics and normalized content loss over held-out triples.
    pub fn validate(&self) -> Result<Option<(f64, MetricsReport)>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let norm = self.generator.config.norm_scale;
        let mut reports = Vec::with_capacity(self.validation.len());
        let (mut abs, mut n) = (0.0, 0usize);
        for t in &self.validation {
            let sr = super_resolve_triple(&self.generator, t, TileOptions::default())?;
            abs += sr
                .pixels
                .iter()
                .zip(t.gt.pixels.iter())
                .map(|(a, b)| ((a - b) as f64).abs() / norm)
                .sum::<f64>();
            n += sr.pixels.len();
            reports.push(evaluate(
                &sr,
                &t.gt,
                &MetricsOptions::default(),
                ReportMeta {
                    mode: Some(t.mode),
                    scene_ids: vec![t.scene_id.clone()],
                    method: String::new(),
                },
            )?);
        }
        let method = if self.config.ablation_content_only {
            "content-only"
        } else {
            "gan"
        };
        Ok(Some((abs / n as f64, MetricsReport::mean_of(&reports, method)?)))
    }

    fn end_of_epoch(&mut self) -> Result<()> {
        let spe = self.steps_per_epoch();
        if self.step % spe != 0 {
            return Ok(());
        }
        let epoch = self.step / spe;
        let every = self.config.validate_every;
        if every == 0 || epoch % every != 0 {
            return Ok(());
        }
        let Some((val_content, metrics)) = self.validate()? else {
            return Ok(());
        };
        if self.config.progress_every > 0 {
            eprintln!(
                "epoch {epoch} step {}: val content {val_content:.5}, rmse {:.2}",
                self.step, metrics.aggregate.rmse
            );
        }
        self.log.records.push(LogRecord::Epoch(EpochRecord {
            epoch,
            step: self.step,
            val_content,
            metrics,
        }));
        if self.best_val.map_or(true, |b| val_content < b) {
            self.best_val = Some(val_content);
            self.best = Some(self.generator.clone());
            if let Some(dir) = &self.out_dir {
                let mut ck = Checkpoint::generator_only(self.generator.clone());
                ck.step = self.step;
                ck.best_val = self.best_val;
                save_checkpoint(&ck, &dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    }

    /// Trains until `until` total steps have been taken.
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        let start = self.step;
        if until <= start {
            return Ok(());
        }
        let mut batches = self.sampler.prefetch::<f32>(start, until, self.workers);
        while let Some((step, batch)) = batches.next() {
            debug_assert_eq!(step, self.step);
            let rec = self.train_step(&batch?)?;
            if self.config.progress_every > 0 && (step + 1) % self.config.progress_every == 0 {
                eprintln!(
                    "step {}: content {:.5} adv {} d {}",
                    step + 1,
                    rec.g_content,
                    rec.g_adv.map_or("-".into(), |v| format!("{v:.4}")),
                    rec.d_loss.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            self.log.records.push(LogRecord::Step(rec));
            self.end_of_epoch()?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                if let Some(dir) = &self.out_dir {
                    save_checkpoint(&self.checkpoint(), &dir.join(format!("step_{:08}.ckpt", self.step)))?;
                }
            }
        }
        Ok(())
    }

    /// Runs the configured schedule and writes final outputs when an output
    /// directory is set.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())?;
        if let Some(dir) = self.out_dir.clone() {
            self.write_outputs(&dir)?;
        }
        Ok(())
    }

    /// `final.ckpt` and `train_log.jsonl`; `best.ckpt` is kept up to date
    /// during training.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.checkpoint(), &dir.join("final.ckpt"))?;
        let path = dir.join("train_log.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.log.to_jsonl().as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn into_parts(self) -> (GeneratorParams<f32>, Option<DiscriminatorParams<f32>>, TrainLog) {
        (self.generator, self.discriminator, self.log)
    }
}

/// Trains from scratch and returns the final networks and the log.
pub fn train(
    train: Vec<TrainingTriple>,
    validation: Vec<TrainingTriple>,
    g_cfg: &GeneratorConfig,
    d_cfg: &DiscriminatorConfig,
    t_cfg: TrainConfig,
) -> Result<(GeneratorParams<f32>, Option<DiscriminatorParams<f32>>, TrainLog)> {
    let mut trainer = Trainer::new(train, validation, g_cfg, d_cfg, t_cfg)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
