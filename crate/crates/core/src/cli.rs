//! Command-line front end: `prepare`, `train`, `super-resolve`, `evaluate`,
//! plus `synth` for generating demo scenes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{super_resolve, super_resolve_triple, GeneratorConfig, TileOptions, DEFAULT_TILE};
use crate::metrics::{comparison_table, evaluate, MetricsOptions, MetricsReport, ReportMeta};
use crate::prepare::{load_prepared, load_triple, prepare_scenes, PreparedManifest, Role, SplitRatios, MANIFEST_NAME};
use crate::raster::{
    load_band_group, load_scene, save_band_group, save_scene, BandGroup, RasterFormat, ScalingMode,
};
use crate::resample::{upsample_bicubic, DEFAULT_BLUR_SIGMA};
use crate::synthetic::synth_scenes;
use crate::trainer::{TrainConfig, Trainer};

/// Everything one experiment needs, read from a single JSON file.
///
/// `mode` and `seed` at the top level are authoritative and are copied into
/// the training section. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ScalingMode,
    pub seed: u64,
    /// Scene manifests (`*.scene.json`) consumed by `prepare`.
    pub scenes: Vec<PathBuf>,
    pub prepared_dir: PathBuf,
    pub output_dir: PathBuf,
    pub format: RasterFormat,
    pub split: SplitRatios,
    pub blur_sigma: f64,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub train: TrainConfig,
    pub metrics: MetricsOptions,
    pub tile: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: ScalingMode::X2,
            seed: 0,
            scenes: Vec::new(),
            prepared_dir: "prepared".into(),
            output_dir: "run".into(),
            format: RasterFormat::Raw,
            split: SplitRatios::default(),
            blur_sigma: DEFAULT_BLUR_SIGMA,
            generator: None,
            discriminator: None,
            train: TrainConfig::default(),
            metrics: MetricsOptions::default(),
            tile: DEFAULT_TILE,
        }
    }
}

impl RunConfig {
    /// Loads a config and rebases its relative paths on the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.scenes.iter_mut().for_each(rebase);
        rebase(&mut cfg.prepared_dir);
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator
            .clone()
            .unwrap_or_else(|| GeneratorConfig::for_mode(self.mode))
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        self.discriminator
            .clone()
            .unwrap_or_else(|| DiscriminatorConfig::new(self.mode.out_bands(), self.train.patch_size()))
    }

    /// Copies the top-level mode and seed down and checks the sections agree.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.mode = self.mode;
        self.train.seed = self.seed;
        if let Some(g) = &self.generator {
            if g.mode != self.mode {
                return Err(Error::InvalidConfig(format!(
                    "generator section is {} but the run is {}",
                    g.mode, self.mode
                )));
            }
        }
        if self.tile == 0 {
            return Err(Error::InvalidConfig("tile must be positive".into()));
        }
        self.split.validate()?;
        self.train.validate()?;
        self.generator_config().validate()?;
        if !self.train.ablation_content_only {
            self.discriminator_config().validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "s2sr", version, about = "Guided super-resolution for Sentinel-2 band groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ScalingMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<RasterFormat>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade scenes into training triples and write the split manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Extra scene manifests, appended to the configured list.
        #[arg(long = "scene")]
        scenes: Vec<PathBuf>,
        /// Output directory (overrides `prepared_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a generator on a prepared dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Prepared manifest (defaults to `<prepared_dir>/manifest.json`).
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long)]
        ablation_content_only: bool,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve a scene, or the degraded inputs of a prepared triple.
    SuperResolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene manifest, or a prepared manifest together with `--triple`.
        #[arg(long)]
        scene: PathBuf,
        /// Scene id inside a prepared manifest.
        #[arg(long)]
        triple: Option<String>,
        /// Output raster.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score super-resolved rasters against a reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reference raster.
        #[arg(long)]
        gt: PathBuf,
        /// Raster to score, reported as method `sr`.
        #[arg(long)]
        sr: Option<PathBuf>,
        /// More rasters as `NAME=PATH`, one comparison row each.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Baseline computed from `--lr` (only `bicubic` is known).
        #[arg(long)]
        baseline: Option<String>,
        /// Low-resolution input for the baseline.
        #[arg(long)]
        lr: Option<PathBuf>,
        /// Write the reports here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic scenes for demos and smoke tests.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Side of the 10 m grid, a multiple of 6.
        #[arg(long, default_value_t = 120)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<ScalingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<RasterFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
            if let Some(g) = cfg.generator.as_mut() {
                g.mode = m;
                g.out_bands = m.out_bands();
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.format {
            cfg.format = f;
        }
        Ok(cfg)
    }
}

/// Parses `std::env::args`, runs the command and maps errors to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), single_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Prepare { common, scenes, out: dir } => {
            let mut cfg = common.run_config()?;
            cfg.scenes.extend(scenes);
            if let Some(d) = dir {
                cfg.prepared_dir = d;
            }
            cmd_prepare(&cfg, out).map(drop)
        }
        Command::Train {
            common,
            prepared,
            ablation_content_only,
            out: dir,
        } => {
            let mut cfg = common.run_config()?;
            cfg.train.ablation_content_only |= ablation_content_only;
            if let Some(d) = dir {
                cfg.output_dir = d;
            }
            let manifest = prepared.unwrap_or_else(|| cfg.prepared_dir.join(MANIFEST_NAME));
            cmd_train(&cfg, &manifest, out)
        }
        Command::SuperResolve {
            common,
            checkpoint,
            scene,
            triple,
            out: path,
        } => {
            let cfg = common.run_config()?;
            let format = common.format.unwrap_or_else(|| RasterFormat::from_path(&path));
            cmd_super_resolve(&cfg, &checkpoint, &scene, triple.as_deref(), &path, format, out).map(drop)
        }
        Command::Evaluate {
            common,
            gt,
            sr,
            methods,
            baseline,
            lr,
            out: json,
        } => {
            let cfg = common.run_config()?;
            let mut inputs = Vec::new();
            if let Some(p) = sr {
                inputs.push(("sr".to_string(), p));
            }
            for m in methods {
                let (name, path) = m.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!("--methods entries are NAME=PATH, got {m:?}"))
                })?;
                inputs.push((name.to_string(), PathBuf::from(path)));
            }
            let baseline_lr = match (baseline.as_deref(), lr) {
                (None, _) => None,
                (Some("bicubic"), Some(lr)) => Some(lr),
                (Some("bicubic"), None) => {
                    return Err(Error::InvalidConfig("--baseline bicubic needs --lr".into()))
                }
                (Some(other), _) => {
                    return Err(Error::InvalidConfig(format!("unknown baseline {other:?}")))
                }
            };
            let reports = cmd_evaluate(&gt, &inputs, baseline_lr.as_deref(), &cfg.metrics)?;
            write_reports(&reports, json.as_deref(), out)
        }
        Command::Synth {
            common,
            count,
            size,
            out: dir,
        } => {
            let cfg = common.run_config()?;
            for s in synth_scenes(count, size, cfg.seed)? {
                let p = save_scene(&s, &dir, cfg.format)?;
                writeln_io(out, format_args!("{}", p.display()))?;
            }
            Ok(())
        }
    }
}

fn writeln_io(out: &mut dyn std::io::Write, args: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{args}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_prepare(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<PreparedManifest> {
    if cfg.scenes.is_empty() {
        return Err(Error::InvalidConfig("no scenes listed".into()));
    }
    let scenes = cfg
        .scenes
        .iter()
        .map(|p| load_scene(p))
        .collect::<Result<Vec<_>>>()?;
    let m = prepare_scenes(
        &scenes,
        cfg.mode,
        cfg.blur_sigma,
        &cfg.split,
        cfg.seed,
        &cfg.prepared_dir,
        cfg.format,
    )?;
    writeln_io(
        out,
        format_args!(
            "prepared {} {} triples in {} (train {}, validation {}, test {})",
            m.triples.len(),
            m.mode,
            cfg.prepared_dir.display(),
            m.count(Role::Train),
            m.count(Role::Validation),
            m.count(Role::Test)
        ),
    )?;
    Ok(m)
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &mut dyn std::io::Write) -> Result<()> {
    if !manifest.is_file() {
        return Err(Error::InvalidConfig(format!(
            "prepared manifest {} not found; run `s2sr prepare` first",
            manifest.display()
        )));
    }
    let mut cfg = cfg.clone();
    let (m, train) = load_prepared(manifest, Role::Train)?;
    let (_, validation) = load_prepared(manifest, Role::Validation)?;
    if m.mode != cfg.mode {
        return Err(Error::InvalidConfig(format!(
            "prepared data is {} but the run is {}",
            m.mode, cfg.mode
        )));
    }
    cfg.resolve()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| Error::json(&dir, e))?;
    let cfg_path = dir.join("run_config.json");
    std::fs::write(&cfg_path, resolved + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let mut trainer = Trainer::new(
        train,
        validation,
        &cfg.generator_config(),
        &cfg.discriminator_config(),
        cfg.train.clone(),
    )?
    .with_output_dir(&dir);
    trainer.run()?;
    if trainer.best_generator().is_none() {
        // no validation split: the final generator is the best we have
        let best = crate::checkpoint::Checkpoint::generator_only(trainer.checkpoint().generator);
        crate::checkpoint::save_checkpoint(&best, &dir.join("best.ckpt"))?;
    }
    writeln_io(
        out,
        format_args!(
            "trained {} steps ({}); outputs in {}",
            trainer.current_step(),
            if cfg.train.ablation_content_only { "content-only" } else { "adversarial" },
            dir.display()
        ),
    )
}

pub fn cmd_super_resolve(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene: &Path,
    triple: Option<&str>,
    out_path: &Path,
    format: RasterFormat,
    out: &mut dyn std::io::Write,
) -> Result<BandGroup> {
    let ck = load_checkpoint(checkpoint)?;
    let g = &ck.generator;
    let sr = match triple {
        None => super_resolve(g, &load_scene(scene)?, g.config.mode, cfg.tile)?,
        Some(id) => {
            let m = PreparedManifest::read(scene)?;
            let entry = m.triples.iter().find(|t| t.scene_id == id).ok_or_else(|| {
                Error::InvalidConfig(format!("triple {id:?} not in {}", scene.display()))
            })?;
            let base = scene.parent().unwrap_or_else(|| Path::new("."));
            let t = load_triple(entry, m.mode, base)?;
            super_resolve_triple(
                g,
                &t,
                TileOptions {
                    tile: cfg.tile,
                    ..Default::default()
                },
            )?
        }
    };
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_band_group(&sr, out_path, format)?;
    writeln_io(
        out,
        format_args!("{} {}x{} -> {}", g.config.mode, sr.rows(), sr.cols(), out_path.display()),
    )?;
    writeln_io(out, format_args!("{:<6} {:>10} {:>10} {:>10} {:>10}", "band", "min", "max", "mean", "std"))?;
    for (k, band) in sr.bands.iter().enumerate() {
        let p = sr.pixels.index_axis(ndarray::Axis(0), k).mapv(|v| v as f64);
        let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        writeln_io(
            out,
            format_args!(
                "{band:<6} {lo:>10.1} {hi:>10.1} {:>10.1} {:>10.1}",
                p.mean().unwrap_or(0.0),
                p.std(0.0)
            ),
        )?;
    }
    Ok(sr)
}

/// One report per input plus an optional bicubic row computed from `lr`.
pub fn cmd_evaluate(
    gt_path: &Path,
    inputs: &[(String, PathBuf)],
    baseline_lr: Option<&Path>,
    options: &MetricsOptions,
) -> Result<Vec<MetricsReport>> {
    if inputs.is_empty() && baseline_lr.is_none() {
        return Err(Error::InvalidConfig(
            "nothing to evaluate: give --sr, --methods or --baseline".into(),
        ));
    }
    let gt = load_band_group(gt_path)?;
    let scene_id = gt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mode = guess_mode(&gt);
    let meta = |method: &str| ReportMeta {
        mode,
        scene_ids: vec![scene_id.clone()],
        method: method.to_string(),
    };
    let mut reports = Vec::new();
    for (name, path) in inputs {
        let sr = load_band_group(path)?;
        let r = evaluate(&sr, &gt, options, meta(name)).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{name} ({}): {m}", path.display())),
            other => other,
        })?;
        reports.push(r);
    }
    if let Some(lr_path) = baseline_lr {
        let lr = load_band_group(lr_path)?;
        let (gh, gw) = gt.dims();
        let (lh, lw) = lr.dims();
        let factor = if lh > 0 && gh % lh == 0 && gw == lw * (gh / lh) {
            gh / lh
        } else {
            0
        };
        if factor < 2 {
            return Err(Error::ShapeMismatch(format!(
                "baseline input {lh}x{lw} is not an integer downscale of the reference {gh}x{gw}"
            )));
        }
        let mut up = upsample_bicubic(&lr, factor)?;
        up.gsd_m = gt.gsd_m;
        up.geo = gt.geo.clone();
        reports.push(evaluate(&up, &gt, options, meta("Bicubic"))?);
    }
    Ok(reports)
}

fn guess_mode(gt: &BandGroup) -> Option<ScalingMode> {
    [ScalingMode::X2, ScalingMode::X6]
        .into_iter()
        .find(|m| gt.band_ids() == m.target_bands())
}

fn write_reports(reports: &[MetricsReport], json: Option<&Path>, out: &mut dyn std::io::Write) -> Result<()> {
    writeln_io(out, format_args!("{}", comparison_table(reports)))?;
    for r in reports {
        writeln_io(out, format_args!("{}", r.band_table()))?;
    }
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(reports).map_err(|e| Error::json(p, e))?;
        std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
