//! The `roadseg` command line. Every command validates its inputs before writing anything.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use roadseg_core::data::{foreground_ratio, generate_synthetic, Sample, SynthSpec, TilingPreset};
use roadseg_core::gradcheck::{run_suite, SUITES};
use roadseg_core::nn::{count_params, estimate_flops, export_activations};
use roadseg_core::train::evaluate;
use roadseg_core::{DualEncoderNet, ModelConfig, SegmentationModel, Tap};
use serde_json::json;

use crate::checkpoint::{AnyModel, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{create_dir, list_by_stem, load_tiles, read_rgb, save_gray, write_dataset};
use crate::error::{AppError, AppResult};
use crate::manifest::{DataSource, RunManifest};
use crate::trainer::{train, Outputs, Session};

/// Environment variable naming the default training data root.
pub const DATA_ENV: &str = "ROADSEG_DATA";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "roadseg", version, about = "Dual-encoder road segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the images/ + masks/ layout.
    SynthData {
        /// TOML generator spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write the manifest, log and checkpoints under --out.
    Train {
        /// TOML run configuration; the tiny defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training data root; falls back to the config, then to the environment.
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many optimizer steps have been taken in total.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Print the metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = roadseg_core::objectives::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "none", value_parser = parse_preset)]
        preset: TilingPreset,
    },
    /// Write a binary mask for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = roadseg_core::objectives::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run a finite-difference gradient suite.
    Gradcheck {
        /// One of the suite names, or `all`.
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the parameter count and FLOP estimate of a configuration.
    Summarize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_size)]
        input_size: (usize, usize),
    },
    /// Write normalized heat maps of intermediate feature maps.
    ExportActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated tap names such as `cffm-2`, groups (`cnn`, `sft`, `cffm`, `dec`) or `all`.
        #[arg(long, default_value = "all")]
        taps: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

fn parse_preset(s: &str) -> Result<TilingPreset, String> {
    TilingPreset::parse(s).map_err(|e| e.to_string())
}

fn load_run_config(path: Option<&Path>) -> AppResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_spec(path: Option<&Path>) -> AppResult<SynthSpec> {
    let Some(path) = path else { return Ok(SynthSpec::default()) };
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

/// Fails unless `path` is absent or an empty directory, so no earlier output gets mixed in.
fn require_fresh_dir(path: &Path) -> AppResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut entries = fs::read_dir(path).map_err(|e| AppError::io(path, e))?;
    if entries.next().is_some() {
        return Err(AppError::Config(format!("output directory {} is not empty", path.display())));
    }
    Ok(())
}

fn check_sizes(cfg: &ModelConfig, samples: &[Sample], role: &str) -> AppResult<()> {
    for s in samples {
        cfg.check_input(s.height(), s.width())
            .map_err(|e| AppError::Config(format!("{role} sample `{}`: {e}", s.meta.source)))?;
    }
    Ok(())
}

fn check_threshold(t: f64) -> AppResult<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(AppError::Config(format!("threshold must lie in (0, 1), got {t}")))
    }
}

/// Parses `args` (program name first) and runs the command, writing reports to `out`.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are not errors; usage mistakes count as validation.
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> AppResult<()> {
    let say = |out: &mut dyn Write, text: String| -> AppResult<()> {
        out.write_all(text.as_bytes()).map_err(|e| AppError::io("<stdout>", e))
    };
    match cmd {
        Command::SynthData { spec, count, out: dir, seed } => {
            let mut spec = load_spec(spec.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            if count == 0 {
                return Err(AppError::Config("--count must be at least 1".into()));
            }
            require_fresh_dir(&dir)?;
            let samples = generate_synthetic(&spec, count)?;
            let mut manifest = RunManifest::new("synth-data");
            manifest.seed = Some(spec.seed);
            manifest.options = json!({ "spec": spec, "count": count });
            manifest.artifacts = vec!["images".into(), "masks".into()];
            manifest.write(&dir)?;
            write_dataset(&dir, &samples)?;
            let ratios: Vec<f64> = samples.iter().map(|s| foreground_ratio(&s.mask)).collect();
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            let max = ratios.iter().copied().fold(0.0, f64::max);
            let min = ratios.iter().copied().fold(1.0, f64::min);
            say(
                out,
                format!("samples={count}\nforeground_ratio_mean={mean}\nforeground_ratio_min={min}\nforeground_ratio_max={max}\n"),
            )
        }
        Command::Train {
            config,
            data,
            val,
            out: dir,
            lr,
            epochs,
            seed,
            resume,
            stop_at,
        } => {
            let mut cfg = load_run_config(config.as_deref())?;
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            cfg.data.train = data.or(cfg.data.train.take());
            cfg.data.val = val.or(cfg.data.val.take());
            cfg.validate()?;
            let train_root = cfg
                .data
                .train
                .clone()
                .ok_or_else(|| AppError::Config(format!("no training data: pass --data, set data.train or {DATA_ENV}")))?;
            let train_set = load_tiles(&train_root, cfg.data.preset)?.samples;
            check_sizes(&cfg.model, &train_set, "training")?;
            let val_set = match &cfg.data.val {
                Some(v) => {
                    let s = load_tiles(v, cfg.data.preset)?.samples;
                    check_sizes(&cfg.model, &s, "validation")?;
                    Some(s)
                }
                None => None,
            };
            let ckpt_dir = dir.join(&cfg.train.checkpoint_dir);
            let mut session = match &resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let s = Session::<DualEncoderNet>::resume(&ckpt, &cfg.train)?;
                    if s.model.config() != &cfg.model {
                        return Err(AppError::Config("checkpoint model differs from the configured model".into()));
                    }
                    s
                }
                None => {
                    require_fresh_dir(&dir)?;
                    Session::new(DualEncoderNet::new(cfg.model.clone())?, &cfg.train)
                }
            };

            let mut manifest = RunManifest::new("train");
            manifest.seed = Some(cfg.train.seed);
            manifest.options = json!({ "stop_at": stop_at });
            manifest.data.push(DataSource {
                role: "train".into(),
                path: train_root.clone(),
                samples: train_set.len(),
            });
            if let (Some(p), Some(s)) = (&cfg.data.val, &val_set) {
                manifest.data.push(DataSource {
                    role: "val".into(),
                    path: p.clone(),
                    samples: s.len(),
                });
            }
            manifest.resumed_from = resume.clone();
            manifest.artifacts = vec![LOG_FILE.into(), cfg.train.checkpoint_dir.clone()];
            manifest.config = Some(cfg.clone());
            manifest.write(&dir)?;

            let outputs = Outputs::in_dir(ckpt_dir, dir.join(LOG_FILE));
            let summary = train(&mut session, &train_set, val_set.as_deref(), &cfg.train, &outputs, stop_at)?;
            let mut text = format!(
                "steps={}\ntotal_steps={}\nfinal_loss={}\n",
                summary.final_step,
                summary.total_steps,
                summary.losses.last().copied().unwrap_or(f64::NAN)
            );
            if let Some(iou) = session.state.best_iou {
                text += &format!("best_iou={iou}\nbest_step={}\n", session.state.best_step.unwrap_or(0));
            }
            say(out, text)
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
            preset,
        } => {
            check_threshold(threshold)?;
            let model = AnyModel::restore(&Checkpoint::load(&checkpoint)?)?;
            let samples = load_tiles(&data, preset)?.samples;
            if let AnyModel::DualEncoder(net) = &model {
                check_sizes(net.config(), &samples, "evaluation")?;
            }
            let report = evaluate(&model, &samples, threshold)?;
            say(out, report.to_key_values())
        }
        Command::Predict {
            checkpoint,
            images,
            out: dir,
            threshold,
        } => {
            check_threshold(threshold)?;
            let model = AnyModel::restore(&Checkpoint::load(&checkpoint)?)?;
            let files = list_by_stem(&images)?;
            if files.is_empty() {
                return Err(AppError::Config(format!("no images in {}", images.display())));
            }
            let mut inputs = Vec::with_capacity(files.len());
            for (stem, path) in &files {
                let img = read_rgb(path)?;
                if let AnyModel::DualEncoder(net) = &model {
                    let (_, h, w, _) = img.dims4()?;
                    net.config()
                        .check_input(h, w)
                        .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
                }
                inputs.push((stem.clone(), img));
            }
            let mut manifest = RunManifest::new("predict");
            manifest.options = json!({ "checkpoint": checkpoint, "threshold": threshold });
            manifest.data.push(DataSource {
                role: "images".into(),
                path: images.clone(),
                samples: inputs.len(),
            });
            manifest.artifacts = inputs.iter().map(|(s, _)| PathBuf::from(format!("{s}.png"))).collect();
            manifest.write(&dir)?;
            for (stem, img) in &inputs {
                let (_, h, w, _) = img.dims4()?;
                let pred = model.predict(img)?;
                let levels = pred.probabilities.data().iter().map(|&p| if p > threshold { 255 } else { 0 }).collect();
                save_gray(&dir.join(format!("{stem}.png")), h, w, levels)?;
            }
            say(out, format!("predicted={}\n", inputs.len()))
        }
        Command::Gradcheck { module, seed } => {
            let names: Vec<&str> = if module == "all" {
                SUITES.to_vec()
            } else if SUITES.contains(&module.as_str()) {
                vec![module.as_str()]
            } else {
                return Err(AppError::Config(format!("unknown module `{module}`; expected one of: all, {}", SUITES.join(", "))));
            };
            let mut failed = Vec::new();
            for name in names {
                let report = run_suite(name, seed)?;
                let verdict = if report.passed() { "ok" } else { "FAIL" };
                say(
                    out,
                    format!(
                        "{name}: max_rel_error={:.3e} tolerance={:e} coordinates={} {verdict}\n",
                        report.max_rel_error(),
                        report.tolerance,
                        report.coordinates()
                    ),
                )?;
                if !report.passed() {
                    failed.push(name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(AppError::GradCheck(failed.join(", ")))
            }
        }
        Command::Summarize { config, input_size } => {
            let cfg = load_run_config(config.as_deref())?;
            let (h, w) = input_size;
            let flops = estimate_flops(&cfg.model, h, w)?;
            say(
                out,
                format!(
                    "input={h}x{w}\nparams={}\nflops_conv={}\nflops_attention={}\nflops_other={}\nflops_total={}\n",
                    count_params(&cfg.model),
                    flops.conv,
                    flops.attention,
                    flops.other,
                    flops.total()
                ),
            )
        }
        Command::ExportActivations {
            checkpoint,
            image,
            taps,
            out: dir,
        } => {
            let taps = Tap::parse_selector(&taps)?;
            let net = match AnyModel::restore(&Checkpoint::load(&checkpoint)?)? {
                AnyModel::DualEncoder(n) => n,
                AnyModel::SingleConv(_) => return Err(AppError::Config("the single-conv baseline has no intermediate taps".into())),
            };
            let img = read_rgb(&image)?;
            let (_, h, w, _) = img.dims4()?;
            net.config().check_input(h, w)?;
            let mut manifest = RunManifest::new("export-activations");
            manifest.options = json!({
                "checkpoint": checkpoint,
                "image": image,
                "taps": taps.iter().map(Tap::to_string).collect::<Vec<_>>(),
            });
            manifest.artifacts = taps.iter().map(|t| PathBuf::from(format!("{t}.png"))).collect();
            create_dir(&dir)?;
            manifest.write(&dir)?;
            for map in export_activations(&net, &img, &taps)? {
                save_gray(&dir.join(format!("{}.png", map.tap)), map.height, map.width, map.to_levels())?;
            }
            say(out, format!("taps={}\n", taps.len()))
        }
    }
}
