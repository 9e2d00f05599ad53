mod oracle;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use pipetteloc::ablation::{run_ablation, AblationConfig};
use pipetteloc::config::RunConfig;
use pipetteloc::enhancer::{collect_patches, enhance_scene, CycleGanBundle, GanSchedule};
use pipetteloc::evaluation::{benchmark_inference, evaluate, render_overlay, EvalConfig, Predictor};
use pipetteloc::localizer::LocalizerModel;
use pipetteloc::nn::{select_device, DEVICE_ENV};
use pipetteloc::synthdata::{generate_scenes, read_dataset, write_dataset, Domain};
use pipetteloc::trainer::train;
use pipetteloc::{GrayImage, LabeledScene};

use crate::oracle::Oracle;

#[derive(Parser)]
#[command(name = "pipetteloc", version, about = "Multi-pipette tip localization pipeline")]
struct Cli {
    /// Compute device: cpu, cuda or cuda:N.
    #[arg(long, global = true, env = DEVICE_ENV)]
    device: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the 64×64 desk-scale preset.
    #[arg(long)]
    small: bool,
    /// Override a configuration key, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.small => RunConfig::small(),
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            cfg.apply_override(k.trim(), v.trim())?;
        }
        Ok(cfg.effective())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_domain)]
        domain: Option<Domain>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the patch translator on tip crops of two datasets.
    TrainGan {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        /// Total epochs; the second half decays the learning rate linearly.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Replace tip neighbourhoods with translated patches.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-stage localizer schedule.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-epoch training report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Matched-distance metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the dataset's own scale.
        #[arg(long = "um-per-px")]
        um_per_px: Option<f64>,
        /// Comma-separated thresholds in µm; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-scene overlay images.
        #[arg(long)]
        overlays: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Inference latency per image.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Predict the tips of one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train and evaluate the four component configurations.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        /// Fraction of scenes held out for evaluation.
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        /// Translator checkpoint applied to every scene first.
        #[arg(long)]
        gan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a lookup checkpoint that memorizes a dataset's labels.
    Oracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    match s {
        "invivo_like" | "invivo" => Ok(Domain::InvivoLike),
        "exvivo_like" | "exvivo" => Ok(Domain::ExvivoLike),
        other => Err(format!("unknown domain `{other}` (invivo_like, exvivo_like)")),
    }
}

enum Model {
    Net(LocalizerModel),
    Oracle(Oracle),
}

impl Model {
    fn load(path: &Path, device: &pipetteloc::nn::Device) -> Result<Self> {
        if let Some(o) = Oracle::try_load(path)? {
            return Ok(Model::Oracle(o));
        }
        Ok(Model::Net(LocalizerModel::load(path, device)?))
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Model::Net(m) => m,
            Model::Oracle(o) => o,
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let device = || select_device(cli.device.as_deref());
    match cli.command {
        Command::Synth {
            count,
            out,
            seed,
            domain,
            cfg,
        } => {
            let mut scene = cfg.load()?.scene;
            if let Some(s) = seed {
                scene.rng_seed = s;
            }
            if let Some(d) = domain {
                scene.domain = d;
            }
            let scenes = generate_scenes(&scene, count)?;
            write_dataset(&scenes, &out)?;
            info!("wrote {count} scenes to {}", out.display());
        }
        Command::TrainGan {
            noisy,
            clean,
            epochs,
            out,
            resume,
            cfg,
        } => {
            let rc = cfg.load()?;
            let mut schedule = GanSchedule {
                checkpoint_path: Some(out.clone()),
                ..rc.gan_schedule.clone()
            };
            if let Some(n) = epochs {
                schedule.decay_epochs = n / 2;
                schedule.constant_epochs = n - n / 2;
            }
            let noisy = collect_patches(&read_dataset(&noisy)?)?;
            let clean = collect_patches(&read_dataset(&clean)?)?;
            info!("{} noisy and {} clean patches", noisy.len(), clean.len());
            let dev = device()?;
            let mut bundle = match resume {
                Some(p) => CycleGanBundle::load(&p, &dev)?,
                None => CycleGanBundle::new(rc.gan.clone(), &dev)?,
            };
            bundle.train(&noisy, &clean, &schedule)?;
            bundle.save(&out)?;
            println!("{}", serde_json::to_string_pretty(bundle.history())?);
        }
        Command::Enhance { input, ckpt, out } => {
            let bundle = CycleGanBundle::load(&ckpt, &device()?)?;
            let scenes = read_dataset(&input)?;
            let enhanced = scenes
                .iter()
                .map(|s| enhance_scene(s, &bundle))
                .collect::<pipetteloc::Result<Vec<_>>>()?;
            write_dataset(&enhanced, &out)?;
            info!("enhanced {} scenes into {}", enhanced.len(), out.display());
        }
        Command::Train {
            data,
            out,
            report,
            cfg,
        } => {
            let rc = cfg.load()?;
            let scenes = read_dataset(&data)?;
            let model = LocalizerModel::new(rc.localizer.clone(), &device()?)?;
            let mut tc = rc.train.clone();
            if tc.checkpoint_dir.is_none() {
                tc.checkpoint_dir = out.parent().map(Path::to_path_buf);
            }
            let r = train(&model, &scenes, &tc, &rc.heatmap, &rc.loss)?;
            model.save(&out)?;
            if let Some(p) = report.or(rc.paths.report.clone()) {
                r.write_json(&p)?;
            }
            println!(
                "initial val loss {:.5}, final val loss {:.5}",
                r.initial_val_loss, r.final_val_loss
            );
        }
        Command::Eval {
            ckpt,
            data,
            um_per_px,
            thresholds,
            report,
            overlays,
            cfg,
        } => {
            let rc = cfg.load()?;
            let model = Model::load(&ckpt, &device()?)?;
            let scenes = read_dataset(&data)?;
            let Some(first) = scenes.first() else {
                bail!("{} contains no scenes", data.display());
            };
            let um = um_per_px.unwrap_or(first.um_per_pixel);
            let cfg = EvalConfig {
                thresholds_um: thresholds.unwrap_or(rc.eval.thresholds_um.clone()),
                um_per_pixel: um,
                heatmap: rc.heatmap.clone(),
                ..rc.eval.clone()
            };
            let r = evaluate(model.predictor(), &scenes, &cfg)?;
            if let Some(dir) = overlays {
                std::fs::create_dir_all(&dir)?;
                for (scene, rec) in scenes.iter().zip(&r.per_scene) {
                    let pred = model.predictor().predict_batch(&[&scene.image])?.remove(0);
                    render_overlay(scene, &pred, rec, um).save(&dir.join(format!("overlay_{:05}.png", rec.index)))?;
                }
            }
            for a in &r.accuracy_at {
                println!("Acc@{} um: {:.2}%", a.threshold_um, a.percent);
            }
            println!("mean matched distance: {:.4} um", r.mean_matched_distance_um);
            println!("mean squared distance: {:.4} um^2", r.mean_squared_distance_um2);
            if let Some(iou) = r.heatmap_iou {
                println!("heatmap IoU: {iou:.4}");
            }
            if let Some(p) = report {
                write_json(&p, &r)?;
            }
        }
        Command::Bench {
            ckpt,
            batch,
            iters,
            warmup,
        } => {
            let model = LocalizerModel::load(&ckpt, &device()?)?;
            let r = benchmark_inference(&model, batch, iters, warmup)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Infer { image, ckpt, overlay } => {
            let model = Model::load(&ckpt, &device()?)?;
            let img = GrayImage::load_png(&image)?;
            let pred = model.predictor().predict_batch(&[&img])?.remove(0);
            let tips: Vec<[f64; 2]> = pred.tips.iter().map(|p| [p.x, p.y]).collect();
            println!("{}", serde_json::json!({ "tips": tips }));
            if let Some(path) = overlay {
                let scene = LabeledScene {
                    image: img,
                    tips: Vec::new(),
                    domain: Domain::InvivoLike,
                    um_per_pixel: 1.0,
                };
                let rec = pipetteloc::evaluation::SceneRecord {
                    index: 0,
                    truth: Vec::new(),
                    predicted: pred.tips.clone(),
                    matches: Vec::new(),
                    heatmap_iou: None,
                };
                render_overlay(&scene, &pred, &rec, 1.0).save(&path)?;
            }
        }
        Command::Ablation {
            data,
            test_fraction,
            gan,
            out,
            cfg,
        } => {
            let rc = cfg.load()?;
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                bail!("--test-fraction must lie in (0, 1)");
            }
            let scenes = read_dataset(&data)?;
            let n_test = ((scenes.len() as f64 * test_fraction).round() as usize).clamp(1, scenes.len() - 1);
            let (train_set, test_set) = scenes.split_at(scenes.len() - n_test);
            let dev = device()?;
            let bundle = gan.map(|p| CycleGanBundle::load(&p, &dev)).transpose()?;
            let ac = AblationConfig {
                localizer: rc.localizer.clone(),
                train: rc.train.clone(),
                heatmap: rc.heatmap.clone(),
                loss: rc.loss.clone(),
            };
            let enhancer = bundle.as_ref().map(|b| b as &dyn pipetteloc::enhancer::PatchTranslator);
            let table = run_ablation(&ac, train_set, test_set, enhancer, None, &dev)?;
            print!("{}", table.to_text());
            if let Some(p) = out {
                write_json(&p, &table)?;
            }
        }
        Command::Oracle { data, out } => {
            let scenes = read_dataset(&data)?;
            Oracle::from_scenes(&scenes).save(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
