use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aqs_tensor::gradcheck::{run_case, TOLERANCE};
use aqsnet::count::count_params_flops;
use aqsnet::data::{
    generate_scenes, image_planes, mask_from_pgm, netpbm, read_dataset, sqa_ground_truth, write_dataset, SceneConfig,
};
use aqsnet::gradcheck::all_cases;
use aqsnet::metrics::Tally;
use aqsnet::train::{evaluate, predict_scenes, train, AllBackground, Predictor, TrainConfig};
use aqsnet::{AqsError, AqsNet, ModelConfig, Result};
use aqs_tensor::Tensor;
use clap::{Parser, Subcommand, ValueEnum};

const WEIGHTS: &str = "weights.aqsw";
const MODEL_CONFIG: &str = "model.json";

#[derive(Parser)]
#[command(name = "aqsnet", version, about = "Segmentation quality assessment: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    GenData {
        /// Scene configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// First scene index (use disjoint ranges for train and test sets).
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes weights.aqsw, model.json and train_log.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Use the narrow desk-scale widths instead of the defaults.
        #[arg(long)]
        compact: bool,
        /// Initial ViT weights (AQSW, `vit.*` entries).
        #[arg(long)]
        vit_weights: Option<PathBuf>,
    },
    /// Score a predictor on a dataset; writes metrics.json and metrics.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding weights.aqsw and model.json.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
        predictor: PredictorKind,
        /// Also write per-scene label maps and overlays.
        #[arg(long)]
        overlays: bool,
    },
    /// Predict the quality map of one image + mask.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_overlay: Option<PathBuf>,
    },
    /// Quality labels from a segmentation and its ground truth, no model.
    DiffMasks {
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_overlay: Option<PathBuf>,
        /// Source image for the overlay background; the ground truth is used
        /// when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter totals and multiply-accumulates.
    Count {
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        compact: bool,
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Model,
    AllBackground,
}

fn model_config(path: Option<&Path>, compact: bool) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => ModelConfig::from_json(&fs::read_to_string(p)?)?,
        None if compact => ModelConfig::compact(),
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(dir: &Path) -> Result<AqsNet> {
    let cfg = ModelConfig::from_json(&fs::read_to_string(dir.join(MODEL_CONFIG))?)?;
    AqsNet::load(&cfg, fs::File::open(dir.join(WEIGHTS))?)
}

fn write_overlay(path: &Path, w: usize, h: usize, rgb: &[u8], labels: &[u8]) -> Result<()> {
    Ok(fs::write(path, netpbm::encode_ppm(w, h, &netpbm::qa_overlay(rgb, labels)))?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, count, start, seed } => {
            let mut cfg = match config {
                Some(p) => SceneConfig::from_json(&fs::read_to_string(p)?)?,
                None => SceneConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scenes = generate_scenes(&cfg, start, count)?;
            write_dataset(&out, &cfg, start, &scenes)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { data, out, model_config: mc, train_config, compact, vit_weights } => {
            let cfg = model_config(mc.as_deref(), compact)?;
            let tc = match train_config {
                Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            let (_, scenes) = read_dataset(&data)?;
            let mut net = AqsNet::new(&cfg)?;
            if let Some(p) = vit_weights {
                net.load_tensors(aqs_tensor::weights::read(fs::File::open(p)?)?, &["vit."])?;
            }
            let log = train(&mut net, &scenes, &tc, |e| eprintln!("epoch {:>3}  loss {:.5}", e.epoch, e.loss))?;
            fs::create_dir_all(&out)?;
            net.save(fs::File::create(out.join(WEIGHTS))?)?;
            fs::write(out.join(MODEL_CONFIG), serde_json::to_string_pretty(&cfg)?)?;
            fs::write(out.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
            println!("initial loss {:.5}, final loss {:.5}", log.initial_loss, log.final_loss);
        }
        Command::Eval { data, out, model, predictor, overlays } => {
            let (_, scenes) = read_dataset(&data)?;
            let report = match predictor {
                PredictorKind::AllBackground => evaluate(&AllBackground as &dyn Predictor, &scenes, 16)?,
                PredictorKind::Model => {
                    let dir = model.ok_or_else(|| AqsError::Usage("--model is required with --predictor model".into()))?;
                    let net = load_model(&dir)?;
                    let preds = predict_scenes(&net, &scenes, 16)?;
                    let mut tally = Tally::default();
                    fs::create_dir_all(&out)?;
                    for (i, (s, p)) in scenes.iter().zip(&preds).enumerate() {
                        tally.add(p, &s.labels)?;
                        if overlays {
                            fs::write(out.join(format!("{i:05}_pred.pgm")), netpbm::encode_pgm(s.width, s.height, p))?;
                            write_overlay(&out.join(format!("{i:05}_overlay.ppm")), s.width, s.height, &s.image, p)?;
                        }
                    }
                    if tally.is_empty() {
                        return Err(AqsError::Usage("evaluation set is empty".into()));
                    }
                    tally.report()
                }
            };
            fs::create_dir_all(&out)?;
            fs::write(out.join("metrics.json"), report.to_json())?;
            fs::write(out.join("metrics.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Infer { model, image, mask, out_labels, out_overlay } => {
            let net = load_model(&model)?;
            let img = netpbm::decode_as(&fs::read(image)?, 3)?;
            let m = mask_from_pgm(&fs::read(mask)?)?;
            if (img.width, img.height) != (m.width, m.height) {
                return Err(AqsError::Validation("image and mask sizes differ".into()));
            }
            let (w, h) = (img.width, img.height);
            let it = Tensor::new(vec![1, 3, h, w], image_planes(&img.data, w * h))?;
            let mt = Tensor::new(vec![1, 1, h, w], m.data.iter().map(|&v| v as f32).collect())?;
            let labels = net.predict(&it, &mt)?;
            fs::write(&out_labels, netpbm::encode_pgm(w, h, &labels))?;
            if let Some(p) = out_overlay {
                write_overlay(&p, w, h, &img.data, &labels)?;
            }
        }
        Command::DiffMasks { seg, gt, out_labels, out_overlay, image } => {
            let s = mask_from_pgm(&fs::read(seg)?)?;
            let g = mask_from_pgm(&fs::read(gt)?)?;
            let labels = sqa_ground_truth(&s, &g)?;
            fs::write(&out_labels, netpbm::encode_pgm(s.width, s.height, &labels))?;
            if let Some(p) = out_overlay {
                let rgb = match image {
                    Some(i) => {
                        let img = netpbm::decode_as(&fs::read(i)?, 3)?;
                        if (img.width, img.height) != (s.width, s.height) {
                            return Err(AqsError::Validation("image and masks differ in size".into()));
                        }
                        img.data
                    }
                    None => g.data.iter().flat_map(|&v| [v * 255; 3]).collect(),
                };
                write_overlay(&p, s.width, s.height, &rgb, &labels)?;
            }
            let (missed, mistaken) = (labels.iter().filter(|&&l| l == 1).count(), labels.iter().filter(|&&l| l == 2).count());
            println!("missed {missed} px, mistaken {mistaken} px");
        }
        Command::Gradcheck { trials, seed } => {
            let mut all_ok = true;
            for case in all_cases() {
                let r = run_case(&case, trials, seed)?;
                all_ok &= r.passed;
                println!("{:<4} {:<26} trials {:>3}  max rel err {:.3e}", if r.passed { "ok" } else { "FAIL" }, r.name, r.trials, r.max_rel_err);
            }
            println!("tolerance {TOLERANCE:e}: {}", if all_ok { "all passed" } else { "FAILED" });
            return Ok(all_ok);
        }
        Command::Count { model_config: mc, compact, size } => {
            let cfg = model_config(mc.as_deref(), compact)?;
            let c = count_params_flops(&cfg, size, size)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
