use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use volflow::experiment::{run_e2e, E2eConfig};
use volflow::flow::{load_checkpoint, FlowConfig, FlowModel};
use volflow::metrics::{evaluate, parse_scores_csv, select_threshold, ThresholdSweep};
use volflow::patching::{mask_coverage, Patch};
use volflow::pipeline::{analyze_volume, calibrate, score_volume, Calibration, PipelineConfig, ScoreMode};
use volflow::preprocess::{clip_normalize, fallback_lung_mask, resample, PreprocessConfig};
use volflow::rvol::{read_mask, read_volume, write_mask, write_volume};
use volflow::synth::{generate_synthetic, SynthSpec};
use volflow::train::{log_csv, train, PatchPool, PatchSource, TrainConfig, VolumePatchSource};
use volflow::volume::{Mask, Volume};
use volflow::Real;

#[derive(Parser)]
#[command(name = "volflow", version, about = "3D normalizing-flow anomaly detection")]
struct Cli {
    /// Worker threads for scoring and batch gradients (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Grid overrides applied on top of the pipeline config file.
#[derive(Args)]
struct GridArgs {
    /// Patch edge in voxels (overrides the config file)
    #[arg(long)]
    patch_edge: Option<usize>,
    /// Voxels shared by neighbouring patches (overrides the config file)
    #[arg(long)]
    overlap: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Resample, mask and normalise a HU volume.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lung mask to resample alongside the volume.
        #[arg(long)]
        mask_in: Option<PathBuf>,
        /// Where to write the (resampled or fallback) lung mask.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        spacing: f64,
        #[arg(long, default_value_t = -1020.0, allow_hyphen_values = true)]
        hu_min: f64,
        #[arg(long, default_value_t = 200.0, allow_hyphen_values = true)]
        hu_max: f64,
    },
    /// Write seeded synthetic HU volumes with lung and lesion masks.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2.0)]
        spacing: f32,
        #[arg(long, default_value_t = 0)]
        lesions: usize,
        #[arg(long, default_value_t = 10.0)]
        lesion_radius_mm: f64,
        #[arg(long, default_value_t = 300.0)]
        lesion_shift: f64,
    },
    /// Train a flow on normalised patches or volume+mask pairs.
    Train {
        /// Directory of `.rvol` files. `<name>.rvol` pairs with
        /// `<name>_mask.rvol`; unpaired cubes are used as patches.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file of training and model settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV training log (default: next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        #[arg(long, default_value_t = 0.5)]
        min_mask_fraction: f64,
    },
    /// Build the reference score distribution from normal volumes.
    Calibrate {
        /// Directory of normalised `<name>.rvol` + `<name>_mask.rvol` pairs.
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        min_coverage: f64,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Score one volume and classify it.
    Score {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_map: Option<PathBuf>,
        #[arg(long)]
        out_json: PathBuf,
        /// Include every patch score in the JSON.
        #[arg(long)]
        per_patch: bool,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Compute AUROC, F1 and accuracy from an `id,score,label` CSV.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Validation CSV to select the threshold from, or a fixed value in cm³.
        #[arg(long)]
        threshold_from: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roc_csv: Option<PathBuf>,
    },
    /// Full seeded synthetic experiment written to one report directory.
    E2eSynth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
}

const MODEL_KEYS: [&str; 6] = [
    "levels",
    "flows_per_level",
    "patch_edge",
    "in_channels",
    "coupling_hidden",
    "scale_clamp",
];

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Splits a config file into model overrides (on the desk preset) and
/// training settings.
fn parse_train_config(text: &str) -> Result<(FlowConfig, TrainConfig)> {
    let mut model = FlowConfig::desk();
    let mut rest = String::new();
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("");
        let key_value = body.split_once('=').map(|(k, v)| (k.trim(), v.trim()));
        match key_value {
            Some((key, value)) if MODEL_KEYS.contains(&key) => {
                let bad = || format!("bad value for {key}: {value}");
                match key {
                    "levels" => model.levels = value.parse().with_context(bad)?,
                    "flows_per_level" => model.flows_per_level = value.parse().with_context(bad)?,
                    "patch_edge" => model.patch_edge = value.parse().with_context(bad)?,
                    "in_channels" => model.in_channels = value.parse().with_context(bad)?,
                    "coupling_hidden" => model.coupling_hidden = value.parse().with_context(bad)?,
                    _ => model.scale_clamp = value.parse().with_context(bad)?,
                }
            }
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    model.validate()?;
    Ok((model, TrainConfig::parse(&rest)?))
}

fn pipeline_config(path: Option<&Path>, grid: &GridArgs) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::parse(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(e) = grid.patch_edge {
        cfg.grid.patch_edge = e;
    }
    if let Some(o) = grid.overlap {
        cfg.grid.overlap = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn rvol_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "rvol"));
    files.sort();
    Ok(files)
}

fn is_auxiliary(path: &Path) -> bool {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    stem.ends_with("_mask") || stem.ends_with("_lesions")
}

fn mask_path(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    volume.with_file_name(format!("{stem}_mask.rvol"))
}

fn load_pairs(dir: &Path) -> Result<Vec<(PathBuf, Volume, Mask)>> {
    let mut out = Vec::new();
    for path in rvol_files(dir)?.into_iter().filter(|p| !is_auxiliary(p)) {
        let mp = mask_path(&path);
        if !mp.exists() {
            bail!("{} has no {}", path.display(), mp.display());
        }
        let v = read_volume(&path)?;
        let (m, _) = read_mask(&mp)?;
        m.ensure_matches(v.dims())?;
        out.push((path, v, m));
    }
    if out.is_empty() {
        bail!("no volume+mask pairs in {}", dir.display());
    }
    Ok(out)
}

fn training_source(dir: &Path, edge: usize, min_mask_fraction: f64) -> Result<Box<dyn PatchSource>> {
    let mut cases = Vec::new();
    let mut patches = Vec::new();
    for path in rvol_files(dir)?.into_iter().filter(|p| !is_auxiliary(p)) {
        let v = read_volume(&path)?;
        let mp = mask_path(&path);
        if mp.exists() {
            let (m, _) = read_mask(&mp)?;
            m.ensure_matches(v.dims())?;
            cases.push((v, m));
        } else if v.dims() == [edge; 3] {
            patches.push(Patch {
                origin: [0; 3],
                edge,
                data: v.into_voxels(),
            });
        } else {
            bail!("{} is neither an {edge}³ patch nor paired with a mask", path.display());
        }
    }
    match (cases.is_empty(), patches.is_empty()) {
        (false, true) => Ok(Box::new(VolumePatchSource {
            cases,
            edge,
            min_mask_fraction,
        })),
        (true, false) => Ok(Box::new(PatchPool { patches })),
        (true, true) => bail!("no training data in {}", dir.display()),
        (false, false) => bail!("{} mixes patches and volume+mask pairs", dir.display()),
    }
}

fn run_train<T: Real>(
    model_cfg: FlowConfig,
    cfg: &TrainConfig,
    source: &mut dyn PatchSource,
    out: &Path,
    log_path: &Path,
) -> Result<()> {
    let report = train::<T>(model_cfg, cfg, source, Some(out))?;
    fs::write(log_path, log_csv(&report.log)).with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "bits/dim {:.4} -> {:.4}; checkpoint {}",
        report.initial_bits_per_dim,
        report.final_bits_per_dim,
        out.display()
    );
    Ok(())
}

fn run_calibrate<T: Real>(
    pairs: &[(PathBuf, Volume, Mask)],
    model: &FlowModel<T>,
    cfg: &PipelineConfig,
    min_coverage: f64,
) -> Result<Calibration> {
    let mut scores = Vec::new();
    for (_, v, m) in pairs {
        let s = score_volume(v, m, model, &cfg.grid, ScoreMode::Parallel)?;
        scores.extend(
            s.iter()
                .filter(|p| mask_coverage(m, p.origin, cfg.grid.patch_edge) >= min_coverage)
                .map(|p| p.per_dim_nats),
        );
    }
    Ok(calibrate(&scores)?)
}

#[allow(clippy::too_many_arguments)]
fn run_score<T: Real>(
    volume: &Path,
    mask: &Path,
    model: &Path,
    calibration: &Path,
    cfg: &PipelineConfig,
    out_map: Option<&Path>,
    out_json: &Path,
    per_patch: bool,
) -> Result<()> {
    let v = read_volume(volume)?;
    let (m, _) = read_mask(mask)?;
    let model: FlowModel<T> = load_checkpoint(model)?;
    let cal: Calibration = serde_json::from_str(&read_text(calibration)?).context("parsing calibration")?;
    let a = analyze_volume(&v, &m, &model, cfg, &cal, ScoreMode::Parallel)?;
    let mut result = a.result;
    if let Some(p) = out_map {
        write_volume(&a.map.to_volume()?, p)?;
        result.logp_map_path = Some(p.display().to_string());
    }
    if per_patch {
        result.per_patch_scores = Some(a.scores);
    }
    fs::write(out_json, serde_json::to_string_pretty(&result)?)
        .with_context(|| format!("writing {}", out_json.display()))?;
    println!(
        "{:.3} cm³ anomalous -> {:?} (T = {} cm³)",
        result.anomaly_volume_cm3, result.label, result.threshold_t
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Preprocess {
            input,
            out,
            mask_in,
            mask_out,
            spacing,
            hu_min,
            hu_max,
        } => {
            let cfg = PreprocessConfig {
                target_spacing_mm: spacing,
                hu_min,
                hu_max,
                ..PreprocessConfig::default()
            };
            cfg.validate()?;
            let hu = resample(&read_volume(&input)?, spacing)?;
            let mask = match mask_in {
                Some(p) => {
                    let (m, s) = read_mask(&p)?;
                    let as_volume = Volume::new(
                        m.dims(),
                        s,
                        m.bits().iter().map(|&b| b as u8 as f32).collect(),
                        volflow::volume::ValueSpace::Normalized,
                    )?;
                    let r = resample(&as_volume, spacing)?;
                    Mask::new(r.dims(), r.voxels().iter().map(|&x| x >= 0.5).collect())?
                }
                None => {
                    let (m, status) = fallback_lung_mask(&hu);
                    log::info!("fallback lung mask: {status:?}, {} voxels", m.count());
                    m
                }
            };
            write_volume(&clip_normalize(&hu, &cfg)?, &out)?;
            if let Some(p) = mask_out {
                write_mask(&mask, hu.spacing(), &p)?;
            }
        }
        Command::Synth {
            out_dir,
            count,
            seed,
            size,
            spacing,
            lesions,
            lesion_radius_mm,
            lesion_shift,
        } => {
            fs::create_dir_all(&out_dir)?;
            for i in 0..count {
                let spec = SynthSpec {
                    lesion_count: lesions,
                    lesion_radius_mm,
                    lesion_intensity_shift: lesion_shift,
                    ..SynthSpec::normal([size; 3], [spacing; 3], seed.wrapping_add(i as u64))
                };
                let case = generate_synthetic(&spec)?;
                let name = format!("case{i:03}");
                write_volume(&case.volume, out_dir.join(format!("{name}.rvol")))?;
                write_mask(
                    &case.lung,
                    case.volume.spacing(),
                    out_dir.join(format!("{name}_mask.rvol")),
                )?;
                write_mask(
                    &case.lesions,
                    case.volume.spacing(),
                    out_dir.join(format!("{name}_lesions.rvol")),
                )?;
            }
            println!("wrote {count} cases to {}", out_dir.display());
        }
        Command::Train {
            data,
            config,
            out,
            log,
            precision,
            min_mask_fraction,
        } => {
            let text = match config {
                Some(p) => read_text(&p)?,
                None => String::new(),
            };
            let (model_cfg, train_cfg) = parse_train_config(&text)?;
            let mut source = training_source(&data, model_cfg.patch_edge, min_mask_fraction)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
            match precision {
                Precision::F32 => run_train::<f32>(model_cfg, &train_cfg, source.as_mut(), &out, &log_path)?,
                Precision::F64 => run_train::<f64>(model_cfg, &train_cfg, source.as_mut(), &out, &log_path)?,
            }
        }
        Command::Calibrate {
            volumes,
            model,
            config,
            out,
            min_coverage,
            grid,
        } => {
            let cfg = pipeline_config(config.as_deref(), &grid)?;
            let pairs = load_pairs(&volumes)?;
            let model: FlowModel<f32> = load_checkpoint(&model)?;
            let cal = run_calibrate(&pairs, &model, &cfg, min_coverage)?;
            fs::write(&out, serde_json::to_string(&cal)?)?;
            println!("{} reference scores from {} volumes", cal.sorted.len(), pairs.len());
        }
        Command::Score {
            volume,
            mask,
            model,
            calibration,
            config,
            out_map,
            out_json,
            per_patch,
            precision,
            grid,
        } => {
            let cfg = pipeline_config(config.as_deref(), &grid)?;
            let args = (
                &volume,
                &mask,
                &model,
                &calibration,
                &cfg,
                out_map.as_deref(),
                &out_json,
                per_patch,
            );
            match precision {
                Precision::F32 => run_score::<f32>(args.0, args.1, args.2, args.3, args.4, args.5, args.6, args.7)?,
                Precision::F64 => run_score::<f64>(args.0, args.1, args.2, args.3, args.4, args.5, args.6, args.7)?,
            }
        }
        Command::Evaluate {
            scores,
            threshold_from,
            out,
            roc_csv,
        } => {
            let test = parse_scores_csv(&read_text(&scores)?)?;
            let t = match threshold_from.parse::<f64>() {
                Ok(t) => t,
                Err(_) => {
                    let val = parse_scores_csv(&read_text(Path::new(&threshold_from))?)?;
                    let (t, j) = select_threshold(&val, &ThresholdSweep::default())?;
                    log::info!("validation threshold {t} cm³ (Youden J = {j:.4})");
                    t
                }
            };
            let metrics = evaluate(&test, t)?;
            fs::write(&out, serde_json::to_string_pretty(&metrics)?)?;
            if let Some(p) = roc_csv {
                fs::write(p, metrics.roc_csv())?;
            }
            println!(
                "AUROC {:.4}  F1 {:.4}  accuracy {:.4}  at T = {} cm³",
                metrics.auroc, metrics.f1, metrics.accuracy, metrics.chosen_t
            );
        }
        Command::E2eSynth {
            out_dir,
            seed,
            iterations,
            precision,
        } => {
            let mut cfg = E2eConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let report = match precision {
                Precision::F32 => run_e2e::<f32>(&cfg, &out_dir)?,
                Precision::F64 => run_e2e::<f64>(&cfg, &out_dir)?,
            };
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
    }
    Ok(())
}
