//! Command-line surface: `sparseconv <complete|train|synth|eval|mask-report>`.

mod config;

pub use config::{parse_run_config, parse_run_config_str, Precision, RunConfig};

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    evaluate, load_dataset_split, read_depth_png, read_image_png, shaded_image, synth_scanlines,
    write_depth_png, write_image_png, write_manifest, write_mask_png, DepthMap, DepthModel,
    ManifestEntry,
};
use crate::error::{Error, Result};
use crate::layers::{si_conv_mask, sisl_mask, ValidityMask};
use crate::network::{
    build_dvmn, checkpoint_dtype, load_checkpoint, save_checkpoint, DvmnModel, NetworkConfig,
};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::training::{train_loop, Dataset};

#[derive(Parser)]
#[command(
    name = "sparseconv",
    about = "Sparsity-invariant depth completion: inference, training, synthetic data, evaluation and mask analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a sparse depth map with a trained checkpoint.
    Complete(CompleteArgs),
    /// Train from a key=value run configuration file.
    Train(TrainArgs),
    /// Generate synthetic scan-line samples plus a manifest.
    Synth(SynthArgs),
    /// Evaluate completed depth maps against ground truth by file name.
    Eval(EvalArgs),
    /// Propagate a validity mask through the depth encoder and report
    /// per-layer masks and densities.
    MaskReport(MaskReportArgs),
}

#[derive(Args)]
struct CompleteArgs {
    /// Sparse input depth map (16-bit PNG).
    #[arg(long)]
    depth: PathBuf,
    /// Guidance image (8-bit RGB PNG).
    #[arg(long)]
    image: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output depth map path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (key=value format, versioned).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives sparse/, image/, gt/ and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    /// Scan lines per map.
    #[arg(long, default_value_t = 8)]
    lines: usize,
    /// Per-pixel dropout probability on scan lines.
    #[arg(long, default_value_t = 0.6)]
    dropout: f64,
    /// Scene model: planar_ground, constant or ramp.
    #[arg(long, default_value = "planar_ground")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted depth maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth depth maps.
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct MaskReportArgs {
    /// Output directory for mask images and the density table.
    #[arg(long)]
    out: PathBuf,
    /// Take the input mask from this depth map instead of synthesizing one.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    lines: usize,
    #[arg(long, default_value_t = 0.6)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    channel_base: usize,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 6)]
    bottlenecks_per_stage: usize,
    #[arg(long, default_value_t = 4)]
    sisl_count: usize,
    #[arg(long, default_value_t = 2)]
    d_switch: usize,
}

/// Entry point shared by `main` and the CLI tests.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string()))?;
    match cli.command {
        Command::Complete(args) => cmd_complete(args),
        Command::Train(args) => cmd_train(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::MaskReport(args) => cmd_mask_report(args),
    }
}

fn cmd_complete(args: CompleteArgs) -> Result<()> {
    match checkpoint_dtype(&args.checkpoint)? {
        Dtype::F32 => complete_with::<f32>(&args),
        Dtype::F64 => complete_with::<f64>(&args),
    }
}

fn complete_with<T: Scalar>(args: &CompleteArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<T>(&args.checkpoint)?;
    let sparse = read_depth_png(&args.depth)?;
    let image = read_image_png::<T>(&args.image)?;
    let depth = sparse.to_tensor::<T>();
    let mask = sparse.mask::<T>();
    println!("input mask density: {:.6}", mask.density());

    let (h, w) = (sparse.height(), sparse.width());
    let is = image.shape();
    if (is.height, is.width) != (h, w) {
        return Err(Error::shape(
            "complete",
            format!("image {}x{} vs depth {h}x{w}", is.height, is.width),
        ));
    }

    let factor = model.config().downsample_factor();
    let pad_h = (factor - h % factor) % factor;
    let pad_w = (factor - w % factor) % factor;
    let pred = if pad_h == 0 && pad_w == 0 {
        model.forward(&depth, &mask, &image)?
    } else {
        eprintln!(
            "warning: {h}x{w} not divisible by {factor}; reflect-padding by {pad_h} rows and {pad_w} columns"
        );
        let depth_p = depth.pad_reflect(pad_h, pad_w)?;
        let mask_p = ValidityMask::from_nonzero(&depth_p)?;
        let image_p = image.pad_reflect(pad_h, pad_w)?;
        let out = model.forward(&depth_p, &mask_p, &image_p)?;
        out.crop_to(h, w)?
    };
    let completed = DepthMap::from_prediction(&pred)?;
    write_depth_png(&completed, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = parse_run_config(&args.config)?;
    match run.precision {
        Precision::F32 => train_with::<f32>(&run),
        Precision::F64 => train_with::<f64>(&run),
    }
}

fn train_with<T: Scalar>(run: &RunConfig) -> Result<()> {
    let data: Dataset<T> = load_dataset_split(&run.train_manifest, run.val_manifest.as_deref())?;
    let (mut model, resume_state) = match &run.resume {
        Some(path) => {
            let (model, state) = load_checkpoint::<T>(path)?;
            (model, state)
        }
        None => (build_dvmn::<T>(&run.network, run.model_seed)?, None),
    };

    std::fs::create_dir_all(&run.out_dir)
        .map_err(|e| Error::io(run.out_dir.display().to_string(), e))?;
    let log_path = run.out_dir.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let report = train_loop(&mut model, &data, &run.options, resume_state.as_ref(), &mut log)?;
    save_checkpoint(&model, None, run.out_dir.join("final.ckpt"))?;

    if report.aborted_on_nan {
        eprintln!("training aborted on a non-finite loss; last checkpoints kept");
    }
    if let Some(last) = report.logs.last() {
        println!(
            "trained {} epochs, final train loss {:.6}, best val RMSE {:.3} mm",
            report.logs.len(),
            last.train_loss,
            report.best_val_rmse_mm
        );
    } else {
        println!("no epochs run; wrote initialization checkpoint");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let model = DepthModel::parse(&args.model)?;
    let dirs = ["sparse", "image", "gt"].map(|d| args.out.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    let mut entries = Vec::with_capacity(args.count);
    let mut density_sum = 0.0;
    for i in 0..args.count {
        let (sparse, gt) = synth_scanlines(
            args.height,
            args.width,
            args.lines,
            args.dropout,
            model,
            args.seed.wrapping_add(i as u64),
        )?;
        let image = shaded_image::<f32>(&gt);
        let name = format!("{i:04}.png");
        write_depth_png(&sparse, dirs[0].join(&name))?;
        write_image_png(&image, dirs[1].join(&name))?;
        write_depth_png(&gt, dirs[2].join(&name))?;
        density_sum += sparse.density();
        entries.push(ManifestEntry {
            id: format!("{i:04}"),
            sparse: PathBuf::from("sparse").join(&name),
            image: PathBuf::from("image").join(&name),
            gt: PathBuf::from("gt").join(&name),
        });
    }
    write_manifest(&entries, args.out.join("manifest.tsv"))?;
    println!(
        "wrote {} samples to {} (mean sparse density {:.4})",
        args.count,
        args.out.display(),
        density_sum / args.count.max(1) as f64
    );
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let iter = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in iter {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred_names = png_names(&args.pred)?;
    let gt_names = png_names(&args.gt)?;
    let paired: Vec<&String> = pred_names.iter().filter(|n| gt_names.contains(n)).collect();
    for n in pred_names.iter().filter(|n| !gt_names.contains(*n)) {
        eprintln!("warning: {n} has no ground-truth counterpart; skipped");
    }
    for n in gt_names.iter().filter(|n| !pred_names.contains(*n)) {
        eprintln!("warning: {n} has no prediction; skipped");
    }
    if paired.is_empty() {
        return Err(Error::invalid("no file pairs to evaluate"));
    }

    println!("# file\trmse_mm\tmae_mm\tirmse_1/km\timae_1/km\tpixels");
    let (mut rmse, mut mae, mut irmse, mut imae) = (0.0, 0.0, 0.0, 0.0);
    for name in &paired {
        let pred = read_depth_png(args.pred.join(name))?;
        let gt = read_depth_png(args.gt.join(name))?;
        let m = evaluate(&pred, &gt)?;
        println!(
            "{name}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
            m.rmse_mm, m.mae_mm, m.irmse_per_km, m.imae_per_km, m.evaluated_pixels
        );
        rmse += m.rmse_mm;
        mae += m.mae_mm;
        irmse += m.irmse_per_km;
        imae += m.imae_per_km;
    }
    let n = paired.len() as f64;
    println!(
        "mean\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
        rmse / n,
        mae / n,
        irmse / n,
        imae / n,
        paired.len()
    );
    Ok(())
}

fn cmd_mask_report(args: MaskReportArgs) -> Result<()> {
    let mask: ValidityMask<f32> = match &args.depth {
        Some(path) => read_depth_png(path)?.mask(),
        None => {
            let (sparse, _) = synth_scanlines(
                args.height,
                args.width,
                args.lines,
                args.dropout,
                DepthModel::PlanarGround,
                args.seed,
            )?;
            sparse.mask()
        }
    };

    let cfg = NetworkConfig {
        channel_base: args.channel_base,
        stages: args.stages,
        bottlenecks_per_stage: args.bottlenecks_per_stage,
        sisl_count: args.sisl_count,
        d_switch: args.d_switch,
        ..NetworkConfig::default()
    };
    let model: DvmnModel<f32> = build_dvmn(&cfg, args.seed)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    write_mask_png(mask.tensor(), args.out.join("00_input.png"))?;

    // First-layer comparison: plain 3x3 window versus the switch layer.
    let plain = si_conv_mask(&mask, 1, 1, 1)?;
    let switched = sisl_mask(&mask, 1, cfg.d_switch, 1)?;
    write_mask_png(plain.tensor(), args.out.join("first_layer_plain.png"))?;
    write_mask_png(switched.tensor(), args.out.join("first_layer_sisl.png"))?;

    let trace = model.layer_mask_trace(&mask)?;
    let mut table = String::from("# layer\tdensity\n");
    table.push_str(&format!("input\t{:.6}\n", mask.density()));
    table.push_str(&format!("first_layer_plain\t{:.6}\n", plain.density()));
    table.push_str(&format!("first_layer_sisl\t{:.6}\n", switched.density()));
    for (i, entry) in trace.iter().enumerate() {
        let file = format!("{:02}_{}.png", i + 1, entry.name.replace('.', "_"));
        write_mask_png(entry.mask.tensor(), args.out.join(&file))?;
        table.push_str(&format!("{}\t{:.6}\n", entry.name, entry.density));
    }
    let table_path = args.out.join("densities.tsv");
    std::fs::write(&table_path, &table)
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;

    println!(
        "input density {:.4}; first layer plain {:.4} vs switch {:.4}",
        mask.density(),
        plain.density(),
        switched.density()
    );
    println!("wrote {} layer masks to {}", trace.len(), args.out.display());
    std::io::stdout().flush().ok();
    Ok(())
}
