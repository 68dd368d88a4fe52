//! Subcommand surface and handlers. Each handler is a thin wrapper over
//! the library: it resolves the configuration, runs one operation, writes
//! artifacts under `--out`, and prints a short summary.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::{Args, Parser, Subcommand};
use mmfas_core::checkpoint::{Checkpoint, Provenance};
use mmfas_core::data::{generate_dataset, load_dataset, write_dataset, Dataset, Split};
use mmfas_core::descriptors::Recipe;
use mmfas_core::gradcheck::DEFAULT_TOL;
use mmfas_core::image::{read_pgm, read_ppm, write_pgm, write_ppm, PlanarImage};
use mmfas_core::m2a2e::reconstruct_sample;
use mmfas_core::metrics::{apcer_bpcer, eer_threshold, hter, tpr_at_fpr, ScoreSet};
use mmfas_core::rng::{stream_rng, STREAM_MASK};
use mmfas_core::tensor::TensorError;
use mmfas_core::training::{
    self, apply_axis_point, finetune, run_point, score_dataset, sweep, validate_axis,
    SweepAxis, SweepBase, ThresholdRule,
};
use mmfas_core::vit::ViTModel;

use crate::battery;
use crate::config::{resolve, Overrides, Resolved};

#[derive(Parser)]
#[command(
    name = "mmfas",
    about = "Multimodal face anti-spoofing lab: descriptors, adapters, \
             masked-autoencoder pretraining, training and evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate the synthetic multimodal dataset on disk.
    GenData(GenDataArgs),
    /// Apply a descriptor recipe to one image file.
    Extract(ExtractArgs),
    /// Self-supervised reconstruction pretraining; writes a checkpoint.
    Pretrain(RunArgs),
    /// Supervised training with dev-based selection; writes a run record.
    Finetune(FinetuneArgs),
    /// Score files or a checkpoint against the metric suite.
    Evaluate(EvaluateArgs),
    /// One-axis ablation grid; writes per-point run dirs and summary.csv.
    Sweep(SweepArgs),
    /// Finite-difference verification of every differentiable module.
    Gradcheck(GradcheckArgs),
    /// Write input/masked/reconstruction image triptychs for one sample.
    DumpRecon(DumpReconArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per class per split unit (train holds 2n per attack type).
    #[arg(long)]
    pub n: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Input image (.ppm or .pgm).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Descriptor recipe name (raw, lbp, hog, plgf, hog_plgf, ...).
    #[arg(long)]
    pub recipe: String,
    /// Output image path (.ppm for 3 channels, .pgm for 1).
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump the exact floating-point map (one bit-pattern per line).
    #[arg(long)]
    pub float_dump: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct RunArgs {
    /// Directory for run artifacts.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// Directory for run artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of random initialization.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Test-split score CSV (score-file mode).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Dev-split score CSV the threshold is fixed on.
    #[arg(long)]
    pub threshold_from: Option<PathBuf>,
    /// Threshold policy: "eer" or "bpcer_target".
    #[arg(long, default_value = "eer")]
    pub policy: String,
    /// BPCER target for the bpcer_target policy.
    #[arg(long)]
    pub policy_target: Option<f64>,
    /// Score a trained checkpoint on the dataset instead of reading CSVs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Optional directory for the report and echoed config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Axis to vary: descriptor_recipe, adapter_kind, adapter_dim,
    /// adapter_position, mask_ratio, decoder_depth, pretrain_epochs,
    /// freeze_policy or modality_subset.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid values (defaults per axis). The
    /// modality_subset axis joins modalities with '+', e.g. "rgb,rgb+ir".
    #[arg(long)]
    pub grid: Option<String>,
    /// Directory for per-point run dirs and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker processes (1 = run in this process).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Attach the pretraining stage to every point even when the axis
    /// does not require it.
    #[arg(long, default_value_t = false)]
    pub with_pretrain: bool,
    /// Internal: run only these grid indices (spawned worker mode).
    #[arg(long, hide = true)]
    pub points: Option<String>,
    /// Internal: directory for summary-row fragments (worker mode).
    #[arg(long, hide = true)]
    pub rows_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Check only this target (default: the full battery).
    #[arg(long)]
    pub module: Option<String>,
}

#[derive(Args)]
pub struct DumpReconArgs {
    /// Directory for the triptych images.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining checkpoint to reconstruct with (default: fresh model).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Split to draw the sample from.
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Sample index within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Load the dataset from the configured root, or generate it in memory.
fn obtain_dataset(r: &Resolved) -> Result<Dataset, TensorError> {
    match &r.data_root {
        Some(root) => load_dataset(root),
        None => generate_dataset(r.seed, r.n_per_class, r.gen_image_size()),
    }
}

fn write_echo(dir: &Path, echo: &str) -> Result<(), TensorError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.echo"), echo)?;
    Ok(())
}

fn print_report(report: &mmfas_core::metrics::MetricReport) {
    println!("threshold {}", report.threshold);
    println!("dev_eer {}", report.dev_eer);
    println!("apcer {}", report.apcer);
    println!("bpcer {}", report.bpcer);
    println!("acer {}", report.acer);
    println!("hter {}", report.hter);
    println!("tpr {} (at fpr {})", report.tpr, report.fpr_target);
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

pub fn gen_data(args: &GenDataArgs) -> Result<(), TensorError> {
    let mut overrides = args.overrides.clone();
    if args.n.is_some() {
        overrides.n_per_class = args.n;
    }
    if args.size.is_some() {
        overrides.data_image_size = args.size;
    }
    let r = resolve(args.config.as_deref(), &overrides)?;
    let ds = generate_dataset(r.seed, r.n_per_class, r.gen_image_size())?;
    write_dataset(&ds, &args.out)?;
    write_echo(&args.out, &r.echo())?;
    println!(
        "wrote {} train / {} dev / {} test samples to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(())
}

fn read_any_image(path: &Path) -> Result<PlanarImage, TensorError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("pgm") => {
            let gray = read_pgm(path)?;
            PlanarImage::from_channels(&[gray])
        }
        other => Err(TensorError::InvalidArgument(format!(
            "unsupported image extension {other:?} (expected .ppm or .pgm)"
        ))),
    }
}

fn write_channels(path: &Path, img: &PlanarImage) -> Result<Vec<PathBuf>, TensorError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match img.channels {
        3 => {
            if ext != "ppm" {
                return Err(TensorError::InvalidArgument(format!(
                    "3-channel output needs a .ppm path, got {}",
                    path.display()
                )));
            }
            write_ppm(path, img)?;
            Ok(vec![path.to_path_buf()])
        }
        1 => {
            if ext != "pgm" {
                return Err(TensorError::InvalidArgument(format!(
                    "1-channel output needs a .pgm path, got {}",
                    path.display()
                )));
            }
            write_pgm(path, &img.channel(0))?;
            Ok(vec![path.to_path_buf()])
        }
        c => {
            // No common container holds c channels; write one PGM each.
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| {
                    TensorError::InvalidArgument(format!("bad output path {}", path.display()))
                })?;
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            let mut written = Vec::new();
            for i in 0..c {
                let p = dir.join(format!("{stem}_c{i}.pgm"));
                write_pgm(&p, &img.channel(i))?;
                written.push(p);
            }
            Ok(written)
        }
    }
}

pub fn extract(args: &ExtractArgs) -> Result<(), TensorError> {
    let r = resolve(args.config.as_deref(), &args.overrides)?;
    let recipe: Recipe = args.recipe.parse()?;
    let img = read_any_image(&args.input)?;
    let map = recipe.apply(&img, &r.descriptors)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let written = write_channels(&args.out, &map)?;
    if let Some(dump) = &args.float_dump {
        let mut text = format!("{} {} {}\n", map.channels, map.height, map.width);
        for v in &map.data {
            text.push_str(&format!("{:016x}\n", v.to_bits()));
        }
        std::fs::write(dump, text)?;
    }
    for p in &written {
        println!(
            "wrote {} ({} channels, {}x{})",
            p.display(),
            map.channels,
            map.height,
            map.width
        );
    }
    Ok(())
}

pub fn pretrain_cmd(args: &RunArgs) -> Result<(), TensorError> {
    let r = resolve(args.config.as_deref(), &args.overrides)?;
    let ds = obtain_dataset(&r)?;
    let echo = r.echo();
    let outcome = mmfas_core::m2a2e::pretrain::<f32>(&r.vit, &r.pretrain, &ds, r.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = Checkpoint::from_params(echo.clone(), Provenance::Pretrained, &outcome.params);
    let ckpt_path = args.out.join("checkpoint.bin");
    ckpt.save(&ckpt_path)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(args.out.join("losses.csv"), csv)?;
    write_echo(&args.out, &echo)?;
    println!(
        "pretrained {} epochs; final loss {}; checkpoint {}",
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().unwrap_or(&f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

pub fn finetune_cmd(args: &FinetuneArgs) -> Result<(), TensorError> {
    let r = resolve(args.config.as_deref(), &args.overrides)?;
    let ds = obtain_dataset(&r)?;
    let echo = r.echo();
    let mut model = ViTModel::<f32>::new(r.vit.clone(), r.adapter_opt(), r.seed)?;
    let provenance = match &args.from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let copied = model.load_matching(&ckpt.tensors_as::<f32>())?;
            println!("loaded {copied} tensors from {}", path.display());
            if ckpt.provenance == Provenance::Pretrained {
                Provenance::Pretrained
            } else {
                Provenance::File
            }
        }
        None => Provenance::Random,
    };
    let record = finetune(
        &mut model,
        &ds,
        &r.descriptors,
        &r.finetune,
        &echo,
        provenance,
        Some(&args.out),
    )?;
    println!(
        "selected epoch {}; dev EER {}; test ACER {}; artifacts in {}",
        record.selected_epoch,
        record.report.dev_eer,
        record.report.acer,
        args.out.display()
    );
    Ok(())
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), TensorError> {
    match (&args.checkpoint, &args.scores) {
        (Some(_), Some(_)) => Err(TensorError::InvalidArgument(
            "pass either --checkpoint or --scores, not both".into(),
        )),
        (Some(ckpt), None) => evaluate_checkpoint(args, ckpt),
        (None, Some(scores)) => evaluate_scores(args, scores),
        (None, None) => Err(TensorError::InvalidArgument(
            "evaluate needs --scores <csv> or --checkpoint <bin>".into(),
        )),
    }
}

fn evaluate_scores(args: &EvaluateArgs, scores: &Path) -> Result<(), TensorError> {
    let dev_path = args.threshold_from.as_ref().ok_or_else(|| {
        TensorError::InvalidArgument("score mode needs --threshold-from <dev csv>".into())
    })?;
    let dev = ScoreSet::read_csv(dev_path, Split::Dev)?;
    let test = ScoreSet::read_csv(scores, Split::Test)?;
    let rule = match args.policy.as_str() {
        "eer" => ThresholdRule::Eer,
        "bpcer_target" => ThresholdRule::BpcerTarget {
            target: args.policy_target.ok_or_else(|| {
                TensorError::InvalidArgument(
                    "bpcer_target policy needs --policy-target".into(),
                )
            })?,
        },
        other => {
            return Err(TensorError::InvalidArgument(format!(
                "unknown policy {other:?} (expected eer or bpcer_target)"
            )))
        }
    };
    let fpr = resolve(args.config.as_deref(), &args.overrides)?.fpr_target;
    let threshold = rule.threshold(&dev)?;
    let (_, dev_eer) = eer_threshold(&dev)?;
    let (apcer, bpcer) = apcer_bpcer(&test, threshold)?;
    let acer = mmfas_core::metrics::acer(&test, threshold)?;
    let hter_v = hter(&test, threshold)?;
    let (_, tpr) = tpr_at_fpr(&test, fpr)?;
    let report = mmfas_core::metrics::MetricReport {
        threshold,
        dev_eer,
        apcer,
        bpcer,
        acer,
        hter: hter_v,
        fpr_target: fpr,
        tpr,
    };
    print_report(&report);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_report_csv(&out.join("report.csv"), &report)?;
    }
    Ok(())
}

fn write_report_csv(
    path: &Path,
    r: &mmfas_core::metrics::MetricReport,
) -> Result<(), TensorError> {
    let csv = format!(
        "threshold,dev_eer,apcer,bpcer,acer,hter,fpr_target,tpr\n{},{},{},{},{},{},{},{}\n",
        r.threshold, r.dev_eer, r.apcer, r.bpcer, r.acer, r.hter, r.fpr_target, r.tpr
    );
    std::fs::write(path, csv)?;
    Ok(())
}

fn evaluate_checkpoint(args: &EvaluateArgs, ckpt_path: &Path) -> Result<(), TensorError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    // The embedded config echo is the default document; an explicit
    // --config replaces it, flags override either.
    let r = match &args.config {
        Some(path) => resolve(Some(path), &args.overrides)?,
        None => {
            let file = crate::config::FileConfig::parse(&ckpt.config)?;
            crate::config::resolve_from(Some(&file), &args.overrides)?
        }
    };
    let ds = obtain_dataset(&r)?;
    let mut model = ViTModel::<f32>::new(r.vit.clone(), r.adapter_opt(), r.seed)?;
    let copied = model.load_matching(&ckpt.tensors_as::<f32>())?;
    println!("loaded {copied} tensors from {}", ckpt_path.display());
    let dev = score_dataset(&model, &ds, Split::Dev, &r.finetune, &r.descriptors)?;
    let test = score_dataset(&model, &ds, Split::Test, &r.finetune, &r.descriptors)?;
    let report = mmfas_core::metrics::evaluate(&dev, &test, r.fpr_target)?;
    print_report(&report);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        dev.write_csv(&out.join("scores_dev.csv"))?;
        test.write_csv(&out.join("scores_test.csv"))?;
        write_report_csv(&out.join("report.csv"), &report)?;
        write_echo(out, &r.echo())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

fn default_mask_ratios() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn parse_grid_list<T, E>(list: &str, what: &str) -> Result<Vec<T>, TensorError>
where
    T: std::str::FromStr<Err = E>,
    E: std::fmt::Display,
{
    list.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| TensorError::InvalidArgument(format!("bad {what} {s:?}: {e}")))
        })
        .collect()
}

fn build_axis(name: &str, grid: Option<&str>) -> Result<SweepAxis, TensorError> {
    Ok(match name {
        "descriptor_recipe" => SweepAxis::DescriptorRecipe(match grid {
            Some(g) => parse_grid_list(g, "recipe")?,
            None => Recipe::ALL.to_vec(),
        }),
        "adapter_kind" => SweepAxis::AdapterKind(match grid {
            Some(g) => parse_grid_list(g, "adapter kind")?,
            None => mmfas_core::adapters::AdapterKind::ALL.to_vec(),
        }),
        "adapter_dim" => SweepAxis::AdapterDim(match grid {
            Some(g) => parse_grid_list(g, "adapter dim")?,
            None => vec![16, 32, 64],
        }),
        "adapter_position" => SweepAxis::AdapterPosition(match grid {
            Some(g) => parse_grid_list(g, "adapter position")?,
            None => mmfas_core::adapters::AdapterPosition::ALL.to_vec(),
        }),
        "mask_ratio" => SweepAxis::MaskRatio(match grid {
            Some(g) => parse_grid_list(g, "mask ratio")?,
            None => default_mask_ratios(),
        }),
        "decoder_depth" => SweepAxis::DecoderDepth(match grid {
            Some(g) => parse_grid_list(g, "decoder depth")?,
            None => vec![1, 2, 4],
        }),
        "pretrain_epochs" => SweepAxis::PretrainEpochs(match grid {
            Some(g) => parse_grid_list(g, "epoch count")?,
            None => vec![0, 2, 4],
        }),
        "freeze_policy" => SweepAxis::FreezePolicy(match grid {
            Some(g) => parse_grid_list(g, "freeze policy")?,
            None => mmfas_core::vit::FreezePolicy::ALL.to_vec(),
        }),
        "modality_subset" => SweepAxis::ModalitySubset(match grid {
            Some(g) => g
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|subset| {
                    subset
                        .split('+')
                        .map(|m| m.trim().parse())
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => training::modality_subset_grid(),
        }),
        other => {
            return Err(TensorError::InvalidArgument(format!(
                "unknown sweep axis {other:?}"
            )))
        }
    })
}

fn axis_needs_pretrain(axis: &SweepAxis) -> bool {
    matches!(
        axis,
        SweepAxis::MaskRatio(_) | SweepAxis::DecoderDepth(_) | SweepAxis::PretrainEpochs(_)
    )
}

fn sweep_base(r: &Resolved, include_pretrain: bool) -> SweepBase {
    SweepBase {
        vit: r.vit.clone(),
        adapter: r.adapter_opt(),
        finetune: r.finetune.clone(),
        descriptors: r.descriptors.clone(),
        pretrain: include_pretrain.then(|| r.pretrain.clone()),
    }
}

/// The canonical `--grid` string that reproduces `axis` exactly.
fn grid_string(axis: &SweepAxis) -> String {
    (0..axis.len())
        .map(|i| axis.value_label(i))
        .collect::<Vec<_>>()
        .join(",")
}

fn summary_row(axis: &SweepAxis, label: &str, r: &training::RunRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        axis.name(),
        label,
        r.selected_epoch,
        r.report.dev_eer,
        r.report.apcer,
        r.report.bpcer,
        r.report.acer,
        r.report.hter,
        r.report.tpr
    )
}

const SUMMARY_HEADER: &str =
    "axis,value,selected_epoch,dev_eer,test_apcer,test_bpcer,test_acer,test_hter,tpr\n";

pub fn sweep_cmd(args: &SweepArgs) -> Result<(), TensorError> {
    let r = resolve(args.config.as_deref(), &args.overrides)?;
    let axis = build_axis(&args.axis, args.grid.as_deref())?;
    let base = sweep_base(&r, args.with_pretrain || axis_needs_pretrain(&axis));
    validate_axis(&base, &axis)?;
    let ds = obtain_dataset(&r)?;

    if let Some(points) = &args.points {
        // Worker mode: run the assigned grid indices only.
        let rows_dir = args.rows_dir.as_ref().ok_or_else(|| {
            TensorError::InvalidArgument("--points needs --rows-dir".into())
        })?;
        std::fs::create_dir_all(rows_dir)?;
        let indices: Vec<usize> = parse_grid_list(points, "grid index")?;
        for i in indices {
            if i >= axis.len() {
                return Err(TensorError::InvalidArgument(format!(
                    "grid index {i} out of range (axis has {} points)",
                    axis.len()
                )));
            }
            let cfg = apply_axis_point(&base, &axis, i)?;
            let label = axis.value_label(i);
            let run_dir = args.out.join(format!("{}_{}", axis.name(), label));
            let echo = format!("# sweep point: {} = {}\n", axis.name(), label);
            let record = run_point(&cfg, &ds, &echo, Some(&run_dir))?;
            std::fs::write(
                rows_dir.join(format!("{i:04}.row")),
                summary_row(&axis, &label, &record),
            )?;
        }
        return Ok(());
    }

    std::fs::create_dir_all(&args.out)?;
    write_echo(&args.out, &r.echo())?;

    if args.jobs <= 1 {
        let results = sweep(&base, &axis, &ds, Some(&args.out))?;
        println!(
            "swept {} = {} points; summary at {}",
            axis.name(),
            results.len(),
            args.out.join("summary.csv").display()
        );
        return Ok(());
    }

    // Parent mode: partition the grid over worker processes running this
    // same binary, then stitch their summary rows together in grid order.
    let rows_dir = args.out.join(".rows");
    std::fs::create_dir_all(&rows_dir)?;
    let exe = std::env::current_exe()
        .map_err(|e| TensorError::Io(format!("cannot locate own binary: {e}")))?;
    let echo_path = args.out.join("config.echo");
    let n_jobs = args.jobs.min(axis.len());
    let mut children = Vec::new();
    for j in 0..n_jobs {
        let mine: Vec<String> = (0..axis.len())
            .filter(|i| i % n_jobs == j)
            .map(|i| i.to_string())
            .collect();
        if mine.is_empty() {
            continue;
        }
        let mut cmd = Process::new(&exe);
        cmd.arg("sweep")
            .arg("--axis")
            .arg(axis.name())
            .arg("--grid")
            .arg(grid_string(&axis))
            .arg("--config")
            .arg(&echo_path)
            .arg("--out")
            .arg(&args.out)
            .arg("--points")
            .arg(mine.join(","))
            .arg("--rows-dir")
            .arg(&rows_dir);
        if args.with_pretrain || axis_needs_pretrain(&axis) {
            cmd.arg("--with-pretrain");
        }
        let child = cmd
            .spawn()
            .map_err(|e| TensorError::Io(format!("spawning sweep worker: {e}")))?;
        children.push(child);
    }
    let mut worst: Option<i32> = None;
    for mut child in children {
        let status = child
            .wait()
            .map_err(|e| TensorError::Io(format!("waiting for sweep worker: {e}")))?;
        if !status.success() {
            worst = Some(worst.unwrap_or(0).max(status.code().unwrap_or(2)));
        }
    }
    if let Some(code) = worst {
        let msg = format!("a sweep worker failed with exit code {code}");
        return Err(if code == 3 {
            TensorError::Numeric(msg)
        } else {
            TensorError::InvalidArgument(msg)
        });
    }
    let mut csv = String::from(SUMMARY_HEADER);
    for i in 0..axis.len() {
        let path = rows_dir.join(format!("{i:04}.row"));
        let row = std::fs::read_to_string(&path)
            .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
        csv.push_str(&row);
    }
    std::fs::write(args.out.join("summary.csv"), csv)?;
    std::fs::remove_dir_all(&rows_dir)?;
    println!(
        "swept {} = {} points across {} workers; summary at {}",
        axis.name(),
        axis.len(),
        n_jobs,
        args.out.join("summary.csv").display()
    );
    Ok(())
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), TensorError> {
    let lines = battery::run(args.module.as_deref())?;
    let mut worst = 0.0f64;
    for line in &lines {
        println!(
            "{}: max rel err {:.3e} over {} probes",
            line.target, line.max_rel_err, line.probes
        );
        worst = worst.max(line.max_rel_err);
    }
    println!("max relative error: {worst:.3e}");
    if battery::all_pass(&lines) {
        Ok(())
    } else {
        Err(TensorError::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= {DEFAULT_TOL:.0e}"
        )))
    }
}

pub fn dump_recon_cmd(args: &DumpReconArgs) -> Result<(), TensorError> {
    let r = resolve(args.config.as_deref(), &args.overrides)?;
    let ds = obtain_dataset(&r)?;
    let split: Split = args.split.parse()?;
    let samples = ds.split(split);
    let sample = samples.get(args.index).ok_or_else(|| {
        TensorError::InvalidArgument(format!(
            "index {} out of range ({} samples in {})",
            args.index,
            samples.len(),
            split.as_str()
        ))
    })?;
    // Reconstruction runs on the adapter-free encoder.
    let mut model = ViTModel::<f32>::new(r.vit.clone(), None, r.seed)?;
    mmfas_core::m2a2e::init_decoders(&mut model, &r.pretrain, r.seed);
    if let Some(path) = &args.from {
        let ckpt = Checkpoint::load(path)?;
        let copied = model.load_matching(&ckpt.tensors_as::<f32>())?;
        println!("loaded {copied} tensors from {}", path.display());
    }
    let mut rng = stream_rng(r.seed, STREAM_MASK, args.index as u64);
    let (plan, triptychs) = reconstruct_sample(&model, &r.pretrain, sample, &mut rng)?;
    std::fs::create_dir_all(&args.out)?;
    write_echo(&args.out, &r.echo())?;
    println!(
        "masked modality {} ({} of {} patches hidden)",
        r.pretrain.modalities[plan.modality].name(),
        plan.masked.len(),
        plan.n_patches()
    );
    for t in &triptychs {
        for (tag, img) in [("input", &t.input), ("masked", &t.masked), ("recon", &t.recon)] {
            let name = format!("{}_{}_{}", sample.id, t.modality.name(), tag);
            let path = if img.channels == 3 {
                args.out.join(format!("{name}.ppm"))
            } else {
                args.out.join(format!("{name}.pgm"))
            };
            if img.channels == 3 {
                write_ppm(&path, img)?;
            } else {
                write_pgm(&path, &img.channel(0))?;
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
