//! `impulse`: generate phantoms, train and run implicit segment models,
//! evaluate, ablate inputs, benchmark against a dense head and check
//! gradients.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 validation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use impulse_core::experiment::{
    self, assemble_inputs, gradcheck_suite, run_ablation, run_bench, train_implicit, Dataset, InputSet, Split,
    TrainSettings,
};
use impulse_core::impulse::ParamCounts;
use impulse_core::io::{self, Axis};
use impulse_core::metrics::evaluate;
use impulse_core::nn::{Fault, LossReport, LossWeights};
use impulse_core::phantom::PhantomConfig;
use impulse_core::volume::Volume;

#[derive(Parser, Debug)]
#[command(name = "impulse", version, about = "Implicit pulmonary-segment reconstruction on synthetic phantoms")]
struct Cli {
    /// JSON object supplying any flag of the subcommand; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with a 7:1:2 train/val/test split.
    Gen(GenArgs),
    /// Train an implicit model on a dataset split.
    Train(TrainArgs),
    /// Reconstruct labels from a checkpoint at any extent.
    Infer(InferArgs),
    /// Score a label file against a phantom.
    Eval(EvalArgs),
    /// Train one model per input combination and tabulate clean vs corrupted scores.
    Ablate(AblateArgs),
    /// Compare the implicit decoder with a dense full-grid head.
    Bench(BenchArgs),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of phantoms.
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid extent: `N` or `DxHxW`.
    #[arg(long, default_value = "32", value_parser = parse_extent)]
    extent: [usize; 3],
    #[arg(long, default_value_t = 18)]
    segments: usize,
    /// Standard deviation of the image noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Points sampled per optimization step.
    #[arg(long, default_value_t = 4096)]
    points: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Cross-entropy weight.
    #[arg(long, default_value_t = 1.0)]
    w_ce: f64,
    /// Soft-Dice weight.
    #[arg(long, default_value_t = 1.0)]
    w_dice: f64,
}

impl TrainFlags {
    fn settings(&self, inputs: InputSet) -> Result<TrainSettings> {
        Ok(TrainSettings {
            inputs,
            steps: self.steps,
            points: self.points,
            lr: self.lr,
            weights: LossWeights::new(self.w_ce, self.w_dice)?,
            seed: self.seed,
            ..TrainSettings::default()
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Input channels, letters from I, L, B, A, V.
    #[arg(long, default_value = "I")]
    inputs: String,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    /// Use only the first N phantoms of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// A phantom directory, or a `.vol` input volume.
    #[arg(long)]
    input: PathBuf,
    /// Input channels to assemble from a phantom directory; defaults to the
    /// checkpoint's.
    #[arg(long)]
    inputs: Option<String>,
    /// Output extent: `N` or `DxHxW`; defaults to the input extent.
    #[arg(long, value_parser = parse_extent)]
    extent: Option<[usize; 3]>,
    /// Label file to write (`.vol`).
    #[arg(long)]
    out: PathBuf,
    /// Also write a boundary mesh (`.ply`) next to the labels.
    #[arg(long)]
    export_mesh: bool,
    /// Also write a label slice (`.ppm`), e.g. `d:16`.
    #[arg(long, value_name = "AXIS:INDEX", value_parser = parse_slice)]
    export_slice: Option<(Axis, usize)>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted label file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth phantom directory.
    #[arg(long)]
    phantom: PathBuf,
    /// Report path; defaults to `<pred>.metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated input combinations.
    #[arg(long, default_value = "L,BAV,LBAV,I,IBAV")]
    combos: String,
    /// Fraction of mask foreground flipped in the corrupted condition.
    #[arg(long, default_value_t = 0.05)]
    corrupt_rate: f64,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "I")]
    inputs: String,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupt the convolution weight gradient (suite self-test).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn parse_extent(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let e = match parts[..] {
        [n] => [n; 3],
        [d, h, w] => [d, h, w],
        _ => return Err("expected N or DxHxW".into()),
    };
    if e.contains(&0) {
        return Err("extent must be positive".into());
    }
    Ok(e)
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: impulse_core::Error| e.to_string())
}

fn parse_slice(s: &str) -> Result<(Axis, usize), String> {
    let (axis, index) = s.split_once(':').ok_or("expected AXIS:INDEX, e.g. d:16")?;
    let axis = axis.parse().map_err(|e: impulse_core::Error| e.to_string())?;
    Ok((axis, index.parse().map_err(|e| format!("{index:?}: {e}"))?))
}

fn parse_inputs(s: &str) -> Result<InputSet> {
    s.parse().with_context(|| format!("invalid --inputs {s:?}"))
}

/// Appends flags from a `--config` JSON object that are not already on the
/// command line.
fn merge_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let Value::Object(map) = serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))? else {
        bail!("config {path} must be a JSON object");
    };
    let cmd = Cli::command();
    let Some(sub) = args.iter().skip(1).find_map(|a| cmd.find_subcommand(a)) else {
        return Ok(args);
    };
    let known: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long().map(String::from)).collect();
    let mut out = args.clone();
    for (key, value) in map {
        let flag = key.replace('_', "-");
        if flag == "config" {
            continue;
        }
        if !known.contains(&flag) {
            bail!("config key {key:?} is not a flag of `{}`", sub.get_name());
        }
        let long = format!("--{flag}");
        if args.iter().any(|a| *a == long || a.starts_with(&format!("{long}="))) {
            continue;
        }
        match value {
            Value::Bool(true) => out.push(long),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => out.extend([long, s]),
            Value::Number(n) => out.extend([long, n.to_string()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| v.as_str().map_or_else(|| v.to_string(), String::from))
                    .collect();
                out.extend([long, parts.join(",")]);
            }
            Value::Object(_) => bail!("config key {key:?} cannot be an object"),
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    io::write_json(path, value).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let mut config = PhantomConfig {
        extent: a.extent,
        segments: a.segments,
        seed: a.seed,
        ..PhantomConfig::default()
    };
    if let Some(noise) = a.noise {
        config.noise = noise;
    }
    let (manifest, phantoms) = experiment::generate_dataset(&config, a.count)?;
    experiment::write_dataset(&a.out, &manifest, &phantoms)?;
    let mut failed = 0;
    for (e, (_, rules)) in manifest.entries.iter().zip(&phantoms) {
        let status = if rules.passed() { "ok" } else { "FAILED" };
        println!(
            "{} {:<5} bronchus {:.4} artery {:.4} intersegmental {:.4} partition {} {status}",
            e.name,
            serde_json::to_value(e.split)?.as_str().unwrap_or_default(),
            rules.bronchus_containment.ratio(),
            rules.artery_containment.ratio(),
            rules.intersegmental_adjacency.ratio(),
            rules.partition_violations,
        );
        if !rules.passed() {
            failed += 1;
            eprintln!("{}", serde_json::to_string_pretty(rules)?);
        }
    }
    let [tr, va, te] = experiment::split_sizes(a.count);
    println!("wrote {} phantoms to {} (train {tr}, val {va}, test {te})", a.count, a.out.display());
    if failed > 0 {
        eprintln!("{failed} phantom(s) failed validation");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TrainSummary {
    inputs: String,
    seed: u64,
    steps: usize,
    phantoms: usize,
    points_per_step: usize,
    final_loss: Option<LossReport>,
    params: ParamCounts,
    wall_secs: f64,
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let inputs = parse_inputs(&a.inputs)?;
    let settings = a.train.settings(inputs.clone())?;
    let ds = Dataset::open(&a.data)?;
    let phantoms = ds.load_split(a.split, a.limit)?;
    if phantoms.is_empty() {
        bail!("split {:?} of {} is empty", a.split, a.data.display());
    }
    let every = (settings.steps / 10).max(1);
    let out = train_implicit(&phantoms, &settings, |step, r| {
        if step % every == 0 {
            println!("step {step:>6}  ce {:.5}  dice {:.5}  total {:.5}", r.ce, r.dice, r.total);
        }
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("model.json");
    io::save_checkpoint(&ckpt, &out.model, settings.seed, Some(&inputs.to_string()))?;
    fs::write(a.out.join("loss.csv"), experiment::loss_csv(&out.log))?;
    let summary = TrainSummary {
        inputs: inputs.to_string(),
        seed: settings.seed,
        steps: settings.steps,
        phantoms: phantoms.len(),
        points_per_step: out.points_per_step,
        final_loss: out.log.last().copied(),
        params: out.model.count_params(),
        wall_secs: out.wall_secs,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("checkpoint {} ({:.1}s)", ckpt.display(), out.wall_secs);
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let (model, manifest) = io::load_checkpoint(&a.checkpoint)?;
    let expected = model.config.encoder.in_channels;
    let phantom_dir = a.input.is_dir();
    let (x, inputs_desc) = if phantom_dir {
        let spec = a
            .inputs
            .clone()
            .or(manifest.inputs.clone())
            .context("checkpoint does not record its inputs; pass --inputs")?;
        let inputs = parse_inputs(&spec)?;
        let p = io::load_phantom(&a.input)?;
        (assemble_inputs(&p, &inputs, None)?, format!(" ({inputs})"))
    } else {
        (io::load_volume(&a.input)?, String::new())
    };
    if x.channels() != expected {
        bail!(
            "channel mismatch: checkpoint expects {expected} input channel(s){}, input provides {}{inputs_desc}",
            manifest.inputs.as_deref().map(|s| format!(" ({s})")).unwrap_or_default(),
            x.channels(),
        );
    }
    let extent = a.extent.unwrap_or(x.extent());
    let labels = model.reconstruct(&x, extent)?;
    io::save_labels(&a.out, &labels)?;
    println!("wrote {} labels to {}", fmt_extent(extent), a.out.display());
    if a.export_mesh {
        let ply = a.out.with_extension("ply");
        let stats = io::export_boundary_mesh(&ply, &labels)?;
        println!("mesh {} ({} faces)", ply.display(), stats.faces);
    }
    if let Some((axis, index)) = a.export_slice {
        let ppm = a.out.with_extension("ppm");
        io::export_label_slice(&ppm, &labels, axis, index)?;
        println!("slice {}", ppm.display());
        if phantom_dir {
            let image = io::load_volume(&a.input.join("image.vol"))?;
            let resampled: Volume = image.resample(extent)?;
            let pgm = a.out.with_extension("pgm");
            io::export_image_slice(&pgm, &resampled, axis, index)?;
            println!("slice {}", pgm.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_extent([d, h, w]: [usize; 3]) -> String {
    format!("{d}x{h}x{w}")
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let pred = io::load_labels(&a.pred)?;
    let phantom = io::load_phantom(&a.phantom)?;
    let report = evaluate(&pred, &phantom)?;
    let out = a.out.unwrap_or_else(|| a.pred.with_extension("metrics.json"));
    write_json(&out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let combos = InputSet::parse_list(&a.combos).with_context(|| format!("invalid --combos {:?}", a.combos))?;
    if !(0.0..=1.0).contains(&a.corrupt_rate) {
        bail!("--corrupt-rate must lie in [0, 1], got {}", a.corrupt_rate);
    }
    let base = a.train.settings(combos[0].clone())?;
    let ds = Dataset::open(&a.data)?;
    let train = ds.load_split(Split::Train, None)?;
    let test = ds.load_split(Split::Test, None)?;
    let report = run_ablation(&train, &test, &combos, a.corrupt_rate, &base, |c| {
        println!(
            "{:<6} dice_o {:.4} dice_b {:.4} ({:.1}s)",
            c.inputs.to_string(),
            c.clean.dice_o.unwrap_or(f64::NAN),
            c.clean.dice_b.unwrap_or(f64::NAN),
            c.wall_secs
        );
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("ablation.json"), &report)?;
    let table = report.table();
    fs::write(a.out.join("ablation.txt"), &table)?;
    println!("\n{table}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let inputs = parse_inputs(&a.inputs)?;
    let settings = a.train.settings(inputs)?;
    let ds = Dataset::open(&a.data)?;
    let train = ds.load_split(Split::Train, None)?;
    let val = ds.load_split(Split::Val, None)?;
    let report = run_bench(&train, &val, &settings)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("bench.json"), &report)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
    println!("{:<22}{:>12}{:>12}", "", "implicit", "dense");
    for (name, i, d) in [
        ("encoder params", report.implicit.encoder_params.to_string(), report.dense.encoder_params.to_string()),
        ("decoder/head params", report.implicit.head_params.to_string(), report.dense.head_params.to_string()),
        ("points per step", report.implicit.points_per_step.to_string(), report.dense.points_per_step.to_string()),
        ("wall time (s)", format!("{:.1}", report.implicit.wall_secs), format!("{:.1}", report.dense.wall_secs)),
        ("val Dice_o", fmt(report.implicit.val_dice_o), fmt(report.dense.val_dice_o)),
    ] {
        println!("{name:<22}{i:>12}{d:>12}");
    }
    if !report.orderings_hold() {
        eprintln!("efficiency orderings do not hold");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let fault = a.inject_fault.then_some(Fault::ConvWeightGrad);
    let entries = gradcheck_suite(fault)?;
    for e in &entries {
        println!(
            "{:<24} max rel error {:.3e}  checked {:>4}  {}",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            if e.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &entries)?;
    }
    if entries.iter().all(|e| e.passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn run(args: Vec<String>) -> Result<ExitCode> {
    let args = merge_config(args)?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return Ok(ExitCode::from(code));
        }
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
