use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use voxcl_core::config::RunConfig;
use voxcl_core::eval::{class_dice, cross_validate, predict_volume, DiceReport};
use voxcl_core::model::{param_count, representation_dim, HeadKind};
use voxcl_core::phantom::{generate_dataset, read_manifest, PhantomSpec, MANIFEST_NAME};
use voxcl_core::train::{
    finetune, load_checkpoint, load_samples, pretrain, pretrain_batch, split_validation, train_probe, Checkpoint,
    Predictor, Sample,
};
use voxcl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "voxcl", version, about = "Voxel-level contrastive pre-training for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic phantoms and a manifest.
    Synth(SynthArgs),
    /// Contrastive pre-training of the FPN backbone.
    Pretrain(PretrainArgs),
    /// Train a linear or non-linear probe on a backbone checkpoint.
    Probe(ProbeArgs),
    /// Fine-tune a backbone with a non-linear head.
    Finetune(FinetuneArgs),
    /// Dice of a head checkpoint, or k-fold cross-validation from a backbone.
    Eval(EvalArgs),
    /// Print a checkpoint's metadata and tensor census as JSON.
    InspectCkpt { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for volumes and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Number of phantoms.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON phantom specification.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `data.pretrain_manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Batch-assembly threads; batches do not depend on it.
    #[arg(long, env = "VOXCL_WORKERS")]
    workers: Option<usize>,
    /// Validate the configuration and data and assemble one batch, without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Linear,
    Nonlinear,
}

impl From<Mode> for HeadKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Linear => HeadKind::Linear,
            Mode::Nonlinear => HeadKind::Nonlinear,
        }
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Pre-training checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    /// Output directory for the head checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `data.labeled_manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides `probe.mode`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Train the backbone along with the head.
    #[arg(long)]
    unfrozen: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Pre-training checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    /// Output directory for the checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Linear,
    Nonlinear,
    Finetune,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// A head checkpoint, or a backbone checkpoint with `--cv`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the Dice reports.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `data.test_manifest` (or `data.labeled_manifest` with `--cv`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// k-fold cross-validation: train a head per fold on the labeled manifest.
    #[arg(long)]
    cv: bool,
    #[arg(long, value_enum, default_value = "linear")]
    protocol: Protocol,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::InspectCkpt { path } => inspect(&path),
    }
}

/// Loads the config; relative data paths resolve against the config's directory.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut run = match &c.config {
        Some(path) => {
            let mut run = RunConfig::load(path)?;
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [
                &mut run.data.pretrain_manifest,
                &mut run.data.labeled_manifest,
                &mut run.data.test_manifest,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            run
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        run.seed = s;
    }
    run.check()?;
    Ok(run)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prepare_out(out: &Path, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write(&out.join("config.json"), run.to_json())
}

fn manifest_path(flag: Option<PathBuf>, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.cloned())
        .ok_or_else(|| Error::Config(format!("no {what} manifest: pass --manifest or set it in the config")))
}

fn samples(path: &Path, run: &RunConfig, labeled: bool) -> Result<Vec<Sample>> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("{} lists no volumes", path.display())));
    }
    load_samples(&entries, &run.preprocess, &run.pretrain.patch, labeled)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<PhantomSpec>(&text)?
        }
        None => PhantomSpec::default(),
    };
    let entries = generate_dataset(&spec, a.count, a.seed, &a.out)?;
    println!(
        "{}",
        json!({ "volumes": entries.len(), "manifest": a.out.join(MANIFEST_NAME) })
    );
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut run = load_config(&a.common)?;
    if let Some(w) = a.workers {
        run.pretrain.workers = w;
    }
    let manifest = manifest_path(a.manifest, run.data.pretrain_manifest.as_ref(), "pre-training")?;
    let all = samples(&manifest, &run, false)?;
    let (train, held_out) = split_validation(all, &run);
    if a.dry_run {
        let batch = pretrain_batch(&run, &train, 0)?;
        let state = voxcl_core::train::PretrainState::init(&run)?;
        println!(
            "{}",
            json!({
                "train_volumes": train.len(),
                "validation_volumes": held_out.len(),
                "batch_shape": batch.patches.shape(),
                "pairs": batch.pairs.len(),
                "representation_dim": representation_dim(&run.model),
                "parameters": param_count(&state.params),
            })
        );
        return Ok(());
    }
    prepare_out(&a.out, &run)?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let out = pretrain(&run, &train, &held_out, Some(&a.out), resume.as_ref())?;
    println!(
        "{}",
        json!({
            "step": out.checkpoint.step,
            "final_loss": out.losses.last(),
            "validation": out.validation.last().map(|v| v.loss),
            "checkpoint": a.out.join("final.vxckpt"),
        })
    );
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> Result<()> {
    let mut run = load_config(&a.common)?;
    if let Some(m) = a.mode {
        run.probe.mode = m.into();
    }
    let manifest = manifest_path(a.manifest, run.data.labeled_manifest.as_ref(), "labeled")?;
    let data = samples(&manifest, &run, true)?;
    let backbone = load_checkpoint(&a.backbone)?;
    prepare_out(&a.out, &run)?;
    let ckpt = train_probe(&backbone, &run, &data, !a.unfrozen, Some(&a.out))?;
    println!("{}", json!({ "step": ckpt.step, "checkpoint": a.out.join("final.vxckpt") }));
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let run = load_config(&a.common)?;
    let manifest = manifest_path(a.manifest, run.data.labeled_manifest.as_ref(), "labeled")?;
    let data = samples(&manifest, &run, true)?;
    let backbone = load_checkpoint(&a.backbone)?;
    prepare_out(&a.out, &run)?;
    let ckpt = finetune(&backbone, &run, &data, Some(&a.out))?;
    println!("{}", json!({ "step": ckpt.step, "checkpoint": a.out.join("final.vxckpt") }));
    Ok(())
}

fn volume_dice(head: &Checkpoint, run: &RunConfig, test: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let predictor = Predictor::from_checkpoint(head)?;
    test.iter()
        .map(|s| {
            let seg = predict_volume(
                &predictor,
                &s.volume,
                run.pretrain.patch.extents,
                run.probe.window,
                run.eval.tile_batch,
            )?;
            let truth = s.labels.as_ref().ok_or_else(|| Error::Data(format!("{} has no labels", s.name)))?;
            class_dice(&seg, truth, predictor.head.num_classes)
        })
        .collect()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let run = load_config(&a.common)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    prepare_out(&a.out, &run)?;
    let report = if a.cv {
        let manifest = manifest_path(a.manifest, run.data.labeled_manifest.as_ref(), "labeled")?;
        let data = samples(&manifest, &run, true)?;
        cross_validate(data.len(), run.eval.folds, run.seed, run.probe.num_classes, |_, train, test| {
            let train: Vec<Sample> = train.iter().map(|&i| data[i].clone()).collect();
            let head = match a.protocol {
                Protocol::Linear | Protocol::Nonlinear => {
                    let mut r = run.clone();
                    r.probe.mode = match a.protocol {
                        Protocol::Linear => HeadKind::Linear,
                        _ => HeadKind::Nonlinear,
                    };
                    train_probe(&ckpt, &r, &train, true, None)?
                }
                Protocol::Finetune => finetune(&ckpt, &run, &train, None)?,
            };
            let test: Vec<&Sample> = test.iter().map(|&i| &data[i]).collect();
            volume_dice(&head, &run, &test)
        })?
    } else {
        let manifest = manifest_path(a.manifest, run.data.test_manifest.as_ref(), "test")?;
        let data = samples(&manifest, &run, true)?;
        let rows = volume_dice(&ckpt, &run, &data.iter().collect::<Vec<_>>())?;
        let mut per_volume = String::from("volume,class,dice\n");
        for (s, row) in data.iter().zip(&rows) {
            for (c, d) in row.iter().enumerate() {
                per_volume.push_str(&format!("{},{},{d}\n", s.name, c + 1));
            }
        }
        write(&a.out.join("per_volume.csv"), per_volume)?;
        let classes = (1..ckpt.meta.head.map_or(0, |h| h.num_classes) as u16).collect::<Vec<_>>();
        let mean = (0..classes.len())
            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64)
            .collect();
        DiceReport::from_folds(classes, vec![mean])?
    };
    write(&a.out.join("dice.csv"), report.to_csv())?;
    write(&a.out.join("summary.json"), report.to_json())?;
    println!("{}", json!({ "macro_dice": report.macro_mean, "mean": report.mean, "std": report.std }));
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let tensors: Vec<_> = ckpt
        .tensors
        .iter()
        .map(|(n, t)| json!({ "name": n, "shape": t.shape() }))
        .collect();
    let summary = json!({
        "step": ckpt.step,
        "kind": ckpt.meta.kind,
        "representation_dim": ckpt.meta.representation_dim,
        "rng": ckpt.meta.rng,
        "head": ckpt.meta.head,
        "optimizers": ckpt.meta.adam.iter().map(|g| json!({ "name": g.name, "step": g.step })).collect::<Vec<_>>(),
        "parameters": param_count(&ckpt.params()),
        "tensors": tensors,
        "model": ckpt.meta.config.model,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
