//! The `crispe` command-line surface: pretraining, curvature caching,
//! batch and sequential editing, the trade-off sweep, and the verification
//! suite.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O or parse failure,
//! 3 verification failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::curvature::{
    kfac_estimate, read_curvature_cache, write_curvature_cache, CurvatureKind, CurvatureModel,
};
use crate::editor::{
    edit_batch, edit_sequential, load_checkpoint, save_checkpoint, EditConfig, EditTelemetry,
    OptimizerKind,
};
use crate::error::{Error, Result};
use crate::harness::data::{synthetic_tasks, LabeledDataset};
use crate::harness::idx::load_idx;
use crate::harness::sweep::{
    build_curvature, pretrain, records_to_csv, sweep_gamma, SweepOptions,
};
use crate::harness::verify::verify;
use crate::network::{Activation, FeedForwardNet};

/// Curvature-restricted model editing for feed-forward networks.
#[derive(Debug, Parser)]
#[command(name = "crispe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a fresh network on a capability task and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Estimate a curvature model on capability data and cache it.
    CacheCurvature(CacheArgs),
    /// Apply a batch of edits in the low-curvature subspace.
    Edit(EditArgs),
    /// Apply edits chunk by chunk with streaming factor aggregation.
    SeqEdit(SeqEditArgs),
    /// Sweep the energy threshold over curvature families and emit CSV.
    Sweep(SweepArgs),
    /// Run the invariant verification suite.
    Verify(VerifyArgs),
}

/// Where datasets come from: a pair of IDX files per task, or the synthetic
/// two-task generator.
#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Capability-task IDX image file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Capability-task IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Edit-task IDX image file.
    #[arg(long)]
    edit_images: Option<PathBuf>,
    /// Edit-task IDX label file.
    #[arg(long)]
    edit_labels: Option<PathBuf>,
    /// Use the synthetic Gaussian-mixture task pair instead of IDX files.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic examples per task.
    #[arg(long, default_value_t = 1200)]
    n: usize,
    /// Synthetic feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Synthetic class count.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Seed for the synthetic generator.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

impl DataArgs {
    /// Loads (capability task, edit task). Either side may be absent.
    fn load(&self) -> Result<(Option<LabeledDataset>, Option<LabeledDataset>)> {
        if self.synthetic {
            let (a, b) = synthetic_tasks(self.data_seed, self.n, self.dim, self.classes)?;
            return Ok((Some(a), Some(b)));
        }
        let cap = match (&self.images, &self.labels) {
            (Some(i), Some(l)) => Some(load_idx(i, l)?),
            (None, None) => None,
            _ => {
                return Err(Error::validation(
                    "images/labels",
                    "need both --images and --labels",
                ))
            }
        };
        let edit = match (&self.edit_images, &self.edit_labels) {
            (Some(i), Some(l)) => Some(load_idx(i, l)?),
            (None, None) => None,
            _ => {
                return Err(Error::validation(
                    "edit_images/edit_labels",
                    "need both --edit-images and --edit-labels",
                ))
            }
        };
        Ok((cap, edit))
    }

    fn require_cap(&self) -> Result<LabeledDataset> {
        self.load()?.0.ok_or_else(|| {
            Error::validation(
                "data",
                "no capability data: pass --images/--labels or --synthetic",
            )
        })
    }
}

/// Editing knobs shared by edit, seq-edit, and sweep. Command-line values
/// override the JSON config file.
#[derive(Debug, Args, Clone)]
struct ConfigArgs {
    /// JSON file with EditConfig fields in snake_case.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Energy threshold in (0, 1).
    #[arg(long)]
    gamma: Option<f64>,
    /// Learning rate (default 5e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Edit epochs (default 25).
    #[arg(long)]
    steps: Option<usize>,
    /// Minibatch size (default 32).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stop threshold on the mean edit loss (default 0.01).
    #[arg(long)]
    early_stop: Option<f64>,
    /// Relative parameter drift that triggers a projector rebuild
    /// (default 0.25).
    #[arg(long)]
    drift_threshold: Option<f64>,
    /// Edits per chunk in sequential mode (default 100).
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Comma-separated tracked layer indices (default: all layers).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Optimizer: sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// RNG seed for editing and estimation.
    #[arg(long)]
    seed: Option<u64>,
    /// MC labels per input for factor estimation (default 1).
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Use dataset labels for factors (empirical Fisher).
    #[arg(long)]
    empirical_fisher: bool,
    /// Re-estimate K-FAC factors on drift instead of reusing them.
    #[arg(long)]
    refresh_kfac: bool,
    /// One joint dense projector over all tracked layers.
    #[arg(long)]
    joint: bool,
}

impl ConfigArgs {
    fn resolve(&self, net: Option<&FeedForwardNet>) -> Result<EditConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<EditConfig>(&text).map_err(|e| Error::Parse {
                    offset: e.column() as u64,
                    msg: format!("config file: {e}"),
                })?
            }
            None => EditConfig::default(),
        };
        if let Some(g) = self.gamma {
            config.gamma = g;
        }
        if let Some(lr) = self.lr {
            config.learning_rate = lr;
        }
        if let Some(s) = self.steps {
            config.max_steps = s;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(e) = self.early_stop {
            config.early_stop_loss = e;
        }
        if let Some(d) = self.drift_threshold {
            config.drift_threshold = d;
        }
        if let Some(c) = self.chunk_size {
            config.chunk_size = c;
        }
        if let Some(layers) = &self.layers {
            config.tracked_layers = layers.clone();
        }
        if let Some(opt) = &self.optimizer {
            config.optimizer = match opt.as_str() {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::adam_default(),
                other => {
                    return Err(Error::validation(
                        "optimizer",
                        format!("unknown optimizer '{other}' (sgd or adam)"),
                    ))
                }
            };
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(m) = self.mc_samples {
            config.mc_samples = m;
        }
        if self.empirical_fisher {
            config.empirical_fisher = true;
        }
        if self.refresh_kfac {
            config.refresh_kfac = true;
        }
        if self.joint {
            config.joint = true;
        }
        if config.tracked_layers.is_empty() {
            if let Some(net) = net {
                config.tracked_layers = (0..net.layer_count()).collect();
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hidden layer widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    hidden: Vec<usize>,
    /// Hidden-layer activation (relu, gelu, tanh, identity).
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Held-out fraction for the reported test accuracy.
    #[arg(long, default_value_t = 1.0 / 6.0)]
    holdout: f64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CacheArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to estimate curvature at.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Curvature family: hessian, gnh, kfac, ekfac, actcov.
    #[arg(long, default_value = "kfac")]
    curvature: String,
    /// Capability examples used for estimation (0 = all).
    #[arg(long, default_value_t = 0)]
    curvature_examples: usize,
    /// Output cache path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "kfac")]
    curvature: String,
    /// Reuse a cached curvature model instead of estimating one.
    #[arg(long)]
    curvature_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    curvature_examples: usize,
    /// Output checkpoint for the edited network.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-step telemetry CSV.
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SeqEditArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reuse cached K-FAC factors for the capability data.
    #[arg(long)]
    curvature_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    curvature_examples: usize,
    /// Output checkpoint for the final edited network.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Pretrained checkpoint; omitted means pretrain internally.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Hidden widths for internal pretraining.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pretrain_lr: f64,
    /// Curvature families to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "gnh,kfac,ekfac,actcov,none")]
    curvature: Vec<String>,
    /// Threshold exponents k (gamma = 1 - 10^-k), comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,4,7")]
    k_grid: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    curvature_examples: usize,
    /// Record real wall-clock times (breaks byte-level CSV determinism).
    #[arg(long)]
    wall_clock: bool,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

/// Parses `argv` and runs the selected command, mapping errors to exit
/// codes. Never panics on user input.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Parse { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::CacheCurvature(args) => cmd_cache(args),
        Command::Edit(args) => cmd_edit(args),
        Command::SeqEdit(args) => cmd_seq_edit(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn subset_for_estimation(cap: &LabeledDataset, examples: usize) -> LabeledDataset {
    if examples > 0 && examples < cap.len() {
        cap.subset(&(0..examples).collect::<Vec<_>>())
    } else {
        cap.clone()
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<i32> {
    let (cap, _) = args.data.load()?;
    let cap = cap.ok_or_else(|| {
        Error::validation("data", "no training data: pass --images/--labels or --synthetic")
    })?;
    let activation = Activation::from_name(&args.activation)?;
    let mut widths = vec![cap.dim()];
    widths.extend_from_slice(&args.hidden);
    widths.push(cap.class_count);
    let mut acts = vec![activation; args.hidden.len()];
    acts.push(Activation::Identity);

    let mut rng = rand::SeedableRng::seed_from_u64(args.seed);
    let net = FeedForwardNet::random(&widths, &acts, &mut rng)?;
    let (train, held) = cap.split_holdout(args.holdout, args.seed);
    let (trained, report) = pretrain(
        &net,
        &train,
        args.epochs,
        args.lr,
        args.batch_size,
        args.seed,
        Some(&held),
    )?;
    save_checkpoint(&args.out, &trained)?;
    println!(
        "pretrained {:?}: train acc {:.4}, held-out acc {:.4}, loss {:.4} -> {}",
        widths,
        report.train_accuracy,
        report.eval_accuracy.unwrap_or(f64::NAN),
        report.final_loss,
        args.out.display()
    );
    Ok(0)
}

fn cmd_cache(args: CacheArgs) -> Result<i32> {
    let net = load_checkpoint(&args.checkpoint)?;
    let config = args.config.resolve(Some(&net))?;
    let kind = CurvatureKind::from_name(&args.curvature)?;
    if kind == CurvatureKind::None {
        return Err(Error::validation(
            "curvature",
            "the zero curvature model has nothing to cache",
        ));
    }
    let cap = args.data.require_cap()?;
    let cap = subset_for_estimation(&cap, args.curvature_examples);
    let model = build_curvature(kind, &net, &cap, &config.tracked_layers, &config)?;
    write_curvature_cache(&args.out, &model)?;
    println!(
        "cached {} curvature over layers {:?} from {} examples -> {}",
        kind.name(),
        config.tracked_layers,
        cap.len(),
        args.out.display()
    );
    Ok(0)
}

fn load_or_build_curvature(
    kind: CurvatureKind,
    cache: Option<&Path>,
    net: &FeedForwardNet,
    cap: Option<&LabeledDataset>,
    config: &EditConfig,
    curvature_examples: usize,
) -> Result<CurvatureModel> {
    if let Some(path) = cache {
        return read_curvature_cache(path, kind);
    }
    let cap = cap.ok_or_else(|| {
        Error::validation(
            "data",
            "no capability data for curvature estimation: pass --images/--labels, \
             --synthetic, or --curvature-cache",
        )
    })?;
    let cap = subset_for_estimation(cap, curvature_examples);
    build_curvature(kind, net, &cap, &config.tracked_layers, config)
}

fn write_telemetry_csv(path: &Path, telemetry: &EditTelemetry) -> Result<()> {
    let mut out = String::from("step,epoch,edit_loss,quad_form,delta_norm_sq,lambda_gamma,rebuilt\n");
    for s in &telemetry.steps {
        out.push_str(&format!(
            "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
            s.step,
            s.epoch,
            s.edit_loss,
            s.quadratic_form,
            s.delta_norm_sq,
            s.lambda_gamma,
            s.rebuilt as u8
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_edit(args: EditArgs) -> Result<i32> {
    let net = load_checkpoint(&args.checkpoint)?;
    let config = args.config.resolve(Some(&net))?;
    let kind = CurvatureKind::from_name(&args.curvature)?;
    let (cap, edit) = args.data.load()?;
    let edit = edit.ok_or_else(|| {
        Error::validation(
            "data",
            "no edit data: pass --edit-images/--edit-labels or --synthetic",
        )
    })?;
    let model = load_or_build_curvature(
        kind,
        args.curvature_cache.as_deref(),
        &net,
        cap.as_ref(),
        &config,
        args.curvature_examples,
    )?;
    let cap_for_refresh = cap.as_ref().map(|c| subset_for_estimation(c, args.curvature_examples));
    let (edited, telemetry) = edit_batch(&net, &edit, &model, &config, cap_for_refresh.as_ref())?;
    save_checkpoint(&args.out, &edited)?;
    if let Some(path) = &args.telemetry {
        write_telemetry_csv(path, &telemetry)?;
    }
    let edit_acc = edited.accuracy(&edit)?;
    let final_loss = telemetry.epoch_losses.last().copied().unwrap_or(f64::NAN);
    print!(
        "edited with {} at gamma={}: edit acc {:.4}, final edit loss {:.4}, {} rebuilds",
        kind.name(),
        config.gamma,
        edit_acc,
        final_loss,
        telemetry.rebuild_count
    );
    if let Some(cap) = &cap {
        print!(", cap acc {:.4}", edited.accuracy(cap)?);
    }
    println!(" -> {}", args.out.display());
    Ok(0)
}

fn cmd_seq_edit(args: SeqEditArgs) -> Result<i32> {
    let net = load_checkpoint(&args.checkpoint)?;
    let config = args.config.resolve(Some(&net))?;
    let (cap, edit) = args.data.load()?;
    let edit = edit.ok_or_else(|| {
        Error::validation(
            "data",
            "no edit data: pass --edit-images/--edit-labels or --synthetic",
        )
    })?;

    let initial = if let Some(path) = &args.curvature_cache {
        match read_curvature_cache(path, CurvatureKind::Kfac)? {
            CurvatureModel::Kfac(factors) => factors,
            _ => unreachable!(),
        }
    } else {
        let cap = cap.as_ref().ok_or_else(|| {
            Error::validation(
                "data",
                "no capability data for the initial factors: pass --images/--labels, \
                 --synthetic, or --curvature-cache",
            )
        })?;
        let cap = subset_for_estimation(cap, args.curvature_examples);
        kfac_estimate(
            &net,
            &cap,
            &config.tracked_layers,
            config.mc_samples,
            config.seed,
            config.empirical_fisher,
        )?
    };

    let chunks = edit.chunks(config.chunk_size);
    let outcome = edit_sequential(&net, &chunks, &initial, &config)?;
    let last = outcome.models.last().unwrap();
    save_checkpoint(&args.out, last)?;
    println!(
        "sequentially edited {} chunks of up to {} edits, gamma={}",
        chunks.len(),
        config.chunk_size,
        config.gamma
    );
    for (i, chunk) in chunks.iter().enumerate() {
        if chunk.is_empty() {
            continue;
        }
        println!(
            "  chunk {}: final-model acc on chunk {:.4}",
            i,
            last.accuracy(chunk)?
        );
    }
    if let Some(cap) = &cap {
        println!("  capability acc {:.4}", last.accuracy(cap)?);
    }
    println!("-> {}", args.out.display());
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let (cap, edit) = args.data.load()?;
    let cap = cap.ok_or_else(|| {
        Error::validation("data", "no capability data: pass --images/--labels or --synthetic")
    })?;
    let edit = edit.ok_or_else(|| {
        Error::validation(
            "data",
            "no edit data: pass --edit-images/--edit-labels or --synthetic",
        )
    })?;

    let net0 = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut widths = vec![cap.dim()];
            widths.extend_from_slice(&args.hidden);
            widths.push(cap.class_count);
            let mut acts = vec![Activation::Relu; args.hidden.len()];
            acts.push(Activation::Identity);
            let config = args.config.resolve(None)?;
            let mut rng = rand::SeedableRng::seed_from_u64(config.seed);
            let net = FeedForwardNet::random(&widths, &acts, &mut rng)?;
            let (train, held) = cap.split_holdout(1.0 / 6.0, config.seed);
            let (trained, report) = pretrain(
                &net,
                &train,
                args.pretrain_epochs,
                args.pretrain_lr,
                32,
                config.seed,
                Some(&held),
            )?;
            println!(
                "# pretrained {:?}: train acc {:.4}, held-out acc {:.4}",
                widths,
                report.train_accuracy,
                report.eval_accuracy.unwrap_or(f64::NAN)
            );
            trained
        }
    };

    let config = args.config.resolve(Some(&net0))?;
    let kinds = args
        .curvature
        .iter()
        .map(|k| CurvatureKind::from_name(k))
        .collect::<Result<Vec<_>>>()?;
    let opts = SweepOptions {
        kinds,
        k_grid: args.k_grid.clone(),
        config: config.clone(),
        curvature_examples: args.curvature_examples,
        holdout_fraction: 1.0 / 6.0,
        measure_walltime: args.wall_clock,
    };
    let records = sweep_gamma(&net0, &cap, &edit, &opts)?;
    let csv = records_to_csv(&records, &config);
    std::fs::write(&args.out, &csv)?;
    println!(
        "swept {} grid points -> {}",
        records.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let report = verify(args.seed)?;
    print!("{}", report.render());
    Ok(if report.all_passed() { 0 } else { 3 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_validation_names_field() {
        let code = run([
            "crispe", "edit", "--checkpoint", "/nonexistent.crsp", "--synthetic", "--gamma",
            "1.5", "--out", "/tmp/x.crsp",
        ]);
        assert_eq!(code, 2); // checkpoint missing surfaces first as I/O
    }

    #[test]
    fn unknown_flag_is_validation_exit() {
        let code = run(["crispe", "verify", "--definitely-not-a-flag"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["crispe", "--help"]), 0);
        assert_eq!(run(["crispe", "edit", "--help"]), 0);
    }

    #[test]
    fn config_file_merge_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"gamma": 0.5, "learning_rate": 0.123, "tracked_layers": [0]}"#,
        )
        .unwrap();
        let args = ConfigArgs {
            config: Some(path),
            gamma: Some(0.7),
            lr: None,
            steps: None,
            batch_size: None,
            early_stop: None,
            drift_threshold: None,
            chunk_size: None,
            layers: None,
            optimizer: None,
            seed: None,
            mc_samples: None,
            empirical_fisher: false,
            refresh_kfac: false,
            joint: false,
        };
        let config = args.resolve(None).unwrap();
        assert_eq!(config.gamma, 0.7); // CLI wins
        assert_eq!(config.learning_rate, 0.123); // file wins over default
        assert_eq!(config.tracked_layers, vec![0]);
        assert_eq!(config.max_steps, 25); // default
    }

    #[test]
    fn defaults_match_documented_values() {
        let args = ConfigArgs {
            config: None,
            gamma: None,
            lr: None,
            steps: None,
            batch_size: None,
            early_stop: None,
            drift_threshold: None,
            chunk_size: None,
            layers: Some(vec![0]),
            optimizer: None,
            seed: None,
            mc_samples: None,
            empirical_fisher: false,
            refresh_kfac: false,
            joint: false,
        };
        let config = args.resolve(None).unwrap();
        assert_eq!(config.learning_rate, 5e-4);
        assert_eq!(config.max_steps, 25);
        assert_eq!(config.batch_size, 32);
        assert_eq!(config.early_stop_loss, 0.01);
        assert_eq!(config.chunk_size, 100);
        assert_eq!(config.drift_threshold, 0.25);
        assert!(matches!(config.optimizer, OptimizerKind::Adam { .. }));
    }
}
