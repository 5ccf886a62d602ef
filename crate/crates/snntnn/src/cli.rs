//! Subcommand CLI: train / eval / report / export-gates / gradcheck.
//!
//! Diagnostics go to stderr, data (history CSV, reports, metrics) to stdout.
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 gradient
//! suite failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_idx, split_validation, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::report::{evaluate_accuracy, folded_weights, SparsityReport};
use crate::train::{alternating_train, resume_train, EpochRecord, Gating, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "snntnn", version, about = "Sparse FC layers via switcher-network gating")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (alternating SNN/TNN phases, or an ungated baseline).
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test set.
    Eval(EvalArgs),
    /// Print the sparsity report for a checkpoint.
    Report(ReportArgs),
    /// Export per-layer gates and effective weights as CSV.
    ExportGates(ExportArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the four standard MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output checkpoint path (a .best sibling tracks best validation).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from a checkpoint (config is taken from it).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_parser = parse_gating)]
    strategy: Option<Gating>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Gate layer 1 as well (default gates layers 2..=L).
    #[arg(long)]
    gate_first_layer: bool,
    /// Start the final gate-conv bias at 0 (pure Kaiming) instead of +1.
    #[arg(long)]
    paper_faithful_init: bool,
    /// Let gradient flow into the weights through the switcher input path.
    #[arg(long)]
    coupled_grads: bool,
    /// Print the fully resolved configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

fn parse_gating(s: &str) -> std::result::Result<Gating, String> {
    match s {
        "none" => Ok(Gating::None),
        "neuron" => Ok(Gating::Neuron),
        "connection" => Ok(Gating::Connection),
        other => Err(format!("unknown strategy {:?} (none|neuron|connection)", other)),
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write the report as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Recompute test accuracy from data instead of using the stored value.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse argv and run; returns the process exit code.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are success; anything else is a usage error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
        Command::ExportGates(args) => run_export(args),
        Command::Gradcheck(args) => return run_gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Usage(_) | Error::Index(_) => 1,
                _ => 2,
            }
        }
    }
}

fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    if train {
        (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
    } else {
        (dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))
    }
}

fn load_train_split(dir: &Path, val_size: usize) -> Result<(Dataset, Dataset)> {
    let (imgs, labels) = mnist_paths(dir, true);
    let ds = load_idx(&imgs, &labels)?;
    split_validation(ds, val_size)
}

fn load_test(dir: &Path) -> Result<Dataset> {
    let (imgs, labels) = mnist_paths(dir, false);
    load_idx(&imgs, &labels)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?
        }
        None => TrainConfig::default(),
    };
    if let Some(g) = args.strategy {
        config.gating = g;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.epochs {
        config.epochs = t;
    }
    if args.gate_first_layer {
        config.gate_first_layer = true;
    }
    if args.paper_faithful_init {
        config.gate_bias_init = 0.0;
    }
    if args.coupled_grads {
        config.coupled_grads = true;
    }
    config.validate()?;
    if args.dump_config {
        let toml = toml::to_string(&config)
            .map_err(|e| Error::Format(format!("config serialization: {}", e)))?;
        print!("{}", toml);
        return Ok(());
    }
    let data_dir = args
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Usage("--data-dir is required to train".into()))?;
    let out = args
        .out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out is required to train".into()))?;
    let (train_ds, val_ds) = load_train_split(data_dir, config.val_size)?;
    eprintln!(
        "train: {} examples, val: {} examples, gating: {:?}, seed: {}, fingerprint: {}",
        train_ds.len(),
        val_ds.len(),
        config.gating,
        config.seed,
        config.fingerprint()
    );

    let stdout = std::io::stdout();
    let mut header_done = false;
    let mut best: Option<(f64, Vec<u8>)> = None;
    let best_path = {
        let mut os = out.as_os_str().to_owned();
        os.push(".best");
        PathBuf::from(os)
    };
    let record_epoch = |model: &crate::train::GatedModel,
                        rec: &EpochRecord,
                        header_done: &mut bool,
                        best: &mut Option<(f64, Vec<u8>)>,
                        history_so_far: &[EpochRecord]|
     -> Result<()> {
        let mut lock = stdout.lock();
        if !*header_done {
            writeln!(lock, "{}", EpochRecord::csv_header(rec.zero_frac.len()))?;
            *header_done = true;
        }
        writeln!(lock, "{}", rec.csv_row())?;
        lock.flush()?;
        if !rec.val_acc.is_nan() && best.as_ref().map_or(true, |(acc, _)| rec.val_acc > *acc) {
            // Serialize the best-so-far model now; written to disk at the end.
            let mut state = TrainState::new(model.config.momentum);
            state.epoch = rec.epoch + 1;
            let tmp = std::env::temp_dir().join(format!("snntnn-best-{}.ckpt", std::process::id()));
            save_checkpoint(model, &state, history_so_far, None, &tmp)?;
            let bytes = fs::read(&tmp)?;
            let _ = fs::remove_file(&tmp);
            *best = Some((rec.val_acc, bytes));
        }
        Ok(())
    };

    let (model, state, history) = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let mut model = ckpt.model;
            let mut state = ckpt.state;
            let prior_history = ckpt.meta.history.clone();
            let prior = prior_history.clone();
            let mut on_epoch = |m: &crate::train::GatedModel, r: &EpochRecord| {
                let mut hist = prior.clone();
                hist.push(r.clone());
                record_epoch(m, r, &mut header_done, &mut best, &hist)
            };
            let new_hist = resume_train(&mut model, &mut state, &train_ds, &val_ds, &mut on_epoch)?;
            let mut full = prior_history.clone();
            full.extend(new_hist);
            (model, state, full)
        }
        None => {
            let mut running: Vec<EpochRecord> = Vec::new();
            let (model, history) = alternating_train(&config, &train_ds, &val_ds, |m, r| {
                running.push(r.clone());
                record_epoch(m, r, &mut header_done, &mut best, &running)
            })?;
            let mut state = TrainState::new(config.momentum);
            state.epoch = config.epochs;
            (model, state, history)
        }
    };

    // Recover final optimizer state for checkpointing on the fresh-run path.
    let test_acc = match load_test(data_dir) {
        Ok(test_ds) => {
            let acc = evaluate_accuracy(&model, &test_ds)?;
            eprintln!("test accuracy: {:.2}%", acc);
            Some(acc)
        }
        Err(_) => None,
    };
    save_checkpoint(&model, &state, &history, test_acc, out)?;
    eprintln!("checkpoint written to {}", out.display());
    if let Some((acc, bytes)) = best {
        fs::write(&best_path, bytes)?;
        eprintln!("best-validation checkpoint ({:.2}%) written to {}", acc, best_path.display());
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let test_ds = load_test(&args.data_dir)?;
    let acc = evaluate_accuracy(&ckpt.model, &test_ds)?;
    println!("test_accuracy,{:.4}", acc);
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let accuracy = match &args.data_dir {
        Some(dir) => Some(evaluate_accuracy(&ckpt.model, &load_test(dir)?)?),
        None => ckpt.meta.test_acc,
    };
    let report = SparsityReport::build(&ckpt.model, accuracy)?;
    print!("{}", report.render());
    if let Some(csv_path) = &args.csv {
        fs::write(csv_path, report.to_csv())?;
        eprintln!("report CSV written to {}", csv_path.display());
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    fs::create_dir_all(&args.out)?;
    let folded = folded_weights(&ckpt.model)?;
    for (k, sw) in &ckpt.model.switchers {
        let z = sw.gates(&ckpt.model.tnn.layers[*k].weight)?;
        let gate_path = args.out.join(format!("layer{}_gates.csv", k + 1));
        fs::write(&gate_path, matrix_csv(z.values.data(), z.values.shape()))?;
        let weff_path = args.out.join(format!("layer{}_weff.csv", k + 1));
        fs::write(&weff_path, matrix_csv(folded[*k].data(), folded[*k].shape()))?;
        eprintln!("layer {}: wrote {} and {}", k + 1, gate_path.display(), weff_path.display());
    }
    Ok(())
}

fn matrix_csv(data: &[f32], shape: &[usize]) -> String {
    let (rows, cols) = match shape {
        [r, c] => (*r, *c),
        [r] => (*r, 1),
        _ => (1, data.len()),
    };
    let mut s = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            s.push_str(&format!("{}", data[r * cols + c]));
        }
        s.push('\n');
    }
    s
}

fn run_gradcheck(args: GradcheckArgs) -> i32 {
    let results = gradcheck::run_full_suite(args.seed);
    let mut all_pass = true;
    for r in &results {
        println!(
            "{} {:<28} max_rel_err={:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err
        );
        all_pass &= r.pass;
    }
    if all_pass {
        0
    } else {
        3
    }
}
