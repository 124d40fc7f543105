use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use igva::embedding::{embed_instruction, EmbeddingProvider};
use igva::fusion::{pipeline_forward, Mode};
use igva::gradcheck::{check_end_to_end, check_op, DimsPreset, GradCheckConfig, GradCheckReport};
use igva::hierarchy::{load_features, make_grouping, save_features, synth_features, SynthSpec};
use igva::io::checkpoint::Checkpoint;
use igva::io::config::RunConfig;
use igva::io::csv::{
    comparison_csv, group_labels, loss_trace_csv, partial_trace_csv, weight_table_csv, write_text, GROUP_LABELS,
};
use igva::training::{compare_static_vs_dynamic, eval_weight_report, gen_task, train, SyntheticTask};
use igva::{Error, OpKind};

#[derive(Parser)]
#[command(name = "igva", version, about = "Instruction-guided fusion of hierarchical visual features")]
struct Cli {
    /// Seed for every random draw; falls back to IGVA_SEED.
    #[arg(long, global = true, env = "IGVA_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare recorded gradients with central finite differences.
    Gradcheck {
        /// Problem size: toy or desk.
        #[arg(long, default_value = "desk")]
        dims_preset: String,
        /// Relative-error bound for each op.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Bound for the end-to-end objective [default: 10 x tol].
        #[arg(long)]
        e2e_tol: Option<f64>,
    },
    /// Train on the planted task described by a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the allocated group weights for one instruction and feature file.
    Allocate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        instruction: String,
        /// IGT1 archive of precomputed instruction embeddings (exact-match
        /// lookup). Without it a hashed bag-of-n-grams embedding is used.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Held-out loss of the dynamic model and each static preset, as CSV.
    Compare {
        #[arg(long)]
        ckpt: PathBuf,
        /// Seed of the evaluation task [default: --seed, else the checkpoint's].
        #[arg(long)]
        task_seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean allocated weights per instruction cluster, as CSV.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic hierarchical feature file.
    SynthFeatures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        patches: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        signal: f64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Seed of the per-layer signal directions [default: --seed].
        #[arg(long)]
        direction_seed: Option<u64>,
    },
}

/// Exit status with a message for stderr.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Divergence { .. }) { 3 } else { 2 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Gradcheck {
            dims_preset,
            tol,
            e2e_tol,
        } => cmd_gradcheck(seed.unwrap_or(0), &dims_preset, tol, e2e_tol.unwrap_or(10.0 * tol)),
        Command::Train { config, out } => cmd_train(seed, config.as_deref(), &out),
        Command::Allocate {
            ckpt,
            features,
            instruction,
            embeddings,
        } => cmd_allocate(seed.unwrap_or(0), &ckpt, &features, &instruction, embeddings.as_deref()),
        Command::Compare { ckpt, task_seed, out } => cmd_compare(task_seed.or(seed), &ckpt, out.as_deref()),
        Command::Report { ckpt, task_seed, out } => cmd_report(task_seed.or(seed), &ckpt, out.as_deref()),
        Command::SynthFeatures {
            out,
            layers,
            patches,
            dim,
            signal,
            noise,
            direction_seed,
        } => {
            let seed = seed.unwrap_or(0);
            let spec = SynthSpec {
                signal,
                noise,
                direction_seed: direction_seed.unwrap_or(seed),
                ..SynthSpec::new(layers, patches, dim, seed)
            };
            synth_features(&spec)
                .and_then(|f| save_features(&f, &out))
                .map_err(Failure::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn report_line(name: &str, r: &GradCheckReport, tol: f64) -> String {
    format!(
        "{name:<20} max_rel_error {:.3e}  max_abs_error {:.3e}  checked {:>6}  tol {tol:.0e}  {}",
        r.max_rel_error,
        r.max_abs_error,
        r.checked,
        if r.passed { "PASS" } else { "FAIL" }
    )
}

fn cmd_gradcheck(seed: u64, preset: &str, tol: f64, e2e_tol: f64) -> CmdResult {
    let dims: DimsPreset = preset.parse()?;
    if !(tol > 0.0 && e2e_tol > 0.0) {
        return Err(fail("tolerances must be positive"));
    }
    let start = Instant::now();
    let mut failed = Vec::new();
    let op_cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::with_tol(tol)
    };
    for op in OpKind::ALL {
        let r = check_op(op, dims, seed, &op_cfg)?;
        println!("{}", report_line(op.name(), &r, tol));
        if !r.passed {
            failed.push(op.name().to_string());
        }
    }
    let e2e_cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::with_tol(e2e_tol)
    };
    let r = check_end_to_end(dims, seed, &e2e_cfg)?;
    println!("{}", report_line("end_to_end", &r, e2e_tol));
    if !r.passed {
        failed.push("end_to_end".into());
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_train(seed: Option<u64>, config: Option<&Path>, out: &Path) -> CmdResult {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out).map_err(|e| fail(format!("cannot create {}: {e}", out.display())))?;
    let task = gen_task(&cfg.task_spec())?;
    let trained = match train(&task, &cfg.allocator_config(), &cfg.train_config()) {
        Ok(t) => t,
        Err(Error::Divergence { step, loss, trace }) => {
            write_text(out.join("loss_trace.csv"), &partial_trace_csv(&trace))?;
            return Err(Failure {
                code: 3,
                message: format!("training diverged at step {step} (loss {loss}); trace written to loss_trace.csv"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let ck = Checkpoint {
        task: task.spec.clone(),
        model: trained.model,
    };
    ck.save(out.join("checkpoint.igt"))?;
    write_text(out.join("loss_trace.csv"), &loss_trace_csv(&trained.report))?;
    let labels = group_labels(task.spec.groups);
    write_text(out.join("weights.csv"), &weight_table_csv(&trained.report.cluster_weights, &labels)?)?;

    let trace = &trained.report.loss_trace;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("steps {}  loss {first:.6} -> {last:.6}", trace.len());
    }
    for (c, w) in trained.report.cluster_weights.iter().enumerate() {
        println!(
            "cluster {c}  L1 to planted profile {:.4}",
            w.l1_distance(task.profiles[c].as_slice())
        );
    }
    Ok(())
}

fn cmd_allocate(seed: u64, ckpt: &Path, features: &Path, text: &str, embeddings: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    let f = load_features(features)?;
    let grouping = make_grouping(f.layers(), ck.task.groups)?;
    let provider = match embeddings {
        Some(p) => EmbeddingProvider::lookup_file(p)?,
        None => EmbeddingProvider::HashToy {
            dim: ck.task.sentence_dim,
            seed,
        },
    };
    let s = embed_instruction(text, &provider)?;
    let (w, rep) = pipeline_forward(&f, &grouping, &s, &ck.model.allocator, &ck.model.adapter, &Mode::Dynamic)?;
    let labels = group_labels(w.len());
    for (label, v) in labels.iter().zip(w.as_slice()) {
        println!("{label:<12} {v:.6}");
    }
    let checksum: f64 = rep.adapted.data().iter().sum();
    println!("checksum     {checksum:.12e}");
    Ok(())
}

fn task_for(ck: &Checkpoint, task_seed: Option<u64>) -> Result<SyntheticTask, Failure> {
    let mut spec = ck.task.clone();
    if let Some(s) = task_seed {
        spec.seed = s;
    }
    Ok(gen_task(&spec)?)
}

fn emit(text: &str, out: Option<&Path>) -> CmdResult {
    match out {
        Some(p) => Ok(write_text(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_compare(task_seed: Option<u64>, ckpt: &Path, out: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    if ck.task.groups != GROUP_LABELS.len() {
        return Err(fail(format!(
            "static presets are defined for {} groups, checkpoint has {}",
            GROUP_LABELS.len(),
            ck.task.groups
        )));
    }
    let task = task_for(&ck, task_seed)?;
    let rows = compare_static_vs_dynamic(&task, &ck.model)?;
    emit(&comparison_csv(&rows), out)
}

fn cmd_report(task_seed: Option<u64>, ckpt: &Path, out: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    let task = task_for(&ck, task_seed)?;
    let rows = eval_weight_report(&task, &ck.model.allocator)?;
    let labels = group_labels(task.spec.groups);
    emit(&weight_table_csv(&rows, &labels)?, out)?;
    if task.spec.groups != GROUP_LABELS.len() {
        return Err(fail(format!(
            "column labels {} describe exactly {} groups; wrote generic labels for {} groups",
            GROUP_LABELS.join(","),
            GROUP_LABELS.len(),
            task.spec.groups
        )));
    }
    Ok(())
}
