//! Argument parsing and dispatch. Exit codes: 0 ok, 1 usage, 2 data error,
//! 3 check failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stf_core::data::SynthConfig;
use stf_core::Kernel;

use crate::binary::load_sequence;
use crate::commands::{self, Dataset, EvalOptions, Scope, SynthOptions, GRADCHECK_TOL};
use crate::config::{parse_streams, Ablation, RunConfig};
use crate::error::{CliError, Result};
use crate::text::resolve_layout;

#[derive(Parser, Debug)]
#[command(name = "stf", version, about = "STF-Net skeleton action recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by the commands that build a model.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in layout id (ntu25, kinetics18, micro5) or layout file.
    #[arg(long)]
    pub layout: Option<String>,
    /// Comma-separated streams: joint, bone, joint-motion, bone-motion.
    #[arg(long)]
    pub streams: Option<String>,
    /// Comma-separated fusion weights, one per stream.
    #[arg(long)]
    pub fusion_weights: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Remove a component; repeat for several.
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Number of attention grains (1 = joints only).
    #[arg(long)]
    pub grains: Option<usize>,
    #[arg(long)]
    pub tdf_kernel: Option<usize>,
    /// Single-threaded, bit-reproducible execution (the only mode this build has).
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model per stream.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score checkpoints on a split and fuse the streams.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `stf train`.
        #[arg(long, default_value = "run")]
        run: PathBuf,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Fuse previously written score files without running the models.
        #[arg(long)]
        from_scores: bool,
    },
    /// Finite-difference gradient check in double precision.
    Gradcheck {
        #[arg(long, value_enum, default_value = "model")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Scale one kernel's backward pass by 1.5 (negative control), e.g. `softmax`.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Export MCF attention matrices and the final temporal heatmap.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// SKEL file; repeat to average over several.
        #[arg(long, required = true)]
        sequence: Vec<PathBuf>,
        /// Comma-separated MCF blocks (default: all).
        #[arg(long)]
        blocks: Option<String>,
        #[arg(long, default_value = "attention")]
        out: PathBuf,
    },
    /// Generate the synthetic motion-family dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        train_per_class: usize,
        #[arg(long, default_value_t = 16)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
}

impl Common {
    /// Config file (or defaults) with flag overrides applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(l) = &self.layout {
            cfg.model.layout = resolve_layout(l)?.name;
        }
        if let Some(s) = &self.streams {
            cfg.streams = parse_streams(s)?;
            if self.fusion_weights.is_none() {
                cfg.fusion_weights = vec![1.0; cfg.streams.len()];
            }
        }
        if let Some(w) = &self.fusion_weights {
            cfg.set("fusion_weights", w)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        for &a in &self.ablate {
            cfg.ablate(a);
        }
        if let Some(g) = self.grains {
            cfg.model.grains_used = g;
        }
        if let Some(k) = self.tdf_kernel {
            cfg.model.tdf_kernel = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self, cfg: &RunConfig) -> Result<stf_core::topology::Layout> {
        resolve_layout(self.layout.as_deref().unwrap_or(&cfg.model.layout))
    }
}

fn parse_blocks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|b| {
            b.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid block index '{b}'")))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            out,
            classes,
            train_per_class,
            eval_per_class,
            frames,
            noise,
        } => {
            let layout = resolve_layout(common.layout.as_deref().unwrap_or("ntu25"))?;
            let config = SynthConfig {
                seed: common.seed.unwrap_or(0),
                num_classes: classes,
                train_per_class,
                eval_per_class,
                frames,
                noise,
                ..SynthConfig::default()
            };
            let m = commands::synth(
                &SynthOptions {
                    out: out.clone(),
                    config,
                },
                &layout,
            )?;
            println!(
                "wrote {} sequences and {}",
                m.samples.len(),
                out.join("manifest.txt").display()
            );
        }
        Command::Train {
            common,
            manifest,
            out,
            epochs,
            quiet,
        } => {
            let mut cfg = common.run_config()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.schedule.decay_epochs.retain(|&d| d < e);
            }
            cfg.validate()?;
            let layout = common.layout(&cfg)?;
            let data = Dataset::load(&manifest, &layout, cfg.model.in_channels)?;
            for r in commands::train(&cfg, &layout, &data, &out, !quiet)? {
                println!(
                    "{}: params {} train_top1 {:.4}{} in {:.1}s",
                    r.stream,
                    r.params,
                    r.final_train_top1,
                    r.best_eval_top1
                        .map_or(String::new(), |a| format!(" best_eval_top1 {a:.4}")),
                    r.seconds
                );
            }
        }
        Command::Eval {
            common,
            manifest,
            run,
            checkpoint,
            split,
            from_scores,
        } => {
            let cfg = common.run_config()?;
            let opts = EvalOptions {
                run_dir: run,
                which: checkpoint,
                split,
                streams: cfg.streams.clone(),
                weights: cfg.fusion_weights.clone(),
                from_scores,
            };
            let o = commands::eval(&opts, &manifest)?;
            for (s, a) in &o.per_stream_top1 {
                println!("{s}: top1 {a:.4}");
            }
            let params = if from_scores {
                String::new()
            } else {
                format!(" params {}", o.params)
            };
            println!(
                "fused: top1 {:.4} top5 {:.4}{params} ({:.1}s)",
                o.report.top1, o.report.top5, o.seconds
            );
        }
        Command::Gradcheck {
            scope,
            seed,
            eps,
            inject_fault,
        } => {
            let fault = inject_fault
                .map(|k| {
                    Kernel::from_name(&k).ok_or_else(|| {
                        let names: Vec<&str> = Kernel::ALL.iter().map(|k| k.name()).collect();
                        CliError::Usage(format!(
                            "unknown kernel '{k}' (one of {})",
                            names.join(", ")
                        ))
                    })
                })
                .transpose()?;
            let started = std::time::Instant::now();
            let lines = commands::gradcheck(scope, seed, eps, fault)?;
            let mut failed = Vec::new();
            for l in &lines {
                let ok = l.report.passes(GRADCHECK_TOL);
                println!(
                    "{} {:<28} max_rel_error {:.3e} coords {}",
                    if ok { "ok  " } else { "FAIL" },
                    l.name,
                    l.report.max_rel_error,
                    l.report.coordinates
                );
                if !ok {
                    failed.push(l.name.clone());
                }
            }
            println!(
                "{} checks in {:.1}s",
                lines.len(),
                started.elapsed().as_secs_f64()
            );
            if !failed.is_empty() {
                return Err(CliError::Check(format!(
                    "gradient mismatch beyond {GRADCHECK_TOL:e} in {}",
                    failed.join(", ")
                )));
            }
        }
        Command::ExportAttention {
            checkpoint,
            sequence,
            blocks,
            out,
        } => {
            let blocks = blocks
                .as_deref()
                .map(parse_blocks)
                .transpose()?
                .unwrap_or_default();
            let seqs = sequence
                .iter()
                .map(|p| load_sequence(p, None))
                .collect::<Result<Vec<_>>>()?;
            let export = commands::export_attention(&checkpoint, &seqs, &blocks)?;
            for p in commands::write_export(&out, &export)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
