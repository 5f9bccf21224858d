//! Command-line front end. Every flag overrides the matching config key.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::SpanScore;
use crate::harness::{
    cmd_attention, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, gradcheck_table, RunConfig, ORACLE_PASS,
};
use crate::model::PeMode;
use crate::tensor::Fault;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "logan", version, about = "Weakly supervised video moment retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic concept dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Check the generated test split with the nearest-concept oracle.
        #[arg(long)]
        verify: bool,
    },
    /// Train and write a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint and its optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Rank proposals by their true IoU instead of the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Dump the attention matrices of one query as JSON.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        query_id: String,
        /// Manifest holding the query (defaults to the test manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output file (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_parser = parse_pe_mode)]
    pub pe_mode: Option<PeMode>,
    /// Message-passing iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Drop the graph stage (same as `--iterations 0`).
    #[arg(long)]
    pub fbw_only: bool,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub batch_videos: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run batch and eval work on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long, value_parser = parse_span_score)]
    pub span_score: Option<SpanScore>,
}

fn parse_pe_mode(s: &str) -> std::result::Result<PeMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected pe, tef or none, got {s}"))
}

fn parse_span_score(s: &str) -> std::result::Result<SpanScore, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected lse or length_normalized, got {s}"))
}

impl Common {
    /// Loads the config file (or defaults) and applies every flag that was given.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let p = &mut c.paths;
        for (dst, src) in [
            (&mut p.data_dir, &self.data_dir),
            (&mut p.train_manifest, &self.train_manifest),
            (&mut p.test_manifest, &self.test_manifest),
            (&mut p.vocab, &self.vocab),
            (&mut p.checkpoint, &self.checkpoint),
            (&mut p.report, &self.report),
            (&mut p.log, &self.log),
            (&mut p.embeddings, &self.embeddings),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if let Some(m) = self.pe_mode {
            c.model.pe_mode = m;
        }
        if let Some(t) = self.iterations {
            c.model.iterations = t;
        }
        if self.fbw_only {
            c.model.iterations = 0;
        }
        if let Some(h) = self.hidden {
            c.model.dims.hidden = h;
        }
        if let Some(l) = self.lambda {
            c.model.lambda = l;
        }
        if let Some(m) = self.margin {
            c.loss.margin = m;
        }
        if let Some(k) = self.top_k {
            c.loss.top_k_negatives = k;
        }
        if let Some(b) = self.batch_videos {
            c.loss.batch_videos = b;
        }
        if let Some(lr) = self.lr {
            c.train.lr = lr;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(s) = self.synth_seed {
            c.synth.seed = s;
        }
        if let Some(t) = self.threads {
            c.train.threads = t;
        }
        if self.sequential {
            c.train.sequential = true;
        }
        if let Some(s) = self.span_score {
            c.eval.span_score = s;
        }
        Ok(c)
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { common, verify } => {
            let cfg = common.resolve()?;
            let out = cmd_synth(&cfg, verify)?;
            println!(
                "wrote {} train and {} test videos; manifests {} and {}",
                out.train_videos,
                out.test_videos,
                out.files.train_manifest.display(),
                out.files.test_manifest.display()
            );
            if let Some(rep) = out.oracle {
                print!("{}", rep.render_table());
                let r = rep.recall(1, 0.5).unwrap_or(0.0);
                if r < ORACLE_PASS {
                    eprintln!("nearest-concept oracle R@1 at IoU 0.5 is {r:.3}, below {ORACLE_PASS}");
                    return Ok(EXIT_CHECK_FAILED);
                }
                println!("oracle check passed");
            }
            Ok(EXIT_OK)
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let out = cmd_train(&cfg, resume)?;
            for (i, l) in out.epoch_losses.iter().enumerate() {
                println!("epoch {:>4}  loss {l:.6}", out.epochs_done - out.epoch_losses.len() + i);
            }
            println!("checkpoint {} after {} steps", out.checkpoint.display(), out.steps);
            Ok(EXIT_OK)
        }
        Command::Eval { common, oracle } => {
            let cfg = common.resolve()?;
            let rep = cmd_eval(&cfg, oracle)?;
            print!("{}", rep.render_table());
            println!("report {}", cfg.paths.report().display());
            Ok(EXIT_OK)
        }
        Command::Gradcheck { common, inject_fault } => {
            let cfg = common.resolve()?;
            let fault = inject_fault.then_some(Fault::FlipTanhGrad);
            let rep = cmd_gradcheck(&cfg, fault)?;
            print!("{}", gradcheck_table(&rep));
            if rep.passed() {
                println!("all parameters within {:e}", rep.tol);
                Ok(EXIT_OK)
            } else {
                eprintln!("gradient check failed");
                Ok(EXIT_CHECK_FAILED)
            }
        }
        Command::Attention { common, query_id, manifest, out } => {
            let cfg = common.resolve()?;
            let dump = cmd_attention(&cfg, &query_id, manifest.as_deref())?;
            let text = serde_json::to_string_pretty(&dump)? + "\n";
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => print!("{text}"),
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
