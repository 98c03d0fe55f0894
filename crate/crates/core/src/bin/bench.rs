use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxbench::masks::{KernelCapabilityMatrix, MaskPattern, MaskSpec};
use ctxbench::report::{load_configs, render_svg, run_matrix, to_csv, to_json, verify_suite, write_reports, OutputFormat, SEED_ENV};
use ctxbench::sparse::sparse_capabilities_csv;

#[derive(Parser)]
#[command(name = "bench", version, about = "Attention mask and context-parallel benchmark simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every config in a matrix file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; reports go to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Formats to write (repeatable). Defaults to csv and json with
        /// --out, csv on stdout.
        #[arg(long, value_enum, value_delimiter = ',')]
        format: Vec<OutputFormat>,
    },
    /// Mask utilities.
    Masks {
        #[command(subcommand)]
        command: MasksCommand,
    },
    /// Check every mechanism against the single-device reference.
    Verify {
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4])]
        worlds: Vec<usize>,
    },
    /// Print the dense and sparse kernel capability tables.
    Capabilities,
}

#[derive(Subcommand)]
enum MasksCommand {
    /// ASCII preview, `#` = visible.
    Show(MaskArgs),
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    pattern: MaskPattern,
    #[arg(long)]
    seq_len: usize,
    #[arg(long, value_delimiter = ',')]
    doc_lens: Vec<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    prefix_lens: Vec<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    global_len: Option<usize>,
}

const PREVIEW_MAX: usize = 128;

fn show_mask(a: &MaskArgs) -> Result<String, String> {
    if a.seq_len > PREVIEW_MAX {
        return Err(format!("preview is limited to {PREVIEW_MAX} tokens"));
    }
    let mut b = MaskSpec::builder(a.pattern, a.seq_len);
    if !a.doc_lens.is_empty() {
        b = b.doc_lens(&a.doc_lens);
    }
    if let Some(w) = a.window {
        b = b.window(w);
    }
    if !a.prefix_lens.is_empty() {
        b = b.prefix_lens(a.prefix_lens.clone());
    }
    if let Some(bs) = a.block_size {
        b = b.block_size(bs);
    }
    if let Some(g) = a.global_len {
        b = b.global_len(g);
    }
    let spec = b.build().map_err(|e| e.to_string())?;
    let dense = spec.to_dense().map_err(|e| e.to_string())?;
    Ok(format!(
        "{} S={} unmasked={}\n{}",
        spec.pattern(),
        spec.seq_len(),
        spec.count_unmasked(),
        dense.to_ascii()
    ))
}

fn seed_override() -> Result<Option<u64>, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, format: Vec<OutputFormat>) -> Result<bool, String> {
    let configs = load_configs(&config, seed_override()?).map_err(|e| e.to_string())?;
    let results = run_matrix(&configs);
    for r in results.iter().filter(|r| r.error.is_some()) {
        eprintln!("{}: {}", r.config_id, r.error.as_deref().unwrap_or_default());
    }
    match out {
        Some(dir) => {
            let formats = if format.is_empty() {
                vec![OutputFormat::Csv, OutputFormat::Json]
            } else {
                format
            };
            for p in write_reports(&results, &dir, &formats).map_err(|e| e.to_string())? {
                eprintln!("wrote {}", p.display());
            }
        }
        None => {
            for f in if format.is_empty() { vec![OutputFormat::Csv] } else { format } {
                match f {
                    OutputFormat::Csv => print!("{}", to_csv(&results)),
                    OutputFormat::Json => println!("{}", to_json(&results)),
                    OutputFormat::Svg => print!("{}", render_svg(&results, "forward_tflops")),
                }
            }
        }
    }
    Ok(results.iter().all(|r| r.error.is_none()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, format } => run(config, out, format),
        Command::Masks {
            command: MasksCommand::Show(a),
        } => show_mask(&a).map(|s| {
            print!("{s}");
            true
        }),
        Command::Verify { seq_len, worlds } => {
            let cases = verify_suite(seq_len, &worlds);
            for c in &cases {
                let status = if c.passed() { "ok  " } else { "FAIL" };
                match &c.error {
                    Some(e) => println!("{status} {}: {e}", c.name),
                    None => println!("{status} {}: fwd {:.2e} bwd {:.2e}", c.name, c.forward_err, c.backward_err),
                }
            }
            let failed = cases.iter().filter(|c| !c.passed()).count();
            println!("{} cases, {failed} failed", cases.len());
            Ok(failed == 0)
        }
        Command::Capabilities => {
            println!("# dense kernels x mask patterns");
            print!("{}", KernelCapabilityMatrix::dense_kernels().to_csv());
            println!("\n# sparse kernels x characteristics");
            print!("{}", sparse_capabilities_csv());
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
