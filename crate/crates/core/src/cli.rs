//! Command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bytecode::{disassemble, verify_image};
use crate::corpus::{self, load_image, Corpus};
use crate::ddc::{self, BuildPlan, PlanName, Verdict};
use crate::seedc;
use crate::vm::{self, Machine, StdPorts};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "mlboot", version, about = "Seed compiler, bytecode VM and diverse double-compilation harness")]
pub struct Cli {
    /// Corpus directory (defaults to ./corpus, then the bundled copy)
    #[arg(long, global = true, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DialectArg {
    Miniml,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlanArg {
    First,
    Improved,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compile MiniML sources (concatenated in order) with the seed compiler
    Compile {
        /// Source dialect
        #[arg(long, value_enum, default_value = "miniml")]
        dialect: DialectArg,
        /// Output image
        #[arg(short, long, value_name = "OUT")]
        output: PathBuf,
        /// MiniML source files
        #[arg(required = true, value_name = "SRC")]
        sources: Vec<PathBuf>,
    },
    /// Run a bytecode image
    Run {
        /// Bytecode image
        image: PathBuf,
        /// Print one line per executed instruction to standard error
        #[arg(long)]
        trace: bool,
        /// Maximum number of traced instructions
        #[arg(long, default_value_t = 10_000, value_name = "N")]
        trace_limit: u64,
        /// Program arguments
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Interpret FullML sources with the seed-compiled interpreter
    Interp {
        /// FullML source files
        #[arg(required = true, value_name = "SRC")]
        sources: Vec<String>,
        /// Program arguments, after `--`
        #[arg(last = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Print the disassembly of an image
    Disasm {
        /// Bytecode image
        image: PathBuf,
    },
    /// Check an image's structure and stack discipline
    Verify {
        /// Bytecode image
        image: PathBuf,
    },
    /// Run a named build plan
    Build {
        /// Build plan
        #[arg(long, value_enum)]
        plan: PlanArg,
        /// Directory for stage artifacts and the stage log
        #[arg(long, value_name = "DIR")]
        workdir: PathBuf,
    },
    /// Diverse double-compilation check of fullc against a bootstrap binary
    Ddc {
        /// Bootstrap binary (defaults to the corpus seed)
        #[arg(long, value_name = "IMG")]
        seed: Option<PathBuf>,
        /// Directory for artifacts, logs and the report
        #[arg(long, value_name = "DIR")]
        workdir: PathBuf,
    },
    /// Regenerate the fixpoint bootstrap binary
    MakeSeed {
        /// Directory for build artifacts
        #[arg(long, value_name = "DIR")]
        workdir: PathBuf,
        /// Copy the result over the corpus seed
        #[arg(long)]
        install: bool,
    },
    /// Run the four-way differential suite over corpus/tests
    TestCorpus {
        /// Directory for compiled test images
        #[arg(long, value_name = "DIR")]
        workdir: PathBuf,
    },
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("mlboot: {msg}");
    EXIT_USER
}

/// Parse `args` (including the program name) and run; returns the exit status.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let corpus = cli.corpus.clone().map(Corpus::new).unwrap_or_else(Corpus::locate);
    dispatch(cli.command, &corpus)
}

fn dispatch(command: Command, corpus: &Corpus) -> i32 {
    match command {
        Command::Compile { dialect: DialectArg::Miniml, output, sources } => {
            match seedc::compile_files(&sources, &output) {
                Ok(_) => EXIT_OK,
                Err(e) => fail(e),
            }
        }
        Command::Run { image, trace, trace_limit, args } => run(&image, args, trace.then_some(trace_limit)),
        Command::Interp { sources, args } => interp(corpus, sources, args),
        Command::Disasm { image } => match load_image(&image) {
            Ok(img) => match disassemble(&img) {
                Ok(text) => {
                    print!("{text}");
                    EXIT_OK
                }
                Err(e) => fail(e),
            },
            Err(e) => fail(e),
        },
        Command::Verify { image } => match load_image(&image) {
            Ok(img) => {
                let diags = verify_image(&img);
                if diags.is_empty() {
                    println!("{}: ok", image.display());
                    EXIT_OK
                } else {
                    for d in &diags {
                        eprintln!("{}: {d}", image.display());
                    }
                    EXIT_USER
                }
            }
            Err(e) => fail(e),
        },
        Command::Build { plan, workdir } => {
            let name = match plan {
                PlanArg::First => PlanName::First,
                PlanArg::Improved => PlanName::Improved,
            };
            match ddc::run_plan(&BuildPlan::named(name), corpus, &workdir) {
                Ok(results) => {
                    for r in results {
                        println!("{} {} {}ms {}", r.stage, r.digest, r.duration.as_millis(), r.executor);
                    }
                    EXIT_OK
                }
                Err(e) => fail(e),
            }
        }
        Command::Ddc { seed, workdir } => {
            let seed = seed.unwrap_or_else(|| corpus.seed_path());
            match ddc::ddc_check(&seed, corpus, &workdir) {
                Ok(report) => {
                    print!("{}", report.render());
                    if report.verdict == Verdict::Pass {
                        EXIT_OK
                    } else {
                        EXIT_USER
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::MakeSeed { workdir, install } => match ddc::make_bootstrap(corpus, &workdir) {
            Ok(b) => {
                println!("seed={} byte3={} byte4={}", b.image.display(), b.byte3, b.byte4);
                if install {
                    let dest = corpus.seed_path();
                    let prov = dest.with_file_name("fullc.boot.provenance");
                    if let Err(e) = std::fs::copy(&b.image, &dest).and_then(|_| std::fs::copy(&b.provenance, &prov)) {
                        return fail(format!("{}: {e}", dest.display()));
                    }
                    println!("installed {}", dest.display());
                }
                EXIT_OK
            }
            Err(e) => fail(e),
        },
        Command::TestCorpus { workdir } => match corpus::run_suite(corpus, &workdir) {
            Ok(results) => {
                let mut failed = 0;
                for r in &results {
                    println!("{}", r.summary());
                    if !r.agree() {
                        failed += 1;
                    }
                }
                println!("{} programs, {} disagreements", results.len(), failed);
                if failed == 0 {
                    EXIT_OK
                } else {
                    EXIT_USER
                }
            }
            Err(e) => fail(e),
        },
    }
}

fn run(path: &Path, args: Vec<String>, trace: Option<u64>) -> i32 {
    let image = match load_image(path) {
        Ok(i) => i,
        Err(e) => return fail(e),
    };
    let mut ports = StdPorts::new();
    let Some(limit) = trace else {
        return vm::run(&image, args, &mut ports).status();
    };
    let mut machine = match Machine::new(&image, args, &mut ports) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let stderr = std::io::stderr();
    let mut sink = |line: String| {
        let _ = writeln!(stderr.lock(), "{line}");
    };
    match machine.run_traced(limit, &mut sink) {
        Ok(_) => machine.termination.clone().map_or(0, |t| t.status()),
        Err(fault) => {
            eprintln!("{fault}");
            vm::EXIT_FAULT
        }
    }
}

fn interp(corpus: &Corpus, sources: Vec<String>, args: Vec<String>) -> i32 {
    let image = match corpus.compile_interp() {
        Ok(i) => i,
        Err(e) => return fail(e),
    };
    let mut argv = sources;
    argv.push("--".into());
    argv.extend(args);
    let mut ports = StdPorts::new();
    vm::run(&image, argv, &mut ports).status()
}
