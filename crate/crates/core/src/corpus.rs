//! Locating the checked-in ML sources and running programs against them.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bytecode::{decode_image, BytecodeImage};
use crate::seedc::{self, CompileFailure};
use crate::vm::{self, CapturePorts, FileSystem, Termination};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Compile(#[from] CompileFailure),
    #[error("{path}: {message}")]
    BadImage { path: PathBuf, message: String },
}

/// The corpus directory: `stdlib/`, `interp/`, `fullc/`, `tests/`, `seed/`
/// and the `*.files` manifests.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
}

/// Output and status of one program run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub status: i32,
}

impl RunOutcome {
    fn from_run(ports: CapturePorts, t: &Termination) -> Self {
        RunOutcome { stdout: ports.out, stderr: ports.err, status: t.status() }
    }
}

impl Corpus {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Corpus { root: root.into() }
    }

    /// `./corpus` when present, otherwise the copy next to this crate.
    pub fn locate() -> Self {
        let local = PathBuf::from("corpus");
        if local.join("interp.files").is_file() {
            return Corpus::new(local);
        }
        Corpus::new(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus"))
    }

    /// Paths listed in `corpus/<name>.files`, relative to the corpus root.
    pub fn manifest(&self, name: &str) -> Result<Vec<String>, CorpusError> {
        let path = self.root.join(format!("{name}.files"));
        let text = std::fs::read_to_string(&path).map_err(|source| CorpusError::Io { path, source })?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
    }

    pub fn interp_files(&self) -> Result<Vec<String>, CorpusError> {
        self.manifest("interp")
    }

    pub fn fullc_files(&self) -> Result<Vec<String>, CorpusError> {
        self.manifest("fullc")
    }

    pub fn stdlib_files(&self) -> Result<Vec<String>, CorpusError> {
        self.manifest("stdlib")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn seed_path(&self) -> PathBuf {
        self.root.join("seed/fullc.boot.byte")
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>, CorpusError> {
        let path = self.path(rel);
        std::fs::read(&path).map_err(|source| CorpusError::Io { path, source })
    }

    /// `(name, bytes)` pairs for seedc.
    pub fn sources(&self, rels: &[String]) -> Result<Vec<(String, Vec<u8>)>, CorpusError> {
        rels.iter().map(|r| Ok((r.clone(), self.read(r)?))).collect()
    }

    /// Seed-compile the interpreter.
    pub fn compile_interp(&self) -> Result<BytecodeImage, CorpusError> {
        Ok(seedc::compile_sources(&self.sources(&self.interp_files()?)?)?)
    }

    /// The differential test programs, sorted by name.
    pub fn tests(&self) -> Result<Vec<String>, CorpusError> {
        let dir = self.root.join("tests");
        let entries = std::fs::read_dir(&dir).map_err(|source| CorpusError::Io { path: dir.clone(), source })?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".mml") || n.ends_with(".fml"))
            .map(|n| format!("tests/{n}"))
            .collect();
        names.sort();
        Ok(names)
    }
}

pub fn load_image(path: &Path) -> Result<BytecodeImage, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    decode_image(&bytes).map_err(|e| CorpusError::BadImage { path: path.to_path_buf(), message: e.to_string() })
}

/// Run `image` with output captured; file primitives resolve against `base`.
pub fn run_captured(image: &BytecodeImage, argv: Vec<String>, base: Option<&Path>) -> RunOutcome {
    let mut ports = CapturePorts::new(FileSystem::Real { base: base.map(Path::to_path_buf) });
    let t = vm::run(image, argv, &mut ports);
    RunOutcome::from_run(ports, &t)
}

/// One differential-suite program and the outcome of each leg.
#[derive(Clone, Debug)]
pub struct DiffResult {
    pub name: String,
    pub legs: Vec<(&'static str, RunOutcome)>,
}

impl DiffResult {
    pub fn agree(&self) -> bool {
        self.legs.windows(2).all(|w| w[0].1 == w[1].1)
    }

    pub fn summary(&self) -> String {
        let status = self.legs.first().map_or(-1, |l| l.1.status);
        let verdict = if self.agree() { "agree" } else { "DISAGREE" };
        let legs: Vec<String> = self.legs.iter().map(|(n, o)| format!("{n}={}", o.status)).collect();
        format!("{} {verdict} status={status} [{}]", self.name, legs.join(" "))
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CorpusError> {
    std::path::absolute(p).map_err(|source| CorpusError::Io { path: p.to_path_buf(), source })
}

/// Executors shared by every program of the differential suite.
pub struct Legs {
    pub interp: BytecodeImage,
    pub fullc: BytecodeImage,
    pub fullc_sources: Vec<String>,
    pub stdlib: Vec<String>,
}

impl Legs {
    /// The seed-compiled interpreter and the corpus seed as compiled fullc.
    pub fn new(corpus: &Corpus) -> Result<Self, CorpusError> {
        Self::with_fullc(corpus, load_image(&corpus.seed_path())?)
    }

    pub fn with_fullc(corpus: &Corpus, fullc: BytecodeImage) -> Result<Self, CorpusError> {
        let root = absolute(&corpus.root)?;
        let abs = |rels: Vec<String>| rels.iter().map(|r| root.join(r).display().to_string()).collect();
        Ok(Legs {
            interp: corpus.compile_interp()?,
            fullc,
            fullc_sources: abs(corpus.fullc_files()?),
            stdlib: abs(corpus.stdlib_files()?),
        })
    }

    /// Compile `sources` with `fullc` run directly, writing `out`.
    pub fn fullc_compile(&self, sources: &[String], out: &Path) -> RunOutcome {
        let mut argv = sources.to_vec();
        argv.push("-o".into());
        argv.push(out.display().to_string());
        run_captured(&self.fullc, argv, None)
    }

    /// Compile `sources` with fullc interpreted by the seed-compiled interp.
    pub fn interpreted_fullc_compile(&self, sources: &[String], out: &Path) -> RunOutcome {
        let mut argv = self.fullc_sources.clone();
        argv.push("--".into());
        argv.extend(sources.iter().cloned());
        argv.push("-o".into());
        argv.push(out.display().to_string());
        run_captured(&self.interp, argv, None)
    }

    pub fn interpret(&self, sources: &[String], args: &[String]) -> RunOutcome {
        let mut argv = sources.to_vec();
        argv.push("--".into());
        argv.extend(args.iter().cloned());
        run_captured(&self.interp, argv, None)
    }

    /// Run a compilation step and then the image it produced.
    fn compiled_leg(&self, compile: RunOutcome, out: &Path) -> RunOutcome {
        if compile.status != 0 {
            return compile;
        }
        match load_image(out) {
            Ok(img) => run_captured(&img, Vec::new(), None),
            Err(e) => RunOutcome { stdout: Vec::new(), stderr: e.to_string().into_bytes(), status: -1 },
        }
    }

    /// All legs for the program at `path`, with artifacts under `workdir`.
    pub fn check(&self, name: &str, path: &Path, workdir: &Path) -> Result<DiffResult, CorpusError> {
        let stem = name.replace('/', "_");
        let mut sources = self.stdlib.clone();
        sources.push(absolute(path)?.display().to_string());
        let mut legs = Vec::new();
        if name.ends_with(".mml") {
            let mut srcs = Vec::new();
            for s in &sources {
                let bytes = std::fs::read(s).map_err(|source| CorpusError::Io { path: s.into(), source })?;
                srcs.push((s.clone(), bytes));
            }
            let outcome = match seedc::compile_sources(&srcs) {
                Ok(img) => run_captured(&img, Vec::new(), None),
                Err(e) => RunOutcome { stdout: Vec::new(), stderr: e.to_string().into_bytes(), status: -1 },
            };
            legs.push(("seedc", outcome));
        }
        let out = workdir.join(format!("{stem}.fullc.byte"));
        legs.push(("fullc", self.compiled_leg(self.fullc_compile(&sources, &out), &out)));
        legs.push(("interp", self.interpret(&sources, &[])));
        let out = workdir.join(format!("{stem}.ifullc.byte"));
        legs.push(("interp-fullc", self.compiled_leg(self.interpreted_fullc_compile(&sources, &out), &out)));
        Ok(DiffResult { name: name.to_string(), legs })
    }
}

/// The four-way differential suite over `corpus/tests`, run in parallel.
pub fn run_suite(corpus: &Corpus, workdir: &Path) -> Result<Vec<DiffResult>, CorpusError> {
    std::fs::create_dir_all(workdir).map_err(|source| CorpusError::Io { path: workdir.into(), source })?;
    let legs = Legs::new(corpus)?;
    let tests = corpus.tests()?;
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<DiffResult, CorpusError>>> = (0..tests.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(name) = tests.get(i) else { break };
                let r = legs.check(name, &corpus.path(name), workdir);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every test ran")).collect()
}
