//! Staged build plans and the diverse double-compilation check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bytecode::{decode_image, encode_image, BytecodeImage};
use crate::corpus::{Corpus, CorpusError};
use crate::seedc;
use crate::vm::{self, CapturePorts, FileSystem};

#[derive(Debug, Error)]
pub enum DdcError {
    #[error("stage {stage} failed with status {status}: {stderr}")]
    StageFailed { stage: String, status: i32, stderr: String },
    #[error("no fixpoint: byte3 {byte3} but byte4 {byte4}")]
    FixpointDivergence { byte3: String, byte4: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DdcError + '_ {
    move |source| DdcError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanName {
    First,
    Improved,
}

impl PlanName {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanName::First => "first",
            PlanName::Improved => "improved",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    SeedCompile,
    VmRun,
    Compare,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::SeedCompile => "seed-compile",
            StageKind::VmRun => "vm-run",
            StageKind::Compare => "compare",
        }
    }
}

/// Source manifests of the corpus, named `@interp` and `@fullc` in plans.
pub const INTERP_SOURCES: &str = "@interp";
pub const FULLC_SOURCES: &str = "@fullc";

/// One step of a plan.
///
/// - `SeedCompile`: `inputs = [sources]`.
/// - `VmRun`: `inputs = [executor image, interpreted program sources, compiled sources]`;
///   the executor is the interpreter, which runs the program (fullc) on the
///   compiled sources with `-o output`.
/// - `Compare`: `inputs = [a, b]`; the output records the verdict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub kind: StageKind,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildPlan {
    pub name: PlanName,
    pub stages: Vec<Stage>,
}

fn stage(kind: StageKind, inputs: &[&str], output: &str) -> Stage {
    Stage { kind, inputs: inputs.iter().map(|s| s.to_string()).collect(), output: output.into() }
}

impl BuildPlan {
    pub fn named(name: PlanName) -> BuildPlan {
        let seed = stage(StageKind::SeedCompile, &[INTERP_SOURCES], "interp.minibyte");
        let stages = match name {
            PlanName::First => vec![
                seed,
                stage(StageKind::VmRun, &["interp.minibyte", FULLC_SOURCES, FULLC_SOURCES], "fullc.byte2"),
            ],
            PlanName::Improved => vec![
                seed,
                stage(StageKind::VmRun, &["interp.minibyte", FULLC_SOURCES, INTERP_SOURCES], "interp.byte"),
                stage(StageKind::VmRun, &["interp.byte", FULLC_SOURCES, FULLC_SOURCES], "fullc.byte2"),
            ],
        };
        BuildPlan { name, stages }
    }

    pub fn output(&self) -> &str {
        &self.stages.last().expect("plans are non-empty").output
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageResult {
    pub stage: String,
    pub artifact: PathBuf,
    pub digest: String,
    pub duration: Duration,
    pub executor: String,
}

/// Byte-level comparison outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Comparison {
    Equal,
    /// First differing offset, and up to 16 bytes from each side starting there.
    DiffAt { offset: usize, left: String, right: String },
}

fn hex_window(bytes: &[u8], at: usize) -> String {
    let end = (at + 16).min(bytes.len());
    bytes.get(at..end).unwrap_or(&[]).iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

pub fn compare_bytes(a: &[u8], b: &[u8]) -> Comparison {
    let common = a.len().min(b.len());
    let offset = match (0..common).find(|&i| a[i] != b[i]) {
        Some(i) => i,
        None if a.len() == b.len() => return Comparison::Equal,
        None => common,
    };
    Comparison::DiffAt { offset, left: hex_window(a, offset), right: hex_window(b, offset) }
}

pub fn compare_artifacts(a: &Path, b: &Path) -> Result<Comparison, DdcError> {
    let x = std::fs::read(a).map_err(io_err(a))?;
    let y = std::fs::read(b).map_err(io_err(b))?;
    Ok(compare_bytes(&x, &y))
}

/// A run context: the corpus plus a directory for artifacts and logs.
struct Runner<'c> {
    corpus: &'c Corpus,
    dir: PathBuf,
    log: String,
}

impl<'c> Runner<'c> {
    fn new(corpus: &'c Corpus, dir: &Path) -> Result<Self, DdcError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Runner { corpus, dir: dir.to_path_buf(), log: String::new() })
    }

    /// Absolute paths of a source group.
    fn group(&self, name: &str) -> Result<Vec<String>, DdcError> {
        let rels = match name {
            INTERP_SOURCES => self.corpus.interp_files()?,
            FULLC_SOURCES => self.corpus.fullc_files()?,
            _ => unreachable!("unknown source group {name}"),
        };
        let root = std::path::absolute(&self.corpus.root).map_err(io_err(&self.corpus.root))?;
        Ok(rels.iter().map(|r| root.join(r).display().to_string()).collect())
    }

    fn input_digest(&self, name: &str) -> Result<String, DdcError> {
        if name.starts_with('@') {
            let mut h = Sha256::new();
            for p in self.group(name)? {
                h.update(std::fs::read(&p).map_err(io_err(Path::new(&p)))?);
            }
            return Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect());
        }
        let p = self.artifact(name);
        Ok(sha256_hex(&std::fs::read(&p).map_err(io_err(&p))?))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        if Path::new(name).is_absolute() {
            return PathBuf::from(name);
        }
        self.dir.join(name)
    }

    fn load(&self, name: &str) -> Result<BytecodeImage, DdcError> {
        let path = self.artifact(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        decode_image(&bytes).map_err(|e| DdcError::StageFailed {
            stage: format!("load {name}"),
            status: 1,
            stderr: e.to_string(),
        })
    }

    /// Run `executor` (an image) with `argv`, file access rooted at the run directory.
    fn vm_run(&self, label: &str, executor: &BytecodeImage, argv: Vec<String>) -> Result<(), DdcError> {
        let mut ports = CapturePorts::new(FileSystem::Real { base: Some(self.dir.clone()) });
        let t = vm::run(executor, argv, &mut ports);
        if t.status() != 0 {
            let mut stderr = String::from_utf8_lossy(&ports.err).into_owned();
            stderr.push_str(&String::from_utf8_lossy(&ports.out));
            return Err(DdcError::StageFailed { stage: label.into(), status: t.status(), stderr });
        }
        Ok(())
    }

    fn run_stage(&mut self, index: usize, st: &Stage) -> Result<StageResult, DdcError> {
        let label = format!("{}:{}", st.kind.as_str(), st.output);
        let input_digests = st.inputs.iter().map(|i| self.input_digest(i)).collect::<Result<Vec<_>, _>>()?;
        let out = self.artifact(&st.output);
        let start = Instant::now();
        let executor = match st.kind {
            StageKind::SeedCompile => {
                let sources = self
                    .group(&st.inputs[0])?
                    .into_iter()
                    .map(|p| {
                        let bytes = std::fs::read(&p).map_err(io_err(Path::new(&p)))?;
                        Ok((p, bytes))
                    })
                    .collect::<Result<Vec<_>, DdcError>>()?;
                let image = seedc::compile_sources(&sources).map_err(|e| DdcError::StageFailed {
                    stage: label.clone(),
                    status: 1,
                    stderr: e.to_string(),
                })?;
                let bytes = encode_image(&image).map_err(|e| DdcError::StageFailed {
                    stage: label.clone(),
                    status: 1,
                    stderr: e.to_string(),
                })?;
                std::fs::write(&out, bytes).map_err(io_err(&out))?;
                "seedc".to_string()
            }
            StageKind::VmRun => {
                let image = self.load(&st.inputs[0])?;
                let mut argv = self.group(&st.inputs[1])?;
                argv.push("--".into());
                argv.extend(self.group(&st.inputs[2])?);
                argv.push("-o".into());
                argv.push(out.display().to_string());
                self.vm_run(&label, &image, argv)?;
                format!("vm({})", st.inputs[0])
            }
            StageKind::Compare => {
                let cmp = compare_artifacts(&self.artifact(&st.inputs[0]), &self.artifact(&st.inputs[1]))?;
                let text = match cmp {
                    Comparison::Equal => "equal\n".to_string(),
                    Comparison::DiffAt { offset, .. } => format!("differ at {offset}\n"),
                };
                std::fs::write(&out, text).map_err(io_err(&out))?;
                "compare".to_string()
            }
        };
        let duration = start.elapsed();
        let bytes = std::fs::read(&out).map_err(io_err(&out))?;
        let result = StageResult {
            stage: st.output.clone(),
            artifact: out,
            digest: sha256_hex(&bytes),
            duration,
            executor: executor.clone(),
        };
        let _ = writeln!(
            self.log,
            "stage={} kind={} executor={} inputs={} input_digests={} output={} digest={} millis={}",
            index + 1,
            st.kind.as_str(),
            executor,
            st.inputs.join(","),
            input_digests.join(","),
            st.output,
            result.digest,
            duration.as_millis().max(1),
        );
        Ok(result)
    }

    fn finish_log(&self, name: &str) -> Result<PathBuf, DdcError> {
        let path = self.dir.join(name);
        std::fs::write(&path, &self.log).map_err(io_err(&path))?;
        Ok(path)
    }

    /// `vm(compiler)(fullc sources -o output)`: a compiled fullc run directly.
    fn compile_with(&mut self, compiler: &str, output: &str) -> Result<StageResult, DdcError> {
        let image = self.load(compiler)?;
        let out = self.artifact(output);
        let mut argv = self.group(FULLC_SOURCES)?;
        argv.push("-o".into());
        argv.push(out.display().to_string());
        let start = Instant::now();
        self.vm_run(&format!("vm-run:{output}"), &image, argv)?;
        let duration = start.elapsed();
        let bytes = std::fs::read(&out).map_err(io_err(&out))?;
        let result = StageResult {
            stage: output.into(),
            artifact: out,
            digest: sha256_hex(&bytes),
            duration,
            executor: format!("vm({compiler})"),
        };
        let _ = writeln!(
            self.log,
            "stage={output} kind=vm-run executor=vm({compiler}) inputs={FULLC_SOURCES} input_digests={} output={output} digest={} millis={}",
            self.input_digest(FULLC_SOURCES)?,
            result.digest,
            duration.as_millis().max(1),
        );
        Ok(result)
    }
}

/// Run every stage of `plan` in `workdir`, writing `<plan>.log` there.
pub fn run_plan(plan: &BuildPlan, corpus: &Corpus, workdir: &Path) -> Result<Vec<StageResult>, DdcError> {
    let mut runner = Runner::new(corpus, workdir)?;
    let mut results = Vec::new();
    for (i, st) in plan.stages.iter().enumerate() {
        results.push(runner.run_stage(i, st)?);
    }
    runner.finish_log(&format!("{}.log", plan.name.as_str()))?;
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DdcReport {
    pub bootstrapped_digest: String,
    /// byte1: the bootstrap binary compiling the sources.
    pub self_build_digest: String,
    /// byte2: the output of the improved plan.
    pub debootstrapped_digest: String,
    /// byte3: byte2 compiling the sources.
    pub final_digest: String,
    pub step1_ok: bool,
    pub verdict: Verdict,
    /// Where byte3 first differs from the bootstrap binary.
    pub first_diff_offset: Option<usize>,
    /// Where byte1 first differs from byte2 (informational).
    pub byte1_vs_byte2: Option<usize>,
}

impl DdcReport {
    /// `key=value` lines followed by a one-line summary.
    pub fn render(&self) -> String {
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |n| n.to_string());
        format!(
            "bootstrapped={}\nbyte1={}\nbyte2={}\nbyte3={}\nstep1_ok={}\nfirst_diff_offset={}\nbyte1_vs_byte2={}\nverdict={}\nDDC: {}\n",
            self.bootstrapped_digest,
            self.self_build_digest,
            self.debootstrapped_digest,
            self.final_digest,
            self.step1_ok,
            opt(self.first_diff_offset),
            opt(self.byte1_vs_byte2),
            self.verdict.as_str(),
            self.verdict.as_str(),
        )
    }

    /// PASS must imply byte3 = byte1 = bootstrap.
    pub fn is_consistent(&self) -> bool {
        self.verdict != Verdict::Pass
            || (self.step1_ok
                && self.final_digest == self.bootstrapped_digest
                && self.self_build_digest == self.bootstrapped_digest)
    }
}

/// The three-step check with step 2 already done: `byte2` is the
/// debootstrapped compiler produced by the improved plan.
pub fn ddc_check_with(
    bootstrap: &Path,
    byte2: &Path,
    corpus: &Corpus,
    workdir: &Path,
) -> Result<DdcReport, DdcError> {
    let mut runner = Runner::new(corpus, workdir)?;
    let boot_bytes = std::fs::read(bootstrap).map_err(io_err(bootstrap))?;
    let boot_copy = runner.artifact("bootstrap.byte");
    std::fs::write(&boot_copy, &boot_bytes).map_err(io_err(&boot_copy))?;
    let byte2_copy = runner.artifact("byte2");
    std::fs::copy(byte2, &byte2_copy).map_err(io_err(byte2))?;

    let byte1 = runner.compile_with("bootstrap.byte", "byte1")?;
    let byte1_bytes = std::fs::read(&byte1.artifact).map_err(io_err(&byte1.artifact))?;
    let step1_ok = byte1_bytes == boot_bytes;

    let byte3 = runner.compile_with("byte2", "byte3")?;
    let byte3_bytes = std::fs::read(&byte3.artifact).map_err(io_err(&byte3.artifact))?;
    let byte2_bytes = std::fs::read(&byte2_copy).map_err(io_err(&byte2_copy))?;

    let final_cmp = compare_bytes(&byte3_bytes, &boot_bytes);
    let verdict = match (step1_ok, &final_cmp) {
        (false, _) => Verdict::Inconclusive,
        (true, Comparison::Equal) => Verdict::Pass,
        (true, Comparison::DiffAt { .. }) => Verdict::Fail,
    };
    let offset = |c: Comparison| match c {
        Comparison::Equal => None,
        Comparison::DiffAt { offset, .. } => Some(offset),
    };
    let report = DdcReport {
        bootstrapped_digest: sha256_hex(&boot_bytes),
        self_build_digest: byte1.digest,
        debootstrapped_digest: sha256_hex(&byte2_bytes),
        final_digest: byte3.digest,
        step1_ok,
        verdict,
        first_diff_offset: offset(final_cmp),
        byte1_vs_byte2: offset(compare_bytes(&byte1_bytes, &byte2_bytes)),
    };
    runner.finish_log("ddc.log")?;
    let path = runner.artifact("ddc-report.txt");
    std::fs::write(&path, report.render()).map_err(io_err(&path))?;
    Ok(report)
}

/// Diverse double-compilation of the corpus' fullc against `bootstrap`.
pub fn ddc_check(bootstrap: &Path, corpus: &Corpus, workdir: &Path) -> Result<DdcReport, DdcError> {
    let plan_dir = workdir.join("improved");
    run_plan(&BuildPlan::named(PlanName::Improved), corpus, &plan_dir)?;
    ddc_check_with(bootstrap, &plan_dir.join("fullc.byte2"), corpus, workdir)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bootstrap {
    pub image: PathBuf,
    pub provenance: PathBuf,
    pub byte2: String,
    pub byte3: String,
    pub byte4: String,
}

/// Produce a fixpoint seed from `byte2` (an improved-plan output): byte3 =
/// byte2(sources), byte4 = byte3(sources), and byte3 must equal byte4.
pub fn make_bootstrap_from(byte2: &Path, corpus: &Corpus, workdir: &Path) -> Result<Bootstrap, DdcError> {
    let mut runner = Runner::new(corpus, workdir)?;
    let byte2_copy = runner.artifact("byte2");
    if std::path::absolute(byte2).ok() != std::path::absolute(&byte2_copy).ok() {
        std::fs::copy(byte2, &byte2_copy).map_err(io_err(byte2))?;
    }
    let byte2_digest = runner.input_digest("byte2")?;
    let byte3 = runner.compile_with("byte2", "byte3")?;
    let byte4 = runner.compile_with("byte3", "byte4")?;
    runner.finish_log("make-seed.log")?;
    if compare_artifacts(&byte3.artifact, &byte4.artifact)? != Comparison::Equal {
        return Err(DdcError::FixpointDivergence { byte3: byte3.digest, byte4: byte4.digest });
    }
    let image = runner.artifact("fullc.boot.byte");
    std::fs::copy(&byte3.artifact, &image).map_err(io_err(&image))?;
    let provenance = runner.artifact("fullc.boot.provenance");
    let text = format!(
        "# fullc.boot.byte: fixpoint of the improved build plan\nsources={}\nbyte2={}\nbyte3={}\nbyte4={}\nseed={}\n",
        runner.input_digest(FULLC_SOURCES)?,
        byte2_digest,
        byte3.digest,
        byte4.digest,
        byte3.digest,
    );
    std::fs::write(&provenance, text).map_err(io_err(&provenance))?;
    Ok(Bootstrap { image, provenance, byte2: byte2_digest, byte3: byte3.digest, byte4: byte4.digest })
}

pub fn make_bootstrap(corpus: &Corpus, workdir: &Path) -> Result<Bootstrap, DdcError> {
    let plan_dir = workdir.join("improved");
    run_plan(&BuildPlan::named(PlanName::Improved), corpus, &plan_dir)?;
    make_bootstrap_from(&plan_dir.join("fullc.byte2"), corpus, workdir)
}

/// Increment the first integer constant in an image's DATA section (the
/// tamper fixture). Returns `None` when the image has no integer constant.
pub fn tamper_first_int(image: &BytecodeImage) -> Option<BytecodeImage> {
    tamper_nth_int(image, 0)
}

/// Increment the `n`-th integer constant of the DATA section, counting
/// depth-first through structured constants.
pub fn tamper_nth_int(image: &BytecodeImage, n: usize) -> Option<BytecodeImage> {
    use crate::bytecode::ConstValue;
    fn bump(c: &mut ConstValue, left: &mut usize) -> bool {
        match c {
            ConstValue::Int(v) if *left == 0 => {
                *v = v.wrapping_add(1);
                true
            }
            ConstValue::Int(_) => {
                *left -= 1;
                false
            }
            ConstValue::Str(_) => false,
            ConstValue::Block { fields, .. } => fields.iter_mut().any(|f| bump(f, left)),
        }
    }
    let mut out = image.clone();
    let mut left = n;
    out.consts.iter_mut().any(|(_, c)| bump(c, &mut left)).then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_shapes() {
        assert_eq!(BuildPlan::named(PlanName::First).stages.len(), 2);
        assert_eq!(BuildPlan::named(PlanName::Improved).stages.len(), 3);
        assert_eq!(BuildPlan::named(PlanName::First).output(), "fullc.byte2");
        assert_eq!(BuildPlan::named(PlanName::Improved).output(), "fullc.byte2");
    }

    #[test]
    fn comparisons() {
        assert_eq!(compare_bytes(b"abc", b"abc"), Comparison::Equal);
        let Comparison::DiffAt { offset, left, right } = compare_bytes(b"abcd", b"abce") else { panic!() };
        assert_eq!((offset, left.as_str(), right.as_str()), (3, "64", "65"));
        assert!(matches!(compare_bytes(b"ab", b"abc"), Comparison::DiffAt { offset: 2, .. }));
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn report_rendering() {
        let r = DdcReport {
            bootstrapped_digest: "a".into(),
            self_build_digest: "a".into(),
            debootstrapped_digest: "b".into(),
            final_digest: "a".into(),
            step1_ok: true,
            verdict: Verdict::Pass,
            first_diff_offset: None,
            byte1_vs_byte2: Some(4),
        };
        assert!(r.is_consistent());
        assert!(r.render().ends_with("DDC: PASS\n"));
        assert!(r.render().contains("byte1_vs_byte2=4\n"));
    }

    #[test]
    fn tamper_counts_ints_depth_first() {
        use crate::bytecode::ConstValue::{Block, Int, Str};
        let img = BytecodeImage {
            global_count: 2,
            code: vec![0],
            prims: vec![],
            consts: vec![(0, Block { tag: 0, fields: vec![Str(b"x".to_vec()), Int(5), Int(6)] }), (1, Int(7))],
        };
        let at = |n| tamper_nth_int(&img, n).map(|i| i.consts);
        assert_eq!(at(0).unwrap()[0].1, Block { tag: 0, fields: vec![Str(b"x".to_vec()), Int(6), Int(6)] });
        assert_eq!(at(1).unwrap()[0].1, Block { tag: 0, fields: vec![Str(b"x".to_vec()), Int(5), Int(7)] });
        assert_eq!(at(2).unwrap()[1].1, Int(8));
        assert_eq!(at(3), None);
        assert_eq!(tamper_first_int(&img), tamper_nth_int(&img, 0));
    }
}
