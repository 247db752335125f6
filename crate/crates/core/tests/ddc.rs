use std::path::Path;

use mlboot::corpus::Corpus;
use mlboot::ddc::{
    compare_artifacts, compare_bytes, make_bootstrap_from, sha256_hex, BuildPlan, Comparison, DdcError,
    DdcReport, PlanName, StageKind, Verdict,
};

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}

#[test]
fn plan_shapes() {
    let first = BuildPlan::named(PlanName::First);
    let improved = BuildPlan::named(PlanName::Improved);
    assert_eq!(first.stages.len(), 2);
    assert_eq!(improved.stages.len(), 3);
    assert_eq!(first.output(), "fullc.byte2");
    assert_eq!(improved.output(), "fullc.byte2");
    assert_eq!(first.stages[0], improved.stages[0]);
    assert_eq!(first.stages[0].kind, StageKind::SeedCompile);
    // The improved plan's last stage runs under the fullc-compiled interp.
    assert_eq!(improved.stages[2].inputs[0], improved.stages[1].output);
}

#[test]
fn compare_artifacts_reports_first_difference() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let data: Vec<u8> = (0..100u8).collect();
    std::fs::write(&a, &data).unwrap();
    assert_eq!(compare_artifacts(&a, &a).unwrap(), Comparison::Equal);
    let mut other = data.clone();
    *other.last_mut().unwrap() ^= 0xff;
    std::fs::write(&b, &other).unwrap();
    match compare_artifacts(&a, &b).unwrap() {
        Comparison::DiffAt { offset, .. } => assert_eq!(offset, 99),
        c => panic!("{c:?}"),
    }
    // A strict prefix differs where the shorter one ends.
    match compare_bytes(&data, &data[..40]) {
        Comparison::DiffAt { offset, .. } => assert_eq!(offset, 40),
        c => panic!("{c:?}"),
    }
    assert!(matches!(compare_artifacts(&a, &dir.path().join("none")), Err(DdcError::Io { .. })));
}

#[test]
fn sha256_known_answer() {
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#[test]
fn report_consistency() {
    let d = |c: char| c.to_string().repeat(64);
    let mut r = DdcReport {
        bootstrapped_digest: d('a'),
        self_build_digest: d('a'),
        debootstrapped_digest: d('b'),
        final_digest: d('a'),
        step1_ok: true,
        verdict: Verdict::Pass,
        first_diff_offset: None,
        byte1_vs_byte2: Some(7),
    };
    assert!(r.is_consistent());
    assert!(r.render().ends_with("verdict=PASS\nDDC: PASS\n"));
    r.final_digest = d('c');
    assert!(!r.is_consistent());
    r.verdict = Verdict::Fail;
    assert!(r.is_consistent());
}

// The checked-in seed is a fixpoint: starting from it as byte2 regenerates
// it byte for byte.
#[test]
fn seed_regenerates_identically() {
    let corpus = Corpus::locate();
    let dir = tempfile::tempdir().unwrap();
    let seed = std::fs::read(corpus.seed_path()).unwrap();
    let b = make_bootstrap_from(&corpus.seed_path(), &corpus, dir.path()).unwrap();
    assert_eq!(std::fs::read(&b.image).unwrap(), seed);
    assert_eq!(b.byte3, sha256_hex(&seed));
    let prov = std::fs::read_to_string(&b.provenance).unwrap();
    assert!(prov.contains(&format!("seed={}", b.byte3)));
}

// A fullc that embeds a per-build counter never reaches a fixpoint.
#[test]
fn nondeterministic_fullc_diverges() {
    let real = Corpus::locate();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    copy_dir(&real.root, &root);
    std::fs::write(
        root.join("fullc/stamp.fml"),
        "let build_stamp =\n  \
           let n = (try int_of_string (read_file \"stamp.txt\") with Sys_error _ -> 0) + 1 in\n  \
           write_file \"stamp.txt\" (string_of_int n);\n  \
           n\n\
         let () = extra_items := [ILet (false, [(PVar \"build_stamp\", [], EInt build_stamp)])]\n",
    )
    .unwrap();
    let manifest = std::fs::read_to_string(root.join("fullc.files")).unwrap();
    let manifest = manifest.replace("fullc/main.fml", "fullc/stamp.fml\nfullc/main.fml");
    std::fs::write(root.join("fullc.files"), manifest).unwrap();
    let corpus = Corpus::new(&root);

    // byte2 here is the regular seed compiling the stamped sources.
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    let byte2 = work.join("byte2.in");
    let legs = mlboot::corpus::Legs::new(&corpus).unwrap();
    let out = legs.fullc_compile(&legs.fullc_sources, &byte2);
    assert_eq!(out.status, 0, "{}", String::from_utf8_lossy(&out.stderr));

    match make_bootstrap_from(&byte2, &corpus, &work) {
        Err(DdcError::FixpointDivergence { byte3, byte4 }) => assert_ne!(byte3, byte4),
        other => panic!("expected divergence, got {other:?}"),
    }
}
