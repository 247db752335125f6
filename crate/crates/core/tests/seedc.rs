use mlboot::bytecode::{disassemble, encode_image, verify_image, BytecodeImage, Opcode};
use mlboot::corpus::{run_captured, Corpus, RunOutcome};
use mlboot::seedc::{compile_sources, CompileFailure};

fn compile(src: &str) -> Result<BytecodeImage, CompileFailure> {
    let corpus = Corpus::locate();
    let mut sources = corpus.sources(&corpus.stdlib_files().unwrap()).unwrap();
    sources.push(("t.mml".into(), src.as_bytes().to_vec()));
    compile_sources(&sources)
}

fn run(src: &str) -> RunOutcome {
    run_captured(&compile(src).unwrap(), vec![], None)
}

fn stdout(src: &str) -> String {
    let out = run(src);
    assert_eq!(out.status, 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn bare(src: &str) -> BytecodeImage {
    compile_sources(&[("t.mml".into(), src.as_bytes().to_vec())]).unwrap()
}

fn opcodes(image: &BytecodeImage) -> Vec<Opcode> {
    image.instructions().unwrap().into_iter().map(|i| i.opcode).collect()
}

#[test]
fn hello() {
    assert_eq!(stdout("let () = print_string \"hello\\n\""), "hello\n");
}

#[test]
fn if_emits_branchifnot_then_branch() {
    let img = bare("let f x = if x then 1 else 2\nlet () = print_int (f true)");
    let ops = opcodes(&img);
    let at = ops.iter().position(|o| *o == Opcode::BRANCHIFNOT).expect("no BRANCHIFNOT");
    assert!(ops[at..].contains(&Opcode::RETURN));
    assert!(verify_image(&img).is_empty());
}

#[test]
fn tail_call_uses_appterm() {
    let img = bare("let rec loop i = if i = 0 then 0 else loop (i - 1)\nlet () = print_int (loop 3)");
    let text = disassemble(&img).unwrap();
    assert!(text.contains("APPTERM 1 2"), "{text}");
    // The top-level call is not in tail position.
    assert!(text.contains("APPLY 1"), "{text}");
}

#[test]
fn short_circuit_and_or() {
    let src = "let say s b = print_string s; b\n\
               let () = ignore (say \"a\" false && say \"b\" true)\n\
               let () = ignore (say \"c\" true || say \"d\" true)\n\
               let () = ignore (say \"e\" true && say \"f\" false)";
    assert_eq!(stdout(src), "acef");
}

#[test]
fn arguments_evaluate_right_to_left() {
    let src = "let say s = print_string s; 0\n\
               let f a b c = a + b + c\n\
               let () = ignore (f (say \"1\") (say \"2\") (say \"3\"))\n\
               let () = ignore (say \"x\", say \"y\")";
    assert_eq!(stdout(src), "321yx");
}

// A switch whose block arms are all covered by a wildcard once faulted.
#[test]
fn list_match_with_constant_arm_only() {
    let src = "let f l = match l with [] -> 0 | _ -> 1\n\
               let () = print_int (f []); print_int (f (1 :: []))";
    assert_eq!(stdout(src), "01");
}

#[test]
fn variant_switch_both_tables() {
    let src = "type t = A | B of int | C | D of int * int\n\
               let f v = match v with A -> 1 | B n -> n | C -> 3 | D (a, b) -> a * b\n\
               let () = print_int (f A + f (B 10) + f C + f (D (4, 5)))";
    assert_eq!(stdout(src), "34");
}

#[test]
fn exceptions_and_exit_status() {
    let src = "exception E of int\n\
               let () = print_int (try raise (E 4) with E n -> n + 1)\n\
               let () = raise (E 7)";
    let out = run(src);
    assert_eq!(out.stdout, b"5");
    assert_eq!(out.status, 2);
    assert_eq!(String::from_utf8(out.stderr).unwrap(), "Fatal error: exception E(7)\n");
}

#[test]
fn output_is_deterministic() {
    let corpus = Corpus::locate();
    let sources = corpus.sources(&corpus.interp_files().unwrap()).unwrap();
    let a = encode_image(&compile_sources(&sources).unwrap()).unwrap();
    let b = encode_image(&compile_sources(&sources).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unbound_variable_is_located() {
    let err = compile("let () = print_int foo").unwrap_err();
    assert_eq!(err.diagnostics.len(), 1);
    assert!(err.diagnostics[0].starts_with("t.mml:"), "{err}");
    assert!(err.diagnostics[0].ends_with("unbound variable foo"), "{err}");
}

#[test]
fn nested_patterns_are_rejected() {
    let err = compile("let f l = match l with (x :: y :: _) -> x | _ -> 0").unwrap_err();
    assert!(err.to_string().contains("not MiniML"), "{err}");
}

#[test]
fn ctor_arity_is_checked() {
    let err = compile("type t = K of int * int\nlet v = K 1").unwrap_err();
    assert!(err.to_string().contains("constructor K expects 2"), "{err}");
}
