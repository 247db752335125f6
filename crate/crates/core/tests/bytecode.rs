mod common;

use common::image;
use mlboot::bytecode::{decode_image, disassemble, encode_image, BytecodeImage, Opcode, HEADER_LEN};
use mlboot::seedc::compile_sources;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_images_round_trip(img in image()) {
        let bytes = encode_image(&img).unwrap();
        let back = decode_image(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_image(&back).unwrap(), bytes);
    }

    #[test]
    fn decoding_garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_image(&bytes);
    }

    #[test]
    fn single_byte_corruption_is_rejected_or_reencodes(img in image(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_image(&img).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        if let Ok(decoded) = decode_image(&bytes) {
            prop_assert_eq!(encode_image(&decoded).unwrap(), bytes);
        }
    }
}

#[test]
fn opcode_table() {
    // Reference numbering, independent of the encoder's macro.
    let expected = [
        "HALT", "ACC", "PUSH", "POP", "ASSIGN", "ENVACC", "OFFSETCLOSURE", "GETGLOBAL", "SETGLOBAL", "CONSTINT",
        "MAKEBLOCK", "GETFIELD", "SETFIELD", "GETTAG", "ISINT", "BRANCH", "BRANCHIF", "BRANCHIFNOT", "SWITCHINT",
        "SWITCHTAG", "CLOSURE", "CLOSUREREC", "APPLY", "APPTERM", "RETURN", "PUSHTRAP", "POPTRAP", "RAISE", "CCALL",
        "ADDINT", "SUBINT", "MULINT", "DIVINT", "MODINT", "NEGINT", "BOOLNOT", "EQ", "NEQ", "LT", "LE", "GT", "GE",
    ];
    assert_eq!(Opcode::ALL.len(), expected.len());
    for (code, name) in expected.iter().enumerate() {
        let op = Opcode::from_word(code as u32).unwrap();
        assert_eq!(op.mnemonic(), *name);
        assert_eq!(op.code(), code as u32);
    }
    assert_eq!(Opcode::from_word(expected.len() as u32), None);
}

#[test]
fn header_layout() {
    let img = BytecodeImage { global_count: 2, code: vec![9, 7, 0], prims: vec!["p".into()], consts: vec![] };
    let bytes = encode_image(&img).unwrap();
    assert_eq!(&bytes[..4], b"MBC1");
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    assert_eq!(word(4), 1);
    assert_eq!(word(8), 2);
    // (id, offset, len) for CODE, PRIM, DATA; sections are contiguous.
    assert_eq!([word(12), word(16), word(20)], [1, HEADER_LEN as u32, 12]);
    assert_eq!([word(24), word(28), word(32)], [2, HEADER_LEN as u32 + 12, 9]);
    assert_eq!([word(36), word(40), word(44)], [3, HEADER_LEN as u32 + 21, 4]);
    assert_eq!(bytes.len(), HEADER_LEN + 25);
}

#[test]
fn golden_disassembly() {
    let src = "let rec loop i = if i = 0 then 0 else loop (i - 1)\nlet () = print_int (loop 3)\n";
    let img = compile_sources(&[("t.mml".into(), src.as_bytes().to_vec())]).unwrap();
    let expected = "\
0: CLOSURE 1 0 L19
4: SETGLOBAL 1
6: CONSTINT 3
8: PUSH
9: GETGLOBAL 1
11: APPLY 1
13: CCALL 0<print_int> 1
16: CONSTINT 0
18: HALT
19: CONSTINT 0
21: PUSH
22: ACC 1
24: EQ
25: BRANCHIFNOT L31
27: CONSTINT 0
29: RETURN 1
31: CONSTINT 1
33: PUSH
34: ACC 1
36: SUBINT
37: PUSH
38: GETGLOBAL 1
40: APPTERM 1 2
; code=43 words, prims=1, globals=2, consts=1
; prim 0 print_int
; global 0 = [0: \"Match_failure\", \"Sys_error\"]
";
    assert_eq!(disassemble(&img).unwrap(), expected);
}
