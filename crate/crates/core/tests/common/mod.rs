//! Shared test helpers.
#![allow(dead_code)]

use mlboot::bytecode::{BytecodeImage, ConstValue, Opcode};
use proptest::prelude::*;

pub fn const_value() -> impl Strategy<Value = ConstValue> {
    let leaf = prop_oneof![
        any::<i64>().prop_map(ConstValue::Int),
        proptest::collection::vec(any::<u8>(), 0..12).prop_map(ConstValue::Str),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        (any::<u8>(), proptest::collection::vec(inner, 0..4))
            .prop_map(|(tag, fields)| ConstValue::Block { tag, fields })
    })
}

/// One instruction whose operands respect the image's index bounds.
pub fn instruction(prims: u32, globals: u32) -> impl Strategy<Value = Vec<u32>> {
    (0..Opcode::ALL.len(), proptest::collection::vec(0u32..64, 8), 0..prims.max(1), 0..globals.max(1)).prop_map(
        move |(i, free, prim, global)| {
            let op = Opcode::ALL[i];
            let n = op.operand_count(Some(free[0] % 3));
            let mut words = vec![op.code()];
            words.extend((0..n).map(|k| free[k % free.len()]));
            match op {
                Opcode::SWITCHINT | Opcode::SWITCHTAG | Opcode::CLOSUREREC => words[1] = free[0] % 3,
                Opcode::CCALL if prims == 0 => words = vec![Opcode::HALT.code()],
                Opcode::CCALL => words[1] = prim,
                Opcode::GETGLOBAL | Opcode::SETGLOBAL if globals == 0 => words = vec![Opcode::PUSH.code()],
                Opcode::GETGLOBAL | Opcode::SETGLOBAL => words[1] = global,
                _ => {}
            }
            words
        },
    )
}

pub fn image() -> impl Strategy<Value = BytecodeImage> {
    (0u32..6, 0u32..8).prop_flat_map(|(nprims, globals)| {
        (
            proptest::collection::vec(instruction(nprims, globals), 0..40),
            proptest::collection::vec("[a-z_]{1,10}", nprims as usize),
            proptest::collection::vec((0..globals.max(1), const_value()), if globals == 0 { 0..1 } else { 0..5 }),
        )
            .prop_map(move |(code, prims, consts)| BytecodeImage {
                global_count: globals,
                code: code.concat(),
                prims,
                consts: if globals == 0 { vec![] } else { consts },
            })
    })
}
