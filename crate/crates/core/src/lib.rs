pub mod bytecode;
pub mod frontend;
pub mod vm;
pub mod seedc;
pub mod corpus;
pub mod ddc;
pub mod cli;
