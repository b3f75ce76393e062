//! Textual LLVM-IR ingestion and canonicalization.
//!
//! [`parse_ir_text`] turns a `.ll` file into an [`IRDocument`]; [`normalize`]
//! erases names, metadata and literal values according to a
//! [`NormalizePolicy`]; [`to_token_stream`] flattens the result into the
//! word stream consumed by the BPE tokenizer.

mod lexer;
mod normalize;
mod parse;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use normalize::{normalize, to_token_stream, NormalizePolicy};
pub use parse::parse_ir_text;

/// Separates instructions inside a function in the token stream.
pub const INSTRUCTION_SENTINEL: &str = "<i>";
/// Separates functions in the token stream.
pub const FUNCTION_SENTINEL: &str = "<f>";

/// Literal class tokens substituted by constant folding.
pub const INT_CLASS: &str = "INT";
pub const FLOAT_CLASS: &str = "FLOAT";
pub const STR_CLASS: &str = "STR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Source,
    Binary,
    Synthetic,
}

impl std::str::FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Origin::Source),
            "binary" => Ok(Origin::Binary),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Origin::Source => "source",
            Origin::Binary => "binary",
            Origin::Synthetic => "synthetic",
        })
    }
}

/// One translation unit of parsed IR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRDocument {
    pub doc_id: String,
    pub origin: Origin,
    pub language_tag: Option<String>,
    pub functions: Vec<IRFunction>,
    /// Comments, module-level metadata, attribute groups, global
    /// declarations and debug intrinsics, verbatim and in source order.
    pub side_channel: Vec<String>,
}

impl IRDocument {
    pub fn with_id(mut self, doc_id: impl Into<String>) -> Self {
        self.doc_id = doc_id.into();
        self
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_language(mut self, tag: Option<String>) -> Self {
        self.language_tag = tag;
        self
    }

    pub fn instructions(&self) -> impl Iterator<Item = &IRInstruction> {
        self.functions.iter().flat_map(|f| f.blocks.iter()).flat_map(|b| b.instructions.iter())
    }

    pub fn instruction_count(&self) -> usize {
        self.instructions().count()
    }

    /// Opcodes outside the LLVM instruction set (and any declared
    /// extensions), e.g. decompiler pseudo-instructions.
    pub fn unknown_opcodes(&self) -> BTreeSet<String> {
        self.instructions().filter(|i| !i.known_opcode).map(|i| i.opcode.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRFunction {
    /// Source name before normalization, `fnN` after.
    pub name: String,
    pub params: Vec<IRParam>,
    pub blocks: Vec<IRBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRParam {
    pub type_tokens: Vec<String>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRBlock {
    /// `None` for an unlabeled entry block.
    pub label: Option<String>,
    pub instructions: Vec<IRInstruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRInstruction {
    pub result: Option<String>,
    pub opcode: String,
    pub type_tokens: Vec<String>,
    pub operand_tokens: Vec<String>,
    pub known_opcode: bool,
}

impl std::fmt::Display for IRInstruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(result) = &self.result {
            write!(f, "{result} = ")?;
        }
        f.write_str(&self.opcode)?;
        for tok in self.type_tokens.iter().chain(&self.operand_tokens) {
            write!(f, " {tok}")?;
        }
        Ok(())
    }
}

pub(crate) const LLVM_OPCODES: &[&str] = &[
    "ret",
    "br",
    "switch",
    "indirectbr",
    "invoke",
    "callbr",
    "resume",
    "catchswitch",
    "catchret",
    "cleanupret",
    "unreachable",
    "fneg",
    "add",
    "fadd",
    "sub",
    "fsub",
    "mul",
    "fmul",
    "udiv",
    "sdiv",
    "fdiv",
    "urem",
    "srem",
    "frem",
    "shl",
    "lshr",
    "ashr",
    "and",
    "or",
    "xor",
    "extractelement",
    "insertelement",
    "shufflevector",
    "extractvalue",
    "insertvalue",
    "alloca",
    "load",
    "store",
    "fence",
    "cmpxchg",
    "atomicrmw",
    "getelementptr",
    "trunc",
    "zext",
    "sext",
    "fptrunc",
    "fpext",
    "fptoui",
    "fptosi",
    "uitofp",
    "sitofp",
    "ptrtoint",
    "inttoptr",
    "bitcast",
    "addrspacecast",
    "icmp",
    "fcmp",
    "phi",
    "select",
    "freeze",
    "call",
    "va_arg",
    "landingpad",
    "catchpad",
    "cleanuppad",
];

pub(crate) fn is_llvm_opcode(word: &str) -> bool {
    LLVM_OPCODES.contains(&word)
}
