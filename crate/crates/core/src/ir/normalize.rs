use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    is_llvm_opcode, IRBlock, IRDocument, IRFunction, IRInstruction, IRParam, FLOAT_CLASS, FUNCTION_SENTINEL,
    INSTRUCTION_SENTINEL, INT_CLASS, STR_CLASS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizePolicy {
    pub rename_registers: bool,
    pub rename_globals: bool,
    pub strip_metadata: bool,
    /// Replace integer, float and string literals by `INT`, `FLOAT`, `STR`.
    pub fold_constants_to_class: bool,
    pub keep_opcode_types: bool,
    /// Functions (by source name, without `@`) dropped before renaming,
    /// e.g. decompiler runtime stubs.
    pub function_denylist: Vec<String>,
    /// Opcodes accepted as known in addition to the LLVM instruction set.
    pub extension_opcodes: Vec<String>,
}

impl Default for NormalizePolicy {
    fn default() -> Self {
        Self {
            rename_registers: true,
            rename_globals: true,
            strip_metadata: true,
            fold_constants_to_class: true,
            keep_opcode_types: true,
            function_denylist: Vec::new(),
            extension_opcodes: Vec::new(),
        }
    }
}

impl NormalizePolicy {
    /// Reads a `key = value` policy file. Missing keys take their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("policy file", e.to_string()))
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }
}

/// Assigns `<prefix>0`, `<prefix>1`, ... in first-seen order.
struct Renamer {
    prefix: &'static str,
    names: HashMap<String, String>,
}

impl Renamer {
    fn new(prefix: &'static str) -> Self {
        Self { prefix, names: HashMap::new() }
    }

    fn rename(&mut self, name: &str) -> String {
        let next = self.names.len();
        self.names.entry(name.to_string()).or_insert_with(|| format!("{}{next}", self.prefix)).clone()
    }
}

#[derive(Debug, PartialEq)]
enum Literal {
    Int,
    Float,
    Str,
}

fn literal_class(tok: &str) -> Option<Literal> {
    if tok.starts_with("c\"") || tok.starts_with('"') {
        return Some(Literal::Str);
    }
    let digits = tok.strip_prefix('-').unwrap_or(tok);
    if !digits.starts_with(|c: char| c.is_ascii_digit()) {
        return None;
    }
    if digits.bytes().all(|b| b.is_ascii_digit()) {
        Some(Literal::Int)
    } else if digits.starts_with("0x") || digits.contains(['.', 'e', 'E']) {
        Some(Literal::Float)
    } else {
        None
    }
}

fn local_name(tok: &str) -> &str {
    tok[1..].trim_matches('"')
}

/// Canonicalizes a parsed document under `policy`.
///
/// Registers become `%v0, %v1, ...` in first-use order per function
/// (parameters first, then each instruction's operands before its result),
/// block labels become `bb0, bb1, ...` in definition order, globals become
/// `@g0, @g1, ...` in first-use order across the document and functions are
/// named `fn0, fn1, ...`. `@llvm.*` intrinsic names are kept.
pub fn normalize(doc: &IRDocument, policy: &NormalizePolicy) -> IRDocument {
    let mut globals = Renamer::new("@g");
    let functions = doc
        .functions
        .iter()
        .filter(|f| !policy.function_denylist.contains(&f.name))
        .enumerate()
        .map(|(idx, f)| normalize_function(f, idx, policy, &mut globals))
        .collect();
    IRDocument {
        doc_id: doc.doc_id.clone(),
        origin: doc.origin,
        language_tag: doc.language_tag.clone(),
        functions,
        side_channel: doc.side_channel.clone(),
    }
}

fn normalize_function(f: &IRFunction, idx: usize, policy: &NormalizePolicy, globals: &mut Renamer) -> IRFunction {
    let labels: HashMap<&str, String> =
        f.blocks.iter().enumerate().filter_map(|(k, b)| b.label.as_deref().map(|l| (l, format!("bb{k}")))).collect();
    let mut regs = Renamer::new("%v");
    let mut rename_local = |tok: &str| -> String {
        if let Some(bb) = labels.get(local_name(tok)) {
            format!("%{bb}")
        } else if policy.rename_registers {
            regs.rename(tok)
        } else {
            tok.to_string()
        }
    };

    let params = f
        .params
        .iter()
        .map(|p| IRParam { type_tokens: p.type_tokens.clone(), name: p.name.as_deref().map(&mut rename_local) })
        .collect();

    let blocks = f
        .blocks
        .iter()
        .enumerate()
        .map(|(k, b)| IRBlock {
            label: Some(format!("bb{k}")),
            instructions: b
                .instructions
                .iter()
                .map(|inst| {
                    let operand_tokens = inst
                        .operand_tokens
                        .iter()
                        .filter(|t| !(policy.strip_metadata && (t.starts_with('!') || t.starts_with('#'))))
                        .map(|t| {
                            if t.starts_with('%') {
                                rename_local(t)
                            } else if t.starts_with('@') {
                                if policy.rename_globals && !t.starts_with("@llvm.") {
                                    globals.rename(t)
                                } else {
                                    t.clone()
                                }
                            } else if policy.fold_constants_to_class {
                                match literal_class(t) {
                                    Some(Literal::Int) => INT_CLASS.to_string(),
                                    Some(Literal::Float) => FLOAT_CLASS.to_string(),
                                    Some(Literal::Str) => STR_CLASS.to_string(),
                                    None => t.clone(),
                                }
                            } else {
                                t.clone()
                            }
                        })
                        .collect();
                    let result = inst.result.as_deref().map(&mut rename_local);
                    IRInstruction {
                        result,
                        opcode: inst.opcode.clone(),
                        type_tokens: if policy.keep_opcode_types { inst.type_tokens.clone() } else { Vec::new() },
                        operand_tokens,
                        known_opcode: is_llvm_opcode(&inst.opcode) || policy.extension_opcodes.contains(&inst.opcode),
                    }
                })
                .collect(),
        })
        .collect();

    IRFunction { name: format!("fn{idx}"), params, blocks }
}

/// Flattens a document into the pre-BPE word stream: per instruction
/// `opcode, types..., operands...`, with `<i>` between instructions of a
/// function and `<f>` between functions.
pub fn to_token_stream(doc: &IRDocument) -> Vec<String> {
    let mut out = Vec::new();
    for (fi, f) in doc.functions.iter().enumerate() {
        if fi > 0 {
            out.push(FUNCTION_SENTINEL.to_string());
        }
        let instructions = f.blocks.iter().flat_map(|b| &b.instructions);
        for (ii, inst) in instructions.enumerate() {
            if ii > 0 {
                out.push(INSTRUCTION_SENTINEL.to_string());
            }
            out.push(inst.opcode.clone());
            out.extend(inst.type_tokens.iter().cloned());
            out.extend(inst.operand_tokens.iter().cloned());
        }
    }
    out
}
