use super::lexer::{lex, Kind, Token};
use super::{is_llvm_opcode, IRBlock, IRDocument, IRFunction, IRInstruction, IRParam, Origin};
use crate::error::{Error, Result};

const CALL_PREFIXES: &[&str] = &["tail", "musttail", "notail"];

/// Parses textual LLVM-IR into an [`IRDocument`].
///
/// Everything outside `define` bodies, every comment and every debug
/// intrinsic (`llvm.dbg.*` calls and `#dbg_*` records) goes to
/// [`IRDocument::side_channel`]. The returned document has an empty
/// `doc_id` and `Origin::Source`; callers set both.
pub fn parse_ir_text(text: &str) -> Result<IRDocument> {
    let tokens = lex(text)?;
    let mut side_channel = Vec::new();
    let mut functions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        match tok.kind {
            Kind::Newline => i += 1,
            Kind::Comment => {
                side_channel.push(tok.text.clone());
                i += 1;
            }
            Kind::Word if tok.text == "define" => {
                functions.push(parse_function(text, &tokens, &mut i, &mut side_channel)?);
            }
            _ => {
                let start = i;
                let mut depth = 0i32;
                while i < tokens.len() {
                    let t = &tokens[i];
                    if t.kind == Kind::Newline && depth <= 0 {
                        break;
                    }
                    depth += bracket_delta(t);
                    i += 1;
                }
                let span = &text[tokens[start].start..tokens[i - 1].end];
                side_channel.push(span.trim().to_string());
            }
        }
    }
    if functions.is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(IRDocument { doc_id: String::new(), origin: Origin::Source, language_tag: None, functions, side_channel })
}

fn bracket_delta(t: &Token) -> i32 {
    if t.kind != Kind::Punct {
        return 0;
    }
    match t.text.as_str() {
        "(" | "[" | "{" | "<" => 1,
        ")" | "]" | "}" | ">" => -1,
        _ => 0,
    }
}

fn error_at(tok: &Token, message: impl Into<String>) -> Error {
    Error::Parse { line: tok.line, column: tok.column, message: message.into() }
}

fn parse_function(text: &str, tokens: &[Token], i: &mut usize, side_channel: &mut Vec<String>) -> Result<IRFunction> {
    let define = &tokens[*i];
    let mut j = *i + 1;
    // header: linkage, attributes and return type up to the function name
    let name = loop {
        match tokens.get(j) {
            Some(t) if t.kind == Kind::Global => break t.text[1..].trim_matches('"').to_string(),
            Some(t) if t.is_punct("{") || t.is_punct("(") => {
                return Err(error_at(t, "expected function name before parameter list"))
            }
            Some(_) => j += 1,
            None => return Err(error_at(define, "unterminated function header")),
        }
    };
    j += 1;
    match tokens.get(j) {
        Some(t) if t.is_punct("(") => {}
        Some(t) => return Err(error_at(t, format!("expected `(`, found `{}`", t.text))),
        None => return Err(error_at(define, "unterminated function header")),
    }
    let params_start = j + 1;
    let mut depth = 0i32;
    loop {
        let Some(t) = tokens.get(j) else {
            return Err(error_at(define, "unterminated parameter list"));
        };
        depth += bracket_delta(t);
        if depth == 0 {
            break;
        }
        j += 1;
    }
    let params = parse_params(&tokens[params_start..j]);
    // trailing attributes up to the body
    loop {
        j += 1;
        match tokens.get(j) {
            Some(t) if t.is_punct("{") => break,
            Some(_) => {}
            None => return Err(error_at(define, "function has no body")),
        }
    }
    let body_start = j + 1;
    let mut braces = 0i32;
    loop {
        let Some(t) = tokens.get(j) else {
            return Err(error_at(define, "unterminated function body"));
        };
        if t.is_punct("{") {
            braces += 1;
        } else if t.is_punct("}") {
            braces -= 1;
            if braces == 0 {
                break;
            }
        }
        j += 1;
    }
    let blocks = parse_body(text, &tokens[body_start..j], side_channel)?;
    *i = j + 1;
    Ok(IRFunction { name, params, blocks })
}

fn parse_params(tokens: &[Token]) -> Vec<IRParam> {
    let mut params = Vec::new();
    let mut chunk: Vec<&Token> = Vec::new();
    let mut depth = 0i32;
    let mut flush = |chunk: &mut Vec<&Token>| {
        if chunk.is_empty() {
            return;
        }
        let name =
            chunk.iter().rev().find(|t| t.kind == Kind::Local && !is_named_type(&t.text)).map(|t| t.text.clone());
        let owned: Vec<Token> = chunk.iter().map(|t| (*t).clone()).collect();
        let (type_tokens, _) = classify(&owned);
        params.push(IRParam { type_tokens, name });
        chunk.clear();
    };
    for t in tokens {
        match t.kind {
            Kind::Newline | Kind::Comment => continue,
            _ => {}
        }
        if depth == 0 && t.is_punct(",") {
            flush(&mut chunk);
            continue;
        }
        depth += bracket_delta(t);
        chunk.push(t);
    }
    flush(&mut chunk);
    params
}

fn starts_instruction(tokens: &[Token], k: usize) -> bool {
    let t = &tokens[k];
    match t.kind {
        Kind::Local => next_significant(tokens, k).is_some_and(|n| n.is_punct("=")),
        Kind::Word => is_llvm_opcode(&t.text) || CALL_PREFIXES.contains(&t.text.as_str()),
        Kind::Hash => t.text.starts_with("#dbg_"),
        _ => false,
    }
}

fn next_significant(tokens: &[Token], k: usize) -> Option<&Token> {
    tokens[k + 1..].iter().find(|t| !matches!(t.kind, Kind::Newline | Kind::Comment))
}

/// Continuation lines of multi-line instructions (`invoke ... \n to label`).
fn continues_instruction(t: &Token) -> bool {
    t.is_word("to") || t.is_word("unwind") || t.is_punct("[") || t.is_punct(",")
}

fn parse_body(text: &str, tokens: &[Token], side_channel: &mut Vec<String>) -> Result<Vec<IRBlock>> {
    let mut blocks: Vec<IRBlock> = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut depth = 0i32;
    let mut pending_newline = false;

    for (k, t) in tokens.iter().enumerate() {
        match t.kind {
            Kind::Comment => {
                side_channel.push(t.text.clone());
                continue;
            }
            Kind::Newline => {
                if depth == 0 {
                    pending_newline = true;
                }
                continue;
            }
            Kind::LabelDef if depth == 0 => {
                flush(text, &mut current, &mut blocks, side_channel)?;
                let label = t.text[..t.text.len() - 1].trim_matches('"').to_string();
                blocks.push(IRBlock { label: Some(label), instructions: Vec::new() });
                pending_newline = false;
                continue;
            }
            _ => {}
        }
        if depth == 0 && !current.is_empty() {
            let boundary = if pending_newline {
                !continues_instruction(t)
            } else {
                has_opcode(&current) && starts_instruction(tokens, k) && !is_atomicrmw_operation(&current)
            };
            if boundary {
                flush(text, &mut current, &mut blocks, side_channel)?;
            }
        }
        pending_newline = false;
        depth += bracket_delta(t);
        if depth < 0 {
            return Err(error_at(t, format!("unbalanced `{}`", t.text)));
        }
        current.push(t.clone());
    }
    if depth != 0 {
        let opener = current.iter().find(|t| bracket_delta(t) > 0).unwrap_or(&current[0]);
        return Err(error_at(opener, "unclosed bracket in instruction"));
    }
    flush(text, &mut current, &mut blocks, side_channel)?;
    Ok(blocks)
}

fn flush(
    text: &str,
    current: &mut Vec<Token>,
    blocks: &mut Vec<IRBlock>,
    side_channel: &mut Vec<String>,
) -> Result<()> {
    if current.is_empty() {
        return Ok(());
    }
    let toks = std::mem::take(current);
    if let Some(inst) = build_instruction(&toks)? {
        if blocks.is_empty() {
            blocks.push(IRBlock { label: None, instructions: Vec::new() });
        }
        blocks.last_mut().unwrap().instructions.push(inst);
    } else {
        let span = &text[toks[0].start..toks[toks.len() - 1].end];
        side_channel.push(span.trim().to_string());
    }
    Ok(())
}

/// Whether the buffered tokens already hold an opcode (past `%x =` and
/// call prefixes).
fn has_opcode(current: &[Token]) -> bool {
    let mut idx = match current.first() {
        None => return false,
        Some(t) if t.kind == Kind::Local => 2,
        Some(_) => 0,
    };
    while current.get(idx).is_some_and(|t| CALL_PREFIXES.iter().any(|p| t.is_word(p))) {
        idx += 1;
    }
    current.len() > idx
}

/// `atomicrmw [volatile] <operation>`: the operation word is an opcode name.
fn is_atomicrmw_operation(current: &[Token]) -> bool {
    match current.last() {
        Some(last) if last.is_word("atomicrmw") => true,
        Some(last) if last.is_word("volatile") => current.iter().rev().nth(1).is_some_and(|t| t.is_word("atomicrmw")),
        _ => false,
    }
}

/// `None` marks a debug intrinsic destined for the side channel.
fn build_instruction(toks: &[Token]) -> Result<Option<IRInstruction>> {
    let first = &toks[0];
    if first.kind == Kind::Hash && first.text.starts_with("#dbg_") {
        return Ok(None);
    }
    let mut idx = 0;
    let mut result = None;
    if first.kind == Kind::Local {
        match toks.get(1) {
            Some(t) if t.is_punct("=") => {
                result = Some(first.text.clone());
                idx = 2;
            }
            _ => return Err(error_at(first, "expected `=` after result name")),
        }
    }
    while toks.get(idx).is_some_and(|t| CALL_PREFIXES.iter().any(|p| t.is_word(p))) {
        idx += 1;
    }
    let Some(op) = toks.get(idx) else {
        let last = &toks[toks.len() - 1];
        return Err(error_at(last, "missing opcode"));
    };
    if op.kind != Kind::Word {
        return Err(error_at(op, format!("expected opcode, found `{}`", op.text)));
    }
    let rest = &toks[idx + 1..];
    if rest.iter().any(|t| t.kind == Kind::Global && t.text.starts_with("@llvm.dbg.")) {
        return Ok(None);
    }
    let (type_tokens, operand_tokens) = classify(rest);
    Ok(Some(IRInstruction {
        result,
        opcode: op.text.clone(),
        type_tokens,
        operand_tokens,
        known_opcode: is_llvm_opcode(&op.text),
    }))
}

pub(crate) fn is_type_word(word: &str) -> bool {
    if let Some(bits) = word.strip_prefix('i') {
        return !bits.is_empty() && bits.bytes().all(|b| b.is_ascii_digit());
    }
    matches!(
        word,
        "half"
            | "bfloat"
            | "float"
            | "double"
            | "fp128"
            | "x86_fp80"
            | "ppc_fp128"
            | "x86_mmx"
            | "x86_amx"
            | "ptr"
            | "void"
            | "label"
            | "metadata"
            | "token"
            | "opaque"
            | "..."
    )
}

fn is_named_type(local: &str) -> bool {
    ["%struct.", "%class.", "%union."].iter().any(|p| local.starts_with(p))
}

/// Index one past the bracket matching the opener at `start`.
fn group_end(toks: &[Token], start: usize) -> usize {
    let mut depth = 0;
    for (k, t) in toks.iter().enumerate().skip(start) {
        depth += bracket_delta(t);
        if depth == 0 {
            return k + 1;
        }
    }
    toks.len()
}

fn join_group(toks: &[Token]) -> String {
    toks.iter().filter(|t| !matches!(t.kind, Kind::Newline | Kind::Comment)).map(|t| t.text.as_str()).collect()
}

/// Splits instruction tokens into type tokens and operand tokens, dropping
/// punctuation. Aggregate types collapse into one token (`[4xi8]`).
fn classify(toks: &[Token]) -> (Vec<String>, Vec<String>) {
    let mut types = Vec::new();
    let mut operands = Vec::new();
    let mut last_was_type = false;
    let mut j = 0;
    while j < toks.len() {
        let t = &toks[j];
        let aggregate = |open: &str| {
            t.is_punct(open)
                && toks.get(j + 1).is_some_and(|n| n.kind == Kind::Int)
                && toks.get(j + 2).is_some_and(|n| n.is_word("x"))
        };
        match t.kind {
            Kind::Punct if aggregate("[") || aggregate("<") || t.is_punct("{") => {
                let end = group_end(toks, j);
                types.push(join_group(&toks[j..end]));
                last_was_type = true;
                j = end;
                continue;
            }
            Kind::Punct if t.is_punct("<") && toks.get(j + 1).is_some_and(|n| n.is_punct("{")) => {
                let end = group_end(toks, j);
                types.push(join_group(&toks[j..end]));
                last_was_type = true;
                j = end;
                continue;
            }
            Kind::Punct if t.is_punct("*") && last_was_type => {
                if let Some(ty) = types.last_mut() {
                    ty.push('*');
                }
            }
            Kind::Punct | Kind::Newline | Kind::Comment => {}
            Kind::Metadata if t.text == "!" => {
                // `!{...}` or `!"..."`
                let end = match toks.get(j + 1) {
                    Some(n) if n.is_punct("{") => group_end(toks, j + 1),
                    Some(n) if n.kind == Kind::Str => j + 2,
                    _ => j + 1,
                };
                operands.push(join_group(&toks[j..end]));
                last_was_type = false;
                j = end;
                continue;
            }
            Kind::Word if is_type_word(&t.text) => {
                types.push(t.text.clone());
                last_was_type = true;
                j += 1;
                continue;
            }
            Kind::Local if is_named_type(&t.text) => {
                types.push(t.text.clone());
                last_was_type = true;
                j += 1;
                continue;
            }
            _ => {
                operands.push(t.text.clone());
            }
        }
        last_was_type = false;
        j += 1;
    }
    (types, operands)
}
