//! Seeded generator of paired source-style and binary-style IR.
//!
//! Each group is a random function skeleton (straight-line code with an
//! optional if/else diamond). Variant 0 renders it the way a front end
//! would, with readable names and debug metadata. Further variants apply
//! decompiler-like rewrites before rendering with machine-style names:
//! dropped `nsw` flags, constants moved into globals, arithmetic widened to
//! `i64`, results spilled through stack slots, and independent neighbours
//! swapped. Each rewrite fires with probability proportional to the
//! strength, so strength 0 only changes names and metadata.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, CorpusRecord};
use crate::encoder::TrainRng;
use crate::error::{Error, Result};
use crate::ir::{normalize, parse_ir_text, NormalizePolicy, Origin};
use crate::triplet::Pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_groups: usize,
    pub variants_per_group: usize,
    pub seed: u64,
    pub transform_strength: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 2 || self.variants_per_group < 2 {
            return Err(Error::InvalidConfig("need at least 2 groups and 2 variants per group".into()));
        }
        if !(0.0..=1.0).contains(&self.transform_strength) {
            return Err(Error::InvalidConfig(format!("transform strength {} outside [0, 1]", self.transform_strength)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDoc {
    pub doc_id: String,
    pub group_id: String,
    pub origin: Origin,
    pub language_tag: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub docs: Vec<SynthDoc>,
    pub pairs: Vec<Pair>,
}

impl SynthCorpus {
    /// Parses and normalizes every document.
    pub fn records(&self, policy: &NormalizePolicy) -> Result<Vec<CorpusRecord>> {
        self.docs
            .iter()
            .map(|d| {
                let doc = parse_ir_text(&d.text)?
                    .with_id(d.doc_id.clone())
                    .with_origin(d.origin)
                    .with_language(d.language_tag.clone());
                Ok(CorpusRecord::from_document(&normalize(&doc, policy)))
            })
            .collect()
    }

    /// Writes `ll/<doc_id>.ll`, `corpus.jsonl` and `pairs.jsonl`.
    pub fn write_to(&self, dir: impl AsRef<Path>, policy: &NormalizePolicy) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("ll"))?;
        for d in &self.docs {
            std::fs::write(dir.join("ll").join(format!("{}.ll", d.doc_id)), &d.text)?;
        }
        write_jsonl(dir.join("corpus.jsonl"), &self.records(policy)?)?;
        write_jsonl(dir.join("pairs.jsonl"), &self.pairs)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    I1,
    I32,
    I64,
    Ptr,
}

impl Ty {
    fn as_str(self) -> &'static str {
        match self {
            Ty::I1 => "i1",
            Ty::I32 => "i32",
            Ty::I64 => "i64",
            Ty::Ptr => "ptr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Val {
    Reg(usize),
    Param(usize),
    Int(i64),
    Global(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Alloca,
    Bin { op: &'static str, nsw: bool, ty: Ty, a: Val, b: Val },
    Icmp { pred: &'static str, a: Val, b: Val },
    Select { c: Val, a: Val, b: Val },
    Load { ty: Ty, ptr: Val },
    Store { ty: Ty, v: Val, ptr: Val },
    Call { callee: Callee, args: Vec<Val> },
    Cast { op: &'static str, from: Ty, to: Ty, a: Val },
    Gep { base: Val, idx: Val },
    Br { cond: Option<Val>, targets: Vec<usize> },
    Phi { incoming: Vec<(Val, usize)> },
    Ret { v: Val },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Callee {
    External(usize),
    Local(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Inst {
    result: Option<usize>,
    body: Body,
}

impl Inst {
    fn uses(&self) -> Vec<Val> {
        match &self.body {
            Body::Alloca => vec![],
            Body::Bin { a, b, .. } | Body::Icmp { a, b, .. } => vec![*a, *b],
            Body::Select { c, a, b } => vec![*c, *a, *b],
            Body::Load { ptr, .. } => vec![*ptr],
            Body::Store { v, ptr, .. } => vec![*v, *ptr],
            Body::Call { args, .. } => args.clone(),
            Body::Cast { a, .. } => vec![*a],
            Body::Gep { base, idx } => vec![*base, *idx],
            Body::Br { cond, .. } => cond.iter().copied().collect(),
            Body::Phi { incoming } => incoming.iter().map(|(v, _)| *v).collect(),
            Body::Ret { v } => vec![*v],
        }
    }

    fn replace_use(&mut self, from: Val, to: Val) {
        let swap = |v: &mut Val| {
            if *v == from {
                *v = to;
            }
        };
        match &mut self.body {
            Body::Alloca => {}
            Body::Bin { a, b, .. } | Body::Icmp { a, b, .. } => {
                swap(a);
                swap(b);
            }
            Body::Select { c, a, b } => {
                swap(c);
                swap(a);
                swap(b);
            }
            Body::Load { ptr, .. } => swap(ptr),
            Body::Store { v, ptr, .. } => {
                swap(v);
                swap(ptr);
            }
            Body::Call { args, .. } => args.iter_mut().for_each(swap),
            Body::Cast { a, .. } => swap(a),
            Body::Gep { base, idx } => {
                swap(base);
                swap(idx);
            }
            Body::Br { cond, .. } => cond.iter_mut().for_each(swap),
            Body::Phi { incoming } => incoming.iter_mut().for_each(|(v, _)| swap(v)),
            Body::Ret { v } => swap(v),
        }
    }

    fn touches_memory(&self) -> bool {
        matches!(self.body, Body::Load { .. } | Body::Store { .. } | Body::Call { .. })
    }

    fn is_movable(&self) -> bool {
        !matches!(self.body, Body::Alloca | Body::Br { .. } | Body::Phi { .. } | Body::Ret { .. })
    }

    fn hint(&self) -> &'static str {
        match &self.body {
            Body::Alloca => "addr",
            Body::Bin { op, .. } => op,
            Body::Icmp { .. } => "cmp",
            Body::Select { .. } => "cond",
            Body::Load { .. } => "tmp",
            Body::Call { .. } => "call",
            Body::Cast { op, .. } => match *op {
                "sext" => "conv",
                _ => "trunc",
            },
            Body::Gep { .. } => "arrayidx",
            Body::Phi { .. } => "merge",
            _ => "t",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    insts: Vec<Inst>,
}

#[derive(Debug, Clone, PartialEq)]
struct Func {
    params: Vec<Ty>,
    blocks: Vec<Block>,
    next_reg: usize,
}

impl Func {
    fn reg(&mut self) -> usize {
        self.next_reg += 1;
        self.next_reg - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Skeleton {
    externals: Vec<usize>,
    /// Helper first (if any), then the main function.
    funcs: Vec<Func>,
    /// Initial values of globals introduced by rewrites.
    globals: Vec<i64>,
}

const BIN_OPS: [&str; 8] = ["add", "sub", "mul", "and", "or", "xor", "shl", "ashr"];
const PREDS: [&str; 5] = ["eq", "ne", "slt", "sgt", "sle"];
const EXTERNALS: [&str; 6] = ["abs", "rand", "putchar", "toupper", "isdigit", "labs32"];

fn has_nsw(op: &str) -> bool {
    matches!(op, "add" | "sub" | "mul" | "shl")
}

struct Builder<'r> {
    rng: &'r mut TrainRng,
    func: Func,
    ints: Vec<Val>,
    ptrs: Vec<Val>,
    slots: Vec<Val>,
    externals: Vec<usize>,
    helper: Option<usize>,
}

impl Builder<'_> {
    fn operand(&mut self) -> Val {
        if self.ints.is_empty() || self.rng.random::<f64>() < 0.25 {
            let v = *[1, 2, 4, 8, 10, 16, 31, 100, 255, -1].choose(self.rng).unwrap();
            Val::Int(v)
        } else {
            // favour recent values
            let n = self.ints.len();
            let back = (self.rng.random::<f64>().powi(2) * n as f64) as usize;
            self.ints[n - 1 - back.min(n - 1)]
        }
    }

    fn push(&mut self, block: usize, body: Body, ty: Option<Ty>) -> Val {
        let result = ty.map(|_| self.func.reg());
        self.func.blocks[block].insts.push(Inst { result, body });
        match (result, ty) {
            (Some(r), Some(Ty::I32)) => {
                self.ints.push(Val::Reg(r));
                Val::Reg(r)
            }
            (Some(r), Some(Ty::Ptr)) => {
                self.ptrs.push(Val::Reg(r));
                Val::Reg(r)
            }
            (Some(r), _) => Val::Reg(r),
            (None, _) => Val::Int(0),
        }
    }

    /// One or two instructions of random kind; returns how many.
    fn random_step(&mut self, block: usize) -> usize {
        let roll = self.rng.random_range(0..12);
        match roll {
            0..=5 => {
                let op = *BIN_OPS.choose(self.rng).unwrap();
                let a = self.operand();
                let mut b = self.operand();
                if matches!((a, b), (Val::Int(_), Val::Int(_))) {
                    b = *self.ints.last().unwrap_or(&Val::Param(0));
                }
                let nsw = has_nsw(op);
                self.push(block, Body::Bin { op, nsw, ty: Ty::I32, a, b }, Some(Ty::I32));
                1
            }
            6 => {
                let pred = *PREDS.choose(self.rng).unwrap();
                let (a, b) = (self.operand(), self.operand());
                let c = self.push(block, Body::Icmp { pred, a, b }, Some(Ty::I1));
                let (x, y) = (self.operand(), self.operand());
                self.push(block, Body::Select { c, a: x, b: y }, Some(Ty::I32));
                2
            }
            7 if !self.slots.is_empty() => {
                let slot = *self.slots.choose(self.rng).unwrap();
                let v = self.operand();
                self.push(block, Body::Store { ty: Ty::I32, v, ptr: slot }, None);
                1
            }
            8 if !self.slots.is_empty() => {
                let slot = *self.slots.choose(self.rng).unwrap();
                self.push(block, Body::Load { ty: Ty::I32, ptr: slot }, Some(Ty::I32));
                1
            }
            9 if !self.externals.is_empty() || self.helper.is_some() => {
                let callee = match (self.helper, self.rng.random::<bool>()) {
                    (Some(h), true) | (Some(h), false) if self.externals.is_empty() => Callee::Local(h),
                    (Some(h), true) => Callee::Local(h),
                    _ => Callee::External(*self.externals.choose(self.rng).unwrap()),
                };
                let args = vec![self.operand()];
                self.push(block, Body::Call { callee, args }, Some(Ty::I32));
                1
            }
            10 if !self.ptrs.is_empty() => {
                let base = *self.ptrs.choose(self.rng).unwrap();
                let idx = Val::Int(self.rng.random_range(0..8));
                let p = self.push(block, Body::Gep { base, idx }, Some(Ty::Ptr));
                self.push(block, Body::Load { ty: Ty::I32, ptr: p }, Some(Ty::I32));
                2
            }
            _ => {
                let a = self.operand();
                let wide = self.push(block, Body::Cast { op: "sext", from: Ty::I32, to: Ty::I64, a }, Some(Ty::I64));
                let b = Val::Int(self.rng.random_range(1..5));
                let w = self.func.reg();
                self.func.blocks[block]
                    .insts
                    .push(Inst { result: Some(w), body: Body::Bin { op: "mul", nsw: true, ty: Ty::I64, a: wide, b } });
                self.push(block, Body::Cast { op: "trunc", from: Ty::I64, to: Ty::I32, a: Val::Reg(w) }, Some(Ty::I32));
                3
            }
        }
    }

    fn straight(&mut self, block: usize, count: usize) {
        let mut emitted = 0;
        while emitted < count {
            emitted += self.random_step(block);
        }
    }
}

fn build_function(
    rng: &mut TrainRng,
    params: Vec<Ty>,
    size: usize,
    branch: bool,
    externals: &[usize],
    helper: Option<usize>,
) -> Func {
    let func = Func { params: params.clone(), blocks: vec![Block { insts: Vec::new() }], next_reg: 0 };
    let mut b = Builder {
        rng,
        func,
        ints: Vec::new(),
        ptrs: Vec::new(),
        slots: Vec::new(),
        externals: externals.to_vec(),
        helper,
    };
    for (i, ty) in params.iter().enumerate() {
        match ty {
            Ty::I32 => b.ints.push(Val::Param(i)),
            Ty::Ptr => b.ptrs.push(Val::Param(i)),
            _ => {}
        }
    }
    // front-end style prologue: spill the first integer parameter
    if let Some(i) = params.iter().position(|&t| t == Ty::I32) {
        let slot = b.push(0, Body::Alloca, Some(Ty::I64));
        b.slots.push(slot);
        b.push(0, Body::Store { ty: Ty::I32, v: Val::Param(i), ptr: slot }, None);
    }
    if branch {
        let head = size / 3;
        b.straight(0, head.max(1));
        let pred = *PREDS.choose(b.rng).unwrap();
        let (x, y) = (b.operand(), b.operand());
        let c = b.push(0, Body::Icmp { pred, a: x, b: y }, Some(Ty::I1));
        b.func.blocks.extend((0..3).map(|_| Block { insts: Vec::new() }));
        b.push(0, Body::Br { cond: Some(c), targets: vec![1, 2] }, None);
        let outer = b.ints.clone();
        let arm = (size / 6).max(1);
        b.straight(1, arm);
        let then_v = *b.ints.last().unwrap();
        b.push(1, Body::Br { cond: None, targets: vec![3] }, None);
        b.ints = outer.clone();
        b.straight(2, arm);
        let else_v = *b.ints.last().unwrap();
        b.push(2, Body::Br { cond: None, targets: vec![3] }, None);
        b.ints = outer;
        b.push(3, Body::Phi { incoming: vec![(then_v, 1), (else_v, 2)] }, Some(Ty::I32));
        let rest = size.saturating_sub(head + 2 * arm + 3);
        b.straight(3, rest.max(1));
    } else {
        b.straight(0, size);
    }
    let last_block = b.func.blocks.len() - 1;
    let v = *b.ints.last().unwrap_or(&Val::Int(0));
    b.push(last_block, Body::Ret { v }, None);
    b.func
}

fn skeleton(rng: &mut TrainRng) -> Skeleton {
    let n_ext = rng.random_range(0..=2);
    let externals: Vec<usize> = rand::seq::index::sample(rng, EXTERNALS.len(), n_ext).into_vec();
    let mut funcs = Vec::new();
    let helper = if rng.random::<f64>() < 0.3 {
        let size = rng.random_range(3..=5);
        funcs.push(build_function(rng, vec![Ty::I32], size, false, &externals, None));
        Some(0)
    } else {
        None
    };
    let n_params = rng.random_range(1..=3);
    let mut params: Vec<Ty> = (0..n_params).map(|_| Ty::I32).collect();
    if rng.random::<f64>() < 0.4 {
        params.push(Ty::Ptr);
    }
    let size = rng.random_range(7..=11);
    let branch = rng.random::<f64>() < 0.5;
    funcs.push(build_function(rng, params, size, branch, &externals, helper));
    Skeleton { externals, funcs, globals: Vec::new() }
}

fn uses_reg(inst: &Inst, r: usize) -> bool {
    inst.uses().contains(&Val::Reg(r))
}

/// Applies the decompiler-like rewrites to `sk` in place.
fn transform(sk: &mut Skeleton, strength: f64, rng: &mut TrainRng) {
    let hit = |p: f64, rng: &mut TrainRng| rng.random::<f64>() < p * strength;
    for f in &mut sk.funcs {
        // dropped wrap flags
        for inst in f.blocks.iter_mut().flat_map(|b| &mut b.insts) {
            if let Body::Bin { nsw, .. } = &mut inst.body {
                if *nsw && hit(0.8, rng) {
                    *nsw = false;
                }
            }
        }
        for bi in 0..f.blocks.len() {
            let mut out = Vec::new();
            let insts = std::mem::take(&mut f.blocks[bi].insts);
            for mut inst in insts {
                // constants materialised from globals
                if let Body::Bin { ty: Ty::I32, a, b, .. } = &mut inst.body {
                    for v in [a, b] {
                        if let Val::Int(c) = *v {
                            if hit(0.4, rng) {
                                let g = sk.globals.len();
                                sk.globals.push(c);
                                let r = f.reg();
                                out.push(Inst {
                                    result: Some(r),
                                    body: Body::Load { ty: Ty::I32, ptr: Val::Global(g) },
                                });
                                *v = Val::Reg(r);
                            }
                        }
                    }
                }
                // arithmetic widened to i64
                if let Body::Bin { op, nsw, ty: Ty::I32, a, b } = inst.body.clone() {
                    if matches!(op, "add" | "sub" | "mul") && hit(0.35, rng) {
                        let widen = |v: Val, out: &mut Vec<Inst>, f: &mut Func| match v {
                            Val::Int(_) => v,
                            _ => {
                                let r = f.reg();
                                out.push(Inst {
                                    result: Some(r),
                                    body: Body::Cast { op: "sext", from: Ty::I32, to: Ty::I64, a: v },
                                });
                                Val::Reg(r)
                            }
                        };
                        let wa = widen(a, &mut out, f);
                        let wb = widen(b, &mut out, f);
                        let w = f.reg();
                        out.push(Inst { result: Some(w), body: Body::Bin { op, nsw, ty: Ty::I64, a: wa, b: wb } });
                        inst.body = Body::Cast { op: "trunc", from: Ty::I64, to: Ty::I32, a: Val::Reg(w) };
                    }
                }
                out.push(inst);
            }
            f.blocks[bi].insts = out;
        }
        // results spilled through fresh stack slots
        let mut spills = Vec::new();
        for (bi, block) in f.blocks.iter().enumerate() {
            for (ii, inst) in block.insts.iter().enumerate() {
                if let (Some(r), Body::Bin { ty: Ty::I32, .. }) = (inst.result, &inst.body) {
                    if hit(0.35, rng) {
                        spills.push((bi, ii, r));
                    }
                }
            }
        }
        for &(bi, ii, r) in spills.iter().rev() {
            let slot = f.reg();
            let reload = f.reg();
            for inst in f.blocks.iter_mut().flat_map(|b| &mut b.insts) {
                inst.replace_use(Val::Reg(r), Val::Reg(reload));
            }
            let block = &mut f.blocks[bi].insts;
            block.insert(ii + 1, Inst { result: Some(reload), body: Body::Load { ty: Ty::I32, ptr: Val::Reg(slot) } });
            block.insert(
                ii + 1,
                Inst { result: None, body: Body::Store { ty: Ty::I32, v: Val::Reg(r), ptr: Val::Reg(slot) } },
            );
            f.blocks[0].insts.insert(0, Inst { result: Some(slot), body: Body::Alloca });
        }
        // independent neighbours swapped
        for block in &mut f.blocks {
            let mut i = 0;
            while i + 1 < block.insts.len() {
                let (x, y) = (&block.insts[i], &block.insts[i + 1]);
                let independent = x.is_movable()
                    && y.is_movable()
                    && !(x.touches_memory() && y.touches_memory())
                    && x.result.is_none_or(|r| !uses_reg(y, r));
                if independent && hit(0.5, rng) {
                    block.insts.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Style {
    Source,
    Binary,
}

const FUNC_WORDS: [&str; 10] = ["compute", "update", "score", "walk", "mix", "reduce", "scan", "step", "check", "fold"];
const PARAM_WORDS: [&str; 6] = ["n", "x", "len", "key", "count", "buf"];

struct Renderer<'a> {
    style: Style,
    group: usize,
    sk: &'a Skeleton,
    out: String,
    dbg: usize,
}

impl Renderer<'_> {
    fn func_name(&self, fi: usize) -> String {
        match self.style {
            Style::Source => format!("{}_{}", FUNC_WORDS[(self.group + fi) % FUNC_WORDS.len()], fi),
            Style::Binary => format!("function_{:x}", 0x401000 + 0x1a0 * fi),
        }
    }

    fn global_name(&self, g: usize) -> String {
        format!("global_var_{:x}", 0x804a020 + 4 * g)
    }

    fn val(&self, f: &Func, v: Val) -> String {
        match v {
            Val::Int(c) => c.to_string(),
            Val::Global(g) => format!("@{}", self.global_name(g)),
            Val::Param(i) => match self.style {
                Style::Source => format!("%{}", PARAM_WORDS[i % PARAM_WORDS.len()]),
                Style::Binary => format!("%arg{}", i + 1),
            },
            Val::Reg(r) => self.reg(f, r),
        }
    }

    fn reg(&self, f: &Func, r: usize) -> String {
        match self.style {
            Style::Source => {
                let hint =
                    f.blocks.iter().flat_map(|b| &b.insts).find(|i| i.result == Some(r)).map(Inst::hint).unwrap_or("t");
                format!("%{hint}{r}")
            }
            Style::Binary => format!("%v{}_{:x}", r % 7, 0x401000 + 3 * r),
        }
    }

    fn label(&self, bi: usize) -> String {
        match self.style {
            Style::Source => ["entry", "if.then", "if.else", "if.end"][bi.min(3)].to_string(),
            Style::Binary => format!("dec_label_pc_{:x}", 0x401000 + 0x40 * bi),
        }
    }

    fn line(&mut self, text: String) {
        self.out.push_str("  ");
        self.out.push_str(&text);
        if self.style == Style::Source {
            self.dbg += 1;
            let _ = write!(self.out, ", !dbg !{}", self.dbg + 10);
        }
        self.out.push('\n');
    }

    fn inst(&mut self, f: &Func, inst: &Inst) {
        let v = |x: Val| self.val(f, x);
        let res = inst.result.map(|r| format!("{} = ", self.reg(f, r))).unwrap_or_default();
        let text = match &inst.body {
            Body::Alloca => format!("{res}alloca i32, align 4"),
            Body::Bin { op, nsw, ty, a, b } => {
                let flag = if *nsw { " nsw" } else { "" };
                format!("{res}{op}{flag} {} {}, {}", ty.as_str(), v(*a), v(*b))
            }
            Body::Icmp { pred, a, b } => format!("{res}icmp {pred} i32 {}, {}", v(*a), v(*b)),
            Body::Select { c, a, b } => format!("{res}select i1 {}, i32 {}, i32 {}", v(*c), v(*a), v(*b)),
            Body::Load { ty, ptr } => format!("{res}load {}, ptr {}, align 4", ty.as_str(), v(*ptr)),
            Body::Store { ty, v: x, ptr } => format!("store {} {}, ptr {}, align 4", ty.as_str(), v(*x), v(*ptr)),
            Body::Call { callee, args } => {
                let name = match callee {
                    Callee::External(e) => EXTERNALS[*e].to_string(),
                    Callee::Local(fi) => self.func_name(*fi),
                };
                let args: Vec<String> = args.iter().map(|a| format!("i32 {}", v(*a))).collect();
                format!("{res}call i32 @{name}({})", args.join(", "))
            }
            Body::Cast { op, from, to, a } => format!("{res}{op} {} {} to {}", from.as_str(), v(*a), to.as_str()),
            Body::Gep { base, idx } => format!("{res}getelementptr inbounds i32, ptr {}, i64 {}", v(*base), v(*idx)),
            Body::Br { cond: None, targets } => format!("br label %{}", self.label(targets[0])),
            Body::Br { cond: Some(c), targets } => {
                format!("br i1 {}, label %{}, label %{}", v(*c), self.label(targets[0]), self.label(targets[1]))
            }
            Body::Phi { incoming } => {
                let arms: Vec<String> =
                    incoming.iter().map(|(x, b)| format!("[ {}, %{} ]", v(*x), self.label(*b))).collect();
                format!("{res}phi i32 {}", arms.join(", "))
            }
            Body::Ret { v: x } => format!("ret i32 {}", v(*x)),
        };
        self.line(text);
        if self.style == Style::Source {
            if let (Some(r), Body::Alloca) = (inst.result, &inst.body) {
                let text = format!(
                    "call void @llvm.dbg.declare(metadata ptr {}, metadata !{}, metadata !DIExpression())",
                    self.reg(f, r),
                    self.dbg + 40
                );
                self.line(text);
            }
        }
    }

    fn render(mut self, doc_id: &str) -> String {
        let sk = self.sk;
        match self.style {
            Style::Source => {
                let _ = writeln!(self.out, "; ModuleID = '{doc_id}.c'");
                let _ = writeln!(self.out, "source_filename = \"{doc_id}.c\"");
                let _ = writeln!(self.out, "target triple = \"x86_64-pc-linux-gnu\"\n");
            }
            Style::Binary => {
                let _ = writeln!(self.out, "source_filename = \"test\"");
                let _ = writeln!(self.out, "target datalayout = \"e-p:32:32:32-f80:32:32\"\n");
                for (g, c) in sk.globals.iter().enumerate() {
                    let _ = writeln!(self.out, "@{} = global i32 {c}", self.global_name(g));
                }
                if !sk.globals.is_empty() {
                    self.out.push('\n');
                }
            }
        }
        for (fi, f) in sk.funcs.iter().enumerate() {
            let params: Vec<String> = f
                .params
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let attr = if self.style == Style::Source { "noundef " } else { "" };
                    format!("{} {attr}{}", t.as_str(), self.val(f, Val::Param(i)))
                })
                .collect();
            let header = match self.style {
                Style::Source => format!(
                    "define dso_local i32 @{}({}) #0 !dbg !{} {{",
                    self.func_name(fi),
                    params.join(", "),
                    fi + 5
                ),
                Style::Binary => {
                    format!("define i32 @{}({}) local_unnamed_addr {{", self.func_name(fi), params.join(", "))
                }
            };
            self.out.push_str(&header);
            self.out.push('\n');
            for (bi, block) in f.blocks.iter().enumerate() {
                let _ = writeln!(self.out, "{}:", self.label(bi));
                for inst in &block.insts {
                    self.inst(f, inst);
                }
            }
            self.out.push_str("}\n\n");
        }
        for &e in &sk.externals {
            let _ = writeln!(self.out, "declare i32 @{}(i32)", EXTERNALS[e]);
        }
        if self.style == Style::Source {
            self.out.push_str("declare void @llvm.dbg.declare(metadata, metadata, metadata)\n\n");
            self.out.push_str("attributes #0 = { noinline nounwind optnone uwtable }\n\n");
            self.out.push_str("!llvm.dbg.cu = !{!0}\n");
            let _ = writeln!(
                self.out,
                "!0 = distinct !DICompileUnit(language: DW_LANG_C11, file: !1, producer: \"clang\")"
            );
            let _ = writeln!(self.out, "!1 = !DIFile(filename: \"{doc_id}.c\", directory: \"/src\")");
        }
        self.out
    }
}

fn group_id(g: usize) -> String {
    format!("g{g:03}")
}

/// Deterministic corpus: `n_groups × variants_per_group` documents and
/// one pair per binary variant, `(g###_bin#, g###_src)`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut master = TrainRng::seed_from_u64(spec.seed);
    let mut docs = Vec::new();
    let mut pairs = Vec::new();
    let mut names: HashMap<usize, String> = HashMap::new();
    for g in 0..spec.n_groups {
        let group_seed: u64 = master.random();
        let mut rng = TrainRng::seed_from_u64(group_seed);
        let sk = skeleton(&mut rng);
        let gid = group_id(g);
        let src_id = format!("{gid}_src");
        let lang = if g % 2 == 0 { "c" } else { "java" };
        let text = Renderer { style: Style::Source, group: g, sk: &sk, out: String::new(), dbg: 0 }.render(&src_id);
        names.insert(g, src_id.clone());
        docs.push(SynthDoc {
            doc_id: src_id.clone(),
            group_id: gid.clone(),
            origin: Origin::Source,
            language_tag: Some(lang.to_string()),
            text,
        });
        for v in 1..spec.variants_per_group {
            let mut variant = sk.clone();
            let mut trng = TrainRng::seed_from_u64(group_seed);
            trng.set_stream(v as u64);
            transform(&mut variant, spec.transform_strength, &mut trng);
            let id = format!("{gid}_bin{v}");
            let text =
                Renderer { style: Style::Binary, group: g, sk: &variant, out: String::new(), dbg: 0 }.render(&id);
            docs.push(SynthDoc {
                doc_id: id.clone(),
                group_id: gid.clone(),
                origin: Origin::Binary,
                language_tag: Some("x86".to_string()),
                text,
            });
            pairs.push(Pair { binary_id: id, source_id: src_id.clone(), group_id: gid.clone() });
        }
    }
    Ok(SynthCorpus { docs, pairs })
}
