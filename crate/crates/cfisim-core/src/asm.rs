//! Assembler for the textual format: one instruction per line, `name:`
//! labels, and the directives `.func NAME [entry]`, `.endfunc`,
//! `.targets CALLSITE_LABEL f1,f2,...`, `.data SIZE`. Comments start with
//! `;` or `#`. Immediates are decimal or `0x` hex; identifiers in operand
//! position become label references resolved at layout time.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::isa::{Format, Function, ImmOperand, Item, Opcode, Program, Reg, DEFAULT_DATA_SIZE};

/// Assembly error with the 1-based source line it was found on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AsmErrorKind {
    Syntax(String),
    UndefinedLabel(String),
    DuplicateFunction(String),
    DuplicateLabel(String),
    NoEntryFunction,
    MultipleEntryFunctions,
    UnknownTargetSite(String),
    TargetSiteNotIndirectCall(String),
    UndefinedTargetFunction(String),
}

impl fmt::Display for AsmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line)?;
        match &self.kind {
            AsmErrorKind::Syntax(msg) => write!(f, "{msg}"),
            AsmErrorKind::UndefinedLabel(l) => write!(f, "undefined label `{l}`"),
            AsmErrorKind::DuplicateFunction(n) => write!(f, "duplicate function `{n}`"),
            AsmErrorKind::DuplicateLabel(l) => write!(f, "duplicate label `{l}`"),
            AsmErrorKind::NoEntryFunction => {
                write!(f, "no entry function (mark one with `.func NAME entry`)")
            }
            AsmErrorKind::MultipleEntryFunctions => write!(f, "more than one entry function"),
            AsmErrorKind::UnknownTargetSite(l) => {
                write!(f, ".targets references unknown call-site label `{l}`")
            }
            AsmErrorKind::TargetSiteNotIndirectCall(l) => {
                write!(f, ".targets label `{l}` does not mark a CALLR instruction")
            }
            AsmErrorKind::UndefinedTargetFunction(n) => {
                write!(f, ".targets member `{n}` is not a defined function")
            }
        }
    }
}

impl core::error::Error for AsmError {}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    err(line, AsmErrorKind::Syntax(msg.into()))
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_reg(tok: &str) -> Option<Reg> {
    let t = tok.to_ascii_lowercase();
    match t.as_str() {
        "sig" => return Some(Reg::SIG),
        "rc" => return Some(Reg::RC),
        "sp" => return Some(Reg::SP),
        _ => {}
    }
    let idx = t.strip_prefix('r')?.parse::<u8>().ok()?;
    Reg::new(idx)
}

fn parse_number(tok: &str) -> Option<u16> {
    if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u16::from_str_radix(hex, 16).ok()
    } else {
        tok.parse::<u16>().ok()
    }
}

/// Assembles source text into a [`Program`].
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut functions: Vec<Function> = Vec::new();
    let mut current: Option<(usize, Function)> = None;
    let mut pending_labels: Vec<(usize, String)> = Vec::new();
    // (line, site label, member list)
    let mut target_decls: Vec<(usize, String, Vec<String>)> = Vec::new();
    let mut data_size: Option<u16> = None;

    for (idx, raw) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw
            .split(|c| c == ';' || c == '#')
            .next()
            .unwrap_or("")
            .trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix('.') {
            let mut words = rest.split_whitespace();
            let directive = words.next().unwrap_or("");
            match directive {
                "func" => {
                    if current.is_some() {
                        return Err(syntax(lineno, "nested .func (missing .endfunc?)"));
                    }
                    let name = words
                        .next()
                        .ok_or_else(|| syntax(lineno, ".func needs a name"))?;
                    if !is_ident(name) {
                        return Err(syntax(lineno, format!("bad function name `{name}`")));
                    }
                    let entry = match words.next() {
                        None => false,
                        Some("entry") => true,
                        Some(other) => {
                            return Err(syntax(lineno, format!("unexpected `{other}` after .func")))
                        }
                    };
                    if functions.iter().any(|f| f.name == name) {
                        return Err(err(lineno, AsmErrorKind::DuplicateFunction(name.to_string())));
                    }
                    current = Some((
                        lineno,
                        Function {
                            name: name.to_string(),
                            entry,
                            items: Vec::new(),
                        },
                    ));
                }
                "endfunc" => {
                    let (start, f) = current
                        .take()
                        .ok_or_else(|| syntax(lineno, ".endfunc outside .func"))?;
                    if let Some((l, label)) = pending_labels.first() {
                        return Err(syntax(*l, format!("label `{label}` at end of function")));
                    }
                    if f.items.is_empty() {
                        return Err(syntax(start, format!("function `{}` has no instructions", f.name)));
                    }
                    functions.push(f);
                }
                "targets" => {
                    let site = words
                        .next()
                        .ok_or_else(|| syntax(lineno, ".targets needs a call-site label"))?;
                    let members: Vec<String> = words
                        .collect::<Vec<_>>()
                        .join(" ")
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                    if members.is_empty() {
                        return Err(syntax(lineno, ".targets needs at least one function"));
                    }
                    target_decls.push((lineno, site.to_string(), members));
                }
                "data" => {
                    let size = words
                        .next()
                        .and_then(parse_number)
                        .ok_or_else(|| syntax(lineno, ".data needs a byte size"))?;
                    if data_size.replace(size).is_some() {
                        return Err(syntax(lineno, "duplicate .data directive"));
                    }
                }
                other => return Err(syntax(lineno, format!("unknown directive `.{other}`"))),
            }
            continue;
        }

        // Peel leading labels, then optionally an instruction.
        let mut rest = line;
        loop {
            let Some(colon) = rest.find(':') else { break };
            let head = rest[..colon].trim();
            if !is_ident(head) {
                break;
            }
            pending_labels.push((lineno, head.to_string()));
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }

        let (_, func) = current
            .as_mut()
            .ok_or_else(|| syntax(lineno, "instruction outside .func"))?;
        let item = parse_instruction(lineno, rest, &mut pending_labels)?;
        func.items.push(item);
    }

    if let Some((start, f)) = current {
        return Err(syntax(start, format!("function `{}` missing .endfunc", f.name)));
    }
    if functions.is_empty() {
        return Err(syntax(1, "no functions defined"));
    }

    // Entry selection: a single unmarked function is implicitly the entry.
    let entries = functions.iter().filter(|f| f.entry).count();
    match entries {
        0 if functions.len() == 1 => functions[0].entry = true,
        0 => return Err(err(1, AsmErrorKind::NoEntryFunction)),
        1 => {}
        _ => return Err(err(1, AsmErrorKind::MultipleEntryFunctions)),
    }

    let mut program = Program {
        functions,
        indirect_targets: BTreeMap::new(),
        data_size: data_size.unwrap_or(DEFAULT_DATA_SIZE),
    };
    resolve_labels(&mut program)?;
    attach_target_sets(&mut program, target_decls)?;
    Ok(program)
}

fn parse_instruction(
    lineno: usize,
    text: &str,
    pending_labels: &mut Vec<(usize, String)>,
) -> Result<Item, AsmError> {
    let (mnemonic, operand_text) = match text.find(char::is_whitespace) {
        Some(pos) => (&text[..pos], text[pos..].trim()),
        None => (text, ""),
    };
    let opcode = Opcode::from_mnemonic(&mnemonic.to_ascii_uppercase())
        .ok_or_else(|| syntax(lineno, format!("unknown mnemonic `{mnemonic}`")))?;
    let operands: Vec<&str> = if operand_text.is_empty() {
        Vec::new()
    } else {
        operand_text.split(',').map(str::trim).collect()
    };

    let want = |n: usize| -> Result<(), AsmError> {
        if operands.len() == n {
            Ok(())
        } else {
            Err(syntax(
                lineno,
                format!(
                    "{} expects {n} operand(s), found {}",
                    opcode.mnemonic(),
                    operands.len()
                ),
            ))
        }
    };
    let reg = |tok: &str| {
        parse_reg(tok).ok_or_else(|| syntax(lineno, format!("bad register `{tok}`")))
    };
    let imm = |tok: &str| -> Result<ImmOperand, AsmError> {
        if let Some(v) = parse_number(tok) {
            Ok(ImmOperand::Value(v))
        } else if is_ident(tok) {
            // Function vs local label is disambiguated in resolve_labels.
            Ok(ImmOperand::LocalRef(tok.to_string()))
        } else {
            Err(syntax(lineno, format!("bad immediate `{tok}`")))
        }
    };

    let labels = core::mem::take(pending_labels)
        .into_iter()
        .map(|(_, l)| l)
        .collect();
    let mut item = Item {
        labels,
        opcode,
        rd: Reg::R0,
        rs: Reg::R0,
        imm: ImmOperand::Value(0),
    };

    match opcode.format() {
        Format::N => want(0)?,
        Format::R => match opcode {
            // Single-register forms; rs stays 0.
            Opcode::Callr | Opcode::Out => {
                want(1)?;
                item.rd = reg(operands[0])?;
            }
            _ => {
                want(2)?;
                item.rd = reg(operands[0])?;
                item.rs = reg(operands[1])?;
            }
        },
        Format::I => {
            want(2)?;
            item.rd = reg(operands[0])?;
            item.imm = imm(operands[1])?;
        }
        Format::J => {
            want(1)?;
            item.imm = imm(operands[0])?;
        }
        Format::Free => unreachable!(),
    }
    Ok(item)
}

/// Classifies identifier immediates as local labels or function references
/// and reports undefined ones. Local labels shadow function names.
fn resolve_labels(program: &mut Program) -> Result<(), AsmError> {
    let func_names: BTreeSet<String> =
        program.functions.iter().map(|f| f.name.clone()).collect();
    for func in &mut program.functions {
        let mut locals: BTreeSet<String> = BTreeSet::new();
        for item in &func.items {
            for l in &item.labels {
                if !locals.insert(l.clone()) {
                    return Err(err(1, AsmErrorKind::DuplicateLabel(l.clone())));
                }
            }
        }
        for item in &mut func.items {
            if let ImmOperand::LocalRef(name) = &item.imm {
                let name = name.clone();
                if item.opcode == Opcode::Call {
                    if func_names.contains(&name) {
                        item.imm = ImmOperand::FuncRef(name);
                    } else {
                        return Err(err(1, AsmErrorKind::UndefinedLabel(name)));
                    }
                } else if locals.contains(&name) {
                    // keep LocalRef
                } else if func_names.contains(&name) {
                    item.imm = ImmOperand::FuncRef(name);
                } else {
                    return Err(err(1, AsmErrorKind::UndefinedLabel(name)));
                }
            }
        }
    }
    Ok(())
}

fn attach_target_sets(
    program: &mut Program,
    decls: Vec<(usize, String, Vec<String>)>,
) -> Result<(), AsmError> {
    let func_names: BTreeSet<String> =
        program.functions.iter().map(|f| f.name.clone()).collect();
    for (line, site, members) in decls {
        let mut found = None;
        for f in &program.functions {
            for item in &f.items {
                if item.labels.iter().any(|l| *l == site) {
                    found = Some(item.opcode);
                }
            }
        }
        match found {
            None => return Err(err(line, AsmErrorKind::UnknownTargetSite(site))),
            Some(Opcode::Callr) => {}
            Some(_) => return Err(err(line, AsmErrorKind::TargetSiteNotIndirectCall(site))),
        }
        let mut set = BTreeSet::new();
        for m in members {
            if !func_names.contains(&m) {
                return Err(err(line, AsmErrorKind::UndefinedTargetFunction(m)));
            }
            set.insert(m);
        }
        program.indirect_targets.insert(site, set);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program_parses() {
        let p = assemble(".func main\nMOVI r1, 42\nOUT r1\nHLT\n.endfunc\n").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].items.len(), 3);
        assert!(p.functions[0].entry);
        assert_eq!(p.data_size, DEFAULT_DATA_SIZE);
    }

    #[test]
    fn undefined_label_is_reported() {
        let r = assemble(".func main\nJMP foo\nHLT\n.endfunc\n");
        assert!(matches!(
            r.unwrap_err().kind,
            AsmErrorKind::UndefinedLabel(l) if l == "foo"
        ));
    }

    #[test]
    fn direct_call_creates_one_edge() {
        let src = "\
.func main entry
CALL helper
HLT
.endfunc
.func helper
MOVI r1, 1
RET
.endfunc
";
        let p = assemble(src).unwrap();
        assert_eq!(
            p.call_graph_edges(),
            alloc::vec![("main".into(), "helper".into())]
        );
    }

    #[test]
    fn duplicate_function_rejected() {
        let src = ".func a entry\nHLT\n.endfunc\n.func a\nHLT\n.endfunc\n";
        assert!(matches!(
            assemble(src).unwrap_err().kind,
            AsmErrorKind::DuplicateFunction(_)
        ));
    }

    #[test]
    fn targets_directive_binds_callr_site() {
        let src = "\
.func main entry
MOVI r1, b
site: CALLR r1
.targets site b, c
HLT
.endfunc
.func b
RET
.endfunc
.func c
RET
.endfunc
";
        let p = assemble(src).unwrap();
        let set = &p.indirect_targets["site"];
        assert_eq!(set.len(), 2);
        assert!(set.contains("b") && set.contains("c"));
    }

    #[test]
    fn targets_on_direct_call_rejected() {
        let src = "\
.func main entry
site: CALL b
.targets site b
HLT
.endfunc
.func b
RET
.endfunc
";
        assert!(matches!(
            assemble(src).unwrap_err().kind,
            AsmErrorKind::TargetSiteNotIndirectCall(_)
        ));
    }

    #[test]
    fn entry_required_with_multiple_functions() {
        let src = ".func a\nHLT\n.endfunc\n.func b\nHLT\n.endfunc\n";
        assert!(matches!(
            assemble(src).unwrap_err().kind,
            AsmErrorKind::NoEntryFunction
        ));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = assemble(".func main\nMOVI r1\nHLT\n.endfunc\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = assemble(".func main\nFROB r1, r2\nHLT\n.endfunc\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn data_directive_and_comments() {
        let src = "\
.data 0x80   ; stack + data
.func main entry
  MOVI r1, 7  # load
  OUT r1
  HLT
.endfunc
";
        let p = assemble(src).unwrap();
        assert_eq!(p.data_size, 0x80);
    }
}
