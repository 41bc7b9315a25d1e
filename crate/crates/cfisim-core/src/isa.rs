//! The toy instruction set: 17 opcodes with a fixed 4-byte encoding.
//!
//! The decoder is deliberately strict. Unused field bytes must be zero so
//! that `encode(decode(b)) == b` holds for every accepted byte string, and
//! every rejected string reports why. Decoding failure on garbled bytes is
//! the detection mechanism the rest of the simulator is built around, and
//! [`OpcodeTable::density`] computes the exact probability that uniformly
//! random bytes slip through.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Register index, always below [`Reg::COUNT`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const COUNT: u8 = 16;
    /// Signature register, reserved by the instrumenter.
    pub const SIG: Reg = Reg(13);
    /// Return-constant register, reserved by the instrumenter.
    pub const RC: Reg = Reg(14);
    /// Stack pointer.
    pub const SP: Reg = Reg(15);

    pub const fn new(index: u8) -> Option<Reg> {
        if index < Self::COUNT {
            Some(Reg(index))
        } else {
            None
        }
    }

    pub const fn index(self) -> u8 {
        self.0
    }

    pub const R0: Reg = Reg(0);
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Operand layout of an instruction word.
///
/// byte0 is always the opcode. `R` uses byte1=rd, byte2=rs; `I` uses
/// byte1=rd, bytes2-3=imm16 (little endian); `J` uses bytes2-3=imm16;
/// `N` has no operands. Bytes not used by the format must be zero.
/// `Free` accepts any operand bytes and exists only for density analysis
/// of hypothetical tables; no real opcode uses it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    N,
    R,
    I,
    J,
    Free,
}

impl Format {
    /// Number of valid operand-byte assignments (out of 2^24) for this format.
    pub const fn valid_operand_count(self) -> u64 {
        match self {
            Format::N => 1,
            Format::R => (Reg::COUNT as u64) * (Reg::COUNT as u64),
            Format::I => (Reg::COUNT as u64) * 65536,
            Format::J => 65536,
            Format::Free => 1 << 24,
        }
    }
}

macro_rules! opcodes {
    ($(($name:ident, $byte:expr, $fmt:ident, $mnemonic:expr)),+ $(,)?) => {
        /// Instruction mnemonics of the default table.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[repr(u8)]
        pub enum Opcode {
            $($name = $byte),+
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name),+];

            pub const fn format(self) -> Format {
                match self {
                    $(Opcode::$name => Format::$fmt),+
                }
            }

            pub const fn byte(self) -> u8 {
                self as u8
            }

            pub fn from_byte(b: u8) -> Option<Opcode> {
                match b {
                    $($byte => Some(Opcode::$name),)+
                    _ => None,
                }
            }

            pub const fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mnemonic),+
                }
            }

            pub fn from_mnemonic(s: &str) -> Option<Opcode> {
                match s {
                    $($mnemonic => Some(Opcode::$name),)+
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    (Nop,   0x00, N, "NOP"),
    (Movi,  0x01, I, "MOVI"),
    (Mov,   0x02, R, "MOV"),
    (Add,   0x03, R, "ADD"),
    (Sub,   0x04, R, "SUB"),
    (Xor,   0x05, R, "XOR"),
    (Xori,  0x06, I, "XORI"),
    (Ldr,   0x07, R, "LDR"),
    (Str,   0x08, R, "STR"),
    (Call,  0x09, J, "CALL"),
    (Callr, 0x0A, R, "CALLR"),
    (Ret,   0x0B, N, "RET"),
    (Jmp,   0x0C, J, "JMP"),
    (Beqz,  0x0D, I, "BEQZ"),
    (Ksw,   0x0E, N, "KSW"),
    (Hlt,   0x0F, N, "HLT"),
    (Out,   0x10, R, "OUT"),
}

/// A decoded instruction. Fields not used by the opcode's format are zero,
/// which keeps `encode` total and the round-trip exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub rd: Reg,
    pub rs: Reg,
    pub imm: u16,
}

impl Instruction {
    pub const SIZE: u16 = 4;

    pub const fn nop() -> Instruction {
        Instruction {
            opcode: Opcode::Nop,
            rd: Reg(0),
            rs: Reg(0),
            imm: 0,
        }
    }

    pub fn n(opcode: Opcode) -> Instruction {
        debug_assert_eq!(opcode.format(), Format::N);
        Instruction {
            opcode,
            ..Instruction::nop()
        }
    }

    pub fn r(opcode: Opcode, rd: Reg, rs: Reg) -> Instruction {
        debug_assert_eq!(opcode.format(), Format::R);
        Instruction {
            opcode,
            rd,
            rs,
            imm: 0,
        }
    }

    pub fn i(opcode: Opcode, rd: Reg, imm: u16) -> Instruction {
        debug_assert_eq!(opcode.format(), Format::I);
        Instruction {
            opcode,
            rd,
            rs: Reg(0),
            imm,
        }
    }

    pub fn j(opcode: Opcode, imm: u16) -> Instruction {
        debug_assert_eq!(opcode.format(), Format::J);
        Instruction {
            opcode,
            rd: Reg(0),
            rs: Reg(0),
            imm,
        }
    }

    /// Packs the instruction into its 4-byte encoding.
    pub fn encode(&self) -> [u8; 4] {
        let imm = self.imm.to_le_bytes();
        match self.opcode.format() {
            Format::N => [self.opcode.byte(), 0, 0, 0],
            Format::R => [self.opcode.byte(), self.rd.0, self.rs.0, 0],
            Format::I => [self.opcode.byte(), self.rd.0, imm[0], imm[1]],
            Format::J => [self.opcode.byte(), 0, imm[0], imm[1]],
            Format::Free => unreachable!("no real opcode is Free-format"),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.opcode.mnemonic();
        match self.opcode.format() {
            Format::N => write!(f, "{m}"),
            Format::R => write!(f, "{m} {}, {}", self.rd, self.rs),
            Format::I => write!(f, "{m} {}, {:#06x}", self.rd, self.imm),
            Format::J => write!(f, "{m} {:#06x}", self.imm),
            Format::Free => unreachable!(),
        }
    }
}

/// Why a 4-byte string failed to decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeFault {
    /// byte0 is not in the opcode table.
    InvalidOpcode { byte: u8 },
    /// An operand byte is out of range for the opcode's format.
    InvalidField {
        opcode: Opcode,
        field: &'static str,
        value: u8,
    },
}

impl fmt::Display for DecodeFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeFault::InvalidOpcode { byte } => write!(f, "invalid opcode byte {byte:#04x}"),
            DecodeFault::InvalidField {
                opcode,
                field,
                value,
            } => write!(
                f,
                "invalid {field} byte {value:#04x} for {}",
                opcode.mnemonic()
            ),
        }
    }
}

impl core::error::Error for DecodeFault {}

/// Decodes 4 bytes against the default opcode table. Total: every input
/// yields either an [`Instruction`] or a [`DecodeFault`].
pub fn decode(bytes: [u8; 4]) -> Result<Instruction, DecodeFault> {
    let opcode = Opcode::from_byte(bytes[0]).ok_or(DecodeFault::InvalidOpcode { byte: bytes[0] })?;
    let field = |name: &'static str, value: u8| DecodeFault::InvalidField {
        opcode,
        field: name,
        value,
    };
    let reg = |name: &'static str, value: u8| Reg::new(value).ok_or(field(name, value));
    let zero = |name: &'static str, value: u8| {
        if value == 0 {
            Ok(())
        } else {
            Err(field(name, value))
        }
    };
    match opcode.format() {
        Format::N => {
            zero("rd", bytes[1])?;
            zero("rs", bytes[2])?;
            zero("imm", bytes[3])?;
            Ok(Instruction::n(opcode))
        }
        Format::R => {
            let rd = reg("rd", bytes[1])?;
            let rs = reg("rs", bytes[2])?;
            zero("imm", bytes[3])?;
            Ok(Instruction::r(opcode, rd, rs))
        }
        Format::I => {
            let rd = reg("rd", bytes[1])?;
            Ok(Instruction::i(
                opcode,
                rd,
                u16::from_le_bytes([bytes[2], bytes[3]]),
            ))
        }
        Format::J => {
            zero("rd", bytes[1])?;
            Ok(Instruction::j(
                opcode,
                u16::from_le_bytes([bytes[2], bytes[3]]),
            ))
        }
        Format::Free => unreachable!(),
    }
}

/// Opcode-byte to format assignment, for density analysis. The default
/// table mirrors [`Opcode`]; variant tables model denser or sparser
/// hypothetical encodings.
#[derive(Clone)]
pub struct OpcodeTable {
    formats: [Option<Format>; 256],
}

impl Default for OpcodeTable {
    fn default() -> Self {
        let mut formats = [None; 256];
        for &op in Opcode::ALL {
            formats[op.byte() as usize] = Some(op.format());
        }
        Self { formats }
    }
}

impl OpcodeTable {
    pub const fn empty() -> Self {
        Self {
            formats: [None; 256],
        }
    }

    pub fn set(&mut self, byte: u8, format: Option<Format>) {
        self.formats[byte as usize] = format;
    }

    /// Whether 4 bytes form a valid instruction under this table.
    pub fn slot_valid(&self, bytes: [u8; 4]) -> bool {
        let Some(format) = self.formats[bytes[0] as usize] else {
            return false;
        };
        let reg_ok = |b: u8| b < Reg::COUNT;
        match format {
            Format::N => bytes[1] == 0 && bytes[2] == 0 && bytes[3] == 0,
            Format::R => reg_ok(bytes[1]) && reg_ok(bytes[2]) && bytes[3] == 0,
            Format::I => reg_ok(bytes[1]),
            Format::J => bytes[1] == 0,
            Format::Free => true,
        }
    }

    /// Exact probability that a uniformly random 4-byte string decodes,
    /// as a rational over 2^32.
    pub fn density(&self) -> Density {
        let valid = self
            .formats
            .iter()
            .flatten()
            .map(|f| f.valid_operand_count())
            .sum();
        Density {
            valid,
            total: 1 << 32,
        }
    }
}

/// Exact rational decode-success probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Density {
    pub valid: u64,
    pub total: u64,
}

impl Density {
    pub fn as_f64(self) -> f64 {
        self.valid as f64 / self.total as f64
    }
}

/// Exact decode-success density of the default 17-opcode table.
pub fn valid_encoding_density() -> Density {
    OpcodeTable::default().density()
}

/// Symbolic immediate operand, kept unresolved until layout assigns final
/// addresses (instrumentation moves code, so label distances shift).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImmOperand {
    Value(u16),
    /// Address of a function; for calls this later resolves to a call
    /// header, for address-taken literals to an indirect-entry point.
    FuncRef(String),
    /// Local label within the same function.
    LocalRef(String),
}

impl ImmOperand {
    pub fn as_value(&self) -> Option<u16> {
        match self {
            ImmOperand::Value(v) => Some(*v),
            _ => None,
        }
    }
}

/// One source-level instruction plus the labels attached to it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub labels: Vec<String>,
    pub opcode: Opcode,
    pub rd: Reg,
    pub rs: Reg,
    pub imm: ImmOperand,
}

impl Item {
    /// Concrete instruction once `imm` has been resolved to `value`.
    pub fn to_instruction(&self, value: u16) -> Instruction {
        Instruction {
            opcode: self.opcode,
            rd: self.rd,
            rs: self.rs,
            imm: value,
        }
    }
}

/// An assembled function body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub entry: bool,
    pub items: Vec<Item>,
}

/// An assembled program: functions plus call-graph annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    /// Indirect call-site label to the set of functions it may reach.
    pub indirect_targets: BTreeMap<String, BTreeSet<String>>,
    /// Size in bytes of the zero-initialized data region (stack included).
    pub data_size: u16,
}

pub const DEFAULT_DATA_SIZE: u16 = 256;

impl Program {
    pub fn entry_function(&self) -> &Function {
        self.functions
            .iter()
            .find(|f| f.entry)
            .expect("assembler guarantees exactly one entry")
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Direct call-graph edges as (caller, callee) pairs, one per call site.
    pub fn call_graph_edges(&self) -> Vec<(String, String)> {
        let mut edges = Vec::new();
        for f in &self.functions {
            for item in &f.items {
                if item.opcode == Opcode::Call {
                    if let ImmOperand::FuncRef(callee) = &item.imm {
                        edges.push((f.name.clone(), callee.clone()));
                    }
                }
            }
        }
        edges
    }

    /// Total code size in bytes under plain sequential layout.
    pub fn baseline_size(&self) -> u16 {
        let n: usize = self.functions.iter().map(|f| f.items.len()).sum();
        (n as u16) * Instruction::SIZE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_matches_table_examples() {
        assert_eq!(Instruction::n(Opcode::Ksw).encode(), [0x0E, 0, 0, 0]);
        assert_eq!(
            Instruction::r(Opcode::Add, Reg::new(1).unwrap(), Reg::new(2).unwrap()).encode(),
            [0x03, 0x01, 0x02, 0x00]
        );
        assert_eq!(
            Instruction::i(Opcode::Xori, Reg::SIG, 0x0025).encode(),
            [0x06, 0x0D, 0x25, 0x00]
        );
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode([0x0E, 0, 0, 0]).unwrap(),
            Instruction::n(Opcode::Ksw)
        );
        assert_eq!(
            decode([0xFF, 0, 0, 0]),
            Err(DecodeFault::InvalidOpcode { byte: 0xFF })
        );
        assert_eq!(
            decode([0x03, 0x11, 0x02, 0x00]),
            Err(DecodeFault::InvalidField {
                opcode: Opcode::Add,
                field: "rd",
                value: 0x11
            })
        );
    }

    #[test]
    fn decode_rejects_nonzero_unused_bytes() {
        // N format requires bytes 1..3 zero, J requires byte1 zero,
        // R requires byte3 zero.
        assert!(decode([0x0B, 1, 0, 0]).is_err());
        assert!(decode([0x0C, 5, 0x10, 0]).is_err());
        assert!(decode([0x03, 1, 2, 9]).is_err());
    }

    #[test]
    fn default_density_exact_value() {
        // 4 N-format opcodes (1 operand assignment each), 8 R (256 each),
        // 3 I (2^20 each), 2 J (2^16 each): 3_278_852 / 2^32.
        let d = valid_encoding_density();
        assert_eq!(d.valid, 3_278_852);
        assert_eq!(d.total, 1 << 32);
    }

    #[test]
    fn density_degenerate_tables() {
        assert_eq!(OpcodeTable::empty().density().valid, 0);
        let mut all = OpcodeTable::empty();
        for b in 0..=255u8 {
            all.set(b, Some(Format::Free));
        }
        let d = all.density();
        assert_eq!(d.valid, d.total);
    }

    #[test]
    fn roundtrip_all_opcodes() {
        for &op in Opcode::ALL {
            let i = match op.format() {
                Format::N => Instruction::n(op),
                Format::R => Instruction::r(op, Reg::new(3).unwrap(), Reg::new(12).unwrap()),
                Format::I => Instruction::i(op, Reg::new(9).unwrap(), 0xBEEF),
                Format::J => Instruction::j(op, 0x1234),
                Format::Free => unreachable!(),
            };
            assert_eq!(decode(i.encode()).unwrap(), i);
        }
    }
}
