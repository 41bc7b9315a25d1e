//! The fetch-decrypt-decode-execute machine.
//!
//! Every instruction fetch translates through the active view, decrypts the
//! containing cipher block with the key the translation produced, and only
//! then decodes. Code fetched under the wrong key decodes garbage and traps,
//! which is the detection mechanism everything else measures. There is no
//! plaintext code cache; data accesses go through the same engine under the
//! pages' default key.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::config::Mode;
use crate::crypto::{CryptoEngine, KeyId, BLOCK_SIZE};
use crate::isa::{decode, DecodeFault, Instruction, Opcode, Reg};
use crate::memview::{Access, MemCounters, MemView, TranslateError};

/// Host memory: ciphertext at rest, plus the key id each block was last
/// written with (the integrity-engine model consults it on fetch).
#[derive(Clone, Debug)]
pub struct HostMemory {
    bytes: Vec<u8>,
    written_kid: Vec<u16>,
}

impl HostMemory {
    pub fn new(size: usize) -> Self {
        Self {
            bytes: alloc::vec![0; size],
            written_kid: alloc::vec![0; size.div_ceil(BLOCK_SIZE)],
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn block(&self, block_index: usize) -> [u8; BLOCK_SIZE] {
        let start = block_index * BLOCK_SIZE;
        self.bytes[start..start + BLOCK_SIZE].try_into().unwrap()
    }

    pub fn set_block(&mut self, block_index: usize, data: [u8; BLOCK_SIZE], kid: KeyId) {
        let start = block_index * BLOCK_SIZE;
        self.bytes[start..start + BLOCK_SIZE].copy_from_slice(&data);
        self.written_kid[block_index] = kid.0;
    }

    pub fn written_kid(&self, block_index: usize) -> KeyId {
        KeyId(self.written_kid[block_index])
    }

    /// Flips one bit of raw ciphertext. Future decryptions of the block
    /// garble regardless of key.
    pub fn flip_bit(&mut self, hpa: u32, bit: u8) {
        let i = hpa as usize;
        if i < self.bytes.len() {
            self.bytes[i] ^= 1 << (bit & 7);
        }
    }
}

/// Why a run stopped before halting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trap {
    /// Fetched bytes did not decode (or the fetch address was misaligned).
    Decode { gla: u16, reason: String },
    /// Address translation failed.
    Translation { gla: u16 },
    /// Key switch to an unprovisioned view index or key id.
    ViewIndex { requested: u16, limit: u16 },
    /// Integrity-checking engine refused a wrong-key fetch.
    Integrity { gla: u16, active: KeyId, written: KeyId },
    /// Call stack left the data region.
    Stack { sp: u16 },
}

impl Trap {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Trap::Decode { .. } => "decode",
            Trap::Translation { .. } => "translation",
            Trap::ViewIndex { .. } => "view-index",
            Trap::Integrity { .. } => "integrity",
            Trap::Stack { .. } => "stack",
        }
    }
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trap::Decode { gla, reason } => write!(f, "decode fault at {gla:#06x}: {reason}"),
            Trap::Translation { gla } => write!(f, "translation fault at {gla:#06x}"),
            Trap::ViewIndex { requested, limit } => {
                write!(f, "view index {requested} outside {limit} provisioned slots")
            }
            Trap::Integrity { gla, active, written } => write!(
                f,
                "integrity fault at {gla:#06x}: fetched with {active}, written with {written}"
            ),
            Trap::Stack { sp } => write!(f, "stack fault at sp={sp:#06x}"),
        }
    }
}

/// A trap plus where and when it happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrapInfo {
    pub trap: Trap,
    pub pc: u16,
    /// Instructions committed before the trap.
    pub committed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub instructions: u64,
    pub ksw_executed: u64,
    pub calls: u64,
    pub returns: u64,
    pub mem: MemCounters,
}

/// One executed step: the instruction and where it was fetched from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepEvent {
    pub pc: u16,
    pub instr: Instruction,
    pub halted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Halted,
    Trapped(TrapInfo),
    Timeout,
}

impl RunStatus {
    pub fn trap(&self) -> Option<&TrapInfo> {
        match self {
            RunStatus::Trapped(t) => Some(t),
            _ => None,
        }
    }
}

/// Final state of a run: status plus everything reports need.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub status: RunStatus,
    pub output: Vec<u16>,
    pub counters: Counters,
    pub regs: [u16; 16],
}

/// The complete mutable machine.
#[derive(Clone, Debug)]
pub struct MachineState {
    pub regs: [u16; 16],
    pub pc: u16,
    pub mem: HostMemory,
    pub mv: MemView,
    pub engine: CryptoEngine,
    pub integrity: bool,
    pub data_base: u16,
    pub data_end: u16,
    pub counters: Counters,
    pub output: Vec<u16>,
    pub halted: bool,
    /// Armed by the fault layer: XORed into the next call target (address
    /// generation fault model), then cleared.
    pub calltarget_xor: Option<u16>,
    /// Set when an armed call-target fault fires: (intended, taken).
    pub calltarget_effect: Option<(u16, u16)>,
}

impl MachineState {
    pub fn sig(&self) -> u16 {
        self.regs[Reg::SIG.index() as usize]
    }

    fn reg(&self, r: Reg) -> u16 {
        self.regs[r.index() as usize]
    }

    fn set_reg(&mut self, r: Reg, v: u16) {
        self.regs[r.index() as usize] = v;
    }

    fn trap(&self, trap: Trap) -> TrapInfo {
        TrapInfo {
            trap,
            pc: self.pc,
            committed: self.counters.instructions,
        }
    }

    fn translate(&mut self, gla: u16, access: Access) -> Result<(u32, KeyId), TrapInfo> {
        match self.mv.translate(gla, access) {
            Ok(t) if (t.hpa as usize) + 1 <= self.mem.len() => Ok((t.hpa, t.kid)),
            Ok(_) => Err(self.trap(Trap::Translation { gla })),
            Err(TranslateError::UnmappedPage { .. } | TranslateError::UnmappedFrame { .. }) => {
                Err(self.trap(Trap::Translation { gla }))
            }
        }
    }

    fn decrypt_block_at(&mut self, hpa: u32, kid: KeyId) -> [u8; BLOCK_SIZE] {
        let block_index = hpa as usize / BLOCK_SIZE;
        let tweak = block_index as u64;
        self.engine
            .decrypt_block(kid, tweak, self.mem.block(block_index))
    }

    fn encrypt_block_at(&mut self, hpa: u32, kid: KeyId, plain: [u8; BLOCK_SIZE]) {
        let block_index = hpa as usize / BLOCK_SIZE;
        let tweak = block_index as u64;
        let ct = self.engine.encrypt_block(kid, tweak, plain);
        self.mem.set_block(block_index, ct, kid);
    }

    /// Fetches and decodes the slot at `pc` through the full
    /// translate-decrypt-decode path.
    fn fetch(&mut self) -> Result<Instruction, TrapInfo> {
        let pc = self.pc;
        if pc % 4 != 0 {
            return Err(self.trap(Trap::Decode {
                gla: pc,
                reason: "misaligned fetch address".into(),
            }));
        }
        let (hpa, kid) = self.translate(pc, Access::Fetch)?;
        if hpa as usize + 4 > self.mem.len() {
            return Err(self.trap(Trap::Translation { gla: pc }));
        }
        let block_index = hpa as usize / BLOCK_SIZE;
        if self.integrity {
            let written = self.mem.written_kid(block_index);
            if written != kid {
                return Err(self.trap(Trap::Integrity {
                    gla: pc,
                    active: kid,
                    written,
                }));
            }
        }
        let plain = self.decrypt_block_at(hpa, kid);
        let offset = hpa as usize % BLOCK_SIZE;
        let bytes: [u8; 4] = plain[offset..offset + 4].try_into().unwrap();
        decode(bytes).map_err(|e: DecodeFault| {
            self.trap(Trap::Decode {
                gla: pc,
                reason: alloc::format!("{e}"),
            })
        })
    }

    fn read_byte(&mut self, gla: u16) -> Result<u8, TrapInfo> {
        let (hpa, kid) = self.translate(gla, Access::Load)?;
        let plain = self.decrypt_block_at(hpa, kid);
        Ok(plain[hpa as usize % BLOCK_SIZE])
    }

    fn write_byte(&mut self, gla: u16, value: u8) -> Result<(), TrapInfo> {
        let (hpa, kid) = self.translate(gla, Access::Store)?;
        let mut plain = self.decrypt_block_at(hpa, kid);
        plain[hpa as usize % BLOCK_SIZE] = value;
        self.encrypt_block_at(hpa, kid, plain);
        Ok(())
    }

    pub fn read_word(&mut self, gla: u16) -> Result<u16, TrapInfo> {
        let lo = self.read_byte(gla)?;
        let hi = self.read_byte(gla.wrapping_add(1))?;
        Ok(u16::from_le_bytes([lo, hi]))
    }

    pub fn write_word(&mut self, gla: u16, value: u16) -> Result<(), TrapInfo> {
        let [lo, hi] = value.to_le_bytes();
        self.write_byte(gla, lo)?;
        self.write_byte(gla.wrapping_add(1), hi)
    }

    fn push(&mut self, value: u16) -> Result<(), TrapInfo> {
        let sp = self.reg(Reg::SP);
        let new_sp = sp.wrapping_sub(2);
        if new_sp < self.data_base || new_sp.wrapping_add(2) > self.data_end || new_sp > sp {
            return Err(self.trap(Trap::Stack { sp }));
        }
        self.write_word(new_sp, value)?;
        self.set_reg(Reg::SP, new_sp);
        Ok(())
    }

    fn pop(&mut self) -> Result<u16, TrapInfo> {
        let sp = self.reg(Reg::SP);
        if sp < self.data_base || u32::from(sp) + 2 > u32::from(self.data_end) {
            return Err(self.trap(Trap::Stack { sp }));
        }
        let value = self.read_word(sp)?;
        self.set_reg(Reg::SP, sp.wrapping_add(2));
        Ok(value)
    }

    /// Executes one instruction. Successful steps commit; traps do not.
    pub fn step(&mut self) -> Result<StepEvent, TrapInfo> {
        debug_assert!(!self.halted, "stepping a halted machine");
        let pc = self.pc;
        let instr = self.fetch()?;
        let mut next_pc = pc.wrapping_add(4);

        match instr.opcode {
            Opcode::Nop => {}
            Opcode::Movi => self.set_reg(instr.rd, instr.imm),
            Opcode::Mov => self.set_reg(instr.rd, self.reg(instr.rs)),
            Opcode::Add => {
                self.set_reg(instr.rd, self.reg(instr.rd).wrapping_add(self.reg(instr.rs)))
            }
            Opcode::Sub => {
                self.set_reg(instr.rd, self.reg(instr.rd).wrapping_sub(self.reg(instr.rs)))
            }
            Opcode::Xor => self.set_reg(instr.rd, self.reg(instr.rd) ^ self.reg(instr.rs)),
            Opcode::Xori => self.set_reg(instr.rd, self.reg(instr.rd) ^ instr.imm),
            Opcode::Ldr => {
                // Load with post-increment through the base register; the
                // loaded value wins when rd == rs.
                let addr = self.reg(instr.rs);
                self.set_reg(instr.rs, addr.wrapping_add(2));
                let value = self.read_word(addr)?;
                self.set_reg(instr.rd, value);
            }
            Opcode::Str => {
                // Store with pre-decrement through the base register.
                let value = self.reg(instr.rd);
                let addr = self.reg(instr.rs).wrapping_sub(2);
                self.write_word(addr, value)?;
                self.set_reg(instr.rs, addr);
            }
            Opcode::Call | Opcode::Callr => {
                let mut target = match instr.opcode {
                    Opcode::Call => instr.imm,
                    _ => self.reg(instr.rd),
                };
                if let Some(mask) = self.calltarget_xor.take() {
                    self.calltarget_effect = Some((target, target ^ mask));
                    target ^= mask;
                }
                self.push(next_pc)?;
                self.counters.calls += 1;
                next_pc = target;
            }
            Opcode::Ret => {
                next_pc = self.pop()?;
                self.counters.returns += 1;
            }
            Opcode::Jmp => next_pc = instr.imm,
            Opcode::Beqz => {
                if self.reg(instr.rd) == 0 {
                    next_pc = instr.imm;
                }
            }
            Opcode::Ksw => {
                let sig = self.sig();
                let result = match self.mv.mode {
                    Mode::Aliasing => self.mv.switch_view(sig),
                    Mode::KeyReg => self.mv.write_key_register(sig),
                };
                if let Err(e) = result {
                    return Err(self.trap(Trap::ViewIndex {
                        requested: e.requested,
                        limit: e.limit,
                    }));
                }
                self.counters.ksw_executed += 1;
            }
            Opcode::Hlt => self.halted = true,
            Opcode::Out => self.output.push(self.reg(instr.rd)),
        }

        self.pc = next_pc;
        self.counters.instructions += 1;
        self.counters.mem = self.mv.counters();
        Ok(StepEvent {
            pc,
            instr,
            halted: self.halted,
        })
    }

    /// Runs until halt, trap, or `max_steps`.
    pub fn run(&mut self, max_steps: u64) -> RunResult {
        let mut steps = 0;
        let status = loop {
            if self.halted {
                break RunStatus::Halted;
            }
            if steps >= max_steps {
                break RunStatus::Timeout;
            }
            match self.step() {
                Ok(ev) => {
                    steps += 1;
                    if ev.halted {
                        break RunStatus::Halted;
                    }
                }
                Err(trap) => break RunStatus::Trapped(trap),
            }
        };
        self.counters.mem = self.mv.counters();
        RunResult {
            status,
            output: self.output.clone(),
            counters: self.counters,
            regs: self.regs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::config::{BuildConfig, RunConfig};
    use crate::instrument::{instrument, lay_out_baseline};
    use crate::loader::{load, BinaryContainer};

    fn run_source(src: &str, instrumented: bool, run_cfg: &RunConfig) -> RunResult {
        let p = assemble(src).unwrap();
        let bcfg = BuildConfig {
            seed: 11,
            ..BuildConfig::default()
        };
        let bin = if instrumented {
            instrument(&p, &bcfg).unwrap()
        } else {
            lay_out_baseline(&p, &bcfg).unwrap()
        };
        let (mut m, _) = load(&BinaryContainer::from(&bin), run_cfg).unwrap();
        m.run(10_000)
    }

    #[test]
    fn out_and_halt() {
        let r = run_source(
            ".func main\nMOVI r1, 42\nOUT r1\nHLT\n.endfunc\n",
            false,
            &RunConfig::default(),
        );
        assert_eq!(r.status, RunStatus::Halted);
        assert_eq!(r.output, alloc::vec![42]);
    }

    #[test]
    fn timeout_on_infinite_loop() {
        let p = assemble(".func main\nspin: JMP spin\nHLT\n.endfunc\n").unwrap();
        let bin = lay_out_baseline(&p, &BuildConfig::default()).unwrap();
        let (mut m, _) = load(&BinaryContainer::from(&bin), &RunConfig::default()).unwrap();
        let r = m.run(10);
        assert_eq!(r.status, RunStatus::Timeout);
    }

    #[test]
    fn call_pushes_and_ret_pops() {
        let src = "\
.func main entry
MOVI r1, 3
CALL double
OUT r1
HLT
.endfunc
.func double
ADD r1, r1
RET
.endfunc
";
        let r = run_source(src, false, &RunConfig::default());
        assert_eq!(r.status, RunStatus::Halted);
        assert_eq!(r.output, alloc::vec![6]);
    }

    #[test]
    fn instrumented_encrypted_run_is_transparent() {
        let src = "\
.func main entry
MOVI r1, 3
CALL double
CALL double
OUT r1
HLT
.endfunc
.func double
ADD r1, r1
RET
.endfunc
";
        let base = run_source(src, false, &RunConfig::default());
        let inst = run_source(src, true, &RunConfig::default());
        assert_eq!(base.status, RunStatus::Halted);
        assert_eq!(inst.status, RunStatus::Halted, "instrumented run trapped");
        assert_eq!(base.output, inst.output);
        assert_eq!(base.regs[..13], inst.regs[..13]);
        // 2 calls: per call prologue + header + epilogue switches, plus one
        // footer switch per return.
        assert_eq!(inst.counters.ksw_executed, 3 * 2 + 2);
        assert_eq!(inst.counters.calls, 2);
        assert_eq!(inst.counters.returns, 2);
        assert!(inst.counters.mem.view_switches > 0);
    }

    #[test]
    fn keyreg_mode_matches_aliasing_output() {
        let src = "\
.func main entry
MOVI r1, 5
CALL inc
OUT r1
HLT
.endfunc
.func inc
MOVI r2, 1
ADD r1, r2
RET
.endfunc
";
        let aliasing = run_source(src, true, &RunConfig::default());
        let keyreg = run_source(
            src,
            true,
            &RunConfig {
                mode: crate::config::Mode::KeyReg,
                ..RunConfig::default()
            },
        );
        assert_eq!(aliasing.status, RunStatus::Halted);
        assert_eq!(keyreg.status, RunStatus::Halted);
        assert_eq!(aliasing.output, keyreg.output);
        assert_eq!(keyreg.counters.mem.view_switches, 0);
        assert_eq!(keyreg.counters.ksw_executed, aliasing.counters.ksw_executed);
        assert!(
            keyreg.counters.mem.total_tlb_misses() < aliasing.counters.mem.total_tlb_misses()
        );
    }

    #[test]
    fn stack_fault_on_underflow() {
        // RET in the entry with an empty stack.
        let r = run_source(
            ".func main\nRET\n.endfunc\n",
            false,
            &RunConfig::default(),
        );
        match r.status {
            RunStatus::Trapped(t) => assert!(matches!(t.trap, Trap::Stack { .. })),
            other => panic!("expected stack trap, got {other:?}"),
        }
    }

    #[test]
    fn fetch_with_wrong_view_decode_faults() {
        let src = "\
.func main entry
CALL f
HLT
.endfunc
.func f
MOVI r4, 9
RET
.endfunc
";
        let p = assemble(src).unwrap();
        let bin = instrument(
            &p,
            &BuildConfig {
                seed: 2,
                ..BuildConfig::default()
            },
        )
        .unwrap();
        let (mut m, _) = load(&BinaryContainer::from(&bin), &RunConfig::default()).unwrap();
        // Jump straight into f's body without deriving its key.
        m.pc = bin.body_glas["f"];
        let r = m.run(100);
        match r.status {
            RunStatus::Trapped(t) => assert_eq!(t.trap.kind_name(), "decode"),
            other => panic!("expected decode trap, got {other:?}"),
        }
    }

    #[test]
    fn ksw_with_out_of_range_signature_traps() {
        let p = assemble(".func main\nHLT\n.endfunc\n").unwrap();
        let bin = lay_out_baseline(&p, &BuildConfig::default()).unwrap();
        let (mut m, _) = load(&BinaryContainer::from(&bin), &RunConfig::default()).unwrap();
        m.regs[Reg::SIG.index() as usize] = 600;
        // Hand-execute a KSW by injecting it at the current slot is not
        // possible without re-encrypting; drive the view switch directly.
        let err = m.mv.switch_view(600).unwrap_err();
        assert_eq!(err.requested, 600);
    }
}
