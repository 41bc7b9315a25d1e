//! Fault injection and campaign driving.
//!
//! One fault per run: a bit flip in the program counter, code ciphertext, a
//! register, the effective call target, or a view entry, plus an
//! instruction-skip control model. A campaign samples (or exactly
//! enumerates) the fault space against a clean baseline run, classifies
//! every outcome, and aggregates detection statistics with per-trial
//! latency, measured in instructions committed between fault activation and
//! the trap.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::config::{Mode, RunConfig};
use crate::instrument::Signature;
use crate::isa::Reg;
use crate::loader::{load, BinaryContainer, LoadError};
use crate::machine::{MachineState, RunResult, RunStatus, Trap};
use crate::memview::Access;
use crate::rng::DetRng;

/// The injectable fault kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    /// Flip one bit of the program counter before the next fetch.
    PcBitflip { bit: u8 },
    /// Flip one ciphertext bit backing the given code address.
    CodeBitflip { gla: u16, bit: u8 },
    /// Flip one register bit; transient flips revert after one instruction
    /// unless that instruction overwrote the register.
    RegBitflip { reg: Reg, bit: u8, transient: bool },
    /// Flip one bit of the effective target of the next call (address
    /// generation unit model).
    CalltargetBitflip { bit: u8 },
    /// Flip a key-id bit in a view entry; with encrypted entries the whole
    /// entry garbles instead.
    EpteKeyidFlip { view: u16, gpa_frame: u16, bit: u8 },
    /// Skip one instruction (control model for intra-function faults).
    SkipInstr,
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::PcBitflip { .. } => "pc",
            FaultKind::CodeBitflip { .. } => "code",
            FaultKind::RegBitflip { .. } => "reg",
            FaultKind::CalltargetBitflip { .. } => "calltarget",
            FaultKind::EpteKeyidFlip { .. } => "epte",
            FaultKind::SkipInstr => "skip",
        }
    }
}

/// One fault to inject: the kind, the dynamic instruction index it triggers
/// at, and the seed for any randomness the injection itself needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub trigger: u64,
    pub seed: u64,
}

/// Campaign fault models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultModel {
    Pc,
    Code,
    Reg,
    Calltarget,
    Epte,
    Skip,
}

impl FaultModel {
    pub const ALL: &'static [FaultModel] = &[
        FaultModel::Pc,
        FaultModel::Code,
        FaultModel::Reg,
        FaultModel::Calltarget,
        FaultModel::Epte,
        FaultModel::Skip,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FaultModel::Pc => "pc",
            FaultModel::Code => "code",
            FaultModel::Reg => "reg",
            FaultModel::Calltarget => "calltarget",
            FaultModel::Epte => "epte",
            FaultModel::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Option<FaultModel> {
        FaultModel::ALL.iter().copied().find(|m| m.name() == s)
    }
}

impl fmt::Display for FaultModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome classes for one trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Class {
    DetectedDecode,
    DetectedTranslation,
    DetectedViewIndex,
    DetectedIntegrity,
    DetectedStack,
    SilentCorruption,
    Benign,
    Timeout,
}

impl Class {
    pub const ALL: &'static [Class] = &[
        Class::DetectedDecode,
        Class::DetectedTranslation,
        Class::DetectedViewIndex,
        Class::DetectedIntegrity,
        Class::DetectedStack,
        Class::SilentCorruption,
        Class::Benign,
        Class::Timeout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Class::DetectedDecode => "DETECTED_DECODE",
            Class::DetectedTranslation => "DETECTED_TRANSLATION",
            Class::DetectedViewIndex => "DETECTED_VIEWINDEX",
            Class::DetectedIntegrity => "DETECTED_INTEGRITY",
            Class::DetectedStack => "DETECTED_STACK",
            Class::SilentCorruption => "SILENT_CORRUPTION",
            Class::Benign => "BENIGN",
            Class::Timeout => "TIMEOUT",
        }
    }

    pub fn is_detected(&self) -> bool {
        matches!(
            self,
            Class::DetectedDecode
                | Class::DetectedTranslation
                | Class::DetectedViewIndex
                | Class::DetectedIntegrity
                | Class::DetectedStack
        )
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classifies a faulted outcome against the clean baseline.
pub fn classify(baseline: &RunResult, faulted: &RunResult) -> Class {
    match &faulted.status {
        RunStatus::Trapped(t) => match t.trap {
            Trap::Decode { .. } => Class::DetectedDecode,
            Trap::Translation { .. } => Class::DetectedTranslation,
            Trap::ViewIndex { .. } => Class::DetectedViewIndex,
            Trap::Integrity { .. } => Class::DetectedIntegrity,
            Trap::Stack { .. } => Class::DetectedStack,
        },
        RunStatus::Halted if faulted.output == baseline.output => Class::Benign,
        RunStatus::Halted => Class::SilentCorruption,
        RunStatus::Timeout => Class::Timeout,
    }
}

/// Where a redirected call target landed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Landing {
    Code(Signature),
    Data,
    /// Beyond the loaded code: an unmapped page or the padding tail of a
    /// code page.
    Outside,
}

/// Redirect metadata recorded when a call-target fault fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Redirect {
    pub intended: u16,
    pub taken: u16,
    pub from: Signature,
    pub to: Landing,
}

impl Redirect {
    /// A redirection out of the key domain the call was supposed to land in,
    /// into some other code domain.
    pub fn crosses_domains(&self) -> bool {
        matches!(self.to, Landing::Code(sig) if sig != self.from)
    }
}

/// One campaign trial result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub index: u64,
    pub spec: FaultSpec,
    pub class: Class,
    /// Instructions committed between activation and trap.
    pub latency: Option<u64>,
    pub redirect: Option<Redirect>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FaultError {
    Load(LoadError),
    BaselineNotClean(String),
    EmptyFaultSpace(FaultModel),
}

impl fmt::Display for FaultError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultError::Load(e) => write!(f, "{e}"),
            FaultError::BaselineNotClean(s) => {
                write!(f, "baseline run did not halt cleanly: {s}")
            }
            FaultError::EmptyFaultSpace(m) => write!(f, "fault model `{m}` has an empty space"),
        }
    }
}

impl core::error::Error for FaultError {}

impl From<LoadError> for FaultError {
    fn from(e: LoadError) -> Self {
        FaultError::Load(e)
    }
}

/// Everything sampling needs to know about the clean run.
#[derive(Clone, Debug)]
pub struct BaselineProfile {
    pub result: RunResult,
    pub dynamic_len: u64,
    pub code_len: u16,
    pub code_frames: Vec<u16>,
    pub view_count: u16,
}

/// Runs the container once without faults.
pub fn baseline_profile(
    container: &BinaryContainer,
    cfg: &RunConfig,
    max_steps: u64,
) -> Result<BaselineProfile, FaultError> {
    let (mut machine, _) = load(container, cfg)?;
    let code_frames = machine.mv.maps.code_frames();
    let view_count = match cfg.mode {
        Mode::Aliasing => machine.mv.views.len(),
        Mode::KeyReg => 1,
    };
    let result = machine.run(max_steps);
    match result.status {
        RunStatus::Halted => {}
        RunStatus::Trapped(ref t) => {
            return Err(FaultError::BaselineNotClean(alloc::format!("{}", t.trap)))
        }
        RunStatus::Timeout => {
            return Err(FaultError::BaselineNotClean("timeout".into()));
        }
    }
    Ok(BaselineProfile {
        dynamic_len: result.counters.instructions,
        result,
        code_len: container.code.len() as u16,
        code_frames,
        view_count,
    })
}

/// Exact size of the fault space for a model over a given baseline.
pub fn fault_space_size(model: FaultModel, profile: &BaselineProfile) -> u128 {
    let t = profile.dynamic_len as u128;
    match model {
        FaultModel::Pc => t * 16,
        FaultModel::Code => t * profile.code_len as u128 * 8,
        FaultModel::Reg => t * 16 * 16 * 2,
        FaultModel::Calltarget => {
            if profile.result.counters.calls == 0 {
                0
            } else {
                t * 16
            }
        }
        FaultModel::Epte => t * profile.view_count as u128 * profile.code_frames.len() as u128 * 15,
        FaultModel::Skip => t,
    }
}

/// Uniformly samples `n` fault specs, or enumerates the space exactly when
/// it is no larger than `n`. Deterministic for a fixed seed.
pub fn enumerate_or_sample(
    model: FaultModel,
    profile: &BaselineProfile,
    n: u64,
    seed: u64,
) -> Result<Vec<FaultSpec>, FaultError> {
    let space = fault_space_size(model, profile);
    if space == 0 || profile.dynamic_len == 0 {
        return Err(FaultError::EmptyFaultSpace(model));
    }
    let mut rng = DetRng::new(seed).fork(0xFA17);
    let mut specs = Vec::new();
    if space <= u128::from(n) {
        // Exact enumeration, trigger-major order.
        for trigger in 0..profile.dynamic_len {
            match model {
                FaultModel::Skip => specs.push(FaultSpec {
                    kind: FaultKind::SkipInstr,
                    trigger,
                    seed,
                }),
                FaultModel::Pc => {
                    for bit in 0..16 {
                        specs.push(FaultSpec {
                            kind: FaultKind::PcBitflip { bit },
                            trigger,
                            seed,
                        });
                    }
                }
                FaultModel::Calltarget => {
                    for bit in 0..16 {
                        specs.push(FaultSpec {
                            kind: FaultKind::CalltargetBitflip { bit },
                            trigger,
                            seed,
                        });
                    }
                }
                _ => unreachable!("larger spaces are sampled"),
            }
        }
        return Ok(specs);
    }
    for i in 0..n {
        let trigger = u64::from(rng.next_u32()) % profile.dynamic_len;
        let trial_seed = seed ^ (i << 1) ^ 1;
        let kind = match model {
            FaultModel::Pc => FaultKind::PcBitflip {
                bit: rng.range_u32(0, 15) as u8,
            },
            FaultModel::Code => FaultKind::CodeBitflip {
                gla: rng.range_u32(0, u32::from(profile.code_len) - 1) as u16,
                bit: rng.range_u32(0, 7) as u8,
            },
            FaultModel::Reg => FaultKind::RegBitflip {
                reg: Reg::new(rng.range_u32(0, 15) as u8).unwrap(),
                bit: rng.range_u32(0, 15) as u8,
                transient: rng.range_u32(0, 1) == 0,
            },
            FaultModel::Calltarget => FaultKind::CalltargetBitflip {
                bit: rng.range_u32(0, 15) as u8,
            },
            FaultModel::Epte => FaultKind::EpteKeyidFlip {
                view: rng.range_u32(0, u32::from(profile.view_count) - 1) as u16,
                gpa_frame: profile.code_frames
                    [rng.range_usize(0, profile.code_frames.len() - 1)],
                bit: rng.range_u32(0, 14) as u8,
            },
            FaultModel::Skip => FaultKind::SkipInstr,
        };
        specs.push(FaultSpec {
            kind,
            trigger,
            seed: trial_seed,
        });
    }
    Ok(specs)
}

/// Applies a fault to a machine that has reached its trigger point.
pub fn inject(machine: &mut MachineState, spec: &FaultSpec, cfg: &RunConfig) {
    match spec.kind {
        FaultKind::PcBitflip { bit } => {
            machine.pc ^= 1 << (bit & 15);
        }
        FaultKind::CodeBitflip { gla, bit } => {
            if let Some(t) = machine.mv.walk_quiet(gla, Access::Fetch) {
                machine.mem.flip_bit(t.hpa, bit);
            }
        }
        FaultKind::RegBitflip { reg, bit, .. } => {
            machine.regs[reg.index() as usize] ^= 1 << (bit & 15);
        }
        FaultKind::CalltargetBitflip { bit } => {
            machine.calltarget_xor = Some(1 << (bit & 15));
        }
        FaultKind::EpteKeyidFlip {
            view,
            gpa_frame,
            bit,
        } => {
            if cfg.encrypted_view_entries {
                // Entries at rest are encrypted: a flip garbles the whole
                // stored entry rather than toggling a chosen bit.
                let mut rng = DetRng::new(spec.seed).fork(0xE97E);
                machine.mv.views.garble_entry(view, gpa_frame, &mut rng);
            } else if let Some(e) = machine.mv.views.entry_mut(view, gpa_frame) {
                e.kid = crate::crypto::KeyId(e.kid.0 ^ (1 << (bit % 15)));
            }
        }
        FaultKind::SkipInstr => {
            machine.pc = machine.pc.wrapping_add(4);
        }
    }
}

/// Aggregated campaign output.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignReport {
    pub model: FaultModel,
    pub trials: u64,
    pub seed: u64,
    pub mode: Mode,
    pub class_counts: BTreeMap<Class, u64>,
    /// Trap latency (committed instructions after activation) histogram,
    /// detected classes only.
    pub latency_histogram: BTreeMap<u64, u64>,
    pub records: Vec<TrialRecord>,
    pub baseline_instructions: u64,
    pub total_faulted_instructions: u64,
}

impl CampaignReport {
    pub fn count(&self, class: Class) -> u64 {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn detected(&self) -> u64 {
        Class::ALL
            .iter()
            .filter(|c| c.is_detected())
            .map(|c| self.count(*c))
            .sum()
    }

    pub fn detection_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.detected() as f64 / self.trials as f64
        }
    }
}

/// Runs one faulted trial to completion.
pub fn run_trial(
    container: &BinaryContainer,
    cfg: &RunConfig,
    baseline: &BaselineProfile,
    spec: &FaultSpec,
    max_steps: u64,
) -> (RunResult, Option<u64>, Option<Redirect>) {
    let (mut m, _) = load(container, cfg).expect("baseline already loaded this container");

    // Run to the trigger point.
    while m.counters.instructions < spec.trigger && !m.halted {
        if m.step().is_err() {
            break;
        }
    }
    let mut activation: Option<u64> = match spec.kind {
        FaultKind::PcBitflip { .. } | FaultKind::RegBitflip { .. } | FaultKind::SkipInstr => {
            Some(m.counters.instructions)
        }
        _ => None,
    };
    inject(&mut m, spec, cfg);

    // For transient register flips, remember what to undo.
    let transient = match spec.kind {
        FaultKind::RegBitflip {
            reg,
            bit,
            transient: true,
        } => Some((reg, machine_flipped_value(&m, reg), 1u16 << (bit & 15))),
        _ => None,
    };
    // Activation watching for delayed-effect kinds.
    let garbled_block = match spec.kind {
        FaultKind::CodeBitflip { gla, .. } => Some(gla & !0xF),
        _ => None,
    };
    let epte_target = match spec.kind {
        FaultKind::EpteKeyidFlip {
            view, gpa_frame, ..
        } => Some((view, gpa_frame)),
        _ => None,
    };

    let mut steps_after = 0u64;
    let status = loop {
        if m.halted {
            break RunStatus::Halted;
        }
        if m.counters.instructions >= max_steps {
            break RunStatus::Timeout;
        }
        // Detect activation before the fetch happens.
        if activation.is_none() {
            if let Some(block) = garbled_block {
                if m.pc & !0xF == block {
                    activation = Some(m.counters.instructions);
                }
            }
            if let Some((view, frame)) = epte_target {
                let walk_view = match cfg.mode {
                    Mode::Aliasing => m.mv.active_view,
                    Mode::KeyReg => 0,
                };
                let page = m.mv.maps.page_of(m.pc);
                let frame_hit = m
                    .mv
                    .maps
                    .lookup(page)
                    .is_some_and(|p| p.gpa_frame == frame);
                if walk_view == view && frame_hit {
                    activation = Some(m.counters.instructions);
                }
            }
        }
        match m.step() {
            Ok(_) => {
                steps_after += 1;
                if activation.is_none() && m.calltarget_effect.is_some() {
                    activation = Some(m.counters.instructions);
                }
                if steps_after == 1 {
                    if let Some((reg, flipped, mask)) = transient {
                        let idx = reg.index() as usize;
                        if m.regs[idx] == flipped {
                            m.regs[idx] ^= mask;
                        }
                    }
                }
            }
            Err(trap) => break RunStatus::Trapped(trap),
        }
    };
    m.counters.mem = m.mv.counters();
    let result = RunResult {
        status,
        output: m.output.clone(),
        counters: m.counters,
        regs: m.regs,
    };

    let latency = match (&result.status, activation) {
        (RunStatus::Trapped(t), Some(act)) => Some(t.committed.saturating_sub(act)),
        (RunStatus::Trapped(t), None) => Some(t.committed.saturating_sub(spec.trigger)),
        _ => None,
    };
    let redirect = m.calltarget_effect.map(|(intended, taken)| {
        let from = domain_landing(container, &m, intended);
        let to = domain_landing(container, &m, taken);
        Redirect {
            intended,
            taken,
            from: match from {
                Landing::Code(sig) => sig,
                _ => Signature(u16::MAX),
            },
            to,
        }
    });
    let _ = baseline;
    (result, latency, redirect)
}

fn machine_flipped_value(m: &MachineState, reg: Reg) -> u16 {
    m.regs[reg.index() as usize]
}

fn domain_landing(container: &BinaryContainer, m: &MachineState, gla: u16) -> Landing {
    if let Some(d) = container.key_domains.iter().find(|d| d.contains(gla)) {
        Landing::Code(d.signature)
    } else if gla >= m.data_base && gla < m.data_end {
        Landing::Data
    } else {
        Landing::Outside
    }
}

/// Runs a full campaign: baseline, sampling, n trials, aggregation.
pub fn run_campaign(
    container: &BinaryContainer,
    cfg: &RunConfig,
    model: FaultModel,
    n: u64,
    seed: u64,
    max_steps: u64,
) -> Result<CampaignReport, FaultError> {
    let baseline = baseline_profile(container, cfg, max_steps)?;
    let specs = enumerate_or_sample(model, &baseline, n, seed)?;
    let mut report = CampaignReport {
        model,
        trials: specs.len() as u64,
        seed,
        mode: cfg.mode,
        class_counts: BTreeMap::new(),
        latency_histogram: BTreeMap::new(),
        records: Vec::with_capacity(specs.len()),
        baseline_instructions: baseline.dynamic_len,
        total_faulted_instructions: 0,
    };
    for (i, spec) in specs.iter().enumerate() {
        let (result, latency, redirect) =
            run_trial(container, cfg, &baseline, spec, max_steps);
        let class = classify(&baseline.result, &result);
        *report.class_counts.entry(class).or_insert(0) += 1;
        if class.is_detected() {
            if let Some(l) = latency {
                *report.latency_histogram.entry(l).or_insert(0) += 1;
            }
        }
        report.total_faulted_instructions += result.counters.instructions;
        report.records.push(TrialRecord {
            index: i as u64,
            spec: *spec,
            class,
            latency: if class.is_detected() { latency } else { None },
            redirect,
        });
    }
    Ok(report)
}
