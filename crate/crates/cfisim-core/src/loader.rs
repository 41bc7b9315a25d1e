//! Loader: places code into simulated memory by writing each key domain
//! through its own view, which encrypts it under that domain's key, zeroes
//! the data region under the default key, and hands back a machine ready to
//! run at the entry point. The protocol order is register, encrypt,
//! activate, jump.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::config::{ConfigError, Mode, RunConfig, RESERVED_VIEWS};
use crate::crypto::{CryptoEngine, KeyId, MasterSecret, BLOCK_SIZE};
use crate::instrument::{InstrumentedBinary, KeyDomain, Signature, IMAGE_LIMIT};
use crate::isa::Reg;
use crate::machine::{Counters, HostMemory, MachineState};
use crate::memview::{AddressMaps, MemView, ViewError, HPA_FRAME_BASE};

/// The loadable artifact: code, its key-domain map, and the entry point.
/// This is the in-memory form of the container file the CLI reads/writes.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryContainer {
    pub code: Vec<u8>,
    pub key_domains: Vec<KeyDomain>,
    pub entry_gla: u16,
    pub entry_signature: Signature,
    pub data_size: u16,
    pub block_size: u16,
    pub page_size: u16,
}

impl From<&InstrumentedBinary> for BinaryContainer {
    fn from(bin: &InstrumentedBinary) -> Self {
        Self {
            code: bin.code.clone(),
            key_domains: bin.key_domains.clone(),
            entry_gla: bin.entry_gla,
            entry_signature: bin.entry_signature,
            data_size: bin.data_size,
            block_size: bin.block_size,
            page_size: bin.page_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoadError {
    Config(ConfigError),
    View(ViewError),
    DomainGapOrOverlap { at: u16 },
    DomainNotCipherAligned { start: u16 },
    SignatureOutsideProtectedRange { signature: u16, limit: u16 },
    EntryOutsideItsDomain { entry: u16 },
    ImageTooLarge { bytes: u32 },
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::Config(e) => write!(f, "{e}"),
            LoadError::View(e) => write!(f, "{e}"),
            LoadError::DomainGapOrOverlap { at } => {
                write!(f, "key domains overlap or leave a gap at {at:#06x}")
            }
            LoadError::DomainNotCipherAligned { start } => write!(
                f,
                "domain at {start:#06x} is not aligned to the {BLOCK_SIZE}-byte cipher block"
            ),
            LoadError::SignatureOutsideProtectedRange { signature, limit } => write!(
                f,
                "domain signature {signature} outside the protected views 3..{limit}"
            ),
            LoadError::EntryOutsideItsDomain { entry } => {
                write!(f, "entry {entry:#06x} not covered by a domain of the entry signature")
            }
            LoadError::ImageTooLarge { bytes } => {
                write!(f, "image of {bytes} bytes exceeds the loadable address space")
            }
        }
    }
}

impl core::error::Error for LoadError {}

impl From<ConfigError> for LoadError {
    fn from(e: ConfigError) -> Self {
        LoadError::Config(e)
    }
}

impl From<ViewError> for LoadError {
    fn from(e: ViewError) -> Self {
        LoadError::View(e)
    }
}

/// What the loader did: domain count and ciphertext bytes written per key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub domains: usize,
    pub bytes_per_key: BTreeMap<u16, u32>,
    pub data_bytes: u32,
}

fn validate(container: &BinaryContainer, cfg: &RunConfig) -> Result<(), LoadError> {
    cfg.validate()?;
    let mut cursor = 0u32;
    let limit = cfg.view_count();
    for d in &container.key_domains {
        if u32::from(d.start) != cursor {
            return Err(LoadError::DomainGapOrOverlap { at: d.start });
        }
        if d.start as usize % BLOCK_SIZE != 0 || d.len as usize % BLOCK_SIZE != 0 {
            return Err(LoadError::DomainNotCipherAligned { start: d.start });
        }
        let s = d.signature.0;
        if s != crate::config::DEFAULT_USER_VIEW && !(RESERVED_VIEWS..limit).contains(&s) {
            return Err(LoadError::SignatureOutsideProtectedRange {
                signature: s,
                limit,
            });
        }
        cursor += u32::from(d.len);
    }
    if cursor != container.code.len() as u32 {
        return Err(LoadError::DomainGapOrOverlap { at: cursor as u16 });
    }
    if cursor + u32::from(container.data_size) > IMAGE_LIMIT {
        return Err(LoadError::ImageTooLarge {
            bytes: cursor + u32::from(container.data_size),
        });
    }
    let entry_ok = container
        .key_domains
        .iter()
        .any(|d| d.contains(container.entry_gla) && d.signature == container.entry_signature);
    if !entry_ok {
        return Err(LoadError::EntryOutsideItsDomain {
            entry: container.entry_gla,
        });
    }
    Ok(())
}

/// Key a domain's bytes are encrypted under: the domain signature for
/// protected views, the default key for the reserved ones.
fn domain_kid(sig: Signature) -> KeyId {
    if sig.0 >= RESERVED_VIEWS {
        KeyId(sig.0)
    } else {
        KeyId::DEFAULT
    }
}

/// Loads a container into a fresh machine.
pub fn load(container: &BinaryContainer, cfg: &RunConfig) -> Result<(MachineState, LoadReport), LoadError> {
    validate(container, cfg)?;

    let maps = AddressMaps::linear(
        container.page_size,
        container.code.len(),
        usize::from(container.data_size),
    );
    let code_pages = (container.code.len() as u16).div_ceil(container.page_size);
    let data_base = code_pages * container.page_size;
    let data_end = data_base + container.data_size;
    let total_pages = data_end.div_ceil(container.page_size);

    let mut mv = MemView::new(
        cfg.mode,
        cfg.protected_views,
        maps,
        cfg.itlb_entries,
        cfg.dtlb_entries,
    )?;
    // Register: every protected view tags the code pages with its own key.
    let code_frames = mv.maps.code_frames();
    mv.views.register_program(&mv.maps, &code_frames)?;

    let host_len = (usize::from(HPA_FRAME_BASE) + usize::from(total_pages))
        * usize::from(container.page_size);
    let mut mem = HostMemory::new(host_len);
    let mut engine = CryptoEngine::new(
        MasterSecret::from_bytes(cfg.master_secret),
        cfg.key_id_capacity,
    );
    let mut report = LoadReport {
        domains: container.key_domains.len(),
        ..LoadReport::default()
    };

    // Encrypt: write each domain through its view (the walk supplies the
    // key), one cipher block at a time.
    for d in &container.key_domains {
        let kid = domain_kid(d.signature);
        for off in (0..d.len).step_by(BLOCK_SIZE) {
            let gla = d.start + off;
            let page = mv.maps.page_of(gla);
            let mapping = mv
                .maps
                .lookup(page)
                .expect("linear maps cover the whole image");
            let view_walk = match cfg.mode {
                Mode::Aliasing => mv
                    .views
                    .entry(d.signature.0.min(mv.views.len() - 1), mapping.gpa_frame),
                Mode::KeyReg => mv.views.entry(0, mapping.gpa_frame),
            }
            .expect("views map every frame");
            if cfg.mode == Mode::Aliasing && d.signature.0 >= RESERVED_VIEWS {
                debug_assert_eq!(view_walk.kid, kid, "view walk agrees with the domain key");
            }
            let hpa = u32::from(view_walk.hpa_frame) * u32::from(container.page_size)
                + u32::from(gla % container.page_size);
            let mut plain = [0u8; BLOCK_SIZE];
            let start = usize::from(gla);
            let end = (start + BLOCK_SIZE).min(container.code.len());
            plain[..end - start].copy_from_slice(&container.code[start..end]);
            let block_index = hpa as usize / BLOCK_SIZE;
            let ct = engine.encrypt_block(kid, block_index as u64, plain);
            mem.set_block(block_index, ct, kid);
            *report.bytes_per_key.entry(kid.0).or_insert(0) += BLOCK_SIZE as u32;
        }
    }

    // Data region: zeroed under the default key so every function shares it.
    for gla in (data_base..data_end.max(data_base)).step_by(BLOCK_SIZE) {
        let page = mv.maps.page_of(gla);
        let mapping = mv.maps.lookup(page).expect("data pages are mapped");
        let hpa = u32::from(mapping.gpa_frame - crate::memview::GPA_FRAME_BASE
            + HPA_FRAME_BASE) as u32
            * u32::from(container.page_size)
            + u32::from(gla % container.page_size);
        let block_index = hpa as usize / BLOCK_SIZE;
        let ct = engine.encrypt_block(KeyId::DEFAULT, block_index as u64, [0u8; BLOCK_SIZE]);
        mem.set_block(block_index, ct, KeyId::DEFAULT);
        report.data_bytes += BLOCK_SIZE as u32;
    }

    // Activate the entry view and point the machine at the entry.
    match cfg.mode {
        Mode::Aliasing => mv.active_view = container.entry_signature.0,
        Mode::KeyReg => mv.key_register = KeyId(container.entry_signature.0),
    }

    let mut regs = [0u16; 16];
    regs[Reg::SIG.index() as usize] = container.entry_signature.0;
    regs[Reg::SP.index() as usize] = data_end;
    let machine = MachineState {
        regs,
        pc: container.entry_gla,
        mem,
        mv,
        engine,
        integrity: cfg.integrity,
        data_base,
        data_end,
        counters: Counters::default(),
        output: Vec::new(),
        halted: false,
        calltarget_xor: None,
        calltarget_effect: None,
    };
    Ok((machine, report))
}


#[cfg(test)]
mod more_tests {
    use super::*;
    use crate::asm::assemble;
    use crate::config::BuildConfig;
    use crate::instrument::instrument;
    use crate::machine::RunStatus;

    #[test]
    fn minimal_program_one_domain_and_halts() {
        let p = assemble(".func main\nHLT\n.endfunc\n").unwrap();
        let bin = instrument(&p, &BuildConfig::default()).unwrap();
        assert_eq!(bin.key_domains.len(), 1);
        let (mut m, report) = load(&BinaryContainer::from(&bin), &RunConfig::default()).unwrap();
        assert_eq!(report.domains, 1);
        let r = m.run(10);
        assert_eq!(r.status, RunStatus::Halted);
        assert_eq!(r.counters.instructions, 2); // signature init + HLT
    }

    #[test]
    fn load_report_counts_bytes_per_key() {
        let p = assemble(
            ".func main entry\nCALL f\nHLT\n.endfunc\n.func f\nRET\n.endfunc\n",
        )
        .unwrap();
        let bin = instrument(&p, &BuildConfig::default()).unwrap();
        let (_, report) = load(&BinaryContainer::from(&bin), &RunConfig::default()).unwrap();
        let total: u32 = report.bytes_per_key.values().sum();
        assert_eq!(total as usize, bin.code.len());
        assert!(report.bytes_per_key.len() >= 2, "multiple keys in use");
        assert!(report.data_bytes >= u32::from(bin.data_size));
    }
}
