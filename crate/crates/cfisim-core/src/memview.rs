//! Two-level address translation with aliased second-level views.
//!
//! The first level maps guest-linear pages to guest-physical frames. The
//! second level is an ordered list of views: every view maps each
//! guest-physical frame to the same host-physical frame but may carry a
//! different key identifier, so switching the active view switches the
//! decryption key without changing the address mapping. A fully associative
//! LRU TLB caches translations, tagged with the active view index in
//! aliasing mode and untagged in key-register mode.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::config::{Mode, DEFAULT_USER_VIEW, MAX_VIEWS, RESERVED_VIEWS};
use crate::crypto::KeyId;
use crate::rng::DetRng;

pub type Gla = u16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Fetch,
    Load,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PageKind {
    Code,
    Data,
}

/// First-level page table: guest-linear page to guest-physical frame.
#[derive(Clone, Debug)]
pub struct AddressMaps {
    pub page_size: u16,
    entries: BTreeMap<u16, PageMapping>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageMapping {
    pub gpa_frame: u16,
    pub kind: PageKind,
}

/// Guest-physical frames sit one small constant above the linear page and
/// host frames another constant above that, so conflating the address
/// spaces shows up immediately in tests.
pub const GPA_FRAME_BASE: u16 = 0x10;
pub const HPA_FRAME_BASE: u16 = 0x100;

impl AddressMaps {
    pub fn empty(page_size: u16) -> Self {
        Self {
            page_size,
            entries: BTreeMap::new(),
        }
    }

    /// Linear layout: code pages from linear address 0, data pages directly
    /// after, each linear page `p` mapped to guest-physical frame
    /// `GPA_FRAME_BASE + p`.
    pub fn linear(page_size: u16, code_bytes: usize, data_bytes: usize) -> Self {
        let mut maps = Self::empty(page_size);
        let ps = page_size as usize;
        let code_pages = code_bytes.div_ceil(ps);
        let data_pages = data_bytes.div_ceil(ps);
        for p in 0..code_pages + data_pages {
            let kind = if p < code_pages {
                PageKind::Code
            } else {
                PageKind::Data
            };
            maps.map_page(p as u16, GPA_FRAME_BASE + p as u16, kind);
        }
        maps
    }

    pub fn map_page(&mut self, gla_page: u16, gpa_frame: u16, kind: PageKind) {
        self.entries.insert(gla_page, PageMapping { gpa_frame, kind });
    }

    pub fn page_of(&self, gla: Gla) -> u16 {
        gla / self.page_size
    }

    pub fn lookup(&self, gla_page: u16) -> Option<PageMapping> {
        self.entries.get(&gla_page).copied()
    }

    pub fn mapped_pages(&self) -> impl Iterator<Item = (u16, PageMapping)> + '_ {
        self.entries.iter().map(|(p, m)| (*p, *m))
    }

    /// First data page boundary, used by the loader for the code/data split.
    pub fn code_frames(&self) -> Vec<u16> {
        self.entries
            .values()
            .filter(|m| m.kind == PageKind::Code)
            .map(|m| m.gpa_frame)
            .collect()
    }
}

/// One second-level entry: host frame plus key identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewEntry {
    pub hpa_frame: u16,
    pub kid: KeyId,
}

#[derive(Clone, Debug, Default)]
pub struct View {
    entries: BTreeMap<u16, ViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViewError {
    CapacityExceeded { requested: u16 },
    UnmappedFrame { gpa_frame: u16 },
    NotACodePage { gpa_frame: u16 },
}

impl fmt::Display for ViewError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewError::CapacityExceeded { requested } => {
                write!(f, "{requested} views exceed the {MAX_VIEWS}-entry list")
            }
            ViewError::UnmappedFrame { gpa_frame } => {
                write!(f, "guest-physical frame {gpa_frame:#x} is not mapped")
            }
            ViewError::NotACodePage { gpa_frame } => {
                write!(f, "frame {gpa_frame:#x} is a data page; key ids stay 0")
            }
        }
    }
}

impl core::error::Error for ViewError {}

/// Ordered list of aliased views. Indices 0..=2 are reserved (hypervisor,
/// kernel, default user); protected program views follow.
#[derive(Clone, Debug)]
pub struct ViewTable {
    views: Vec<View>,
    code_frames: BTreeMap<u16, ()>,
}

impl ViewTable {
    /// Builds `RESERVED_VIEWS + protected` identical views over `maps`, all
    /// key ids 0.
    pub fn init(protected: u16, maps: &AddressMaps) -> Result<Self, ViewError> {
        let count = RESERVED_VIEWS
            .checked_add(protected)
            .filter(|&c| c <= MAX_VIEWS)
            .ok_or(ViewError::CapacityExceeded {
                requested: RESERVED_VIEWS.saturating_add(protected),
            })?;
        Ok(Self::with_views(count, maps))
    }

    /// Degenerate single-view table for key-register mode.
    pub fn init_single(maps: &AddressMaps) -> Self {
        Self::with_views(1, maps)
    }

    fn with_views(count: u16, maps: &AddressMaps) -> Self {
        let mut base = View::default();
        for (_, m) in maps.mapped_pages() {
            base.entries.insert(
                m.gpa_frame,
                ViewEntry {
                    hpa_frame: HPA_FRAME_BASE + (m.gpa_frame - GPA_FRAME_BASE),
                    kid: KeyId::DEFAULT,
                },
            );
        }
        Self {
            views: alloc::vec![base; count as usize],
            code_frames: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> u16 {
        self.views.len() as u16
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn entry(&self, view: u16, gpa_frame: u16) -> Option<ViewEntry> {
        self.views
            .get(view as usize)?
            .entries
            .get(&gpa_frame)
            .copied()
    }

    pub fn entry_mut(&mut self, view: u16, gpa_frame: u16) -> Option<&mut ViewEntry> {
        self.views
            .get_mut(view as usize)?
            .entries
            .get_mut(&gpa_frame)
    }

    pub fn is_code_frame(&self, gpa_frame: u16) -> bool {
        self.code_frames.contains_key(&gpa_frame)
    }

    /// Registers a program's code pages: in every protected view `i >= 3`
    /// the page's key id becomes `i` (the signature that selects the view);
    /// data pages keep key 0 everywhere. In a degenerate single-view table
    /// the pages are only marked as code, since the key comes from the
    /// key-id register.
    pub fn register_program(
        &mut self,
        maps: &AddressMaps,
        code_frames: &[u16],
    ) -> Result<(), ViewError> {
        for &frame in code_frames {
            let mapping = maps
                .mapped_pages()
                .find(|(_, m)| m.gpa_frame == frame)
                .map(|(_, m)| m)
                .ok_or(ViewError::UnmappedFrame { gpa_frame: frame })?;
            if mapping.kind != PageKind::Code {
                return Err(ViewError::NotACodePage { gpa_frame: frame });
            }
        }
        for &frame in code_frames {
            self.code_frames.insert(frame, ());
            for (i, view) in self.views.iter_mut().enumerate() {
                let idx = i as u16;
                if idx >= RESERVED_VIEWS {
                    if let Some(e) = view.entries.get_mut(&frame) {
                        e.kid = KeyId(idx);
                    }
                }
            }
        }
        Ok(())
    }

    /// Resets every key id to 0, as done when a program terminates.
    pub fn deregister_program(&mut self) {
        for view in &mut self.views {
            for e in view.entries.values_mut() {
                e.kid = KeyId::DEFAULT;
            }
        }
        self.code_frames.clear();
    }

    /// Replaces an entry with pseudorandom contents, modeling a bit flip
    /// landing in an encrypted stored entry.
    pub fn garble_entry(&mut self, view: u16, gpa_frame: u16, rng: &mut DetRng) -> bool {
        match self.entry_mut(view, gpa_frame) {
            Some(e) => {
                e.hpa_frame = rng.next_u32() as u16;
                e.kid = KeyId((rng.next_u32() & 0x7FFF) as u16);
                true
            }
            None => false,
        }
    }
}

/// Fully associative LRU TLB with a miss counter per install cause.
#[derive(Clone, Debug)]
pub struct Tlb {
    capacity: usize,
    entries: Vec<TlbSlot>,
    clock: u64,
}

#[derive(Clone, Copy, Debug)]
struct TlbSlot {
    tag: (u16, u16),
    entry: ViewEntry,
    kind: PageKind,
    last_used: u64,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            clock: 0,
        }
    }

    fn lookup(&mut self, tag: (u16, u16)) -> Option<(ViewEntry, PageKind)> {
        self.clock += 1;
        let clock = self.clock;
        self.entries.iter_mut().find(|s| s.tag == tag).map(|s| {
            s.last_used = clock;
            (s.entry, s.kind)
        })
    }

    fn insert(&mut self, tag: (u16, u16), entry: ViewEntry, kind: PageKind) {
        self.clock += 1;
        let slot = TlbSlot {
            tag,
            entry,
            kind,
            last_used: self.clock,
        };
        if self.entries.len() < self.capacity {
            self.entries.push(slot);
        } else if let Some(victim) = self.entries.iter_mut().min_by_key(|s| s.last_used) {
            *victim = slot;
        }
    }

    pub fn flush(&mut self) {
        self.entries.clear();
    }
}

/// Miss and switch counters exported into run reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemCounters {
    pub itlb_misses: u64,
    pub dtlb_load_misses: u64,
    pub dtlb_store_misses: u64,
    pub view_switches: u64,
}

impl MemCounters {
    pub fn total_tlb_misses(&self) -> u64 {
        self.itlb_misses + self.dtlb_load_misses + self.dtlb_store_misses
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TranslateError {
    UnmappedPage { gla: Gla },
    UnmappedFrame { gpa_frame: u16, view: u16 },
}

impl fmt::Display for TranslateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TranslateError::UnmappedPage { gla } => write!(f, "no mapping for address {gla:#06x}"),
            TranslateError::UnmappedFrame { gpa_frame, view } => {
                write!(f, "view {view} has no entry for frame {gpa_frame:#x}")
            }
        }
    }
}

impl core::error::Error for TranslateError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwitchError {
    pub requested: u16,
    pub limit: u16,
}

impl fmt::Display for SwitchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "switch target {} outside the {} configured slots",
            self.requested, self.limit
        )
    }
}

impl core::error::Error for SwitchError {}

/// A resolved access: host-physical address plus the key to use for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Translation {
    pub hpa: u32,
    pub kid: KeyId,
    pub kind: PageKind,
}

/// The machine-facing translation state: views, first-level map, TLBs, the
/// active view index and the key-id register.
#[derive(Clone, Debug)]
pub struct MemView {
    pub views: ViewTable,
    pub maps: AddressMaps,
    pub mode: Mode,
    pub active_view: u16,
    pub key_register: KeyId,
    /// Valid switch targets (provisioned views / key ids): KSW faults at or
    /// above this in either mode.
    pub switch_limit: u16,
    itlb: Tlb,
    dtlb: Tlb,
    counters: MemCounters,
}

impl MemView {
    pub fn new(
        mode: Mode,
        protected: u16,
        maps: AddressMaps,
        itlb_entries: usize,
        dtlb_entries: usize,
    ) -> Result<Self, ViewError> {
        let switch_limit = RESERVED_VIEWS + protected;
        let views = match mode {
            Mode::Aliasing => ViewTable::init(protected, &maps)?,
            Mode::KeyReg => {
                if switch_limit > MAX_VIEWS {
                    return Err(ViewError::CapacityExceeded {
                        requested: switch_limit,
                    });
                }
                ViewTable::init_single(&maps)
            }
        };
        Ok(Self {
            views,
            maps,
            mode,
            active_view: DEFAULT_USER_VIEW.min(switch_limit - 1),
            key_register: KeyId::DEFAULT,
            switch_limit,
            itlb: Tlb::new(itlb_entries),
            dtlb: Tlb::new(dtlb_entries),
            counters: MemCounters::default(),
        })
    }

    pub fn counters(&self) -> MemCounters {
        self.counters
    }

    fn walk_view(&self) -> u16 {
        match self.mode {
            Mode::Aliasing => self.active_view,
            Mode::KeyReg => 0,
        }
    }

    /// Full two-level translation with TLB consultation. A miss increments
    /// the per-access-type counter and installs the entry.
    pub fn translate(&mut self, gla: Gla, access: Access) -> Result<Translation, TranslateError> {
        let page = self.maps.page_of(gla);
        let offset = gla % self.maps.page_size;
        let walk_view = self.walk_view();
        let tag = match self.mode {
            Mode::Aliasing => (self.active_view, page),
            Mode::KeyReg => (0, page),
        };
        let tlb = match access {
            Access::Fetch => &mut self.itlb,
            Access::Load | Access::Store => &mut self.dtlb,
        };
        let (entry, kind) = match tlb.lookup(tag) {
            Some(hit) => hit,
            None => {
                match access {
                    Access::Fetch => self.counters.itlb_misses += 1,
                    Access::Load => self.counters.dtlb_load_misses += 1,
                    Access::Store => self.counters.dtlb_store_misses += 1,
                }
                let mapping = self
                    .maps
                    .lookup(page)
                    .ok_or(TranslateError::UnmappedPage { gla })?;
                let entry = self.views.entry(walk_view, mapping.gpa_frame).ok_or(
                    TranslateError::UnmappedFrame {
                        gpa_frame: mapping.gpa_frame,
                        view: walk_view,
                    },
                )?;
                let tlb = match access {
                    Access::Fetch => &mut self.itlb,
                    Access::Load | Access::Store => &mut self.dtlb,
                };
                tlb.insert(tag, entry, mapping.kind);
                (entry, mapping.kind)
            }
        };
        let kid = self.effective_kid(access, kind, entry.kid);
        Ok(Translation {
            hpa: u32::from(entry.hpa_frame) * u32::from(self.maps.page_size) + u32::from(offset),
            kid,
            kind,
        })
    }

    /// Key-register mode substitutes the register for code fetches, but only
    /// when it holds a protected identifier; the reserved values 0..=2 defer
    /// to the page's own key id, so default-key code and all data stay
    /// readable exactly as in aliasing mode.
    fn effective_kid(&self, access: Access, kind: PageKind, entry_kid: KeyId) -> KeyId {
        match (self.mode, access, kind) {
            (Mode::KeyReg, Access::Fetch, PageKind::Code)
                if self.key_register.0 >= RESERVED_VIEWS =>
            {
                self.key_register
            }
            _ => entry_kid,
        }
    }

    /// Translation walk without TLB or counter side effects, for the loader
    /// and for fault instrumentation.
    pub fn walk_quiet(&self, gla: Gla, access: Access) -> Option<Translation> {
        let page = self.maps.page_of(gla);
        let offset = gla % self.maps.page_size;
        let mapping = self.maps.lookup(page)?;
        let entry = self.views.entry(self.walk_view(), mapping.gpa_frame)?;
        Some(Translation {
            hpa: u32::from(entry.hpa_frame) * u32::from(self.maps.page_size) + u32::from(offset),
            kid: self.effective_kid(access, mapping.kind, entry.kid),
            kind: mapping.kind,
        })
    }

    /// Aliasing-mode view switch. The TLB is not flushed; entries remain
    /// valid under their original tags.
    pub fn switch_view(&mut self, target: u16) -> Result<(), SwitchError> {
        debug_assert_eq!(self.mode, Mode::Aliasing);
        if target >= self.switch_limit || target >= self.views.len() {
            return Err(SwitchError {
                requested: target,
                limit: self.switch_limit,
            });
        }
        self.active_view = target;
        self.counters.view_switches += 1;
        Ok(())
    }

    /// Drops all cached translations (both TLBs).
    pub fn flush_tlbs(&mut self) {
        self.itlb.flush();
        self.dtlb.flush();
    }

    /// Key-register-mode switch: writes the register, the view stays put.
    pub fn write_key_register(&mut self, target: u16) -> Result<(), SwitchError> {
        debug_assert_eq!(self.mode, Mode::KeyReg);
        if target >= self.switch_limit {
            return Err(SwitchError {
                requested: target,
                limit: self.switch_limit,
            });
        }
        self.key_register = KeyId(target);
        Ok(())
    }
}
