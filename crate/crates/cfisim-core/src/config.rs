//! Shared configuration for the build (instrumentation) and run (machine)
//! halves of the toolchain, with the cross-field checks enforced up front.

use alloc::format;
use alloc::string::String;
use core::fmt;

/// View indices 0..=2 are reserved (hypervisor, kernel, default user);
/// protected program views start above them.
pub const RESERVED_VIEWS: u16 = 3;
/// Index of the default user view, also the signature used for calls into
/// unprotected (default-key) code.
pub const DEFAULT_USER_VIEW: u16 = 2;
/// Hard cap on the view list length.
pub const MAX_VIEWS: u16 = 512;
/// Hard cap on the key-identifier space.
pub const MAX_KEY_IDS: u32 = 1 << 15;
/// Width of one cipher block; code encryption cannot be finer than this.
pub const CIPHER_BLOCK: u16 = 16;

/// How the machine selects the decryption key at fetch time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Key id comes from the active translation view's entry; the key-switch
    /// instruction selects the view.
    Aliasing,
    /// Key id for protected code fetches comes from a writable key-id
    /// register; the view list degenerates to a single view.
    KeyReg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Aliasing => write!(f, "aliasing"),
            Mode::KeyReg => write!(f, "keyreg"),
        }
    }
}

/// Instrumentation-time configuration, echoed into the binary container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildConfig {
    /// Lowest assignable signature (must leave the reserved views alone).
    pub sig_low: u16,
    /// Highest assignable signature.
    pub sig_high: u16,
    /// Encryption-block alignment for key switches, in bytes.
    pub block_size: u16,
    /// Translation page size in bytes.
    pub page_size: u16,
    /// Emit per-edge call headers and return footers. Disabling them yields
    /// the weak shared-key layout (one key per function, returns unchecked).
    pub headers: bool,
    /// Allow calls without a declared target set to go through the default
    /// user view.
    pub external_default: bool,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            sig_low: RESERVED_VIEWS,
            sig_high: 31,
            block_size: CIPHER_BLOCK,
            page_size: 256,
            headers: true,
            external_default: false,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sig_low < RESERVED_VIEWS {
            return Err(ConfigError(format!(
                "sig_low {} overlaps reserved views 0..{}",
                self.sig_low, RESERVED_VIEWS
            )));
        }
        if self.sig_high < self.sig_low {
            return Err(ConfigError(format!(
                "empty signature range [{}, {}]",
                self.sig_low, self.sig_high
            )));
        }
        if self.sig_high >= MAX_VIEWS {
            return Err(ConfigError(format!(
                "sig_high {} exceeds view capacity {}",
                self.sig_high,
                MAX_VIEWS - 1
            )));
        }
        if self.block_size == 0 || self.block_size % 4 != 0 || self.block_size > 64 {
            return Err(ConfigError(format!(
                "block_size {} must be a multiple of 4 in 4..=64",
                self.block_size
            )));
        }
        if !self.page_size.is_power_of_two()
            || self.page_size < 32
            || self.page_size % CIPHER_BLOCK != 0
        {
            return Err(ConfigError(format!(
                "page_size {} must be a power of two, >= 32",
                self.page_size
            )));
        }
        Ok(())
    }
}

/// Machine-side configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    /// Number of protected views set up beyond the three reserved ones.
    pub protected_views: u16,
    pub itlb_entries: usize,
    pub dtlb_entries: usize,
    pub mode: Mode,
    /// Trap deterministically on any wrong-key instruction fetch (models an
    /// integrity-checking encryption engine).
    pub integrity: bool,
    /// Store view entries encrypted: a fault flipping a key-id bit garbles
    /// the whole entry instead of toggling one bit.
    pub encrypted_view_entries: bool,
    pub master_secret: [u8; 32],
    /// Provisionable key identifiers (0 = default key).
    pub key_id_capacity: u32,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protected_views: 29,
            itlb_entries: 16,
            dtlb_entries: 16,
            mode: Mode::Aliasing,
            integrity: false,
            encrypted_view_entries: false,
            master_secret: [0u8; 32],
            key_id_capacity: MAX_KEY_IDS,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn view_count(&self) -> u16 {
        RESERVED_VIEWS + self.protected_views
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.view_count() > MAX_VIEWS {
            return Err(ConfigError(format!(
                "{} protected views exceed the {}-entry view list",
                self.protected_views, MAX_VIEWS
            )));
        }
        if self.key_id_capacity == 0 || self.key_id_capacity > MAX_KEY_IDS {
            return Err(ConfigError(format!(
                "key_id_capacity {} outside 1..={}",
                self.key_id_capacity, MAX_KEY_IDS
            )));
        }
        if u32::from(self.view_count()) > self.key_id_capacity {
            return Err(ConfigError(format!(
                "view count {} exceeds key_id_capacity {}; views could not get distinct keys",
                self.view_count(),
                self.key_id_capacity
            )));
        }
        if self.itlb_entries == 0 || self.dtlb_entries == 0 {
            return Err(ConfigError("TLB capacities must be nonzero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl core::error::Error for ConfigError {}
