//! On-disk container format: a JSON document carrying the code bytes (hex),
//! the key-domain map, the entry point, and the build-config echo.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use cfisim_core::instrument::{InstrumentedBinary, KeyDomain, Signature};
use cfisim_core::loader::BinaryContainer;

pub const FORMAT: &str = "cfisim-container";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ContainerFile {
    pub format: String,
    pub version: u32,
    pub block_size: u16,
    pub page_size: u16,
    pub data_size: u16,
    pub entry: EntryField,
    pub code_hex: String,
    pub key_domains: Vec<DomainField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsField>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct EntryField {
    pub gla: u16,
    pub signature: u16,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct DomainField {
    pub start: u16,
    pub len: u16,
    pub signature: u16,
}

/// Instrumentation counters echoed into the container for reporting.
#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct StatsField {
    pub call_sites: u32,
    pub headers: u32,
    pub footers: u32,
    pub ksw_count: u32,
    pub baseline_bytes: u32,
    pub header_footer_bytes: u32,
    pub call_site_bytes: u32,
    pub padding_bytes: u32,
}

impl ContainerFile {
    pub fn from_binary(bin: &InstrumentedBinary) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            block_size: bin.block_size,
            page_size: bin.page_size,
            data_size: bin.data_size,
            entry: EntryField {
                gla: bin.entry_gla,
                signature: bin.entry_signature.0,
            },
            code_hex: hex::encode(&bin.code),
            key_domains: bin
                .key_domains
                .iter()
                .map(|d| DomainField {
                    start: d.start,
                    len: d.len,
                    signature: d.signature.0,
                })
                .collect(),
            stats: Some(StatsField {
                call_sites: bin.stats.call_sites,
                headers: bin.stats.headers,
                footers: bin.stats.footers,
                ksw_count: bin.stats.ksw_count,
                baseline_bytes: bin.stats.baseline_bytes,
                header_footer_bytes: bin.stats.header_footer_bytes,
                call_site_bytes: bin.stats.call_site_bytes,
                padding_bytes: bin.stats.padding_bytes,
            }),
        }
    }

    pub fn to_container(&self) -> Result<BinaryContainer> {
        if self.format != FORMAT {
            bail!("not a {FORMAT} file (format = {:?})", self.format);
        }
        if self.version != VERSION {
            bail!("unsupported container version {}", self.version);
        }
        let code = hex::decode(&self.code_hex).context("bad code_hex")?;
        Ok(BinaryContainer {
            code,
            key_domains: self
                .key_domains
                .iter()
                .map(|d| KeyDomain {
                    start: d.start,
                    len: d.len,
                    signature: Signature(d.signature),
                })
                .collect(),
            entry_gla: self.entry.gla,
            entry_signature: Signature(self.entry.signature),
            data_size: self.data_size,
            block_size: self.block_size,
            page_size: self.page_size,
        })
    }
}

pub fn write_container(path: &Path, file: &ContainerFile) -> Result<()> {
    let json = serde_json::to_string_pretty(file)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(BinaryContainer, Option<StatsField>)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ContainerFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let container = file.to_container()?;
    Ok((container, file.stats))
}
