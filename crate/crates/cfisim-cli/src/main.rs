//! Command-line front end: assemble and instrument programs into containers,
//! run them on the simulated machine, and drive fault-injection campaigns.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 the simulated
//! run trapped, 3 internal invariant violation.

mod container;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;

use cfisim_core::asm::assemble;
use cfisim_core::config::{BuildConfig, Mode, RunConfig};
use cfisim_core::crypto::MasterSecret;
use cfisim_core::fault::{
    baseline_profile, classify, enumerate_or_sample, run_trial, CampaignReport, FaultModel,
    TrialRecord,
};
use cfisim_core::instrument::{instrument, lay_out_baseline, InstrumentError};
use cfisim_core::loader::{load, BinaryContainer};
use cfisim_core::machine::RunStatus;

#[derive(Parser)]
#[command(
    name = "cfisim",
    version,
    about = "Toy-ISA simulator for encryption-enforced control-flow integrity under fault injection"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble and instrument a program into a binary container.
    Build(BuildCmd),
    /// Load a container and run it to completion.
    Run(RunCmd),
    /// Run a fault-injection campaign against a container.
    Campaign(CampaignCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Aliasing,
    Keyreg,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Aliasing => Mode::Aliasing,
            ModeArg::Keyreg => Mode::KeyReg,
        }
    }
}

/// Optional config file named by CFISIM_CONFIG; flags take precedence.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    sig_low: Option<u16>,
    sig_high: Option<u16>,
    block_size: Option<u16>,
    page_size: Option<u16>,
    protected_views: Option<u16>,
    itlb: Option<usize>,
    dtlb: Option<usize>,
    mode: Option<String>,
    integrity: Option<bool>,
    encrypted_view_entries: Option<bool>,
    master_secret: Option<String>,
    key_id_capacity: Option<u32>,
    seed: Option<u64>,
    max_steps: Option<u64>,
}

fn file_config() -> Result<FileConfig> {
    match std::env::var_os("CFISIM_CONFIG") {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading config {}", Path::new(&path).display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", Path::new(&path).display()))
        }
    }
}

#[derive(Args)]
struct BuildCmd {
    /// Assembly source file.
    input: PathBuf,
    /// Output container path.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Lowest assignable signature (view indices 0..=2 are reserved).
    #[arg(long)]
    sig_low: Option<u16>,
    /// Highest assignable signature.
    #[arg(long)]
    sig_high: Option<u16>,
    /// Encryption-block alignment in bytes.
    #[arg(long)]
    block_size: Option<u16>,
    #[arg(long)]
    page_size: Option<u16>,
    /// Lay the program out sequentially with no instrumentation (the
    /// unprotected baseline).
    #[arg(long)]
    no_instrument: bool,
    /// Instrument without call headers/footers: the weak shared-key layout.
    #[arg(long)]
    no_headers: bool,
    /// Allow calls without a declared target set through the default view.
    #[arg(long)]
    external_default: bool,
    /// Emit the instrumentation report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunOpts {
    #[arg(long, value_enum, default_value = "aliasing")]
    mode: ModeArg,
    /// Number of protected views beyond the three reserved ones.
    #[arg(long)]
    protected_views: Option<u16>,
    /// Instruction-TLB capacity.
    #[arg(long)]
    itlb: Option<usize>,
    /// Data-TLB capacity.
    #[arg(long)]
    dtlb: Option<usize>,
    /// Trap deterministically on any wrong-key fetch.
    #[arg(long)]
    integrity: bool,
    /// Store view entries encrypted (key-id flips garble whole entries).
    #[arg(long)]
    encrypted_view_entries: bool,
    /// 64 hex chars of master key material; derived from the seed if absent.
    #[arg(long)]
    master_secret: Option<String>,
    #[arg(long)]
    key_id_capacity: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
}

impl RunOpts {
    fn to_config(&self, file: &FileConfig, mode_given: bool) -> Result<(RunConfig, u64)> {
        let defaults = RunConfig::default();
        let seed = self.seed.or(file.seed).unwrap_or(0);
        let secret_hex = self.master_secret.clone().or_else(|| file.master_secret.clone());
        let master_secret = match secret_hex {
            Some(hexstr) => {
                let bytes = hex::decode(hexstr.trim()).context("bad --master-secret hex")?;
                let arr: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| anyhow!("--master-secret must be 32 bytes of hex"))?;
                arr
            }
            None => MasterSecret::from_seed(seed).into_bytes(),
        };
        let mode = if mode_given {
            self.mode.into()
        } else {
            match file.mode.as_deref() {
                Some("aliasing") => Mode::Aliasing,
                Some("keyreg") => Mode::KeyReg,
                Some(other) => bail!("config file mode `{other}` unknown"),
                None => self.mode.into(),
            }
        };
        let cfg = RunConfig {
            protected_views: self
                .protected_views
                .or(file.protected_views)
                .unwrap_or(defaults.protected_views),
            itlb_entries: self.itlb.or(file.itlb).unwrap_or(defaults.itlb_entries),
            dtlb_entries: self.dtlb.or(file.dtlb).unwrap_or(defaults.dtlb_entries),
            mode,
            integrity: self.integrity || file.integrity.unwrap_or(false),
            encrypted_view_entries: self.encrypted_view_entries
                || file.encrypted_view_entries.unwrap_or(false),
            master_secret,
            key_id_capacity: self
                .key_id_capacity
                .or(file.key_id_capacity)
                .unwrap_or(defaults.key_id_capacity),
            seed,
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        let max_steps = self.max_steps.or(file.max_steps).unwrap_or(100_000);
        Ok((cfg, max_steps))
    }
}

#[derive(Args)]
struct RunCmd {
    /// Container file produced by `build`.
    container: PathBuf,
    #[command(flatten)]
    opts: RunOpts,
    /// Print the full run report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CampaignCmd {
    /// Container file produced by `build`.
    container: PathBuf,
    /// Fault model: pc, code, reg, calltarget, epte, or skip.
    #[arg(long)]
    model: String,
    /// Trials to sample (the space is enumerated exactly when smaller).
    #[arg(long, default_value_t = 1000)]
    n: u64,
    #[command(flatten)]
    opts: RunOpts,
    /// Write one CSV row per trial to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the aggregated report as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also run the same campaign against an uninstrumented baseline
    /// container and print the defense delta.
    #[arg(long)]
    compare_uninstrumented: Option<PathBuf>,
    /// Worker threads for trials (default sequential).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn cmd_build(cmd: &BuildCmd, file: &FileConfig) -> Result<u8> {
    let source = std::fs::read_to_string(&cmd.input)
        .with_context(|| format!("reading {}", cmd.input.display()))?;
    let program = assemble(&source)
        .map_err(|e| anyhow!("{}: {e}", cmd.input.display()))?;
    let defaults = BuildConfig::default();
    let cfg = BuildConfig {
        sig_low: cmd.sig_low.or(file.sig_low).unwrap_or(defaults.sig_low),
        sig_high: cmd.sig_high.or(file.sig_high).unwrap_or(defaults.sig_high),
        block_size: cmd
            .block_size
            .or(file.block_size)
            .unwrap_or(defaults.block_size),
        page_size: cmd
            .page_size
            .or(file.page_size)
            .unwrap_or(defaults.page_size),
        headers: !cmd.no_headers,
        external_default: cmd.external_default,
        seed: cmd.seed.or(file.seed).unwrap_or(0),
    };
    let bin = if cmd.no_instrument {
        lay_out_baseline(&program, &cfg)
    } else {
        instrument(&program, &cfg)
    };
    let bin = match bin {
        Ok(b) => b,
        Err(e @ InstrumentError::InconsistentKeyFlow { .. }) => {
            eprintln!("internal error: {e}");
            return Ok(3);
        }
        Err(e) => return Err(anyhow!("{e}")),
    };
    container::write_container(&cmd.output, &container::ContainerFile::from_binary(&bin))?;

    let s = &bin.stats;
    if cmd.json {
        let json = serde_json::json!({
            "output": cmd.output.display().to_string(),
            "code_bytes": bin.code.len(),
            "baseline_bytes": s.baseline_bytes,
            "overhead_bytes": s.overhead_bytes(),
            "overhead_percent": overhead_percent(s.baseline_bytes, bin.code.len()),
            "call_sites": s.call_sites,
            "headers": s.headers,
            "footers": s.footers,
            "ksw_count": s.ksw_count,
            "breakdown": {
                "header_footer_bytes": s.header_footer_bytes,
                "call_site_bytes": s.call_site_bytes,
                "padding_bytes": s.padding_bytes,
            },
            "key_domains": bin.key_domains.len(),
            "note": "counter model - not wall-clock",
        });
        println!("{}", serde_json::to_string_pretty(&json)?);
    } else {
        println!("wrote {}", cmd.output.display());
        println!("  code size        {} bytes", bin.code.len());
        println!("  baseline size    {} bytes", s.baseline_bytes);
        println!(
            "  size overhead    {} bytes ({:.2}%)",
            s.overhead_bytes(),
            overhead_percent(s.baseline_bytes, bin.code.len())
        );
        println!(
            "  breakdown        headers/footers {} + call sites {} + padding {}",
            s.header_footer_bytes, s.call_site_bytes, s.padding_bytes
        );
        println!("  call sites       {}", s.call_sites);
        println!("  headers          {}", s.headers);
        println!("  footers          {}", s.footers);
        println!("  key switches     {} (static)", s.ksw_count);
        println!("  key domains      {}", bin.key_domains.len());
        println!("  (counter model - not wall-clock)");
    }
    Ok(0)
}

fn overhead_percent(baseline: u32, total: usize) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        (total as f64 - baseline as f64) / baseline as f64 * 100.0
    }
}

fn cmd_run(cmd: &RunCmd, file: &FileConfig, mode_given: bool) -> Result<u8> {
    let (container, _) = container::read_container(&cmd.container)?;
    let (cfg, max_steps) = cmd.opts.to_config(file, mode_given)?;
    let (mut machine, _) = load(&container, &cfg).map_err(|e| anyhow!("{e}"))?;
    let result = machine.run(max_steps);
    if cmd.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report::run_report(&result))?
        );
    } else {
        for v in &result.output {
            println!("{v}");
        }
        let c = &result.counters;
        eprintln!(
            "[{} after {} instructions; ksw {}, view switches {}, iTLB misses {}, dTLB load misses {}, dTLB store misses {}]",
            match &result.status {
                RunStatus::Halted => "halted".to_string(),
                RunStatus::Timeout => "timeout".to_string(),
                RunStatus::Trapped(t) => format!("trapped: {}", t.trap),
            },
            c.instructions,
            c.ksw_executed,
            c.mem.view_switches,
            c.mem.itlb_misses,
            c.mem.dtlb_load_misses,
            c.mem.dtlb_store_misses,
        );
    }
    Ok(match result.status {
        RunStatus::Trapped(_) => 2,
        _ => 0,
    })
}

/// Campaign loop, optionally fanned out over worker threads. Trials are
/// independent and merged in sample order, so the report is bit-identical
/// regardless of parallelism.
fn campaign(
    container: &BinaryContainer,
    cfg: &RunConfig,
    model: FaultModel,
    n: u64,
    seed: u64,
    max_steps: u64,
    jobs: usize,
) -> Result<CampaignReport> {
    let baseline = baseline_profile(container, cfg, max_steps).map_err(|e| anyhow!("{e}"))?;
    let specs = enumerate_or_sample(model, &baseline, n, seed).map_err(|e| anyhow!("{e}"))?;

    let trial = |(i, spec): (usize, &cfisim_core::fault::FaultSpec)| -> (TrialRecord, u64) {
        let (result, latency, redirect) = run_trial(container, cfg, &baseline, spec, max_steps);
        let class = classify(&baseline.result, &result);
        let record = TrialRecord {
            index: i as u64,
            spec: *spec,
            class,
            latency: if class.is_detected() { latency } else { None },
            redirect,
        };
        (record, result.counters.instructions)
    };
    let outcomes: Vec<(TrialRecord, u64)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .context("building worker pool")?;
        pool.install(|| specs.par_iter().enumerate().map(trial).collect())
    } else {
        specs.iter().enumerate().map(trial).collect()
    };

    let mut class_counts = BTreeMap::new();
    let mut latency_histogram = BTreeMap::new();
    let mut total_faulted_instructions = 0;
    let mut records = Vec::with_capacity(outcomes.len());
    for (r, instructions) in outcomes {
        *class_counts.entry(r.class).or_insert(0) += 1;
        if let Some(l) = r.latency {
            *latency_histogram.entry(l).or_insert(0) += 1;
        }
        total_faulted_instructions += instructions;
        records.push(r);
    }
    Ok(CampaignReport {
        model,
        trials: records.len() as u64,
        seed,
        mode: cfg.mode,
        class_counts,
        latency_histogram,
        records,
        baseline_instructions: baseline.dynamic_len,
        total_faulted_instructions,
    })
}

fn cmd_campaign(cmd: &CampaignCmd, file: &FileConfig, mode_given: bool) -> Result<u8> {
    let model = FaultModel::parse(&cmd.model)
        .ok_or_else(|| anyhow!("unknown fault model `{}`", cmd.model))?;
    let (container, _) = container::read_container(&cmd.container)?;
    let (cfg, max_steps) = cmd.opts.to_config(file, mode_given)?;
    let report = campaign(
        &container,
        &cfg,
        model,
        cmd.n,
        cmd.opts.seed.or(file.seed).unwrap_or(0),
        max_steps,
        cmd.jobs,
    )?;

    print!("{}", report::campaign_summary(&report));
    if model == FaultModel::Calltarget {
        print!("{}", report::redirect_note(&report.records));
    }
    if let Some(path) = &cmd.csv {
        let f = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        report::write_csv(f, &report.records)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &cmd.json {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report::campaign_json(&report))?,
        )?;
        println!("wrote {}", path.display());
    }

    if let Some(baseline_path) = &cmd.compare_uninstrumented {
        let (base_container, _) = container::read_container(baseline_path)?;
        let base_report = campaign(
            &base_container,
            &cfg,
            model,
            cmd.n,
            cmd.opts.seed.or(file.seed).unwrap_or(0),
            max_steps,
            cmd.jobs,
        )?;
        println!("--- uninstrumented baseline ---");
        print!("{}", report::campaign_summary(&base_report));
        println!(
            "defense delta: detection {:.4} (protected) vs {:.4} (baseline), diff {:+.4}",
            report.detection_rate(),
            base_report.detection_rate(),
            report.detection_rate() - base_report.detection_rate()
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let file = match file_config() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    // Whether --mode appeared literally (flag beats config file).
    let mode_given = std::env::args().any(|a| a == "--mode" || a.starts_with("--mode="));
    let result = match &cli.cmd {
        Cmd::Build(cmd) => cmd_build(cmd, &file),
        Cmd::Run(cmd) => cmd_run(cmd, &file, mode_given),
        Cmd::Campaign(cmd) => cmd_campaign(cmd, &file, mode_given),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
