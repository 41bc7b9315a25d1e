//! Report rendering: run reports and campaign summaries as JSON, flat CSV
//! (one row per trial), and human-readable text.

use anyhow::Result;
use serde::Serialize;
use std::io::Write;

use cfisim_core::fault::{CampaignReport, Class, FaultKind, Landing, TrialRecord};
use cfisim_core::machine::{RunResult, RunStatus};

#[derive(Serialize)]
pub struct RunReportJson {
    pub outcome: &'static str,
    pub output: Vec<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap: Option<TrapJson>,
    pub counters: CountersJson,
    pub registers: Vec<u16>,
}

#[derive(Serialize)]
pub struct TrapJson {
    pub kind: &'static str,
    pub detail: String,
    pub pc: u16,
    pub committed: u64,
}

#[derive(Serialize)]
pub struct CountersJson {
    pub instructions: u64,
    pub ksw_executed: u64,
    pub calls: u64,
    pub returns: u64,
    pub view_switches: u64,
    pub itlb_misses: u64,
    pub dtlb_load_misses: u64,
    pub dtlb_store_misses: u64,
}

pub fn run_report(result: &RunResult) -> RunReportJson {
    let (outcome, trap) = match &result.status {
        RunStatus::Halted => ("halted", None),
        RunStatus::Timeout => ("timeout", None),
        RunStatus::Trapped(t) => (
            "trapped",
            Some(TrapJson {
                kind: t.trap.kind_name(),
                detail: t.trap.to_string(),
                pc: t.pc,
                committed: t.committed,
            }),
        ),
    };
    RunReportJson {
        outcome,
        output: result.output.clone(),
        trap,
        counters: CountersJson {
            instructions: result.counters.instructions,
            ksw_executed: result.counters.ksw_executed,
            calls: result.counters.calls,
            returns: result.counters.returns,
            view_switches: result.counters.mem.view_switches,
            itlb_misses: result.counters.mem.itlb_misses,
            dtlb_load_misses: result.counters.mem.dtlb_load_misses,
            dtlb_store_misses: result.counters.mem.dtlb_store_misses,
        },
        registers: result.regs.to_vec(),
    }
}

#[derive(Serialize)]
pub struct CampaignJson {
    pub model: &'static str,
    pub trials: u64,
    pub seed: u64,
    pub mode: String,
    pub classes: std::collections::BTreeMap<&'static str, u64>,
    pub detection_rate: f64,
    pub latency_histogram: std::collections::BTreeMap<u64, u64>,
    pub baseline_instructions: u64,
    pub total_faulted_instructions: u64,
}

pub fn campaign_json(report: &CampaignReport) -> CampaignJson {
    CampaignJson {
        model: report.model.name(),
        trials: report.trials,
        seed: report.seed,
        mode: report.mode.to_string(),
        classes: report
            .class_counts
            .iter()
            .map(|(c, n)| (c.name(), *n))
            .collect(),
        detection_rate: report.detection_rate(),
        latency_histogram: report.latency_histogram.clone(),
        baseline_instructions: report.baseline_instructions,
        total_faulted_instructions: report.total_faulted_instructions,
    }
}

fn kind_fields(kind: &FaultKind) -> (String, String) {
    match kind {
        FaultKind::PcBitflip { bit } => (String::new(), bit.to_string()),
        FaultKind::CodeBitflip { gla, bit } => (format!("{gla:#06x}"), bit.to_string()),
        FaultKind::RegBitflip {
            reg,
            bit,
            transient,
        } => (
            format!("{reg}{}", if *transient { ":transient" } else { "" }),
            bit.to_string(),
        ),
        FaultKind::CalltargetBitflip { bit } => (String::new(), bit.to_string()),
        FaultKind::EpteKeyidFlip {
            view,
            gpa_frame,
            bit,
        } => (format!("view{view}:frame{gpa_frame:#x}"), bit.to_string()),
        FaultKind::SkipInstr => (String::new(), String::new()),
    }
}

/// One row per trial: kind, location, bit, t, class, latency.
pub fn write_csv<W: Write>(mut w: W, records: &[TrialRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(&mut w);
    csv.write_record(["kind", "location", "bit", "t", "class", "latency"])?;
    for r in records {
        let (location, bit) = kind_fields(&r.spec.kind);
        csv.write_record([
            r.spec.kind.name().to_string(),
            location,
            bit,
            r.spec.trigger.to_string(),
            r.class.name().to_string(),
            r.latency.map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn campaign_summary(report: &CampaignReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "campaign: model={} trials={} seed={} mode={}\n",
        report.model.name(),
        report.trials,
        report.seed,
        report.mode
    ));
    for class in Class::ALL {
        let n = report.count(*class);
        if n > 0 {
            s.push_str(&format!("  {:<22} {n}\n", class.name()));
        }
    }
    s.push_str(&format!(
        "  detection rate        {:.4}\n",
        report.detection_rate()
    ));
    if !report.latency_histogram.is_empty() {
        s.push_str("  detection latency (instructions committed after activation):\n");
        for (lat, n) in &report.latency_histogram {
            s.push_str(&format!("    latency {lat}: {n}\n"));
        }
    }
    s
}

pub fn redirect_note(records: &[TrialRecord]) -> String {
    let fired = records.iter().filter(|r| r.redirect.is_some()).count();
    let cross = records
        .iter()
        .filter(|r| r.redirect.is_some_and(|x| x.crosses_domains()))
        .count();
    let (mut data, mut outside) = (0, 0);
    for r in records.iter().filter_map(|r| r.redirect) {
        match r.to {
            Landing::Data => data += 1,
            Landing::Outside => outside += 1,
            Landing::Code(_) => {}
        }
    }
    format!(
        "  redirects fired       {fired} (cross-domain {cross}, into data {data}, outside code {outside})\n"
    )
}
