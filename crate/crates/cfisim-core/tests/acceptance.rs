//! Acceptance suite: one test per acceptance criterion, each printing a
//! pass/fail line with the measured numbers (run with `--nocapture` to see
//! them).

use cfisim_core::asm::assemble;
use cfisim_core::config::{BuildConfig, Mode, RunConfig};
use cfisim_core::fault::{
    baseline_profile, classify, run_campaign, Class, FaultModel, Landing,
};
use cfisim_core::instrument::{instrument, lay_out_baseline, InstrumentedBinary};
use cfisim_core::isa::{decode, valid_encoding_density, Opcode, Reg};
use cfisim_core::loader::{load, BinaryContainer};
use cfisim_core::machine::{RunResult, RunStatus, Trap};
use cfisim_core::rng::DetRng;

const MAX_STEPS: u64 = 100_000;

const CORPUS: &[(&str, &str)] = &[
    ("arith", include_str!("corpus/arith.asm")),
    ("loop_sum", include_str!("corpus/loop_sum.asm")),
    ("call_once", include_str!("corpus/call_once.asm")),
    ("two_callees", include_str!("corpus/two_callees.asm")),
    ("shared_callee", include_str!("corpus/shared_callee.asm")),
    ("indirect2", include_str!("corpus/indirect2.asm")),
    ("indirect3", include_str!("corpus/indirect3.asm")),
    ("recursion", include_str!("corpus/recursion.asm")),
    ("multi_return", include_str!("corpus/multi_return.asm")),
    ("nested_calls", include_str!("corpus/nested_calls.asm")),
    ("call_in_loop", include_str!("corpus/call_in_loop.asm")),
    ("mixed", include_str!("corpus/mixed.asm")),
    ("det_two_domain", include_str!("corpus/det_two_domain.asm")),
    ("skip_control", include_str!("corpus/skip_control.asm")),
];

fn build_cfg(seed: u64) -> BuildConfig {
    BuildConfig {
        seed,
        ..BuildConfig::default()
    }
}

fn build(src: &str, seed: u64) -> InstrumentedBinary {
    instrument(&assemble(src).unwrap(), &build_cfg(seed)).unwrap()
}

fn build_weak(src: &str, seed: u64) -> InstrumentedBinary {
    let cfg = BuildConfig {
        headers: false,
        ..build_cfg(seed)
    };
    instrument(&assemble(src).unwrap(), &cfg).unwrap()
}

fn build_baseline(src: &str) -> InstrumentedBinary {
    lay_out_baseline(&assemble(src).unwrap(), &build_cfg(0)).unwrap()
}

fn run(bin: &InstrumentedBinary, cfg: &RunConfig) -> RunResult {
    let (mut m, _) = load(&BinaryContainer::from(bin), cfg).unwrap();
    m.run(MAX_STEPS)
}

fn binomial_3sigma(p: f64, n: u64) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn criterion_1_transparency() {
    let cfg = RunConfig::default();
    for (name, src) in CORPUS {
        let base = run(&build_baseline(src), &cfg);
        let inst = run(&build(src, 42), &cfg);
        assert_eq!(
            base.status,
            RunStatus::Halted,
            "{name}: baseline must halt"
        );
        assert_eq!(
            inst.status,
            RunStatus::Halted,
            "{name}: instrumented run must halt"
        );
        assert_eq!(base.output, inst.output, "{name}: output log differs");
        assert_eq!(
            base.regs[..13],
            inst.regs[..13],
            "{name}: r0-r12 differ"
        );
        assert!(!base.output.is_empty(), "{name}: corpus programs must output");
    }
    println!(
        "criterion 1 (transparency): PASS - {} programs, logs and r0-r12 identical",
        CORPUS.len()
    );
}

#[test]
fn criterion_2_key_flow_soundness() {
    let cfg = RunConfig::default();
    let mut checked = 0u64;
    for (name, src) in CORPUS {
        let bin = build(src, 7);
        let container = BinaryContainer::from(&bin);
        let (mut m, _) = load(&container, &cfg).unwrap();
        loop {
            if m.halted {
                break;
            }
            let sig_before = m.sig();
            match m.step() {
                Ok(ev) => {
                    if ev.instr.opcode == Opcode::Ksw {
                        let next = ev.pc + 4;
                        let dom = bin
                            .domain_of(next)
                            .unwrap_or_else(|| panic!("{name}: no domain after KSW at {next:#x}"));
                        assert_eq!(
                            dom.signature.0, sig_before,
                            "{name}: dynamic signature {sig_before} vs static domain {} after KSW at {:#x}",
                            dom.signature.0, ev.pc
                        );
                        checked += 1;
                    }
                }
                Err(t) => panic!("{name}: unexpected trap {t:?}"),
            }
            if m.counters.instructions > MAX_STEPS {
                panic!("{name}: runaway");
            }
        }
    }
    println!(
        "criterion 2 (key-flow soundness): PASS - {checked} dynamic key switches matched their static domains"
    );
}

#[test]
fn criterion_3_detection_statistics() {
    // Analytic density, cross-checked by a 10^6-sample Monte-Carlo oracle.
    let density = valid_encoding_density();
    let d = density.as_f64();
    let mut rng = DetRng::new(0xD0);
    let samples = 1_000_000u64;
    let mut hits = 0u64;
    for _ in 0..samples {
        let mut b = [0u8; 4];
        rng.fill_bytes(&mut b);
        if decode(b).is_ok() {
            hits += 1;
        }
    }
    let mc = hits as f64 / samples as f64;
    let tol = binomial_3sigma(d, samples);
    assert!(
        (mc - d).abs() <= tol,
        "Monte-Carlo {mc:.6} vs analytic {d:.6} (tol {tol:.6})"
    );

    // Shared-key two-domain build; call-target campaign.
    let bin = build_weak(include_str!("corpus/det_two_domain.asm"), 21);
    assert_eq!(
        bin.key_domains
            .iter()
            .map(|kd| kd.signature)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        2,
        "fixture must have exactly two key domains"
    );
    let container = BinaryContainer::from(&bin);
    let cfg = RunConfig::default();
    let report = run_campaign(&container, &cfg, FaultModel::Calltarget, 1000, 7, MAX_STEPS).unwrap();
    assert!(report.trials >= 500, "fault space too small: {}", report.trials);

    let cross: Vec<_> = report
        .records
        .iter()
        .filter(|r| r.redirect.is_some_and(|red| red.crosses_domains()))
        .collect();
    let n_cross = cross.len() as u64;
    assert!(
        n_cross >= 50,
        "need a meaningful cross-domain sample, got {n_cross}"
    );
    let detected = cross.iter().filter(|r| r.class.is_detected()).count() as u64;
    let rate = detected as f64 / n_cross as f64;
    let bound = 1.0 - d - binomial_3sigma(d, n_cross);
    assert!(
        rate >= bound,
        "cross-domain detection {rate:.4} below 1-d-3sigma = {bound:.4} (n={n_cross})"
    );

    let late = cross
        .iter()
        .filter(|r| r.latency.is_some_and(|l| l >= 3))
        .count() as f64;
    let p_late = late / n_cross as f64;
    let d3 = d * d * d;
    let late_bound = d3 + binomial_3sigma(d3, n_cross);
    assert!(
        p_late <= late_bound,
        "P(latency >= 3) = {p_late:.6} above d^3+3sigma = {late_bound:.6}"
    );
    println!(
        "criterion 3 (detection statistics): PASS - d={d:.6} (MC {mc:.6}), cross-domain trials {n_cross}, detection {rate:.4} >= {bound:.4}, P(latency>=3) {p_late:.6} <= {late_bound:.6}"
    );
}

/// Runs the shared-callee program up to the first committed instruction of
/// b's body, rewrites the stacked return address to the other caller's
/// return site, and reports what happens.
fn wrong_caller_return(bin: &InstrumentedBinary, cfg: &RunConfig) -> (RunResult, u64) {
    let container = BinaryContainer::from(bin);
    let (mut m, _) = load(&container, cfg).unwrap();
    let b_body = bin.body_glas["b"];
    loop {
        let ev = m.step().expect("clean run until tamper point");
        if ev.pc == b_body {
            break;
        }
        assert!(m.counters.instructions < MAX_STEPS);
    }
    // Stack top holds the return address into a's call site; retarget it to
    // c's (the wrong caller's) return point.
    let c_site = bin
        .sites
        .iter()
        .find(|s| s.caller == "c")
        .expect("c calls b");
    let sp = m.regs[Reg::SP.index() as usize];
    m.write_word(sp, c_site.return_gla).unwrap();

    // Count instructions committed after the tampered return fires.
    let mut after_ret: Option<u64> = None;
    let status = loop {
        if m.halted {
            break RunStatus::Halted;
        }
        if m.counters.instructions >= MAX_STEPS {
            break RunStatus::Timeout;
        }
        match m.step() {
            Ok(ev) => {
                if ev.instr.opcode == Opcode::Ret && after_ret.is_none() {
                    after_ret = Some(m.counters.instructions);
                }
            }
            Err(t) => break RunStatus::Trapped(t),
        }
    };
    let committed_after_ret = match (&status, after_ret) {
        (RunStatus::Trapped(t), Some(at)) => t.committed - at,
        (_, Some(_)) => u64::MAX, // did not trap
        _ => u64::MAX,
    };
    let result = RunResult {
        status,
        output: m.output.clone(),
        counters: m.counters,
        regs: m.regs,
    };
    (result, committed_after_ret)
}

#[test]
fn criterion_4_multi_call_target_protection() {
    let src = include_str!("corpus/shared_callee.asm");
    let cfg = RunConfig::default();

    // Protected build: per-edge headers and return constants.
    let bin = build(src, 4);
    let (result, committed_after_ret) = wrong_caller_return(&bin, &cfg);
    let trap = match &result.status {
        RunStatus::Trapped(t) => t,
        other => panic!("protected build must trap on a wrong-caller return, got {other:?}"),
    };
    assert!(
        matches!(trap.trap, Trap::Decode { .. } | Trap::ViewIndex { .. }),
        "unexpected trap kind {:?}",
        trap.trap
    );
    assert!(
        committed_after_ret < 3,
        "wrong-caller instructions committed: {committed_after_ret}"
    );

    // Shared-key build (headers disabled): the same redirection silently
    // executes the wrong caller's continuation.
    let weak = build_weak(src, 4);
    let weak_baseline = run(&weak, &cfg);
    let (weak_result, _) = wrong_caller_return(&weak, &cfg);
    assert_eq!(
        classify(&weak_baseline, &weak_result),
        Class::SilentCorruption,
        "weak build should reach silent corruption, got {:?} with output {:?}",
        weak_result.status,
        weak_result.output
    );
    println!(
        "criterion 4 (multi-call-target protection): PASS - protected build trapped ({}) after {committed_after_ret} wrong-caller instructions; shared-key build reached SILENT_CORRUPTION",
        trap.trap.kind_name()
    );
}

#[test]
fn criterion_5_mode_trend() {
    let aliasing = RunConfig::default();
    let keyreg = RunConfig {
        mode: Mode::KeyReg,
        ..RunConfig::default()
    };
    let mut tlb_compared = 0;
    for (name, src) in CORPUS {
        let bin = build(src, 13);
        let a = run(&bin, &aliasing);
        let k = run(&bin, &keyreg);
        assert_eq!(a.status, RunStatus::Halted, "{name}: aliasing run");
        assert_eq!(k.status, RunStatus::Halted, "{name}: keyreg run");
        assert_eq!(a.output, k.output, "{name}: outputs differ across modes");
        assert_eq!(k.counters.mem.view_switches, 0, "{name}: keyreg switches");
        if bin.stats.call_sites >= 2 {
            assert!(
                k.counters.mem.total_tlb_misses() < a.counters.mem.total_tlb_misses(),
                "{name}: keyreg TLB misses {} not strictly below aliasing {}",
                k.counters.mem.total_tlb_misses(),
                a.counters.mem.total_tlb_misses()
            );
            tlb_compared += 1;
        }
    }

    // Paired campaign: identical fault specs, identical classes, per trial.
    let bin = build(include_str!("corpus/shared_callee.asm"), 13);
    let container = BinaryContainer::from(&bin);
    let mut compared = 0;
    for model in [FaultModel::Pc, FaultModel::Calltarget] {
        let ra = run_campaign(&container, &aliasing, model, 500, 77, MAX_STEPS).unwrap();
        let rk = run_campaign(&container, &keyreg, model, 500, 77, MAX_STEPS).unwrap();
        assert_eq!(ra.trials, rk.trials);
        for (ta, tk) in ra.records.iter().zip(rk.records.iter()) {
            assert_eq!(ta.spec, tk.spec, "paired campaigns must share fault specs");
            assert_eq!(
                ta.class, tk.class,
                "model {model}: trial {} class differs: {:?} vs {:?} (spec {:?})",
                ta.index, ta.class, tk.class, ta.spec
            );
            compared += 1;
        }
    }
    println!(
        "criterion 5 (mode trend): PASS - identical logs in both modes, 0 view switches in keyreg, strictly fewer TLB misses on {tlb_compared} multi-call programs, {compared} paired trials class-identical"
    );
}

#[test]
fn criterion_6_counter_formulas() {
    for (name, src) in CORPUS {
        let bin = build(src, 99);
        let base = build_baseline(src);
        let s = &bin.stats;
        // Static key-switch formula, checked against the actual opcodes.
        let ksws = bin
            .code
            .chunks_exact(4)
            .filter(|c| c[0] == Opcode::Ksw.byte())
            .count() as u32;
        assert_eq!(
            s.ksw_count,
            2 * s.call_sites + s.headers + s.footers,
            "{name}: KSW formula"
        );
        assert_eq!(s.ksw_count, ksws, "{name}: formula vs opcode count");
        // Size strictly grows with any call, and the overhead breakdown is
        // exact.
        if s.call_sites > 0 {
            assert!(
                bin.code.len() > base.code.len(),
                "{name}: instrumented size must exceed baseline"
            );
        }
        assert_eq!(
            s.baseline_bytes + s.header_footer_bytes + s.call_site_bytes + s.padding_bytes,
            bin.code.len() as u32,
            "{name}: overhead breakdown must sum to the total"
        );
    }
    println!(
        "criterion 6 (counter formulas): PASS - KSW = 2*sites + headers + footers and byte breakdown exact on {} programs",
        CORPUS.len()
    );
}

#[test]
fn criterion_7_crypto_oracle() {
    use cfisim_core::crypto::{CryptoEngine, KeyId, MasterSecret};

    // Round trip over 10^4 random (key, tweak, block) triples.
    let mut rng = DetRng::new(0x70C);
    let mut engine = CryptoEngine::new(MasterSecret::from_seed(5), 1 << 15);
    for _ in 0..10_000 {
        let kid = KeyId(rng.range_u32(0, (1 << 15) - 1) as u16);
        let tweak = rng.next_u64();
        let mut block = [0u8; 16];
        rng.fill_bytes(&mut block);
        let ct = engine.encrypt_block(kid, tweak, block);
        assert_eq!(engine.decrypt_block(kid, tweak, ct), block);
    }

    // Wrong-key decode-success rate over 10^5 slots matches the density.
    let d = valid_encoding_density().as_f64();
    let slots = 100_000u64;
    let mut hits = 0u64;
    for i in 0..slots / 4 {
        // Realistic plaintext: four valid instruction words.
        let mut block = [0u8; 16];
        for s in 0..4 {
            let instr = random_valid_instruction(&mut rng);
            block[s * 4..s * 4 + 4].copy_from_slice(&instr);
        }
        let ct = engine.encrypt_block(KeyId(1), i, block);
        let wrong = engine.decrypt_block(KeyId(2), i, ct);
        for s in 0..4 {
            let bytes: [u8; 4] = wrong[s * 4..s * 4 + 4].try_into().unwrap();
            if decode(bytes).is_ok() {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / slots as f64;
    let tol = binomial_3sigma(d, slots);
    assert!(
        (rate - d).abs() <= tol,
        "wrong-key decode rate {rate:.6} vs density {d:.6} (tol {tol:.6})"
    );
    println!(
        "criterion 7 (crypto oracle): PASS - 10^4 round trips exact, wrong-key decode rate {rate:.6} within 3 sigma of {d:.6}"
    );
}

fn random_valid_instruction(rng: &mut DetRng) -> [u8; 4] {
    loop {
        let mut b = [0u8; 4];
        rng.fill_bytes(&mut b);
        b[0] = (rng.next_u32() % 17) as u8; // valid opcode byte
        if decode(b).is_ok() {
            return b;
        }
    }
}

#[test]
fn criterion_8_skip_model_out_of_scope() {
    let src = include_str!("corpus/skip_control.asm");
    let cfg = RunConfig::default();
    let inst = BinaryContainer::from(&build(src, 31));
    let base = BinaryContainer::from(&build_baseline(src));
    let n = 500;
    let ri = run_campaign(&inst, &cfg, FaultModel::Skip, n, 3, MAX_STEPS).unwrap();
    let rb = run_campaign(&base, &cfg, FaultModel::Skip, n, 3, MAX_STEPS).unwrap();
    let pi = ri.detection_rate();
    let pb = rb.detection_rate();
    let pooled = (ri.detected() + rb.detected()) as f64 / (ri.trials + rb.trials) as f64;
    let sigma = (pooled * (1.0 - pooled) * (1.0 / ri.trials as f64 + 1.0 / rb.trials as f64))
        .sqrt();
    let diff = (pi - pb).abs();
    assert!(
        diff <= 3.0 * sigma.max(1e-9),
        "skip detection difference {diff:.4} exceeds 3 sigma = {:.4} (instrumented {pi:.4}, baseline {pb:.4})",
        3.0 * sigma
    );
    println!(
        "criterion 8 (intra-function skips out of scope): PASS - detection instrumented {pi:.4} vs baseline {pb:.4}, difference {diff:.4} within 3 sigma ({:.4})",
        3.0 * sigma
    );
}

#[test]
fn defense_delta_on_cross_graph_models() {
    // Companion check to criteria 3 and 8: for fault models that redirect
    // control flow across the call graph, the instrumented build detects
    // strictly more than the unprotected baseline.
    let src = include_str!("corpus/det_two_domain.asm");
    let cfg = RunConfig::default();
    let inst = BinaryContainer::from(&build(src, 5));
    let base = BinaryContainer::from(&build_baseline(src));
    for model in [FaultModel::Calltarget, FaultModel::Pc] {
        let ri = run_campaign(&inst, &cfg, model, 600, 11, MAX_STEPS).unwrap();
        let rb = run_campaign(&base, &cfg, model, 600, 11, MAX_STEPS).unwrap();
        assert!(
            ri.detection_rate() > rb.detection_rate(),
            "model {model}: instrumented {:.4} not above baseline {:.4}",
            ri.detection_rate(),
            rb.detection_rate()
        );
        // The baseline lets a larger fraction of faults through unnoticed.
        let through = |r: &cfisim_core::fault::CampaignReport| {
            (r.count(Class::SilentCorruption) + r.count(Class::Benign)) as f64 / r.trials as f64
        };
        assert!(
            through(&rb) > through(&ri),
            "model {model}: baseline should pass more faults through ({:.4} vs {:.4})",
            through(&rb),
            through(&ri)
        );
    }
    println!("defense delta: PASS - instrumented detection strictly above baseline for calltarget and pc models");
}

#[test]
fn report_landing_classification_is_complete() {
    // Every redirected call target is classified as code, data, or unmapped.
    let bin = build_weak(include_str!("corpus/det_two_domain.asm"), 21);
    let container = BinaryContainer::from(&bin);
    let cfg = RunConfig::default();
    let report = run_campaign(&container, &cfg, FaultModel::Calltarget, 300, 9, MAX_STEPS).unwrap();
    let fired = report.records.iter().filter(|r| r.redirect.is_some()).count();
    assert!(fired > 0);
    for r in report.records.iter().filter_map(|r| r.redirect) {
        match r.to {
            Landing::Code(_) | Landing::Data | Landing::Outside => {}
        }
    }
    // The baseline profile is reproducible.
    let p1 = baseline_profile(&container, &cfg, MAX_STEPS).unwrap();
    let p2 = baseline_profile(&container, &cfg, MAX_STEPS).unwrap();
    assert_eq!(p1.dynamic_len, p2.dynamic_len);
}
