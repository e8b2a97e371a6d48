use std::fs;
use std::path::Path;

use dimmpim_core::sim::{run_simulation, Policy, RunMetrics, RunOptions};
use dimmpim_core::trace::{synth_trace, DOLPHIN};
use dimmpim_core::SimConfig;
use dimmpim_sim::config_io::{config_to_toml, load_config, parse_config, save_config};
use dimmpim_sim::dump::{pim_trace, placement_dump, predictor_window, relayout_dump};
use dimmpim_sim::report::{normalize, read_summaries, report, Format, Summary};
use dimmpim_sim::sweep::{grid, sweep};
use dimmpim_sim::trace_io::{load_trace, parse_trace, save_trace};
use dimmpim_sim::IoError;

fn runs() -> Vec<RunMetrics> {
    let t = synth_trace(6, &DOLPHIN, 3).unwrap();
    let cfg = SimConfig::dgx_gpt175b();
    [Policy::L3, Policy::GpuOnly]
        .into_iter()
        .map(|p| run_simulation(&t, &cfg, p, RunOptions { keep_reports: false, ..Default::default() }).unwrap().metrics)
        .collect()
}

#[test]
fn config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let mut cfg = SimConfig::dgx_gpt175b();
    cfg.scheduler.window = 256;
    save_config(&cfg, &path).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_keys_and_versions() {
    let text = config_to_toml(&SimConfig::dgx_gpt175b());
    let p = Path::new("x.toml");
    let unknown = text.replace("[model]\n", "[model]\nbogus = 1\n");
    assert!(matches!(parse_config(&unknown, p), Err(IoError::Toml { .. })));
    let version = text.replace("version = 1", "version = 9");
    assert!(matches!(parse_config(&version, p), Err(IoError::Sim(_))));
    let bad = text.replace("chunk_granularity = 16", "chunk_granularity = 0");
    assert!(parse_config(&bad, p).is_err());
}

#[test]
fn trace_errors_carry_line_numbers() {
    let p = Path::new("t.jsonl");
    let ok = "{\"id\":0,\"input_len\":5,\"output_len\":3}\n\n{\"id\":1,\"input_len\":2,\"output_len\":1,\"arrival\":0.5}\n";
    let t = parse_trace(ok, p).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.records[1].arrival, 0.5);
    let zero = "{\"id\":0,\"input_len\":5,\"output_len\":3}\n{\"id\":1,\"input_len\":2,\"output_len\":0}\n";
    assert!(matches!(parse_trace(zero, p), Err(IoError::Line { line: 2, .. })));
    let junk = "{\"id\":0,\"input_len\":5,\"output_len\":3}\n{\"id\":1,\n";
    assert!(matches!(parse_trace(junk, p), Err(IoError::Line { line: 2, .. })));
    let neg = "{\"id\":0,\"input_len\":5,\"output_len\":3,\"arrival\":-1}\n";
    assert!(matches!(parse_trace(neg, p), Err(IoError::Line { line: 1, .. })));
}

#[test]
fn trace_sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let t = synth_trace(200, &DOLPHIN, 1).unwrap();
    save_trace(&t, &path).unwrap();
    assert_eq!(load_trace(&path, None, 0).unwrap().records, t.records);
    let a = load_trace(&path, Some(20), 9).unwrap();
    let b = load_trace(&path, Some(20), 9).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.len(), 20);
    assert_ne!(load_trace(&path, Some(20), 10).unwrap().records, a.records);
}

#[test]
fn csv_and_json_hold_identical_values() {
    let runs = runs();
    let dir = tempfile::tempdir().unwrap();
    let csv = report(&runs, &dir.path().join("c"), Format::Csv, "gpu_only").unwrap();
    let json = report(&runs, &dir.path().join("j"), Format::Json, "gpu_only").unwrap();
    let a = read_summaries(&csv[0], Format::Csv).unwrap();
    let b = read_summaries(&json[0], Format::Json).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert_eq!(a[0], Summary::from(&runs[0]));
}

#[test]
fn normalization_against_named_baseline() {
    let runs = runs();
    let rows = normalize(&runs, "gpu-only");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].normalized, Some(1.0));
    let want = runs[0].throughput_tps / runs[1].throughput_tps;
    assert!((rows[0].normalized.unwrap() - want).abs() < 1e-12);
}

#[test]
fn missing_baseline_reports_absolute_values() {
    let runs = runs();
    let rows = normalize(&runs, "cpu_offload");
    assert!(rows.iter().all(|r| r.normalized.is_none()));
    assert_eq!(rows[0].throughput_tps, runs[0].throughput_tps);
    let dir = tempfile::tempdir().unwrap();
    let files = report(&runs, dir.path(), Format::Csv, "cpu_offload").unwrap();
    let text = fs::read_to_string(&files[1]).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn unwritable_report_path_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("f");
    fs::write(&file, "x").unwrap();
    assert!(matches!(report(&runs(), &file.join("sub"), Format::Json, "l3"), Err(IoError::Io { .. })));
}

#[test]
fn dumps_have_expected_shape() {
    let dump = relayout_dump(64, 8, 16, 2).unwrap();
    assert_eq!(dump.lines().filter(|l| l.starts_with("chip")).count(), 16);
    assert_ne!(dump.lines().nth(1), dump.lines().nth(10));

    let cfg = SimConfig::dgx_gpt175b();
    let mut out = Vec::new();
    placement_dump(&cfg, 1, 2, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let m = &cfg.model;
    // header + per (layer, head, token): one K span and one V span per burst
    assert_eq!(text.lines().count(), 1 + (m.layers * m.heads) as usize * 2 * 5);

    let mut out = Vec::new();
    pim_trace(&cfg, 64, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("cycle,cmd,bank,row"));
    assert!(text.lines().skip(1).all(|l| ["ACT", "RD", "PRE"].contains(&l.split(',').nth(1).unwrap())));
}

#[test]
fn predictor_window_dump() {
    let t = synth_trace(8, &DOLPHIN, 2).unwrap();
    let out = run_simulation(&t, &SimConfig::dgx_gpt175b(), Policy::L3, RunOptions::default()).unwrap();
    let mut buf = Vec::new();
    predictor_window(out.predictor.as_ref().unwrap(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().skip(1).any(|l| l.starts_with("pim,")));
}

#[test]
fn sweep_runs_every_point() {
    let t = synth_trace(4, &DOLPHIN, 5).unwrap();
    let points = grid(&[2, 4], &[None, Some(1 << 40)], &[Policy::L3]);
    assert_eq!(points.len(), 4);
    let res = sweep(&t, &SimConfig::dgx_gpt175b(), &points, RunOptions { keep_reports: false, ..Default::default() }, 2);
    assert_eq!(res.len(), 4);
    for (pt, r) in res {
        let m = r.unwrap();
        assert!(m.trace.ends_with(&pt.label()));
        assert_eq!(m.completed, 4);
    }
}
