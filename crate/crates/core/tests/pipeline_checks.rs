//! End-to-end data-pipeline checks: ingestion conservation, synthetic
//! moment recovery, graph-construction edge cases, and tensor file
//! round-trips.

use std::io::Write;

use chrono::{TimeZone, Utc};
use odcast::data::{
    build_adjacency, ingest_trips, load_tensor, load_truth, make_windows, save_tensor,
    save_truth, split_chronological, synth_generate, AdjacencyMode, DataError, SyntheticSpec,
};

#[test]
fn ingestion_conserves_every_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trips.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "origin_zone,dest_zone,timestamp").unwrap();
    // 60 trips scattered over 2 days at 15-minute resolution.
    for i in 0..60u32 {
        let o = ["a", "b"][(i % 2) as usize];
        let d = ["a", "b", "c"][(i % 3) as usize];
        let minute = (i * 37) % (2 * 24 * 60);
        let ts = Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap()
            + chrono::Duration::minutes(i64::from(minute));
        writeln!(f, "{o},{d},{}", ts.to_rfc3339()).unwrap();
    }
    drop(f);

    let zones = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let period = (
        Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap(),
        Utc.with_ymd_and_hms(2024, 5, 3, 0, 0, 0).unwrap(),
    );
    let tensor = ingest_trips(&path, &zones, 15, period).unwrap();
    assert_eq!(tensor.num_pairs(), 9); // 3×3 including self-pairs
    assert_eq!(tensor.num_windows(), 2 * 24 * 4);
    assert_eq!(tensor.total_trips(), 60);
}

#[test]
fn out_of_period_rows_are_rejected_not_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trips.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "origin_zone,dest_zone,timestamp").unwrap();
    writeln!(f, "a,b,2024-05-01T00:10:00Z").unwrap();
    writeln!(f, "a,b,2024-06-01T00:00:00Z").unwrap(); // outside
    drop(f);
    let zones = vec!["a".to_string(), "b".to_string()];
    let period = (
        Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap(),
        Utc.with_ymd_and_hms(2024, 5, 2, 0, 0, 0).unwrap(),
    );
    let err = ingest_trips(&path, &zones, 15, period).unwrap_err();
    assert!(matches!(err, DataError::OutOfPeriod { line: 3, .. }), "{err}");
}

#[test]
fn synthetic_mean_matches_request_within_sampling_error() {
    let spec = SyntheticSpec::uniform(2, 2, 2000, 1.5, 1.0, 1.5, 99);
    let (tensor, truth) = synth_generate(&spec).unwrap();
    assert_eq!(truth.num_pairs, 4);
    // Counts are rounded compound draws; rounding keeps the mean within a
    // few percent, and with T=2000 the standard error of each pair mean is
    // √(φμ^ρ/T) ≈ 0.030, so a ±4 SE + rounding-bias budget of 0.15 is safe.
    for pair in 0..tensor.num_pairs() {
        let mean = tensor.series(pair).iter().map(|&c| c as f64).sum::<f64>() / 2000.0;
        assert!((mean - 1.5).abs() < 0.15, "pair {pair} mean {mean}");
    }
}

#[test]
fn correlation_threshold_one_yields_no_edges() {
    // Independent noise never reaches correlation 1.0 (strict threshold).
    let spec = SyntheticSpec::uniform(2, 2, 300, 2.0, 1.0, 1.5, 5);
    let (tensor, _) = synth_generate(&spec).unwrap();
    let err = build_adjacency(&tensor, AdjacencyMode::DemandCorrelation { threshold: 1.0 })
        .unwrap_err();
    assert!(matches!(err, DataError::EmptyGraph), "{err}");
}

#[test]
fn shared_endpoint_graph_has_row_stochastic_transitions() {
    let spec = SyntheticSpec::uniform(2, 3, 50, 1.0, 1.0, 1.5, 1);
    let (tensor, _) = synth_generate(&spec).unwrap();
    let graph = build_adjacency(&tensor, AdjacencyMode::SharedEndpoint).unwrap();
    let v = graph.num_pairs();
    for i in 0..v {
        let row: f64 = (0..v).map(|j| graph.forward_transition()[i * v + j]).sum();
        assert!((row - 1.0).abs() < 1e-12 || row == 0.0, "row {i} sums to {row}");
    }
}

#[test]
fn chronological_split_has_no_overlap_and_windows_stay_inside() {
    let spec = SyntheticSpec::uniform(2, 2, 100, 1.0, 1.0, 1.5, 3);
    let (tensor, _) = synth_generate(&spec).unwrap();
    let (train, val, test) = split_chronological(&tensor).unwrap();
    assert_eq!(train.num_windows(), 60);
    assert_eq!(val.num_windows(), 10);
    assert_eq!(test.num_windows(), 30);
    // Boundary times are strictly increasing across splits.
    assert!(train.window_start(59) < val.window_start(0));
    assert!(val.window_start(9) < test.window_start(0));
    // Window supervision never crosses a split edge: with t=8, k=1 a
    // 10-window validation split yields exactly 2 windows.
    let windows = make_windows(&val, 8, 1).unwrap();
    assert_eq!(windows.len(), 2);
}

#[test]
fn tensor_and_truth_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::uniform(2, 2, 40, 1.2, 0.8, 1.6, 17);
    let (tensor, truth) = synth_generate(&spec).unwrap();

    let tensor_path = dir.path().join("demand.json");
    save_tensor(&tensor, &tensor_path).unwrap();
    let tensor2 = load_tensor(&tensor_path).unwrap();
    assert_eq!(tensor, tensor2);

    let truth_path = dir.path().join("truth.json");
    save_truth(&truth, &truth_path).unwrap();
    let truth2 = load_truth(&truth_path).unwrap();
    assert_eq!(truth, truth2);
}
