use fragility::config::{IngestConfig, RunConfig};
use fragility::ingest::read_index_csv;
use fragility::network::FlowNetwork;
use fragility::pipeline::{analyze, prepare};
use fragility::rolling::{snapshot, write_periods_csv};
use fragility::shock::TransmissionModel;
use fragility::synth::{generate, CoJump, SynthSpec};

fn panel(seed: u64) -> fragility::ingest::IndexPanel {
    let mut spec = SynthSpec::new(8, 500, seed);
    spec.co_jump = CoJump::Scalar(0.25);
    generate(&spec).unwrap().0
}

#[test]
fn csv_round_trip_preserves_the_panel() {
    let p = panel(3);
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let back = read_index_csv(buf.as_slice(), &IngestConfig::default()).unwrap();
    assert_eq!(back.dates(), p.dates());
    assert_eq!(back.markets(), p.markets());
    let err = (back.levels() - p.levels()).amax();
    assert!(err <= 1e-9 * p.levels().amax(), "{err}");
}

#[test]
fn analysis_is_unchanged_by_csv_round_trip() {
    let p = panel(5);
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let back = read_index_csv(buf.as_slice(), &IngestConfig::default()).unwrap();
    let cfg = RunConfig::default();
    let a = analyze(&p, &cfg).unwrap();
    let b = analyze(&back, &cfg).unwrap();
    assert_eq!(a.prepared.jumps.jumps, b.prepared.jumps.jumps);
    for (x, y) in a.series.lambdas.iter().zip(&b.series.lambdas) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn series_matches_snapshots_window_by_window() {
    let p = panel(9);
    let cfg = RunConfig {
        window: 100,
        stride: 50,
        ..RunConfig::default()
    };
    let a = analyze(&p, &cfg).unwrap();
    let jumps = &a.prepared.jumps;
    for k in 0..a.series.len() {
        let net = snapshot(jumps, a.series.window_starts[k], a.series.window_ends[k], cfg.exponents()).unwrap();
        assert_eq!(net.rows, 100);
        let model = TransmissionModel::from_network(&net, &cfg.model()).unwrap();
        assert_eq!(model.lambda, a.series.lambdas[k]);
        assert_eq!(net.total_flow(), a.series.total_flows[k]);
    }
}

#[test]
fn contributions_span_consecutive_windows() {
    let p = panel(13);
    let cfg = RunConfig {
        window: 80,
        stride: 7,
        ..RunConfig::default()
    };
    let a = analyze(&p, &cfg).unwrap();
    let s = &a.series;
    assert_eq!(s.contributions.len(), s.len() - 1);
    for (k, c) in s.contributions.iter().enumerate() {
        assert_eq!(c.d_lambda, s.lambdas[k + 1] - s.lambdas[k]);
        assert!((c.node + c.flow + c.edge + c.residual - c.d_lambda).abs() < 1e-12);
    }
}

#[test]
fn periods_csv_lists_each_period() {
    let p = panel(17);
    let a = analyze(&p, &RunConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_periods_csv(&a.periods, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("start,end,peak_lambda,mean_total_flow"));
    assert_eq!(text.lines().count(), 1 + a.periods.len());
}

#[test]
fn prepared_jumps_follow_the_cutoff() {
    let p = panel(21);
    let cfg = RunConfig::default();
    let prep = prepare(&p, &cfg).unwrap();
    let j = &prep.jumps;
    for (z, flag) in j.z.iter().zip(j.jumps.iter()) {
        assert_eq!(*flag == 1, z.abs() > cfg.cutoff);
    }
    let whole = FlowNetwork::from_jumps(j, 0..j.nrows(), cfg.exponents()).unwrap();
    assert_eq!(whole.rows, j.nrows());
}
