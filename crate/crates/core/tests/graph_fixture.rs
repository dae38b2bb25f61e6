use std::path::{Path, PathBuf};

use vlnaug_core::action_predictor::TurnLabel;
use vlnaug_core::jsonl;
use vlnaug_core::navgraph_metrics::{derive_actions, evaluate_batch, EvalRecord, NavGraph};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn grid_fixture_metrics() {
    let graph = NavGraph::load(&fixtures().join("graph.json")).unwrap();
    assert_eq!(graph.len(), 9);
    let records: Vec<EvalRecord> = jsonl::read_records(&fixtures().join("eval_batch.jsonl")).unwrap();
    let (results, summary) = evaluate_batch(&graph, &records);
    let got: Vec<(u8, f64, f64)> = results.iter().map(|r| (r.tc, r.spd, r.sed)).collect();
    // e2 ends next to the goal with edit distance 2 over length 4; e3 ends
    // three hops away; e4 stops one short with edit distance 1
    assert_eq!(got, vec![(1, 0.0, 1.0), (1, 1.0, 0.5), (0, 3.0, 0.0), (1, 1.0, 0.75)]);
    assert_eq!((summary.tc, summary.spd, summary.sed), (0.75, 1.25, 0.5625));
}

#[test]
fn gold_actions_from_headings() {
    use TurnLabel::*;
    let graph = NavGraph::load(&fixtures().join("graph.json")).unwrap();
    let gold: Vec<String> = ["n00", "n01", "n02", "n12"].iter().map(|s| s.to_string()).collect();
    // headings 0 -> 90 -> 90 -> 270: +90, 0, +180
    assert_eq!(derive_actions(&graph, &gold, 45.0).unwrap(), vec![Right, Forward, Right, Stop]);
}

#[test]
fn malformed_graph_reports_line() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    std::io::Write::write_all(&mut f, b"{\n\"nodes\": [\n{\"id\": \"a\"}\n],\n\"edges\": []\n}\n").unwrap();
    match NavGraph::load(f.path()) {
        Err(vlnaug_core::Error::Parse { line, .. }) => assert!(line >= 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
