use std::fs;
use std::path::Path;

use noisealign::metric_selection::{
    correlation_table, load_score_table, top3_frequency, CorrelationMethod, CorrelationTable,
    ScoreRow, ScoreTable,
};
use noisealign::Error;

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn parse_line(e: Error) -> u64 {
    match e {
        Error::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn score_table_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let table = ScoreTable {
        metrics: vec!["A".into(), "B, quoted".into()],
        rows: (0..6)
            .map(|i| ScoreRow {
                item_id: format!("item{i}"),
                category: if i < 3 {
                    "Color".into()
                } else {
                    "Shape".into()
                },
                human: i as f64 * 0.5,
                scores: vec![(i * i) as f64 / 7.0, -(i as f64) + 0.1],
            })
            .collect(),
    };
    let p = dir.path().join("scores.csv");
    table.write(&p).unwrap();
    assert_eq!(load_score_table(&p).unwrap(), table);
}

#[test]
fn missing_human_column_is_reported_on_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.csv", "item_id,category,CLIP\na,Color,0.3\n");
    let e = load_score_table(&p).unwrap_err();
    assert!(e.to_string().contains("human"), "{e}");
    assert_eq!(parse_line(e), 1);
}

#[test]
fn empty_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.csv", "");
    assert_eq!(parse_line(load_score_table(&p).unwrap_err()), 1);
}

#[test]
fn bad_number_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "s.csv",
        "item_id,category,human,CLIP\na,Color,0.3,0.1\nb,Color,x,0.2\n",
    );
    assert_eq!(parse_line(load_score_table(&p).unwrap_err()), 3);
}

#[test]
fn raw_scores_feed_the_top3_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("item_id,category,human,good,noisy,reversed,flat\n");
    for i in 0..8 {
        let h = i as f64;
        let noisy = if i % 2 == 0 { h + 3.0 } else { h };
        body.push_str(&format!("i{i},Color,{h},{},{noisy},{},1\n", 2.0 * h, -h));
    }
    let p = write(dir.path(), "s.csv", &body);
    let table = correlation_table(&load_score_table(&p).unwrap(), CorrelationMethod::Spearman);
    assert_eq!(table.get("Color", "good"), Some(1.0));
    assert_eq!(table.get("Color", "reversed"), Some(-1.0));
    assert!(table.get("Color", "flat").is_none());
    assert!(table
        .failures
        .contains_key(&("Color".to_string(), "flat".to_string())));

    let out = write(dir.path(), "c.csv", &table.to_csv());
    let reloaded = CorrelationTable::load(&out, CorrelationMethod::Spearman).unwrap();
    assert_eq!(reloaded.entries, table.entries);

    let report = top3_frequency(&table, &table.metrics);
    assert!(report.is_member("Color", "good"));
    assert!(report.is_member("Color", "noisy"));
    assert!(report.is_member("Color", "reversed"));
    assert!(!report.is_member("Color", "flat"));
}
