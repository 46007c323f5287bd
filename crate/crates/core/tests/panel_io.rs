use std::path::Path;

use advsdf_core::panel::{load_embeddings, load_macro, load_panel, write_macro, write_panel};
use advsdf_core::{Error, Panel, SplitName, SplitSpec};

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn line_of(e: Error) -> Option<u64> {
    match e {
        Error::Data { line, .. } => line,
        other => panic!("expected a data error, got {other}"),
    }
}

#[test]
fn balanced_and_unbalanced_panels() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(
        dir.path(),
        "r.csv",
        "period,asset_id,excess_return_next\n1,A,0.01\n1,B,0.02\n2,A,-0.01\n2,B,0.0\n3,A,0.03\n3,B,0.01\n",
    );
    let c = write(dir.path(), "c.csv", "period,asset_id,size,value\n1,A,1,2\n1,B,3,4\n2,A,5,6\n2,B,7,8\n3,A,9,10\n3,B,11,12\n");
    let p = load_panel(&r, &c).unwrap();
    assert_eq!(p.n_periods(), 3);
    assert_eq!(p.t_i("A"), 3);
    assert_eq!(p.t_i("B"), 3);
    assert_eq!(p.char_names(), ["size", "value"]);

    let r = write(dir.path(), "r2.csv", "period,asset_id,excess_return_next\n1,A,0.01\n1,B,0.02\n2,B,0.0\n3,A,0.03\n");
    let c = write(dir.path(), "c2.csv", "period,asset_id,size\n1,A,1\n1,B,3\n2,B,7\n3,A,9\n");
    let p = load_panel(&r, &c).unwrap();
    assert_eq!(p.t_i("A"), 2);
    assert_eq!(p.n_periods(), 3);
    let total: usize = p.asset_counts().values().sum();
    assert_eq!(total, p.n_observations());
    for (k, (_, obs)) in p.by_period().enumerate() {
        assert_eq!(obs.len(), p.n_assets_in(k));
    }
}

#[test]
fn rows_without_a_return_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(dir.path(), "r.csv", "period,asset_id,excess_return_next\n1,A,0.01\n1,B,\n2,A,0.02\n");
    let c = write(dir.path(), "c.csv", "period,asset_id,x\n1,A,1\n1,B,2\n2,A,3\n2,C,4\n");
    let p = load_panel(&r, &c).unwrap();
    assert_eq!(p.n_observations(), 2);
}

#[test]
fn schema_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.csv", "period,asset_id,x\n1,A,1\n");
    let dup = write(dir.path(), "dup.csv", "period,asset_id,excess_return_next\n1,A,0.01\n2,A,0.01\n1,A,0.02\n");
    assert_eq!(line_of(load_panel(&dup, &c).unwrap_err()), Some(4));
    let bad = write(dir.path(), "bad.csv", "period,asset_id,excess_return_next\n1,A,abc\n");
    let e = load_panel(&bad, &c).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(line_of(e), Some(2));
    let hdr = write(dir.path(), "hdr.csv", "t,asset_id,excess_return_next\n1,A,0.01\n");
    assert_eq!(line_of(load_panel(&hdr, &c).unwrap_err()), Some(1));
    let missing = load_panel(&dir.path().join("nope.csv"), &c).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn embeddings_are_grouped_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "e.csv",
        "dim=2\nperiod,asset_id,sentence_index,v_1,v_2\n5,A,2,0.3,0.3\n5,A,0,0.1,0.1\n5,A,1,0.2,0.2\n6,B,0,1,2\n",
    );
    let e = load_embeddings(&p).unwrap();
    assert_eq!(e.dim(), 2);
    assert_eq!(e.get(5, "A"), &[vec![0.1, 0.1], vec![0.2, 0.2], vec![0.3, 0.3]]);
    assert_eq!(e.get(6, "B").len(), 1);
    assert!(e.get(7, "A").is_empty());

    let bad = write(dir.path(), "bad.csv", "dim=2\n5,A,0,0.1\n");
    assert_eq!(line_of(load_embeddings(&bad).unwrap_err()), Some(2));
    let nohdr = write(dir.path(), "nohdr.csv", "5,A,0,0.1,0.2\n");
    assert!(load_embeddings(&nohdr).is_err());
}

#[test]
fn panel_and_macro_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(
        dir.path(),
        "r.csv",
        "period,asset_id,excess_return_next\n1,A,0.1234567890123\n2,A,-1e-9\n2,B,3.5\n",
    );
    let c = write(dir.path(), "c.csv", "period,asset_id,x,y\n1,A,0.5,\n2,A,1.5,2\n2,B,,3\n");
    let p = load_panel(&r, &c).unwrap();
    let (r2, c2) = (dir.path().join("r2.csv"), dir.path().join("c2.csv"));
    write_panel(&p, &r2, &c2).unwrap();
    let q = load_panel(&r2, &c2).unwrap();
    assert_eq!(p, q);
    assert_eq!(q.observations()[2].characteristics, vec![None, Some(3.0)]);

    let m = write(dir.path(), "m.csv", "period,infl,term\n0,0.1,0.2\n1,0.3,0.4\n2,0.5,0.6\n");
    let ms = load_macro(&m).unwrap();
    assert_eq!(ms.get(1), Some(&[0.3, 0.4][..]));
    assert_eq!(ms.window(2, 1).unwrap(), vec![&[0.3, 0.4][..], &[0.5, 0.6][..]]);
    assert!(ms.window(1, 2).is_none());
    let m2 = dir.path().join("m2.csv");
    write_macro(&ms, &m2).unwrap();
    assert_eq!(load_macro(&m2).unwrap(), ms);
    let gap = write(dir.path(), "gap.csv", "period,infl\n0,0.1\n2,0.3\n");
    assert!(load_macro(&gap).is_err());
}

fn panel_over(periods: std::ops::RangeInclusive<i64>) -> Panel {
    let obs = periods
        .map(|t| advsdf_core::panel::AssetObservation {
            period: t,
            asset_id: "A".into(),
            excess_return_next: t as f64,
            characteristics: vec![Some(0.0)],
        })
        .collect();
    Panel::new(vec!["x".into()], obs).unwrap()
}

#[test]
fn splits_partition_with_closed_intervals() {
    let p = panel_over(1..=10);
    let spec = SplitSpec::new((1, 6), (7, 8), (9, 10)).unwrap();
    let (a, b, c) = p.split(&spec).unwrap();
    assert_eq!((a.n_periods(), b.n_periods(), c.n_periods()), (6, 2, 2));
    assert_eq!(a.periods().last(), Some(&6));
    assert_eq!(spec.range(SplitName::Val), (7, 8));
    assert!(SplitSpec::new((1, 6), (8, 7), (9, 10)).is_err());
    assert!(SplitSpec::new((1, 6), (6, 8), (9, 10)).is_err());
    assert!(SplitSpec::parse("train_start=1\ntrain_end=6\nval_start=7\nval_end=8\ntest_start=9\ntest_end=10\n", "s").is_ok());
    assert!(SplitSpec::parse("train_start=1\n", "s").is_err());
}
