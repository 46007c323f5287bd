//! Transform properties as plain check functions, shared by the proptest
//! suite and the acceptance runner.

use advsdf_core::diffcore::{pca_fit, Tensor};
use advsdf_core::featpipe::{attend_pool, rank_normalize, AttentionParams};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub type Check = Result<(), TestCaseError>;

pub fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, cols), rows)
}

pub fn ties() -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(-5i32..5, 1..40)
}

pub fn rank_bounds_and_ties(xs: Vec<i32>) -> Check {
    let v: Vec<f64> = xs.iter().map(|x| *x as f64).collect();
    let r = rank_normalize(&v);
    prop_assert_eq!(r.len(), v.len());
    for (i, a) in r.iter().enumerate() {
        prop_assert!((-1.0..=1.0).contains(a));
        for (j, b) in r.iter().enumerate() {
            if v[i] == v[j] {
                prop_assert_eq!(a, b);
            }
            if v[i] < v[j] {
                prop_assert!(a < b);
            }
        }
    }
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    if v.len() > 1 && v.iter().filter(|x| **x == min).count() == 1 {
        // an untied minimum lands exactly on −1
        prop_assert_eq!(r.iter().cloned().fold(f64::MAX, f64::min), -1.0);
    }
    let mean: f64 = r.iter().sum::<f64>() / r.len() as f64;
    prop_assert!(mean.abs() < 1e-12);
    Ok(())
}

pub fn monotone_args() -> impl Strategy<Value = (Vec<f64>, f64, f64)> {
    (prop::collection::vec(-10.0f64..10.0, 1..40), 0.01f64..5.0, -3.0f64..3.0)
}

pub fn rank_monotone_invariance((xs, a, b): (Vec<f64>, f64, f64)) -> Check {
    let r = rank_normalize(&xs);
    let mapped: Vec<f64> = xs.iter().map(|x| (a * x + b).tanh() * 7.0 + (a * x).exp().ln_1p()).collect();
    let distinct = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s.len()
    };
    // skip draws where the map merges values in floating point
    if distinct(&xs) != distinct(&mapped) {
        return Ok(());
    }
    prop_assert_eq!(rank_normalize(&mapped), r);
    Ok(())
}

pub type AttentionCase = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

pub fn attention_args() -> impl Strategy<Value = AttentionCase> {
    (
        matrix(4, 3),
        prop::collection::vec(-1.0f64..1.0, 4),
        prop::collection::vec(-2.0f64..2.0, 4),
        (1usize..7).prop_flat_map(|k| matrix(k, 3)),
    )
}

pub fn attention_simplex_and_hull((w, b, v, e): AttentionCase) -> Check {
    let p = AttentionParams {
        w: Tensor::matrix(4, 3, w.concat()).unwrap(),
        b: Tensor::vector(b).unwrap(),
        v: Tensor::vector(v).unwrap(),
    };
    let (pooled, alpha) = attend_pool(&e, &p).unwrap().unwrap();
    prop_assert_eq!(alpha.len(), e.len());
    prop_assert!(alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for j in 0..3 {
        let lo = e.iter().map(|r| r[j]).fold(f64::MAX, f64::min);
        let hi = e.iter().map(|r| r[j]).fold(f64::MIN, f64::max);
        prop_assert!(pooled[j] >= lo - 1e-12 && pooled[j] <= hi + 1e-12);
    }
    if e.len() == 1 {
        prop_assert_eq!(&pooled, &e[0]);
    }
    Ok(())
}

pub fn pca_orthonormal_and_monotone(rows: Vec<Vec<f64>>) -> Check {
    let x = Tensor::from_rows(&rows).unwrap();
    let d = rows[0].len();
    let mut prev = f64::INFINITY;
    for k in 1..=d {
        let basis = pca_fit(&x, k).unwrap();
        let c = basis.components();
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = c.row(a).iter().zip(c.row(b)).map(|(p, q)| p * q).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-9, "k={} ({},{}) dot {}", k, a, b, dot);
            }
        }
        prop_assert!(basis.explained_variance().windows(2).all(|w| w[0] >= w[1]));
        let mut err = 0.0;
        for r in &rows {
            let back = basis.reconstruct(&basis.transform(r).unwrap()).unwrap();
            err += r.iter().zip(&back).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        }
        prop_assert!(err <= prev + 1e-9);
        prev = err;
    }
    prop_assert!(prev < 1e-9, "full-rank reconstruction error {}", prev);
    Ok(())
}

/// Runs each property over `cases` draws; returns `(name, cases, outcome)`.
pub fn run_all(cases: u32) -> Vec<(&'static str, u32, Result<(), String>)> {
    fn go<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Check) -> Result<(), String> {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        runner.run(&s, f).map_err(|e| e.to_string())
    }
    vec![
        ("rank_normalize bounds and ties", cases, go(cases, ties(), rank_bounds_and_ties)),
        ("rank_normalize monotone invariance", cases, go(cases, monotone_args(), rank_monotone_invariance)),
        ("attention simplex and convex hull", cases, go(cases, attention_args(), attention_simplex_and_hull)),
        ("pca orthonormality and reconstruction", cases, go(cases, matrix(12, 5), pca_orthonormal_and_monotone)),
    ]
}
