//! From-scratch scalar metric references: nested loops over raw rows.

use advsdf_core::evalkit::{explained_variation, mspe, sharpe, spearman, xs_r2, Cell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random unbalanced panel: `(period, asset, actual, predicted)` rows.
pub fn random_cells(rng: &mut ChaCha8Rng) -> Vec<Cell> {
    let n_periods = rng.random_range(2..30);
    let n_assets = rng.random_range(2..25);
    let mut out = Vec::new();
    for t in 0..n_periods {
        for a in 0..n_assets {
            if rng.random_bool(0.8) {
                out.push(Cell {
                    period: t,
                    asset: a,
                    actual: rng.random_range(-0.2..0.2),
                    predicted: rng.random_range(-0.1..0.1),
                });
            }
        }
    }
    // guarantee one period with at least two assets
    for a in 0..2 {
        if !out.iter().any(|c| c.period == 0 && c.asset == a) {
            out.push(Cell {
                period: 0,
                asset: a,
                actual: rng.random_range(-0.2..0.2),
                predicted: rng.random_range(-0.1..0.1),
            });
        }
    }
    out
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

pub fn ref_sharpe(x: &[f64], ppy: f64) -> f64 {
    let n = x.len() as f64;
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    let m = s / n;
    let mut ss = 0.0;
    for v in x {
        ss += (v - m).powi(2);
    }
    m / (ss / (n - 1.0)).sqrt() * ppy.sqrt()
}

fn periods_of(c: &[Cell]) -> Vec<i64> {
    let mut p: Vec<i64> = c.iter().map(|c| c.period).collect();
    p.sort();
    p.dedup();
    p
}

pub fn ref_ev(c: &[Cell]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for t in periods_of(c) {
        let rows: Vec<&Cell> = c.iter().filter(|x| x.period == t).collect();
        let n = rows.len() as f64;
        let mut mean = 0.0;
        for r in &rows {
            mean += r.actual / n;
        }
        for r in &rows {
            num += (r.actual - r.predicted).powi(2) / n;
            den += (r.actual - mean).powi(2) / n;
        }
    }
    1.0 - num / den
}

pub fn ref_xs_r2(c: &[Cell]) -> f64 {
    let mut assets: Vec<usize> = c.iter().map(|c| c.asset).collect();
    assets.sort();
    assets.dedup();
    let (mut num, mut den) = (0.0, 0.0);
    for a in assets {
        let rows: Vec<&Cell> = c.iter().filter(|x| x.asset == a).collect();
        let t = rows.len() as f64;
        let e: f64 = rows.iter().map(|r| r.actual - r.predicted).sum();
        let p: f64 = rows.iter().map(|r| r.predicted).sum();
        num += e * e / t;
        den += p * p / t;
    }
    1.0 - num / den
}

pub fn ref_mspe(c: &[Cell]) -> f64 {
    let ps = periods_of(c);
    let mut tot = 0.0;
    for t in &ps {
        let rows: Vec<&Cell> = c.iter().filter(|x| x.period == *t).collect();
        tot += rows.iter().map(|r| (r.actual - r.predicted).powi(2)).sum::<f64>() / rows.len() as f64;
    }
    tot / ps.len() as f64
}

/// Quadratic-time average ranks, then Pearson correlation.
pub fn ref_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Compares every metric with its reference on `panels` random panels;
/// returns the first mismatch.
pub fn check_random_panels(panels: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..panels {
        let c = random_cells(&mut rng);
        let pairs = [
            ("ev", explained_variation(&c).unwrap(), ref_ev(&c)),
            ("xs_r2", xs_r2(&c).unwrap(), ref_xs_r2(&c)),
            ("mspe", mspe(&c).unwrap(), ref_mspe(&c)),
        ];
        for (name, got, want) in pairs {
            if !close(got, want) {
                return Err(format!("panel {k}: {name} {got} vs {want}"));
            }
        }
        let series: Vec<f64> = (0..rng.random_range(3..200)).map(|_| rng.random_range(-0.1..0.12)).collect();
        let (got, want) = (sharpe(&series, 12.0).unwrap(), ref_sharpe(&series, 12.0));
        if !close(got, want) {
            return Err(format!("panel {k}: sharpe {got} vs {want}"));
        }
        // coarse values force ties
        let n = rng.random_range(2..40);
        let x: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8)) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (got, want) = (spearman(&x, &y).unwrap(), ref_spearman(&x, &y));
        let ok = if want.is_nan() { got == 0.0 } else { close(got, want) };
        if !ok {
            return Err(format!("panel {k}: spearman {got} vs {want}"));
        }
    }
    Ok(())
}
