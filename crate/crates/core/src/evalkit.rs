//! Evaluation: SDF factor returns, Sharpe ratio, explained variation,
//! cross-sectional R², MSPE, rolling betas, predicted returns and beta-sorted
//! decile portfolios.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::featpipe::PreparedPanel;
use crate::sdfnet::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub beta_window: usize,
    pub periods_per_year: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beta_window: 60,
            periods_per_year: 12.0,
        }
    }
}

/// Values of one period keyed by asset index.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSection {
    pub period: i64,
    pub assets: Vec<usize>,
    pub values: Vec<f64>,
}

impl CrossSection {
    pub fn get(&self, asset: usize) -> Option<f64> {
        self.assets.iter().position(|&a| a == asset).map(|k| self.values[k])
    }
}

/// `F_{t+1} = Σ_i w_{t,i} R_{t+1,i}` and `M_{t+1} = 1 − F_{t+1}`, keyed by `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSeries {
    pub periods: Vec<i64>,
    pub f: Vec<f64>,
    pub m: Vec<f64>,
}

impl FactorSeries {
    pub fn from_weights(weights: &[CrossSection], returns: &[CrossSection]) -> Result<Self> {
        if weights.len() != returns.len() {
            return Err(Error::shape("factor_series", format!("{} periods", returns.len()), format!("{} periods", weights.len())));
        }
        let mut f = Vec::with_capacity(weights.len());
        for (w, r) in weights.iter().zip(returns) {
            if w.period != r.period || w.assets != r.assets {
                return Err(Error::InvalidArgument(format!(
                    "weights and returns disagree on the asset set of period {}",
                    r.period
                )));
            }
            f.push(w.values.iter().zip(&r.values).map(|(a, b)| a * b).sum());
        }
        Ok(FactorSeries {
            periods: returns.iter().map(|r| r.period).collect(),
            m: f.iter().map(|x: &f64| 1.0 - x).collect(),
            f,
        })
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }
}

/// Realized next-period returns of the given blocks.
pub fn returns_of(prep: &PreparedPanel, blocks: &[usize]) -> Vec<CrossSection> {
    blocks
        .iter()
        .map(|&b| {
            let blk = &prep.blocks()[b];
            CrossSection {
                period: blk.period,
                assets: blk.assets.clone(),
                values: blk.returns.clone(),
            }
        })
        .collect()
}

/// Model SDF weights of the given blocks, using information at `t` only.
pub fn weights_of(model: &Model, prep: &PreparedPanel, blocks: &[usize]) -> Result<Vec<CrossSection>> {
    let batch = prep.batch(blocks)?;
    let w = model.weights_of(&batch)?;
    let mut out = Vec::with_capacity(blocks.len());
    let mut k = 0;
    for &b in blocks {
        let blk = &prep.blocks()[b];
        let n = blk.assets.len();
        out.push(CrossSection {
            period: blk.period,
            assets: blk.assets.clone(),
            values: w[k..k + n].to_vec(),
        });
        k += n;
    }
    Ok(out)
}

pub fn factor_series(model: &Model, prep: &PreparedPanel, blocks: &[usize]) -> Result<FactorSeries> {
    FactorSeries::from_weights(&weights_of(model, prep, blocks)?, &returns_of(prep, blocks))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Annualized `mean / std · √periods_per_year` with the `n − 1` divisor.
pub fn sharpe(series: &[f64], periods_per_year: f64) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidArgument(format!("Sharpe ratio needs at least 2 observations, got {}", series.len())));
    }
    let mu = mean(series);
    let var = series.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (series.len() - 1) as f64;
    let scale = series.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if var.sqrt() <= 1e-12 * scale || var == 0.0 {
        return Err(Error::Numerical("Sharpe ratio of a zero-variance series".into()));
    }
    Ok(mu / var.sqrt() * periods_per_year.sqrt())
}

/// One aligned observation of realized and predicted return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub period: i64,
    pub asset: usize,
    pub actual: f64,
    pub predicted: f64,
}

fn by_period(cells: &[Cell]) -> BTreeMap<i64, Vec<&Cell>> {
    let mut m: BTreeMap<i64, Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        m.entry(c.period).or_default().push(c);
    }
    m
}

/// `1 − Σ_t (1/N_t) Σ_i (r − r̂)² / Σ_t (1/N_t) Σ_i (r − r̄_t)²`.
pub fn explained_variation(cells: &[Cell]) -> Result<f64> {
    let groups = by_period(cells);
    if !groups.values().any(|g| g.len() >= 2) {
        return Err(Error::InvalidArgument("explained variation needs a period with at least 2 assets".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for g in groups.values() {
        let n = g.len() as f64;
        let rbar = g.iter().map(|c| c.actual).sum::<f64>() / n;
        num += g.iter().map(|c| (c.actual - c.predicted).powi(2)).sum::<f64>() / n;
        den += g.iter().map(|c| (c.actual - rbar).powi(2)).sum::<f64>() / n;
    }
    if den == 0.0 {
        return Err(Error::Numerical("explained variation: zero cross-sectional variance".into()));
    }
    Ok(1.0 - num / den)
}

/// `1 − Σ_i (1/T_i)(Σ_t (r − r̂))² / Σ_i (1/T_i)(Σ_t r̂)²`.
pub fn xs_r2(cells: &[Cell]) -> Result<f64> {
    let mut per_asset: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for c in cells {
        let e = per_asset.entry(c.asset).or_insert((0.0, 0.0, 0));
        e.0 += c.actual - c.predicted;
        e.1 += c.predicted;
        e.2 += 1;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (err, pred, t) in per_asset.values() {
        num += err * err / *t as f64;
        den += pred * pred / *t as f64;
    }
    if den == 0.0 {
        return Err(Error::Numerical("cross-sectional R²: predictions sum to zero for every asset".into()));
    }
    Ok(1.0 - num / den)
}

/// Per-period mean squared error, averaged over periods.
pub fn mspe(cells: &[Cell]) -> Result<f64> {
    let groups = by_period(cells);
    if groups.is_empty() {
        return Err(Error::InvalidArgument("MSPE of an empty set".into()));
    }
    let total: f64 = groups
        .values()
        .map(|g| g.iter().map(|c| (c.actual - c.predicted).powi(2)).sum::<f64>() / g.len() as f64)
        .sum();
    Ok(total / groups.len() as f64)
}

/// Average ranks (1-based), ties share their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape("spearman", "two series of equal length ≥ 2", format!("{} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman ρ between decile index and decile mean return.
pub fn monotonicity(decile_means: &[f64]) -> Result<f64> {
    let idx: Vec<f64> = (1..=decile_means.len()).map(|i| i as f64).collect();
    spearman(&idx, decile_means)
}

/// Rolling betas keyed by decision period.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaPanel {
    pub window: usize,
    pub entries: Vec<CrossSection>,
}

fn dense(returns: &[CrossSection]) -> BTreeMap<usize, Vec<Option<f64>>> {
    let mut m: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for (j, cs) in returns.iter().enumerate() {
        for (&a, &v) in cs.assets.iter().zip(&cs.values) {
            m.entry(a).or_insert_with(|| vec![None; returns.len()])[j] = Some(v);
        }
    }
    m
}

/// Betas of each asset on `F` over the `window` realized pairs preceding
/// decision period `t` (keys `t−W .. t−1`), emitted only for assets observed
/// in all of them and present at `t`. `returns` must align with `factor`.
pub fn betas(returns: &[CrossSection], factor: &FactorSeries, window: usize) -> Result<BetaPanel> {
    if returns.len() != factor.len() || returns.iter().zip(&factor.periods).any(|(r, p)| r.period != *p) {
        return Err(Error::InvalidArgument("betas: returns and factor series are not aligned".into()));
    }
    if window < 2 {
        return Err(Error::InvalidArgument("betas: window must be at least 2".into()));
    }
    let hist = dense(returns);
    let mut entries = Vec::new();
    for j in window..returns.len() {
        let fw = &factor.f[j - window..j];
        let fbar = mean(fw);
        let var: f64 = fw.iter().map(|x| (x - fbar).powi(2)).sum();
        if var == 0.0 {
            continue;
        }
        let mut cs = CrossSection {
            period: returns[j].period,
            assets: Vec::new(),
            values: Vec::new(),
        };
        for &a in &returns[j].assets {
            let h = &hist[&a][j - window..j];
            if h.iter().any(Option::is_none) {
                continue;
            }
            let rbar = h.iter().flatten().sum::<f64>() / window as f64;
            let cov: f64 = h.iter().flatten().zip(fw).map(|(r, f)| (r - rbar) * (f - fbar)).sum();
            cs.assets.push(a);
            cs.values.push(cov / var);
        }
        entries.push(cs);
    }
    Ok(BetaPanel { window, entries })
}

/// `r̂_{t,i} = β_{t,i} × mean(F over the same trailing window)`.
pub fn predicted_returns(betas: &BetaPanel, factor: &FactorSeries) -> Result<Vec<CrossSection>> {
    let pos: BTreeMap<i64, usize> = factor.periods.iter().enumerate().map(|(j, p)| (*p, j)).collect();
    betas
        .entries
        .iter()
        .map(|cs| {
            let j = *pos
                .get(&cs.period)
                .ok_or_else(|| Error::InvalidArgument(format!("no factor history for period {}", cs.period)))?;
            if j < betas.window {
                return Err(Error::InvalidArgument(format!("period {} lacks a full window", cs.period)));
            }
            let fbar = mean(&factor.f[j - betas.window..j]);
            Ok(CrossSection {
                period: cs.period,
                assets: cs.assets.clone(),
                values: cs.values.iter().map(|b| b * fbar).collect(),
            })
        })
        .collect()
}

/// Joins realized returns with predictions on `(period, asset)`.
pub fn cells(returns: &[CrossSection], predicted: &[CrossSection]) -> Vec<Cell> {
    let by: BTreeMap<i64, &CrossSection> = returns.iter().map(|r| (r.period, r)).collect();
    let mut out = Vec::new();
    for p in predicted {
        let Some(r) = by.get(&p.period) else { continue };
        for (&a, &v) in p.assets.iter().zip(&p.values) {
            if let Some(actual) = r.get(a) {
                out.push(Cell {
                    period: p.period,
                    asset: a,
                    actual,
                    predicted: v,
                });
            }
        }
    }
    out
}

pub const N_DECILES: usize = 10;

/// Beta-sorted decile portfolios.
#[derive(Clone, Debug, PartialEq)]
pub struct DecilePortfolios {
    pub periods: Vec<i64>,
    /// `returns[d][k]`: equal-weighted return of decile `d` in `periods[k]`.
    pub returns: Vec<Vec<f64>>,
    pub cumulative: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub skipped: Vec<i64>,
}

/// Group sizes for `n` assets: `n / 10` each, the remainder going to the lowest deciles.
pub fn decile_sizes(n: usize) -> [usize; N_DECILES] {
    let mut s = [n / N_DECILES; N_DECILES];
    for x in s.iter_mut().take(n % N_DECILES) {
        *x += 1;
    }
    s
}

/// Sorts each period's assets by signal, forms ten equal-count groups and
/// averages their realized returns. Periods with fewer than ten covered
/// assets are skipped.
pub fn decile_portfolios(signal: &[CrossSection], returns: &[CrossSection]) -> Result<DecilePortfolios> {
    let by: BTreeMap<i64, &CrossSection> = returns.iter().map(|r| (r.period, r)).collect();
    let mut out = DecilePortfolios {
        periods: Vec::new(),
        returns: vec![Vec::new(); N_DECILES],
        cumulative: vec![Vec::new(); N_DECILES],
        means: vec![0.0; N_DECILES],
        skipped: Vec::new(),
    };
    for cs in signal {
        let Some(r) = by.get(&cs.period) else {
            out.skipped.push(cs.period);
            continue;
        };
        let mut pairs: Vec<(f64, usize, f64)> = cs
            .assets
            .iter()
            .zip(&cs.values)
            .filter_map(|(&a, &b)| r.get(a).map(|ret| (b, a, ret)))
            .collect();
        if pairs.len() < N_DECILES {
            out.skipped.push(cs.period);
            continue;
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut start = 0;
        for (d, size) in decile_sizes(pairs.len()).into_iter().enumerate() {
            let grp = &pairs[start..start + size];
            out.returns[d].push(grp.iter().map(|p| p.2).sum::<f64>() / size as f64);
            start += size;
        }
        out.periods.push(cs.period);
    }
    if !out.skipped.is_empty() {
        log::info!("decile portfolios: skipped {} periods with fewer than 10 covered assets", out.skipped.len());
    }
    if out.periods.is_empty() {
        return Err(Error::InvalidArgument("no period has ten assets with betas".into()));
    }
    for d in 0..N_DECILES {
        let mut acc = 1.0;
        out.cumulative[d] = out.returns[d]
            .iter()
            .map(|r| {
                acc *= 1.0 + r;
                acc - 1.0
            })
            .collect();
        out.means[d] = mean(&out.returns[d]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub config_digest: String,
    pub split: (i64, i64),
    pub n_periods: usize,
    pub sharpe: Option<f64>,
    pub ev: Option<f64>,
    pub xs_r2: Option<f64>,
    pub mspe: Option<f64>,
    pub decile_means: Vec<f64>,
    pub decile_rho: Option<f64>,
    pub baseline_equal_weight_sharpe: Option<f64>,
    pub notes: Vec<String>,
}

/// Metrics with their plot data.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub factor: FactorSeries,
    pub deciles: Option<DecilePortfolios>,
}

fn keep<T>(r: Result<T>, what: &str, notes: &mut Vec<String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    }
}

fn within(periods: &[CrossSection], range: (i64, i64)) -> Vec<CrossSection> {
    periods
        .iter()
        .filter(|c| (range.0..=range.1).contains(&c.period))
        .cloned()
        .collect()
}

/// Assembles the report for `range` from a factor series, realized returns,
/// a sorting signal and predictions. Failing metrics become notes.
pub fn assemble(
    factor: &FactorSeries,
    returns: &[CrossSection],
    signal: &[CrossSection],
    predicted: &[CrossSection],
    range: (i64, i64),
    cfg: &EvalConfig,
    config_digest: &str,
) -> Evaluation {
    let mut notes = Vec::new();
    let idx: Vec<usize> = (0..factor.len())
        .filter(|&j| (range.0..=range.1).contains(&factor.periods[j]))
        .collect();
    let factor_in = FactorSeries {
        periods: idx.iter().map(|&j| factor.periods[j]).collect(),
        f: idx.iter().map(|&j| factor.f[j]).collect(),
        m: idx.iter().map(|&j| factor.m[j]).collect(),
    };
    let returns_in = within(returns, range);
    let pred_in = within(predicted, range);
    let signal_in = within(signal, range);
    let cells = cells(&returns_in, &pred_in);
    let ew: Vec<f64> = returns_in.iter().map(|r| mean(&r.values)).collect();

    let sharpe_v = keep(sharpe(&factor_in.f, cfg.periods_per_year), "sharpe", &mut notes);
    let ev = keep(explained_variation(&cells), "ev", &mut notes);
    let xs = keep(xs_r2(&cells), "xs_r2", &mut notes);
    let ms = keep(mspe(&cells), "mspe", &mut notes);
    let base = keep(sharpe(&ew, cfg.periods_per_year), "baseline_equal_weight_sharpe", &mut notes);
    let deciles = keep(decile_portfolios(&signal_in, &returns_in), "deciles", &mut notes);
    let rho = deciles.as_ref().and_then(|d| keep(monotonicity(&d.means), "decile_rho", &mut notes));
    if returns_in.len() > signal_in.len() {
        notes.push(format!(
            "{} of {} periods lack a full beta window",
            returns_in.len() - signal_in.len(),
            returns_in.len()
        ));
    }
    Evaluation {
        report: MetricsReport {
            config_digest: config_digest.to_string(),
            split: range,
            n_periods: factor_in.len(),
            sharpe: sharpe_v,
            ev,
            xs_r2: xs,
            mspe: ms,
            decile_means: deciles.as_ref().map(|d| d.means.clone()).unwrap_or_default(),
            decile_rho: rho,
            baseline_equal_weight_sharpe: base,
            notes,
        },
        factor: factor_in,
        deciles,
    }
}

/// Evaluates weights over `range`, estimating betas from the factor history
/// (all supplied periods up to the end of the range).
pub fn evaluate_weights(
    weights: &[CrossSection],
    returns: &[CrossSection],
    range: (i64, i64),
    cfg: &EvalConfig,
    config_digest: &str,
) -> Result<Evaluation> {
    let factor = FactorSeries::from_weights(weights, returns)?;
    let b = betas(returns, &factor, cfg.beta_window)?;
    let pred = predicted_returns(&b, &factor)?;
    Ok(assemble(&factor, returns, &b.entries, &pred, range, cfg, config_digest))
}

/// Evaluates a model on `range`; earlier prepared periods serve as beta history.
pub fn evaluate_model(
    model: &Model,
    prep: &PreparedPanel,
    range: (i64, i64),
    cfg: &EvalConfig,
    config_digest: &str,
) -> Result<Evaluation> {
    let blocks: Vec<usize> = (0..prep.blocks().len())
        .filter(|&b| prep.blocks()[b].period <= range.1)
        .collect();
    let weights = weights_of(model, prep, &blocks)?;
    evaluate_weights(&weights, &returns_of(prep, &blocks), range, cfg, config_digest)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

pub fn report_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str("# evaluation report\n");
    s.push_str(&format!("config_digest = {}\n", r.config_digest));
    s.push_str(&format!("split = {}..={}\n", r.split.0, r.split.1));
    s.push_str(&format!("periods = {}\n", r.n_periods));
    s.push_str(&format!("sharpe = {}\n", opt(r.sharpe)));
    s.push_str(&format!("ev = {}\n", opt(r.ev)));
    s.push_str(&format!("xs_r2 = {}\n", opt(r.xs_r2)));
    s.push_str(&format!("mspe = {}\n", opt(r.mspe)));
    s.push_str(&format!("baseline_equal_weight_sharpe = {}\n", opt(r.baseline_equal_weight_sharpe)));
    for (d, m) in r.decile_means.iter().enumerate() {
        s.push_str(&format!("decile_{}_mean = {m}\n", d + 1));
    }
    s.push_str(&format!("decile_spearman = {}\n", opt(r.decile_rho)));
    for n in &r.notes {
        s.push_str(&format!("note = {n}\n"));
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

/// Writes `report.txt`, `factor.csv` and (when available) `deciles.csv` into `dir`.
pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.txt"), &report_text(&ev.report))?;
    let mut s = format!("# config_digest={}\nperiod,factor_return,kernel\n", ev.report.config_digest);
    for ((p, f), m) in ev.factor.periods.iter().zip(&ev.factor.f).zip(&ev.factor.m) {
        s.push_str(&format!("{p},{f},{m}\n"));
    }
    write_file(&dir.join("factor.csv"), &s)?;
    if let Some(d) = &ev.deciles {
        let mut s = format!("# config_digest={}\ndecile,period,return,cumulative\n", ev.report.config_digest);
        for k in 0..N_DECILES {
            for (j, p) in d.periods.iter().enumerate() {
                s.push_str(&format!("{},{p},{},{}\n", k + 1, d.returns[k][j], d.cumulative[k][j]));
            }
        }
        write_file(&dir.join("deciles.csv"), &s)?;
    }
    Ok(())
}
