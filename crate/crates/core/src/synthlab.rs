//! Synthetic panels with a planted pricing kernel.
//!
//! Returns follow a one-factor conditional model
//! `R_{t+1,i} = s_{t,i}(λ_t + f_{t+1}) + σ_ε ε_{t+1,i}` where the loading
//! `s_{t,i}` is the planted signal. With `b = Σ_i s²`, `A = σ_ε² + σ_f² b`,
//! `λ_t = S √(A/b)` and `κ_t = λ_t / (A (1 + S²))`, the kernel
//! `M* = 1 − Σ_i κ_t s_{t,i} R_{t+1,i}` prices every asset exactly in
//! conditional expectation and its factor has per-period Sharpe ratio `S`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::evalkit::{self, CrossSection, EvalConfig, Evaluation, FactorSeries};
use crate::featpipe::{rank_normalize, FeatureConfig};
use crate::panel::{write_embeddings, write_macro, write_panel, AssetObservation, EmbeddingSet, MacroSeries, Panel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalChannel {
    /// Linear in ranked characteristics.
    Firm,
    /// Proportional to the standardized text latent.
    News,
    /// Macro state times the first ranked characteristic.
    Macro,
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_periods: usize,
    pub first_period: i64,
    pub d_f: usize,
    pub d_macro: usize,
    pub d_emb: usize,
    pub news_min: usize,
    pub news_max: usize,
    pub channel: SignalChannel,
    pub firm_coefs: Vec<f64>,
    pub news_coef: f64,
    pub macro_coef: f64,
    /// Idiosyncratic volatility `σ_ε`.
    pub noise_std: f64,
    /// `σ_f / σ_ε`.
    pub factor_ratio: f64,
    /// Per-period Sharpe ratio `S` of the planted factor.
    pub sharpe: f64,
    /// AR(1) coefficient of characteristics and the text latent.
    pub persistence: f64,
    pub macro_persistence: f64,
    pub news_noise: f64,
    pub topics: usize,
    pub topic_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_assets: 50,
            n_periods: 362,
            first_period: 0,
            d_f: 4,
            d_macro: 2,
            d_emb: 16,
            news_min: 1,
            news_max: 3,
            channel: SignalChannel::Firm,
            firm_coefs: vec![0.5, -0.3],
            news_coef: 0.5,
            macro_coef: 0.5,
            noise_std: 0.02,
            factor_ratio: 2.5,
            sharpe: 2.5,
            persistence: 0.95,
            macro_persistence: 0.9,
            news_noise: 0.3,
            topics: 3,
            topic_scale: 0.5,
        }
    }
}

impl SynthConfig {
    /// Static characteristics, so beta ranks are stable through time.
    pub fn monotone() -> Self {
        SynthConfig {
            persistence: 1.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_assets == 0 || self.n_periods == 0 || self.d_f == 0 || self.d_macro == 0 || self.d_emb == 0 {
            return bad("synthetic dimensions (assets, periods, chars, macro, embedding) must be ≥ 1".into());
        }
        if self.news_min > self.news_max {
            return bad(format!("synth_news_min {} exceeds synth_news_max {}", self.news_min, self.news_max));
        }
        if self.firm_coefs.len() > self.d_f {
            return bad(format!(
                "synth_firm_coefs has {} entries for {} characteristics",
                self.firm_coefs.len(),
                self.d_f
            ));
        }
        let finite = [
            self.news_coef,
            self.macro_coef,
            self.noise_std,
            self.factor_ratio,
            self.sharpe,
            self.news_noise,
            self.topic_scale,
        ];
        if finite.iter().chain(&self.firm_coefs).any(|v| !v.is_finite()) {
            return bad("synthetic coefficients must be finite".into());
        }
        if self.noise_std < 0.0 || self.factor_ratio < 0.0 || self.news_noise < 0.0 || self.topic_scale < 0.0 {
            return bad("synthetic noise scales must be ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.persistence) || !(0.0..1.0).contains(&self.macro_persistence) {
            return bad("synth_persistence must lie in [0, 1] and synth_macro_persistence in [0, 1)".into());
        }
        Ok(())
    }

    /// Rejects feature settings the generated data cannot support.
    pub fn check_features(&self, f: &FeatureConfig) -> Result<()> {
        if f.d_n > self.d_emb {
            return Err(Error::Config(format!(
                "d_N = {} exceeds the synthetic embedding dimension {}",
                f.d_n, self.d_emb
            )));
        }
        if f.window_k >= self.n_periods {
            return Err(Error::Config(format!(
                "window_K = {} leaves no usable period out of {}",
                f.window_k, self.n_periods
            )));
        }
        Ok(())
    }
}

/// Ground truth of one period, indexed like `Oracle::asset_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePeriod {
    pub period: i64,
    pub weights: Vec<f64>,
    /// Exact regression betas of each asset on the planted factor.
    pub betas: Vec<f64>,
    pub expected: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    pub asset_ids: Vec<String>,
    pub periods: Vec<OraclePeriod>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub panel: Panel,
    pub macro_series: MacroSeries,
    pub embeddings: EmbeddingSet,
    pub oracle: Oracle,
    /// Text latent `ℓ[t][i]` as injected into the embeddings (cross-sectionally standardized).
    pub latent: Vec<Vec<f64>>,
    /// Planted loading `s[t][i]`.
    pub signal: Vec<Vec<f64>>,
    /// `σ_ε` and `σ_f` actually used.
    pub sigma_eps: f64,
    pub sigma_f: f64,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn ar1<R: Rng + ?Sized>(rng: &mut R, prev: Option<f64>, rho: f64) -> f64 {
    match prev {
        None => normal(rng),
        Some(p) => rho * p + (1.0 - rho * rho).sqrt() * normal(rng),
    }
}

fn zscore(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - m) / sd).collect()
}

/// Planted risk price `λ` and kernel scale `κ` for loadings with `b = Σ s²`.
pub fn calibrate(b: f64, sigma_eps: f64, sigma_f: f64, sharpe: f64) -> (f64, f64) {
    let a = sigma_eps * sigma_eps + sigma_f * sigma_f * b;
    if a == 0.0 {
        return (0.0, 1.0);
    }
    if b == 0.0 {
        return (0.0, 0.0);
    }
    let lambda = sharpe * (a / b).sqrt();
    (lambda, lambda / (a * (1.0 + sharpe * sharpe)))
}

/// Draws a dataset. The same `(cfg, seed)` always gives identical output.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = crate::substream(seed, "synth");
    let (n, t_len) = (cfg.n_assets, cfg.n_periods);
    let sigma_eps = cfg.noise_std;
    let sigma_f = cfg.factor_ratio * cfg.noise_std;

    let asset_ids: Vec<String> = (0..n).map(|i| format!("A{i:03}")).collect();
    let char_names: Vec<String> = (1..=cfg.d_f).map(|j| format!("c{j}")).collect();
    let macro_names: Vec<String> = (1..=cfg.d_macro).map(|j| format!("m{j}")).collect();

    let topic_dirs: Vec<Vec<f64>> = (0..cfg.topics).map(|_| unit(&mut rng, cfg.d_emb)).collect();
    let signal_dir = unit(&mut rng, cfg.d_emb);

    let mut raw: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_len);
    let mut latent: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut macro_vals: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let prev = t.checked_sub(1);
        let r: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..cfg.d_f)
                    .map(|j| ar1(&mut rng, prev.map(|p| raw[p][i][j]), cfg.persistence))
                    .collect()
            })
            .collect();
        raw.push(r);
        let l: Vec<f64> = (0..n)
            .map(|i| ar1(&mut rng, prev.map(|p| latent[p][i]), cfg.persistence))
            .collect();
        latent.push(l);
        let m: Vec<f64> = (0..cfg.d_macro)
            .map(|j| ar1(&mut rng, prev.map(|p| macro_vals[p][j]), cfg.macro_persistence))
            .collect();
        macro_vals.push(m);
    }

    let mut observations = Vec::with_capacity(n * t_len);
    let mut embeddings = EmbeddingSet::new(cfg.d_emb);
    let mut oracle_periods = Vec::with_capacity(t_len);
    let mut signals = Vec::with_capacity(t_len);
    let mut injected: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let period = cfg.first_period + t as i64;
        let ranked: Vec<Vec<f64>> = (0..cfg.d_f)
            .map(|j| rank_normalize(&raw[t].iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect();
        let firm: Vec<f64> = (0..n)
            .map(|i| cfg.firm_coefs.iter().enumerate().map(|(j, c)| c * ranked[j][i]).sum())
            .collect();
        let z = zscore(&latent[t]);
        injected.push(z.clone());
        let news: Vec<f64> = z.iter().map(|v| cfg.news_coef * v).collect();
        let mac: Vec<f64> = (0..n).map(|i| cfg.macro_coef * macro_vals[t][0] * ranked[0][i]).collect();
        let s: Vec<f64> = match cfg.channel {
            SignalChannel::Firm => firm,
            SignalChannel::News => news,
            SignalChannel::Macro => mac,
            SignalChannel::Mixed => (0..n).map(|i| firm[i] + news[i] + mac[i]).collect(),
        };
        let b: f64 = s.iter().map(|x| x * x).sum();
        let (lambda, kappa) = calibrate(b, sigma_eps, sigma_f, cfg.sharpe);
        let f = sigma_f * normal(&mut rng);
        for i in 0..n {
            let ret = s[i] * (lambda + f) + sigma_eps * normal(&mut rng);
            observations.push(AssetObservation {
                period,
                asset_id: asset_ids[i].clone(),
                excess_return_next: ret,
                characteristics: raw[t][i].iter().map(|v| Some(*v)).collect(),
            });
            let k = rng.random_range(cfg.news_min..=cfg.news_max);
            for _ in 0..k {
                let mut e: Vec<f64> = signal_dir.iter().map(|u| z[i] * u).collect();
                for dir in &topic_dirs {
                    let c = cfg.topic_scale * normal(&mut rng);
                    for (x, u) in e.iter_mut().zip(dir) {
                        *x += c * u;
                    }
                }
                for x in e.iter_mut() {
                    *x += cfg.news_noise * normal(&mut rng);
                }
                embeddings.push(period, &asset_ids[i], e)?;
            }
        }
        let beta_scale = if kappa * b != 0.0 { 1.0 / (kappa * b) } else { 0.0 };
        oracle_periods.push(OraclePeriod {
            period,
            weights: s.iter().map(|x| kappa * x).collect(),
            betas: s.iter().map(|x| x * beta_scale).collect(),
            expected: s.iter().map(|x| x * lambda).collect(),
        });
        signals.push(s);
    }
    Ok(SynthData {
        panel: Panel::new(char_names, observations)?,
        macro_series: MacroSeries::new(macro_names, cfg.first_period, macro_vals)?,
        embeddings,
        oracle: Oracle {
            asset_ids,
            periods: oracle_periods,
        },
        latent: injected,
        signal: signals,
        sigma_eps,
        sigma_f,
    })
}

/// Writes `returns.csv`, `characteristics.csv`, `macro.csv` and `embeddings.csv`.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    write_panel(&data.panel, &dir.join("returns.csv"), &dir.join("characteristics.csv"))?;
    write_macro(&data.macro_series, &dir.join("macro.csv"))?;
    write_embeddings(&data.embeddings, &dir.join("embeddings.csv"))
}

pub fn write_oracle(oracle: &Oracle, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut s = String::from("period,asset_id,weight,beta,expected_return\n");
    for p in &oracle.periods {
        for (i, id) in oracle.asset_ids.iter().enumerate() {
            s.push_str(&format!("{},{id},{},{},{}\n", p.period, p.weights[i], p.betas[i], p.expected[i]));
        }
    }
    std::fs::File::create(path).map_err(io)?.write_all(s.as_bytes()).map_err(io)
}

pub fn read_oracle(path: &Path) -> Result<Oracle> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::data(path.display().to_string(), None, e.to_string()))?;
    let mut rows: BTreeMap<i64, BTreeMap<String, [f64; 3]>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(path.display().to_string(), None, e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        if rec.len() != 5 {
            return Err(Error::data(path.display().to_string(), line, "expected 5 fields"));
        }
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::data(path.display().to_string(), line, format!("field {}: {e}", j + 1)))
        };
        let period: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|e| Error::data(path.display().to_string(), line, format!("period: {e}")))?;
        rows.entry(period)
            .or_default()
            .insert(rec[1].trim().to_string(), [num(2)?, num(3)?, num(4)?]);
    }
    let asset_ids: Vec<String> = rows
        .values()
        .flat_map(|m| m.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut periods = Vec::new();
    for (period, m) in rows {
        if m.len() != asset_ids.len() {
            return Err(Error::data(
                path.display().to_string(),
                None,
                format!("period {period} does not cover every asset"),
            ));
        }
        let vals: Vec<[f64; 3]> = m.into_values().collect();
        periods.push(OraclePeriod {
            period,
            weights: vals.iter().map(|v| v[0]).collect(),
            betas: vals.iter().map(|v| v[1]).collect(),
            expected: vals.iter().map(|v| v[2]).collect(),
        });
    }
    Ok(Oracle { asset_ids, periods })
}

/// Metrics of the planted kernel over `range`: factor from true weights,
/// deciles sorted on true betas, predictions equal to true expected returns.
pub fn oracle_metrics(
    oracle: &Oracle,
    panel: &Panel,
    range: (i64, i64),
    cfg: &EvalConfig,
    config_digest: &str,
) -> Result<Evaluation> {
    let index: BTreeMap<&str, usize> = oracle.asset_ids.iter().enumerate().map(|(k, a)| (a.as_str(), k)).collect();
    let by_period: BTreeMap<i64, &OraclePeriod> = oracle.periods.iter().map(|p| (p.period, p)).collect();
    let (mut returns, mut weights, mut betas, mut expected) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (period, obs) in panel.by_period() {
        if !(range.0..=range.1).contains(&period) {
            continue;
        }
        let op = by_period
            .get(&period)
            .ok_or_else(|| Error::data("oracle", None, format!("no oracle rows for period {period}")))?;
        let mut assets = Vec::with_capacity(obs.len());
        for o in obs {
            assets.push(*index.get(o.asset_id.as_str()).ok_or_else(|| {
                Error::data("oracle", None, format!("asset `{}` missing from the oracle", o.asset_id))
            })?);
        }
        let pick = |v: &[f64]| assets.iter().map(|&a| v[a]).collect::<Vec<f64>>();
        let cs = |values: Vec<f64>| CrossSection {
            period,
            assets: assets.clone(),
            values,
        };
        returns.push(cs(obs.iter().map(|o| o.excess_return_next).collect()));
        weights.push(cs(pick(&op.weights)));
        betas.push(cs(pick(&op.betas)));
        expected.push(cs(pick(&op.expected)));
    }
    let factor = FactorSeries::from_weights(&weights, &returns)?;
    Ok(evalkit::assemble(&factor, &returns, &betas, &expected, range, cfg, config_digest))
}
