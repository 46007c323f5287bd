//! Feature attribution for the SDF-weight map: average input sensitivity and
//! Shapley importance of feature groups.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::featpipe::{FusedLayout, PreparedPanel};
use crate::sdfnet::{register_dense, sdf_weights_graph, Model, SdfNetParams};

#[derive(Clone, Debug, PartialEq)]
pub struct AttribConfig {
    pub permutations: usize,
    pub bucket_periods: usize,
}

impl Default for AttribConfig {
    fn default() -> Self {
        AttribConfig {
            permutations: 200,
            bucket_periods: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub n: usize,
}

/// `S_k = (1/n) Σ_j |∂w(x_j)/∂x_{j,k}|` over the rows of `x`.
pub fn sensitivity_of(x: &Tensor, sdf: &SdfNetParams) -> Result<Vec<f64>> {
    let (n, d) = x.dims2();
    if n == 0 {
        return Err(Error::InvalidArgument("sensitivity needs at least one observation".into()));
    }
    let mut g = Graph::new();
    let layers = register_dense(&mut g, "sdf", &sdf.layers, false);
    let xv = g.leaf("input.x", x.clone());
    let w = sdf_weights_graph(&mut g, &layers, xv)?;
    let total = g.sum(w)?;
    let grads = g.backward(total)?;
    let gx = grads
        .get(xv)
        .ok_or_else(|| Error::Numerical("no gradient for the input features".into()))?;
    let mut s = vec![0.0; d];
    for row in gx.data().chunks(d) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    Ok(s.into_iter().map(|v| v / n as f64).collect())
}

/// Average sensitivity of the model's SDF weights over the given blocks.
pub fn sensitivity(model: &Model, prep: &PreparedPanel, blocks: &[usize]) -> Result<SensitivityReport> {
    let x = model.features_of(&prep.batch(blocks)?)?;
    Ok(SensitivityReport {
        names: model.layout().feature_names(prep.char_names()),
        values: sensitivity_of(&x, &model.sdf)?,
        n: x.dims2().0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapleyMode {
    Exact,
    Sampled { permutations: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    /// Standard errors of the permutation means (zero when exact).
    pub std_errors: Vec<f64>,
    pub exact: bool,
}

/// Shapley values of a set function over `n` players. Coalitions are
/// bitmasks; `value` is called at most once per coalition.
pub fn shapley_values<R: Rng + ?Sized>(
    n: usize,
    mode: ShapleyMode,
    rng: &mut R,
    mut value: impl FnMut(u64) -> Result<f64>,
) -> Result<ShapleyEstimate> {
    if n == 0 || n > 63 {
        return Err(Error::InvalidArgument(format!("Shapley needs 1..=63 groups, got {n}")));
    }
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut v = |mask: u64| -> Result<f64> {
        if let Some(&x) = cache.get(&mask) {
            return Ok(x);
        }
        let x = value(mask)?;
        cache.insert(mask, x);
        Ok(x)
    };
    match mode {
        ShapleyMode::Exact => {
            if n > 20 {
                return Err(Error::InvalidArgument(format!("exact Shapley over {n} groups is infeasible")));
            }
            let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
                if k > 0 {
                    *acc *= k as f64;
                }
                Some(*acc)
            }).collect();
            let mut phi = vec![0.0; n];
            for mask in 0..(1u64 << n) {
                let s = mask.count_ones() as usize;
                let base = v(mask)?;
                for (j, p) in phi.iter_mut().enumerate() {
                    if mask & (1 << j) == 0 {
                        let weight = fact[s] * fact[n - s - 1] / fact[n];
                        *p += weight * (v(mask | (1 << j))? - base);
                    }
                }
            }
            Ok(ShapleyEstimate {
                values: phi,
                std_errors: vec![0.0; n],
                exact: true,
            })
        }
        ShapleyMode::Sampled { permutations } => {
            if permutations == 0 {
                return Err(Error::InvalidArgument("Shapley sampling needs at least one permutation".into()));
            }
            let mut sum = vec![0.0; n];
            let mut sum_sq = vec![0.0; n];
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..permutations {
                order.shuffle(rng);
                let mut mask = 0u64;
                let mut prev = v(mask)?;
                for &j in &order {
                    mask |= 1 << j;
                    let cur = v(mask)?;
                    let d = cur - prev;
                    sum[j] += d;
                    sum_sq[j] += d * d;
                    prev = cur;
                }
            }
            let p = permutations as f64;
            let values: Vec<f64> = sum.iter().map(|s| s / p).collect();
            let std_errors = values
                .iter()
                .zip(&sum_sq)
                .map(|(m, sq)| {
                    if permutations < 2 {
                        return f64::INFINITY;
                    }
                    let var = ((sq - p * m * m) / (p - 1.0)).max(0.0);
                    (var / p).sqrt()
                })
                .collect();
            Ok(ShapleyEstimate {
                values,
                std_errors,
                exact: false,
            })
        }
    }
}

/// A named set of fused-feature coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGroup {
    pub name: String,
    pub coords: Vec<usize>,
}

/// `macro` (whole LSTM state), one group per characteristic, one per news PC.
pub fn feature_groups(layout: &FusedLayout, char_names: &[String]) -> Vec<FeatureGroup> {
    let mut out = Vec::new();
    if layout.d_macro > 0 {
        out.push(FeatureGroup {
            name: "macro".into(),
            coords: layout.macro_range().collect(),
        });
    }
    for (k, c) in layout.firm_range().enumerate() {
        out.push(FeatureGroup {
            name: char_names.get(k).cloned().unwrap_or_else(|| format!("char_{}", k + 1)),
            coords: vec![c],
        });
    }
    for (k, c) in layout.news_range().enumerate() {
        out.push(FeatureGroup {
            name: format!("news_pc{}", k + 1),
            coords: vec![c],
        });
    }
    out
}

fn check_partition(groups: &[FeatureGroup], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for g in groups {
        for &c in &g.coords {
            if c >= dim || seen[c] {
                return Err(Error::InvalidArgument(format!(
                    "feature groups must partition 0..{dim}; coordinate {c} of `{}` is out of range or repeated",
                    g.name
                )));
            }
            seen[c] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument("feature groups leave coordinates uncovered".into()));
    }
    Ok(())
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Shapley estimate for one bucket of feature rows: `v(S)` is the variance
/// of `f` with coordinates outside `S` set to their bucket means.
pub fn bucket_shapley<R: Rng + ?Sized>(
    x: &Tensor,
    groups: &[FeatureGroup],
    mode: ShapleyMode,
    rng: &mut R,
    f: impl Fn(&Tensor) -> Result<Vec<f64>>,
) -> Result<ShapleyEstimate> {
    let (n, d) = x.dims2();
    if n == 0 {
        return Err(Error::InvalidArgument("empty attribution bucket".into()));
    }
    check_partition(groups, d)?;
    let mut means = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    shapley_values(groups.len(), mode, rng, |mask| {
        let mut data = x.data().to_vec();
        for (j, g) in groups.iter().enumerate() {
            if mask & (1 << j) == 0 {
                for row in data.chunks_mut(d) {
                    for &c in &g.coords {
                        row[c] = means[c];
                    }
                }
            }
        }
        Ok(population_variance(&f(&Tensor::new(vec![n, d], data)?)?))
    })
}

/// `φ_j / Σ_k φ_k`; a vanishing total is an error.
pub fn normalize(phi: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = phi.iter().sum();
    let scale = phi.iter().map(|p| p.abs()).fold(0.0, f64::max);
    if total.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) || total == 0.0 {
        return Err(Error::Numerical(
            "Shapley normalization: total contribution is zero (SDF weights do not vary)".into(),
        ));
    }
    Ok(phi.iter().map(|p| p / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyBucket {
    pub first_period: i64,
    pub last_period: i64,
    pub importance: Vec<f64>,
    pub std_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyReport {
    pub groups: Vec<String>,
    pub buckets: Vec<ShapleyBucket>,
    /// Permutations per bucket; 0 when enumerated exactly.
    pub permutations: usize,
    pub seed: u64,
}

/// Shapley importance of feature groups over buckets of `bucket_periods`
/// consecutive blocks. Enumerates exactly for at most six groups.
pub fn shapley_importance(
    model: &Model,
    prep: &PreparedPanel,
    blocks: &[usize],
    cfg: &AttribConfig,
    seed: u64,
) -> Result<ShapleyReport> {
    if cfg.bucket_periods == 0 || cfg.permutations == 0 {
        return Err(Error::InvalidArgument("bucket size and permutation count must be ≥ 1".into()));
    }
    let groups = feature_groups(&model.layout(), prep.char_names());
    let mode = if groups.len() <= 6 {
        ShapleyMode::Exact
    } else {
        ShapleyMode::Sampled {
            permutations: cfg.permutations,
        }
    };
    let mut rng = crate::substream(seed, "shapley");
    let mut buckets = Vec::new();
    for chunk in blocks.chunks(cfg.bucket_periods) {
        let x = model.features_of(&prep.batch(chunk)?)?;
        let est = bucket_shapley(&x, &groups, mode, &mut rng, |x| model.weights_from_features(x))?;
        let total: f64 = est.values.iter().sum();
        let importance = normalize(&est.values)?;
        buckets.push(ShapleyBucket {
            first_period: prep.blocks()[chunk[0]].period,
            last_period: prep.blocks()[*chunk.last().unwrap()].period,
            importance,
            std_errors: est.std_errors.iter().map(|s| s / total.abs()).collect(),
        });
    }
    Ok(ShapleyReport {
        groups: groups.into_iter().map(|g| g.name).collect(),
        buckets,
        permutations: match mode {
            ShapleyMode::Exact => 0,
            ShapleyMode::Sampled { permutations } => permutations,
        },
        seed,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |e| Error::io(path, e);
    std::fs::File::create(path).map_err(io)?.write_all(text.as_bytes()).map_err(io)
}

pub fn write_sensitivity(r: &SensitivityReport, path: &Path, seed: u64, config_digest: &str) -> Result<()> {
    let mut s = format!("# seed={seed}\n# config_digest={config_digest}\n# n={}\nfeature,sensitivity\n", r.n);
    for (name, v) in r.names.iter().zip(&r.values) {
        s.push_str(&format!("{name},{v}\n"));
    }
    write_text(path, &s)
}

/// Rows keyed by the bucket's first period.
pub fn write_shapley(r: &ShapleyReport, path: &Path, config_digest: &str) -> Result<()> {
    let mut s = format!(
        "# seed={}\n# config_digest={config_digest}\n# permutations={}\ngroup,bucket,importance\n",
        r.seed, r.permutations
    );
    for b in &r.buckets {
        for (g, v) in r.groups.iter().zip(&b.importance) {
            s.push_str(&format!("{g},{},{v}\n", b.first_period));
        }
    }
    write_text(path, &s)
}
