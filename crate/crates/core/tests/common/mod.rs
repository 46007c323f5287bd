#![allow(dead_code)]

pub mod props;
pub mod reference;

use advsdf_core::advtrain::empirical_loss;
use advsdf_core::featpipe::Batch;
use advsdf_core::synthlab::{generate, SynthData};
use advsdf_core::{Model, PreparedPanel, RunConfig};

/// Tiny run config: 3 assets, 6 periods, a 2-step macro window, narrow nets.
pub fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synth_assets", "3"),
        ("synth_periods", "6"),
        ("synth_chars", "2"),
        ("synth_macro", "2"),
        ("synth_emb_dim", "4"),
        ("window_K", "2"),
        ("d_a", "3"),
        ("d_I", "3"),
        ("d_N", "2"),
        ("h1", "5"),
        ("h2", "4"),
        ("h3", "3"),
        ("h_g", "4"),
        ("d_g", "2"),
        ("lambda", "0.001"),
        ("synth_noise_std", "0.5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub struct Micro {
    pub data: SynthData,
    pub prep: PreparedPanel,
    pub blocks: Vec<usize>,
    pub model: Model,
    pub batch: Batch,
}

/// 3-asset × 4-period prepared panel with an initialized model.
pub fn micro(seed: u64) -> Micro {
    let cfg = micro_config();
    let data = generate(&cfg.synth, seed).unwrap();
    let prep = PreparedPanel::build(&data.panel, &data.macro_series, &data.embeddings, &cfg.features).unwrap();
    let blocks: Vec<usize> = (0..prep.blocks().len()).collect();
    assert_eq!(blocks.len(), 4);
    let mut model = Model::init(&prep, &blocks, &cfg.features, &cfg.net, seed).unwrap();
    jitter_biases(&mut model, seed);
    let batch = prep.batch(&blocks).unwrap();
    Micro {
        data,
        prep,
        blocks,
        model,
        batch,
    }
}

/// Central-difference gradient of the penalized loss for every entry of
/// every trainable tensor, in `Model::named_tensors` order.
pub fn numeric_gradients(model: &Model, batch: &Batch, lambda: f64, h: f64) -> Vec<Vec<f64>> {
    let mut work = model.clone();
    let n_tensors = model.named_tensors().len();
    let mut out = Vec::with_capacity(n_tensors);
    for k in 0..n_tensors {
        let len = model.named_tensors()[k].2.len();
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = model.named_tensors()[k].2.data()[j];
            set_entry(&mut work, k, j, orig + h);
            let up = empirical_loss(&work, batch, lambda).unwrap();
            set_entry(&mut work, k, j, orig - h);
            let down = empirical_loss(&work, batch, lambda).unwrap();
            set_entry(&mut work, k, j, orig);
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Replaces zero-initialized biases by small random values so that no ReLU
/// sits exactly on its kink.
pub fn jitter_biases(model: &mut Model, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    for (name, (_, t)) in names.iter().zip(model.tensors_mut()) {
        if name.rsplit('.').next().is_some_and(|s| s.starts_with('b')) {
            let data = (0..t.len()).map(|_| rng.random_range(-0.2..0.2)).collect();
            *t = advsdf_core::Tensor::new(t.shape().to_vec(), data).unwrap();
        }
    }
}

fn set_entry(model: &mut Model, k: usize, j: usize, v: f64) {
    let mut ts = model.tensors_mut();
    let t = &mut ts[k].1;
    let mut data = t.data().to_vec();
    data[j] = v;
    **t = advsdf_core::Tensor::new(t.shape().to_vec(), data).unwrap();
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst `|mean| / standard error` of the moments `M_t R_{t,i} g_{t,i}`
/// over all assets and `draws` random instruments, for kernel weights
/// `weights[t][i]` on a balanced synthetic panel.
pub fn worst_moment_ratio(data: &SynthData, weights: &[Vec<f64>], draws: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let panel = &data.panel;
    let t_len = panel.n_periods();
    let n = data.oracle.asset_ids.len();
    let d_f = panel.n_chars();
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        // g = tanh(a·x + c) on the raw characteristics known at t
        let a: Vec<f64> = (0..d_f).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c: f64 = StandardNormal.sample(&mut rng);
        let mut sums = vec![(0.0f64, 0.0f64); n];
        for t in 0..t_len {
            let obs = panel.period_slice(t);
            assert_eq!(obs.len(), n);
            let m: f64 = 1.0 - obs.iter().zip(&weights[t]).map(|(o, w)| w * o.excess_return_next).sum::<f64>();
            for (i, o) in obs.iter().enumerate() {
                let x: f64 = o.characteristics.iter().zip(&a).map(|(v, a)| v.unwrap() * a).sum();
                let h = m * o.excess_return_next * (x + c).tanh();
                sums[i].0 += h;
                sums[i].1 += h * h;
            }
        }
        let tf = t_len as f64;
        for (s, ss) in sums {
            let mean = s / tf;
            let var = (ss / tf - mean * mean) * tf / (tf - 1.0);
            let se = (var / tf).sqrt();
            worst = worst.max(mean.abs() / se);
        }
    }
    worst
}

/// Planted weights scaled per asset by `1 + scale·δ_i`, `δ_i ~ N(0, 1)`.
pub fn perturbed_weights(data: &SynthData, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = data.oracle.asset_ids.len();
    let delta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    data.oracle
        .periods
        .iter()
        .map(|p| p.weights.iter().zip(&delta).map(|(w, d)| w * (1.0 + scale * d)).collect())
        .collect()
}

/// Moment-test panel: 10 assets × 10 000 periods.
pub fn moment_config() -> advsdf_core::synthlab::SynthConfig {
    advsdf_core::synthlab::SynthConfig {
        n_assets: 10,
        n_periods: 10_000,
        d_emb: 4,
        news_min: 1,
        news_max: 1,
        ..Default::default()
    }
}

/// Small but complete run: 10 assets × 60 periods, narrow networks.
pub const SMALL_CONFIG: &str = "
seed = 3
synth_assets = 10
synth_periods = 60
synth_emb_dim = 6
window_K = 4
d_a = 8
d_I = 4
d_N = 3
h1 = 16
h2 = 8
h3 = 4
h_g = 8
d_g = 3
lambda = 1e-6
lr_phi = 10
lr_psi = 10
batch_periods = 4
iterations = 30
eval_interval = 5
patience = 0
train_start = 4
train_end = 39
val_start = 40
val_end = 49
test_start = 50
test_end = 59
beta_window = 12
shapley_bucket = 5
shapley_permutations = 20
";

pub fn small_config() -> RunConfig {
    RunConfig::parse(SMALL_CONFIG, "small").unwrap()
}

/// Synthetic dataset and prepared splits for `cfg`.
pub fn small_prepared(cfg: &RunConfig) -> (advsdf_core::Dataset, advsdf_core::Prepared) {
    let data = generate(&cfg.synth, cfg.seed).unwrap();
    let ds = advsdf_core::Dataset::from_synth(&data);
    let p = advsdf_core::pipeline::prepare(&ds, cfg).unwrap();
    (ds, p)
}

/// Outcome of the three-group Shapley toys.
pub struct ShapleyToy {
    /// Largest `|sampled − exact| / se` over groups of the interaction toy.
    pub worst_z: f64,
    /// Normalized importance of a group the model ignores, at P = 200.
    pub ignored: f64,
    /// `|sampled − exact|` on an additive toy (standard errors are zero there).
    pub additive_gap: f64,
}

pub fn shapley_toys(seed: u64) -> ShapleyToy {
    use advsdf_core::attrib::{bucket_shapley, normalize, shapley_values, FeatureGroup, ShapleyMode};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x = advsdf_core::Tensor::from_rows(&rows).unwrap();
    let groups = vec![
        FeatureGroup { name: "a".into(), coords: vec![0] },
        FeatureGroup { name: "b".into(), coords: vec![1, 2] },
        FeatureGroup { name: "c".into(), coords: vec![3] },
    ];
    // interacting toy: every group matters
    let f = |x: &advsdf_core::Tensor| -> advsdf_core::Result<Vec<f64>> {
        Ok((0..x.dims2().0)
            .map(|r| {
                let v = x.row(r);
                v[0] * v[1] + 0.7 * v[2] + (2.0 * v[3]).sin() + 0.5 * v[0] * v[3]
            })
            .collect())
    };
    let sampled_mode = ShapleyMode::Sampled { permutations: 200 };
    let exact = bucket_shapley(&x, &groups, ShapleyMode::Exact, &mut rng, f).unwrap();
    let sampled = bucket_shapley(&x, &groups, sampled_mode, &mut rng, f).unwrap();
    let worst_z = exact
        .values
        .iter()
        .zip(&sampled.values)
        .zip(&sampled.std_errors)
        .map(|((e, s), se)| if *se == 0.0 { if e == s { 0.0 } else { f64::INFINITY } } else { (e - s).abs() / se })
        .fold(0.0, f64::max);

    // group c never reaches the output
    let g = |x: &advsdf_core::Tensor| -> advsdf_core::Result<Vec<f64>> {
        Ok((0..x.dims2().0).map(|r| { let v = x.row(r); v[0] * v[1] + 0.7 * v[2] }).collect())
    };
    let est = bucket_shapley(&x, &groups, sampled_mode, &mut rng, g).unwrap();
    let ignored = normalize(&est.values).unwrap()[2].abs();

    let a = [0.3, -1.2, 2.5];
    let additive = |m: u64| Ok((0..3).filter(|j| m & (1 << j) != 0).map(|j| a[j]).sum::<f64>());
    let ex = shapley_values(3, ShapleyMode::Exact, &mut rng, additive).unwrap();
    let sa = shapley_values(3, sampled_mode, &mut rng, additive).unwrap();
    let additive_gap = ex.values.iter().zip(&sa.values).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ShapleyToy { worst_z, ignored, additive_gap }
}
