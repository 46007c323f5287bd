//! The SDF network, the conditional-instrument network, and the pricing algebra.
//!
//! `w = MLP_φ(x)` with three ReLU layers and a scalar output,
//! `M = 1 − Σ_i w_i R_i`, `g = tanh(MLP_ψ(x))`, and per-asset moments
//! `m̂_i = (1/T_i) Σ_t M R g`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffcore::{glorot_uniform, Graph, PcaBasis, Tensor, Var};
use crate::error::{Error, Result};
use crate::featpipe::{
    features_graph, fit_news_pca, put, AttentionParams, Batch, FeatureConfig, FeatureVars, FusedLayout,
    LstmParams, PreparedPanel,
};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub h1: usize,
    pub h2: usize,
    pub h3: usize,
    pub h_g: usize,
    pub d_g: usize,
    pub instrument_squash: bool,
    /// Falls back to the run seed when unset.
    pub init_seed: Option<u64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            h1: 64,
            h2: 32,
            h3: 16,
            h_g: 32,
            d_g: 8,
            instrument_squash: true,
            init_seed: None,
        }
    }
}

/// Which player of the minimax game owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    /// SDF network plus attention and LSTM; minimizes.
    Phi,
    /// Conditional network; maximizes.
    Psi,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Phi => "phi",
            Side::Psi => "psi",
        }
    }
}

/// Affine layer `y = W x + b` with `W: out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        Dense {
            w: glorot_uniform(rng, output, input),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.dims2().1
    }

    pub fn output_dim(&self) -> usize {
        self.w.dims2().0
    }
}

fn check_chain(what: &str, layers: &[Dense]) -> Result<()> {
    for pair in layers.windows(2) {
        if pair[0].output_dim() != pair[1].input_dim() {
            return Err(Error::shape(
                "layer chain",
                format!("{what} layer input {}", pair[0].output_dim()),
                format!("{}", pair[1].input_dim()),
            ));
        }
    }
    for l in layers {
        if l.b.shape() != [l.output_dim()] {
            return Err(Error::shape("layer chain", format!("{what} bias [{}]", l.output_dim()), format!("{:?}", l.b.shape())));
        }
    }
    Ok(())
}

/// Three ReLU hidden layers and a scalar output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfNetParams {
    pub layers: Vec<Dense>,
}

impl SdfNetParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, cfg: &NetConfig) -> Self {
        let dims = [input, cfg.h1, cfg.h2, cfg.h3, 1];
        SdfNetParams {
            layers: dims.windows(2).map(|d| Dense::init(rng, d[0], d[1])).collect(),
        }
    }

    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != 4 || layers[3].output_dim() != 1 {
            return Err(Error::InvalidArgument("SDF network needs 4 layers ending in a scalar".into()));
        }
        check_chain("sdf", &layers)?;
        Ok(SdfNetParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }
}

/// One ReLU hidden layer and a `d_g`-wide output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CondNetParams {
    pub layers: Vec<Dense>,
}

impl CondNetParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, cfg: &NetConfig) -> Self {
        CondNetParams {
            layers: vec![Dense::init(rng, input, cfg.h_g), Dense::init(rng, cfg.h_g, cfg.d_g)],
        }
    }

    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != 2 {
            return Err(Error::InvalidArgument("conditional network needs 2 layers".into()));
        }
        check_chain("cond", &layers)?;
        Ok(CondNetParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn d_g(&self) -> usize {
        self.layers[1].output_dim()
    }
}

pub fn register_dense(g: &mut Graph, prefix: &str, layers: &[Dense], trainable: bool) -> Vec<(Var, Var)> {
    layers
        .iter()
        .enumerate()
        .map(|(k, l)| {
            (
                put(g, &format!("{prefix}.W{}", k + 1), &l.w, trainable),
                put(g, &format!("{prefix}.b{}", k + 1), &l.b, trainable),
            )
        })
        .collect()
}

/// ReLU MLP over rows of `x`; the last layer is linear. Returns `n × out`.
pub fn mlp_graph(g: &mut Graph, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (k, &(w, b)) in layers.iter().enumerate() {
        h = g.affine(h, w, Some(b))?;
        if k + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// SDF weights of each row of `x`, as a vector.
pub fn sdf_weights_graph(g: &mut Graph, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let n = g.value(x).dims2().0;
    let out = mlp_graph(g, layers, x)?;
    g.reshape(out, &[n])
}

/// Instruments of each row of `x` (`n × d_g`), optionally tanh-squashed.
pub fn instruments_graph(g: &mut Graph, layers: &[(Var, Var)], x: Var, squash: bool) -> Result<Var> {
    let out = mlp_graph(g, layers, x)?;
    if squash {
        g.tanh(out)
    } else {
        Ok(out)
    }
}

/// Per-period factor return `F = Σ_i w_i R_i` and kernel `M = 1 − F`.
pub fn kernel_graph(g: &mut Graph, w: Var, returns: Var, obs_period: &[usize], n_periods: usize) -> Result<(Var, Var)> {
    let wr = g.mul(w, returns)?;
    let f = g.segment_sum(wr, obs_period, n_periods)?;
    let m = g.scale_shift(f, -1.0, 1.0)?;
    Ok((f, m))
}

/// Per-asset moment vectors `m̂_i` (`n_assets × d_g`).
pub fn moments_graph(g: &mut Graph, m: Var, returns: Var, inst: Var, batch: &Batch) -> Result<Var> {
    let m_obs = g.gather_rows(m, &batch.obs_period)?;
    let mr = g.mul(m_obs, returns)?;
    let h = g.scale_rows(inst, mr)?;
    let sums = g.segment_sum(h, &batch.obs_asset, batch.n_assets())?;
    let inv_t: Vec<f64> = batch.asset_counts.iter().map(|&c| 1.0 / c as f64).collect();
    let inv_t = g.constant(Tensor::vector(inv_t)?);
    g.scale_rows(sums, inv_t)
}

/// `(1/N) Σ_i (T_i/T) ‖m̂_i‖²` over the batch's assets and periods.
pub fn moment_loss_graph(g: &mut Graph, moments: Var, batch: &Batch) -> Result<Var> {
    let n = batch.n_assets() as f64;
    let t = batch.n_periods() as f64;
    let scale: Vec<f64> = batch
        .asset_counts
        .iter()
        .map(|&ti| (ti as f64 / (n * t)).sqrt())
        .collect();
    let scale = g.constant(Tensor::vector(scale)?);
    let weighted = g.scale_rows(moments, scale)?;
    g.sq_norm(weighted)
}

/// Everything needed to map a prepared panel to weights and instruments.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub features: FeatureConfig,
    pub net: NetConfig,
    pub pca: PcaBasis,
    pub attention: AttentionParams,
    pub lstm: LstmParams,
    pub sdf: SdfNetParams,
    pub cond: CondNetParams,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub features: FeatureVars,
    pub sdf: Vec<(Var, Var)>,
    pub cond: Vec<(Var, Var)>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub x: Var,
    pub w: Var,
    pub inst: Var,
    pub f: Var,
    pub m: Var,
    pub moments: Var,
    pub moment_loss: Var,
}

impl Model {
    /// Initializes every network and fits the news PCA on `train_blocks`
    /// using the freshly initialized attention.
    pub fn init(
        prep: &PreparedPanel,
        train_blocks: &[usize],
        features: &FeatureConfig,
        net: &NetConfig,
        seed: u64,
    ) -> Result<Self> {
        if features.d_n > prep.d_emb() {
            return Err(Error::InvalidArgument(format!(
                "d_N = {} exceeds the embedding dimension {}",
                features.d_n,
                prep.d_emb()
            )));
        }
        let mut rng = crate::substream(net.init_seed.unwrap_or(seed), "init");
        let attention = AttentionParams::init(&mut rng, features.d_a, prep.d_emb());
        let lstm = LstmParams::init(&mut rng, prep.d_macro(), features.d_i);
        let pca = fit_news_pca(prep, train_blocks, &attention, features.d_n)?;
        let input = features.d_i + prep.d_firm() + features.d_n;
        let sdf = SdfNetParams::init(&mut rng, input, net);
        let cond = CondNetParams::init(&mut rng, input, net);
        Ok(Model {
            features: features.clone(),
            net: net.clone(),
            pca,
            attention,
            lstm,
            sdf,
            cond,
        })
    }

    pub fn layout(&self) -> FusedLayout {
        FusedLayout {
            d_macro: self.lstm.hidden(),
            d_firm: self.sdf.input_dim() - self.lstm.hidden() - self.pca.output_dim(),
            d_news: self.pca.output_dim(),
        }
    }

    /// Trainable tensors in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Side, &Tensor)> {
        let a = &self.attention;
        let l = &self.lstm;
        let mut out: Vec<(String, Side, &Tensor)> = vec![
            ("attention.W".into(), Side::Phi, &a.w),
            ("attention.b".into(), Side::Phi, &a.b),
            ("attention.v".into(), Side::Phi, &a.v),
            ("lstm.W_i".into(), Side::Phi, &l.w_i),
            ("lstm.b_i".into(), Side::Phi, &l.b_i),
            ("lstm.W_f".into(), Side::Phi, &l.w_f),
            ("lstm.b_f".into(), Side::Phi, &l.b_f),
            ("lstm.W_o".into(), Side::Phi, &l.w_o),
            ("lstm.b_o".into(), Side::Phi, &l.b_o),
            ("lstm.W_g".into(), Side::Phi, &l.w_g),
            ("lstm.b_g".into(), Side::Phi, &l.b_g),
        ];
        for (prefix, side, layers) in [("sdf", Side::Phi, &self.sdf.layers), ("cond", Side::Psi, &self.cond.layers)] {
            for (k, d) in layers.iter().enumerate() {
                out.push((format!("{prefix}.W{}", k + 1), side, &d.w));
                out.push((format!("{prefix}.b{}", k + 1), side, &d.b));
            }
        }
        out
    }

    /// Mutable view of the trainable tensors, in the order of [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(Side, &mut Tensor)> {
        let a = &mut self.attention;
        let l = &mut self.lstm;
        let mut out: Vec<(Side, &mut Tensor)> = vec![
            (Side::Phi, &mut a.w),
            (Side::Phi, &mut a.b),
            (Side::Phi, &mut a.v),
            (Side::Phi, &mut l.w_i),
            (Side::Phi, &mut l.b_i),
            (Side::Phi, &mut l.w_f),
            (Side::Phi, &mut l.b_f),
            (Side::Phi, &mut l.w_o),
            (Side::Phi, &mut l.b_o),
            (Side::Phi, &mut l.w_g),
            (Side::Phi, &mut l.b_g),
        ];
        for d in &mut self.sdf.layers {
            out.push((Side::Phi, &mut d.w));
            out.push((Side::Phi, &mut d.b));
        }
        for d in &mut self.cond.layers {
            out.push((Side::Psi, &mut d.w));
            out.push((Side::Psi, &mut d.b));
        }
        out
    }

    /// `Σ ‖θ‖²` over one side's trainable tensors.
    pub fn sq_norm(&self, side: Side) -> f64 {
        self.named_tensors()
            .iter()
            .filter(|(_, s, _)| *s == side)
            .map(|(_, _, t)| t.sq_norm())
            .sum()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        ModelVars {
            features: FeatureVars {
                attention: self.attention.register(g, trainable),
                lstm: self.lstm.register(g, trainable),
            },
            sdf: register_dense(g, "sdf", &self.sdf.layers, trainable),
            cond: register_dense(g, "cond", &self.cond.layers, trainable),
        }
    }

    /// Full forward pass of `batch` on `g`.
    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, batch: &Batch) -> Result<Forward> {
        let x = features_graph(g, &vars.features, batch, &self.pca, &self.features)?;
        self.forward_from_features(g, vars, batch, x)
    }

    pub fn forward_from_features(&self, g: &mut Graph, vars: &ModelVars, batch: &Batch, x: Var) -> Result<Forward> {
        let w = sdf_weights_graph(g, &vars.sdf, x)?;
        let inst = instruments_graph(g, &vars.cond, x, self.net.instrument_squash)?;
        let returns = g.constant(batch.returns.clone());
        let (f, m) = kernel_graph(g, w, returns, &batch.obs_period, batch.n_periods())?;
        let moments = moments_graph(g, m, returns, inst, batch)?;
        let moment_loss = moment_loss_graph(g, moments, batch)?;
        Ok(Forward {
            x,
            w,
            inst,
            f,
            m,
            moments,
            moment_loss,
        })
    }

    /// Fused feature matrix of `batch` (no gradient tracking).
    pub fn features_of(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = features_graph(&mut g, &vars.features, batch, &self.pca, &self.features)?;
        Ok(g.value(x).clone())
    }

    /// SDF weights of every observation in `batch`.
    pub fn weights_of(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = features_graph(&mut g, &vars.features, batch, &self.pca, &self.features)?;
        let w = sdf_weights_graph(&mut g, &vars.sdf, x)?;
        Ok(g.value(w).data().to_vec())
    }

    /// SDF weights for given feature rows (`n × dim`).
    pub fn weights_from_features(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let layers = register_dense(&mut g, "sdf", &self.sdf.layers, false);
        let xv = g.constant(x.clone());
        let w = sdf_weights_graph(&mut g, &layers, xv)?;
        Ok(g.value(w).data().to_vec())
    }

    /// Rebuilds a model from named tensors (as stored in a checkpoint).
    pub fn from_named(features: FeatureConfig, net: NetConfig, mut t: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str| {
            t.remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let pca = PcaBasis::from_parts(
            take("pca.mean")?.into_data(),
            take("pca.components")?,
            take("pca.explained_variance")?.into_data(),
        )?;
        let attention = AttentionParams {
            w: take("attention.W")?,
            b: take("attention.b")?,
            v: take("attention.v")?,
        };
        let lstm = LstmParams {
            w_i: take("lstm.W_i")?,
            b_i: take("lstm.b_i")?,
            w_f: take("lstm.W_f")?,
            b_f: take("lstm.b_f")?,
            w_o: take("lstm.W_o")?,
            b_o: take("lstm.b_o")?,
            w_g: take("lstm.W_g")?,
            b_g: take("lstm.b_g")?,
        };
        let mut dense = |prefix: &str, n: usize| -> Result<Vec<Dense>> {
            (1..=n)
                .map(|k| {
                    Ok(Dense {
                        w: take(&format!("{prefix}.W{k}"))?,
                        b: take(&format!("{prefix}.b{k}"))?,
                    })
                })
                .collect()
        };
        let sdf = SdfNetParams::new(dense("sdf", 4)?)?;
        let cond = CondNetParams::new(dense("cond", 2)?)?;
        if let Some(extra) = t.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let model = Model {
            features,
            net,
            pca,
            attention,
            lstm,
            sdf,
            cond,
        };
        let layout = model.layout();
        if layout.d_macro + layout.d_news > model.sdf.input_dim() || model.cond.input_dim() != model.sdf.input_dim() {
            return Err(Error::Checkpoint("network input widths disagree with the feature layout".into()));
        }
        Ok(model)
    }

    /// Every stored tensor, trainable ones plus the frozen PCA basis.
    pub fn all_tensors(&self) -> Result<Vec<(String, &'static str, Tensor)>> {
        let mut out: Vec<(String, &'static str, Tensor)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, s, t)| (n, s.as_str(), t.clone()))
            .collect();
        out.push(("pca.mean".into(), "fixed", Tensor::vector(self.pca.mean().to_vec())?));
        out.push(("pca.components".into(), "fixed", self.pca.components().clone()));
        out.push((
            "pca.explained_variance".into(),
            "fixed",
            Tensor::vector(self.pca.explained_variance().to_vec())?,
        ));
        Ok(out)
    }
}

/// SDF weight of one fused feature vector.
pub fn sdf_weight(x: &[f64], params: &SdfNetParams) -> Result<f64> {
    if x.len() != params.input_dim() {
        return Err(Error::shape("sdf_weight", format!("features of dim {}", params.input_dim()), format!("dim {}", x.len())));
    }
    let mut g = Graph::new();
    let layers = register_dense(&mut g, "sdf", &params.layers, false);
    let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let w = sdf_weights_graph(&mut g, &layers, xv)?;
    Ok(g.value(w).data()[0])
}

/// Instruments of one fused feature vector.
pub fn instruments(x: &[f64], params: &CondNetParams, squash: bool) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::shape("instruments", format!("features of dim {}", params.input_dim()), format!("dim {}", x.len())));
    }
    let mut g = Graph::new();
    let layers = register_dense(&mut g, "cond", &params.layers, false);
    let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let out = instruments_graph(&mut g, &layers, xv, squash)?;
    Ok(g.value(out).data().to_vec())
}

/// `M = 1 − Σ_i w_i R_i` for one period.
pub fn pricing_kernel(weights: &[f64], returns: &[f64]) -> Result<f64> {
    if weights.len() != returns.len() {
        return Err(Error::shape(
            "pricing_kernel",
            format!("{} returns", weights.len()),
            format!("{} returns", returns.len()),
        ));
    }
    Ok(1.0 - weights.iter().zip(returns).map(|(w, r)| w * r).sum::<f64>())
}

/// Per-asset moment vectors of a panel slice.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSet {
    /// Global asset index of each row.
    pub assets: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// Moments `m̂_i` of every asset observed in `batch`.
pub fn moments(model: &Model, batch: &Batch) -> Result<MomentSet> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false);
    let fwd = model.forward(&mut g, &vars, batch)?;
    let m = g.value(fwd.moments);
    let d_g = m.dims2().1;
    Ok(MomentSet {
        assets: batch.asset_global.clone(),
        values: (0..batch.n_assets()).map(|i| m.data()[i * d_g..(i + 1) * d_g].to_vec()).collect(),
        counts: batch.asset_counts.clone(),
    })
}
