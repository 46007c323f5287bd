//! Feature construction: attention pooling of news embeddings with a frozen
//! PCA projection, an LSTM over the macro window, cross-sectional rank
//! normalization of firm characteristics, and fusion in the order
//! macro ∥ firm ∥ news.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;

use crate::diffcore::{glorot_uniform, pca_fit, Graph, PcaBasis, Tensor, Var};
use crate::error::{Error, Result};
use crate::panel::{EmbeddingSet, MacroSeries, Panel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmptyNewsPolicy {
    /// News features are the zero vector, the PCA-centred origin.
    #[default]
    Zero,
    /// Reuse the asset's most recent non-empty sentence list.
    CarryForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MissingCharPolicy {
    /// Drop observations with any missing characteristic.
    #[default]
    CompleteCase,
    /// Fill with the period's cross-sectional median before ranking.
    MedianImpute,
}

/// Channels replaced by zeros, for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ChannelMask {
    pub macro_: bool,
    pub firm: bool,
    pub news: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub d_a: usize,
    pub d_i: usize,
    pub d_n: usize,
    pub window_k: usize,
    pub empty_news: EmptyNewsPolicy,
    pub missing_chars: MissingCharPolicy,
    pub zero_channels: ChannelMask,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            d_a: 64,
            d_i: 16,
            d_n: 8,
            window_k: 12,
            empty_news: EmptyNewsPolicy::Zero,
            missing_chars: MissingCharPolicy::CompleteCase,
            zero_channels: ChannelMask::default(),
        }
    }
}

/// Maps values to `[−1, 1]` by ascending rank, averaging tied ranks.
pub fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![0.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let denom = (n - 1) as f64;
    ranks.iter().map(|r| (2.0 * r - n as f64 - 1.0) / denom).collect()
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Resolves missing characteristics per `policy`.
pub fn apply_missing_policy(panel: &Panel, policy: MissingCharPolicy) -> Panel {
    match policy {
        MissingCharPolicy::CompleteCase => {
            let out = panel.filter(|o| o.is_complete());
            let dropped = panel.n_observations() - out.n_observations();
            if dropped > 0 {
                log::info!("complete-case filter dropped {dropped} observations with missing characteristics");
            }
            out
        }
        MissingCharPolicy::MedianImpute => {
            let mut obs = Vec::with_capacity(panel.n_observations());
            for (_, slice) in panel.by_period() {
                let medians: Vec<f64> = (0..panel.n_chars())
                    .map(|j| {
                        let mut col: Vec<f64> = slice.iter().filter_map(|o| o.characteristics[j]).collect();
                        median(&mut col).unwrap_or(0.0)
                    })
                    .collect();
                for o in slice {
                    let mut o = o.clone();
                    for (c, m) in o.characteristics.iter_mut().zip(&medians) {
                        c.get_or_insert(*m);
                    }
                    obs.push(o);
                }
            }
            Panel::new(panel.char_names().to_vec(), obs).expect("imputation keeps the panel valid")
        }
    }
}

/// Learnable attention scoring `vᵀ tanh(W e + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d_a × d_emb`
    pub w: Tensor,
    pub b: Tensor,
    pub v: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_a: usize, d_emb: usize) -> Self {
        AttentionParams {
            w: glorot_uniform(rng, d_a, d_emb),
            b: Tensor::zeros(&[d_a]),
            v: glorot_uniform(rng, 1, d_a).reshape(vec![d_a]).expect("same length"),
        }
    }

    pub fn zeros(d_a: usize, d_emb: usize) -> Self {
        AttentionParams {
            w: Tensor::zeros(&[d_a, d_emb]),
            b: Tensor::zeros(&[d_a]),
            v: Tensor::zeros(&[d_a]),
        }
    }

    pub fn d_emb(&self) -> usize {
        self.w.dims2().1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w: Var,
    /// `v` reshaped to a `1 × d_a` matrix.
    pub v_row: Var,
    pub b: Var,
}

/// LSTM gate parameters. Each weight is `d_I × (d_macro + d_I)` and acts on `[x ∥ h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_macro: usize, d_i: usize) -> Self {
        let mut w = || glorot_uniform(rng, d_i, d_macro + d_i);
        let (w_i, w_f, w_o, w_g) = (w(), w(), w(), w());
        let b = Tensor::zeros(&[d_i]);
        LstmParams {
            w_i,
            b_i: b.clone(),
            w_f,
            b_f: b.clone(),
            w_o,
            b_o: b.clone(),
            w_g,
            b_g: b,
        }
    }

    pub fn zeros(d_macro: usize, d_i: usize) -> Self {
        let w = Tensor::zeros(&[d_i, d_macro + d_i]);
        let b = Tensor::zeros(&[d_i]);
        LstmParams {
            w_i: w.clone(),
            b_i: b.clone(),
            w_f: w.clone(),
            b_f: b.clone(),
            w_o: w.clone(),
            b_o: b.clone(),
            w_g: w,
            b_g: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_i.dims2().0
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.dims2().1 - self.hidden()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_i: Var,
    pub b_i: Var,
    pub w_f: Var,
    pub b_f: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub w_g: Var,
    pub b_g: Var,
}

/// Places `tensor` on the graph, as a named trainable leaf or as a constant.
pub(crate) fn put(g: &mut Graph, name: &str, tensor: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.leaf(name, tensor.clone())
    } else {
        g.constant(tensor.clone())
    }
}

impl AttentionParams {
    pub fn register(&self, g: &mut Graph, trainable: bool) -> AttentionVars {
        let d_a = self.v.len();
        let v_row = self.v.clone().reshape(vec![1, d_a]).expect("same length");
        AttentionVars {
            w: put(g, "attention.W", &self.w, trainable),
            b: put(g, "attention.b", &self.b, trainable),
            v_row: put(g, "attention.v", &v_row, trainable),
        }
    }
}

impl LstmParams {
    pub fn register(&self, g: &mut Graph, trainable: bool) -> LstmVars {
        LstmVars {
            w_i: put(g, "lstm.W_i", &self.w_i, trainable),
            b_i: put(g, "lstm.b_i", &self.b_i, trainable),
            w_f: put(g, "lstm.W_f", &self.w_f, trainable),
            b_f: put(g, "lstm.b_f", &self.b_f, trainable),
            w_o: put(g, "lstm.W_o", &self.w_o, trainable),
            b_o: put(g, "lstm.b_o", &self.b_o, trainable),
            w_g: put(g, "lstm.W_g", &self.w_g, trainable),
            b_g: put(g, "lstm.b_g", &self.b_g, trainable),
        }
    }
}

/// Attention pooling of stacked sentence rows `e` (`n_s × d_emb`) within
/// groups. Returns pooled rows (`n_groups × d_emb`) and the weights α.
pub fn attend_pool_graph(
    g: &mut Graph,
    p: &AttentionVars,
    e: Var,
    groups: &[usize],
    n_groups: usize,
) -> Result<(Var, Var)> {
    let hidden = g.affine(e, p.w, Some(p.b))?;
    let hidden = g.tanh(hidden)?;
    let scores = g.affine(hidden, p.v_row, None)?;
    let n_s = groups.len();
    let scores = g.reshape(scores, &[n_s])?;
    let alpha = g.segment_softmax(scores, groups, n_groups)?;
    let weighted = g.scale_rows(e, alpha)?;
    let pooled = g.segment_sum(weighted, groups, n_groups)?;
    Ok((pooled, alpha))
}

/// Pools `K ≥ 1` sentence vectors. Returns `None` for an empty list, which
/// the caller routes to the empty-news policy.
pub fn attend_pool(embeddings: &[Vec<f64>], params: &AttentionParams) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if embeddings.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let e = g.constant(Tensor::from_rows(embeddings)?);
    if g.value(e).dims2().1 != params.d_emb() {
        return Err(Error::shape(
            "attend_pool",
            format!("embeddings of dim {}", params.d_emb()),
            format!("dim {}", g.value(e).dims2().1),
        ));
    }
    let (pooled, alpha) = attend_pool_graph(&mut g, &vars, e, &vec![0; embeddings.len()], 1)?;
    Ok(Some((g.value(pooled).data().to_vec(), g.value(alpha).data().to_vec())))
}

/// Unrolls the LSTM over `steps` (each `B × d_macro`, oldest first) from a zero state.
pub fn lstm_graph(g: &mut Graph, p: &LstmVars, steps: &[Var], hidden: usize) -> Result<Var> {
    let first = *steps
        .first()
        .ok_or_else(|| Error::InvalidArgument("LSTM window has no steps".into()))?;
    let batch = g.value(first).dims2().0;
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
    for &x in steps {
        let xh = g.concat(&[x, h])?;
        let zi = g.affine(xh, p.w_i, Some(p.b_i))?;
        let i = g.sigmoid(zi)?;
        let zf = g.affine(xh, p.w_f, Some(p.b_f))?;
        let f = g.sigmoid(zf)?;
        let zo = g.affine(xh, p.w_o, Some(p.b_o))?;
        let o = g.sigmoid(zo)?;
        let zg = g.affine(xh, p.w_g, Some(p.b_g))?;
        let cand = g.tanh(zg)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c)?;
        h = g.mul(o, squashed)?;
    }
    Ok(h)
}

/// Final hidden state after reading `window` (oldest first).
pub fn macro_encode(window: &[Vec<f64>], params: &LstmParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let mut steps = Vec::with_capacity(window.len());
    for row in window {
        if row.len() != params.input_dim() {
            return Err(Error::shape(
                "macro_encode",
                format!("macro rows of dim {}", params.input_dim()),
                format!("dim {}", row.len()),
            ));
        }
        steps.push(g.constant(Tensor::matrix(1, row.len(), row.clone())?));
    }
    let h = lstm_graph(&mut g, &vars, &steps, params.hidden())?;
    Ok(g.value(h).data().to_vec())
}

/// PCA projection of a pooled vector; empty news maps to zeros.
pub fn news_feature(pooled: Option<&[f64]>, basis: &PcaBasis) -> Result<Vec<f64>> {
    match pooled {
        Some(p) => basis.transform(p),
        None => Ok(vec![0.0; basis.output_dim()]),
    }
}

/// Widths of the fused channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedLayout {
    pub d_macro: usize,
    pub d_firm: usize,
    pub d_news: usize,
}

impl FusedLayout {
    pub fn dim(&self) -> usize {
        self.d_macro + self.d_firm + self.d_news
    }

    pub fn macro_range(&self) -> Range<usize> {
        0..self.d_macro
    }

    pub fn firm_range(&self) -> Range<usize> {
        self.d_macro..self.d_macro + self.d_firm
    }

    pub fn news_range(&self) -> Range<usize> {
        self.d_macro + self.d_firm..self.dim()
    }

    /// Coordinate names: `macro_k`, the characteristic names, `news_pck`.
    pub fn feature_names(&self, char_names: &[String]) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.d_macro).map(|k| format!("macro_{k}")).collect();
        names.extend(char_names.iter().cloned());
        names.extend((1..=self.d_news).map(|k| format!("news_pc{k}")));
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub x: Vec<f64>,
    pub layout: FusedLayout,
}

impl FusedFeatures {
    pub fn macro_part(&self) -> &[f64] {
        &self.x[self.layout.macro_range()]
    }

    pub fn firm_part(&self) -> &[f64] {
        &self.x[self.layout.firm_range()]
    }

    pub fn news_part(&self) -> &[f64] {
        &self.x[self.layout.news_range()]
    }
}

pub fn fuse(macro_state: &[f64], firm: &[f64], news: &[f64], layout: FusedLayout) -> Result<FusedFeatures> {
    for (name, got, want) in [
        ("macro", macro_state.len(), layout.d_macro),
        ("firm", firm.len(), layout.d_firm),
        ("news", news.len(), layout.d_news),
    ] {
        if got != want {
            return Err(Error::shape("fuse", format!("{name} channel of dim {want}"), format!("dim {got}")));
        }
    }
    Ok(FusedFeatures {
        x: [macro_state, firm, news].concat(),
        layout,
    })
}

/// One period of model-ready inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodBlock {
    pub period: i64,
    /// `(K + 1) × d_macro`, oldest row first.
    pub macro_window: Vec<f64>,
    /// Indices into [`PreparedPanel::asset_ids`].
    pub assets: Vec<usize>,
    pub returns: Vec<f64>,
    /// `n × d_F` rank-normalized characteristics.
    pub firm: Vec<f64>,
    /// Sentence rows of each observation in the arena; `None` when empty.
    pub news: Vec<Option<Range<usize>>>,
}

/// Panel joined with macro windows and news, with characteristics ranked
/// per period. Only periods with a complete macro window are kept.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPanel {
    char_names: Vec<String>,
    asset_ids: Vec<String>,
    blocks: Vec<PeriodBlock>,
    d_macro: usize,
    d_emb: usize,
    window_k: usize,
    arena: Vec<f64>,
}

impl PreparedPanel {
    pub fn build(
        panel: &Panel,
        macro_series: &MacroSeries,
        embeddings: &EmbeddingSet,
        cfg: &FeatureConfig,
    ) -> Result<Self> {
        if panel.n_chars() == 0 {
            return Err(Error::InvalidArgument("panel has no characteristics".into()));
        }
        let panel = apply_missing_policy(panel, cfg.missing_chars);
        let asset_ids: Vec<String> = panel.asset_counts().keys().cloned().collect();
        let index: BTreeMap<&str, usize> = asset_ids.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
        let d_f = panel.n_chars();
        let d_emb = embeddings.dim();
        let mut arena = Vec::new();
        let mut last_news: BTreeMap<usize, Range<usize>> = BTreeMap::new();
        let mut blocks = Vec::new();
        let mut short_window = 0usize;

        for (period, slice) in panel.by_period() {
            let assets: Vec<usize> = slice.iter().map(|o| index[o.asset_id.as_str()]).collect();
            let mut news = Vec::with_capacity(slice.len());
            for (o, &a) in slice.iter().zip(&assets) {
                let list = embeddings.get(period, &o.asset_id);
                if list.is_empty() {
                    news.push(match cfg.empty_news {
                        EmptyNewsPolicy::Zero => None,
                        EmptyNewsPolicy::CarryForward => last_news.get(&a).cloned(),
                    });
                } else {
                    let start = arena.len() / d_emb;
                    for v in list {
                        arena.extend_from_slice(v);
                    }
                    let r = start..start + list.len();
                    last_news.insert(a, r.clone());
                    news.push(Some(r));
                }
            }
            let Some(window) = macro_series.window(period, cfg.window_k) else {
                short_window += 1;
                continue;
            };
            let mut firm = vec![0.0; slice.len() * d_f];
            for j in 0..d_f {
                let col: Vec<f64> = slice
                    .iter()
                    .map(|o| o.characteristics[j].expect("missing values resolved"))
                    .collect();
                for (r, v) in rank_normalize(&col).into_iter().enumerate() {
                    firm[r * d_f + j] = v;
                }
            }
            blocks.push(PeriodBlock {
                period,
                macro_window: window.concat(),
                assets,
                returns: slice.iter().map(|o| o.excess_return_next).collect(),
                firm,
                news,
            });
        }
        if short_window > 0 {
            log::info!(
                "excluded {short_window} periods without a complete {}-step macro window",
                cfg.window_k + 1
            );
        }
        if blocks.is_empty() {
            return Err(Error::data("panel", None, "no period has a complete macro window"));
        }
        Ok(PreparedPanel {
            char_names: panel.char_names().to_vec(),
            asset_ids,
            blocks,
            d_macro: macro_series.dim(),
            d_emb,
            window_k: cfg.window_k,
            arena,
        })
    }

    pub fn char_names(&self) -> &[String] {
        &self.char_names
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn blocks(&self) -> &[PeriodBlock] {
        &self.blocks
    }

    pub fn periods(&self) -> Vec<i64> {
        self.blocks.iter().map(|b| b.period).collect()
    }

    pub fn d_firm(&self) -> usize {
        self.char_names.len()
    }

    pub fn d_macro(&self) -> usize {
        self.d_macro
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn window_k(&self) -> usize {
        self.window_k
    }

    /// Sentence vector `row` of the arena.
    pub fn sentence(&self, row: usize) -> &[f64] {
        &self.arena[row * self.d_emb..(row + 1) * self.d_emb]
    }

    /// Indices of blocks whose period lies in `[start, end]`.
    pub fn blocks_in(&self, start: i64, end: i64) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&b| (start..=end).contains(&self.blocks[b].period))
            .collect()
    }

    /// Stacks the selected periods into one batch.
    pub fn batch(&self, block_idx: &[usize]) -> Result<Batch> {
        if block_idx.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let k1 = self.window_k + 1;
        let d_f = self.d_firm();
        let n_p = block_idx.len();
        let mut macro_steps = vec![Vec::with_capacity(n_p * self.d_macro); k1];
        let mut periods = Vec::with_capacity(n_p);
        let mut obs_period = Vec::new();
        let mut obs_asset = Vec::new();
        let mut local: BTreeMap<usize, usize> = BTreeMap::new();
        let mut asset_global = Vec::new();
        let mut returns = Vec::new();
        let mut firm = Vec::new();
        let mut sentences = Vec::new();
        let mut sent_group = Vec::new();
        let mut group_obs = Vec::new();

        for (lp, &bi) in block_idx.iter().enumerate() {
            let b = &self.blocks[bi];
            periods.push(b.period);
            for (s, step) in macro_steps.iter_mut().enumerate() {
                step.extend_from_slice(&b.macro_window[s * self.d_macro..(s + 1) * self.d_macro]);
            }
            for (r, &a) in b.assets.iter().enumerate() {
                let obs = obs_period.len();
                obs_period.push(lp);
                let next = local.len();
                let la = *local.entry(a).or_insert_with(|| {
                    asset_global.push(a);
                    next
                });
                obs_asset.push(la);
                returns.push(b.returns[r]);
                firm.extend_from_slice(&b.firm[r * d_f..(r + 1) * d_f]);
                if let Some(range) = &b.news[r] {
                    let grp = group_obs.len();
                    group_obs.push(obs);
                    for row in range.clone() {
                        sentences.extend_from_slice(self.sentence(row));
                        sent_group.push(grp);
                    }
                }
            }
        }
        let n = returns.len();
        let mut asset_counts = vec![0usize; asset_global.len()];
        for &a in &obs_asset {
            asset_counts[a] += 1;
        }
        let n_s = sent_group.len();
        Ok(Batch {
            periods,
            macro_steps: macro_steps
                .into_iter()
                .map(|d| Tensor::from_parts(vec![n_p, self.d_macro], d))
                .collect(),
            obs_period,
            obs_asset,
            asset_global,
            asset_counts,
            returns: Tensor::from_parts(vec![n], returns),
            firm: Tensor::from_parts(vec![n, d_f], firm),
            sentences: (n_s > 0).then(|| Tensor::from_parts(vec![n_s, self.d_emb], sentences)),
            sent_group,
            group_obs,
        })
    }
}

/// Flattened inputs of a set of periods.
#[derive(Clone, Debug)]
pub struct Batch {
    pub periods: Vec<i64>,
    /// `K + 1` tensors of shape `B × d_macro`, oldest first.
    pub macro_steps: Vec<Tensor>,
    /// Local period index of each observation.
    pub obs_period: Vec<usize>,
    /// Local asset index of each observation.
    pub obs_asset: Vec<usize>,
    /// Global asset index of each local asset.
    pub asset_global: Vec<usize>,
    /// `T_i` of each local asset within the batch.
    pub asset_counts: Vec<usize>,
    pub returns: Tensor,
    pub firm: Tensor,
    pub sentences: Option<Tensor>,
    /// Non-empty news group of each sentence row.
    pub sent_group: Vec<usize>,
    /// Observation of each non-empty news group.
    pub group_obs: Vec<usize>,
}

impl Batch {
    pub fn n_obs(&self) -> usize {
        self.obs_period.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_assets(&self) -> usize {
        self.asset_global.len()
    }
}

/// The φ-side feature parameters together with the frozen PCA basis.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams {
    pub attention: AttentionParams,
    pub lstm: LstmParams,
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub attention: AttentionVars,
    pub lstm: LstmVars,
}

/// Pooled news vectors of every non-empty observation in `batch`, as rows.
pub fn pooled_news(batch: &Batch, attention: &AttentionParams) -> Result<Option<Tensor>> {
    let Some(sent) = &batch.sentences else {
        return Ok(None);
    };
    let mut g = Graph::new();
    let vars = attention.register(&mut g, false);
    let e = g.constant(sent.clone());
    let (pooled, _) = attend_pool_graph(&mut g, &vars, e, &batch.sent_group, batch.group_obs.len())?;
    Ok(Some(g.value(pooled).clone()))
}

/// Fits the news PCA on pooled vectors of the given (training) blocks.
pub fn fit_news_pca(prep: &PreparedPanel, blocks: &[usize], attention: &AttentionParams, d_n: usize) -> Result<PcaBasis> {
    let batch = prep.batch(blocks)?;
    let pooled = pooled_news(&batch, attention)?
        .ok_or_else(|| Error::data("embeddings", None, "no news in the training range"))?;
    let n = pooled.dims2().0;
    if n < d_n + 1 {
        return Err(Error::data(
            "embeddings",
            None,
            format!("{n} pooled news vectors in the training range, need at least {}", d_n + 1),
        ));
    }
    let basis = pca_fit(&pooled, d_n)?;
    if basis.explained_variance().iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical(
            "news PCA: pooled training vectors are identical (covariance has rank zero)".into(),
        ));
    }
    Ok(basis)
}

/// Builds the fused feature matrix (`n × (d_I + d_F + d_N)`) of `batch` on `g`.
pub fn features_graph(
    g: &mut Graph,
    vars: &FeatureVars,
    batch: &Batch,
    basis: &PcaBasis,
    cfg: &FeatureConfig,
) -> Result<Var> {
    let n = batch.n_obs();
    let d_i = cfg.d_i;
    let d_n = basis.output_dim();
    let macro_x = if cfg.zero_channels.macro_ {
        g.constant(Tensor::zeros(&[n, d_i]))
    } else {
        let steps: Vec<Var> = batch.macro_steps.iter().map(|t| g.constant(t.clone())).collect();
        let h = lstm_graph(g, &vars.lstm, &steps, d_i)?;
        g.gather_rows(h, &batch.obs_period)?
    };
    let firm = if cfg.zero_channels.firm {
        g.constant(Tensor::zeros(batch.firm.shape()))
    } else {
        g.constant(batch.firm.clone())
    };
    let news = match (&batch.sentences, cfg.zero_channels.news) {
        (Some(sent), false) => {
            let e = g.constant(sent.clone());
            let (pooled, _) = attend_pool_graph(g, &vars.attention, e, &batch.sent_group, batch.group_obs.len())?;
            let comps = g.constant(basis.components().clone());
            let shift: Vec<f64> = basis.transform(&vec![0.0; basis.input_dim()])?;
            let shift = g.constant(Tensor::vector(shift)?);
            let proj = g.affine(pooled, comps, Some(shift))?;
            g.segment_sum(proj, &batch.group_obs, n)?
        }
        _ => g.constant(Tensor::zeros(&[n, d_n])),
    };
    g.concat(&[macro_x, firm, news])
}
