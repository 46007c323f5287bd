//! Adversarial training: ψ ascends and φ descends the penalized GMM loss,
//! alternating per iteration on mini-batches of whole periods, with
//! validation-based selection and a checksummed checkpoint format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::featpipe::{Batch, PreparedPanel};
use crate::sdfnet::{Model, Side};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// Plain gradient steps.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub batch_periods: usize,
    pub iterations: u64,
    pub eval_interval: u64,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: u64,
    pub optimizer: OptimizerKind,
    /// ψ ascent steps per φ descent step.
    pub update_ratio: u32,
    /// Recompute the forward pass after the ψ update before stepping φ.
    pub recompute_forward: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            lr_phi: 1e-3,
            lr_psi: 1e-3,
            batch_periods: 4,
            iterations: 20_000,
            eval_interval: 200,
            patience: 20,
            optimizer: OptimizerKind::Sgd,
            update_ratio: 1,
            recompute_forward: true,
        }
    }
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: RunConfig,
    pub data_digest: String,
    pub iteration: u64,
    /// Validation moment loss at `iteration` (no penalty term).
    pub val_loss: f64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn config_digest(&self) -> String {
        self.config.digest()
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm_phi: f64,
    pub grad_norm_psi: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Model,
    pub log: Vec<LogRow>,
    pub iterations_run: u64,
    pub stopped_early: bool,
}

struct Evaluation {
    total: f64,
    grads: Vec<Tensor>,
}

/// Registers `model` as trainable, builds the penalized loss on `batch` and
/// returns its value with gradients in [`Model::named_tensors`] order.
fn evaluate(model: &Model, batch: &Batch, lambda: f64) -> Result<Evaluation> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let fwd = model.forward(&mut g, &vars, batch)?;
    let total = penalized(&mut g, fwd.moment_loss, lambda)?;
    let value = g.value(total).data()[0];
    let grads = g.backward(total)?;
    Ok(Evaluation {
        total: value,
        grads: grads.leaves().map(|(_, t)| t.clone()).collect(),
    })
}

fn penalized(g: &mut Graph, moment_loss: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(moment_loss);
    }
    let leaves: Vec<Var> = g.leaves().iter().map(|(_, v)| *v).collect();
    let mut reg: Option<Var> = None;
    for v in leaves {
        let s = g.sq_norm(v)?;
        reg = Some(match reg {
            Some(r) => g.add(r, s)?,
            None => s,
        });
    }
    match reg {
        Some(r) => {
            let r = g.scale(r, lambda)?;
            g.add(moment_loss, r)
        }
        None => Ok(moment_loss),
    }
}

/// `(1/N) Σ_i (T_i/T) ‖m̂_i‖² + λ(‖φ‖² + ‖ψ‖²)` on the periods of `batch`.
pub fn empirical_loss(model: &Model, batch: &Batch, lambda: f64) -> Result<f64> {
    Ok(moment_loss(model, batch)? + lambda * (model.sq_norm(Side::Phi) + model.sq_norm(Side::Psi)))
}

/// Penalized loss and its gradient for every trainable tensor, by name.
pub fn loss_gradients(model: &Model, batch: &Batch, lambda: f64) -> Result<(f64, Vec<(String, Tensor)>)> {
    let e = evaluate(model, batch, lambda)?;
    let names = model.named_tensors().into_iter().map(|(n, _, _)| n);
    Ok((e.total, names.zip(e.grads).collect()))
}

/// The unpenalized moment loss, as used for validation.
pub fn moment_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false);
    let fwd = model.forward(&mut g, &vars, batch)?;
    Ok(g.value(fwd.moment_loss).data()[0])
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: BTreeMap<&'static str, i32>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, _, t)| t.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: BTreeMap::new(),
        }
    }
}

enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    /// Moves `side`'s tensors along `sign · grads` with step `lr`.
    fn step(&mut self, model: &mut Model, side: Side, grads: &[Tensor], lr: f64, sign: f64) {
        if lr == 0.0 {
            return;
        }
        let t = match self {
            Optimizer::Sgd => 0,
            Optimizer::Adam(a) => {
                let t = a.t.entry(side.as_str()).or_insert(0);
                *t += 1;
                *t
            }
        };
        for (k, ((s, param), grad)) in model.tensors_mut().into_iter().zip(grads).enumerate() {
            if s != side {
                continue;
            }
            let p = param.data_mut();
            match self {
                Optimizer::Sgd => {
                    for (x, g) in p.iter_mut().zip(grad.data()) {
                        *x += sign * lr * g;
                    }
                }
                Optimizer::Adam(a) => {
                    let c1 = 1.0 - Adam::B1.powi(t);
                    let c2 = 1.0 - Adam::B2.powi(t);
                    for (j, (x, g)) in p.iter_mut().zip(grad.data()).enumerate() {
                        let m = &mut a.m[k][j];
                        let v = &mut a.v[k][j];
                        *m = Adam::B1 * *m + (1.0 - Adam::B1) * g;
                        *v = Adam::B2 * *v + (1.0 - Adam::B2) * g * g;
                        *x += sign * lr * (*m / c1) / ((*v / c2).sqrt() + Adam::EPS);
                    }
                }
            }
        }
    }
}

fn grad_norm(model: &Model, grads: &[Tensor], side: Side) -> f64 {
    model
        .named_tensors()
        .iter()
        .zip(grads)
        .filter(|((_, s, _), _)| *s == side)
        .map(|(_, g)| g.sq_norm())
        .sum::<f64>()
        .sqrt()
}

fn diverged(iteration: u64, reason: String, best: &Checkpoint) -> Error {
    Error::Diverged {
        iteration,
        reason,
        last_good: Box::new(best.clone()),
    }
}

fn guard<T>(r: Result<T>, iteration: u64, best: &Checkpoint) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } | Error::Numerical(_) => diverged(iteration, e.to_string(), best),
        other => other,
    })
}

/// Runs the alternating minimax loop and returns the checkpoint with the
/// lowest validation moment loss (evaluated with the current ψ).
pub fn train(
    mut model: Model,
    prep: &PreparedPanel,
    train_blocks: &[usize],
    val_blocks: &[usize],
    config: &RunConfig,
    data_digest: &str,
) -> Result<TrainOutcome> {
    if train_blocks.is_empty() || val_blocks.is_empty() {
        return Err(Error::InvalidArgument("training and validation slices must be nonempty".into()));
    }
    let cfg = &config.train;
    let mut rng = crate::substream(config.seed, "train");
    let val_batch = prep.batch(val_blocks)?;
    let full_batch = (cfg.batch_periods >= train_blocks.len()).then(|| prep.batch(train_blocks)).transpose()?;
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd,
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(&model)),
    };

    let snapshot = |model: &Model, iteration: u64, val_loss: f64, rng: &ChaCha8Rng| Checkpoint {
        model: model.clone(),
        config: config.clone(),
        data_digest: data_digest.to_string(),
        iteration,
        val_loss,
        rng: RngState::capture(rng),
    };

    let v0 = moment_loss(&model, &val_batch)?;
    if !v0.is_finite() {
        return Err(Error::Numerical("validation loss at initialization is not finite".into()));
    }
    let mut best = snapshot(&model, 0, v0, &rng);
    let mut log = vec![LogRow {
        iteration: 0,
        train_loss: f64::NAN,
        val_loss: v0,
        grad_norm_phi: f64::NAN,
        grad_norm_psi: f64::NAN,
    }];
    let mut stale = 0u64;
    let mut stopped_early = false;
    let mut iterations_run = 0;

    for k in 1..=cfg.iterations {
        let sampled;
        let batch = match &full_batch {
            Some(b) => b,
            None => {
                let mut idx: Vec<usize> = sample(&mut rng, train_blocks.len(), cfg.batch_periods)
                    .into_iter()
                    .map(|i| train_blocks[i])
                    .collect();
                idx.sort_unstable();
                sampled = prep.batch(&idx)?;
                &sampled
            }
        };

        let mut psi_eval = guard(evaluate(&model, batch, cfg.lambda), k, &best)?;
        for r in 0..cfg.update_ratio {
            if r > 0 {
                psi_eval = guard(evaluate(&model, batch, cfg.lambda), k, &best)?;
            }
            opt.step(&mut model, Side::Psi, &psi_eval.grads, cfg.lr_psi, 1.0);
        }
        let phi_eval = if cfg.recompute_forward {
            guard(evaluate(&model, batch, cfg.lambda), k, &best)?
        } else {
            Evaluation {
                total: psi_eval.total,
                grads: psi_eval.grads.clone(),
            }
        };
        opt.step(&mut model, Side::Phi, &phi_eval.grads, cfg.lr_phi, -1.0);
        iterations_run = k;

        if !phi_eval.total.is_finite() {
            return Err(diverged(k, "training loss is not finite".into(), &best));
        }
        if k % cfg.eval_interval == 0 {
            let v = guard(moment_loss(&model, &val_batch), k, &best)?;
            if !v.is_finite() {
                return Err(diverged(k, "validation loss is not finite".into(), &best));
            }
            log.push(LogRow {
                iteration: k,
                train_loss: phi_eval.total,
                val_loss: v,
                grad_norm_phi: grad_norm(&model, &phi_eval.grads, Side::Phi),
                grad_norm_psi: grad_norm(&model, &psi_eval.grads, Side::Psi),
            });
            log::debug!("iteration {k}: train {:.6e}, val {:.6e}", phi_eval.total, v);
            if v < best.val_loss {
                best = snapshot(&model, k, v, &rng);
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        iterations_run,
        stopped_early,
    })
}

pub fn write_log(path: &Path, rows: &[LogRow], config_digest: &str) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "# config_digest={config_digest}").map_err(io)?;
    writeln!(out, "iteration,train_loss,val_loss,grad_norm_phi,grad_norm_psi").map_err(io)?;
    let cell = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            cell(r.train_loss),
            cell(r.val_loss),
            cell(r.grad_norm_phi),
            cell(r.grad_norm_psi)
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

const MAGIC: &[u8; 8] = b"ADVSDFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a checkpoint: magic, version, manifest length and text,
/// little-endian f64 payload, then a SHA-256 of everything before it.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = ck.model.all_tensors()?;
    let mut manifest = String::new();
    manifest.push_str(&format!("config_digest={}\n", ck.config.digest()));
    manifest.push_str(&format!("data_digest={}\n", ck.data_digest));
    manifest.push_str(&format!("iteration={}\n", ck.iteration));
    manifest.push_str(&format!("val_loss_bits={:016x}\n", ck.val_loss.to_bits()));
    manifest.push_str(&format!("rng_seed={}\n", hex::encode(ck.rng.seed)));
    manifest.push_str(&format!("rng_stream={}\n", ck.rng.stream));
    manifest.push_str(&format!("rng_word_pos={}\n", ck.rng.word_pos));
    manifest.push_str("dtype=f64le\n");
    manifest.push_str("config_begin\n");
    manifest.push_str(&ck.config.canonical_text());
    manifest.push_str("config_end\n");
    let mut offset = 0usize;
    for (name, side, t) in &tensors {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {name} {side} {} {offset}\n", shape.join("x")));
        offset += t.len() * 8;
    }

    let mut out = Vec::with_capacity(64 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, _, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(ck)?).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let found = hex::encode(Sha256::digest(body));
    let expected = hex::encode(trailer);
    if found != expected {
        return Err(Error::DigestMismatch {
            what: "checkpoint content",
            expected,
            found,
        });
    }
    let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let manifest = body
        .get(20..20 + mlen)
        .ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &body[20 + mlen..];

    let mut fields = BTreeMap::new();
    let mut config_text = String::new();
    let mut in_config = false;
    let mut tensors = BTreeMap::new();
    for line in manifest.lines() {
        if in_config {
            if line == "config_end" {
                in_config = false;
            } else {
                config_text.push_str(line);
                config_text.push('\n');
            }
            continue;
        }
        if line == "config_begin" {
            in_config = true;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, _side, shape, offset] = parts[..] else {
                return Err(bad(format!("malformed tensor entry `{line}`")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
            let len: usize = shape.iter().product();
            let raw = payload
                .get(offset..offset + len * 8)
                .ok_or_else(|| bad(format!("tensor `{name}` lies outside the payload")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name.to_string(), Tensor::new(shape, data)?);
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        } else {
            return Err(bad(format!("unrecognized manifest line `{line}`")));
        }
    }
    let field = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
    let config = RunConfig::parse(&config_text, "checkpoint config")?;
    let stored = field("config_digest")?;
    if config.digest() != stored {
        return Err(Error::DigestMismatch {
            what: "embedded config",
            expected: stored,
            found: config.digest(),
        });
    }
    let seed: [u8; 32] = hex::decode(field("rng_seed")?)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("bad rng_seed"))?;
    let model = Model::from_named(config.features.clone(), config.net.clone(), tensors)?;
    Ok(Checkpoint {
        model,
        config,
        data_digest: field("data_digest")?,
        iteration: field("iteration")?.parse().map_err(|_| bad("bad iteration"))?,
        val_loss: f64::from_bits(
            u64::from_str_radix(&field("val_loss_bits")?, 16).map_err(|_| bad("bad val_loss_bits"))?,
        ),
        rng: RngState {
            seed,
            stream: field("rng_stream")?.parse().map_err(|_| bad("bad rng_stream"))?,
            word_pos: field("rng_word_pos")?.parse().map_err(|_| bad("bad rng_word_pos"))?,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless its config digest is `expected`.
pub fn load_checkpoint_for(path: &Path, expected_config_digest: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let found = ck.config_digest();
    if found != expected_config_digest {
        return Err(Error::DigestMismatch {
            what: "config",
            expected: expected_config_digest.to_string(),
            found,
        });
    }
    Ok(ck)
}
