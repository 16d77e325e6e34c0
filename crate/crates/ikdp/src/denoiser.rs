//! The conditional denoiser: a transformer encoder over per-joint tokens,
//! fusion of the pooled feature with a sinusoidal time embedding and the
//! projected target condition, a decoder stack conditioned by broadcast
//! addition, and a zero-initialized scalar head with a residual connection
//! back onto the noisy input.
//!
//! A whole batch runs as one graph: per-token work flattens samples into
//! a [batch*N, d] matrix and attention stays within per-sample row blocks.

use thiserror::Error;

use crate::autograd::{NodeId, Tape};
use crate::diffusion::Parameterization;
use crate::kinematics::{ChainSpec, Point2};
use crate::optim::ParamSet;
use crate::tensor::{Array, Rng, Shape, TensorError};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    BadConfig(String),
    #[error("time embedding dimension must be even, got {0}")]
    OddEmbedDim(usize),
    #[error("batch inputs disagree: {0}")]
    BatchMismatch(String),
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: String },
    #[error("parameter {name} has shape {got}, expected {expected}")]
    ParamShape {
        name: String,
        expected: String,
        got: String,
    },
    #[error("parameter list mismatch at position {pos}: expected {expected}, found {found}")]
    ParamName {
        pos: usize,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters. All weight shapes derive from this.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub n_joints: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_hidden: usize,
    pub time_embed_dim: usize,
    pub param: Parameterization,
}

impl DenoiserConfig {
    /// Defaults sized so desk-scale CPU training finishes in minutes.
    pub fn new(n_joints: usize) -> DenoiserConfig {
        DenoiserConfig {
            n_joints,
            embed_dim: 64,
            num_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            mlp_hidden: 128,
            time_embed_dim: 64,
            param: Parameterization::PredictX0,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.n_joints == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.mlp_hidden == 0
            || self.time_embed_dim == 0
        {
            return Err(DenoiserError::BadConfig("all dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(DenoiserError::BadConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(DenoiserError::OddEmbedDim(self.time_embed_dim));
        }
        Ok(())
    }

    /// Width of the fused (pooled + time + condition) vector input.
    fn fusion_in(&self) -> usize {
        self.embed_dim + self.time_embed_dim + self.embed_dim
    }
}

#[derive(Clone, Copy)]
enum InitKind {
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_w: usize,
    tok_b: usize,
    pos: usize,
    enc: Vec<BlockIdx>,
    cond_w: usize,
    cond_b: usize,
    fuse_w1: usize,
    fuse_b1: usize,
    fuse_w2: usize,
    fuse_b2: usize,
    dec: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

fn build_layout(cfg: &DenoiserConfig) -> (Vec<(String, Shape, InitKind)>, Layout) {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden;
    let mut tensors = Vec::new();
    let push = |tensors: &mut Vec<(String, Shape, InitKind)>, name: String, shape, kind| {
        tensors.push((name, shape, kind));
        tensors.len() - 1
    };
    let tok_w = push(&mut tensors, "tok.w".into(), Shape::d2(1, d), InitKind::Normal { fan_in: 1 });
    let tok_b = push(&mut tensors, "tok.b".into(), Shape::d1(d), InitKind::Zeros);
    let pos = push(
        &mut tensors,
        "pos".into(),
        Shape::d2(cfg.n_joints, d),
        InitKind::Normal { fan_in: d },
    );
    let block = |tensors: &mut Vec<(String, Shape, InitKind)>, prefix: String| -> BlockIdx {
        BlockIdx {
            ln1_g: push(tensors, format!("{prefix}.ln1.g"), Shape::d1(d), InitKind::Ones),
            ln1_b: push(tensors, format!("{prefix}.ln1.b"), Shape::d1(d), InitKind::Zeros),
            wq: push(tensors, format!("{prefix}.attn.wq"), Shape::d2(d, d), InitKind::Normal { fan_in: d }),
            bq: push(tensors, format!("{prefix}.attn.bq"), Shape::d1(d), InitKind::Zeros),
            wk: push(tensors, format!("{prefix}.attn.wk"), Shape::d2(d, d), InitKind::Normal { fan_in: d }),
            bk: push(tensors, format!("{prefix}.attn.bk"), Shape::d1(d), InitKind::Zeros),
            wv: push(tensors, format!("{prefix}.attn.wv"), Shape::d2(d, d), InitKind::Normal { fan_in: d }),
            bv: push(tensors, format!("{prefix}.attn.bv"), Shape::d1(d), InitKind::Zeros),
            wo: push(tensors, format!("{prefix}.attn.wo"), Shape::d2(d, d), InitKind::Normal { fan_in: d }),
            bo: push(tensors, format!("{prefix}.attn.bo"), Shape::d1(d), InitKind::Zeros),
            ln2_g: push(tensors, format!("{prefix}.ln2.g"), Shape::d1(d), InitKind::Ones),
            ln2_b: push(tensors, format!("{prefix}.ln2.b"), Shape::d1(d), InitKind::Zeros),
            ff_w1: push(tensors, format!("{prefix}.ff.w1"), Shape::d2(d, h), InitKind::Normal { fan_in: d }),
            ff_b1: push(tensors, format!("{prefix}.ff.b1"), Shape::d1(h), InitKind::Zeros),
            ff_w2: push(tensors, format!("{prefix}.ff.w2"), Shape::d2(h, d), InitKind::Normal { fan_in: h }),
            ff_b2: push(tensors, format!("{prefix}.ff.b2"), Shape::d1(d), InitKind::Zeros),
        }
    };
    let enc: Vec<BlockIdx> = (0..cfg.enc_layers)
        .map(|i| block(&mut tensors, format!("enc{i}")))
        .collect();
    let cond_w = push(&mut tensors, "cond.w".into(), Shape::d2(2, d), InitKind::Normal { fan_in: 2 });
    let cond_b = push(&mut tensors, "cond.b".into(), Shape::d1(d), InitKind::Zeros);
    let fin = cfg.fusion_in();
    let fuse_w1 = push(&mut tensors, "fuse.w1".into(), Shape::d2(fin, h), InitKind::Normal { fan_in: fin });
    let fuse_b1 = push(&mut tensors, "fuse.b1".into(), Shape::d1(h), InitKind::Zeros);
    let fuse_w2 = push(&mut tensors, "fuse.w2".into(), Shape::d2(h, d), InitKind::Normal { fan_in: h });
    let fuse_b2 = push(&mut tensors, "fuse.b2".into(), Shape::d1(d), InitKind::Zeros);
    let dec: Vec<BlockIdx> = (0..cfg.dec_layers)
        .map(|i| block(&mut tensors, format!("dec{i}")))
        .collect();
    let head_w = push(&mut tensors, "head.w".into(), Shape::d2(d, 1), InitKind::Zeros);
    let head_b = push(&mut tensors, "head.b".into(), Shape::d1(1), InitKind::Zeros);
    (
        tensors,
        Layout {
            tok_w,
            tok_b,
            pos,
            enc,
            cond_w,
            cond_b,
            fuse_w1,
            fuse_b1,
            fuse_w2,
            fuse_b2,
            dec,
            head_w,
            head_b,
        },
    )
}

/// The network's named weights plus precomputed index handles.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    set: ParamSet,
    layout: Layout,
}

impl DenoiserParams {
    /// Fresh weights: linears N(0, 1/fan_in), layer norms identity, the
    /// output head zeroed so the untrained network is the identity map
    /// on its input. Deterministic given the rng seed.
    pub fn init(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<DenoiserParams, DenoiserError> {
        cfg.validate()?;
        let (tensors, layout) = build_layout(cfg);
        let mut set = ParamSet::new();
        for (name, shape, kind) in tensors {
            let arr = match kind {
                InitKind::Zeros => Array::zeros(shape),
                InitKind::Ones => Array::filled(shape, 1.0),
                InitKind::Normal { fan_in } => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    let mut a = rng.randn(shape);
                    for v in a.values_mut() {
                        *v *= std as f32;
                    }
                    a
                }
            };
            set.push(&name, arr);
        }
        Ok(DenoiserParams { set, layout })
    }

    /// Rebuild from a stored tensor set, checking names and shapes
    /// against what the config derives.
    pub fn from_set(cfg: &DenoiserConfig, set: ParamSet) -> Result<DenoiserParams, DenoiserError> {
        cfg.validate()?;
        let (tensors, layout) = build_layout(cfg);
        if set.len() != tensors.len() {
            return Err(DenoiserError::ParamName {
                pos: set.len().min(tensors.len()),
                expected: format!("{} tensors", tensors.len()),
                found: format!("{} tensors", set.len()),
            });
        }
        for (i, (name, shape, _)) in tensors.iter().enumerate() {
            if set.name(i) != name {
                return Err(DenoiserError::ParamName {
                    pos: i,
                    expected: name.clone(),
                    found: set.name(i).to_string(),
                });
            }
            if set.array(i).shape() != *shape {
                return Err(DenoiserError::ParamShape {
                    name: name.clone(),
                    expected: shape.to_string(),
                    got: set.array(i).shape().to_string(),
                });
            }
        }
        Ok(DenoiserParams { set, layout })
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn into_set(self) -> ParamSet {
        self.set
    }
}

/// Sinusoidal step embedding: component 2i is `sin(t / 10000^(2i/dim))`,
/// component 2i+1 the matching cosine.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f32>, DenoiserError> {
    if dim % 2 != 0 {
        return Err(DenoiserError::OddEmbedDim(dim));
    }
    let mut out = vec![0.0f32; dim];
    let tf = t as f64;
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let (s, c) = (tf * freq).sin_cos();
        out[2 * i] = s as f32;
        out[2 * i + 1] = c as f32;
    }
    Ok(out)
}

/// Scale a target into the unit reach disk: (t_x / sum b, t_y / sum b).
pub fn normalized_target(chain: &ChainSpec, target: Point2) -> [f32; 2] {
    let r = chain.reach();
    [(target.x / r) as f32, (target.y / r) as f32]
}

/// Host-side condition embedding: normalized target through the learned
/// projection. The same projection runs inside the training graph.
pub fn embed_condition(
    params: &DenoiserParams,
    chain: &ChainSpec,
    target: Point2,
) -> Vec<f32> {
    let nm = normalized_target(chain, target);
    let w = params.set.array(params.layout.cond_w);
    let b = params.set.array(params.layout.cond_b);
    let d = w.shape().cols();
    let mut out = vec![0.0f32; d];
    for j in 0..d {
        let acc = nm[0] as f64 * w.values()[j] as f64
            + nm[1] as f64 * w.values()[d + j] as f64
            + b.values()[j] as f64;
        out[j] = acc as f32;
    }
    out
}

/// A recorded batch forward pass, ready for a loss node and backward.
pub struct BatchForward<'a> {
    pub tape: Tape<'a>,
    /// Output node: [batch*N, 1], theta0-prediction or eps-prediction.
    pub output: NodeId,
    /// Tape leaf of every parameter, aligned with the param set indices.
    pub param_nodes: Vec<NodeId>,
}

fn attention_block<'a>(
    tape: &mut Tape<'a>,
    x: NodeId,
    pn: &[NodeId],
    idx: &BlockIdx,
    cfg: &DenoiserConfig,
    label: &str,
) -> Result<NodeId, DenoiserError> {
    let n = cfg.n_joints;
    let dh = cfg.embed_dim / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let h = tape.layer_norm(x, pn[idx.ln1_g], pn[idx.ln1_b])?;
    let q = tape.linear(h, pn[idx.wq], pn[idx.bq])?;
    let k = tape.linear(h, pn[idx.wk], pn[idx.bk])?;
    let v = tape.linear(h, pn[idx.wv], pn[idx.bv])?;
    let mut merged: Option<NodeId> = None;
    for head in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let scores = tape.block_matmul_nt(qh, kh, n)?;
        let scaled = tape.scale(scores, scale as f32);
        let attn = tape.softmax_rows(scaled)?;
        let mixed = tape.block_matmul(attn, vh, n)?;
        merged = Some(match merged {
            None => mixed,
            Some(m) => tape.concat_cols(m, mixed)?,
        });
    }
    let o = tape.linear(merged.expect("at least one head"), pn[idx.wo], pn[idx.bo])?;
    let x = tape.add(x, o)?;
    check_finite(tape, x, &format!("{label}.attn"))?;

    let h2 = tape.layer_norm(x, pn[idx.ln2_g], pn[idx.ln2_b])?;
    let f1 = tape.linear(h2, pn[idx.ff_w1], pn[idx.ff_b1])?;
    let fg = tape.gelu(f1);
    let f2 = tape.linear(fg, pn[idx.ff_w2], pn[idx.ff_b2])?;
    let x = tape.add(x, f2)?;
    check_finite(tape, x, &format!("{label}.ff"))?;
    Ok(x)
}

fn check_finite(tape: &Tape<'_>, id: NodeId, layer: &str) -> Result<(), DenoiserError> {
    if tape.values(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DenoiserError::NonFinite { layer: layer.to_string() })
    }
}

/// Record the forward pass of a whole batch on one tape.
///
/// `theta_t` is `batch` rows of N angles; `ts` and `targets` give each
/// sample's diffusion step and conditioning target.
pub fn forward_batch_graph<'a>(
    params: &'a DenoiserParams,
    cfg: &DenoiserConfig,
    chain: &ChainSpec,
    theta_t: &'a [f32],
    ts: &[usize],
    targets: &[Point2],
) -> Result<BatchForward<'a>, DenoiserError> {
    let n = cfg.n_joints;
    let batch = ts.len();
    if batch == 0 || theta_t.len() != batch * n || targets.len() != batch {
        return Err(DenoiserError::BatchMismatch(format!(
            "theta {} angles, {} steps, {} targets for N={n}",
            theta_t.len(),
            ts.len(),
            targets.len()
        )));
    }
    if chain.num_joints() != n {
        return Err(DenoiserError::BatchMismatch(format!(
            "chain has {} joints, config expects {n}",
            chain.num_joints()
        )));
    }
    let mut tape = Tape::new();
    let pn: Vec<NodeId> = (0..params.set.len())
        .map(|i| tape.param(params.set.array(i)))
        .collect();
    let lay = &params.layout;

    // (1) one token per joint: scalar angle -> d-dim vector + position
    let tokens = tape.leaf_slice(theta_t, Shape::d2(batch * n, 1))?;
    let mut x = tape.linear(tokens, pn[lay.tok_w], pn[lay.tok_b])?;
    x = tape.add_tile_rows(x, pn[lay.pos])?;

    // (2) encoder over joint tokens
    for (i, idx) in lay.enc.iter().enumerate() {
        x = attention_block(&mut tape, x, &pn, idx, cfg, &format!("enc{i}"))?;
    }

    // (3) pooled feature ++ time embedding ++ condition
    let pooled = tape.block_mean_rows(x, n)?;
    let mut time_rows = Vec::with_capacity(batch * cfg.time_embed_dim);
    for &t in ts {
        time_rows.extend_from_slice(&time_embedding(t, cfg.time_embed_dim)?);
    }
    let time = tape.input(Array::from_vec(
        Shape::d2(batch, cfg.time_embed_dim),
        time_rows,
    )?);
    let mut cond_rows = Vec::with_capacity(batch * 2);
    for &t in targets {
        cond_rows.extend_from_slice(&normalized_target(chain, t));
    }
    let cond_in = tape.input(Array::from_vec(Shape::d2(batch, 2), cond_rows)?);
    let cond = tape.linear(cond_in, pn[lay.cond_w], pn[lay.cond_b])?;
    let cat = tape.concat_cols(pooled, time)?;
    let cat = tape.concat_cols(cat, cond)?;

    // (4) fusion MLP
    let f1 = tape.linear(cat, pn[lay.fuse_w1], pn[lay.fuse_b1])?;
    let fg = tape.gelu(f1);
    let fused = tape.linear(fg, pn[lay.fuse_w2], pn[lay.fuse_b2])?;
    check_finite(&tape, fused, "fuse")?;

    // (5) decoder with the fused vector added to every token
    x = tape.add_block_rows(x, fused)?;
    for (i, idx) in lay.dec.iter().enumerate() {
        x = attention_block(&mut tape, x, &pn, idx, cfg, &format!("dec{i}"))?;
    }

    // (6) per-token scalar head, (7) residual onto the noisy input
    let head = tape.linear(x, pn[lay.head_w], pn[lay.head_b])?;
    let out = tape.add(head, tokens)?;
    check_finite(&tape, out, "head")?;

    Ok(BatchForward {
        tape,
        output: out,
        param_nodes: pn,
    })
}

/// Single-sample forward: the model output for one noisy state.
pub fn forward(
    params: &DenoiserParams,
    cfg: &DenoiserConfig,
    chain: &ChainSpec,
    theta_t: &[f32],
    t: usize,
    target: Point2,
) -> Result<Vec<f32>, DenoiserError> {
    let bf = forward_batch_graph(params, cfg, chain, theta_t, &[t], &[target])?;
    Ok(bf.tape.values(bf.output).to_vec())
}
