//! Point-cloud condition encoders and the hourglass causal decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use seamkit::mesh::Vec3;
use seamkit::sampler::{fps_anchors, ConditioningClouds};
use seamkit::token::{TokenSequence, BOS, EOS};

use crate::config::{level_lengths, ModelConfig, COORD_FACTOR, ENDPOINT_FACTOR};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::Mat;

pub const BRANCHES: [&str; 2] = ["topo", "geom"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token {token} at position {position} is outside the vocabulary")]
    TokenRange { position: usize, token: u16 },
    #[error("{branch} cloud has {found} points, the encoder needs at least {needed}")]
    CloudTooSmall {
        branch: &'static str,
        found: usize,
        needed: usize,
    },
    #[error("incomplete sequence: {0}")]
    Incomplete(String),
    #[error("empty token prefix")]
    EmptyPrefix,
    #[error("invalid sampling settings: {0}")]
    InvalidSampling(String),
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

fn ones(cols: usize) -> Mat {
    Mat::from_vec(1, cols, vec![1.0; cols])
}

/// Parameters drawn from the config seed. The layout (names, order, shapes)
/// depends only on the config.
pub fn init_params(config: &ModelConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let hidden = config.ffn_mult * d;
    let w = 1.0 / (d as f64).sqrt();
    let residual = w / (2.0 * config.layers.max(1) as f64).sqrt();
    let mut store = ParamStore::empty(config.clone());
    for branch in BRANCHES {
        let p = format!("enc.{branch}");
        store.push(format!("{p}.embed.w"), normal_matrix(&mut rng, 3, d, 1.0));
        store.push(format!("{p}.embed.b"), normal_matrix(&mut rng, 1, d, 0.1));
        store.push(format!("{p}.q_norm"), ones(d));
        store.push(format!("{p}.kv_norm"), ones(d));
        for m in ["wq", "wk", "wv"] {
            store.push(format!("{p}.{m}"), normal_matrix(&mut rng, d, d, w));
        }
        store.push(format!("{p}.wo"), normal_matrix(&mut rng, d, d, w * 0.5));
        add_ffn(&mut store, &mut rng, &p, d, hidden, w * 0.5);
    }
    store.push("dec.embed".into(), normal_matrix(&mut rng, config.vocab, d, 1.0));
    for g in 0..config.layers {
        let p = format!("dec.l{g}");
        store.push(format!("{p}.attn_norm"), ones(d));
        if ModelConfig::is_cross_layer(g) {
            store.push(format!("{p}.cond_norm"), ones(d));
        }
        for m in ["wq", "wk", "wv"] {
            store.push(format!("{p}.{m}"), normal_matrix(&mut rng, d, d, w));
        }
        store.push(format!("{p}.wo"), normal_matrix(&mut rng, d, d, residual));
        add_ffn(&mut store, &mut rng, &p, d, hidden, residual);
    }
    store.push("dec.out_norm".into(), ones(d));
    store.push("dec.out.w".into(), normal_matrix(&mut rng, d, config.vocab, w));
    store.push("dec.out.b".into(), Mat::zeros(1, config.vocab));
    store
}

fn add_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize, out_std: f64) {
    store.push(format!("{prefix}.ffn_norm"), ones(d));
    store.push(format!("{prefix}.ffn.w1"), normal_matrix(rng, d, hidden, 1.0 / (d as f64).sqrt()));
    store.push(format!("{prefix}.ffn.b1"), Mat::zeros(1, hidden));
    store.push(format!("{prefix}.ffn.w2"), normal_matrix(rng, hidden, d, out_std));
    store.push(format!("{prefix}.ffn.b2"), Mat::zeros(1, d));
}

/// One branch's cloud in canonical order with its FPS anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    pub points: Mat,
    pub anchors: Mat,
}

impl PreparedCloud {
    /// Sorts the points lexicographically, so the encoding does not depend on
    /// input order, then picks `l` anchors by farthest-point sampling.
    pub fn new(points: &[Vec3], l: usize, branch: &'static str) -> Result<Self, ModelError> {
        if points.len() < l {
            return Err(ModelError::CloudTooSmall {
                branch,
                found: points.len(),
                needed: l,
            });
        }
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| {
            a.x.total_cmp(&b.x)
                .then(a.y.total_cmp(&b.y))
                .then(a.z.total_cmp(&b.z))
        });
        let anchors = fps_anchors(&sorted, l).map_err(|_| ModelError::CloudTooSmall {
            branch,
            found: points.len(),
            needed: l,
        })?;
        let to_mat = |pts: &mut dyn Iterator<Item = Vec3>, rows: usize| {
            Mat::from_vec(rows, 3, pts.flat_map(|p| [p.x, p.y, p.z]).collect())
        };
        Ok(Self {
            points: to_mat(&mut sorted.iter().copied(), sorted.len()),
            anchors: to_mat(&mut anchors.iter().map(|&i| sorted[i]), l),
        })
    }
}

/// Both prepared branches of one conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub topo: PreparedCloud,
    pub geom: PreparedCloud,
}

impl Condition {
    pub fn prepare(clouds: &ConditioningClouds, l: usize) -> Result<Self, ModelError> {
        Ok(Self {
            topo: PreparedCloud::new(&clouds.topo_points, l, "topology")?,
            geom: PreparedCloud::new(&clouds.geom_points, l, "geometry")?,
        })
    }
}

fn linear_norm(tape: &mut Tape, x: NodeId, gain: &str) -> NodeId {
    let n = tape.rms_norm(x);
    let g = tape.param(gain);
    tape.mul_row(n, g)
}

/// Multi-head attention of `queries` over `source` (both already
/// normalized), projected by the `{prefix}.w*` matrices.
fn attention(tape: &mut Tape, prefix: &str, queries: NodeId, source: NodeId, causal: bool) -> NodeId {
    let config = &tape.params().config;
    let (d, heads) = (config.d, config.heads);
    let dh = d / heads;
    let wq = tape.param(&format!("{prefix}.wq"));
    let wk = tape.param(&format!("{prefix}.wk"));
    let wv = tape.param(&format!("{prefix}.wv"));
    let wo = tape.param(&format!("{prefix}.wo"));
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(source, wk);
    let v = tape.matmul(source, wv);
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, causal);
        outputs.push(tape.matmul(weights, vh));
    }
    let joined = if heads == 1 { outputs[0] } else { tape.concat_cols(&outputs) };
    tape.matmul(joined, wo)
}

fn feed_forward(tape: &mut Tape, prefix: &str, x: NodeId) -> NodeId {
    let n = linear_norm(tape, x, &format!("{prefix}.ffn_norm"));
    let w1 = tape.param(&format!("{prefix}.ffn.w1"));
    let b1 = tape.param(&format!("{prefix}.ffn.b1"));
    let w2 = tape.param(&format!("{prefix}.ffn.w2"));
    let b2 = tape.param(&format!("{prefix}.ffn.b2"));
    let h = tape.matmul(n, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let o = tape.matmul(h, w2);
    let o = tape.add_row(o, b2);
    tape.add(x, o)
}

fn encode_branch(tape: &mut Tape, branch: &str, cloud: &PreparedCloud) -> NodeId {
    let p = format!("enc.{branch}");
    let w = tape.param(&format!("{p}.embed.w"));
    let b = tape.param(&format!("{p}.embed.b"));
    let pts = tape.constant(cloud.points.clone());
    let anchors = tape.constant(cloud.anchors.clone());
    let ep = tape.matmul(pts, w);
    let ep = tape.add_row(ep, b);
    let eq = tape.matmul(anchors, w);
    let eq = tape.add_row(eq, b);
    let q = linear_norm(tape, eq, &format!("{p}.q_norm"));
    let kv = linear_norm(tape, ep, &format!("{p}.kv_norm"));
    let a = attention(tape, &p, q, kv, false);
    let x = tape.add(eq, a);
    feed_forward(tape, &p, x)
}

/// The `(2l) x d` condition embedding: topology tokens, then geometry tokens.
pub fn encode_condition_node(tape: &mut Tape, cond: &Condition) -> NodeId {
    let topo = encode_branch(tape, "topo", &cond.topo);
    let geom = encode_branch(tape, "geom", &cond.geom);
    tape.concat_rows(&[topo, geom])
}

pub fn encode_condition(params: &ParamStore, cond: &Condition) -> Mat {
    let mut tape = Tape::new(params);
    let out = encode_condition_node(&mut tape, cond);
    tape.value(out).clone()
}

/// Sinusoidal position encoding, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            m.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

fn block(tape: &mut Tape, g: usize, x: NodeId, cond: NodeId) -> NodeId {
    let p = format!("dec.l{g}");
    let n = linear_norm(tape, x, &format!("{p}.attn_norm"));
    let a = if ModelConfig::is_cross_layer(g) {
        let c = linear_norm(tape, cond, &format!("{p}.cond_norm"));
        attention(tape, &p, n, c, false)
    } else {
        attention(tape, &p, n, n, true)
    };
    let x = tape.add(x, a);
    feed_forward(tape, &p, x)
}

fn stack(tape: &mut Tape, layers: std::ops::Range<usize>, mut x: NodeId, cond: NodeId) -> NodeId {
    for g in layers {
        x = block(tape, g, x, cond);
    }
    x
}

/// Normalized final hidden states, `n x d`.
pub fn decoder_hidden_node(tape: &mut Tape, tokens: &[u16], cond: NodeId) -> Result<NodeId, ModelError> {
    let config = tape.params().config.clone();
    if tokens.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= config.vocab) {
        return Err(ModelError::TokenRange { position, token });
    }
    let n = tokens.len();
    let [_, n1, _] = level_lengths(n);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let table = tape.param("dec.embed");
    let x = tape.gather(table, &ids);
    let pe = tape.constant(positional_encoding(n, config.d));
    let x = tape.add(x, pe);

    let sizes = config.stack_sizes();
    let mut bounds = [0usize; 6];
    for i in 0..5 {
        bounds[i + 1] = bounds[i] + sizes[i];
    }
    let fine = stack(tape, bounds[0]..bounds[1], x, cond);
    let pooled = tape.shift_pool(fine, COORD_FACTOR);
    let mid = stack(tape, bounds[1]..bounds[2], pooled, cond);
    let pooled = tape.shift_pool(mid, ENDPOINT_FACTOR);
    let coarse = stack(tape, bounds[2]..bounds[3], pooled, cond);
    let up = tape.repeat_up(coarse, ENDPOINT_FACTOR, n1);
    let mid = tape.add(up, mid);
    let mid = stack(tape, bounds[3]..bounds[4], mid, cond);
    let up = tape.repeat_up(mid, COORD_FACTOR, n);
    let fine = tape.add(up, fine);
    let fine = stack(tape, bounds[4]..bounds[5], fine, cond);

    Ok(linear_norm(tape, fine, "dec.out_norm"))
}

/// Next-token logits for every prefix position, `n x vocab`.
pub fn decoder_logits_node(tape: &mut Tape, tokens: &[u16], cond: NodeId) -> Result<NodeId, ModelError> {
    let h = decoder_hidden_node(tape, tokens, cond)?;
    let w = tape.param("dec.out.w");
    let b = tape.param("dec.out.b");
    let logits = tape.matmul(h, w);
    Ok(tape.add_row(logits, b))
}

/// Logits for the last prefix position only.
pub fn last_logits(params: &ParamStore, tokens: &[u16], cond: &Mat) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new(params);
    let c = tape.constant(cond.clone());
    let h = decoder_hidden_node(&mut tape, tokens, c)?;
    let h = tape.value(h);
    let row = Mat::from_vec(1, h.cols, h.row(h.rows - 1).to_vec());
    let mut out = crate::tensor::matmul(&row, false, params.get("dec.out.w"), false);
    out.add_assign(params.get("dec.out.b"));
    Ok(out.data)
}

pub fn decoder_logits(params: &ParamStore, tokens: &[u16], cond: &Mat) -> Result<Mat, ModelError> {
    let mut tape = Tape::new(params);
    let c = tape.constant(cond.clone());
    let out = decoder_logits_node(&mut tape, tokens, c)?;
    Ok(tape.value(out).clone())
}

/// Scalar node: sum of log-probabilities of tokens `1..n` given their
/// prefixes. No layout checks.
pub fn path_logprob_node(tape: &mut Tape, tokens: &[u16], cond: NodeId) -> Result<NodeId, ModelError> {
    let logits = decoder_logits_node(tape, tokens, cond)?;
    let targets: Vec<Option<usize>> = (0..tokens.len())
        .map(|i| tokens.get(i + 1).map(|&t| t as usize))
        .collect();
    Ok(tape.log_softmax_pick(logits, &targets))
}

pub fn check_complete(tokens: &TokenSequence) -> Result<(), ModelError> {
    let t = &tokens.tokens;
    if t.first() != Some(&BOS) {
        return Err(ModelError::Incomplete("sequence must start with BOS".into()));
    }
    if t.len() < 2 || t.last() != Some(&EOS) {
        return Err(ModelError::Incomplete("sequence must end with EOS".into()));
    }
    Ok(())
}

/// `log pi(tokens | condition)` for a complete sequence.
pub fn sequence_logprob(params: &ParamStore, tokens: &TokenSequence, cond: &Condition) -> Result<f64, ModelError> {
    check_complete(tokens)?;
    let mut tape = Tape::new(params);
    let c = encode_condition_node(&mut tape, cond);
    let lp = path_logprob_node(&mut tape, &tokens.tokens, c)?;
    Ok(tape.value(lp).data[0])
}

/// Same as [`sequence_logprob`] with a precomputed condition embedding.
pub fn sequence_logprob_with(params: &ParamStore, tokens: &TokenSequence, cond: &Mat) -> Result<f64, ModelError> {
    check_complete(tokens)?;
    let mut tape = Tape::new(params);
    let c = tape.constant(cond.clone());
    let lp = path_logprob_node(&mut tape, &tokens.tokens, c)?;
    Ok(tape.value(lp).data[0])
}
