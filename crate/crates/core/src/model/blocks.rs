//! Individual network blocks, written against tape variables so each one can
//! be exercised and gradient-checked in isolation.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Convolution stack over time, ReLU after every block. Returns the
/// per-timestep feature map `[B, T, d_model]`.
pub fn backbone(tape: &mut Tape, frames: Var, convs: &[(Var, Var)]) -> Result<Var> {
    let mut h = frames;
    for &(w, b) in convs {
        let c = tape.conv1d(h, w, b)?;
        h = tape.relu(c);
    }
    Ok(h)
}

/// Mean over the time axis: `[B, T, d] -> [B, d]`.
pub fn pool_frames(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.mean_axis(features, 1)
}

/// Sinusoidal encoding of within-batch frame ranks `0..batch`.
pub fn positional_encoding(batch: usize, d_model: usize) -> Tensor {
    Tensor::from_fn([batch, d_model], |i| {
        let (pos, col) = (i / d_model, i % d_model);
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct IntraVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Additive attention over the timesteps of each frame. Scores
/// `w2ᵀ tanh(W1 x_t + b1) + b2` are softmaxed over time and used to pool
/// the feature map. Returns the pooled `[B, d]` and the weights `[B, T]`.
pub fn intra_frame_attention(tape: &mut Tape, features: Var, p: &IntraVars) -> Result<(Var, Var)> {
    let shape = tape.shape(features).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::Dimension {
            op: "intra_frame_attention",
            left: shape,
            right: vec![],
        });
    };
    let flat = tape.reshape(features, [b * t, d])?;
    let hidden = tape.matmul(flat, p.w1)?;
    let hidden = tape.add(hidden, p.b1)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, p.w2)?;
    let scores = tape.add(scores, p.b2)?;
    let scores = tape.reshape(scores, [b, t])?;
    let weights = tape.softmax(scores, 1)?;
    let w3 = tape.reshape(weights, [b, 1, t])?;
    let pooled = tape.batch_matmul(w3, features)?;
    let pooled = tape.reshape(pooled, [b, d])?;
    Ok((pooled, weights))
}

/// `softmax(q kᵀ / sqrt(scale_dim)) v` with the softmax across rows of the
/// batch. Returns the output and the `[B, B]` weights.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale_dim: usize,
) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (scale_dim as f64).sqrt());
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy)]
pub struct InterVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Scaled dot-product attention across the frames of a batch, scaled by
/// the full embedding width.
pub fn inter_frame_attention(tape: &mut Tape, x: Var, p: &InterVars) -> Result<(Var, Var)> {
    let d = tape.shape(x)[1];
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    scaled_dot_attention(tape, q, k, v, d)
}

/// `a * inter + (1 - a) * intra` with `a = sigmoid(alpha)`.
pub fn combine_attention(tape: &mut Tape, inter: Var, intra: Var, alpha: Var) -> Result<Var> {
    let a = tape.sigmoid(alpha);
    let rest = tape.affine(a, -1.0, 1.0);
    let x = tape.scale_by(inter, a)?;
    let y = tape.scale_by(intra, rest)?;
    tape.add(x, y)
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Standard multi-head self-attention over the batch rows. Each head works
/// on a `d / heads` column slice and is scaled by that width.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    p: &MultiHeadVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let (o, w) = scaled_dot_attention(tape, qh, kh, vh, dh)?;
        outs.push(o);
        weights.push(w);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let projected = tape.matmul(joined, p.wo)?;
    let out = tape.add(projected, p.bo)?;
    Ok((out, weights))
}

/// Concatenates the pooled embedding with the blended attention, projects
/// back to `d_model`, then runs multi-head attention. Returns
/// `(x_att, a_mul, per-head weights)`.
pub fn multi_head_block(
    tape: &mut Tape,
    pooled: Var,
    combined: Var,
    w_att: Var,
    b_att: Var,
    p: &MultiHeadVars,
    heads: usize,
) -> Result<(Var, Var, Vec<Var>)> {
    let cat = tape.concat(&[pooled, combined], 1)?;
    let x_att = tape.matmul(cat, w_att)?;
    let x_att = tape.add(x_att, b_att)?;
    let (a_mul, weights) = multi_head_attention(tape, x_att, p, heads)?;
    Ok((x_att, a_mul, weights))
}

/// `g ⊙ a + (1 - g) ⊙ x`.
pub fn fuse_with_gate(tape: &mut Tape, gate: Var, a: Var, x: Var) -> Result<Var> {
    let ga = tape.mul(gate, a)?;
    let rest = tape.affine(gate, -1.0, 1.0);
    let rx = tape.mul(rest, x)?;
    tape.add(ga, rx)
}

/// Sigmoid gate from `x_att`, interpolating between the multi-head output
/// and the enhanced input. Returns `(output, gate)`.
pub fn gated_fusion(
    tape: &mut Tape,
    a_mul: Var,
    x_enhanced: Var,
    x_att: Var,
    wg: Var,
    bg: Var,
) -> Result<(Var, Var)> {
    let z = tape.matmul(x_att, wg)?;
    let z = tape.add(z, bg)?;
    let gate = tape.sigmoid(z);
    let out = fuse_with_gate(tape, gate, a_mul, x_enhanced)?;
    Ok((out, gate))
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Two-layer ReLU feed-forward expert.
pub fn expert(tape: &mut Tape, x: Var, p: &ExpertVars) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.w2)?;
    tape.add(o, p.b2)
}

/// Softmax-gated sum of expert outputs per row. Returns `(output, weights [B, n])`.
pub fn moe_layer(tape: &mut Tape, x: Var, experts: &[ExpertVars], gate_w: Var) -> Result<(Var, Var)> {
    let [b, d] = tape.shape(x)[..] else {
        return Err(Error::Dimension {
            op: "moe_layer",
            left: tape.shape(x).to_vec(),
            right: vec![],
        });
    };
    let n = experts.len();
    if n == 0 {
        return Err(Error::Config("mixture needs at least one expert".into()));
    }
    let logits = tape.matmul(x, gate_w)?;
    let weights = tape.softmax(logits, 1)?;
    let mut outs = Vec::with_capacity(n);
    for e in experts {
        let o = expert(tape, x, e)?;
        outs.push(tape.reshape(o, [b, 1, d])?);
    }
    let stacked = if n == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let w3 = tape.reshape(weights, [b, 1, n])?;
    let mixed = tape.batch_matmul(w3, stacked)?;
    let out = tape.reshape(mixed, [b, d])?;
    Ok((out, weights))
}
