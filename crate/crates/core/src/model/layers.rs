//! Prompt generation, prompt injection and encoder-to-latent cross mixing.
//!
//! Each function reads its weights from a [`ParamVars`] under a name prefix,
//! so the same code serves the full network and the standalone unit tests.

use crate::autograd::{Graph, Var};

use super::params::ParamVars;
use super::ModelError;

fn check_dim(g: &Graph, v: Var, axis: usize, expected: usize, what: &str) -> Result<(), ModelError> {
    let got = g.value(v).shape().get(axis).copied().unwrap_or(0);
    if got != expected {
        return Err(ModelError::Shape(format!(
            "{what}: axis {axis} has {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Spatial mean of a `[b, c, h, w]` map.
pub fn gap(g: &mut Graph, f: Var) -> Var {
    g.gap(f)
}

/// `P = FC2(GELU(FC1(GAP(latent))))`, shape `[b, d]`.
///
/// Weights: `{prefix}.fc1.{w,b}` (`[d, c]`) and `{prefix}.fc2.{w,b}` (`[d, d]`).
pub fn generate_prompt(g: &mut Graph, pv: &ParamVars, prefix: &str, latent: Var) -> Result<Var, ModelError> {
    let w1 = pv.get(&format!("{prefix}.fc1.w"));
    let c = g.value(latent).shape()[1];
    check_dim(g, w1, 1, c, "prompt fc1 input")?;
    let pooled = gap(g, latent);
    let h = g.linear(pooled, w1, pv.get(&format!("{prefix}.fc1.b")));
    let h = g.gelu(h);
    let w2 = pv.get(&format!("{prefix}.fc2.w"));
    check_dim(g, w2, 1, g.value(h).shape()[1], "prompt fc2 input")?;
    Ok(g.linear(h, w2, pv.get(&format!("{prefix}.fc2.b"))))
}

/// Cross-attention from latent tokens (queries) onto the pooled first-encoder
/// map (keys/values), added back onto the latent.
///
/// Weights: `{prefix}.{q,k,v,o}.{w,b}`; `q`/`o` are `[c_lat, c_lat]`,
/// `k`/`v` are `[c_lat, c_enc]`.
pub fn cross_mix(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    latent: Var,
    enc1: Var,
    kv_grid: usize,
    heads: usize,
) -> Result<Var, ModelError> {
    let ls = g.value(latent).shape().to_vec();
    let es = g.value(enc1).shape().to_vec();
    if ls.len() != 4 || es.len() != 4 || ls[0] != es[0] {
        return Err(ModelError::Shape(format!("cross_mix latent {ls:?} vs encoder {es:?}")));
    }
    let (c_lat, h, w) = (ls[1], ls[2], ls[3]);
    let wq = pv.get(&format!("{prefix}.q.w"));
    let wk = pv.get(&format!("{prefix}.k.w"));
    check_dim(g, wq, 1, c_lat, "cross_mix query projection")?;
    check_dim(g, wk, 1, es[1], "cross_mix key projection")?;
    if c_lat % heads != 0 {
        return Err(ModelError::Shape(format!("{c_lat} channels not divisible by {heads} heads")));
    }
    let pooled = g.adaptive_avg_pool(enc1, kv_grid);
    let kv_tokens = g.to_tokens(pooled);
    let q_tokens = g.to_tokens(latent);
    let q = g.linear(q_tokens, wq, pv.get(&format!("{prefix}.q.b")));
    let k = g.linear(kv_tokens, wk, pv.get(&format!("{prefix}.k.b")));
    let v = g.linear(kv_tokens, pv.get(&format!("{prefix}.v.w")), pv.get(&format!("{prefix}.v.b")));
    let attended = g.attention(q, k, v, heads);
    let projected = g.linear(attended, pv.get(&format!("{prefix}.o.w")), pv.get(&format!("{prefix}.o.b")));
    let back = g.from_tokens(projected, h, w);
    Ok(g.add(latent, back))
}

/// Channel soft-mask injection followed by a residual 1x1 MLP:
/// `m = sigmoid(FC(p))`, `u = f ⊙ m`, `out = u + W2·GELU(W1·u)`.
///
/// Weights: `{prefix}.fc.{w,b}` (`[c, d]`), `{prefix}.mlp1.{w,b}` and
/// `{prefix}.mlp2.{w,b}` (`[c, c, 1, 1]`). Returns `(out, mask)`.
pub fn inject_prompt(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    f_prev: Var,
    p: Var,
) -> Result<(Var, Var), ModelError> {
    let fs = g.value(f_prev).shape().to_vec();
    let ps = g.value(p).shape().to_vec();
    if fs.len() != 4 || ps.len() != 2 || fs[0] != ps[0] {
        return Err(ModelError::Shape(format!("inject_prompt features {fs:?} vs prompt {ps:?}")));
    }
    let wfc = pv.get(&format!("{prefix}.fc.w"));
    check_dim(g, wfc, 0, fs[1], "inject fc output")?;
    check_dim(g, wfc, 1, ps[1], "inject fc input")?;
    let logits = g.linear(p, wfc, pv.get(&format!("{prefix}.fc.b")));
    let mask = g.sigmoid(logits);
    let masked = g.mul_channels(f_prev, mask);
    let hidden = g.conv2d(masked, pv.get(&format!("{prefix}.mlp1.w")), pv.get(&format!("{prefix}.mlp1.b")));
    let hidden = g.gelu(hidden);
    let mixed = g.conv2d(hidden, pv.get(&format!("{prefix}.mlp2.w")), pv.get(&format!("{prefix}.mlp2.b")));
    Ok((g.add(masked, mixed), mask))
}
