//! Linear layers, layer norms, attention and pre-norm transformer blocks
//! expressed over named parameters in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{LiraError, Result};
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(crate) fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layer_norm(x, g, b)
}

/// Two-layer perceptron with GELU between the layers.
pub(crate) fn mlp(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{name}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{name}.fc2"), h)
}

pub(crate) fn init_mlp(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_hidden: usize, d_out: usize) {
    init_linear(store, rng, &format!("{name}.fc1"), d_in, d_hidden);
    init_linear(store, rng, &format!("{name}.fc2"), d_hidden, d_out);
}

/// Scaled dot-product attention split over `heads`. `q` is Tq×D, `k` and
/// `v` are Tk×D. Returns the concatenated heads (Tq×D), before any output
/// projection.
pub(crate) fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let d = tape.value(q).cols();
    if tape.value(k).cols() != d || tape.value(v).cols() != d || tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(LiraError::shape("attention", tape.shape(q), tape.shape(k)));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(LiraError::invalid(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * dh, (h + 1) * dh)?,
                tape.slice(k, 1, h * dh, (h + 1) * dh)?,
                tape.slice(v, 1, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = if causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores, 1)?
        };
        outs.push(tape.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// `residual_scale` shrinks the initial output projections of both
/// residual branches.
pub(crate) fn init_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
    residual_scale: f64,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_linear(store, rng, &format!("{prefix}.attn.qkv"), dim, 3 * dim);
    init_linear(store, rng, &format!("{prefix}.attn.out"), dim, dim);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim, dim * mlp_ratio, dim);
    for name in [format!("{prefix}.attn.out.w"), format!("{prefix}.mlp.fc2.w")] {
        let w = store.get_mut(&name).expect("just inserted");
        w.data_mut().iter_mut().for_each(|v| *v *= residual_scale);
    }
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `+ mlp(ln2 ·)`.
pub(crate) fn block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, heads: usize, causal: bool) -> Result<Var> {
    let d = tape.value(x).cols();
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(tape, store, &format!("{prefix}.attn.qkv"), h)?;
    let q = tape.slice(qkv, 1, 0, d)?;
    let k = tape.slice(qkv, 1, d, 2 * d)?;
    let v = tape.slice(qkv, 1, 2 * d, 3 * d)?;
    let a = attention(tape, q, k, v, heads, causal)?;
    let a = linear(tape, store, &format!("{prefix}.attn.out"), a)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, store, &format!("{prefix}.ln2"), x)?;
    let m = mlp(tape, store, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}
