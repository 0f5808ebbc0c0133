//! Seg-token mask decoder.
//!
//! The seg hidden state is projected to the pixel-feature width; each patch
//! logit is its dot product with that patch's raw pixel feature plus a
//! scalar bias. Patch logits are upsampled to pixels by nearest neighbour
//! and squashed with a sigmoid.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{LiraError, Result};
use crate::image::{BinaryMask, MaskMap};
use crate::lm::SegState;
use crate::nn;
use crate::params::ParamStore;
use crate::sefe::FeatureGrid;
use crate::tensor::Tensor;

pub const PREFIX: &str = "decoder.";

pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    nn::init_linear(store, rng, "decoder.proj", cfg.dim, cfg.pixel_dim);
    store.insert("decoder.bias", Tensor::zeros(&[1]));
}

/// Flat patch index for every output pixel, row-major.
fn upsample_index(grid: (usize, usize), out: (usize, usize)) -> Result<Vec<usize>> {
    let ((gh, gw), (h, w)) = (grid, out);
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(LiraError::shape("decode_mask", &[h, w], &[gh, gw]));
    }
    let (ph, pw) = (h / gh, w / gw);
    Ok((0..h * w).map(|i| (i / w / ph) * gw + (i % w) / pw).collect())
}

/// Pre-sigmoid patch logits, `T × 1`.
pub fn patch_logits_on(tape: &mut Tape, store: &ParamStore, hidden: Var, pixel_feats: Var) -> Result<Var> {
    let q = nn::linear(tape, store, "decoder.proj", hidden)?;
    let s = tape.matmul_nt(pixel_feats, q)?;
    let b = tape.param(store, "decoder.bias")?;
    tape.add_row(s, b)
}

/// Soft mask `H × W` from a `1 × D` seg hidden row and `T × D_p` pixel
/// features laid out on a square patch grid.
pub fn decode_on(
    tape: &mut Tape,
    store: &ParamStore,
    hidden: Var,
    pixel_feats: Var,
    out_dims: (usize, usize),
) -> Result<Var> {
    let t = tape.shape(pixel_feats)[0];
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return Err(LiraError::invalid(format!("{t} pixel tokens do not form a square grid")));
    }
    let logits = patch_logits_on(tape, store, hidden, pixel_feats)?;
    let idx = upsample_index((g, g), out_dims)?;
    let up = tape.gather(logits, &idx, &[out_dims.0, out_dims.1])?;
    Ok(tape.sigmoid(up))
}

pub fn decode_mask(
    store: &ParamStore,
    seg: &SegState,
    pixel_feats: &FeatureGrid,
    out_dims: (usize, usize),
) -> Result<MaskMap> {
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::new(vec![1, seg.hidden.len()], seg.hidden.clone())?);
    let p = tape.constant(pixel_feats.values().clone());
    let m = decode_on(&mut tape, store, h, p, out_dims)?;
    MaskMap::new(out_dims.0, out_dims.1, tape.value(m).data().to_vec())
}

/// Pixel is set iff its probability is strictly above `threshold`.
pub fn binarize(m: &MaskMap, threshold: f64) -> BinaryMask {
    BinaryMask::new(m.height(), m.width(), m.values().iter().map(|&p| p > threshold).collect())
        .expect("dimensions taken from the map")
}
