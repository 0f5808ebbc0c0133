//! Tiny causal language model over mixed token and feature rows.
//!
//! Text tokens are embedded through a table; feature blocks are spliced in
//! as rows directly (their width equals the model width). A learned
//! absolute position table covers the mixed sequence.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{LiraError, Result};
use crate::nn;
use crate::params::{normal, ParamStore};
use crate::sequence::{Element, InterleavedSequence};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

pub const PREFIX: &str = "lm.";

/// Final-layer hidden state and logits at one `<seg>` position.
#[derive(Debug, Clone, PartialEq)]
pub struct SegState {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let d = cfg.dim;
    store.insert("lm.tok_emb", normal(&[cfg.vocab_size, d], 0.5, rng));
    store.insert("lm.pos_emb", normal(&[cfg.max_positions, d], 0.1, rng));
    for l in 0..cfg.lm_layers {
        nn::init_block(store, rng, &format!("lm.block{l}"), d, cfg.mlp_ratio, 0.5);
    }
    nn::init_layer_norm(store, "lm.ln_f", d);
    nn::init_linear(store, rng, "lm.head", d, cfg.vocab_size);
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LmNodes {
    /// T × V
    pub logits: Var,
    /// Post-final-norm hidden states, T × D.
    pub hidden: Var,
}

/// Input rows for `seq`. Feature blocks come from `features` (one node per
/// block, in order) when given, otherwise from the stored grids.
fn embed_on(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    seq: &InterleavedSequence,
    features: Option<&[Var]>,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(LiraError::invalid("empty sequence"));
    }
    let rows = seq.total_rows();
    if rows > cfg.max_positions {
        return Err(LiraError::invalid(format!(
            "sequence of {rows} rows exceeds {} positions",
            cfg.max_positions
        )));
    }
    let ids: Vec<TokenId> = seq.elements().iter().filter_map(Element::token_id).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(LiraError::invalid(format!("token id {bad} outside vocabulary")));
    }
    let table = tape.param(store, "lm.tok_emb")?;
    let tok = if ids.is_empty() {
        None
    } else {
        Some(tape.embedding_lookup(table, &ids)?)
    };

    let mut parts = Vec::new();
    let mut tok_pos = 0;
    let mut run = 0;
    let mut block = 0;
    for e in seq.elements() {
        match e {
            Element::Features { grid, .. } => {
                if run > 0 {
                    parts.push(tape.slice(tok.expect("tokens present"), 0, tok_pos - run, tok_pos)?);
                    run = 0;
                }
                let v = match features {
                    Some(vs) => *vs
                        .get(block)
                        .ok_or_else(|| LiraError::invalid("fewer feature nodes than feature blocks"))?,
                    None => tape.constant(grid.values().clone()),
                };
                if tape.value(v).cols() != cfg.dim || tape.shape(v)[0] != grid.tokens() {
                    return Err(LiraError::shape("lm feature block", tape.shape(v), &[grid.tokens(), cfg.dim]));
                }
                parts.push(v);
                block += 1;
            }
            _ => {
                tok_pos += 1;
                run += 1;
            }
        }
    }
    if run > 0 {
        let t = tok.expect("tokens present");
        parts.push(if run == ids.len() {
            t
        } else {
            tape.slice(t, 0, tok_pos - run, tok_pos)?
        });
    }
    if let Some(vs) = features {
        if vs.len() != block {
            return Err(LiraError::invalid(format!("{} feature nodes for {block} blocks", vs.len())));
        }
    }
    let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let pos = tape.param(store, "lm.pos_emb")?;
    let positions: Vec<usize> = (0..rows).collect();
    let p = tape.embedding_lookup(pos, &positions)?;
    tape.add(x, p)
}

pub fn forward_on(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    seq: &InterleavedSequence,
    features: Option<&[Var]>,
) -> Result<LmNodes> {
    let mut x = embed_on(tape, store, cfg, seq, features)?;
    for l in 0..cfg.lm_layers {
        x = nn::block(tape, store, &format!("lm.block{l}"), x, cfg.heads, true)?;
    }
    let hidden = nn::layer_norm(tape, store, "lm.ln_f", x)?;
    let logits = nn::linear(tape, store, "lm.head", hidden)?;
    Ok(LmNodes { logits, hidden })
}

/// Mean next-token cross-entropy over the supervised positions of `seq`.
pub fn next_token_loss_on(tape: &mut Tape, logits: Var, seq: &InterleavedSequence) -> Result<Var> {
    let targets = seq.targets();
    if targets.is_empty() {
        return Err(LiraError::invalid("no supervised positions"));
    }
    tape.cross_entropy(logits, &targets)
}

/// Result of an eager forward pass.
#[derive(Debug, Clone)]
pub struct LmOutput {
    pub logits: Tensor,
    pub seg_states: Vec<SegState>,
}

impl LmOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

pub fn seg_states(tape: &Tape, nodes: LmNodes, seq: &InterleavedSequence) -> Vec<SegState> {
    let (h, l) = (tape.value(nodes.hidden), tape.value(nodes.logits));
    seq.seg_rows()
        .into_iter()
        .map(|r| SegState {
            hidden: h.row(r).to_vec(),
            logits: l.row(r).to_vec(),
        })
        .collect()
}

pub fn forward(store: &ParamStore, cfg: &ModelConfig, seq: &InterleavedSequence) -> Result<LmOutput> {
    let mut tape = Tape::new();
    let nodes = forward_on(&mut tape, store, cfg, seq, None)?;
    let seg_states = seg_states(&tape, nodes, seq);
    Ok(LmOutput {
        logits: tape.value(nodes.logits).clone(),
        seg_states,
    })
}

/// Eager next-token loss from a logits matrix.
pub fn next_token_loss(logits: &Tensor, targets: &[(usize, TokenId)]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).item())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_greedy(store: &ParamStore, cfg: &ModelConfig, prefix: &InterleavedSequence) -> Result<TokenId> {
    Ok(argmax(forward(store, cfg, prefix)?.last_logits()))
}

/// `subset` ranked by descending logit (ties by id), truncated to `k`.
pub fn top_k_attribute(seg: &SegState, subset: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
    if subset.is_empty() {
        return Err(LiraError::invalid("empty attribute subset"));
    }
    if k > subset.len() {
        return Err(LiraError::invalid(format!("k = {k} exceeds subset size {}", subset.len())));
    }
    if let Some(&bad) = subset.iter().find(|&&t| t >= seg.logits.len()) {
        return Err(LiraError::UnknownToken(format!("id {bad}")));
    }
    let mut ids = subset.to_vec();
    ids.sort_by(|&a, &b| seg.logits[b].total_cmp(&seg.logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sefe::FeatureGrid;
    use crate::sequence::FeatureSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, store)
    }

    fn mixed(cfg: &ModelConfig, seed: u64, toks: &[TokenId]) -> InterleavedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = InterleavedSequence::new();
        seq.push_features(FeatureSource::Global, FeatureGrid::new(normal(&[4, cfg.dim], 1.0, &mut rng)).unwrap());
        for &t in toks {
            if t == crate::vocab::SEG {
                seq.push_seg(true);
            } else {
                seq.push_token(t, true);
            }
        }
        seq
    }

    #[test]
    fn causal_suffix_perturbation() {
        let (cfg, store) = setup();
        let base = mixed(&cfg, 1, &[10, 2, 11, 12, 13]);
        let out = forward(&store, &cfg, &base).unwrap();
        assert_eq!(out.seg_states.len(), 1);
        let rows = base.total_rows();
        for cut in 4..rows - 1 {
            // replace every token after row `cut`
            let toks: Vec<TokenId> = (4..rows)
                .map(|r| if r <= cut { base.elements()[r - 3].token_id().unwrap() } else { 20 })
                .collect();
            let other = forward(&store, &cfg, &mixed(&cfg, 1, &toks)).unwrap();
            for r in 0..=cut {
                assert_eq!(out.logits.row(r), other.logits.row(r), "row {r} cut {cut}");
            }
        }
    }

    #[test]
    fn earlier_feature_block_shifts_logits() {
        let (cfg, store) = setup();
        let a = forward(&store, &cfg, &mixed(&cfg, 1, &[10, 11])).unwrap();
        let b = forward(&store, &cfg, &mixed(&cfg, 2, &[10, 11])).unwrap();
        assert!(a.logits.row(5).iter().zip(b.logits.row(5)).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn two_segs_two_states_matching_head() {
        let (cfg, store) = setup();
        let seq = mixed(&cfg, 4, &[10, 2, 11, 2]);
        let out = forward(&store, &cfg, &seq).unwrap();
        assert_eq!(out.seg_states.len(), 2);
        let w = store.get("lm.head.w").unwrap();
        let b = store.get("lm.head.b").unwrap();
        for s in &out.seg_states {
            let h = Tensor::new(vec![1, cfg.dim], s.hidden.clone()).unwrap();
            let l = h.matmul(w).unwrap();
            for (j, v) in l.data().iter().enumerate() {
                assert!((v + b.data()[j] - s.logits[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let (cfg, store) = setup();
        assert!(forward(&store, &cfg, &InterleavedSequence::new()).is_err());
        let mut seq = InterleavedSequence::new();
        seq.push_features(FeatureSource::Global, FeatureGrid::new(Tensor::zeros(&[2, cfg.dim + 1])).unwrap());
        assert!(matches!(forward(&store, &cfg, &seq), Err(LiraError::Shape { .. })));
    }

    #[test]
    fn loss_cases() {
        let v = 7;
        let uniform = Tensor::zeros(&[3, v]);
        let l = next_token_loss(&uniform, &[(0, 1), (2, 4)]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);

        let mut sharp = Tensor::zeros(&[1, v]);
        sharp.data_mut()[3] = 60.0;
        assert!(next_token_loss(&sharp, &[(0, 3)]).unwrap() < 1e-20);

        // hand-built three positions
        let rows = vec![vec![0.1, -0.3, 0.7], vec![1.5, 0.0, -1.0], vec![0.2, 0.2, 0.9]];
        let t = Tensor::from_rows(&rows).unwrap();
        let targets = [(0, 2), (1, 0), (2, 1)];
        let want: f64 = targets
            .iter()
            .map(|&(r, c)| {
                let z: f64 = rows[r].iter().map(|x| x.exp()).sum();
                -(rows[r][c].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((next_token_loss(&t, &targets).unwrap() - want).abs() < 1e-12);
        assert!(next_token_loss(&t, &[]).is_err());
    }

    #[test]
    fn supervision_never_on_feature_rows() {
        let (cfg, _) = setup();
        let seq = mixed(&cfg, 1, &[10, 2, 11]);
        let starts = seq.element_rows();
        for (row, _) in seq.targets() {
            let next = row + 1;
            let k = starts.iter().position(|&s| s == next).unwrap();
            assert!(!matches!(seq.elements()[k], Element::Features { .. }));
        }
    }

    #[test]
    fn greedy_rules() {
        assert_eq!(argmax(&[0.0, 1.0, 3.0, 3.0]), 2);
        let mut l = vec![0.0; 12];
        l[5] = 2.0;
        l[9] = 2.0;
        assert_eq!(argmax(&l), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(argmax(&v), v.iter().position(|&x| x == m).unwrap());
        }
        let (cfg, mut store) = setup();
        store.get_mut("lm.head.w").unwrap().data_mut().fill(0.0);
        let b = store.get_mut("lm.head.b").unwrap().data_mut();
        b.fill(0.0);
        b[crate::vocab::EOS] = 1.0;
        assert_eq!(sample_greedy(&store, &cfg, &mixed(&cfg, 1, &[10])).unwrap(), crate::vocab::EOS);
    }

    #[test]
    fn top_k_cases() {
        let mut logits = vec![0.0; 10];
        logits[6] = 2.0;
        logits[7] = 1.0;
        let s = SegState { hidden: vec![], logits };
        assert_eq!(top_k_attribute(&s, &[7, 6], 1).unwrap(), vec![6]);
        assert_eq!(top_k_attribute(&s, &[8, 9, 7, 6], 4).unwrap(), vec![6, 7, 8, 9]);
        assert!(top_k_attribute(&s, &[], 0).is_err());
        assert!(top_k_attribute(&s, &[6], 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..10).map(|_| (rng.gen_range(0..4) as f64) * 0.5).collect();
            let s = SegState { hidden: vec![], logits: logits.clone() };
            let subset = [2, 4, 5, 8, 9];
            let mut oracle: Vec<(f64, usize)> = subset.iter().map(|&i| (-logits[i], i)).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = oracle.iter().take(3).map(|p| p.1).collect();
            assert_eq!(top_k_attribute(&s, &subset, 3).unwrap(), want);
        }
    }
}
