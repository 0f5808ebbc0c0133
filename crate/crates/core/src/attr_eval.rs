//! Attribute probes and their scoring.
//!
//! For each object and attribute class missing from one of its
//! descriptions, a probe asks two yes/no questions about that description:
//! one with the true attribute and one with a sampled false one. A probe
//! counts as answered only when both answers are right. Logit scoring ranks
//! the class lexicon in the seg-token logits and checks whether the true
//! attribute is in the top 1 or top 3.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};
use crate::lm::{top_k_attribute, SegState};
use crate::synth::AttrRecord;
use crate::vocab::{AttrClass, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrProbe {
    pub object_id: String,
    pub image: String,
    pub mask: String,
    /// Referring description that does not mention the probed attribute.
    pub description: String,
    pub class: AttrClass,
    pub attribute: String,
    pub negative: String,
    pub positive_question: String,
    pub negative_question: String,
}

impl AttrProbe {
    pub fn id(&self) -> String {
        format!("{}:{}", self.object_id, class_name(self.class))
    }
}

fn class_name(c: AttrClass) -> &'static str {
    match c {
        AttrClass::Category => "category",
        AttrClass::Color => "color",
        AttrClass::Location => "location",
    }
}

pub fn question(description: &str, class: AttrClass, value: &str) -> String {
    match class {
        AttrClass::Color => format!("is {description} {value}"),
        AttrClass::Location => format!("is {description} on the {value}"),
        AttrClass::Category => format!("is {description} a {value}"),
    }
}

pub fn build_probes(records: &[AttrRecord], seed: u64) -> Result<Vec<AttrProbe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for rec in records {
        if rec.descriptions.is_empty() {
            return Err(LiraError::invalid(format!("record {} has no descriptions", rec.object_id)));
        }
        for class in AttrClass::ALL {
            let Some(value) = rec.attributes.get(&class) else { continue };
            let lexicon = class.lexicon();
            if !lexicon.contains(&value.as_str()) {
                return Err(LiraError::invalid(format!("`{value}` is not a {} word", class_name(class))));
            }
            let Some(desc) = rec
                .descriptions
                .iter()
                .find(|d| !d.split_whitespace().any(|w| w == value))
            else {
                continue;
            };
            let others: Vec<&str> = lexicon.iter().copied().filter(|w| w != value).collect();
            let Some(&negative) = others.choose(&mut rng) else {
                log::warn!("lexicon for {} has one word, skipping probe", class_name(class));
                continue;
            };
            probes.push(AttrProbe {
                object_id: rec.object_id.clone(),
                image: rec.image.clone(),
                mask: rec.mask.clone(),
                description: desc.clone(),
                class,
                attribute: value.clone(),
                negative: negative.to_string(),
                positive_question: question(desc, class, value),
                negative_question: question(desc, class, negative),
            });
        }
    }
    Ok(probes)
}

/// Fraction of probes with the positive question answered yes and the
/// negative one answered no.
pub fn score_vqa(probes: &[AttrProbe], answers: &BTreeMap<String, (Answer, Answer)>) -> Result<f64> {
    if probes.is_empty() {
        return Err(LiraError::invalid("no probes"));
    }
    let mut credit = 0usize;
    for p in probes {
        let id = p.id();
        let &(pos, neg) = answers
            .get(&id)
            .ok_or_else(|| LiraError::invalid(format!("no answer for probe {id}")))?;
        if pos == Answer::Yes && neg == Answer::No {
            credit += 1;
        }
    }
    Ok(credit as f64 / probes.len() as f64)
}

/// Top-1 and top-3 accuracy of the true attribute within its lexicon.
pub fn score_logits(
    probes: &[AttrProbe],
    seg_states: &BTreeMap<String, SegState>,
    vocab: &Vocab,
) -> Result<(f64, f64)> {
    if probes.is_empty() {
        return Err(LiraError::invalid("no probes"));
    }
    let (mut top1, mut top3) = (0usize, 0usize);
    for p in probes {
        let id = p.id();
        let seg = seg_states
            .get(&id)
            .ok_or_else(|| LiraError::invalid(format!("no seg state for probe {id}")))?;
        let subset = vocab.lexicon_ids(p.class);
        let truth = vocab.id(&p.attribute)?;
        let ranked = top_k_attribute(seg, &subset, subset.len().min(3))?;
        top1 += (ranked[0] == truth) as usize;
        top3 += ranked.contains(&truth) as usize;
    }
    let n = probes.len() as f64;
    Ok((top1 as f64 / n, top3 as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrReport {
    pub vqa_acc: f64,
    pub acc1: f64,
    pub acc3: f64,
    pub n: usize,
}

pub fn save_probes(probes: &[AttrProbe], path: &Path) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_string_pretty(probes)?)?)
}

pub fn load_probes(path: &Path) -> Result<Vec<AttrProbe>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Words of `a` and `b` that differ, position by position.
pub fn word_diff(a: &str, b: &str) -> Vec<(String, String)> {
    let (wa, wb): (Vec<&str>, Vec<&str>) = (a.split_whitespace().collect(), b.split_whitespace().collect());
    let set: BTreeSet<usize> = (0..wa.len().max(wb.len())).filter(|&i| wa.get(i) != wb.get(i)).collect();
    set.into_iter()
        .map(|i| (wa.get(i).unwrap_or(&"").to_string(), wb.get(i).unwrap_or(&"").to_string()))
        .collect()
}
