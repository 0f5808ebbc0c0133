//! Scripted-stream conformance of the generation loop.
//!
//! A reference interpreter walks a token script directly, without any
//! sequence bookkeeping, and predicts the event trace the loop must emit
//! when driven by [`ScriptedModel`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generation::{generate, Event, GenerateOptions, ScriptedModel, TraceRecord};
use crate::image::{BBox, ImageBuffer};
use crate::vocab::{TokenId, EOS, IMAGE_ID, P_CLOSE, P_OPEN, SEG};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub tokens: Vec<TokenId>,
    pub empty_masks: Vec<bool>,
    pub ilvc: bool,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub trace: Vec<TraceRecord>,
    pub truncated: bool,
    pub error: Option<String>,
}

/// Side length of the canvas the streams run on.
pub const CANVAS: usize = 8;
const VOCAB: usize = 40;

/// Predicts the trace for `s`. The scripted model returns a 2x2 mask in
/// the top-left corner (or nothing, when flagged empty) and is asked for
/// token `k` once `k` tokens have been emitted.
pub fn reference_trace(s: &Script) -> Expected {
    let mut trace = Vec::new();
    let mut masks = 0;
    let mut current_area: Option<usize> = None;
    // every non-final step emits exactly one token
    for step in 0..s.max_steps {
        let t = s.tokens.get(step).copied().unwrap_or(EOS);
        let event = match t {
            EOS => {
                trace.push(TraceRecord { step, event: Event::Eos });
                return Expected {
                    trace,
                    truncated: false,
                    error: None,
                };
            }
            SEG => {
                masks += 1;
                let area = if s.empty_masks.get(masks - 1).copied().unwrap_or(false) { 0 } else { 4 };
                current_area = Some(area);
                Event::Seg { index: masks, area }
            }
            IMAGE_ID if s.ilvc => {
                let message = match current_area {
                    None => Some("<image_id> with M_current null".to_string()),
                    Some(0) => Some(format!("<image_id> after empty mask {masks}")),
                    Some(_) => None,
                };
                if let Some(message) = message {
                    trace.push(TraceRecord {
                        step,
                        event: Event::Error { message: message.clone() },
                    });
                    return Expected {
                        trace,
                        truncated: false,
                        error: Some(message),
                    };
                }
                Event::Crop {
                    index: masks,
                    bbox: BBox {
                        row_min: 0,
                        col_min: 0,
                        row_max: 1,
                        col_max: 1,
                    },
                }
            }
            token => Event::Text { token },
        };
        trace.push(TraceRecord { step, event });
    }
    Expected {
        trace,
        truncated: true,
        error: None,
    }
}

/// Hand-written edge cases followed by random streams, `n` in total (at
/// least the edge cases).
pub fn scripted_streams(n: usize, seed: u64) -> Vec<Script> {
    let s = |tokens: &[TokenId], empty: &[bool], ilvc: bool, max_steps: usize| Script {
        tokens: tokens.to_vec(),
        empty_masks: empty.to_vec(),
        ilvc,
        max_steps,
    };
    let mut out = vec![
        s(&[], &[], true, 4),
        s(&[EOS], &[], true, 4),
        s(&[IMAGE_ID], &[], true, 8),
        s(&[20, IMAGE_ID, SEG], &[], true, 8),
        s(&[SEG, IMAGE_ID, P_OPEN, 20, P_CLOSE, EOS], &[], true, 16),
        s(&[SEG, IMAGE_ID, P_OPEN, 20, P_CLOSE, SEG, IMAGE_ID, P_OPEN, 21, P_CLOSE, EOS], &[false, true], true, 32),
        s(&[IMAGE_ID, SEG, IMAGE_ID, P_OPEN, 20, P_CLOSE, EOS], &[], false, 16),
        s(&[SEG, SEG, IMAGE_ID, EOS], &[false, true], false, 16),
        s(&[20; 12], &[], true, 5),
        s(&[SEG, IMAGE_ID, 20, 21], &[], true, 2),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = [SEG, IMAGE_ID, P_OPEN, P_CLOSE, 20, 21, 30, EOS];
    let weights = [4, 4, 2, 2, 3, 3, 2, 1];
    let total: u32 = weights.iter().sum();
    while out.len() < n {
        let len = rng.gen_range(0..14);
        let tokens = (0..len)
            .map(|_| {
                let mut x = rng.gen_range(0..total);
                let mut k = 0;
                while x >= weights[k] {
                    x -= weights[k];
                    k += 1;
                }
                pool[k]
            })
            .collect();
        let empty_masks = (0..len).map(|_| rng.gen_bool(0.2)).collect();
        out.push(Script {
            tokens,
            empty_masks,
            ilvc: rng.gen_bool(0.7),
            max_steps: rng.gen_range(1..20),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub streams: usize,
    pub mismatches: Vec<String>,
    /// Streams that end in the null-mask `<image_id>` error.
    pub null_mask_errors: usize,
    /// ILVC-off streams that emit `<image_id>`; none may crop.
    pub ilvc_off_image_id_streams: usize,
    pub ilvc_off_crops: usize,
    pub passed: bool,
}

pub fn run_script(s: &Script) -> Result<crate::generation::GenerationResult> {
    let model = ScriptedModel::new(s.tokens.clone(), s.empty_masks.clone(), VOCAB);
    let img = ImageBuffer::filled(CANVAS, CANVAS, [0.3, 0.5, 0.7])?;
    let opts = GenerateOptions {
        ilvc_enabled: s.ilvc,
        max_steps: s.max_steps,
        ..Default::default()
    };
    generate(&model, &img, &[10, 11], &opts)
}

pub fn check_streams(scripts: &[Script]) -> Result<ConformanceReport> {
    let mut mismatches = Vec::new();
    let (mut null_errors, mut off_streams, mut off_crops) = (0, 0, 0);
    for (i, s) in scripts.iter().enumerate() {
        let want = reference_trace(s);
        let got = run_script(s)?;
        if got.trace != want.trace || got.truncated != want.truncated || got.protocol_error != want.error {
            mismatches.push(format!("stream {i}: {:?}", s.tokens));
        }
        if got.protocol_error.as_deref() == Some("<image_id> with M_current null") {
            null_errors += 1;
        }
        let emitted_image_id = got.trace.iter().any(|r| r.event == Event::Text { token: IMAGE_ID });
        if !s.ilvc && emitted_image_id {
            off_streams += 1;
        }
        if !s.ilvc {
            off_crops += got.crop_count();
        }
    }
    Ok(ConformanceReport {
        streams: scripts.len(),
        passed: mismatches.is_empty() && off_crops == 0 && null_errors > 0 && off_streams > 0,
        mismatches,
        null_mask_errors: null_errors,
        ilvc_off_image_id_streams: off_streams,
        ilvc_off_crops: off_crops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_on_edge_cases() {
        let s = scripted_streams(0, 0);
        assert_eq!(reference_trace(&s[0]).trace, vec![TraceRecord { step: 0, event: Event::Eos }]);
        let null = reference_trace(&s[2]);
        assert_eq!(null.error.as_deref(), Some("<image_id> with M_current null"));
        let off = reference_trace(&s[6]);
        assert!(off.trace.iter().all(|r| !matches!(r.event, Event::Crop { .. })));
        assert!(reference_trace(&s[8]).truncated);
    }

    #[test]
    fn loop_matches_reference() {
        let scripts = scripted_streams(60, 3);
        assert_eq!(scripts.len(), 60);
        let r = check_streams(&scripts).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn seeded() {
        assert_eq!(scripted_streams(30, 1), scripted_streams(30, 1));
        assert_ne!(scripted_streams(30, 1), scripted_streams(30, 2));
    }
}
