//! Token-driven generation loop.
//!
//! Greedy decoding with three special events: `<seg>` decodes a mask from
//! its hidden state and makes it the current mask; `<image_id>` crops the
//! current mask's region, encodes it with the semantic branch and appends
//! the token followed by the local features; `<eos>` stops. With ILVC
//! disabled, `<image_id>` is an ordinary token.

use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder;
use crate::error::{LiraError, Result};
use crate::image::{BBox, BinaryMask, ImageBuffer, MaskMap};
use crate::lm::{self, LmOutput, SegState};
use crate::params::ParamStore;
use crate::sefe::{FeatureGrid, Sefe};
use crate::sequence::{build_inference_prefix, crop_region, FeatureSource, InterleavedSequence};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab, EOS, IMAGE_ID, SEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Refseg,
    Gcg,
    Vqa,
}

impl FromStr for Task {
    type Err = LiraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refseg" => Ok(Task::Refseg),
            "gcg" => Ok(Task::Gcg),
            "vqa" => Ok(Task::Vqa),
            other => Err(LiraError::invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Appended to every template when local coupling is requested.
pub const ILVC_SUFFIX: [&str; 2] = ["with", "regions"];

pub fn prompt_words(task: Task, ilvc: bool) -> Vec<&'static str> {
    let mut words: Vec<&'static str> = match task {
        Task::Refseg => vec!["segment"],
        Task::Gcg => vec!["ground", "the", "image"],
        Task::Vqa => vec!["answer", "yes", "or", "no"],
    };
    if ilvc {
        words.extend(ILVC_SUFFIX);
    }
    words
}

pub fn prompt_template(vocab: &Vocab, task: Task, ilvc: bool) -> Result<Vec<TokenId>> {
    prompt_words(task, ilvc).into_iter().map(|w| vocab.id(w)).collect()
}

/// Template followed by the query words.
pub fn instruction(vocab: &Vocab, task: Task, ilvc: bool, query: &str) -> Result<Vec<TokenId>> {
    let mut ids = prompt_template(vocab, task, ilvc)?;
    ids.extend(vocab.encode(query)?);
    Ok(ids)
}

/// What the loop needs from a model.
pub trait Backend {
    /// Global feature and raw pixel-encoder features.
    fn encode_global(&self, img: &ImageBuffer) -> Result<(FeatureGrid, FeatureGrid)>;
    fn forward(&self, seq: &InterleavedSequence) -> Result<LmOutput>;
    fn decode(&self, seg: &SegState, pixel: &FeatureGrid, dims: (usize, usize)) -> Result<MaskMap>;
    fn encode_local(&self, region: &ImageBuffer) -> Result<FeatureGrid>;
    fn local_res(&self) -> usize;
    fn max_rows(&self) -> usize;
}

/// The trained model.
#[derive(Clone, Copy)]
pub struct Lira<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl<'a> Lira<'a> {
    pub fn new(params: &'a ParamStore, cfg: &'a ModelConfig) -> Self {
        Lira { params, cfg }
    }
}

impl Backend for Lira<'_> {
    fn encode_global(&self, img: &ImageBuffer) -> Result<(FeatureGrid, FeatureGrid)> {
        Sefe::new(self.params, self.cfg).forward(img)
    }

    fn forward(&self, seq: &InterleavedSequence) -> Result<LmOutput> {
        lm::forward(self.params, self.cfg, seq)
    }

    fn decode(&self, seg: &SegState, pixel: &FeatureGrid, dims: (usize, usize)) -> Result<MaskMap> {
        decoder::decode_mask(self.params, seg, pixel, dims)
    }

    fn encode_local(&self, region: &ImageBuffer) -> Result<FeatureGrid> {
        Sefe::new(self.params, self.cfg).encode_local(region)
    }

    fn local_res(&self) -> usize {
        self.cfg.local_res
    }

    fn max_rows(&self) -> usize {
        self.cfg.max_positions
    }
}

/// Replays a fixed token stream. Mask `i` (1-based) is non-empty unless
/// `empty_masks[i - 1]` is set. After the script runs out it emits `<eos>`.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    pub tokens: Vec<TokenId>,
    pub empty_masks: Vec<bool>,
    pub vocab_size: usize,
}

impl ScriptedModel {
    pub fn new(tokens: Vec<TokenId>, empty_masks: Vec<bool>, vocab_size: usize) -> Self {
        ScriptedModel {
            tokens,
            empty_masks,
            vocab_size,
        }
    }
}

impl Backend for ScriptedModel {
    fn encode_global(&self, _img: &ImageBuffer) -> Result<(FeatureGrid, FeatureGrid)> {
        Ok((FeatureGrid::new(Tensor::zeros(&[2, 1]))?, FeatureGrid::new(Tensor::zeros(&[1, 1]))?))
    }

    fn forward(&self, seq: &InterleavedSequence) -> Result<LmOutput> {
        let k = seq.generated_tokens().len();
        let next = self.tokens.get(k).copied().unwrap_or(EOS);
        let mut logits = Tensor::zeros(&[1, self.vocab_size]);
        logits.data_mut()[next] = 1.0;
        let seg_states = seq
            .elements()
            .iter()
            .filter_map(|e| match e {
                crate::sequence::Element::Seg(i) => Some(SegState {
                    hidden: vec![*i as f64],
                    logits: vec![],
                }),
                _ => None,
            })
            .collect();
        Ok(LmOutput { logits, seg_states })
    }

    fn decode(&self, seg: &SegState, _pixel: &FeatureGrid, dims: (usize, usize)) -> Result<MaskMap> {
        let i = seg.hidden[0] as usize;
        let empty = self.empty_masks.get(i - 1).copied().unwrap_or(false);
        let (h, w) = dims;
        // a 2x2 block in the top-left corner unless empty
        MaskMap::new(h, w, (0..h * w).map(|p| if !empty && p / w < 2 && p % w < 2 { 0.9 } else { 0.1 }).collect())
    }

    fn encode_local(&self, region: &ImageBuffer) -> Result<FeatureGrid> {
        FeatureGrid::new(Tensor::new(vec![1, 1], vec![region.values()[0]])?)
    }

    fn local_res(&self) -> usize {
        2
    }

    fn max_rows(&self) -> usize {
        usize::MAX
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Seg { index: usize, area: usize },
    Crop { index: usize, bbox: BBox },
    Text { token: TokenId },
    Eos,
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub masks: Vec<MaskMap>,
    pub binary_masks: Vec<BinaryMask>,
    pub seg_states: Vec<SegState>,
    /// Every emitted token except the final `<eos>`.
    pub tokens: Vec<TokenId>,
    pub trace: Vec<TraceRecord>,
    pub truncated: bool,
    pub protocol_error: Option<String>,
    /// Next-token logits at every step, when requested.
    pub step_logits: Vec<Vec<f64>>,
    pub sequence: InterleavedSequence,
}

impl GenerationResult {
    pub fn text_tokens(&self) -> Vec<TokenId> {
        self.trace
            .iter()
            .filter_map(|r| match r.event {
                Event::Text { token } => Some(token),
                _ => None,
            })
            .collect()
    }

    pub fn crop_count(&self) -> usize {
        self.trace.iter().filter(|r| matches!(r.event, Event::Crop { .. })).count()
    }

    pub fn events(&self) -> Vec<Event> {
        self.trace.iter().map(|r| r.event.clone()).collect()
    }

    /// JSON lines, one event per line. SEG events reference mask files named
    /// `{mask_prefix}{index}.pgm`.
    pub fn trace_jsonl(&self, mask_prefix: &str) -> Result<String> {
        let mut out = Vec::new();
        for r in &self.trace {
            let mut v = serde_json::to_value(r)?;
            if let Event::Seg { index, .. } = r.event {
                v["mask"] = serde_json::Value::String(format!("{mask_prefix}{index}.pgm"));
            }
            writeln!(out, "{}", serde_json::to_string(&v)?)?;
        }
        Ok(String::from_utf8(out).expect("json is utf-8"))
    }

    pub fn save_trace(&self, path: &Path, mask_prefix: &str) -> Result<()> {
        Ok(std::fs::write(path, self.trace_jsonl(mask_prefix)?)?)
    }
}

/// Called on each crop (1-based region index) before it is encoded.
pub type RegionHook<'h> = &'h dyn Fn(usize, &mut ImageBuffer);

#[derive(Clone, Copy)]
pub struct GenerateOptions<'h> {
    pub ilvc_enabled: bool,
    pub max_steps: usize,
    pub record_logits: bool,
    pub threshold: f64,
    pub region_hook: Option<RegionHook<'h>>,
}

impl Default for GenerateOptions<'_> {
    fn default() -> Self {
        GenerateOptions {
            ilvc_enabled: true,
            max_steps: 256,
            record_logits: false,
            threshold: 0.5,
            region_hook: None,
        }
    }
}

fn push(trace: &mut Vec<TraceRecord>, step: usize, event: Event) {
    trace.push(TraceRecord { step, event });
}

pub fn generate<B: Backend + ?Sized>(
    backend: &B,
    img: &ImageBuffer,
    instruction: &[TokenId],
    opts: &GenerateOptions,
) -> Result<GenerationResult> {
    if opts.max_steps == 0 {
        return Err(LiraError::invalid("max_steps must be at least 1"));
    }
    let dims = (img.height(), img.width());
    let (f_g, f_pixel) = backend.encode_global(img)?;
    let mut seq = build_inference_prefix(&f_g, instruction);
    let mut res = GenerationResult {
        masks: Vec::new(),
        binary_masks: Vec::new(),
        seg_states: Vec::new(),
        tokens: Vec::new(),
        trace: Vec::new(),
        truncated: false,
        protocol_error: None,
        step_logits: Vec::new(),
        sequence: InterleavedSequence::new(),
    };
    let mut current: Option<BinaryMask> = None;
    let mut cached: Option<LmOutput> = None;
    let max_rows = backend.max_rows();
    let mut finished = false;

    for step in 0..opts.max_steps {
        if seq.total_rows() >= max_rows {
            break;
        }
        let out = match cached.take() {
            Some(o) => o,
            None => backend.forward(&seq)?,
        };
        let logits = out.last_logits();
        let token = lm::argmax(logits);
        if opts.record_logits {
            res.step_logits.push(logits.to_vec());
        }
        match token {
            EOS => {
                push(&mut res.trace, step, Event::Eos);
                finished = true;
                break;
            }
            SEG => {
                let index = seq.push_seg(false);
                let out = backend.forward(&seq)?;
                let state = out
                    .seg_states
                    .last()
                    .cloned()
                    .ok_or_else(|| LiraError::invalid("backend returned no seg state"))?;
                let soft = backend.decode(&state, &f_pixel, dims)?;
                let bin = decoder::binarize(&soft, opts.threshold);
                push(&mut res.trace, step, Event::Seg { index, area: bin.area() });
                res.masks.push(soft);
                res.binary_masks.push(bin.clone());
                res.seg_states.push(state);
                current = Some(bin);
                cached = Some(out);
            }
            IMAGE_ID if opts.ilvc_enabled => {
                let mask = match &current {
                    None => {
                        let msg = "<image_id> with M_current null".to_string();
                        push(&mut res.trace, step, Event::Error { message: msg.clone() });
                        res.protocol_error = Some(msg);
                        break;
                    }
                    Some(m) if m.is_empty() => {
                        let msg = format!("<image_id> after empty mask {}", res.masks.len());
                        push(&mut res.trace, step, Event::Error { message: msg.clone() });
                        res.protocol_error = Some(msg);
                        break;
                    }
                    Some(m) => m,
                };
                let mut crop = crop_region(img, mask, backend.local_res())?;
                let index = res.masks.len();
                if let Some(hook) = opts.region_hook {
                    hook(index, &mut crop.region);
                }
                let local = backend.encode_local(&crop.region)?;
                if seq.total_rows() + 1 + local.tokens() > max_rows {
                    break;
                }
                push(&mut res.trace, step, Event::Crop { index, bbox: crop.bbox });
                seq.push_token(IMAGE_ID, false);
                seq.push_features(FeatureSource::Local(index), local);
            }
            t => {
                push(&mut res.trace, step, Event::Text { token: t });
                seq.push_token(t, false);
            }
        }
        res.tokens.push(token);
    }
    res.truncated = !finished && res.protocol_error.is_none();
    res.sequence = seq;
    Ok(res)
}
