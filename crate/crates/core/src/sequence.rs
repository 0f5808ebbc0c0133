//! Interleaved mask-region-text sequences.
//!
//! A full training sample is laid out as
//!
//! ```text
//! [global features] instruction…
//!   <seg>₁ <image_id> [local features 1] <p> description 1… </p>
//!   …
//!   <seg>ₙ <image_id> [local features n] <p> description n… </p>
//! <eos>
//! ```
//!
//! During training the local crops come from ground-truth masks; at
//! inference the generation engine crops with decoded masks instead.

use crate::error::{LiraError, Result};
use crate::image::{BBox, BinaryMask, ImageBuffer};
use crate::sefe::{FeatureGrid, Sefe};
use crate::vocab::{TokenId, EOS, IMAGE_ID, P_CLOSE, P_OPEN, SEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Global,
    /// 1-based region index.
    Local(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Token(TokenId),
    Features { source: FeatureSource, grid: FeatureGrid },
    /// Occurrence of the `<seg>` token, 1-based.
    Seg(usize),
}

/// Element kinds without payloads, for layout assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Global,
    Local(usize),
    Text,
    Seg(usize),
    ImageId,
    POpen,
    PClose,
    Eos,
}

impl Element {
    pub fn kind(&self) -> Kind {
        match self {
            Element::Features {
                source: FeatureSource::Global,
                ..
            } => Kind::Global,
            Element::Features {
                source: FeatureSource::Local(i),
                ..
            } => Kind::Local(*i),
            Element::Seg(i) => Kind::Seg(*i),
            Element::Token(IMAGE_ID) => Kind::ImageId,
            Element::Token(P_OPEN) => Kind::POpen,
            Element::Token(P_CLOSE) => Kind::PClose,
            Element::Token(EOS) => Kind::Eos,
            Element::Token(_) => Kind::Text,
        }
    }

    /// Token id fed to the language model, if this element is a token.
    pub fn token_id(&self) -> Option<TokenId> {
        match self {
            Element::Token(t) => Some(*t),
            Element::Seg(_) => Some(SEG),
            Element::Features { .. } => None,
        }
    }

    /// Rows this element occupies in the language-model input.
    pub fn rows(&self) -> usize {
        match self {
            Element::Features { grid, .. } => grid.tokens(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterleavedSequence {
    elements: Vec<Element>,
    supervised: Vec<bool>,
    regions: usize,
    prompt_len: usize,
}

/// What a built sequence encodes, recovered by [`InterleavedSequence::parse`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSequence {
    pub instruction: Vec<TokenId>,
    pub regions: usize,
    pub descriptions: Vec<Vec<TokenId>>,
}

impl InterleavedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn supervised(&self) -> &[bool] {
        &self.supervised
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn region_count(&self) -> usize {
        self.regions
    }

    /// Number of elements in the prompt (set when the prefix is built).
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn mark_prompt_end(&mut self) {
        self.prompt_len = self.elements.len();
    }

    pub fn kinds(&self) -> Vec<Kind> {
        self.elements.iter().map(Element::kind).collect()
    }

    pub fn total_rows(&self) -> usize {
        self.elements.iter().map(Element::rows).sum()
    }

    pub fn push_token(&mut self, id: TokenId, supervised: bool) {
        debug_assert_ne!(id, SEG, "use push_seg");
        self.elements.push(Element::Token(id));
        self.supervised.push(supervised);
    }

    pub fn push_tokens(&mut self, ids: &[TokenId], supervised: bool) {
        for &id in ids {
            self.push_token(id, supervised);
        }
    }

    /// Appends the next `<seg>` occurrence and returns its 1-based index.
    pub fn push_seg(&mut self, supervised: bool) -> usize {
        self.regions += 1;
        self.elements.push(Element::Seg(self.regions));
        self.supervised.push(supervised);
        self.regions
    }

    /// Feature blocks are never supervised.
    pub fn push_features(&mut self, source: FeatureSource, grid: FeatureGrid) {
        self.elements.push(Element::Features { source, grid });
        self.supervised.push(false);
    }

    /// Tokens emitted after the prompt, including `<seg>` and `<image_id>`.
    pub fn generated_tokens(&self) -> Vec<TokenId> {
        self.elements[self.prompt_len..].iter().filter_map(Element::token_id).collect()
    }

    /// First row of every element in the language-model input.
    pub fn element_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.elements.len());
        let mut r = 0;
        for e in &self.elements {
            rows.push(r);
            r += e.rows();
        }
        rows
    }

    /// Next-token targets as `(input row, token)`: a supervised token is
    /// predicted from the last row of the element before it.
    pub fn targets(&self) -> Vec<(usize, TokenId)> {
        let starts = self.element_rows();
        (1..self.elements.len())
            .filter(|&k| self.supervised[k])
            .filter_map(|k| {
                let tok = self.elements[k].token_id()?;
                Some((starts[k] - 1, tok))
            })
            .collect()
    }

    /// Input rows of the `<seg>` occurrences, in order.
    pub fn seg_rows(&self) -> Vec<usize> {
        let starts = self.element_rows();
        self.elements
            .iter()
            .zip(starts)
            .filter(|(e, _)| matches!(e, Element::Seg(_)))
            .map(|(_, r)| r)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut expect = 1;
        for (e, &sup) in self.elements.iter().zip(&self.supervised) {
            match e {
                Element::Features { .. } if sup => {
                    return Err(LiraError::invalid("feature block marked supervised"));
                }
                Element::Seg(i) => {
                    if *i != expect {
                        return Err(LiraError::invalid(format!("seg index {i}, expected {expect}")));
                    }
                    expect += 1;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Recovers the instruction, region count and descriptions.
    pub fn parse(&self) -> Result<ParsedSequence> {
        let mut it = self.elements.iter().peekable();
        match it.next() {
            Some(Element::Features {
                source: FeatureSource::Global,
                ..
            }) => {}
            _ => return Err(LiraError::invalid("sequence must start with the global feature block")),
        }
        let mut instruction = Vec::new();
        while let Some(Element::Token(t)) = it.peek() {
            if *t == EOS {
                break;
            }
            instruction.push(*t);
            it.next();
        }
        let mut descriptions = Vec::new();
        let mut regions = 0;
        let mut current: Option<Vec<TokenId>> = None;
        for e in it {
            match (e, current.as_mut()) {
                (Element::Seg(_), None) => regions += 1,
                (Element::Token(P_OPEN), None) => current = Some(Vec::new()),
                (Element::Token(P_CLOSE), Some(_)) => descriptions.push(current.take().expect("open")),
                (Element::Token(EOS), None) => break,
                (Element::Token(t), Some(desc)) => desc.push(*t),
                (Element::Token(IMAGE_ID), None) | (Element::Features { .. }, None) => {}
                (other, _) => return Err(LiraError::invalid(format!("unexpected element {:?}", other.kind()))),
            }
        }
        if current.is_some() {
            return Err(LiraError::invalid("unterminated <p> block"));
        }
        Ok(ParsedSequence {
            instruction,
            regions,
            descriptions,
        })
    }
}

/// Tight bounding box of a mask and the box contents resized to the local
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCrop {
    pub bbox: BBox,
    pub region: ImageBuffer,
}

/// Crops the tight bounding box of `mask` (background retained) and
/// resizes it bilinearly to `local_res × local_res`.
pub fn crop_region(img: &ImageBuffer, mask: &BinaryMask, local_res: usize) -> Result<RegionCrop> {
    if mask.dims() != (img.height(), img.width()) {
        return Err(LiraError::shape(
            "crop_region",
            &[img.height(), img.width()],
            &[mask.height(), mask.width()],
        ));
    }
    let bbox = mask.bbox().ok_or_else(|| LiraError::EmptyMask("cannot crop an empty mask".into()))?;
    let region = img
        .crop(bbox.row_min, bbox.col_min, bbox.row_max, bbox.col_max)?
        .resize_bilinear(local_res, local_res)?;
    Ok(RegionCrop { bbox, region })
}

/// One region of a training sample: its mask and the description tokens.
#[derive(Debug, Clone)]
pub struct RegionAnnotation {
    pub mask: BinaryMask,
    pub description: Vec<TokenId>,
}

/// Lays out a training sequence from already-encoded local features.
pub fn assemble_training_sequence(
    global: FeatureGrid,
    instruction: &[TokenId],
    descriptions: &[Vec<TokenId>],
    locals: Vec<FeatureGrid>,
) -> Result<InterleavedSequence> {
    if descriptions.len() != locals.len() {
        return Err(LiraError::invalid(format!(
            "{} descriptions for {} local blocks",
            descriptions.len(),
            locals.len()
        )));
    }
    let mut seq = InterleavedSequence::new();
    seq.push_features(FeatureSource::Global, global);
    seq.push_tokens(instruction, false);
    for (desc, local) in descriptions.iter().zip(locals) {
        if desc.is_empty() {
            return Err(LiraError::invalid("region description must be non-empty"));
        }
        let i = seq.push_seg(true);
        seq.push_token(IMAGE_ID, true);
        seq.push_features(FeatureSource::Local(i), local);
        seq.push_token(P_OPEN, true);
        seq.push_tokens(desc, true);
        seq.push_token(P_CLOSE, true);
    }
    seq.push_token(EOS, true);
    Ok(seq)
}

/// Sequence without local coupling: one `<seg>` per region, then `<eos>`.
pub fn assemble_plain_sequence(global: FeatureGrid, instruction: &[TokenId], regions: usize) -> InterleavedSequence {
    let mut seq = InterleavedSequence::new();
    seq.push_features(FeatureSource::Global, global);
    seq.push_tokens(instruction, false);
    for _ in 0..regions {
        seq.push_seg(true);
    }
    seq.push_token(EOS, true);
    seq
}

/// Full training sequence with local regions cropped from ground-truth
/// masks and encoded by the semantic branch.
pub fn build_training_sequence(
    f_g: &FeatureGrid,
    instruction: &[TokenId],
    regions: &[RegionAnnotation],
    img: &ImageBuffer,
    sefe: &Sefe,
) -> Result<InterleavedSequence> {
    let mut locals = Vec::with_capacity(regions.len());
    for (i, r) in regions.iter().enumerate() {
        if r.mask.is_empty() {
            return Err(LiraError::EmptyMask(format!("ground-truth mask of region {}", i + 1)));
        }
        let crop = crop_region(img, &r.mask, sefe.cfg.local_res)?;
        locals.push(sefe.encode_local(&crop.region)?);
    }
    let descriptions: Vec<Vec<TokenId>> = regions.iter().map(|r| r.description.clone()).collect();
    assemble_training_sequence(f_g.clone(), instruction, &descriptions, locals)
}

/// `{global features, instruction}`; the generation engine appends the rest.
pub fn build_inference_prefix(f_g: &FeatureGrid, instruction: &[TokenId]) -> InterleavedSequence {
    let mut seq = InterleavedSequence::new();
    seq.push_features(FeatureSource::Global, f_g.clone());
    seq.push_tokens(instruction, false);
    seq.mark_prompt_end();
    seq
}
