//! Semantic-enhanced feature extraction.
//!
//! Two patch transformers encode the image: a semantic encoder and a pixel
//! encoder. Each output passes through its own two-layer projection to the
//! common width D. The projected semantic features are refined by
//! multi-head cross attention that queries with the pixel features and
//! attends over the semantic ones, added back as a residual. The global
//! feature is the token-axis concatenation `[fused semantic; pixel]`.
//! Local crops go through the semantic branch only.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{LiraError, Result};
use crate::image::ImageBuffer;
use crate::nn;
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

pub const SEMANTIC_ENCODER: &str = "sefe.semantic.";
pub const PIXEL_ENCODER: &str = "sefe.pixel.";
pub const MLP_S: &str = "sefe.mlp_s.";
pub const MLP_P: &str = "sefe.mlp_p.";
pub const MHCA: &str = "sefe.mhca.";

/// Token features, `T × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(LiraError::shape("FeatureGrid::new", values.shape(), &[0, 0]));
        }
        Ok(FeatureGrid { values })
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Semantic,
    Pixel,
}

impl Branch {
    fn encoder(self) -> &'static str {
        match self {
            Branch::Semantic => "sefe.semantic",
            Branch::Pixel => "sefe.pixel",
        }
    }

    fn projection(self) -> &'static str {
        match self {
            Branch::Semantic => "sefe.mlp_s",
            Branch::Pixel => "sefe.mlp_p",
        }
    }

    fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            Branch::Semantic => cfg.semantic_dim,
            Branch::Pixel => cfg.pixel_dim,
        }
    }
}

fn pos_table_len(cfg: &ModelConfig) -> usize {
    cfg.image_size.max(cfg.local_res) / cfg.patch
}

pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    for branch in [Branch::Semantic, Branch::Pixel] {
        let e = branch.width(cfg);
        let name = branch.encoder();
        nn::init_linear(store, rng, &format!("{name}.patch"), cfg.patch * cfg.patch * 3, e);
        store.insert(format!("{name}.row_pos"), normal(&[pos_table_len(cfg), e], 0.2, rng));
        store.insert(format!("{name}.col_pos"), normal(&[pos_table_len(cfg), e], 0.2, rng));
        for b in 0..cfg.enc_blocks {
            nn::init_block(store, rng, &format!("{name}.block{b}"), e, cfg.mlp_ratio, 0.5);
        }
        nn::init_layer_norm(store, &format!("{name}.ln_f"), e);
        nn::init_mlp(store, rng, branch.projection(), e, cfg.dim, cfg.dim);
    }
    for part in ["q", "k", "v"] {
        nn::init_linear(store, rng, &format!("sefe.mhca.{part}"), cfg.dim, cfg.dim);
    }
    // Zero output projection: fusion starts as the identity on f_s.
    store.insert("sefe.mhca.out.w", Tensor::zeros(&[cfg.dim, cfg.dim]));
    store.insert("sefe.mhca.out.b", Tensor::zeros(&[cfg.dim]));
}

/// Raw encoder output on a tape (no projection).
pub fn encode_on(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, img: &ImageBuffer, branch: Branch) -> Result<Var> {
    let (tokens, patches) = img.patches(cfg.patch)?;
    let (gh, gw) = (img.height() / cfg.patch, img.width() / cfg.patch);
    let table = pos_table_len(cfg);
    if gh > table || gw > table {
        return Err(LiraError::shape("encode", &[img.height(), img.width()], &[table * cfg.patch, table * cfg.patch]));
    }
    let name = branch.encoder();
    let x = tape.constant(Tensor::new(vec![tokens, cfg.patch * cfg.patch * 3], patches)?);
    let mut x = nn::linear(tape, store, &format!("{name}.patch"), x)?;
    let rows: Vec<usize> = (0..tokens).map(|t| t / gw).collect();
    let cols: Vec<usize> = (0..tokens).map(|t| t % gw).collect();
    let row_table = tape.param(store, &format!("{name}.row_pos"))?;
    let col_table = tape.param(store, &format!("{name}.col_pos"))?;
    let rp = tape.embedding_lookup(row_table, &rows)?;
    let cp = tape.embedding_lookup(col_table, &cols)?;
    x = tape.add(x, rp)?;
    x = tape.add(x, cp)?;
    for b in 0..cfg.enc_blocks {
        x = nn::block(tape, store, &format!("{name}.block{b}"), x, cfg.enc_heads, false)?;
    }
    nn::layer_norm(tape, store, &format!("{name}.ln_f"), x)
}

pub fn project_on(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, raw: Var, branch: Branch) -> Result<Var> {
    let want = branch.width(cfg);
    if tape.value(raw).cols() != want {
        return Err(LiraError::shape("project", tape.shape(raw), &[tape.shape(raw)[0], want]));
    }
    nn::mlp(tape, store, branch.projection(), raw)
}

/// `f_s + MHCA(Q = f_p, K = f_s, V = f_s)`.
pub fn fuse_on(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, f_s: Var, f_p: Var) -> Result<Var> {
    if tape.shape(f_s) != tape.shape(f_p) {
        return Err(LiraError::shape("fuse", tape.shape(f_s), tape.shape(f_p)));
    }
    if tape.value(f_s).cols() != cfg.dim {
        return Err(LiraError::shape("fuse", tape.shape(f_s), &[tape.shape(f_s)[0], cfg.dim]));
    }
    let q = nn::linear(tape, store, "sefe.mhca.q", f_p)?;
    let k = nn::linear(tape, store, "sefe.mhca.k", f_s)?;
    let v = nn::linear(tape, store, "sefe.mhca.v", f_s)?;
    let a = nn::attention(tape, q, k, v, cfg.heads, false)?;
    let a = nn::linear(tape, store, "sefe.mhca.out", a)?;
    tape.add(f_s, a)
}

/// Global feature from raw encoder outputs: `[fuse(f_s, f_p); f_p]`.
pub fn global_on(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, raw_s: Var, raw_p: Var) -> Result<Var> {
    let f_s = project_on(tape, store, cfg, raw_s, Branch::Semantic)?;
    let f_p = project_on(tape, store, cfg, raw_p, Branch::Pixel)?;
    let fused = fuse_on(tape, store, cfg, f_s, f_p)?;
    tape.concat(&[fused, f_p], 0)
}

/// Eager interface over a parameter store.
#[derive(Clone, Copy)]
pub struct Sefe<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl<'a> Sefe<'a> {
    pub fn new(params: &'a ParamStore, cfg: &'a ModelConfig) -> Self {
        Sefe { params, cfg }
    }

    fn run(&self, f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        FeatureGrid::new(tape.value(v).clone())
    }

    fn constant(tape: &mut Tape, g: &FeatureGrid) -> Var {
        tape.constant(g.values.clone())
    }

    pub fn encode_semantic(&self, img: &ImageBuffer) -> Result<FeatureGrid> {
        self.run(|t| encode_on(t, self.params, self.cfg, img, Branch::Semantic))
    }

    pub fn encode_pixel(&self, img: &ImageBuffer) -> Result<FeatureGrid> {
        self.run(|t| encode_on(t, self.params, self.cfg, img, Branch::Pixel))
    }

    pub fn project(&self, f: &FeatureGrid, branch: Branch) -> Result<FeatureGrid> {
        self.run(|t| {
            let x = Self::constant(t, f);
            project_on(t, self.params, self.cfg, x, branch)
        })
    }

    pub fn fuse(&self, f_s: &FeatureGrid, f_p: &FeatureGrid) -> Result<FeatureGrid> {
        self.run(|t| {
            let s = Self::constant(t, f_s);
            let p = Self::constant(t, f_p);
            fuse_on(t, self.params, self.cfg, s, p)
        })
    }

    /// Per-head cross-attention weights inside the fusion (rows index
    /// pixel-feature queries).
    pub fn attention_weights(&self, f_s: &FeatureGrid, f_p: &FeatureGrid) -> Result<Vec<Tensor>> {
        let mut t = Tape::new();
        let s = Self::constant(&mut t, f_s);
        let p = Self::constant(&mut t, f_p);
        let q = nn::linear(&mut t, self.params, "sefe.mhca.q", p)?;
        let k = nn::linear(&mut t, self.params, "sefe.mhca.k", s)?;
        let (q, k) = (t.value(q).clone(), t.value(k).clone());
        let dh = self.cfg.dim / self.cfg.heads;
        (0..self.cfg.heads)
            .map(|h| {
                let qh = q.slice(1, h * dh, (h + 1) * dh)?;
                let kh = k.slice(1, h * dh, (h + 1) * dh)?;
                let scores = qh.matmul(&kh.transpose()?)?.map(|v| v / (dh as f64).sqrt());
                scores.softmax(1)
            })
            .collect()
    }

    /// Returns the global feature `f` (2T × D) and the raw pixel-encoder
    /// features consumed by the mask decoder.
    pub fn forward(&self, img: &ImageBuffer) -> Result<(FeatureGrid, FeatureGrid)> {
        let mut t = Tape::new();
        let raw_s = encode_on(&mut t, self.params, self.cfg, img, Branch::Semantic)?;
        let raw_p = encode_on(&mut t, self.params, self.cfg, img, Branch::Pixel)?;
        let f = global_on(&mut t, self.params, self.cfg, raw_s, raw_p)?;
        Ok((FeatureGrid::new(t.value(f).clone())?, FeatureGrid::new(t.value(raw_p).clone())?))
    }

    /// Semantic-only features of a crop already resized to `local_res`.
    pub fn encode_local(&self, region: &ImageBuffer) -> Result<FeatureGrid> {
        let r = self.cfg.local_res;
        if region.height() != r || region.width() != r {
            return Err(LiraError::shape("encode_local", &[region.height(), region.width()], &[r, r]));
        }
        self.run(|t| {
            let raw = encode_on(t, self.params, self.cfg, region, Branch::Semantic)?;
            project_on(t, self.params, self.cfg, raw, Branch::Semantic)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn noise_image(size: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(size, size, (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn desk_small() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            local_res: 32,
            semantic_dim: 16,
            pixel_dim: 12,
            dim: 8,
            heads: 2,
            enc_heads: 2,
            enc_blocks: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn token_counts_and_determinism() {
        let cfg = desk_small();
        let store = setup(&cfg, 1);
        let sefe = Sefe::new(&store, &cfg);
        let img = noise_image(32, 2);
        let s = sefe.encode_semantic(&img).unwrap();
        assert_eq!((s.tokens(), s.dim()), (16, 16));
        let p = sefe.encode_pixel(&img).unwrap();
        assert_eq!((p.tokens(), p.dim()), (16, 12));
        assert_eq!(sefe.encode_semantic(&img).unwrap(), s);
        let (f, raw_p) = sefe.forward(&img).unwrap();
        assert_eq!((f.tokens(), f.dim()), (32, 8));
        assert_eq!(raw_p, p);
        assert!(sefe.encode_semantic(&noise_image(30, 0)).is_err());
    }

    #[test]
    fn one_patch_perturbation_changes_both_encoders() {
        let cfg = desk_small();
        let store = setup(&cfg, 1);
        let sefe = Sefe::new(&store, &cfg);
        let img = noise_image(32, 3);
        let mut other = img.clone();
        other.set_pixel(9, 9, [0.0, 0.0, 0.0]);
        assert_ne!(sefe.encode_semantic(&img).unwrap(), sefe.encode_semantic(&other).unwrap());
        assert_ne!(sefe.encode_pixel(&img).unwrap(), sefe.encode_pixel(&other).unwrap());
    }

    #[test]
    fn projection_shapes_and_oracle() {
        let cfg = desk_small();
        let mut store = setup(&cfg, 4);
        let sefe = Sefe::new(&store, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FeatureGrid::new(normal(&[16, 16], 1.0, &mut rng)).unwrap();
        let out = sefe.project(&f, Branch::Semantic).unwrap();
        assert_eq!((out.tokens(), out.dim()), (16, 8));
        assert!(sefe.project(&f, Branch::Pixel).is_err());

        // hand oracle: gelu(x W1 + b1) W2 + b2 via eager matmuls
        let w1 = store.get("sefe.mlp_s.fc1.w").unwrap();
        let b1 = store.get("sefe.mlp_s.fc1.b").unwrap();
        let w2 = store.get("sefe.mlp_s.fc2.w").unwrap();
        let b2 = store.get("sefe.mlp_s.fc2.b").unwrap();
        let h = f.values().matmul(w1).unwrap();
        let h = Tensor::new(h.shape().to_vec(), h.data().iter().enumerate().map(|(i, v)| crate::tensor::gelu(v + b1.data()[i % 8])).collect()).unwrap();
        let o = h.matmul(w2).unwrap();
        let o: Vec<f64> = o.data().iter().enumerate().map(|(i, v)| v + b2.data()[i % 8]).collect();
        assert!(out.values().data().iter().zip(&o).all(|(a, b)| (a - b).abs() < 1e-12));

        // zero weights leave the bias
        for n in ["sefe.mlp_s.fc1.w", "sefe.mlp_s.fc2.w"] {
            store.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        store.get_mut("sefe.mlp_s.fc2.b").unwrap().data_mut().fill(0.25);
        let z = Sefe::new(&store, &cfg).project(&f, Branch::Semantic).unwrap();
        assert!(z.values().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn fuse_residual_identity_with_zero_output() {
        let cfg = desk_small();
        let store = setup(&cfg, 6);
        let sefe = Sefe::new(&store, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f_s = FeatureGrid::new(normal(&[16, 8], 1.0, &mut rng)).unwrap();
        let f_p = FeatureGrid::new(normal(&[16, 8], 1.0, &mut rng)).unwrap();
        assert_eq!(sefe.fuse(&f_s, &f_p).unwrap(), f_s);
        let short = FeatureGrid::new(normal(&[15, 8], 1.0, &mut rng)).unwrap();
        assert!(matches!(sefe.fuse(&f_s, &short), Err(LiraError::Shape { .. })));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = desk_small();
        let store = setup(&cfg, 8);
        let sefe = Sefe::new(&store, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f_s = FeatureGrid::new(normal(&[16, 8], 3.0, &mut rng)).unwrap();
        let f_p = FeatureGrid::new(normal(&[16, 8], 3.0, &mut rng)).unwrap();
        for w in sefe.attention_weights(&f_s, &f_p).unwrap() {
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    /// T = 2, D = 2, one head, identity projections: the fusion equals a
    /// scalar attention oracle written out by hand.
    #[test]
    fn fuse_matches_scalar_attention_oracle() {
        let cfg = ModelConfig {
            dim: 2,
            heads: 1,
            ..desk_small()
        };
        let mut store = setup(&cfg, 10);
        for part in ["q", "k", "v", "out"] {
            let w = store.get_mut(&format!("sefe.mhca.{part}.w")).unwrap();
            w.data_mut().copy_from_slice(Tensor::eye(2).data());
            store.get_mut(&format!("sefe.mhca.{part}.b")).unwrap().data_mut().fill(0.0);
        }
        let f_s = FeatureGrid::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 2.0]).unwrap()).unwrap();
        let f_p = FeatureGrid::new(Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 1.0]).unwrap()).unwrap();
        let got = Sefe::new(&store, &cfg).fuse(&f_s, &f_p).unwrap();

        let s = [[1.0, 0.0], [0.5, 2.0]];
        let p = [[0.3, -1.0], [2.0, 1.0]];
        let scale = 1.0 / 2f64.sqrt();
        let mut want = [[0.0; 2]; 2];
        for i in 0..2 {
            let e0 = ((p[i][0] * s[0][0] + p[i][1] * s[0][1]) * scale).exp();
            let e1 = ((p[i][0] * s[1][0] + p[i][1] * s[1][1]) * scale).exp();
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for j in 0..2 {
                want[i][j] = s[i][j] + a0 * s[0][j] + a1 * s[1][j];
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((got.values().get2(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_equals_composed_sub_ops() {
        let cfg = desk_small();
        let mut store = setup(&cfg, 11);
        // non-trivial fusion
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        *store.get_mut("sefe.mhca.out.w").unwrap() = normal(&[8, 8], 0.3, &mut rng);
        let sefe = Sefe::new(&store, &cfg);
        let img = noise_image(32, 13);
        let (f, _) = sefe.forward(&img).unwrap();
        let f_s = sefe.project(&sefe.encode_semantic(&img).unwrap(), Branch::Semantic).unwrap();
        let f_p = sefe.project(&sefe.encode_pixel(&img).unwrap(), Branch::Pixel).unwrap();
        let fused = sefe.fuse(&f_s, &f_p).unwrap();
        let want = Tensor::concat(&[fused.values(), f_p.values()], 0).unwrap();
        assert!(f.values().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn local_encoding_is_semantic_only() {
        let cfg = desk_small();
        let store = setup(&cfg, 14);
        let sefe = Sefe::new(&store, &cfg);
        let crop = noise_image(32, 15);
        let local = sefe.encode_local(&crop).unwrap();
        assert_eq!(local.tokens(), 16);
        let direct = sefe.project(&sefe.encode_semantic(&crop).unwrap(), Branch::Semantic).unwrap();
        assert_eq!(local, direct);
        let (full, _) = sefe.forward(&crop).unwrap();
        assert_ne!(full.tokens(), local.tokens());
        let pixel_half = full.values().slice(0, 16, 32).unwrap();
        assert!(pixel_half.max_abs_diff(local.values()) > 1e-6);
        assert!(sefe.encode_local(&noise_image(16, 0)).is_err());
    }
}
