//! Seeded synthetic scenes: coloured squares, circles and triangles on a
//! dark background, with exact masks, templated descriptions and attribute
//! records.
//!
//! Objects are placed on the patch grid with non-overlapping bounding
//! boxes. Colours are distinct within a scene and so are (shape, location)
//! pairs, which keeps every description variant unambiguous.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};
use crate::generation::{prompt_words, Task};
use crate::image::{BinaryMask, ImageBuffer};
use crate::vocab::{AttrClass, Vocab, COLORS, SHAPES};

pub const BACKGROUND: [u8; 3] = [40, 40, 40];

pub fn color_rgb(color: &str) -> Option<[u8; 3]> {
    Some(match color {
        "red" => [220, 40, 40],
        "green" => [40, 200, 60],
        "blue" => [50, 80, 230],
        "yellow" => [230, 220, 50],
        "purple" => [150, 60, 200],
        "cyan" => [50, 210, 220],
        "white" => [240, 240, 240],
        _ => return None,
    })
}

fn unit(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(|v| v as f64 / 255.0)
}

pub const SIZES: [usize; 2] = [16, 24];
const GRID: usize = 8;
const MAX_TRIES: usize = 200;

/// Whether pixel `(r, c)` of a `size` box anchored at the origin belongs
/// to the shape. Pixel centres are tested.
pub fn shape_contains(shape: &str, size: usize, r: usize, c: usize) -> bool {
    let s = size as f64;
    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
    match shape {
        "square" => r < size && c < size,
        "circle" => {
            let h = s / 2.0;
            (y - h).powi(2) + (x - h).powi(2) <= h * h
        }
        // apex at the top centre, base along the bottom edge
        "triangle" => y <= s && (x - s / 2.0).abs() <= y / 2.0,
        _ => false,
    }
}

/// Location word from the object centre.
pub fn location_of(center: (f64, f64), canvas: (usize, usize)) -> &'static str {
    let (h, w) = (canvas.0 as f64, canvas.1 as f64);
    let dy = center.0 - h / 2.0;
    let dx = center.1 - w / 2.0;
    if dx.abs() <= w / 8.0 && dy.abs() <= h / 8.0 {
        "center"
    } else if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if dy < 0.0 {
        "top"
    } else {
        "bottom"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: String,
    pub color: String,
    pub location: String,
    pub size: usize,
    pub row: usize,
    pub col: usize,
}

impl ObjectSpec {
    /// Every description variant: full, then without colour, without
    /// location and without category.
    pub fn descriptions(&self) -> Vec<String> {
        let (c, s, l) = (&self.color, &self.shape, &self.location);
        vec![
            format!("the {c} {s} on the {l}"),
            format!("the {s} on the {l}"),
            format!("the {c} {s}"),
            format!("the {c} one on the {l}"),
        ]
    }

    /// Text inside the `<p>` block of the object's local region.
    pub fn local_description(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }

    pub fn attributes(&self) -> BTreeMap<AttrClass, String> {
        BTreeMap::from([
            (AttrClass::Category, self.shape.clone()),
            (AttrClass::Color, self.color.clone()),
            (AttrClass::Location, self.location.clone()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub spec: ObjectSpec,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub image: ImageBuffer,
    pub objects: Vec<SceneObject>,
}

pub fn generate_scene(seed: u64, n_objects: usize, canvas: usize) -> Result<Scene> {
    if n_objects == 0 || n_objects > COLORS.len() {
        return Err(LiraError::invalid(format!("cannot place {n_objects} objects")));
    }
    if canvas < SIZES[1] || !canvas.is_multiple_of(GRID) {
        return Err(LiraError::invalid(format!("canvas {canvas} too small or off-grid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<&str> = COLORS.to_vec();
    colors.shuffle(&mut rng);
    let mut specs: Vec<ObjectSpec> = Vec::with_capacity(n_objects);
    for color in colors.into_iter().take(n_objects) {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let shape = *SHAPES.choose(&mut rng).expect("non-empty");
            let size = *SIZES.choose(&mut rng).expect("non-empty");
            let slots = (canvas - size) / GRID + 1;
            let row = rng.gen_range(0..slots) * GRID;
            let col = rng.gen_range(0..slots) * GRID;
            let center = (row as f64 + size as f64 / 2.0, col as f64 + size as f64 / 2.0);
            let location = location_of(center, (canvas, canvas));
            let clash = specs.iter().any(|o| {
                let overlap = row < o.row + o.size && o.row < row + size && col < o.col + o.size && o.col < col + size;
                overlap || (o.shape == shape && o.location == location)
            });
            if !clash {
                specs.push(ObjectSpec {
                    shape: shape.into(),
                    color: color.into(),
                    location: location.into(),
                    size,
                    row,
                    col,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LiraError::invalid(format!("placement failed for scene seed {seed}")));
        }
    }
    let mut image = ImageBuffer::filled(canvas, canvas, unit(BACKGROUND))?;
    let mut objects = Vec::with_capacity(specs.len());
    for spec in specs {
        let rgb = unit(color_rgb(&spec.color).expect("lexicon colour"));
        let mask = BinaryMask::from_fn(canvas, canvas, |r, c| {
            r >= spec.row
                && c >= spec.col
                && shape_contains(&spec.shape, spec.size, r - spec.row, c - spec.col)
        });
        for r in 0..canvas {
            for c in 0..canvas {
                if mask.get(r, c) {
                    image.set_pixel(r, c, rgb);
                }
            }
        }
        objects.push(SceneObject { spec, mask });
    }
    Ok(Scene { seed, image, objects })
}

/// One object's attribute record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrRecord {
    pub object_id: String,
    pub image: String,
    pub mask: String,
    pub descriptions: Vec<String>,
    pub attributes: BTreeMap<AttrClass, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub mask: String,
    pub description: String,
}

/// A training or evaluation sample as stored on disk. Paths are relative
/// to the split directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub task: Task,
    pub ilvc: bool,
    /// Instruction without the prompt template.
    pub query: String,
    pub instruction: String,
    pub regions: Vec<RegionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of referring samples built with the plain prompt.
    pub no_ilvc_fraction: f64,
    /// Fraction of scenes that also get a grounded-caption sample over all
    /// of their objects.
    pub gcg_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            canvas: 64,
            min_objects: 1,
            max_objects: 3,
            no_ilvc_fraction: 0.1,
            gcg_fraction: 0.0,
        }
    }
}

fn instruction_text(task: Task, ilvc: bool, query: &str) -> String {
    let mut words = prompt_words(task, ilvc).join(" ");
    if !query.is_empty() {
        words.push(' ');
        words.push_str(query);
    }
    words
}

/// Referring queries always name the colour.
fn referring_query(spec: &ObjectSpec, rng: &mut impl Rng) -> String {
    let d = spec.descriptions();
    [&d[0], &d[2], &d[3]][rng.gen_range(0..3)].clone()
}

/// Split seeds: `base + i` for training and `base + n_train + i` for
/// evaluation, so the two never share a scene seed.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    (seed << 24).wrapping_add(index as u64)
}

fn write_split(dir: &Path, seeds: &[u64], opts: &SplitOptions, sample_seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for (i, &s) in seeds.iter().enumerate() {
        let n = rng.gen_range(opts.min_objects..=opts.max_objects);
        let scene = generate_scene(s, n, opts.canvas)?;
        let image = format!("images/scene_{i:05}.ppm");
        scene.image.save_ppm(&dir.join(&image))?;
        let mut regions = Vec::new();
        for (j, obj) in scene.objects.iter().enumerate() {
            let mask = format!("masks/scene_{i:05}_obj_{j}.pgm");
            obj.mask.save_pgm(&dir.join(&mask))?;
            regions.push(RegionRecord {
                mask: mask.clone(),
                description: obj.spec.local_description(),
            });
            records.push(AttrRecord {
                object_id: format!("scene_{i:05}_obj_{j}"),
                image: image.clone(),
                mask,
                descriptions: obj.spec.descriptions(),
                attributes: obj.spec.attributes(),
            });
            let ilvc = !rng.gen_bool(opts.no_ilvc_fraction);
            let query = referring_query(&obj.spec, &mut rng);
            samples.push(SampleRecord {
                id: format!("scene_{i:05}_obj_{j}"),
                image: image.clone(),
                task: Task::Refseg,
                ilvc,
                instruction: instruction_text(Task::Refseg, ilvc, &query),
                query,
                regions: vec![regions[j].clone()],
            });
        }
        if opts.gcg_fraction > 0.0 && rng.gen_bool(opts.gcg_fraction) {
            samples.push(SampleRecord {
                id: format!("scene_{i:05}_gcg"),
                image: image.clone(),
                task: Task::Gcg,
                ilvc: true,
                query: String::new(),
                instruction: instruction_text(Task::Gcg, true, ""),
                regions,
            });
        }
    }
    std::fs::write(dir.join("samples.json"), serde_json::to_string_pretty(&samples)?)?;
    std::fs::write(dir.join("records.json"), serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

/// Writes `train/`, `eval/` and `vocab.txt` under `dir`.
pub fn make_split(dir: &Path, seed: u64, n_train: usize, n_eval: usize, opts: &SplitOptions) -> Result<()> {
    if opts.min_objects == 0 || opts.min_objects > opts.max_objects {
        return Err(LiraError::invalid("need 1 <= min_objects <= max_objects"));
    }
    if !(0.0..=1.0).contains(&opts.no_ilvc_fraction) || !(0.0..=1.0).contains(&opts.gcg_fraction) {
        return Err(LiraError::invalid("fractions must lie in [0, 1]"));
    }
    std::fs::create_dir_all(dir)?;
    let train: Vec<u64> = (0..n_train).map(|i| scene_seed(seed, i)).collect();
    let eval: Vec<u64> = (n_train..n_train + n_eval).map(|i| scene_seed(seed, i)).collect();
    write_split(&dir.join("train"), &train, opts, seed ^ 0x0074_7261_696e)?;
    write_split(&dir.join("eval"), &eval, opts, seed ^ 0x6576_616c)?;
    Vocab::synthetic().save(&dir.join("vocab.txt"))
}

/// A sample with its image and masks loaded.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub image: ImageBuffer,
    pub masks: Vec<BinaryMask>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub dir: PathBuf,
    pub samples: Vec<LoadedSample>,
    pub records: Vec<AttrRecord>,
}

impl Split {
    pub fn load(dir: &Path) -> Result<Self> {
        let samples: Vec<SampleRecord> = serde_json::from_str(&std::fs::read_to_string(dir.join("samples.json"))?)?;
        let records: Vec<AttrRecord> = serde_json::from_str(&std::fs::read_to_string(dir.join("records.json"))?)?;
        let mut images: BTreeMap<String, ImageBuffer> = BTreeMap::new();
        let mut loaded = Vec::with_capacity(samples.len());
        for record in samples {
            if !images.contains_key(&record.image) {
                images.insert(record.image.clone(), ImageBuffer::load_ppm(&dir.join(&record.image))?);
            }
            let image = images[&record.image].clone();
            let masks = record
                .regions
                .iter()
                .map(|r| BinaryMask::load_pgm(&dir.join(&r.mask)))
                .collect::<Result<Vec<_>>>()?;
            loaded.push(LoadedSample { record, image, masks });
        }
        Ok(Split {
            dir: dir.to_path_buf(),
            samples: loaded,
            records,
        })
    }
}
