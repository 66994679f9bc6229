//! Procedural try-on triplets, task instances and batch schedules.
//!
//! A triplet is (garment, model, tryon): a patterned garment photographed on
//! a plain backdrop, a person wearing a distractor garment, and the same
//! person wearing the target garment. The garment region is known exactly, so
//! masked metrics have a ground truth.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imageio;
use crate::numerics::rng::{child_id, stream};
use crate::numerics::{odt, Float, Tensor};

pub const PATTERN_FAMILIES: usize = 8;
pub const PALETTES: usize = 8;
const BACKGROUNDS: usize = 4;
const POSES: usize = 4;

/// `[3, H, W]` image with values in `[-1, 1]`.
pub type Image = Tensor<f64>;

/// Closed text vocabulary standing in for prompts.
pub mod vocab {
    pub const NULL: usize = 0;
    pub const TASK_BASE: usize = 1;
    pub const PATTERN_BASE: usize = 4;
    pub const PALETTE_BASE: usize = PATTERN_BASE + super::PATTERN_FAMILIES;
    pub const SIZE: usize = PALETTE_BASE + super::PALETTES;
    /// Tokens per prompt: task tag, pattern family, palette.
    pub const PROMPT_LEN: usize = 3;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Per-pixel weights replicated over the three channels.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let plane: Vec<F> = self.bits.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
        let data = plane.iter().chain(&plane).chain(&plane).copied().collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("mask shape")
    }

    pub fn from_tensor<F: Float>(t: &Tensor<F>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(Self {
            width: w,
            height: h,
            bits: t.data()[..w * h].iter().map(|&x| x > F::zero()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrs {
    pub pattern_id: usize,
    pub palette_id: usize,
    pub body_pose_id: usize,
    pub background_id: usize,
}

/// Translation plus integer upscaling of the garment's base pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub seed: u64,
    pub garment: Image,
    pub model_img: Image,
    pub tryon: Image,
    /// Garment region in tryon coordinates.
    pub mask: Mask,
    /// Garment region in garment-image coordinates.
    pub garment_mask: Mask,
    pub attrs: Attrs,
    pub pattern_size: (usize, usize),
    pub tryon_placement: Placement,
    pub garment_placement: Placement,
}

type Rgb = [f64; 3];

const PALETTE_TABLE: [(Rgb, Rgb); PALETTES] = [
    ([0.75, -0.5, -0.5], [0.75, 0.5, 0.25]),
    ([-0.5, -0.25, 0.75], [0.5, 0.75, 0.75]),
    ([-0.25, 0.5, -0.5], [0.75, 0.75, 0.0]),
    ([0.5, -0.5, 0.5], [0.0, -0.25, 0.0]),
    ([0.25, 0.25, -0.75], [-0.5, 0.0, 0.5]),
    ([-0.75, 0.0, 0.0], [0.25, 0.5, 0.5]),
    ([0.75, 0.25, -0.5], [-0.25, -0.5, -0.75]),
    ([0.0, 0.0, 0.0], [0.75, 0.75, 0.5]),
];

const BACKGROUND_TABLE: [Rgb; BACKGROUNDS] = [
    [-0.5, -0.5, -0.25],
    [0.25, 0.0, -0.25],
    [-0.25, 0.25, 0.0],
    [0.0, -0.25, 0.25],
];

const GARMENT_BACKDROP: Rgb = [0.875, 0.875, 0.875];
const SKIN: Rgb = [0.5, 0.125, -0.125];
const TROUSERS: Rgb = [-0.75, -0.75, -0.5];

/// Colour of the base pattern at `(x, y)` inside a `w × h` patch.
pub fn pattern_pixel(family: usize, palette: usize, x: usize, y: usize, w: usize, h: usize) -> Rgb {
    let (a, b) = PALETTE_TABLE[palette];
    let second = match family {
        0 => false,
        1 => (y / 2) % 2 == 1,
        2 => (x / 2) % 2 == 1,
        3 => (x + y) % 2 == 1,
        4 => (x + y) % 4 < 2,
        5 => x % 3 == 1 && y % 3 == 1,
        6 => x == 0 || y == 0 || x + 1 == w || y + 1 == h,
        _ => y >= h / 2,
    };
    if second {
        b
    } else {
        a
    }
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, fill: Rgb) -> Self {
        let mut data = vec![0.0; 3 * size * size];
        for c in 0..3 {
            data[c * size * size..(c + 1) * size * size].fill(fill[c]);
        }
        Self { size, data }
    }

    fn set(&mut self, x: usize, y: usize, rgb: Rgb) {
        let n = self.size * self.size;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + y * self.size + x] = v;
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: Rgb) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                self.set(x, y, rgb);
            }
        }
    }

    /// Paints the scaled pattern and marks the region in `mask`.
    fn place(&mut self, p: Placement, family: usize, palette: usize, pw: usize, ph: usize, mask: &mut Mask) {
        for py in 0..ph * p.scale {
            for px in 0..pw * p.scale {
                let rgb = pattern_pixel(family, palette, px / p.scale, py / p.scale, pw, ph);
                self.set(p.x + px, p.y + py, rgb);
                mask.bits[(p.y + py) * self.size + p.x + px] = true;
            }
        }
    }

    fn into_image(self) -> Image {
        Tensor::new(vec![3, self.size, self.size], self.data).expect("canvas shape")
    }
}

/// Deterministic triplet for `seed` at `image_size` pixels (multiple of 16).
pub fn gen_triplet(seed: u64, image_size: usize) -> Result<Triplet> {
    if image_size < 16 || image_size % 16 != 0 {
        return Err(invalid(format!("image size {image_size} must be a multiple of 16")));
    }
    let u = image_size / 16;
    let mut rng = stream(seed, 0x7269_706c);
    let attrs = Attrs {
        pattern_id: rng.random_range(0..PATTERN_FAMILIES),
        palette_id: rng.random_range(0..PALETTES),
        body_pose_id: rng.random_range(0..POSES),
        background_id: rng.random_range(0..BACKGROUNDS),
    };
    let distractor_pattern = (attrs.pattern_id + rng.random_range(1..PATTERN_FAMILIES)) % PATTERN_FAMILIES;
    let distractor_palette = (attrs.palette_id + rng.random_range(1..PALETTES)) % PALETTES;

    // Pose fixes torso width/height and horizontal placement.
    let (pw, ph) = [(5, 6), (6, 6), (5, 7), (6, 7)][attrs.body_pose_id];
    let (pw, ph) = (pw * u, ph * u);
    let torso_x = [4, 5, 6, 5][attrs.body_pose_id] * u;
    let torso_y = 5 * u;
    let head_w = 4 * u;
    let head_x = torso_x + pw / 2 - head_w / 2;

    let draw_person = |canvas: &mut Canvas| {
        canvas.rect(head_x, u, head_w, 4 * u, SKIN);
        canvas.rect(torso_x - u, torso_y + u, u, ph - u, SKIN);
        canvas.rect(torso_x + pw, torso_y + u, u, ph - u, SKIN);
        canvas.rect(torso_x, torso_y + ph, pw, image_size - torso_y - ph, TROUSERS);
    };
    let bg = BACKGROUND_TABLE[attrs.background_id];
    let tryon_placement = Placement {
        x: torso_x,
        y: torso_y,
        scale: 1,
    };

    let mut mask = Mask::empty(image_size, image_size);
    let mut tryon = Canvas::new(image_size, bg);
    draw_person(&mut tryon);
    tryon.place(tryon_placement, attrs.pattern_id, attrs.palette_id, pw, ph, &mut mask);

    let mut scratch = Mask::empty(image_size, image_size);
    let mut model_img = Canvas::new(image_size, bg);
    draw_person(&mut model_img);
    model_img.place(tryon_placement, distractor_pattern, distractor_palette, pw, ph, &mut scratch);

    let gscale = 2;
    let garment_placement = Placement {
        x: (image_size - pw * gscale) / 2,
        y: (image_size - ph * gscale) / 2,
        scale: gscale,
    };
    let mut garment_mask = Mask::empty(image_size, image_size);
    let mut garment = Canvas::new(image_size, GARMENT_BACKDROP);
    garment.place(garment_placement, attrs.pattern_id, attrs.palette_id, pw, ph, &mut garment_mask);

    Ok(Triplet {
        seed,
        garment: garment.into_image(),
        model_img: model_img.into_image(),
        tryon: tryon.into_image(),
        mask,
        garment_mask,
        attrs,
        pattern_size: (pw, ph),
        tryon_placement,
        garment_placement,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ModelBasedTryon,
    ModelFreeTryon,
    Tryoff,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ModelBasedTryon, Task::ModelFreeTryon, Task::Tryoff];

    pub fn reference_count(self) -> usize {
        match self {
            Task::ModelBasedTryon => 2,
            Task::ModelFreeTryon | Task::Tryoff => 1,
        }
    }

    pub fn token(self) -> usize {
        vocab::TASK_BASE
            + match self {
                Task::ModelBasedTryon => 0,
                Task::ModelFreeTryon => 1,
                Task::Tryoff => 2,
            }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::ModelBasedTryon => "model_based_tryon",
            Task::ModelFreeTryon => "model_free_tryon",
            Task::Tryoff => "tryoff",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub task: Task,
    pub conditions: Vec<Image>,
    pub target: Image,
    pub text_ids: Vec<usize>,
    /// Garment region in target coordinates.
    pub mask: Mask,
}

pub fn prompt(task: Task, attrs: &Attrs) -> Vec<usize> {
    vec![
        task.token(),
        vocab::PATTERN_BASE + attrs.pattern_id,
        vocab::PALETTE_BASE + attrs.palette_id,
    ]
}

pub fn make_task(triplet: &Triplet, task: Task) -> TaskInstance {
    let text_ids = prompt(task, &triplet.attrs);
    match task {
        Task::ModelBasedTryon => TaskInstance {
            task,
            conditions: vec![triplet.garment.clone(), triplet.model_img.clone()],
            target: triplet.tryon.clone(),
            text_ids,
            mask: triplet.mask.clone(),
        },
        Task::ModelFreeTryon => TaskInstance {
            task,
            conditions: vec![triplet.garment.clone()],
            target: triplet.tryon.clone(),
            text_ids,
            mask: triplet.mask.clone(),
        },
        Task::Tryoff => TaskInstance {
            task,
            conditions: vec![triplet.tryon.clone()],
            target: triplet.garment.clone(),
            text_ids,
            mask: triplet.garment_mask.clone(),
        },
    }
}

/// Triplet seed of dataset item `index`.
pub fn item_seed(dataset_seed: u64, index: usize) -> u64 {
    child_id(dataset_seed, index as u64)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub image_size: usize,
    pub items: Vec<Triplet>,
}

impl Dataset {
    pub fn generate(seed: u64, size: usize, image_size: usize) -> Result<Self> {
        Self::generate_range(seed, 0..size, image_size)
    }

    /// Items `range` of the dataset keyed by `seed`; disjoint ranges give
    /// disjoint triplet seeds.
    pub fn generate_range(seed: u64, range: std::ops::Range<usize>, image_size: usize) -> Result<Self> {
        let items = range
            .map(|i| gen_triplet(item_seed(seed, i), image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            image_size,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Writes ODT1 tensors plus `manifest.json`; PPM/PGM copies if `images`.
    pub fn save(&self, dir: &Path, images: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, t) in self.items.iter().enumerate() {
            let stem = format!("{i:05}");
            odt::save(dir.join(format!("{stem}_garment.odt")), &t.garment)?;
            odt::save(dir.join(format!("{stem}_model.odt")), &t.model_img)?;
            odt::save(dir.join(format!("{stem}_tryon.odt")), &t.tryon)?;
            odt::save(dir.join(format!("{stem}_mask.odt")), &t.mask.to_tensor::<f32>())?;
            odt::save(
                dir.join(format!("{stem}_garment_mask.odt")),
                &t.garment_mask.to_tensor::<f32>(),
            )?;
            if images {
                imageio::write_ppm(dir.join(format!("{stem}_garment.ppm")), &t.garment)?;
                imageio::write_ppm(dir.join(format!("{stem}_model.ppm")), &t.model_img)?;
                imageio::write_ppm(dir.join(format!("{stem}_tryon.ppm")), &t.tryon)?;
                imageio::write_pgm(dir.join(format!("{stem}_mask.pgm")), &t.mask.bits, t.mask.width)?;
            }
            entries.push(serde_json::json!({
                "index": i,
                "seed": t.seed,
                "attrs": t.attrs,
                "pattern_size": t.pattern_size,
                "tryon_placement": t.tryon_placement,
                "garment_placement": t.garment_placement,
            }));
        }
        let manifest = serde_json::json!({
            "seed": self.seed,
            "size": self.items.len(),
            "image_size": self.image_size,
            "items": entries,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Rebuilds the dataset from a saved manifest by regenerating every
    /// triplet from its seed and checking it against the stored tensors.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let field = |k: &str| {
            manifest[k]
                .as_u64()
                .ok_or_else(|| invalid(format!("manifest field {k} missing")))
        };
        let (seed, size, image_size) = (field("seed")?, field("size")? as usize, field("image_size")? as usize);
        let ds = Self::generate(seed, size, image_size)?;
        for (i, t) in ds.items.iter().enumerate() {
            let stored: Image = odt::load(dir.join(format!("{i:05}_tryon.odt")))?;
            if stored.max_abs_diff(&t.tryon) > 1e-6 {
                return Err(invalid(format!("dataset item {i} does not match its seed")));
            }
        }
        Ok(ds)
    }
}

/// One optimization batch: `(triplet index, task)` pairs with a shared
/// reference count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub stage: u8,
    pub items: Vec<(usize, Task)>,
}

impl Batch {
    pub fn reference_count(&self) -> usize {
        self.items[0].1.reference_count()
    }
}

/// Infinite, deterministic batch schedule for one training stage.
///
/// Stage 1 draws only single-reference tasks. Stage 2 interleaves
/// single-reference and two-reference batches at `ratio` (single : double);
/// two-reference batches hold only model-based try-on.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub stage: u8,
    pub batch: usize,
    dataset_size: usize,
    seed: u64,
    ratio: (usize, usize),
    tasks: Vec<Task>,
    next: usize,
}

pub fn plan_batches(dataset_size: usize, stage: u8, batch: usize, seed: u64) -> Result<BatchPlan> {
    let tasks = match stage {
        1 => vec![Task::ModelFreeTryon, Task::Tryoff],
        2 => Task::ALL.to_vec(),
        s => return Err(invalid(format!("unknown stage {s}"))),
    };
    BatchPlan::new(dataset_size, stage, batch, seed, tasks, (1, 1))
}

impl BatchPlan {
    pub fn new(
        dataset_size: usize,
        stage: u8,
        batch: usize,
        seed: u64,
        tasks: Vec<Task>,
        ratio: (usize, usize),
    ) -> Result<Self> {
        if batch == 0 || dataset_size == 0 {
            return Err(invalid("batch size and dataset size must be at least 1"));
        }
        if tasks.is_empty() {
            return Err(invalid("a stage needs at least one task"));
        }
        if stage == 1 && tasks.contains(&Task::ModelBasedTryon) {
            return Err(invalid("stage 1 trains single-reference tasks only"));
        }
        if ratio.0 + ratio.1 == 0 {
            return Err(invalid("arity ratio must be positive"));
        }
        Ok(Self {
            stage,
            batch,
            dataset_size,
            seed,
            ratio,
            tasks,
            next: 0,
        })
    }

    /// Start the schedule at batch `index` (for resuming).
    pub fn skip_to(&mut self, index: usize) {
        self.next = index;
    }

    fn arity_of(&self, j: usize) -> usize {
        let singles: Vec<Task> = self.tasks.iter().copied().filter(|t| t.reference_count() == 1).collect();
        let has_double = self.tasks.contains(&Task::ModelBasedTryon);
        match (singles.is_empty(), has_double) {
            (true, _) => 2,
            (false, false) => 1,
            (false, true) => {
                let (a, b) = (self.ratio.0 as u128, self.ratio.1 as u128);
                let j = j as u128;
                if ((j + 1) * b) / (a + b) > (j * b) / (a + b) {
                    2
                } else {
                    1
                }
            }
        }
    }

    pub fn batch_at(&self, j: usize) -> Batch {
        let mut rng = stream(self.seed, child_id(0x6261_7463 + self.stage as u64, j as u64));
        let singles: Vec<Task> = self.tasks.iter().copied().filter(|t| t.reference_count() == 1).collect();
        let arity = self.arity_of(j);
        let items = (0..self.batch)
            .map(|_| {
                let idx = rng.random_range(0..self.dataset_size);
                let task = if arity == 2 {
                    Task::ModelBasedTryon
                } else {
                    singles[rng.random_range(0..singles.len())]
                };
                (idx, task)
            })
            .collect();
        Batch {
            stage: self.stage,
            items,
        }
    }
}

impl Iterator for BatchPlan {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}
