//! Procedural paired-image dataset.
//!
//! Each task is one deterministic edit operator from a fixed registry. A
//! task owns `n` image pairs: a rendered base image (source) and the
//! operator applied to it (target). Training instances combine two
//! distinct pairs of the same task, one acting as the visual prompt and
//! one as the query; evaluation instances use per-task held-out pairs
//! (seen tasks) or the whole task (unseen tasks, which contribute no
//! training data at all). Generation is a pure function of the config:
//! per-task RNG streams are derived from (seed, task id), so serial and
//! parallel runs write byte-identical trees.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, tag, Rng};

// ---- edit operator registry ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpCategory {
    #[serde(rename = "LOW_LEVEL")]
    LowLevel,
    #[serde(rename = "STYLE")]
    Style,
    #[serde(rename = "EDITING")]
    Editing,
    #[serde(rename = "CUSTOM")]
    Custom,
}

impl OpCategory {
    /// All categories in fixed report order.
    pub fn all() -> [OpCategory; 4] {
        [OpCategory::LowLevel, OpCategory::Style, OpCategory::Editing, OpCategory::Custom]
    }
}

impl std::fmt::Display for OpCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OpCategory::LowLevel => "LOW_LEVEL",
            OpCategory::Style => "STYLE",
            OpCategory::Editing => "EDITING",
            OpCategory::Custom => "CUSTOM",
        };
        f.write_str(s)
    }
}

pub struct EditOp {
    pub name: &'static str,
    pub category: OpCategory,
    pub apply: fn(&Image) -> Image,
    pub left_description: &'static str,
    pub right_description: &'static str,
    pub instruction: &'static str,
}

const LEFT_DESC: &str = "a synthetic composition of colored rectangles and circles over a two-color gradient";

/// Fixed operator registry. Positions are stable: the instruction id of a
/// task is its operator's index here, and the text-conditioning embedding
/// table is sized to this list plus one trailing empty-instruction slot.
pub static REGISTRY: [EditOp; 12] = [
    EditOp {
        name: "invert",
        category: OpCategory::Style,
        apply: op_invert,
        left_description: LEFT_DESC,
        right_description: "the same composition with every color inverted",
        instruction: "invert all colors of the image",
    },
    EditOp {
        name: "grayscale",
        category: OpCategory::Style,
        apply: op_grayscale,
        left_description: LEFT_DESC,
        right_description: "the same composition converted to grayscale",
        instruction: "convert the image to grayscale",
    },
    EditOp {
        name: "brighten",
        category: OpCategory::LowLevel,
        apply: op_brighten,
        left_description: LEFT_DESC,
        right_description: "the same composition brightened by a constant amount",
        instruction: "brighten the image",
    },
    EditOp {
        name: "channel_permute",
        category: OpCategory::Custom,
        apply: op_channel_permute,
        left_description: LEFT_DESC,
        right_description: "the same composition with color channels rotated from RGB to GBR",
        instruction: "rotate the color channels from RGB to GBR",
    },
    EditOp {
        name: "box_blur3",
        category: OpCategory::LowLevel,
        apply: op_box_blur3,
        left_description: LEFT_DESC,
        right_description: "the same composition softened by a 3x3 box blur",
        instruction: "apply a 3x3 box blur to the image",
    },
    EditOp {
        name: "binarize",
        category: OpCategory::LowLevel,
        apply: op_binarize,
        left_description: LEFT_DESC,
        right_description: "a black-and-white thresholded version of the composition",
        instruction: "binarize the image at half luma",
    },
    EditOp {
        name: "sobel_edges",
        category: OpCategory::LowLevel,
        apply: op_sobel_edges,
        left_description: LEFT_DESC,
        right_description: "an edge-magnitude map of the composition",
        instruction: "replace the image with its edge map",
    },
    EditOp {
        name: "hflip",
        category: OpCategory::Editing,
        apply: op_hflip,
        left_description: LEFT_DESC,
        right_description: "the same composition mirrored left-to-right",
        instruction: "flip the image horizontally",
    },
    EditOp {
        name: "vflip",
        category: OpCategory::Editing,
        apply: op_vflip,
        left_description: LEFT_DESC,
        right_description: "the same composition mirrored top-to-bottom",
        instruction: "flip the image vertically",
    },
    EditOp {
        name: "identity",
        category: OpCategory::Editing,
        apply: op_identity,
        left_description: LEFT_DESC,
        right_description: "an unchanged copy of the composition",
        instruction: "keep the image unchanged",
    },
    EditOp {
        name: "posterize4",
        category: OpCategory::Style,
        apply: op_posterize4,
        left_description: LEFT_DESC,
        right_description: "the same composition quantized to four levels per channel",
        instruction: "posterize the image to four levels per channel",
    },
    EditOp {
        name: "red_tint",
        category: OpCategory::Style,
        apply: op_red_tint,
        left_description: LEFT_DESC,
        right_description: "the same composition washed with a red tint",
        instruction: "apply a red tint to the image",
    },
];

/// Embedding id used when the text instruction is dropped or absent.
pub fn empty_instruction_id() -> usize {
    REGISTRY.len()
}

/// Number of edit operations in the registry.
pub fn op_count() -> usize {
    REGISTRY.len()
}

pub fn op_by_name(name: &str) -> Result<(usize, &'static EditOp)> {
    REGISTRY
        .iter()
        .enumerate()
        .find(|(_, op)| op.name == name)
        .ok_or_else(|| Error::Config(format!("unknown edit op '{name}'")))
}

pub fn apply_edit_op(op: &EditOp, img: &Image) -> Image {
    let mut out = (op.apply)(img);
    out.snap();
    out
}

fn map_pixels(img: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, f(img.pixel(x, y)));
        }
    }
    out
}

fn op_invert(img: &Image) -> Image {
    map_pixels(img, |[r, g, b]| [1.0 - r, 1.0 - g, 1.0 - b])
}

fn op_grayscale(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let l = img.luma(x, y);
            out.set_pixel(x, y, [l, l, l]);
        }
    }
    out
}

fn op_brighten(img: &Image) -> Image {
    map_pixels(img, |[r, g, b]| [r + 0.25, g + 0.25, b + 0.25])
}

fn op_channel_permute(img: &Image) -> Image {
    map_pixels(img, |[r, g, b]| [g, b, r])
}

fn op_box_blur3(img: &Image) -> Image {
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    let p = img.pixel(sx, sy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(x as usize, y as usize, [acc[0] / 9.0, acc[1] / 9.0, acc[2] / 9.0]);
        }
    }
    out
}

fn op_binarize(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = if img.luma(x, y) >= 0.5 { 1.0 } else { 0.0 };
            out.set_pixel(x, y, [v, v, v]);
        }
    }
    out
}

fn op_sobel_edges(img: &Image) -> Image {
    let (w, h) = (img.width as isize, img.height as isize);
    let luma_at = |x: isize, y: isize| {
        img.luma(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize)
    };
    let norm = 4.0 * 2.0f32.sqrt();
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let gx = luma_at(x + 1, y - 1) + 2.0 * luma_at(x + 1, y) + luma_at(x + 1, y + 1)
                - luma_at(x - 1, y - 1)
                - 2.0 * luma_at(x - 1, y)
                - luma_at(x - 1, y + 1);
            let gy = luma_at(x - 1, y + 1) + 2.0 * luma_at(x, y + 1) + luma_at(x + 1, y + 1)
                - luma_at(x - 1, y - 1)
                - 2.0 * luma_at(x, y - 1)
                - luma_at(x + 1, y - 1);
            let m = (gx * gx + gy * gy).sqrt() / norm;
            out.set_pixel(x as usize, y as usize, [m, m, m]);
        }
    }
    out
}

fn op_hflip(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, img.pixel(img.width - 1 - x, y));
        }
    }
    out
}

fn op_vflip(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, img.pixel(x, img.height - 1 - y));
        }
    }
    out
}

fn op_identity(img: &Image) -> Image {
    img.clone()
}

fn op_posterize4(img: &Image) -> Image {
    map_pixels(img, |p| p.map(|v| (v * 3.0).round() / 3.0))
}

fn op_red_tint(img: &Image) -> Image {
    map_pixels(img, |[r, g, b]| [r + 0.25, g * 0.8, b * 0.8])
}

// ---- base image rendering ----

/// Composite 3..8 random rectangles and circles over a random two-color
/// linear gradient. Pure function of the seed.
pub fn render_base_image(seed: u64, height: usize, width: usize) -> Image {
    assert!(width >= 8 && height >= 8, "render_base_image: size >= 8");
    let mut rng = Rng::seed(seed);
    let color = |rng: &mut Rng| {
        [
            rng.uniform() as f32,
            rng.uniform() as f32,
            rng.uniform() as f32,
        ]
    };
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let theta = rng.range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (theta.cos() as f32, theta.sin() as f32);

    let mut img = Image::new(width, height);
    let diag = ((width * width + height * height) as f32).sqrt();
    for y in 0..height {
        for x in 0..width {
            let t = (((x as f32 * dx + y as f32 * dy) / diag) + 1.0) / 2.0;
            let t = t.clamp(0.0, 1.0);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            img.set_pixel(x, y, px);
        }
    }

    let n_shapes = 3 + rng.below(6); // 3..=8
    for _ in 0..n_shapes {
        let is_rect = rng.bernoulli(0.5);
        let col = color(&mut rng);
        if is_rect {
            let x0 = rng.below(width);
            let y0 = rng.below(height);
            let bw = 1 + rng.below(width / 2);
            let bh = 1 + rng.below(height / 2);
            for y in y0..(y0 + bh).min(height) {
                for x in x0..(x0 + bw).min(width) {
                    img.set_pixel(x, y, col);
                }
            }
        } else {
            let cx = rng.range(0.0, width as f64) as f32;
            let cy = rng.range(0.0, height as f64) as f32;
            let r = rng.range(width.min(height) as f64 / 8.0, width.min(height) as f64 / 3.0) as f32;
            for y in 0..height {
                for x in 0..width {
                    let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if fx * fx + fy * fy <= r * r {
                        img.set_pixel(x, y, col);
                    }
                }
            }
        }
    }
    img.snap();
    img
}

// ---- dataset construction ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PermutationMode {
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "CYCLIC")]
    Cyclic,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub resolution: usize,
    /// Task operators in task-id order.
    pub ops: Vec<String>,
    /// Subset of `ops` held out of training entirely.
    pub unseen: Vec<String>,
    pub pairs_per_task: usize,
    pub cap: usize,
    pub mode: PermutationMode,
    /// Per seen task, this many trailing pairs become evaluation queries.
    pub holdout: usize,
    pub seed: u64,
    /// Reuse identical base images across tasks (pair k of every task
    /// starts from the same source). Used by benchmarks that need the
    /// prompt pair to be the only task-identifying signal.
    pub shared_base_images: bool,
    /// Generate task contents in parallel (output is byte-identical to the
    /// serial path; per-task RNG streams make order irrelevant).
    pub parallel: bool,
}

impl DatasetConfig {
    pub fn toy_default(root: impl Into<PathBuf>, seed: u64) -> Self {
        DatasetConfig {
            root: root.into(),
            resolution: 16,
            ops: REGISTRY.iter().map(|op| op.name.to_string()).collect(),
            unseen: vec!["posterize4".into(), "red_tint".into()],
            pairs_per_task: 16,
            cap: 64,
            mode: PermutationMode::Full,
            holdout: 2,
            seed,
            shared_base_images: false,
            parallel: cfg!(feature = "parallel"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_task < 2 {
            return Err(Error::Config(format!(
                "pairs_per_task must be >= 2, got {}",
                self.pairs_per_task
            )));
        }
        if self.cap < 1 {
            return Err(Error::Config("cap must be >= 1".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config(format!(
                "resolution must be >= 8, got {}",
                self.resolution
            )));
        }
        if self.ops.is_empty() {
            return Err(Error::Config("ops list is empty".into()));
        }
        let mut names = HashSet::new();
        for name in &self.ops {
            op_by_name(name)?;
            if !names.insert(name) {
                return Err(Error::Config(format!("duplicate op '{name}'")));
            }
        }
        for name in &self.unseen {
            if !self.ops.contains(name) {
                return Err(Error::Config(format!(
                    "unseen op '{name}' is not in the task list"
                )));
            }
        }
        let seen_tasks = self.ops.len() - self.unseen.len();
        if seen_tasks > 0 {
            let train_pairs = self.pairs_per_task.saturating_sub(self.holdout);
            if train_pairs < 2 {
                return Err(Error::Config(format!(
                    "holdout {} leaves {} training pairs; need at least 2",
                    self.holdout, train_pairs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub left_image_description: String,
    pub right_image_description: String,
    pub edit_instruction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairRecord {
    pub index: usize,
    pub src: String,
    pub tar: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskRecord {
    pub task_id: usize,
    pub name: String,
    pub category: OpCategory,
    pub seen: bool,
    pub instruction_id: usize,
    pub instruction: String,
    pub annotation: Annotation,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceRecord {
    pub task_id: usize,
    pub instruction_id: usize,
    pub prompt_index: usize,
    pub query_index: usize,
    pub prompt_src: String,
    pub prompt_tar: String,
    pub query_src: String,
    pub query_tar: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub mode: PermutationMode,
    pub task_count: usize,
    pub train_instance_count: usize,
    pub eval_instance_count: usize,
    pub tasks: Vec<TaskRecord>,
    pub train_instances: Vec<InstanceRecord>,
    pub eval_instances: Vec<InstanceRecord>,
}

pub const MANIFEST_VERSION: u32 = 1;

fn pair_paths(task_id: usize, k: usize) -> (String, String) {
    (
        format!("task_{task_id}/pair_{k}_src.ppm"),
        format!("task_{task_id}/pair_{k}_tar.ppm"),
    )
}

struct TaskData {
    record: TaskRecord,
    images: Vec<(Image, Image)>,
}

fn generate_task(cfg: &DatasetConfig, task_id: usize) -> TaskData {
    let name = &cfg.ops[task_id];
    let (instruction_id, op) = op_by_name(name).expect("validated op");
    let mut images = Vec::with_capacity(cfg.pairs_per_task);
    let mut pairs = Vec::with_capacity(cfg.pairs_per_task);
    for k in 0..cfg.pairs_per_task {
        let base_seed = if cfg.shared_base_images {
            derive_seed(cfg.seed, &[tag::DATA_BASE, k as u64])
        } else {
            derive_seed(cfg.seed, &[tag::DATA_BASE, task_id as u64, k as u64])
        };
        let src = render_base_image(base_seed, cfg.resolution, cfg.resolution);
        let tar = apply_edit_op(op, &src);
        let (src_path, tar_path) = pair_paths(task_id, k);
        pairs.push(PairRecord {
            index: k,
            src: src_path,
            tar: tar_path,
        });
        images.push((src, tar));
    }
    let record = TaskRecord {
        task_id,
        name: name.clone(),
        category: op.category,
        seen: !cfg.unseen.contains(name),
        instruction_id,
        instruction: op.instruction.to_string(),
        annotation: Annotation {
            left_image_description: op.left_description.to_string(),
            right_image_description: op.right_description.to_string(),
            edit_instruction: op.instruction.to_string(),
        },
        pairs,
    };
    TaskData { record, images }
}

fn instance_record(task: &TaskRecord, prompt: usize, query: usize) -> InstanceRecord {
    let (prompt_src, prompt_tar) = pair_paths(task.task_id, prompt);
    let (query_src, query_tar) = pair_paths(task.task_id, query);
    InstanceRecord {
        task_id: task.task_id,
        instruction_id: task.instruction_id,
        prompt_index: prompt,
        query_index: query,
        prompt_src,
        prompt_tar,
        query_src,
        query_tar,
    }
}

/// All ordered (prompt, query) index pairs with distinct indices over
/// `0..n`, shuffled by `rng`, truncated to `cap`.
fn full_permutation(n: usize, cap: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut all = Vec::with_capacity(n * (n - 1));
    for p in 0..n {
        for q in 0..n {
            if p != q {
                all.push((p, q));
            }
        }
    }
    rng.shuffle(&mut all);
    all.truncate(cap);
    all
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;

    let task_ids: Vec<usize> = (0..cfg.ops.len()).collect();
    #[cfg(feature = "parallel")]
    let task_data: Vec<TaskData> = if cfg.parallel {
        use rayon::prelude::*;
        task_ids.par_iter().map(|&t| generate_task(cfg, t)).collect()
    } else {
        task_ids.iter().map(|&t| generate_task(cfg, t)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let task_data: Vec<TaskData> = task_ids.iter().map(|&t| generate_task(cfg, t)).collect();

    let mut tasks = Vec::new();
    let mut train_instances = Vec::new();
    let mut eval_instances = Vec::new();
    for data in &task_data {
        let task = &data.record;
        let n = cfg.pairs_per_task;
        if task.seen {
            let n_train = n - cfg.holdout;
            match cfg.mode {
                PermutationMode::Full => {
                    let mut rng =
                        Rng::seed(derive_seed(cfg.seed, &[tag::DATA_SHUFFLE, task.task_id as u64]));
                    for (p, q) in full_permutation(n_train, cfg.cap, &mut rng) {
                        train_instances.push(instance_record(task, p, q));
                    }
                }
                PermutationMode::Cyclic => {
                    for i in 0..n_train {
                        train_instances.push(instance_record(task, i, (i + 1) % n_train));
                    }
                }
            }
            for q in n_train..n {
                let prompt = (q - n_train) % n_train;
                eval_instances.push(instance_record(task, prompt, q));
            }
        } else {
            for i in 0..n {
                eval_instances.push(instance_record(task, i, (i + 1) % n));
            }
        }
        tasks.push(task.clone());
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        resolution: cfg.resolution,
        mode: cfg.mode,
        task_count: tasks.len(),
        train_instance_count: train_instances.len(),
        eval_instance_count: eval_instances.len(),
        tasks,
        train_instances,
        eval_instances,
    };

    for data in &task_data {
        let dir = cfg.root.join(format!("task_{}", data.record.task_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (pair, (src, tar)) in data.record.pairs.iter().zip(&data.images) {
            src.write_ppm(&cfg.root.join(&pair.src))?;
            tar.write_ppm(&cfg.root.join(&pair.tar))?;
        }
    }
    write_manifest(&manifest, &cfg.root)?;
    Ok(manifest)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

fn write_manifest(manifest: &Manifest, root: &Path) -> Result<()> {
    let path = manifest_path(root);
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Parse and validate a manifest: counts match lengths, every referenced
/// image exists and has the declared resolution, instance indices are
/// consistent.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = manifest_path(root);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.format_version
        )));
    }
    if manifest.task_count != manifest.tasks.len()
        || manifest.train_instance_count != manifest.train_instances.len()
        || manifest.eval_instance_count != manifest.eval_instances.len()
    {
        return Err(Error::Format(format!(
            "{}: declared counts do not match list lengths",
            path.display()
        )));
    }
    for task in &manifest.tasks {
        for pair in &task.pairs {
            for rel in [&pair.src, &pair.tar] {
                let img_path = root.join(rel);
                let img = Image::read_ppm(&img_path)?;
                if img.width != manifest.resolution || img.height != manifest.resolution {
                    return Err(Error::Format(format!(
                        "{}: resolution {}x{} does not match declared {}",
                        img_path.display(),
                        img.width,
                        img.height,
                        manifest.resolution
                    )));
                }
            }
        }
    }
    for inst in manifest.train_instances.iter().chain(&manifest.eval_instances) {
        let task = manifest
            .tasks
            .iter()
            .find(|t| t.task_id == inst.task_id)
            .ok_or_else(|| {
                Error::Format(format!("instance references missing task {}", inst.task_id))
            })?;
        if inst.prompt_index == inst.query_index {
            return Err(Error::Format(format!(
                "task {} instance uses the same pair {} for prompt and query",
                inst.task_id, inst.prompt_index
            )));
        }
        if inst.prompt_index >= task.pairs.len() || inst.query_index >= task.pairs.len() {
            return Err(Error::Format(format!(
                "task {} instance indexes beyond its {} pairs",
                inst.task_id,
                task.pairs.len()
            )));
        }
    }
    for inst in &manifest.train_instances {
        let task = manifest.tasks.iter().find(|t| t.task_id == inst.task_id);
        if let Some(t) = task {
            if !t.seen {
                return Err(Error::Format(format!(
                    "unseen task {} appears in the training split",
                    inst.task_id
                )));
            }
        }
    }
    Ok(manifest)
}

/// Whole dataset resident in memory; image pairs indexed `[task][pair]`.
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub pairs: Vec<Vec<(Image, Image)>>,
}

impl LoadedDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let mut pairs = Vec::with_capacity(manifest.tasks.len());
        for task in &manifest.tasks {
            let mut task_pairs = Vec::with_capacity(task.pairs.len());
            for pair in &task.pairs {
                let src = Image::read_ppm(&root.join(&pair.src))?;
                let tar = Image::read_ppm(&root.join(&pair.tar))?;
                task_pairs.push((src, tar));
            }
            pairs.push(task_pairs);
        }
        Ok(LoadedDataset { manifest, pairs })
    }

    fn task_slot(&self, task_id: usize) -> usize {
        self.manifest
            .tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .expect("validated task id")
    }

    pub fn prompt_pair(&self, inst: &InstanceRecord) -> (&Image, &Image) {
        let t = self.task_slot(inst.task_id);
        let (src, tar) = &self.pairs[t][inst.prompt_index];
        (src, tar)
    }

    pub fn query_pair(&self, inst: &InstanceRecord) -> (&Image, &Image) {
        let t = self.task_slot(inst.task_id);
        let (src, tar) = &self.pairs[t][inst.query_index];
        (src, tar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(root: &Path, seed: u64) -> DatasetConfig {
        DatasetConfig {
            root: root.to_path_buf(),
            resolution: 8,
            ops: vec!["invert".into(), "grayscale".into(), "hflip".into()],
            unseen: vec!["hflip".into()],
            pairs_per_task: 4,
            cap: 6,
            mode: PermutationMode::Full,
            holdout: 1,
            seed,
            shared_base_images: false,
            parallel: false,
        }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let a = render_base_image(7, 16, 16);
        let b = render_base_image(7, 16, 16);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn different_seeds_give_visibly_different_images() {
        for pair in 0..100u64 {
            let a = render_base_image(pair * 2, 16, 16);
            let b = render_base_image(pair * 2 + 1, 16, 16);
            let differing = (0..16 * 16)
                .filter(|&i| {
                    let (x, y) = (i % 16, i / 16);
                    a.pixel(x, y) != b.pixel(x, y)
                })
                .count();
            assert!(
                differing * 100 >= 16 * 16,
                "seeds {} and {} differ in only {differing} pixels",
                pair * 2,
                pair * 2 + 1
            );
        }
    }

    #[test]
    fn invert_is_an_involution_at_byte_level() {
        let img = render_base_image(3, 16, 16);
        let (_, invert) = op_by_name("invert").unwrap();
        let twice = apply_edit_op(invert, &apply_edit_op(invert, &img));
        assert_eq!(img.to_bytes(), twice.to_bytes());
    }

    #[test]
    fn grayscale_has_equal_channels() {
        let img = render_base_image(4, 16, 16);
        let (_, op) = op_by_name("grayscale").unwrap();
        let g = apply_edit_op(op, &img);
        for y in 0..16 {
            for x in 0..16 {
                let [r, gr, b] = g.pixel(x, y);
                assert_eq!(r, gr);
                assert_eq!(gr, b);
            }
        }
    }

    #[test]
    fn sobel_of_constant_image_is_zero() {
        let mut img = Image::new(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                img.set_pixel(x, y, [0.4, 0.4, 0.4]);
            }
        }
        img.snap();
        let (_, op) = op_by_name("sobel_edges").unwrap();
        let e = apply_edit_op(op, &img);
        assert!(e.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flips_are_involutions_and_posterize_levels_are_coarse() {
        let img = render_base_image(9, 16, 16);
        for name in ["hflip", "vflip"] {
            let (_, op) = op_by_name(name).unwrap();
            let twice = apply_edit_op(op, &apply_edit_op(op, &img));
            assert_eq!(img, twice, "{name} twice is not identity");
        }
        let (_, op) = op_by_name("posterize4").unwrap();
        let p = apply_edit_op(op, &img);
        for &v in &p.data {
            let level = v * 3.0;
            assert!((level - level.round()).abs() < 1e-3, "value {v} off-grid");
        }
    }

    #[test]
    fn unknown_op_is_a_config_error() {
        assert!(matches!(op_by_name("sharpen"), Err(Error::Config(_))));
    }

    #[test]
    fn full_permutation_counts_match_brute_force() {
        // min(n(n-1), cap) for every n, and never a duplicate.
        for n in 2..=20 {
            for cap in [1, 5, n * (n - 1), n * n] {
                let mut rng = Rng::seed(n as u64 * 100 + cap as u64);
                let got = full_permutation(n, cap, &mut rng);
                assert_eq!(got.len(), (n * (n - 1)).min(cap));
                let uniq: HashSet<_> = got.iter().collect();
                assert_eq!(uniq.len(), got.len(), "duplicates at n={n} cap={cap}");
                assert!(got.iter().all(|&(p, q)| p != q && p < n && q < n));
            }
        }
    }

    #[test]
    fn build_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), 11);
        let built = build_dataset(&cfg).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(built, loaded);

        // Internal consistency: every target equals the op applied to its
        // source, for pairs and for the instances referencing them.
        let ds = LoadedDataset::open(dir.path()).unwrap();
        for task in &ds.manifest.tasks {
            let (_, op) = op_by_name(&task.name).unwrap();
            for pair in &task.pairs {
                let src = Image::read_ppm(&dir.path().join(&pair.src)).unwrap();
                let tar = Image::read_ppm(&dir.path().join(&pair.tar)).unwrap();
                assert_eq!(apply_edit_op(op, &src), tar);
            }
        }

        // Unseen task contributes eval instances only, cyclically.
        let unseen_id = ds
            .manifest
            .tasks
            .iter()
            .find(|t| !t.seen)
            .unwrap()
            .task_id;
        assert!(ds.manifest.train_instances.iter().all(|i| i.task_id != unseen_id));
        let unseen_evals: Vec<_> = ds
            .manifest
            .eval_instances
            .iter()
            .filter(|i| i.task_id == unseen_id)
            .collect();
        assert_eq!(unseen_evals.len(), cfg.pairs_per_task);
        for inst in unseen_evals {
            assert_eq!(inst.query_index, (inst.prompt_index + 1) % cfg.pairs_per_task);
        }
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        build_dataset(&tiny_cfg(dir_a.path(), 5)).unwrap();
        build_dataset(&tiny_cfg(dir_b.path(), 5)).unwrap();
        let walk = |root: &Path| {
            let mut files: Vec<PathBuf> = vec![manifest_path(root)];
            for task in 0..3 {
                for k in 0..4 {
                    let (s, t) = pair_paths(task, k);
                    files.push(root.join(s));
                    files.push(root.join(t));
                }
            }
            files
        };
        for (fa, fb) in walk(dir_a.path()).iter().zip(walk(dir_b.path()).iter()) {
            assert_eq!(
                fs::read(fa).unwrap(),
                fs::read(fb).unwrap(),
                "{} differs",
                fa.display()
            );
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_generation_matches_serial() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_cfg(dir_a.path(), 23);
        cfg_a.parallel = false;
        let mut cfg_b = tiny_cfg(dir_b.path(), 23);
        cfg_b.parallel = true;
        build_dataset(&cfg_a).unwrap();
        build_dataset(&cfg_b).unwrap();
        assert_eq!(
            fs::read(manifest_path(dir_a.path())).unwrap(),
            fs::read(manifest_path(dir_b.path())).unwrap()
        );
        let (s, t) = pair_paths(2, 3);
        assert_eq!(
            fs::read(dir_a.path().join(&s)).unwrap(),
            fs::read(dir_b.path().join(&s)).unwrap()
        );
        assert_eq!(
            fs::read(dir_a.path().join(&t)).unwrap(),
            fs::read(dir_b.path().join(&t)).unwrap()
        );
    }

    #[test]
    fn shared_base_images_align_sources_across_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), 31);
        cfg.shared_base_images = true;
        build_dataset(&cfg).unwrap();
        let a = Image::read_ppm(&dir.path().join("task_0/pair_1_src.ppm")).unwrap();
        let b = Image::read_ppm(&dir.path().join("task_1/pair_1_src.ppm")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deleted_image_fails_load_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), 13);
        build_dataset(&cfg).unwrap();
        let victim = dir.path().join("task_1/pair_2_tar.ppm");
        fs::remove_file(&victim).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Io { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), 1);
        cfg.pairs_per_task = 1;
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));

        let mut cfg = tiny_cfg(dir.path(), 1);
        cfg.cap = 0;
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));

        let mut cfg = tiny_cfg(dir.path(), 1);
        cfg.unseen = vec!["posterize4".into()];
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));

        let mut cfg = tiny_cfg(dir.path(), 1);
        cfg.holdout = 3;
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cyclic_mode_prompt_query_relation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), 17);
        cfg.mode = PermutationMode::Cyclic;
        cfg.holdout = 0;
        cfg.pairs_per_task = 5;
        let m = build_dataset(&cfg).unwrap();
        let per_task: Vec<_> = m
            .train_instances
            .iter()
            .filter(|i| i.task_id == 0)
            .collect();
        assert_eq!(per_task.len(), 5);
        for inst in per_task {
            assert_eq!(inst.query_index, (inst.prompt_index + 1) % 5);
            // equivalently: prompt = (query + n - 1) mod n
            assert_eq!(inst.prompt_index, (inst.query_index + 4) % 5);
        }
    }

    #[test]
    fn toy_default_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            resolution: 8,
            pairs_per_task: 4,
            cap: 64,
            ..DatasetConfig::toy_default(dir.path(), 2)
        };
        let m = build_dataset(&cfg).unwrap();
        assert_eq!(m.tasks.iter().filter(|t| t.seen).count(), 10);
        assert_eq!(m.tasks.iter().filter(|t| !t.seen).count(), 2);
        // per seen task: min((4-2)(4-2-1), 64) = 2 train instances
        assert_eq!(m.train_instance_count, 10 * 2);
        // seen eval: 2 per task; unseen eval: 4 per task
        assert_eq!(m.eval_instance_count, 10 * 2 + 2 * 4);
    }
}
