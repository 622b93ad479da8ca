//! Deterministic synthetic corpus: moving colored shapes on a gray
//! background, one referent per scene, templated referring expressions with
//! ground-truth entity spans, and tight per-frame boxes scanned from the
//! rasterized referent.

pub mod file;

pub use file::{read_dataset, write_dataset, Dataset, DatasetManifest, SampleRecord};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Whether the referent is present on every frame (box-only task) or only on
/// a sub-interval (box + temporal-span task).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Trimmed,
    Untrimmed,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Trimmed => "trimmed",
            Mode::Untrimmed => "untrimmed",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "trimmed" => Ok(Mode::Trimmed),
            "untrimmed" => Ok(Mode::Untrimmed),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

/// Fixed vocabulary of the sentence templates, enumerated in the manifest.
pub const VOCAB: [&str; 14] = [
    "the", "a", "red", "green", "blue", "yellow", "square", "circle", "triangle", "moving",
    "left", "right", "up", "down",
];

pub fn word_id(word: &str) -> u32 {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .unwrap_or_else(|| panic!("word {word:?} not in vocabulary")) as u32
}

const BACKGROUND: f64 = 0.5;

/// One object in a scene: linear motion, present during an inclusive span.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Side length / diameter as a fraction of the frame side.
    pub size: f64,
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub span: (usize, usize),
}

impl SceneObject {
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        (self.x0 + self.vx * t as f64, self.y0 + self.vy * t as f64)
    }

    pub fn present_at(&self, t: usize) -> bool {
        t >= self.span.0 && t <= self.span.1
    }

    fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center_at(t);
        let half = self.size * 0.5;
        match self.shape {
            Shape::Square => (px - cx).abs() <= half && (py - cy).abs() <= half,
            Shape::Circle => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= half * half
            }
            Shape::Triangle => {
                // up-pointing isoceles triangle inscribed in the size box
                let (ax, ay) = (cx, cy - half);
                let (bx, by) = (cx - half, cy + half);
                let (qx, qy) = (cx + half, cy + half);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, qx, qy);
                let d3 = sign(qx, qy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Scene layout: objects in draw order, referent last so it is never
/// occluded. Distractors never share both shape and color with the
/// referent, which keeps the referring expression unambiguous.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Index into `objects`; always the last entry.
    pub referent: usize,
}

impl SceneSpec {
    pub fn referent_object(&self) -> &SceneObject {
        &self.objects[self.referent]
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub mode: Mode,
    pub frames: usize,
    pub side: usize,
    pub max_distractors: usize,
}

impl GenConfig {
    pub fn new(mode: Mode) -> Self {
        GenConfig {
            mode,
            frames: match mode {
                Mode::Trimmed => 8,
                Mode::Untrimmed => 16,
            },
            side: 48,
            max_distractors: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.side == 0 {
            return Err(Error::Config("frames and side must be positive".into()));
        }
        if self.mode == Mode::Untrimmed && self.frames < 4 {
            return Err(Error::Config(
                "untrimmed videos need at least 4 frames for a proper sub-span".into(),
            ));
        }
        Ok(())
    }
}

/// One generated video with its annotation.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: usize,
    pub side: usize,
    /// [frames, 3, side, side] row-major pixel data in [0, 1].
    pub pixels: Arc<Vec<f64>>,
    pub tokens: Vec<u32>,
    pub sentence: String,
    /// Tight referent box per frame; None outside the temporal span.
    pub gt_boxes: Vec<Option<BoundingBox>>,
    /// Inclusive frame span of the referent.
    pub temporal_span: (usize, usize),
    /// Inclusive word-index span of the "<color> <shape>" phrase.
    pub entity_span: (usize, usize),
}

impl VideoSample {
    pub fn frames_tensor(&self) -> Tensor {
        Tensor::from_arc(
            vec![self.frames, 3, self.side, self.side],
            Arc::clone(&self.pixels),
        )
    }

    pub fn frame_tensor(&self, t: usize) -> Tensor {
        let n = 3 * self.side * self.side;
        Tensor::from_vec(vec![3, self.side, self.side], self.pixels[t * n..(t + 1) * n].to_vec())
    }

    /// Frames carrying a ground-truth box.
    pub fn annotated_frames(&self) -> Vec<usize> {
        (self.temporal_span.0..=self.temporal_span.1).collect()
    }
}

/// Rasterize the objects present at frame `t` onto a mid-gray background.
/// Pixels are colored by center-point coverage, no anti-aliasing, later
/// objects drawn on top.
pub fn render_frame(scene: &SceneSpec, t: usize, side: usize) -> Vec<f64> {
    let mut out = vec![BACKGROUND; 3 * side * side];
    for obj in &scene.objects {
        if obj.present_at(t) {
            paint(&mut out, obj, t, side);
        }
    }
    out
}

fn paint(buf: &mut [f64], obj: &SceneObject, t: usize, side: usize) {
    let rgb = obj.color.rgb();
    let (cx, cy) = obj.center_at(t);
    let half = obj.size * 0.5;
    let lo_x = (((cx - half) * side as f64).floor().max(0.0)) as usize;
    let hi_x = (((cx + half) * side as f64).ceil() as usize).min(side);
    let lo_y = (((cy - half) * side as f64).floor().max(0.0)) as usize;
    let hi_y = (((cy + half) * side as f64).ceil() as usize).min(side);
    for y in lo_y..hi_y {
        let py = (y as f64 + 0.5) / side as f64;
        for x in lo_x..hi_x {
            let px = (x as f64 + 0.5) / side as f64;
            if obj.covers(t, px, py) {
                for (c, v) in rgb.iter().enumerate() {
                    buf[c * side * side + y * side + x] = *v;
                }
            }
        }
    }
}

/// Covered-pixel mask of a single object at frame `t`.
pub fn object_mask(obj: &SceneObject, t: usize, side: usize) -> Vec<bool> {
    let mut mask = vec![false; side * side];
    for y in 0..side {
        let py = (y as f64 + 0.5) / side as f64;
        for x in 0..side {
            let px = (x as f64 + 0.5) / side as f64;
            mask[y * side + x] = obj.covers(t, px, py);
        }
    }
    mask
}

/// Tight bound of the drawn shape in normalized coordinates, or None when no
/// pixel is covered.
fn tight_box(obj: &SceneObject, t: usize, side: usize) -> Option<BoundingBox> {
    let mask = object_mask(obj, t, side);
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (usize::MAX, 0, usize::MAX, 0);
    let mut any = false;
    for y in 0..side {
        for x in 0..side {
            if mask[y * side + x] {
                any = true;
                min_x = min_x.min(x);
                max_x = max_x.max(x);
                min_y = min_y.min(y);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    let s = side as f64;
    BoundingBox::from_xyxy(
        min_x as f64 / s,
        min_y as f64 / s,
        (max_x + 1) as f64 / s,
        (max_y + 1) as f64 / s,
    )
    .ok()
}

const SIZE_RANGE: (f64, f64) = (0.18, 0.40);
const CENTER_RANGE: (f64, f64) = (0.2, 0.8);
const SPEED_RANGE: (f64, f64) = (0.006, 0.022);

fn sample_object(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    color: Color,
    span: (usize, usize),
    frames: usize,
) -> SceneObject {
    let size = rng.gen_range(SIZE_RANGE.0..SIZE_RANGE.1);
    // dominant-axis velocity so the direction word is well defined
    let speed = rng.gen_range(SPEED_RANGE.0..SPEED_RANGE.1);
    let cross = rng.gen_range(0.0..speed * 0.4);
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (vx, vy) = if rng.gen_bool(0.5) {
        (speed * sign(rng), cross * sign(rng))
    } else {
        (cross * sign(rng), speed * sign(rng))
    };
    // keep the center inside CENTER_RANGE over the whole video so the object
    // stays well over half inside the frame during any span
    let last = frames as f64 - 1.0;
    let fx = (CENTER_RANGE.0 - (vx * last).min(0.0), CENTER_RANGE.1 - (vx * last).max(0.0));
    let fy = (CENTER_RANGE.0 - (vy * last).min(0.0), CENTER_RANGE.1 - (vy * last).max(0.0));
    SceneObject {
        shape,
        color,
        size,
        x0: rng.gen_range(fx.0..fx.1),
        y0: rng.gen_range(fy.0..fy.1),
        vx,
        vy,
        span,
    }
}

fn direction_word(obj: &SceneObject) -> &'static str {
    if obj.vx.abs() >= obj.vy.abs() {
        if obj.vx >= 0.0 {
            "right"
        } else {
            "left"
        }
    } else if obj.vy >= 0.0 {
        "down"
    } else {
        "up"
    }
}

/// Deterministic scene + annotation from a single seed.
pub fn generate_sample(seed: u64, cfg: &GenConfig) -> VideoSample {
    cfg.validate().expect("invalid generator config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.frames;
    let full = (0, t - 1);

    let ref_span = match cfg.mode {
        Mode::Trimmed => full,
        Mode::Untrimmed => {
            // sub-span of length >= 3 with at least one frame outside
            let len = rng.gen_range(3..=t - 1);
            let start = rng.gen_range(0..=t - len);
            (start, start + len - 1)
        }
    };

    let ref_shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
    let ref_color = Color::ALL[rng.gen_range(0..Color::ALL.len())];

    let mut objects = Vec::new();
    let n_distractors = rng.gen_range(1..=cfg.max_distractors.max(1));
    for _ in 0..n_distractors {
        let (shape, color) = loop {
            let s = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            let c = Color::ALL[rng.gen_range(0..Color::ALL.len())];
            if s != ref_shape || c != ref_color {
                break (s, c);
            }
        };
        objects.push(sample_object(&mut rng, shape, color, full, t));
    }
    let referent = sample_object(&mut rng, ref_shape, ref_color, ref_span, t);
    objects.push(referent);
    let scene = SceneSpec { referent: objects.len() - 1, objects };

    let (tokens, sentence, entity_span) = build_sentence(&mut rng, &scene);

    let mut pixels = Vec::with_capacity(t * 3 * cfg.side * cfg.side);
    let mut gt_boxes = Vec::with_capacity(t);
    for frame in 0..t {
        pixels.extend(render_frame(&scene, frame, cfg.side));
        if frame >= ref_span.0 && frame <= ref_span.1 {
            let b = tight_box(scene.referent_object(), frame, cfg.side)
                .expect("referent rendered no pixels inside its span");
            gt_boxes.push(Some(b));
        } else {
            gt_boxes.push(None);
        }
    }

    VideoSample {
        frames: t,
        side: cfg.side,
        pixels: Arc::new(pixels),
        tokens,
        sentence,
        gt_boxes,
        temporal_span: ref_span,
        entity_span,
    }
}

fn build_sentence(
    rng: &mut ChaCha8Rng,
    scene: &SceneSpec,
) -> (Vec<u32>, String, (usize, usize)) {
    let obj = scene.referent_object();
    let color = obj.color.word();
    let shape = obj.shape.word();
    let dir = direction_word(obj);
    let words: Vec<&str> = match rng.gen_range(0..3) {
        0 => vec!["the", color, shape, "moving", dir],
        1 => vec!["a", color, shape, "moving", dir],
        _ => vec!["the", color, shape],
    };
    let tokens = words.iter().map(|w| word_id(w)).collect();
    (tokens, words.join(" "), (1, 2))
}

/// Derived per-sample seed: dataset seed selects the key, sample index the
/// stream, so samples are independent and pure in (seed, index).
pub fn sample_seed_rng(dataset_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index);
    rng.gen()
}

/// Generate a whole dataset deterministically.
pub fn generate_dataset(dataset_seed: u64, count: usize, cfg: &GenConfig) -> Vec<VideoSample> {
    (0..count)
        .map(|i| generate_sample(sample_seed_rng(dataset_seed, i as u64), cfg))
        .collect()
}
