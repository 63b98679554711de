//! Deterministic synthetic scenes: colored shapes at distinct depths on a
//! dark background, with ground-truth instance masks, a depth map, a
//! referring query/answer pair, and an optional relative-depth point
//! task.
//!
//! Scene appearance encodes depth: each object's color is dimmed in
//! proportion to its z, so nearer objects render brighter. Depth values
//! are snapped to the 16-bit grid `k/65535` at generation time, which
//! makes the on-disk PGM encoding lossless and keeps the depth-map
//! round-trip exact.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    BadConfig { reason: &'static str },
    UnsatisfiableConfig,
    ResampleScene,
    BadInstanceDepth { z: f64 },
}

impl core::fmt::Display for SceneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SceneError::BadConfig { reason } => write!(f, "bad scene config: {reason}"),
            SceneError::UnsatisfiableConfig => write!(f, "unsatisfiable config"),
            SceneError::ResampleScene => write!(f, "resample scene"),
            SceneError::BadInstanceDepth { z } => {
                write!(f, "instance depth {z} outside (0,1)")
            }
        }
    }
}

// ─── shapes and colors ───

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Disc,
    Triangle,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Rectangle => "rectangle",
            Shape::Disc => "disc",
            Shape::Triangle => "triangle",
        }
    }

    pub const ALL: [Shape; 3] = [Shape::Rectangle, Shape::Disc, Shape::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Color {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

pub const COLORS: [Color; 8] = [
    Color { name: "red", rgb: [220, 50, 50] },
    Color { name: "green", rgb: [60, 200, 70] },
    Color { name: "blue", rgb: [60, 90, 220] },
    Color { name: "yellow", rgb: [230, 220, 60] },
    Color { name: "magenta", rgb: [210, 60, 210] },
    Color { name: "cyan", rgb: [70, 210, 210] },
    Color { name: "orange", rgb: [235, 140, 40] },
    Color { name: "white", rgb: [235, 235, 235] },
];

const BACKGROUND_RGB: [u8; 3] = [28, 28, 28];

/// Brightness factor applied to an object's color: nearer is brighter.
/// This is the only channel through which depth is visible in the image.
pub fn depth_shade(z: f64) -> f64 {
    1.0 - 0.55 * z
}

// ─── domain types ───

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub object_count_range: (usize, usize),
    pub shape_set: Vec<Shape>,
    pub color_set: Vec<Color>,
    /// `(z_near, z_far)`, a strict subset of (0, 1).
    pub depth_range: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 40,
            width: 40,
            object_count_range: (3, 4),
            shape_set: Shape::ALL.to_vec(),
            color_set: COLORS.to_vec(),
            depth_range: (0.15, 0.85),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let (lo, hi) = self.object_count_range;
        if lo < 1 || lo > hi {
            return Err(SceneError::BadConfig {
                reason: "object_count_range must satisfy 1 <= min <= max",
            });
        }
        let (zn, zf) = self.depth_range;
        if !(0.0 < zn && zn < zf && zf < 1.0) {
            return Err(SceneError::BadConfig {
                reason: "depth_range must satisfy 0 < z_near < z_far < 1",
            });
        }
        if self.shape_set.is_empty() || self.color_set.is_empty() {
            return Err(SceneError::BadConfig {
                reason: "shape_set and color_set must be non-empty",
            });
        }
        if self.shape_set.len() * self.color_set.len() < hi {
            return Err(SceneError::BadConfig {
                reason: "not enough distinct (shape, color) identities for max objects",
            });
        }
        // largest object footprint is 14x14 plus a 1-pixel margin
        if self.height * self.width < 225 * hi || self.height < 20 || self.width < 20 {
            return Err(SceneError::BadConfig {
                reason: "image too small for the object count",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Row-major H*W boolean mask.
    pub mask: Vec<bool>,
    pub shape: Shape,
    pub color: Color,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Multiple-choice relative-depth task: P labeled points, answer is the
/// label of the point nearest the camera. `label(i)` names point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepthTask {
    /// `(row, col)` pixel coordinates, snapped to depth-patch centers so
    /// the prompt can verbalize them at patch resolution.
    pub points: Vec<(usize, usize)>,
    pub answer: char,
}

pub fn point_label(index: usize) -> char {
    (b'A' + index as u8) as char
}

impl RelativeDepthTask {
    pub fn p(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Row-major H*W*3 RGB bytes.
    pub image: Vec<u8>,
    pub depth: DepthMap,
    pub instances: Vec<Instance>,
    pub query: String,
    pub target_instance: usize,
    pub answer: String,
    pub point_task: Option<RelativeDepthTask>,
}

// ─── vocabulary surface ───

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];
const LABEL_WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];

/// The closed word list every query and answer draws from, in fixed
/// order. `build_vocabulary` over this list defines the text id space.
pub fn answer_grammar_words() -> Vec<&'static str> {
    let mut words = vec![
        "question", "answer", "describe", "the", "which", "point", "object", "is",
        "nearest", "farthest", "middle",
    ];
    for c in COLORS.iter() {
        words.push(c.name);
    }
    for s in Shape::ALL.iter() {
        words.push(s.word());
    }
    words.extend_from_slice(&LABEL_WORDS);
    words.extend_from_slice(&DIGIT_WORDS);
    words
}

pub fn digit_word(d: usize) -> &'static str {
    DIGIT_WORDS[d]
}

pub fn label_word(label: char) -> &'static str {
    LABEL_WORDS[(label.to_ascii_lowercase() as u8 - b'a') as usize]
}

/// Render a point task as query words: `which point is nearest` followed
/// by `label row-digit col-digit` per point, coordinates at patch
/// resolution (pixel / stride).
pub fn point_query_words(task: &RelativeDepthTask, stride: usize) -> Vec<String> {
    let mut words: Vec<String> = vec![
        "which".into(),
        "point".into(),
        "is".into(),
        "nearest".into(),
    ];
    for (i, &(r, c)) in task.points.iter().enumerate() {
        words.push(label_word(point_label(i)).into());
        words.push(digit_word(r / stride).into());
        words.push(digit_word(c / stride).into());
    }
    words
}

/// Answer sentence for a point task.
pub fn point_answer_words(answer: char) -> Vec<String> {
    vec![
        "the".into(),
        "point".into(),
        label_word(answer).into(),
        "is".into(),
        "the".into(),
        "nearest".into(),
    ]
}

// ─── generation ───

/// Snap a depth value to the 16-bit PGM grid so disk round-trips are
/// exact.
fn snap16(z: f64) -> f64 {
    fmath::round(z * 65535.0) / 65535.0
}

struct PlacedShape {
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
}

fn boxes_clash(a: &PlacedShape, b: &PlacedShape) -> bool {
    // expand by one pixel so objects never touch
    let ar1 = a.r0 + a.h + 1;
    let ac1 = a.c0 + a.w + 1;
    let br1 = b.r0 + b.h + 1;
    let bc1 = b.c0 + b.w + 1;
    !(ar1 <= b.r0 || br1 <= a.r0 || ac1 <= b.c0 || bc1 <= a.c0)
}

fn rasterize(shape: Shape, place: &PlacedShape, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    match shape {
        Shape::Rectangle => {
            for r in place.r0..place.r0 + place.h {
                for c in place.c0..place.c0 + place.w {
                    mask[r * width + c] = true;
                }
            }
        }
        Shape::Disc => {
            let rad = (place.h - 1) as f64 / 2.0;
            let cr = place.r0 as f64 + rad;
            let cc = place.c0 as f64 + rad;
            for r in place.r0..place.r0 + place.h {
                for c in place.c0..place.c0 + place.w {
                    let dr = r as f64 - cr;
                    let dc = c as f64 - cc;
                    if dr * dr + dc * dc <= rad * rad + 0.25 {
                        mask[r * width + c] = true;
                    }
                }
            }
        }
        Shape::Triangle => {
            // isosceles, apex on the top row, full base on the bottom row
            let cc = place.c0 as f64 + (place.w - 1) as f64 / 2.0;
            for i in 0..place.h {
                let frac = if place.h > 1 {
                    i as f64 / (place.h - 1) as f64
                } else {
                    1.0
                };
                let hw = frac * (place.w - 1) as f64 / 2.0;
                let lo = fmath::round(cc - hw) as usize;
                let hi = fmath::round(cc + hw) as usize;
                for c in lo..=hi {
                    mask[(place.r0 + i) * width + c] = true;
                }
            }
        }
    }
    mask
}

/// Per-pixel minimum z over covering instances, background exactly 1.0.
pub fn render_depth(
    instances: &[Instance],
    image_size: (usize, usize),
) -> Result<DepthMap, SceneError> {
    let (height, width) = image_size;
    for inst in instances {
        if !(inst.z > 0.0 && inst.z < 1.0) {
            return Err(SceneError::BadInstanceDepth { z: inst.z });
        }
    }
    let mut values = vec![1.0f64; height * width];
    for inst in instances {
        for (i, &on) in inst.mask.iter().enumerate() {
            if on && inst.z < values[i] {
                values[i] = inst.z;
            }
        }
    }
    Ok(DepthMap {
        height,
        width,
        values,
    })
}

fn render_image(instances: &[Instance], height: usize, width: usize) -> Vec<u8> {
    let mut img = vec![0u8; height * width * 3];
    for px in 0..height * width {
        img[px * 3..px * 3 + 3].copy_from_slice(&BACKGROUND_RGB);
    }
    // draw far-to-near so the nearest instance wins overlapping pixels,
    // consistent with the depth map's min rule
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&i, &j| instances[j].z.partial_cmp(&instances[i].z).unwrap());
    for &idx in &order {
        let inst = &instances[idx];
        let shade = depth_shade(inst.z);
        let rgb = [
            fmath::round(inst.color.rgb[0] as f64 * shade) as u8,
            fmath::round(inst.color.rgb[1] as f64 * shade) as u8,
            fmath::round(inst.color.rgb[2] as f64 * shade) as u8,
        ];
        for (px, &on) in inst.mask.iter().enumerate() {
            if on {
                img[px * 3..px * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    img
}

/// Depth-sorted rank word for an instance among all instances.
fn status_word(instances: &[Instance], index: usize) -> &'static str {
    let z = instances[index].z;
    let nearer = instances.iter().filter(|i| i.z < z).count();
    let farther = instances.iter().filter(|i| i.z > z).count();
    if nearer == 0 {
        "nearest"
    } else if farther == 0 {
        "farthest"
    } else {
        "middle"
    }
}

/// Deterministic scene synthesis: a pure function of `(config.seed,
/// index)`. Placement draws that wedge themselves into an unplaceable
/// corner are retried on fresh named streams, so every index yields a
/// scene for any satisfiable config.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<SceneSample, SceneError> {
    config.validate()?;
    for attempt in 0..16 {
        let name = if attempt == 0 {
            format!("scene-{index}")
        } else {
            format!("scene-{index}-r{attempt}")
        };
        match generate_scene_attempt(config, index, &name) {
            Err(SceneError::UnsatisfiableConfig) => continue,
            done => return done,
        }
    }
    Err(SceneError::UnsatisfiableConfig)
}

fn generate_scene_attempt(
    config: &SceneConfig,
    index: u64,
    stream: &str,
) -> Result<SceneSample, SceneError> {
    let root = Rng::from_seed(config.seed);
    let mut rng = root.child(stream);

    let (lo, hi) = config.object_count_range;
    let count = rng.range_inclusive(lo, hi);

    // distinct (shape, color) identities
    let combos = config.shape_set.len() * config.color_set.len();
    let identity_picks = rng.sample_indices(combos, count);

    // distinct depths with a 0.06 pairwise gap, snapped to the 16-bit grid
    let (zn, zf) = config.depth_range;
    let mut zs: Vec<f64> = Vec::new();
    let mut attempts = 0;
    while zs.len() < count {
        if attempts >= 100 {
            return Err(SceneError::UnsatisfiableConfig);
        }
        attempts += 1;
        let cand = rng.uniform(zn, zf);
        if zs.iter().all(|&z| fmath::abs(z - cand) >= 0.06) {
            zs.push(snap16(cand));
        }
    }

    // placement with disjoint bounding boxes
    let mut placed: Vec<PlacedShape> = Vec::new();
    let mut instances: Vec<Instance> = Vec::new();
    for (i, &pick) in identity_picks.iter().enumerate() {
        let shape = config.shape_set[pick / config.color_set.len()];
        let color = config.color_set[pick % config.color_set.len()];
        let mut attempt = 0;
        loop {
            if attempt >= 100 {
                return Err(SceneError::UnsatisfiableConfig);
            }
            attempt += 1;
            // even sizes and an even placement grid keep shape boundaries
            // on a small set of phases relative to the 4x4 depth patches,
            // which the codebook must cover
            let (h, w) = match shape {
                Shape::Rectangle => {
                    (2 * rng.range_inclusive(4, 6), 2 * rng.range_inclusive(4, 6))
                }
                Shape::Disc => {
                    let d = 2 * rng.range_inclusive(4, 6) + 1;
                    (d, d)
                }
                Shape::Triangle => {
                    (2 * rng.range_inclusive(4, 6), 2 * rng.range_inclusive(4, 6) + 1)
                }
            };
            if config.height < h + 4 || config.width < w + 4 {
                continue;
            }
            let cand = PlacedShape {
                r0: 2 * rng.range_inclusive(1, (config.height - h - 2) / 2),
                c0: 2 * rng.range_inclusive(1, (config.width - w - 2) / 2),
                h,
                w,
            };
            if placed.iter().all(|p| !boxes_clash(p, &cand)) {
                let mask = rasterize(shape, &cand, config.height, config.width);
                instances.push(Instance {
                    mask,
                    shape,
                    color,
                    z: zs[i],
                });
                placed.push(cand);
                break;
            }
        }
    }

    let depth = render_depth(&instances, (config.height, config.width))?;
    let image = render_image(&instances, config.height, config.width);

    // referring query: attribute form or depth-extremal form
    let (target_instance, query) = if rng.next_f64() < 0.5 {
        let t = rng.below(count);
        let inst = &instances[t];
        (
            t,
            format!("describe the {} {}", inst.color.name, inst.shape.word()),
        )
    } else {
        let nearest = rng.next_f64() < 0.5;
        let t = extremal_instance(&instances, nearest);
        let word = if nearest { "nearest" } else { "farthest" };
        (t, format!("describe the {word} object"))
    };
    let target = &instances[target_instance];
    let answer = format!(
        "the {} {} is the {}",
        target.color.name,
        target.shape.word(),
        status_word(&instances, target_instance)
    );

    let mut sample = SceneSample {
        image,
        depth,
        instances,
        query,
        target_instance,
        answer,
        point_task: None,
    };

    // relative-depth task; P cycles 3, 4, 5 by index, capped by the
    // number of distinct-depth sources (instances plus background)
    let p_want = 3 + (index % 3) as usize;
    let p = p_want.min(count + 1);
    if p >= 3 {
        let mut prng = rng.child("points");
        sample.point_task = make_point_task(&sample, p, &mut prng).ok();
    }
    Ok(sample)
}

fn extremal_instance(instances: &[Instance], nearest: bool) -> usize {
    let mut best = 0;
    for i in 1..instances.len() {
        let better = if nearest {
            instances[i].z < instances[best].z
        } else {
            instances[i].z > instances[best].z
        };
        if better {
            best = i;
        }
    }
    best
}

/// Patch stride used to snap task points and verbalize their
/// coordinates; ties the point grid to the 10x10 depth-token grid.
pub fn point_stride(height: usize) -> usize {
    (height / 10).max(1)
}

/// Sample a P-point relative-depth task on distinct instances (plus at
/// most one background point), with pairwise depth separation >= 0.05.
/// Points are snapped to depth-patch centers.
pub fn make_point_task(
    scene: &SceneSample,
    p: usize,
    rng: &mut Rng,
) -> Result<RelativeDepthTask, SceneError> {
    if !(3..=5).contains(&p) {
        return Err(SceneError::BadConfig {
            reason: "P must be 3, 4, or 5",
        });
    }
    let height = scene.depth.height;
    let width = scene.depth.width;
    let stride = point_stride(height);
    let half = stride / 2;

    // candidate patch-center pixels per source; source i < count is
    // instance i, the last source is the background
    let count = scene.instances.len();
    let mut centers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); count + 1];
    for pr in 0..height / stride {
        for pc in 0..width / stride {
            let r = pr * stride + half;
            let c = pc * stride + half;
            let px = r * width + c;
            let mut owner = count;
            let mut best_z = f64::INFINITY;
            for (i, inst) in scene.instances.iter().enumerate() {
                if inst.mask[px] && inst.z < best_z {
                    best_z = inst.z;
                    owner = i;
                }
            }
            centers[owner].push((r, c));
        }
    }

    for _ in 0..100 {
        let sources = rng.sample_indices(count + 1, p.min(count + 1));
        if sources.len() < p {
            return Err(SceneError::ResampleScene);
        }
        let mut points = Vec::with_capacity(p);
        let mut ok = true;
        for &s in &sources {
            if centers[s].is_empty() {
                ok = false;
                break;
            }
            points.push(centers[s][rng.below(centers[s].len())]);
        }
        if !ok {
            continue;
        }
        // validate separation against the depth map itself
        let depths: Vec<f64> = points.iter().map(|&(r, c)| scene.depth.at(r, c)).collect();
        let mut sep = true;
        for i in 0..p {
            for j in i + 1..p {
                if fmath::abs(depths[i] - depths[j]) < 0.05 {
                    sep = false;
                }
            }
        }
        if !sep {
            continue;
        }
        let mut best = 0;
        for i in 1..p {
            if depths[i] < depths[best] {
                best = i;
            }
        }
        return Ok(RelativeDepthTask {
            points,
            answer: point_label(best),
        });
    }
    Err(SceneError::ResampleScene)
}
