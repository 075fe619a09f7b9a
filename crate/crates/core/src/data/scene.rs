//! Procedural shape scenes, their rendering, captions and toy questions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Side length of the layout grid objects are placed on.
pub const GRID: usize = 4;
pub const MAX_OBJECTS: usize = 3;
pub const SUPPORTED_RESOLUTIONS: [usize; 2] = [32, 64];
/// Background intensity, an exact multiple of 1/255 so PPM round trips are lossless.
pub const BACKGROUND: f64 = 128.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const ROW_WORDS: [&str; GRID] = ["top", "upper", "lower", "bottom"];
pub const COL_WORDS: [&str; GRID] = ["left", "midleft", "midright", "right"];
/// Answer classes of the toy question set, indexed by `answer_id`.
pub const ANSWERS: [&str; 10] = [
    "red", "green", "blue", "yellow", "square", "circle", "triangle", "one", "two", "three",
];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        SHAPES.into_iter().find(|s| s.word() == w)
    }

    fn answer_id(self) -> usize {
        4 + self as usize
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        COLORS.into_iter().find(|c| c.word() == w)
    }

    fn answer_id(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// (row, col) on the layout grid.
    pub cell: (usize, usize),
}

/// One to three objects on distinct cells, kept in row-major cell order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample(seed, &mut rng)
    }

    fn sample(seed: u64, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=MAX_OBJECTS);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        let (chosen, _) = cells.partial_shuffle(rng, n);
        let mut objects: Vec<SceneObject> = chosen
            .iter()
            .map(|&c| SceneObject {
                shape: SHAPES[rng.random_range(0..SHAPES.len())],
                color: COLORS[rng.random_range(0..COLORS.len())],
                cell: (c / GRID, c % GRID),
            })
            .collect();
        objects.sort_by_key(|o| o.cell);
        Scene { objects, seed }
    }

    /// Same objects, ignoring the seed.
    pub fn same_layout(&self, other: &Scene) -> bool {
        self.objects == other.objects
    }

    pub fn caption(&self) -> String {
        caption_of(&self.objects)
    }

    pub fn render(&self, resolution: usize) -> Result<Image> {
        check_resolution(resolution)?;
        let cell = resolution / GRID;
        let mut img = Image::filled(resolution, resolution, [BACKGROUND; 3]);
        for obj in &self.objects {
            let (r0, c0) = (obj.cell.0 * cell, obj.cell.1 * cell);
            for y in 0..cell {
                for x in 0..cell {
                    if covers(obj.shape, cell, y, x) {
                        img.set(r0 + y, c0 + x, obj.color.rgb());
                    }
                }
            }
        }
        Ok(img)
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(invalid(format!(
            "unsupported resolution {resolution}, expected one of {SUPPORTED_RESOLUTIONS:?}"
        )))
    }
}

/// Whether pixel (y, x) of a `cell`-sized cell is inside the shape. No anti-aliasing.
fn covers(shape: Shape, cell: usize, y: usize, x: usize) -> bool {
    let margin = cell / 8;
    let lo = margin;
    let hi = cell - margin;
    if y < lo || y >= hi || x < lo || x >= hi {
        return false;
    }
    // Work in doubled coordinates so pixel centers are integers.
    let (py, px) = (2 * y + 1, 2 * x + 1);
    let center = cell;
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let radius = hi - lo;
            let (dy, dx) = (py.abs_diff(center), px.abs_diff(center));
            dy * dy + dx * dx <= radius * radius
        }
        Shape::Triangle => {
            // apex at the top center, base along the bottom edge
            let depth = py - 2 * lo;
            2 * px.abs_diff(center) <= depth
        }
    }
}

/// Renders a caption from objects in the fixed template grammar:
/// `a <color> <shape> at <row> <col>` clauses joined by `and`.
pub fn caption_of(objects: &[SceneObject]) -> String {
    let clauses: Vec<String> = objects
        .iter()
        .map(|o| {
            format!(
                "a {} {} at {} {}",
                o.color.word(),
                o.shape.word(),
                ROW_WORDS[o.cell.0],
                COL_WORDS[o.cell.1]
            )
        })
        .collect();
    clauses.join(" and ")
}

/// Inverse of [`caption_of`].
pub fn parse_caption(caption: &str) -> Result<Vec<SceneObject>> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let mut objects = Vec::new();
    let mut i = 0;
    loop {
        let clause = words
            .get(i..i + 6)
            .ok_or_else(|| Error::CaptionParse(format!("truncated clause at word {i}")))?;
        let bad = |what: &str| Error::CaptionParse(format!("expected {what} in {clause:?}"));
        if clause[0] != "a" || clause[3] != "at" {
            return Err(bad("'a ... at'"));
        }
        let color = Color::from_word(clause[1]).ok_or_else(|| bad("a color"))?;
        let shape = Shape::from_word(clause[2]).ok_or_else(|| bad("a shape"))?;
        let row = ROW_WORDS.iter().position(|w| *w == clause[4]).ok_or_else(|| bad("a row"))?;
        let col = COL_WORDS.iter().position(|w| *w == clause[5]).ok_or_else(|| bad("a column"))?;
        objects.push(SceneObject {
            shape,
            color,
            cell: (row, col),
        });
        i += 6;
        match words.get(i) {
            None => break,
            Some(&"and") => i += 1,
            Some(w) => return Err(Error::CaptionParse(format!("unexpected word {w:?}"))),
        }
    }
    Ok(objects)
}

/// Every word the caption and question grammars can produce.
pub fn grammar_terminals() -> Vec<&'static str> {
    let mut words = vec!["a", "at", "and"];
    words.extend(COLORS.iter().map(|c| c.word()));
    words.extend(SHAPES.iter().map(|s| s.word()));
    words.extend(ROW_WORDS);
    words.extend(COL_WORDS);
    words.extend(QUESTION_WORDS);
    words.sort_unstable();
    words.dedup();
    words
}

const QUESTION_WORDS: [&str; 12] = [
    "what", "color", "is", "the", "object", "at", "shape", "how", "many", "objects", "are", "there",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Qa {
    pub question: String,
    pub answer_id: usize,
}

fn sample_qa(scene: &Scene, rng: &mut ChaCha8Rng) -> Qa {
    let target = scene.objects[rng.random_range(0..scene.objects.len())];
    let place = format!("{} {}", ROW_WORDS[target.cell.0], COL_WORDS[target.cell.1]);
    match rng.random_range(0..3) {
        0 => Qa {
            question: format!("what color is the object at {place}"),
            answer_id: target.color.answer_id(),
        },
        1 => Qa {
            question: format!("what shape is the object at {place}"),
            answer_id: target.shape.answer_id(),
        },
        _ => Qa {
            question: "how many objects are there".to_string(),
            answer_id: 6 + scene.objects.len(),
        },
    }
}

/// H x W x 3 image with channel values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self { height, width, pixels }
    }

    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![height, width, 3],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let at = (y * self.width + x) * 3;
        self.pixels[at..at + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let at = (y * self.width + x) * 3;
        [self.pixels[at], self.pixels[at + 1], self.pixels[at + 2]]
    }

    /// Non-overlapping `p x p` patches in row-major patch order, each flattened
    /// row-major over (y, x, channel). Shape `[(H/p)(W/p), p*p*3]`.
    pub fn patches(&self, p: usize) -> Result<Tensor> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(invalid(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let dim = p * p * 3;
        let mut data = Vec::with_capacity(gh * gw * dim);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let at = ((py * p + y) * self.width + px * p) * 3;
                    data.extend_from_slice(&self.pixels[at..at + p * 3]);
                }
            }
        }
        Tensor::new(vec![gh * gw, dim], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: u64,
    pub scene: Scene,
    pub image: Image,
    pub caption: String,
    pub qa: Option<Qa>,
}

/// Deterministically generates one image-caption pair from `seed`.
pub fn generate_pair(seed: u64, resolution: usize, with_qa: bool) -> Result<PairRecord> {
    check_resolution(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::sample(seed, &mut rng);
    let qa = with_qa.then(|| sample_qa(&scene, &mut rng));
    Ok(PairRecord {
        id: seed,
        image: scene.render(resolution)?,
        caption: scene.caption(),
        scene,
        qa,
    })
}

/// Pairs for seeds `base_seed .. base_seed + count`.
pub fn generate_corpus(base_seed: u64, count: usize, resolution: usize, with_qa: bool) -> Result<Vec<PairRecord>> {
    (0..count as u64)
        .map(|i| generate_pair(base_seed.wrapping_add(i), resolution, with_qa))
        .collect()
}
