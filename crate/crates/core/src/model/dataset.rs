//! Synthetic shapes-and-colors VQA data.
//!
//! Each sample is a black image with 1–3 colored 16×16 shapes snapped to a
//! grid of patch-aligned cells, a templated question and a full-sentence
//! answer derived from the scene. Shape kinds and colors are distinct
//! within a scene so every question has exactly one truthful answer.
//! Shapes are large on purpose — each lights up four full vision patches,
//! which gives the model a pixel signal strong enough to survive early
//! training — and they spawn only on an interior lattice, which keeps the
//! image frame free of task-relevant content at the default border
//! budgets.
//!
//! Generation is a pure function of `(seed, sample index)`: each sample
//! draws from its own named RNG stream, so splits taken from one dataset
//! stay stable no matter how many samples are generated.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm::save_ppm;
use crate::rng::{shuffled_indices, stream_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side length of a shape's bounding box. Anchored on the patch grid, a
/// shape covers a 2×2 block of vision patches.
pub const SHAPE: usize = 16;

/// Margin kept free on every side of the canvas: one shape-free frame for
/// masked perturbations to live in.
pub const FRAME: usize = 8;

/// Pitch of the anchor lattice. Equal to the shape size, so cells never
/// overlap.
pub const PITCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::Orange,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

/// One shape instance. `y`/`x` is the top-left pixel of its 16×16 bounding
/// box and is kept as `f64` so drifting frame sequences can move shapes
/// smoothly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: Color,
    pub y: f64,
    pub x: f64,
}

/// Ground-truth scene description behind a rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<PlacedShape>,
}

impl Scene {
    pub fn find(&self, kind: ShapeKind) -> Option<&PlacedShape> {
        self.shapes.iter().find(|s| s.kind == kind)
    }

    pub fn contains(&self, color: Color, kind: ShapeKind) -> bool {
        self.shapes.iter().any(|s| s.kind == kind && s.color == color)
    }
}

/// One VQA sample. The scene is retained so answers can be re-derived from
/// ground truth rather than trusted blindly.
#[derive(Clone, Debug)]
pub struct VqaSample<S> {
    pub id: u64,
    pub image: Tensor<S>,
    pub question: Vec<u8>,
    pub answer: Vec<u8>,
    pub scene: Scene,
}

/// 16×16 stencil of a shape kind: which bounding-box pixels it fills.
fn stencil(kind: ShapeKind, u: usize, v: usize) -> bool {
    let (uf, vf) = (u as f64, v as f64);
    match kind {
        ShapeKind::Square => (1..=14).contains(&u) && (1..=14).contains(&v),
        ShapeKind::Circle => {
            let d2 = (uf - 7.5).powi(2) + (vf - 7.5).powi(2);
            d2 <= 51.84
        }
        ShapeKind::Triangle => (1..=14).contains(&u) && (vf - 7.5).abs() <= uf * 0.5,
        ShapeKind::Cross => {
            ((6..=9).contains(&u) && (1..=14).contains(&v))
                || ((6..=9).contains(&v) && (1..=14).contains(&u))
        }
    }
}

/// Rasterizes a scene onto a black `hw × hw` canvas. Anchors round to the
/// nearest pixel and shapes are clipped at the canvas edges.
pub fn render_scene<S: Scalar>(scene: &Scene, hw: usize) -> Tensor<S> {
    let mut img = Tensor::<S>::zeros(vec![hw, hw, 3]);
    for shape in &scene.shapes {
        let ay = shape.y.round() as i64;
        let ax = shape.x.round() as i64;
        let rgb = shape.color.rgb();
        for u in 0..SHAPE {
            for v in 0..SHAPE {
                if !stencil(shape.kind, u, v) {
                    continue;
                }
                let py = ay + u as i64;
                let px = ax + v as i64;
                if py < 0 || px < 0 || py >= hw as i64 || px >= hw as i64 {
                    continue;
                }
                let base = (py as usize * hw + px as usize) * 3;
                for c in 0..3 {
                    img.data_mut()[base + c] = S::of_f64(rgb[c]);
                }
            }
        }
    }
    img
}

/// Number of anchor positions per axis for a given canvas size.
fn lattice_len(hw: usize) -> usize {
    (hw - 2 * FRAME) / PITCH
}

/// Draws a random scene: 1–3 shapes with distinct kinds, distinct colors
/// and distinct cells on the interior anchor lattice.
pub fn sample_scene(rng: &mut ChaCha8Rng, hw: usize) -> Scene {
    let side = lattice_len(hw);
    debug_assert!(side >= 1, "canvas too small for interior placement");
    let n = rng.random_range(1..=3usize);
    let kinds = shuffled_indices(rng, ShapeKind::ALL.len());
    let colors = shuffled_indices(rng, Color::ALL.len());
    let cells = shuffled_indices(rng, side * side);
    let shapes = (0..n.min(side * side))
        .map(|i| {
            let row = cells[i] / side;
            let col = cells[i] % side;
            PlacedShape {
                kind: ShapeKind::ALL[kinds[i]],
                color: Color::ALL[colors[i]],
                y: (FRAME + row * PITCH) as f64,
                x: (FRAME + col * PITCH) as f64,
            }
        })
        .collect();
    Scene { shapes }
}

/// Phrases the count answer with correct grammar.
fn count_answer(n: usize) -> String {
    if n == 1 {
        "there is 1 shape".to_string()
    } else {
        format!("there are {n} shapes")
    }
}

/// Synthesizes a question/answer pair for a scene from one of three
/// templates: shape color, shape count, or color+kind presence.
pub fn sample_question(rng: &mut ChaCha8Rng, scene: &Scene) -> (String, String) {
    match rng.random_range(0..3u32) {
        0 => {
            let s = &scene.shapes[rng.random_range(0..scene.shapes.len())];
            (
                format!("what color is the {}?", s.kind.name()),
                format!("the {} is {}", s.kind.name(), s.color.name()),
            )
        }
        1 => (
            "how many shapes are there?".to_string(),
            count_answer(scene.shapes.len()),
        ),
        _ => {
            let want_present = rng.random_range(0..2u32) == 0;
            if want_present {
                let s = &scene.shapes[rng.random_range(0..scene.shapes.len())];
                (
                    format!("is there a {} {}?", s.color.name(), s.kind.name()),
                    "yes".to_string(),
                )
            } else {
                loop {
                    let kind = ShapeKind::ALL[rng.random_range(0..4usize)];
                    let color = Color::ALL[rng.random_range(0..8usize)];
                    if !scene.contains(color, kind) {
                        return (
                            format!("is there a {} {}?", color.name(), kind.name()),
                            "no".to_string(),
                        );
                    }
                }
            }
        }
    }
}

/// Generates `n` samples on an `hw × hw` canvas. Sample `i` depends only on
/// `(seed, i)`.
pub fn gen_shapes_dataset<S: Scalar>(n: usize, seed: u64, hw: usize) -> Result<Vec<VqaSample<S>>> {
    if hw % FRAME != 0 || hw < 2 * FRAME + PITCH {
        return Err(Error::shape(
            "gen_shapes_dataset",
            format!(
                "canvas {hw} must be a multiple of {FRAME} and at least {}",
                2 * FRAME + PITCH
            ),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, &format!("data/{i}"));
            let scene = sample_scene(&mut rng, hw);
            let (q, a) = sample_question(&mut rng, &scene);
            VqaSample {
                id: i as u64,
                image: render_scene(&scene, hw),
                question: q.into_bytes(),
                answer: a.into_bytes(),
                scene,
            }
        })
        .collect())
}

/// Re-derives the answer to a templated question from the scene alone.
/// Returns `None` for questions that do not match any template. Tests use
/// this to cross-check generated answers against ground truth.
pub fn derive_answer(scene: &Scene, question: &[u8]) -> Option<String> {
    let q = std::str::from_utf8(question).ok()?;
    if let Some(rest) = q.strip_prefix("what color is the ") {
        let kind_name = rest.strip_suffix('?')?;
        let kind = ShapeKind::ALL.into_iter().find(|k| k.name() == kind_name)?;
        let s = scene.find(kind)?;
        return Some(format!("the {} is {}", kind.name(), s.color.name()));
    }
    if q == "how many shapes are there?" {
        return Some(count_answer(scene.shapes.len()));
    }
    if let Some(rest) = q.strip_prefix("is there a ") {
        let body = rest.strip_suffix('?')?;
        let (color_name, kind_name) = body.split_once(' ')?;
        let color = Color::ALL.into_iter().find(|c| c.name() == color_name)?;
        let kind = ShapeKind::ALL.into_iter().find(|k| k.name() == kind_name)?;
        return Some(if scene.contains(color, kind) { "yes" } else { "no" }.to_string());
    }
    None
}

/// One line of the exported JSONL index.
#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: u64,
    image: String,
    question: String,
    answer: String,
    scene: Scene,
}

/// Writes samples as PPM files plus a JSONL index into `dir`.
pub fn export_dataset<S: Scalar>(samples: &[VqaSample<S>], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join("index.jsonl"))?);
    for s in samples {
        let name = format!("img_{:05}.ppm", s.id);
        save_ppm(&dir.join(&name), &s.image)?;
        let record = IndexRecord {
            id: s.id,
            image: name,
            question: String::from_utf8_lossy(&s.question).into_owned(),
            answer: String::from_utf8_lossy(&s.answer).into_owned(),
            scene: s.scene.clone(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::malformed("dataset index", e.to_string()))?;
        writeln!(index, "{line}")?;
    }
    index.flush()?;
    Ok(())
}
