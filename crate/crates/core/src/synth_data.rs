//! Synthetic shapes corpus: colored circles, squares and triangles on a black
//! canvas, with color and relative-position questions.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::numerics::RngStream;
use crate::raster::RgbImage;
use crate::toy_vlm::{COLORS, SHAPES};

pub const CANVAS: usize = 64;
pub const MARGIN: usize = 2;
const MIN_SIDE: usize = 10;
const MAX_SIDE: usize = 18;
const PLACEMENT_TRIES: usize = 64;

pub fn color_rgb(name: &str) -> Option<[u8; 3]> {
    Some(match name {
        "red" => [255, 0, 0],
        "green" => [0, 255, 0],
        "blue" => [0, 0, 255],
        "yellow" => [255, 255, 0],
        "cyan" => [0, 255, 255],
        "magenta" => [255, 0, 255],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldBox {
    pub object: String,
    pub color: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Color,
    LeftOf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: String,
    pub image: RgbImage,
    pub question: String,
    pub kind: QuestionKind,
    pub gold_answer: String,
    pub gold_boxes: Vec<GoldBox>,
}

impl Sample {
    /// Gold box of the named object, if it is in the image.
    pub fn gold_box(&self, object: &str) -> Option<&GoldBox> {
        self.gold_boxes.iter().find(|g| g.object == object)
    }

    /// Objects the question mentions, in question order.
    pub fn mentioned_objects(&self) -> Vec<&GoldBox> {
        self.question
            .split(|c: char| !c.is_alphanumeric())
            .filter_map(|w| self.gold_box(w))
            .collect()
    }
}

struct Placed {
    shape: &'static str,
    color: &'static str,
    x: usize,
    y: usize,
    side: usize,
}

impl Placed {
    fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.side || py >= self.y + self.side {
            return false;
        }
        let s = self.side as f64;
        let (lx, ly) = ((px - self.x) as f64 + 0.5, (py - self.y) as f64 + 0.5);
        match self.shape {
            "square" => true,
            "circle" => {
                let r = s / 2.0;
                (lx - r).powi(2) + (ly - r).powi(2) <= r * r
            }
            // apex at the top center, base along the bottom row
            _ => (lx - s / 2.0).abs() <= ly / 2.0,
        }
    }

    fn separated_from(&self, other: &Placed) -> bool {
        let gap = MARGIN;
        self.x + self.side + gap <= other.x
            || other.x + other.side + gap <= self.x
            || self.y + self.side + gap <= other.y
            || other.y + other.side + gap <= self.y
    }
}

fn place(rng: &mut RngStream, n: usize) -> Vec<Placed> {
    let mut shapes: Vec<&'static str> = SHAPES.to_vec();
    for i in (1..shapes.len()).rev() {
        shapes.swap(i, rng.below(i + 1));
    }
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for &shape in shapes.iter().take(n) {
        for _ in 0..PLACEMENT_TRIES {
            let side = MIN_SIDE + rng.below(MAX_SIDE - MIN_SIDE + 1);
            let span = CANVAS - 2 * MARGIN - side + 1;
            let cand = Placed {
                shape,
                color: COLORS[rng.below(COLORS.len())],
                x: MARGIN + rng.below(span),
                y: MARGIN + rng.below(span),
                side,
            };
            if placed.iter().all(|p| p.separated_from(&cand)) {
                placed.push(cand);
                break;
            }
        }
    }
    placed
}

fn render(placed: &[Placed]) -> (RgbImage, Vec<GoldBox>) {
    let mut image = RgbImage::new(CANVAS, CANVAS);
    let mut boxes = Vec::with_capacity(placed.len());
    for p in placed {
        let rgb = color_rgb(p.color).expect("palette color");
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for py in p.y..p.y + p.side {
            for px in p.x..p.x + p.side {
                if p.covers(px, py) {
                    image.put(px, py, rgb);
                    x0 = x0.min(px);
                    y0 = y0.min(py);
                    x1 = x1.max(px + 1);
                    y1 = y1.max(py + 1);
                }
            }
        }
        boxes.push(GoldBox {
            object: p.shape.to_string(),
            color: p.color.to_string(),
            bbox: BBox { x_min: x0 as i64, y_min: y0 as i64, x_max: x1 as i64, y_max: y1 as i64 },
        });
    }
    (image, boxes)
}

/// Draws one sample. Position questions are asked about two shapes whose
/// horizontal centers differ; otherwise a color question is asked.
pub fn generate_sample(rng: &mut RngStream, sample_id: &str) -> Sample {
    let n = 1 + rng.below(3);
    let placed = place(rng, n);
    let (image, gold_boxes) = render(&placed);
    let center = |b: &BBox| b.x_min + b.x_max;
    let ask_position = gold_boxes.len() >= 2 && rng.below(3) == 0;
    let (kind, question, gold_answer) = if ask_position {
        let a = rng.below(gold_boxes.len());
        let b = (a + 1 + rng.below(gold_boxes.len() - 1)) % gold_boxes.len();
        let (ga, gb) = (&gold_boxes[a], &gold_boxes[b]);
        if center(&ga.bbox) != center(&gb.bbox) {
            let yes = center(&ga.bbox) < center(&gb.bbox);
            (
                QuestionKind::LeftOf,
                format!("is the {} left of the {}?", ga.object, gb.object),
                if yes { "yes" } else { "no" }.to_string(),
            )
        } else {
            (QuestionKind::Color, format!("what color is the {}?", ga.object), ga.color.clone())
        }
    } else {
        let g = &gold_boxes[rng.below(gold_boxes.len())];
        (QuestionKind::Color, format!("what color is the {}?", g.object), g.color.clone())
    };
    Sample { sample_id: sample_id.to_string(), image, question, kind, gold_answer, gold_boxes }
}

pub fn sample_id(index: usize) -> String {
    format!("sample-{index:05}")
}

/// `n` samples, each drawn from its own child stream of `seed`.
pub fn generate_samples(n: usize, seed: u64) -> Vec<Sample> {
    let root = RngStream::new(seed).split("synth");
    (0..n)
        .into_par_iter()
        .map(|i| generate_sample(&mut root.split_index("sample", i as u64), &sample_id(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image: String,
    pub question: String,
    pub kind: QuestionKind,
    pub gold_answer: String,
    pub gold_boxes: Vec<GoldBox>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes images under `dir/images/` and one manifest line per sample.
pub fn generate_dataset(n: usize, seed: u64, dir: &Path) -> Result<Vec<ManifestEntry>> {
    if n < 1 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let samples = generate_samples(n, seed);
    write_dataset(&samples, dir)
}

pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<Vec<ManifestEntry>> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .map(|s| {
            let rel = format!("images/{}.ppm", s.sample_id);
            s.image.save_ppm(&dir.join(&rel))?;
            Ok(ManifestEntry {
                sample_id: s.sample_id.clone(),
                image: rel,
                question: s.question.clone(),
                kind: s.kind,
                gold_answer: s.gold_answer.clone(),
                gold_boxes: s.gold_boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        text.push('\n');
    }
    crate::write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads the manifest and every referenced image.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_par_iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.image);
            let image = RgbImage::load_ppm(&path)?;
            let s = Sample {
                sample_id: e.sample_id,
                image,
                question: e.question,
                kind: e.kind,
                gold_answer: e.gold_answer,
                gold_boxes: e.gold_boxes,
            };
            check_sample(&s)?;
            Ok(s)
        })
        .collect()
}

/// Lexicon and bounds checks on a sample.
pub fn check_sample(s: &Sample) -> Result<()> {
    let lexical = COLORS.contains(&s.gold_answer.as_str()) || s.gold_answer == "yes" || s.gold_answer == "no";
    if !lexical {
        return Err(Error::Config(format!("{}: answer {:?} outside the lexicon", s.sample_id, s.gold_answer)));
    }
    for g in &s.gold_boxes {
        let b = g.bbox;
        b.validate()?;
        if b.x_min < 0 || b.y_min < 0 || b.x_max > s.image.width() as i64 || b.y_max > s.image.height() as i64 {
            return Err(Error::Shape(format!("{}: box {b:?} outside the image", s.sample_id)));
        }
    }
    Ok(())
}

/// Recomputes the gold answer from manifest fields alone.
pub fn answer_from_manifest(e: &ManifestEntry) -> Option<String> {
    let words: Vec<&str> = e.question.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let find = |name: &str| e.gold_boxes.iter().find(|g| g.object == name);
    match e.kind {
        QuestionKind::Color => words.iter().find_map(|w| find(w)).map(|g| g.color.clone()),
        QuestionKind::LeftOf => {
            let named: Vec<_> = words.iter().filter_map(|w| find(w)).collect();
            let (a, b) = (named.first()?, named.get(1)?);
            let yes = a.bbox.x_min + a.bbox.x_max < b.bbox.x_min + b.bbox.x_max;
            Some(if yes { "yes" } else { "no" }.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_sample() {
        let a = generate_sample(&mut RngStream::new(3), "x");
        let b = generate_sample(&mut RngStream::new(3), "x");
        assert_eq!(a, b);
    }

    #[test]
    fn gold_boxes_bound_rendered_pixels() {
        for s in generate_samples(40, 11) {
            for g in &s.gold_boxes {
                let rgb = color_rgb(&g.color).unwrap();
                let mut hull = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
                for y in 0..CANVAS {
                    for x in 0..CANVAS {
                        let inside = (x as i64) >= g.bbox.x_min
                            && (x as i64) < g.bbox.x_max
                            && (y as i64) >= g.bbox.y_min
                            && (y as i64) < g.bbox.y_max;
                        if inside && s.image.get(x, y) == rgb {
                            hull = (hull.0.min(x as i64), hull.1.min(y as i64), hull.2.max(x as i64 + 1), hull.3.max(y as i64 + 1));
                        }
                    }
                }
                assert_eq!(hull, (g.bbox.x_min, g.bbox.y_min, g.bbox.x_max, g.bbox.y_max));
                assert!(g.bbox.x_min >= MARGIN as i64 && g.bbox.x_max <= (CANVAS - MARGIN) as i64);
            }
        }
    }

    #[test]
    fn color_answers_match_construction() {
        for s in generate_samples(60, 5) {
            check_sample(&s).unwrap();
            if s.kind == QuestionKind::Color {
                let g = s.mentioned_objects()[0];
                assert_eq!(s.gold_answer, g.color);
            }
            let names: std::collections::BTreeSet<_> = s.gold_boxes.iter().map(|g| &g.object).collect();
            assert_eq!(names.len(), s.gold_boxes.len());
            assert!((1..=3).contains(&s.gold_boxes.len()));
        }
    }

    #[test]
    fn both_question_templates_occur() {
        let samples = generate_samples(100, 0);
        assert!(samples.iter().any(|s| s.kind == QuestionKind::LeftOf));
        assert!(samples.iter().any(|s| s.kind == QuestionKind::Color));
        assert!(samples.iter().any(|s| s.question.starts_with("is the ") && s.question.ends_with('?')));
    }
}
