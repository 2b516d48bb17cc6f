//! Synthetic prompt/image corpus over a closed vocabulary.
//!
//! Fine prompts are template sentences (`a <color> <object> <scene>, <style>,
//! <modifiers>`). Images are rendered procedurally from the prompt text, so
//! every word that the renderer understands has a visible effect and the
//! image can be regenerated from the record alone.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nsfw::{KeywordNsfw, NsfwClassifier};
use super::record::{GenerationParams, TripletRecord};
use super::summarize::{summarize_to_buckets, ExtractiveSummarizer};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::textcore::{canonicalize, split_words};

pub const TOY_IMAGE_SIZE: u32 = 32;
/// `image_ref` prefix for records whose image is rendered from the prompt.
pub const TOY_IMAGE_SCHEME: &str = "toy:";

pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.12, 0.10]),
    ("green", [0.15, 0.70, 0.20]),
    ("blue", [0.12, 0.25, 0.85]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.95, 0.50, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
    ("pink", [0.95, 0.45, 0.70]),
    ("brown", [0.45, 0.28, 0.10]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Triangle,
    Square,
    Circle,
    Rectangle,
    Diamond,
    Ring,
    Cross,
    Ellipse,
}

pub const OBJECTS: &[(&str, Shape)] = &[
    ("tree", Shape::Triangle),
    ("house", Shape::Square),
    ("cat", Shape::Circle),
    ("car", Shape::Rectangle),
    ("boat", Shape::Diamond),
    ("flower", Shape::Ring),
    ("castle", Shape::Cross),
    ("fish", Shape::Ellipse),
];

/// Scene phrase, keyword the renderer looks for, sky and ground colours.
pub const SCENES: &[(&str, &str, [f64; 3], [f64; 3])] = &[
    ("on a hill", "hill", [0.55, 0.75, 0.95], [0.35, 0.60, 0.25]),
    ("by the sea", "sea", [0.60, 0.80, 0.95], [0.10, 0.35, 0.65]),
    ("in a forest", "forest", [0.30, 0.50, 0.30], [0.15, 0.30, 0.12]),
    ("in a city", "city", [0.65, 0.65, 0.70], [0.35, 0.35, 0.38]),
    ("under the stars", "stars", [0.05, 0.05, 0.20], [0.10, 0.10, 0.25]),
    ("in the desert", "desert", [0.95, 0.80, 0.55], [0.85, 0.65, 0.35]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Watercolor,
    Oil,
    Pixel,
    Sketch,
    Neon,
    Pastel,
}

/// Style phrase, keyword, style.
pub const STYLES: &[(&str, &str, Style)] = &[
    ("watercolor painting", "watercolor", Style::Watercolor),
    ("oil painting", "oil", Style::Oil),
    ("pixel art", "pixel", Style::Pixel),
    ("pencil sketch", "sketch", Style::Sketch),
    ("neon art", "neon", Style::Neon),
    ("pastel illustration", "pastel", Style::Pastel),
];

pub const MODIFIERS: &[&str] = &[
    "highly detailed",
    "sharp focus",
    "soft focus",
    "trending on artstation",
    "4k",
    "dramatic lighting",
    "soft lighting",
    "masterpiece",
    "intricate details",
    "cinematic",
    "vibrant colors",
    "award winning",
];

const UNSAFE_MODIFIER: &str = "gore";
const UNSAFE_RATE: f64 = 0.02;

/// Every word the toy world can produce.
pub fn toy_vocabulary_words() -> Vec<String> {
    let mut words = vec!["a".to_string(), ",".to_string(), UNSAFE_MODIFIER.to_string()];
    let phrases = COLORS
        .iter()
        .map(|c| c.0)
        .chain(OBJECTS.iter().map(|o| o.0))
        .chain(SCENES.iter().map(|s| s.0))
        .chain(STYLES.iter().map(|s| s.0))
        .chain(MODIFIERS.iter().copied());
    for p in phrases {
        words.extend(split_words(p));
    }
    words
}

/// Samples one fine prompt.
pub fn sample_fine_prompt<R: Rng>(rng: &mut R) -> String {
    let color = COLORS.choose(rng).unwrap().0;
    let object = OBJECTS.choose(rng).unwrap().0;
    let mut parts = Vec::new();
    if rng.random_bool(0.8) {
        let scene = SCENES.choose(rng).unwrap().0;
        parts.push(format!("a {color} {object} {scene}"));
    } else {
        parts.push(format!("a {color} {object}"));
    }
    parts.push(STYLES.choose(rng).unwrap().0.to_string());
    let n_mods = rng.random_range(1..=4);
    for m in MODIFIERS.choose_multiple(rng, n_mods) {
        parts.push((*m).to_string());
    }
    if rng.random_bool(UNSAFE_RATE) {
        parts.push(UNSAFE_MODIFIER.to_string());
    }
    parts.join(", ")
}

/// Generates `n` records. Identical `(n, seed)` give identical records.
pub fn generate_toy_world(n: usize, seed: u64) -> Result<Vec<TripletRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classifier = KeywordNsfw::default();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let fine_prompt = sample_fine_prompt(&mut rng);
        let image_seed: u64 = rng.random_range(0..u32::MAX as u64);
        let coarse_prompts = summarize_to_buckets(&fine_prompt, &ExtractiveSummarizer)?;
        let nsfw_score = classifier.score(&fine_prompt).map_err(Error::RejectedRecord)?;
        out.push(TripletRecord {
            id: format!("toy-{i:06}"),
            fine_prompt,
            coarse_prompts,
            image_ref: format!("{TOY_IMAGE_SCHEME}{image_seed}"),
            nsfw_score,
            gen_params: GenerationParams {
                step: 50,
                seed: image_seed,
                height: TOY_IMAGE_SIZE,
                width: TOY_IMAGE_SIZE,
                cfg_scale: 7.0,
                sampler: "euler_a".into(),
            },
            extra: Default::default(),
        });
    }
    Ok(out)
}

/// Renders a toy record's image or loads it from disk (relative to `base`).
pub fn resolve_image(record: &TripletRecord, base: Option<&Path>) -> Result<Image> {
    if record.image_ref.starts_with(TOY_IMAGE_SCHEME) {
        return Ok(render_prompt(
            &record.fine_prompt,
            record.gen_params.seed,
            record.gen_params.height as usize,
            record.gen_params.width as usize,
        ));
    }
    let path = match base {
        Some(b) => b.join(&record.image_ref),
        None => record.image_ref.clone().into(),
    };
    Image::load(path)
}

struct Scene {
    color: [f64; 3],
    shape: Shape,
    sky: [f64; 3],
    ground: [f64; 3],
    style: Option<Style>,
    text: String,
}

impl Scene {
    fn parse(text: &str) -> Self {
        let words = split_words(text);
        let has = |w: &str| words.iter().any(|x| x == w);
        let color = COLORS.iter().find(|c| has(c.0)).map_or([0.5, 0.5, 0.5], |c| c.1);
        let shape = OBJECTS.iter().find(|o| has(o.0)).map_or(Shape::Circle, |o| o.1);
        let (sky, ground) = SCENES
            .iter()
            .find(|s| has(s.1))
            .map_or(([0.85, 0.85, 0.82], [0.70, 0.70, 0.66]), |s| (s.2, s.3));
        let style = STYLES.iter().find(|s| has(s.1)).map(|s| s.2);
        Self {
            color,
            shape,
            sky,
            ground,
            style,
            text: canonicalize(text),
        }
    }

    fn mentions(&self, phrase: &str) -> bool {
        self.text.contains(phrase)
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => ax <= r * 0.85 && ay <= r * 0.85,
        Shape::Rectangle => ax <= r && ay <= r * 0.5,
        Shape::Diamond => ax + ay <= r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
        Shape::Cross => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
        Shape::Ellipse => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
        Shape::Triangle => dy >= -r && dy <= r * 0.8 && ax <= (dy + r) * 0.5,
    }
}

fn box_blur(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        acc += img.get(yy, xx, c);
                        n += 1.0;
                    }
                }
                out.set(y, x, c, acc / n);
            }
        }
    }
    out
}

fn pixelate(img: &Image, block: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::new(h, w);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ys = by..(by + block).min(h);
            let xs = bx..(bx + block).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += img.get(y, x, c);
                    }
                }
                for y in ys.clone() {
                    for x in xs.clone() {
                        out.set(y, x, c, acc / n);
                    }
                }
            }
        }
    }
    out
}

fn grayscale(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn per_pixel(img: &Image, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set_pixel(y, x, f(img.pixel(y, x)));
        }
    }
    out
}

/// Pure function of `(text, seed, height, width)`.
pub fn render_prompt(text: &str, seed: u64, height: usize, width: usize) -> Image {
    let scene = Scene::parse(text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let cx = wf / 2.0 + rng.random_range(-wf / 8.0..=wf / 8.0);
    let cy = hf / 2.0 + rng.random_range(-hf / 8.0..=hf / 8.0);
    let radius = hf.min(wf) * rng.random_range(0.22..0.32);
    let neon = scene.style == Some(Style::Neon);

    let mut img = Image::new(height, width);
    for y in 0..height {
        let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
        for x in 0..width {
            let mut px = [0.0; 3];
            for c in 0..3 {
                let mut v = scene.sky[c] * (1.0 - t) + scene.ground[c] * t;
                if neon {
                    v *= 0.2;
                }
                if scene.style == Some(Style::Oil) {
                    v += 0.08 * (x as f64 * 1.3 + y as f64 * 0.7).sin();
                }
                px[c] = v;
            }
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if inside(scene.shape, dx, dy, radius) {
                px = scene.color;
                if neon {
                    let max = px.iter().copied().fold(0.0, f64::max).max(1e-9);
                    px = px.map(|v| v / max);
                }
            }
            img.set_pixel(y, x, px);
        }
    }

    match scene.style {
        Some(Style::Pixel) => img = pixelate(&img, 4),
        Some(Style::Watercolor) => img = box_blur(&img),
        Some(Style::Sketch) => img = per_pixel(&img, |p| [grayscale(p); 3]),
        Some(Style::Pastel) => img = per_pixel(&img, |p| p.map(|v| 0.55 * v + 0.45)),
        _ => {}
    }
    if scene.mentions("soft focus") {
        img = box_blur(&box_blur(&img));
    }
    if scene.mentions("dramatic lighting") {
        img = img.map(|v| 0.5 + (v - 0.5) * 1.5);
    }
    if scene.mentions("soft lighting") {
        img = img.map(|v| 0.5 + (v - 0.5) * 0.7);
    }
    if scene.mentions("vibrant colors") {
        img = per_pixel(&img, |p| {
            let g = grayscale(p);
            p.map(|v| g + (v - g) * 1.5)
        });
    }
    img.map(|v| v.clamp(0.0, 1.0))
}
