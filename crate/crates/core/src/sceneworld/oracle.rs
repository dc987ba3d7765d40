//! Rule-based attribute extraction from rasters, and question answering on
//! the extracted attributes.

use serde::{Deserialize, Serialize};

use super::guidance::{Answer, Question};
use super::image::{Image, IMAGE_SIZE};
use super::render::classify_fill;
use super::scene::{Background, Color, Shape};
use crate::error::Result;
use crate::vocab::Token;

pub const MIN_COMPONENT_PIXELS: usize = 12;
/// Maximum per-channel distance from a palette color for a foreground pixel.
pub const PALETTE_TOLERANCE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttributes {
    pub shape: Shape,
    pub color: Color,
    /// (u, v) centroid of the component's pixel centers, top-left origin.
    pub centroid: (f64, f64),
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAttributes {
    pub count: usize,
    pub objects: Vec<ObjectAttributes>,
    pub background: Background,
}

impl SceneAttributes {
    pub fn find(&self, color: Color, shape: Shape) -> Option<&ObjectAttributes> {
        self.objects
            .iter()
            .find(|o| o.color == color && o.shape == shape)
    }
}

fn palette_label(rgb: [f64; 3]) -> Option<usize> {
    Color::ALL.iter().position(|c| {
        c.rgb()
            .iter()
            .zip(rgb)
            .all(|(a, b)| (a - b).abs() <= PALETTE_TOLERANCE)
    })
}

fn nearest_color(rgb: [f64; 3]) -> Color {
    let dist = |c: &Color| -> f64 {
        c.rgb().iter().zip(rgb).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut best = Color::ALL[0];
    for c in &Color::ALL[1..] {
        if dist(c) < dist(&best) {
            best = *c;
        }
    }
    best
}

/// Background class whose template best matches the non-foreground pixels
/// (smallest mean absolute gray error).
fn classify_background(img: &Image, foreground: &[Option<usize>]) -> Background {
    let mut errs = [0.0f64; 4];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            if foreground[row * IMAGE_SIZE + col].is_some() {
                continue;
            }
            let p = img.get(row, col);
            let gray = (p[0] + p[1] + p[2]) / 3.0;
            for (e, bg) in errs.iter_mut().zip(Background::ALL) {
                *e += (gray - bg.gray_at(row, col)).abs();
            }
        }
    }
    let mut best = 0;
    for i in 1..4 {
        if errs[i] < errs[best] {
            best = i;
        }
    }
    Background::ALL[best]
}

/// Reads scene attributes back out of an arbitrary image.
///
/// Foreground pixels are those within [`PALETTE_TOLERANCE`] of an object
/// color; 4-connected components of one color label with at least
/// [`MIN_COMPONENT_PIXELS`] pixels become objects, classified by their
/// bounding-box fill ratio.
pub fn extract_attributes(img: &Image) -> SceneAttributes {
    let n = IMAGE_SIZE;
    let labels: Vec<Option<usize>> = (0..n * n)
        .map(|i| palette_label(img.get(i / n, i % n)))
        .collect();
    let background = classify_background(img, &labels);

    let mut seen = vec![false; n * n];
    let mut objects = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n * n {
        let Some(label) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (i / n, i % n);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == Some(label) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - n);
            }
            if r + 1 < n {
                visit(i + n);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < n {
                visit(i + 1);
            }
        }
        if members.len() < MIN_COMPONENT_PIXELS {
            continue;
        }
        let (mut r0, mut r1, mut c0, mut c1) = (n, 0, n, 0);
        let (mut su, mut sv) = (0.0, 0.0);
        let mut mean = [0.0; 3];
        for &i in &members {
            let (r, c) = (i / n, i % n);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            su += (c as f64 + 0.5) / n as f64;
            sv += (r as f64 + 0.5) / n as f64;
            for (m, p) in mean.iter_mut().zip(img.get(r, c)) {
                *m += p;
            }
        }
        let k = members.len() as f64;
        let fill = k / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        objects.push(ObjectAttributes {
            shape: classify_fill(fill),
            color: nearest_color(mean.map(|m| m / k)),
            centroid: (su / k, sv / k),
            pixels: members.len(),
        });
    }
    SceneAttributes {
        count: objects.len(),
        objects,
        background,
    }
}

/// Evaluates a template question against extracted attributes.
pub fn answer_from_attributes(question: &[Token], attrs: &SceneAttributes) -> Result<Answer> {
    let q = Question::parse(question)?;
    Ok(Answer::from_bool(match q {
        Question::Existence { color, shape } => attrs.find(color, shape).is_some(),
        Question::Count(k) => attrs.count == k,
        Question::Position { a, relation, b } => {
            match (attrs.find(a.0, a.1), attrs.find(b.0, b.1)) {
                (Some(oa), Some(ob)) => relation.holds(oa.centroid, ob.centroid),
                _ => false,
            }
        }
        Question::Color { shape, color } => attrs
            .objects
            .iter()
            .any(|o| o.shape == shape && o.color == color),
        Question::Background(bg) => attrs.background == bg,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sceneworld::render::render;
    use crate::sceneworld::scene::{Scene, SceneObject};
    use crate::vocab::parse_words;

    #[test]
    fn uniform_light_gray_is_empty_plain_light() {
        let a = extract_attributes(&Image::filled([0.9; 3]));
        assert_eq!(a.count, 0);
        assert_eq!(a.background, Background::PlainLight);
    }

    #[test]
    fn single_blue_square() {
        let img = render(&Scene {
            objects: vec![SceneObject {
                shape: Shape::Square,
                color: Color::Blue,
                center: (0.5, 0.4),
                radius: 0.11,
            }],
            background: Background::Striped,
        });
        let a = extract_attributes(&img);
        assert_eq!(a.count, 1);
        assert_eq!(a.objects[0].shape, Shape::Square);
        assert_eq!(a.objects[0].color, Color::Blue);
        assert_eq!(a.background, Background::Striped);
    }

    #[test]
    fn template_answers() {
        let attrs = SceneAttributes {
            count: 3,
            objects: vec![],
            background: Background::PlainDark,
        };
        let ask = |q: &str| answer_from_attributes(&parse_words(q).unwrap(), &attrs).unwrap();
        assert_eq!(ask("are there 3 objects"), Answer::Yes);
        assert_eq!(ask("is the background checker"), Answer::No);
        assert!(answer_from_attributes(&parse_words("is there").unwrap(), &attrs).is_err());
    }
}
