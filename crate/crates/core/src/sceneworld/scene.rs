use serde::{Deserialize, Serialize};

use numcore::Stream;

use super::image::IMAGE_SIZE;
use super::render::{object_mask, shape_band_contains};
use crate::error::{Error, Result};
use crate::vocab::{tok, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    PlainLight,
    PlainDark,
    Striped,
    Checker,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn token(self) -> Token {
        tok(match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }

    pub fn from_token(t: Token) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.token() == t)
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn token(self) -> Token {
        tok(match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        })
    }

    pub fn from_token(t: Token) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.token() == t)
    }
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::PlainLight,
        Background::PlainDark,
        Background::Striped,
        Background::Checker,
    ];

    /// Gray level of the background at pixel (row, col).
    pub fn gray_at(self, row: usize, col: usize) -> f64 {
        match self {
            Background::PlainLight => 0.9,
            Background::PlainDark => 0.2,
            Background::Striped => {
                if (row / 4) % 2 == 0 {
                    0.9
                } else {
                    0.6
                }
            }
            Background::Checker => {
                if (row / 8 + col / 8) % 2 == 0 {
                    0.9
                } else {
                    0.6
                }
            }
        }
    }

    pub fn token(self) -> Token {
        tok(match self {
            Background::PlainLight => "plain-light",
            Background::PlainDark => "plain-dark",
            Background::Striped => "striped",
            Background::Checker => "checker",
        })
    }

    pub fn from_token(t: Token) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.token() == t)
    }
}

/// One shape in a scene. `center` is (u, v) with a top-left origin: u grows
/// to the right, v grows downwards. For squares and triangles `radius` is the
/// half-width of the bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneObject {
    /// Geometric centroid of the filled shape. The triangle fills the
    /// lower-left half of its bounding box, so its centroid is offset.
    pub fn centroid(&self) -> (f64, f64) {
        let (u, v) = self.center;
        match self.shape {
            Shape::Triangle => (u - self.radius / 3.0, v + self.radius / 3.0),
            _ => (u, v),
        }
    }

    pub fn descriptor(&self) -> (Color, Shape) {
        (self.color, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

impl Scene {
    pub fn find(&self, color: Color, shape: Shape) -> Option<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.color == color && o.shape == shape)
    }

    /// Checks the structural invariants: 1..=4 objects, unique (color, shape)
    /// pairs, in-range geometry and pairwise separation.
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if !(1..=4).contains(&n) {
            return Err(Error::Inconsistent(format!("{n} objects")));
        }
        for (i, a) in self.objects.iter().enumerate() {
            let (u, v) = a.center;
            if !(0.1..=0.9).contains(&u) || !(0.1..=0.9).contains(&v) {
                return Err(Error::Inconsistent(format!("object {i} center out of range")));
            }
            if !(0.08..=0.14).contains(&a.radius) {
                return Err(Error::Inconsistent(format!("object {i} radius out of range")));
            }
            for b in &self.objects[i + 1..] {
                if a.descriptor() == b.descriptor() {
                    return Err(Error::Inconsistent("duplicate color/shape pair".into()));
                }
                if center_distance(a, b) <= a.radius + b.radius + 0.02 {
                    return Err(Error::Inconsistent("overlapping objects".into()));
                }
            }
        }
        Ok(())
    }
}

fn center_distance(a: &SceneObject, b: &SceneObject) -> f64 {
    let (du, dv) = (a.center.0 - b.center.0, a.center.1 - b.center.1);
    (du * du + dv * dv).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Relative weights of object counts 1, 2, 3, 4.
    pub count_weights: [f64; 4],
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            count_weights: [1.0; 4],
            radius_min: 0.08,
            radius_max: 0.14,
        }
    }
}

impl SceneConfig {
    pub fn fixed_count(n: usize) -> Self {
        let mut w = [0.0; 4];
        w[n.clamp(1, 4) - 1] = 1.0;
        Self {
            count_weights: w,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("count_weights must be non-negative with a positive sum".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("radius range must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }
}

pub const MAX_REJECTIONS: usize = 1000;

/// Samples a scene that satisfies every [`Scene`] invariant.
///
/// Placements are rejection-sampled. Besides the center-distance rule, a
/// placement is rejected when its raster would be illegible: fewer than 12
/// pixels, a bounding-box fill ratio outside its shape's band, or pixels
/// touching another object's pixels (8-neighbourhood).
pub fn sample_scene(stream: &mut Stream, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let total: f64 = config.count_weights.iter().sum();
    let mut pick = stream.uniform() * total;
    let mut count = 4;
    for (i, w) in config.count_weights.iter().enumerate() {
        if pick < *w {
            count = i + 1;
            break;
        }
        pick -= w;
    }
    let background = Background::ALL[stream.below(4)];

    let mut pairs: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    stream.shuffle(&mut pairs);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(count);
    let mut rejections = 0;
    for &(color, shape) in pairs.iter().take(count) {
        loop {
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Placement(rejections));
            }
            let radius = stream.uniform_range(config.radius_min, config.radius_max);
            let lo = radius.max(0.1);
            let hi = (1.0 - radius).min(0.9);
            if lo > hi {
                rejections += 1;
                continue;
            }
            let center = (stream.uniform_range(lo, hi), stream.uniform_range(lo, hi));
            let cand = SceneObject {
                shape,
                color,
                center,
                radius,
            };
            let separated = objects
                .iter()
                .all(|o| center_distance(o, &cand) > o.radius + cand.radius + 0.02);
            let mask = object_mask(&cand);
            if separated
                && (0.08..=0.14).contains(&radius)
                && legible(&cand, &mask)
                && masks.iter().all(|m| !touching(m, &mask))
            {
                objects.push(cand);
                masks.push(mask);
                break;
            }
            rejections += 1;
        }
    }
    Ok(Scene {
        objects,
        background,
    })
}

fn legible(obj: &SceneObject, mask: &[bool]) -> bool {
    let n = IMAGE_SIZE;
    let mut count = 0;
    let (mut r0, mut r1, mut c0, mut c1) = (n, 0, n, 0);
    for r in 0..n {
        for c in 0..n {
            if mask[r * n + c] {
                count += 1;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if count < super::oracle::MIN_COMPONENT_PIXELS {
        return false;
    }
    let fill = count as f64 / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
    shape_band_contains(obj.shape, fill)
}

fn touching(a: &[bool], b: &[bool]) -> bool {
    let n = IMAGE_SIZE as isize;
    for r in 0..n {
        for c in 0..n {
            if !a[(r * n + c) as usize] {
                continue;
            }
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..n).contains(&rr) && (0..n).contains(&cc) && b[(rr * n + cc) as usize] {
                        return true;
                    }
                }
            }
        }
    }
    false
}
