//! Attribute lexicon shared by the synthetic renderer and the stub encoders:
//! four colors, three shapes, and a pixel-level parser that recovers colored
//! connected components and their shape from a rendered image.

use serde::{Deserialize, Serialize};

use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

pub const BACKGROUND_RGB: [f32; 3] = [0.42, 0.42, 0.45];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.88, 0.15, 0.13],
            Color::Green => [0.16, 0.74, 0.22],
            Color::Blue => [0.15, 0.28, 0.88],
            Color::Yellow => [0.93, 0.86, 0.18],
        }
    }

    fn parse(word: &str) -> Option<Color> {
        COLORS.into_iter().find(|c| c.name() == word)
    }
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn parse(word: &str) -> Option<ShapeKind> {
        SHAPES.into_iter().find(|s| s.name() == word)
    }

    /// Classify by the fraction of the bounding box the component fills:
    /// squares ≈ 1, circles ≈ π/4, upright triangles ≈ 1/2.
    pub fn from_fill_ratio(fill: f64) -> ShapeKind {
        if fill > 0.9 {
            ShapeKind::Square
        } else if fill > 0.64 {
            ShapeKind::Circle
        } else {
            ShapeKind::Triangle
        }
    }
}

/// A renderable category such as "red circle".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub color: Color,
    pub shape: ShapeKind,
}

impl Attributes {
    pub fn parse(name: &str) -> Option<Attributes> {
        let words: Vec<&str> = name.split_whitespace().collect();
        match words.as_slice() {
            [c, s] => Some(Attributes { color: Color::parse(c)?, shape: ShapeKind::parse(s)? }),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

pub fn is_attribute_word(word: &str) -> bool {
    Color::parse(word).is_some() || ShapeKind::parse(word).is_some()
}

/// Nearest palette color, or `None` for background-like pixels.
pub fn classify_pixel(rgb: [f32; 3]) -> Option<Color> {
    let mut best = None;
    let mut best_d = 0.12f32;
    for c in COLORS {
        let p = c.rgb();
        let d = (0..3).map(|i| (rgb[i] - p[i]).powi(2)).sum::<f32>();
        if d < best_d {
            best_d = d;
            best = Some(c);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub attributes: Attributes,
    pub pixels: usize,
    /// Pixel bounding box, inclusive-exclusive.
    pub bbox: (usize, usize, usize, usize),
}

/// Per-pixel component ids (`u32::MAX` for background) and the components.
pub struct Segmentation {
    pub width: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

const MIN_COMPONENT_PIXELS: usize = 6;

/// Segment an image into same-color 4-connected components and name each one.
pub fn segment(img: &Image) -> Segmentation {
    let (w, h) = (img.width(), img.height());
    let colors: Vec<Option<Color>> =
        (0..w * h).map(|i| classify_pixel(img.get(i % w, i / w))).collect();
    let mut labels = vec![u32::MAX; w * h];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let Some(color) = colors[start] else { continue };
        if labels[start] != u32::MAX {
            continue;
        }
        let id = components.len() as u32;
        let mut members = Vec::new();
        labels[start] = id;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(p) = stack.pop() {
            members.push(p);
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if labels[q] == u32::MAX && colors[q] == Some(color) {
                    labels[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if members.len() < MIN_COMPONENT_PIXELS {
            for p in members {
                labels[p] = u32::MAX - 1;
            }
            // Keep ids dense: the slot is never pushed.
            continue;
        }
        let fill = members.len() as f64 / ((x1 - x0) * (y1 - y0)) as f64;
        components.push(Component {
            attributes: Attributes { color, shape: ShapeKind::from_fill_ratio(fill) },
            pixels: members.len(),
            bbox: (x0, y0, x1, y1),
        });
    }
    for l in &mut labels {
        if *l == u32::MAX - 1 {
            *l = u32::MAX;
        }
    }
    Segmentation { width: w, labels, components }
}
