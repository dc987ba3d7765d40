use super::image::{Image, IMAGE_SIZE};
use super::scene::{Scene, SceneObject, Shape};

/// Pixel (row, col) center in normalised image coordinates.
fn pixel_center(row: usize, col: usize) -> (f64, f64) {
    let n = IMAGE_SIZE as f64;
    ((col as f64 + 0.5) / n, (row as f64 + 0.5) / n)
}

/// Whether the normalised point (u, v) lies inside the object's shape.
pub fn contains(obj: &SceneObject, u: f64, v: f64) -> bool {
    let du = u - obj.center.0;
    let dv = v - obj.center.1;
    let r = obj.radius;
    match obj.shape {
        Shape::Circle => du * du + dv * dv <= r * r,
        Shape::Square => du.abs() <= r && dv.abs() <= r,
        // lower-left half of the bounding box
        Shape::Triangle => du.abs() <= r && dv.abs() <= r && dv >= du,
    }
}

pub fn object_mask(obj: &SceneObject) -> Vec<bool> {
    let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (u, v) = pixel_center(row, col);
            mask[row * IMAGE_SIZE + col] = contains(obj, u, v);
        }
    }
    mask
}

/// Bounding-box fill-ratio band used to read each shape back from a raster.
pub fn shape_band_contains(shape: Shape, fill: f64) -> bool {
    classify_fill(fill) == shape
}

pub fn classify_fill(fill: f64) -> Shape {
    if fill >= 0.90 {
        Shape::Square
    } else if fill >= 0.66 {
        Shape::Circle
    } else {
        Shape::Triangle
    }
}

/// Hard-edged rasterisation: background first, then every object.
pub fn render(scene: &Scene) -> Image {
    let mut img = Image::filled([0.0; 3]);
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let g = scene.background.gray_at(row, col);
            img.set(row, col, [g, g, g]);
        }
    }
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                let (u, v) = pixel_center(row, col);
                if contains(obj, u, v) {
                    img.set(row, col, rgb);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sceneworld::scene::{Background, Color};

    #[test]
    fn empty_plain_light_is_uniform() {
        let img = render(&Scene {
            objects: vec![],
            background: Background::PlainLight,
        });
        assert!(img.pixels().iter().all(|&p| p == 0.9));
    }

    #[test]
    fn background_patterns() {
        let stripes = render(&Scene {
            objects: vec![],
            background: Background::Striped,
        });
        assert_eq!(stripes.get(0, 5), [0.9; 3]);
        assert_eq!(stripes.get(4, 5), [0.6; 3]);
        assert_eq!(stripes.get(8, 31), [0.9; 3]);
        let checker = render(&Scene {
            objects: vec![],
            background: Background::Checker,
        });
        assert_eq!(checker.get(0, 0), [0.9; 3]);
        assert_eq!(checker.get(0, 8), [0.6; 3]);
        assert_eq!(checker.get(8, 8), [0.9; 3]);
        let dark = render(&Scene {
            objects: vec![],
            background: Background::PlainDark,
        });
        assert_eq!(dark.get(17, 3), [0.2; 3]);
    }

    #[test]
    fn centered_red_circle_area() {
        let img = render(&Scene {
            objects: vec![SceneObject {
                shape: Shape::Circle,
                color: Color::Red,
                center: (0.5, 0.5),
                radius: 0.125,
            }],
            background: Background::PlainLight,
        });
        let red = (0..IMAGE_SIZE)
            .flat_map(|r| (0..IMAGE_SIZE).map(move |c| (r, c)))
            .filter(|&(r, c)| img.get(r, c) == [1.0, 0.0, 0.0])
            .count() as f64;
        let analytic = std::f64::consts::PI * (0.125f64 * 32.0).powi(2);
        assert!((red - analytic).abs() <= 6.0, "{red} vs {analytic}");
    }

    #[test]
    fn render_is_bit_deterministic() {
        let s = Scene {
            objects: vec![SceneObject {
                shape: Shape::Triangle,
                color: Color::Yellow,
                center: (0.3, 0.6),
                radius: 0.1,
            }],
            background: Background::Checker,
        };
        assert_eq!(render(&s).to_ppm(), render(&s).to_ppm());
    }
}
