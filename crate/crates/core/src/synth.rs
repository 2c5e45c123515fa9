//! Procedural garment images: textured closet items and plain outlines on a
//! white background. Used to build desk-scale evaluation corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Dots,
    Checker,
    Noise,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Stripes, Texture::Dots, Texture::Checker, Texture::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Dots => "dots",
            Texture::Checker => "checker",
            Texture::Noise => "noise",
        }
    }
}

impl std::str::FromStr for Texture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Texture::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown texture `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Silhouette {
    Dress,
    Shirt,
    Skirt,
    Tunic,
}

impl Silhouette {
    pub const ALL: [Silhouette; 4] = [Silhouette::Dress, Silhouette::Shirt, Silhouette::Skirt, Silhouette::Tunic];

    /// Outline polygon in unit coordinates (x right, y down).
    fn polygon(self) -> &'static [(f64, f64)] {
        match self {
            Silhouette::Dress => &[
                (0.38, 0.12),
                (0.62, 0.12),
                (0.64, 0.42),
                (0.82, 0.88),
                (0.18, 0.88),
                (0.36, 0.42),
            ],
            Silhouette::Shirt => &[
                (0.35, 0.15),
                (0.65, 0.15),
                (0.88, 0.32),
                (0.80, 0.44),
                (0.68, 0.36),
                (0.68, 0.85),
                (0.32, 0.85),
                (0.32, 0.36),
                (0.20, 0.44),
                (0.12, 0.32),
            ],
            Silhouette::Skirt => &[(0.32, 0.20), (0.68, 0.20), (0.86, 0.82), (0.14, 0.82)],
            Silhouette::Tunic => &[
                (0.34, 0.12),
                (0.66, 0.12),
                (0.74, 0.30),
                (0.70, 0.86),
                (0.30, 0.86),
                (0.26, 0.30),
            ],
        }
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut odd = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            odd = !odd;
        }
        j = i;
    }
    odd
}

/// Rasterized outline of `shape`, jittered by `rng`, sampled at pixel centers.
pub fn silhouette_mask(shape: Silhouette, size: u32, rng: &mut impl Rng) -> Mask {
    let sx = rng.random_range(1.08..1.18);
    let sy = rng.random_range(1.08..1.18);
    let dx = rng.random_range(-0.02..0.02);
    let dy = rng.random_range(-0.02..0.02);
    let poly: Vec<(f64, f64)> = shape
        .polygon()
        .iter()
        .map(|&(x, y)| (0.5 + (x - 0.5) * sx + dx, 0.5 + (y - 0.5) * sy + dy))
        .collect();
    let s = size as f64;
    let data = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            inside(&poly, (x as f64 + 0.5) / s, (y as f64 + 0.5) / s)
        })
        .collect();
    Mask::new(size, size, data).expect("square mask")
}

fn color(rng: &mut impl Rng) -> [u8; 3] {
    [
        rng.random_range(20..=220),
        rng.random_range(20..=220),
        rng.random_range(20..=220),
    ]
}

fn tinted(level: i32, rng: &mut impl Rng) -> [u8; 3] {
    [0, 1, 2].map(|_| (level + rng.random_range(-12..=12)) as u8)
}

/// A dark and a light tone with a slight random tint, drawn independently of
/// the texture kind.
fn contrasting_pair(rng: &mut impl Rng) -> ([u8; 3], [u8; 3]) {
    let dark = rng.random_range(30..=75);
    let light = rng.random_range(170..=215);
    (tinted(light, rng), tinted(dark, rng))
}

/// A `width`×`height` texture swatch. No pixel is near-white.
pub fn texture(kind: Texture, width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
    let (a, b) = contrasting_pair(rng);
    match kind {
        Texture::Stripes => {
            let period = rng.random_range(6..=10) as f64;
            let angle = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_4 };
            let (s, c) = angle.sin_cos();
            RgbImage::from_fn(width, height, |x, y| {
                let u = x as f64 * s + y as f64 * c;
                image::Rgb(if (u / period).rem_euclid(1.0) < 0.5 { a } else { b })
            })
        }
        Texture::Dots => {
            let cell = rng.random_range(8..=12) as f64;
            let radius = cell * rng.random_range(0.22..0.32);
            RgbImage::from_fn(width, height, |x, y| {
                let fx = (x as f64 + 0.5).rem_euclid(cell) - cell / 2.0;
                let fy = (y as f64 + 0.5).rem_euclid(cell) - cell / 2.0;
                image::Rgb(if fx * fx + fy * fy <= radius * radius { b } else { a })
            })
        }
        Texture::Checker => {
            let cell = rng.random_range(4..=7);
            RgbImage::from_fn(width, height, |x, y| image::Rgb(if (x / cell + y / cell) % 2 == 0 { a } else { b }))
        }
        Texture::Noise => {
            let mut img = RgbImage::new(width, height);
            for p in img.pixels_mut() {
                let t: f64 = rng.random();
                for ch in 0..3 {
                    let v = a[ch] as f64 + (b[ch] as f64 - a[ch] as f64) * t;
                    p.0[ch] = v.round() as u8;
                }
            }
            img
        }
    }
}

/// Paints `fill` inside `mask` on a white background.
pub fn compose(fill: &RgbImage, mask: &Mask) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        if mask.is_garment(x, y) {
            *fill.get_pixel(x, y)
        } else {
            image::Rgb([255, 255, 255])
        }
    })
}

/// A textured closet item, reproducible from `seed`.
pub fn wardrobe_image(kind: Texture, size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Silhouette::ALL[rng.random_range(0..Silhouette::ALL.len())];
    let mask = silhouette_mask(shape, size, &mut rng);
    let fill = texture(kind, size, size, &mut rng);
    compose(&fill, &mask)
}

/// A plain single-color outline, reproducible from `seed`.
pub fn outline_image(size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Silhouette::ALL[rng.random_range(0..Silhouette::ALL.len())];
    let mask = silhouette_mask(shape, size, &mut rng);
    let c = color(&mut rng);
    compose(&RgbImage::from_pixel(size, size, image::Rgb(c)), &mask)
}
