//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use drape::imaging;
use drape::nn::Network;
use image::{Rgb, RgbImage};
use drape::style::{self, ContentTarget, StyleObjective, StyleTerm};
use drape::tensor::{Real, Tensor};
use drape::GenerationConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// I.i.d. uniform entries in `[-scale, scale]`.
pub fn random_tensor<T: Real>(shape: [usize; 4], scale: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::from_f64_lossy(rng.random_range(-scale..scale))).collect(),
    )
    .unwrap()
}

/// A random 8-bit RGB image, normalized the way the pipeline feeds the network.
pub fn pixel_image<T: Real>(side: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(side as u32, side as u32, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    imaging::normalize(&img).cast::<T>()
}

/// ReLU on/off bits for every conv layer followed by every pooling argmax.
pub fn activation_pattern<T: Real>(network: &Network<T>, x: &Tensor<T>) -> Vec<u8> {
    let taps: Vec<String> = network.topology().conv_layers().map(|l| l.name.clone()).collect();
    let trace = network.forward(x, &taps).unwrap();
    let mut bits: Vec<u8> = taps
        .iter()
        .flat_map(|t| trace.activation(t).unwrap().data().iter().map(|v| u8::from(v.as_f64() > 0.0)))
        .collect();
    for map in trace.argmax_maps() {
        bits.extend_from_slice(map.positions());
    }
    bits
}

/// Coordinates where `x - h`, `x` and `x + h` do not share one activation pattern.
pub fn kink_coordinates<T: Real>(network: &Network<T>, x: &Tensor<T>, h: f64) -> Vec<bool> {
    let base = activation_pattern(network, x);
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            let mut crossed = false;
            for step in [h, -h] {
                probe.data_mut()[i] = T::from_f64_lossy(orig.as_f64() + step);
                crossed |= activation_pattern(network, &probe) != base;
            }
            probe.data_mut()[i] = orig;
            crossed
        })
        .collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences<T: Real>(f: impl Fn(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::from_f64_lossy(orig.as_f64() + h);
            let up = f(&probe);
            probe.data_mut()[i] = T::from_f64_lossy(orig.as_f64() - h);
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            // Divide by the step actually taken after rounding to T.
            let step = T::from_f64_lossy(orig.as_f64() + h).as_f64() - T::from_f64_lossy(orig.as_f64() - h).as_f64();
            (up - down) / step
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `G[i][j] = Σ_k F[i,k] F[j,k]` by nested loops in f64.
pub fn brute_gram(f: &Tensor<f32>) -> Vec<Vec<f64>> {
    let [_, n, h, w] = f.shape();
    let mut g = vec![vec![0.0; n]; n];
    for (i, row) in g.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    *cell += f.at(0, i, y, x) as f64 * f.at(0, j, y, x) as f64;
                }
            }
        }
    }
    g
}

pub fn brute_layer_loss(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let [_, n, h, w] = a.shape();
    let m = (h * w) as f64;
    let (ga, gb) = (brute_gram(a), brute_gram(b));
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            sq += (ga[i][j] - gb[i][j]).powi(2);
        }
    }
    sq / (4.0 * (n as f64).powi(2) * m * m)
}

/// Per-coordinate relative errors, with `floor · max|numeric|` as the
/// denominator floor so near-zero coordinates are judged on the gradient's scale.
pub fn scaled_errors(analytic: &[f64], numeric: &[f64], floor: f64) -> Vec<f64> {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())) * floor;
    analytic.iter().zip(numeric).map(|(a, n)| relative_error(*a, *n, scale)).collect()
}

/// A small total-loss problem on TinyVGG: content from one random image,
/// one or more style targets from others.
pub struct Problem<T: Real> {
    pub network: Network<T>,
    pub config: GenerationConfig,
    pub content: ContentTarget<T>,
    pub styles: StyleObjective<T>,
}

impl<T: Real> Problem<T> {
    /// Targets built from unit-amplitude random tensors.
    pub fn tiny(seed: u64, side: usize, content_layer: &str, style_layers: &[&str], style_count: usize) -> Self {
        let shape = [1, 3, side, side];
        Self::with_images(seed, content_layer, style_layers, style_count, |s| random_tensor::<T>(shape, 1.0, s))
    }

    /// Targets built from random 8-bit images.
    pub fn pixels(seed: u64, side: usize, content_layer: &str, style_layers: &[&str], style_count: usize) -> Self {
        Self::with_images(seed, content_layer, style_layers, style_count, |s| pixel_image::<T>(side, s))
    }

    fn with_images(
        seed: u64,
        content_layer: &str,
        style_layers: &[&str],
        style_count: usize,
        image: impl Fn(u64) -> Tensor<T>,
    ) -> Self {
        let network = Network::tiny(42).cast::<T>();
        let content_img = image(seed.wrapping_mul(31).wrapping_add(1));
        let content = ContentTarget::from_image(&network, content_layer, &content_img).unwrap();
        let terms = (0..style_count)
            .map(|s| {
                let img = image(seed.wrapping_mul(31).wrapping_add(2 + s as u64));
                let trace = network.forward(&img, style_layers).unwrap();
                let grams = style::gram_set(&trace, style_layers).unwrap();
                StyleTerm::uniform(grams, 0.5 + s as f64)
            })
            .collect();
        let config = GenerationConfig {
            content_layer: content_layer.to_string(),
            style_layers: style_layers.iter().map(|s| s.to_string()).collect(),
            alpha: 1.0,
            beta: 10.0,
            ..GenerationConfig::tiny()
        };
        Problem {
            network,
            config,
            content,
            styles: StyleObjective::new(terms).unwrap(),
        }
    }

    pub fn loss(&self, x: &Tensor<T>) -> f64 {
        style::total_loss_and_grad(&self.network, &self.config, &self.content, &self.styles, x)
            .unwrap()
            .0
            .total
    }

    pub fn gradient(&self, x: &Tensor<T>) -> Vec<f64> {
        style::total_loss_and_grad(&self.network, &self.config, &self.content, &self.styles, x)
            .unwrap()
            .1
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }
}
