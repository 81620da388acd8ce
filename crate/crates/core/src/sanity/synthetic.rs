//! Bundled synthetic 10-class image set: one Gaussian blob per image whose
//! position and channel depend on the class, with jitter and pixel noise.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_SHAPE: [usize; 3] = [3, 8, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub classes: usize,
    pub train: Vec<(Tensor, usize)>,
    pub test: Vec<(Tensor, usize)>,
}

fn class_center(class: usize) -> (f64, f64, usize) {
    let angle = std::f64::consts::TAU * class as f64 / SYNTHETIC_CLASSES as f64;
    (3.5 + 2.5 * angle.sin(), 3.5 + 2.5 * angle.cos(), class % 3)
}

fn sample(class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let [c, h, w] = SYNTHETIC_SHAPE;
    let (cy, cx, ch) = class_center(class);
    let cy = cy + rng.gen_range(-0.5..0.5);
    let cx = cx + rng.gen_range(-0.5..0.5);
    let noise = Normal::new(0.0, 0.15).expect("finite std");
    let mut data = vec![0.0; c * h * w];
    for (i, v) in data.iter_mut().enumerate() {
        let plane = i / (h * w);
        let y = ((i / w) % h) as f64;
        let x = (i % w) as f64;
        let blob = if plane == ch {
            (-((y - cy).powi(2) + (x - cx).powi(2)) / 2.0).exp()
        } else {
            0.0
        };
        *v = blob + noise.sample(rng);
    }
    Tensor::new(SYNTHETIC_SHAPE.to_vec(), data).expect("shape matches")
}

/// Class-balanced train and test splits (labels cycle through the classes).
pub fn synthetic_dataset(n_train: usize, n_test: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<(Tensor, usize)> {
        (0..n)
            .map(|i| {
                let label = i % SYNTHETIC_CLASSES;
                (sample(label, &mut rng), label)
            })
            .collect()
    };
    let train = draw(n_train);
    let test = draw(n_test);
    LabeledDataset {
        classes: SYNTHETIC_CLASSES,
        train,
        test,
    }
}
