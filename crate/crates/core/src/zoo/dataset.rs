//! Synthetic two-class bar images: class 0 carries a horizontal bar, class 1 a
//! vertical one, both under additive Gaussian noise.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{NernError, Result};
use crate::rng;
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

pub const IMAGE_SIDE: usize = 8;
pub const NOISE_STD: f32 = 0.3;
pub const TRAIN_SIZE: usize = 2048;
pub const TEST_SIZE: usize = 512;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 1, 8, 8]`
    pub train_x: Tensor<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Tensor<f32>,
    pub test_y: Vec<usize>,
}

fn generate(n: usize, rng: &mut rng::Rng) -> (Tensor<f32>, Vec<usize>) {
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let pixels = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..NUM_CLASSES);
        let pos = rng.gen_range(0..IMAGE_SIDE);
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let on = if label == 0 { y == pos } else { x == pos };
                data.push(if on { 1.0 } else { 0.0 } + noise.sample(rng));
            }
        }
        labels.push(label);
    }
    let x = Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("consistent shape");
    (x, labels)
}

impl Dataset {
    pub fn synthetic_bars(seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0xda7a);
        let (train_x, train_y) = generate(TRAIN_SIZE, &mut rng);
        let (test_x, test_y) = generate(TEST_SIZE, &mut rng);
        Self {
            train_x,
            train_y,
            test_x,
            test_y,
        }
    }

    /// `[C, H, W]` of one input.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.train_x.shape();
        [s[1], s[2], s[3]]
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn train_batch(&self, indices: &[usize]) -> Tensor<f32> {
        gather(&self.train_x, indices)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_tensor_file(&self.train_x, dir.join("train_x.nrt"))?;
        write_tensor_file(&labels_tensor(&self.train_y), dir.join("train_y.nrt"))?;
        write_tensor_file(&self.test_x, dir.join("test_x.nrt"))?;
        write_tensor_file(&labels_tensor(&self.test_y), dir.join("test_y.nrt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ds = Self {
            train_x: read_tensor_file(dir.join("train_x.nrt"))?,
            train_y: labels_from(&read_tensor_file(dir.join("train_y.nrt"))?)?,
            test_x: read_tensor_file(dir.join("test_x.nrt"))?,
            test_y: labels_from(&read_tensor_file(dir.join("test_y.nrt"))?)?,
        };
        if ds.train_x.shape()[0] != ds.train_y.len() || ds.test_x.shape()[0] != ds.test_y.len() {
            return Err(NernError::Codec("dataset inputs and labels disagree in length".into()));
        }
        Ok(ds)
    }
}

/// Rows `indices` of a tensor along its leading axis.
pub fn gather(x: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * x.len() / x.shape()[0]);
    for &i in indices {
        data.extend_from_slice(x.outer(i));
    }
    Tensor::new(shape, data).expect("consistent shape")
}

fn labels_tensor(labels: &[usize]) -> Tensor<f32> {
    Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f32).collect()).expect("non-empty")
}

fn labels_from(t: &Tensor<f32>) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < NUM_CLASSES {
                Ok(v as usize)
            } else {
                Err(NernError::Codec(format!("invalid label {v}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let ds = Dataset::synthetic_bars(1);
        assert_eq!(ds.train_x.shape(), &[2048, 1, 8, 8]);
        assert_eq!(ds.test_x.shape(), &[512, 1, 8, 8]);
        let ones = ds.train_y.iter().filter(|&&y| y == 1).count();
        assert!((900..1150).contains(&ones), "{ones}");
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        assert_eq!(Dataset::synthetic_bars(4), Dataset::synthetic_bars(4));
        assert_ne!(Dataset::synthetic_bars(4).train_x, Dataset::synthetic_bars(5).train_x);
    }

    #[test]
    fn bar_is_visible_in_the_mean() {
        let ds = Dataset::synthetic_bars(2);
        // Row sums of a horizontal-bar image peak at the bar row.
        let mut correct = 0;
        for i in 0..ds.test_y.len() {
            let img = ds.test_x.outer(i);
            let row_max = (0..8).map(|r| img[r * 8..r * 8 + 8].iter().sum::<f32>()).fold(f32::MIN, f32::max);
            let col_max = (0..8).map(|c| (0..8).map(|r| img[r * 8 + c]).sum::<f32>()).fold(f32::MIN, f32::max);
            let guess = usize::from(col_max > row_max);
            correct += usize::from(guess == ds.test_y[i]);
        }
        assert!(correct as f64 / ds.test_y.len() as f64 > 0.95);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic_bars(3);
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
