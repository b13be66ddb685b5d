use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockParam, Model, Scalar};
use crate::error::{Error, Result};

/// Low-rank update of a `d_in × d_out` weight: effective weight `W + B·A`
/// with `B: d_in × r` (zero at attach time) and `A: r × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    pub a: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<F> {
        self.b.dot(&self.a)
    }
}

impl<F: Scalar> Model<F> {
    /// Wraps the `targets` matrices of every block with rank-`rank` adapters.
    /// Re-attaching to an already wrapped matrix is an error.
    pub fn attach_lora(&mut self, rank: usize, targets: &[BlockParam], seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::invalid("lora rank must be at least 1"));
        }
        if let Some(p) = targets.iter().find(|p| !p.is_linear()) {
            return Err(Error::invalid(format!("{} is not a weight matrix", p.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for &p in targets {
                if block.lora.contains_key(&p) {
                    return Err(Error::invalid(format!("block.{i}.{} already has an adapter", p.name())));
                }
                let (d, k) = block.get(p).dim();
                if rank >= d.min(k) {
                    return Err(Error::invalid(format!(
                        "lora rank {rank} must be below min({d}, {k}) for {}",
                        p.name()
                    )));
                }
                let bound = 1.0 / (d as f64).sqrt();
                let a = Array2::from_shape_fn((rank, k), |_| F::from(rng.random_range(-bound..bound)).unwrap());
                let b = Array2::zeros((d, rank));
                block.lora.insert(p, LoraAdapter { a, b });
            }
        }
        Ok(())
    }

    /// Folds every adapter into its base matrix and removes it.
    pub fn merge_lora(&mut self) {
        for block in &mut self.blocks {
            let adapters = std::mem::take(&mut block.lora);
            for (p, ad) in adapters {
                *block.get_mut(p) += &ad.delta();
            }
        }
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| !b.lora.is_empty())
    }
}
