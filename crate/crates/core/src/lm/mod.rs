//! Transformer language model, next-token distributions and checkpoints.

mod checkpoint;
mod distribution;
mod model;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use distribution::{apply_floor, temperature_scale, Distribution, SUM_TOL};
pub use model::{LmConfig, LmModel, TapeParams};

use crate::error::Result;

/// Anything that yields a next-token distribution for a prefix: trained
/// models, exact Markov tables, floored wrappers.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, prefix: &[u32]) -> Result<Distribution>;

    fn greedy(&self, prefix: &[u32]) -> Result<u32> {
        Ok(self.next_distribution(prefix)?.argmax() as u32)
    }

    /// Distributions after every prefix of `x`, from the empty one up to `x`
    /// itself (`x.len() + 1` entries).
    fn path_distributions(&self, x: &[u32]) -> Result<Vec<Distribution>> {
        (0..=x.len()).map(|d| self.next_distribution(&x[..d])).collect()
    }
}

impl NextTokenModel for LmModel {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn next_distribution(&self, prefix: &[u32]) -> Result<Distribution> {
        LmModel::next_distribution(self, prefix)
    }

    fn path_distributions(&self, x: &[u32]) -> Result<Vec<Distribution>> {
        let mut padded = x.to_vec();
        padded.push(0);
        let lp = self.forward_log_probs(&padded)?;
        (0..=x.len()).map(|t| Distribution::from_log_probs(lp.row(t))).collect()
    }
}

impl<M: NextTokenModel + ?Sized> NextTokenModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, prefix: &[u32]) -> Result<Distribution> {
        (**self).next_distribution(prefix)
    }

    fn path_distributions(&self, x: &[u32]) -> Result<Vec<Distribution>> {
        (**self).path_distributions(x)
    }
}

/// Wraps a model so every emitted distribution carries a uniform floor.
#[derive(Debug, Clone)]
pub struct Floored<M> {
    pub inner: M,
    pub eps: f64,
}

impl<M: NextTokenModel> NextTokenModel for Floored<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_distribution(&self, prefix: &[u32]) -> Result<Distribution> {
        apply_floor(&self.inner.next_distribution(prefix)?, self.eps)
    }

    fn path_distributions(&self, x: &[u32]) -> Result<Vec<Distribution>> {
        self.inner.path_distributions(x)?.iter().map(|d| apply_floor(d, self.eps)).collect()
    }
}
