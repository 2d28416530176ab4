//! Shuffled minibatches and source/target pairing.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::DomainDataset;

/// One minibatch drawn from a single domain.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub x: Tensor<S>,
    pub class_labels: Option<Vec<usize>>,
    pub domain_label: usize,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_indices(ds: &DomainDataset, idx: &[usize]) -> Self {
        Batch {
            x: ds.features.gather_rows(idx).cast(),
            class_labels: ds.class_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            domain_label: ds.domain_label,
        }
    }
}

fn permutation(n: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[stream, epoch]));
    idx
}

/// Splits a shuffled `0..n` into consecutive batches; the last one may be
/// short.
pub fn batch_indices(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("cannot batch an empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(permutation(n, seed, 0, epoch)
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn batch_iter<S: Scalar>(
    ds: &DomainDataset,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch<S>> + '_> {
    let groups = batch_indices(ds.len(), batch, seed, epoch)?;
    Ok(groups.into_iter().map(move |idx| Batch::from_indices(ds, &idx)))
}

/// Index pairs for one epoch over two domains of sizes `n_s` and `n_t`.
///
/// The larger domain is partitioned exactly once; the smaller one is drawn
/// from successive fresh permutations so every pair has equal length.
pub fn paired_batches(
    n_s: usize,
    n_t: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n_s == 0 || n_t == 0 {
        return Err(Error::Empty("cannot pair batches with an empty domain".into()));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let (long_n, short_n, source_long) = if n_s >= n_t {
        (n_s, n_t, true)
    } else {
        (n_t, n_s, false)
    };
    let long = permutation(long_n, seed, 1, epoch);
    let mut short_stream = Vec::new();
    let mut pass = 0u64;
    while short_stream.len() < long_n {
        short_stream.extend(permutation(
            short_n,
            seed,
            2,
            epoch.wrapping_mul(1 << 20).wrapping_add(pass),
        ));
        pass += 1;
    }
    Ok(long
        .chunks(batch)
        .zip(short_stream.chunks(batch))
        .map(|(l, s)| {
            let s = s[..l.len()].to_vec();
            if source_long {
                (l.to_vec(), s)
            } else {
                (s, l.to_vec())
            }
        })
        .collect())
}
