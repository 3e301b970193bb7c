use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Pair;
use super::{load_pair, ImagePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Random access to image pairs.
pub trait PairDataset: Send + Sync {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<ImagePair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    pub pairs: Vec<ImagePair>,
}

impl InMemoryDataset {
    pub fn new(pairs: Vec<ImagePair>) -> Self {
        InMemoryDataset { pairs }
    }

    /// Decodes every pair up front, in parallel.
    pub fn load(pairs: &[Pair], resolution: (usize, usize)) -> Result<Self> {
        use rayon::prelude::*;
        let pairs = pairs
            .par_iter()
            .map(|(r, j)| load_pair(r, j, resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(InMemoryDataset { pairs })
    }
}

impl PairDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        self.pairs
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Internal(format!("pair {index} out of range")))
    }
}

/// Decodes pairs from disk on every access.
#[derive(Clone, Debug)]
pub struct FileDataset {
    pub pairs: Vec<Pair>,
    pub resolution: (usize, usize),
}

impl PairDataset for FileDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        let (r, j) = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Internal(format!("pair {index} out of range")))?;
        load_pair(r, j, self.resolution)
    }
}

/// Seed for the shuffle of a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shuffled indices cut into batches; the last batch may be short.
pub fn batch_order(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked images of one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub raw: Tensor4<f32>,
    pub reference: Tensor4<f32>,
}

impl Batch {
    pub fn assemble(dataset: &dyn PairDataset, indices: &[usize]) -> Result<Self> {
        let pairs = indices.iter().map(|&i| dataset.get(i)).collect::<Result<Vec<_>>>()?;
        let raw: Vec<&Tensor4<f32>> = pairs.iter().map(|p| &p.raw).collect();
        let reference: Vec<&Tensor4<f32>> = pairs.iter().map(|p| &p.reference).collect();
        Ok(Batch {
            indices: indices.to_vec(),
            raw: Tensor4::stack(&raw)?,
            reference: Tensor4::stack(&reference)?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Batches of one epoch, assembled lazily in the seeded order.
pub fn batches(
    dataset: &dyn PairDataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    let order = batch_order(dataset.len(), batch_size, epoch_seed)?;
    Ok(order.into_iter().map(move |idx| Batch::assemble(dataset, &idx)))
}

/// Runs `consume` over batches assembled on a helper thread.
///
/// At most `capacity` finished batches wait in the queue. The order is that
/// of `order`, so results do not depend on thread timing.
pub fn prefetch<R>(
    dataset: &dyn PairDataset,
    order: Vec<Vec<usize>>,
    capacity: usize,
    consume: impl FnOnce(&mut dyn Iterator<Item = Result<Batch>>) -> R,
) -> R {
    let (tx, rx) = sync_channel(capacity.max(1));
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for idx in order {
                let batch = Batch::assemble(dataset, &idx);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        let mut iter = rx.into_iter();
        consume(&mut iter)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn dataset(n: usize) -> InMemoryDataset {
        InMemoryDataset::new(
            (0..n)
                .map(|i| {
                    let v = i as f32 / n as f32;
                    let t = Tensor4::filled(Shape4::new(1, 3, 2, 2), v).unwrap();
                    ImagePair::new(t.clone(), t).unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn five_items_in_batches_of_two() {
        let order = batch_order(5, 2, 7).unwrap();
        assert_eq!(order.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = order.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(order, batch_order(5, 2, 7).unwrap());
        assert!(matches!(batch_order(5, 0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn batch_tensors_stack_their_items() {
        let ds = dataset(5);
        let got: Vec<Batch> = batches(&ds, 2, 1).unwrap().collect::<Result<_>>().unwrap();
        for b in &got {
            assert_eq!(b.raw.shape().batch, b.len());
            assert_eq!(b.reference.shape().batch, b.len());
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.raw.frame(k), ds.pairs[i].raw.frame(0));
            }
        }
    }

    #[test]
    fn prefetch_preserves_order() {
        let ds = dataset(9);
        let order = batch_order(9, 2, 3).unwrap();
        let seen: Vec<Vec<usize>> = prefetch(&ds, order.clone(), 1, |it| it.map(|b| b.unwrap().indices).collect());
        assert_eq!(seen, order);
        // The consumer may stop early without blocking the producer forever.
        let first = prefetch(&ds, order.clone(), 1, |it| it.next().unwrap().unwrap().indices);
        assert_eq!(first, order[0]);
    }

    #[test]
    fn out_of_range_access_is_an_error() {
        assert!(dataset(1).get(3).is_err());
    }
}
