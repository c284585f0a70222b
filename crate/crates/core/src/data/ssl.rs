use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledSample, UnlabeledSample};

/// One self-training step's inputs: `m` labeled references and `m`
/// unlabeled targets.
#[derive(Debug, Clone)]
pub struct SslBatch<'a> {
    pub references: Vec<&'a LabeledSample>,
    pub targets: Vec<&'a UnlabeledSample>,
}

/// One epoch of [`SslBatch`]es. Targets are shuffled once and dealt out in
/// full batches of `m` (the remainder is dropped), so each target appears at
/// most once; references are drawn afresh, without replacement, per batch.
pub struct SslBatches<'a> {
    labeled: &'a [LabeledSample],
    unlabeled: &'a [UnlabeledSample],
    order: Vec<usize>,
    m: usize,
    next: usize,
    rng: ChaCha8Rng,
}

pub fn make_ssl_batches<'a>(
    labeled: &'a [LabeledSample],
    unlabeled: &'a [UnlabeledSample],
    m: usize,
    seed: u64,
) -> Result<SslBatches<'a>, DataError> {
    if m == 0 || m > labeled.len() || m > unlabeled.len() {
        return Err(DataError::BatchTooLarge {
            m,
            labeled: labeled.len(),
            unlabeled: unlabeled.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.shuffle(&mut rng);
    Ok(SslBatches {
        labeled,
        unlabeled,
        order,
        m,
        next: 0,
        rng,
    })
}

impl SslBatches<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.m
    }
}

impl<'a> Iterator for SslBatches<'a> {
    type Item = SslBatch<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let end = self.next + self.m;
        if end > self.order.len() {
            return None;
        }
        let targets = self.order[self.next..end].iter().map(|&k| &self.unlabeled[k]).collect();
        self.next = end;
        let references = index::sample(&mut self.rng, self.labeled.len(), self.m)
            .into_iter()
            .map(|k| &self.labeled[k])
            .collect();
        Some(SslBatch {
            references,
            targets,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.next) / self.m;
        (left, Some(left))
    }
}
