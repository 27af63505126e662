use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Endless stream of batches over `0..len`, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    len: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub fn new(len: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        assert!(
            len > 0 && batch > 0,
            "cursor needs data and a positive batch size"
        );
        let mut c = Self {
            len,
            batch,
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            rng,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Next `batch` indices; an epoch boundary inside a batch continues with the new permutation.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.len {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn each_epoch_is_a_permutation() {
        let mut c = BatchCursor::new(6, 2, rng_for(1, "cursor"));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert_eq!(c.epoch(), 0);
        c.next_batch();
        assert_eq!(c.epoch(), 1);
    }

    #[test]
    fn batches_wrap_and_are_reproducible() {
        let mut a = BatchCursor::new(5, 3, rng_for(2, "cursor"));
        let mut b = a.clone();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        assert_eq!(
            BatchCursor::new(1, 4, rng_for(0, "x")).next_batch(),
            vec![0; 4]
        );
    }
}
