use rand::Rng;

use crate::consistency::Segment;
use crate::error::{invalid, Result};

/// Fixed-capacity ring of segments with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Segment>,
    /// Slot the next push overwrites once full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, seg: Segment) {
        if self.items.len() < self.capacity {
            self.items.push(seg);
        } else {
            self.items[self.head] = seg;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn extend(&mut self, segs: impl IntoIterator<Item = Segment>) {
        for s in segs {
            self.push(s);
        }
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(invalid("cannot sample from an empty replay buffer"));
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Segment>> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn get(&self, i: usize) -> Option<&Segment> {
        self.items.get(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::Snapshot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn seg(r: f64) -> Segment {
        let s = Arc::new(Snapshot::uniform(vec![1.0]));
        Segment {
            states: vec![s.clone(), s],
            actions: vec![vec![0]],
            rewards: vec![vec![r]],
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(seg(i as f64));
        }
        assert_eq!(b.len(), 3);
        let mut rs: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().rewards[0][0]).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
        assert!(ReplayBuffer::new(2).unwrap().sample(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let cells = 50;
        let mut b = ReplayBuffer::new(cells).unwrap();
        for i in 0..cells {
            b.push(seg(i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut counts = vec![0usize; cells];
        for i in b.sample_indices(draws, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let expect = draws as f64 / cells as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 0.99 quantile of chi-square with 49 degrees of freedom
        assert!(chi2 < 74.92, "chi2 = {chi2}");
    }
}
