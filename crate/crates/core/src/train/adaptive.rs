//! Uniform pool plus a bounded priority queue of hard initial states.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::laneworld::{sample_initial, LaneState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueEntry {
    pub id: u64,
    pub state: LaneState,
    pub eta: f64,
}

/// `S0`: a fixed-size pool of initial-distribution states, refilled whenever
/// one is promoted. `SA`: at most `capacity` promoted states, highest eta
/// first. Every state carries an id unique within the set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSet {
    pool: Vec<(u64, LaneState)>,
    queue: Vec<QueueEntry>,
    capacity: usize,
    next_id: u64,
}

impl AdaptiveSet {
    pub fn new(pool_size: usize, capacity: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut set = Self {
            pool: Vec::with_capacity(pool_size),
            queue: Vec::new(),
            capacity,
            next_id: 0,
        };
        for _ in 0..pool_size {
            let fresh = set.fresh(rng);
            set.pool.push(fresh);
        }
        set
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> (u64, LaneState) {
        let id = self.next_id;
        self.next_id += 1;
        (id, sample_initial(rng))
    }

    pub fn pool(&self) -> &[(u64, LaneState)] {
        &self.pool
    }

    /// Queue entries, eta descending.
    pub fn queue(&self) -> &[QueueEntry] {
        &self.queue
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn insert_sorted(&mut self, e: QueueEntry) {
        let at = self.queue.partition_point(|q| q.eta >= e.eta);
        self.queue.insert(at, e);
    }

    fn refresh(&mut self, id: u64, eta: f64) {
        if let Some(i) = self.queue.iter().position(|q| q.id == id) {
            let mut e = self.queue.remove(i);
            e.eta = eta;
            self.insert_sorted(e);
        }
    }

    /// Moves pool element `id` into the queue if there is room or it beats
    /// the current minimum. Returns whether it moved.
    fn promote(&mut self, id: u64, eta: f64, rng: &mut ChaCha8Rng) -> bool {
        let Some(i) = self.pool.iter().position(|(pid, _)| *pid == id) else {
            return false;
        };
        if self.capacity == 0 {
            return false;
        }
        if self.queue.len() >= self.capacity {
            if eta <= self.queue.last().map_or(f64::NEG_INFINITY, |q| q.eta) {
                return false;
            }
            self.queue.pop();
        }
        let (_, state) = self.pool.swap_remove(i);
        self.insert_sorted(QueueEntry { id, state, eta });
        let fresh = self.fresh(rng);
        self.pool.push(fresh);
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchItem {
    pub id: u64,
    pub state: LaneState,
    pub from_queue: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// The pools were too small for the requested split and the whole batch
    /// was drawn uniformly from the pool.
    pub fallback: bool,
}

impl Batch {
    pub fn states(&self) -> Vec<LaneState> {
        self.items.iter().map(|i| i.state).collect()
    }
}

/// `floor(p * l)`, robust to `p * l` landing just under an integer.
fn queue_share(p: f64, l: usize) -> usize {
    ((p * l as f64) + 1e-9).floor() as usize
}

/// Draws `floor(p L)` queue elements by exponential keys `ln(u) / w` with
/// `w = exp(alpha (eta - max eta))` (largest keys win), and the remainder
/// uniformly without replacement from the pool.
pub fn sample_batch(aset: &AdaptiveSet, p: f64, l: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Batch {
    let la = queue_share(p.clamp(0.0, 1.0), l);
    let from_pool = |n: usize, rng: &mut ChaCha8Rng| -> Vec<BatchItem> {
        let n = n.min(aset.pool.len());
        index::sample(rng, aset.pool.len(), n)
            .into_iter()
            .map(|i| BatchItem {
                id: aset.pool[i].0,
                state: aset.pool[i].1,
                from_queue: false,
            })
            .collect()
    };
    if la > aset.queue.len() || l - la > aset.pool.len() {
        log::info!(
            "adaptive set too small for a {la}/{} split (queue {}, pool {}); sampling uniformly",
            l - la,
            aset.queue.len(),
            aset.pool.len()
        );
        return Batch {
            items: from_pool(l, rng),
            fallback: true,
        };
    }
    let mut items = Vec::with_capacity(l);
    if la > 0 {
        let top = aset.queue[0].eta;
        let mut keyed: Vec<(f64, usize)> = aset
            .queue
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let w = (alpha * (e.eta - top)).exp();
                let u: f64 = 1.0 - rng.random::<f64>();
                (u.ln() / w, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        items.extend(keyed[..la].iter().map(|&(_, i)| BatchItem {
            id: aset.queue[i].id,
            state: aset.queue[i].state,
            from_queue: true,
        }));
    }
    items.extend(from_pool(l - la, rng));
    Batch { items, fallback: false }
}

/// Refreshes the eta of queue members in the batch, then offers the top
/// `floor(m_frac |batch|)` batch elements by eta to the queue. Returns the
/// number promoted from the pool.
pub fn update_adaptive_set(
    aset: &mut AdaptiveSet,
    batch: &Batch,
    etas: &[f64],
    m_frac: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    debug_assert_eq!(batch.items.len(), etas.len());
    for (item, &eta) in batch.items.iter().zip(etas) {
        if item.from_queue {
            aset.refresh(item.id, eta);
        }
    }
    let mut order: Vec<usize> = (0..batch.items.len()).collect();
    order.sort_by(|&a, &b| etas[b].total_cmp(&etas[a]).then(a.cmp(&b)));
    let take = queue_share(m_frac, batch.items.len());
    order[..take]
        .iter()
        .filter(|&&i| !batch.items[i].from_queue)
        .filter(|&&i| aset.promote(batch.items[i].id, etas[i], rng))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn single_insertion_from_a_batch_of_ten() {
        let mut rng = stream(1, "aset", 0);
        let mut set = AdaptiveSet::new(50, 20, &mut rng);
        let batch = sample_batch(&set, 0.0, 10, 1.0, &mut rng);
        let etas: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(update_adaptive_set(&mut set, &batch, &etas, 0.1, &mut rng), 1);
        assert_eq!(set.queue().len(), 1);
        assert_eq!(set.queue()[0].id, batch.items[9].id);
        assert_eq!(set.pool().len(), 50);
    }

    #[test]
    fn full_queue_rejects_a_weaker_newcomer() {
        let mut rng = stream(2, "aset", 0);
        let mut set = AdaptiveSet::new(30, 2, &mut rng);
        for eta in [5.0, 6.0] {
            let b = sample_batch(&set, 0.0, 1, 1.0, &mut rng);
            update_adaptive_set(&mut set, &b, &[eta], 1.0, &mut rng);
        }
        let before = set.clone();
        let b = sample_batch(&set, 0.0, 1, 1.0, &mut rng);
        assert_eq!(update_adaptive_set(&mut set, &b, &[4.0], 1.0, &mut rng), 0);
        assert_eq!(set.queue(), before.queue());
        assert_eq!(set.pool(), before.pool());
    }

    #[test]
    fn zero_share_is_all_pool() {
        let mut rng = stream(3, "aset", 0);
        let set = AdaptiveSet::new(40, 10, &mut rng);
        let b = sample_batch(&set, 0.0, 16, 1.0, &mut rng);
        assert!(!b.fallback && b.items.iter().all(|i| !i.from_queue));
    }

    #[test]
    fn short_queue_falls_back() {
        let mut rng = stream(4, "aset", 0);
        let set = AdaptiveSet::new(40, 10, &mut rng);
        let b = sample_batch(&set, 0.5, 16, 1.0, &mut rng);
        assert!(b.fallback);
        assert_eq!(b.items.len(), 16);
    }
}
