use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::SearchResult;

// Heap entry ordered so the *worst* candidate sits at the top: lower score
// is worse, and among equal scores the larger id is worse.
#[derive(Debug, Clone, Copy)]
struct Entry {
    score: f32,
    id: u64,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded selection of the `k` best (score, id) pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Entry>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, score: f32, id: u64) {
        if self.k == 0 {
            return;
        }
        let entry = Entry { score, id };
        if self.heap.len() < self.k {
            self.heap.push(entry);
        } else if let Some(worst) = self.heap.peek() {
            if entry < *worst {
                self.heap.pop();
                self.heap.push(entry);
            }
        }
    }

    pub fn into_result(self) -> SearchResult {
        let sorted = self.heap.into_sorted_vec();
        SearchResult {
            ids: sorted.iter().map(|e| e.id).collect(),
            scores: sorted.iter().map(|e| e.score).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_best_with_id_tiebreak() {
        let mut top = TopK::new(3);
        for (s, id) in [(0.5, 9), (0.9, 4), (0.5, 2), (0.1, 1), (0.5, 3)] {
            top.push(s, id);
        }
        let r = top.into_result();
        assert_eq!(r.ids, vec![4, 2, 3]);
        assert_eq!(r.scores, vec![0.9, 0.5, 0.5]);
    }
}
