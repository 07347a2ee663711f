//! Addressable k-ary min-heap of links keyed by destination node.
//!
//! Each entry is the best known link into its destination. Ordering is by
//! weight, then by destination key, so pops are deterministic on ties.

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("heap already holds an entry for this destination")]
    DuplicateKey,
    #[error("pop from an empty heap")]
    Empty,
    #[error("no entry for this destination")]
    MissingKey,
    #[error("decrease-key requires a strictly smaller weight")]
    NotDecreasing,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeapEntry<K, W> {
    pub src: K,
    pub dst: K,
    pub weight: W,
}

impl<K, W> HeapEntry<K, W> {
    pub fn new(src: K, dst: K, weight: W) -> Self {
        HeapEntry { src, dst, weight }
    }
}

/// Arity used for a graph of `node_count` nodes and `link_count` links:
/// `max(2, floor(links / nodes))`.
pub fn arity_for(node_count: usize, link_count: usize) -> usize {
    (link_count / node_count.max(1)).max(2)
}

#[derive(Clone, Debug)]
pub struct KHeap<K, W> {
    arity: usize,
    entries: Vec<HeapEntry<K, W>>,
    position: HashMap<K, usize>,
}

impl<K, W> KHeap<K, W>
where
    K: Ord + Hash + Clone,
    W: Ord,
{
    /// A heap sized for a graph with the given node and link counts.
    pub fn new(node_count: usize, link_count: usize) -> Self {
        Self::with_arity(arity_for(node_count, link_count))
    }

    pub fn with_arity(arity: usize) -> Self {
        assert!(arity >= 2, "heap arity must be at least 2");
        KHeap {
            arity,
            entries: Vec::new(),
            position: HashMap::new(),
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, dst: &K) -> bool {
        self.position.contains_key(dst)
    }

    pub fn get(&self, dst: &K) -> Option<&HeapEntry<K, W>> {
        self.position.get(dst).map(|&i| &self.entries[i])
    }

    pub fn peek(&self) -> Option<&HeapEntry<K, W>> {
        self.entries.first()
    }

    pub fn push(&mut self, entry: HeapEntry<K, W>) -> Result<(), HeapError> {
        if self.position.contains_key(&entry.dst) {
            return Err(HeapError::DuplicateKey);
        }
        let i = self.entries.len();
        self.position.insert(entry.dst.clone(), i);
        self.entries.push(entry);
        self.sift_up(i);
        self.debug_check();
        Ok(())
    }

    pub fn pop_min(&mut self) -> Result<HeapEntry<K, W>, HeapError> {
        if self.entries.is_empty() {
            return Err(HeapError::Empty);
        }
        let last = self.entries.len() - 1;
        self.swap(0, last);
        let min = self.entries.pop().expect("non-empty");
        self.position.remove(&min.dst);
        if !self.entries.is_empty() {
            self.sift_down(0);
        }
        self.debug_check();
        Ok(min)
    }

    /// Replaces the entry for `new.dst` with `new`, which may come from a
    /// different source, and restores heap order.
    pub fn decrease_key(&mut self, new: HeapEntry<K, W>) -> Result<(), HeapError> {
        let i = *self.position.get(&new.dst).ok_or(HeapError::MissingKey)?;
        if new.weight >= self.entries[i].weight {
            return Err(HeapError::NotDecreasing);
        }
        self.entries[i] = new;
        self.sift_up(i);
        self.debug_check();
        Ok(())
    }

    fn less(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.entries[a], &self.entries[b]);
        (&x.weight, &x.dst) < (&y.weight, &y.dst)
    }

    fn swap(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        self.entries.swap(a, b);
        *self.position.get_mut(&self.entries[a].dst).expect("indexed") = a;
        *self.position.get_mut(&self.entries[b].dst).expect("indexed") = b;
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / self.arity;
            if !self.less(i, parent) {
                break;
            }
            self.swap(i, parent);
            i = parent;
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.entries.len();
        loop {
            let first = i * self.arity + 1;
            if first >= n {
                break;
            }
            let last = (first + self.arity).min(n);
            let mut best = first;
            for c in first + 1..last {
                if self.less(c, best) {
                    best = c;
                }
            }
            if !self.less(best, i) {
                break;
            }
            self.swap(i, best);
            i = best;
        }
    }

    #[inline]
    fn debug_check(&self) {
        #[cfg(test)]
        self.check_invariants().expect("heap invariant");
    }

    /// Full scan of heap order and the position index.
    pub fn check_invariants(&self) -> Result<(), String> {
        for i in 1..self.entries.len() {
            let parent = (i - 1) / self.arity;
            if self.less(i, parent) {
                return Err(format!("slot {i} orders before its parent {parent}"));
            }
        }
        if self.position.len() != self.entries.len() {
            return Err("position index size mismatch".into());
        }
        for (i, e) in self.entries.iter().enumerate() {
            if self.position.get(&e.dst) != Some(&i) {
                return Err(format!("position index disagrees at slot {i}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Weight;
    use proptest::prelude::*;

    fn e(dst: u32, w: u64) -> HeapEntry<u32, u64> {
        HeapEntry::new(0, dst, w)
    }

    fn drain<K: Ord + Hash + Clone, W: Ord>(h: &mut KHeap<K, W>) -> Vec<HeapEntry<K, W>> {
        std::iter::from_fn(|| h.pop_min().ok()).collect()
    }

    #[test]
    fn arity_rule() {
        assert_eq!(arity_for(4, 8), 2);
        assert_eq!(arity_for(5, 20), 4);
        assert_eq!(arity_for(5, 3), 2);
        assert_eq!(KHeap::<u32, u64>::new(5, 20).arity(), 4);
    }

    #[test]
    fn pops_in_weight_order() {
        let mut h = KHeap::with_arity(2);
        for (d, w) in [(1, 3), (2, 1), (3, 2)] {
            h.push(e(d, w)).unwrap();
        }
        let order: Vec<u64> = drain(&mut h).iter().map(|x| x.weight).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn infinite_pops_last() {
        let mut h: KHeap<u32, Weight<f64>> = KHeap::with_arity(3);
        h.push(HeapEntry::new(0, 1, Weight::Infinite)).unwrap();
        h.push(HeapEntry::new(0, 2, Weight::Finite(7.0))).unwrap();
        h.push(HeapEntry::new(0, 3, Weight::Finite(0.5))).unwrap();
        let dsts: Vec<u32> = drain(&mut h).iter().map(|x| x.dst).collect();
        assert_eq!(dsts, vec![3, 2, 1]);
    }

    #[test]
    fn single_entry_and_empty() {
        let mut h = KHeap::with_arity(2);
        h.push(e(9, 4)).unwrap();
        assert_eq!(h.pop_min().unwrap(), e(9, 4));
        assert!(h.is_empty());
        assert_eq!(h.pop_min(), Err(HeapError::Empty));
    }

    #[test]
    fn duplicate_push_rejected() {
        let mut h = KHeap::with_arity(2);
        h.push(e(1, 4)).unwrap();
        assert_eq!(h.push(e(1, 2)), Err(HeapError::DuplicateKey));
    }

    #[test]
    fn ties_break_by_destination() {
        let mut h = KHeap::with_arity(4);
        for d in [5, 3, 9, 1] {
            h.push(e(d, 7)).unwrap();
        }
        let dsts: Vec<u32> = drain(&mut h).iter().map(|x| x.dst).collect();
        assert_eq!(dsts, vec![1, 3, 5, 9]);
    }

    #[test]
    fn decrease_key_below_other_entries() {
        let mut h = KHeap::with_arity(2);
        h.push(e(1, 1)).unwrap();
        h.push(e(3, 5)).unwrap();
        h.push(e(4, 4)).unwrap();
        h.decrease_key(HeapEntry::new(7, 3, 2)).unwrap();
        assert_eq!(h.get(&3).unwrap().src, 7, "best link replaced");
        let order: Vec<u32> = drain(&mut h).iter().map(|x| x.dst).collect();
        assert_eq!(order, vec![1, 3, 4]);
    }

    #[test]
    fn decrease_key_errors() {
        let mut h = KHeap::with_arity(2);
        h.push(e(3, 5)).unwrap();
        assert_eq!(h.decrease_key(e(3, 5)), Err(HeapError::NotDecreasing));
        assert_eq!(h.decrease_key(e(3, 6)), Err(HeapError::NotDecreasing));
        assert_eq!(h.decrease_key(e(8, 1)), Err(HeapError::MissingKey));
    }

    #[test]
    fn thousand_random_pushes_sorted() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let mut h = KHeap::with_arity(3);
        let mut oracle = Vec::new();
        for d in 0..1000u32 {
            let w = rng.gen_range(0..500u64);
            h.push(e(d, w)).unwrap();
            oracle.push((w, d));
        }
        oracle.sort();
        let got: Vec<(u64, u32)> = drain(&mut h).iter().map(|x| (x.weight, x.dst)).collect();
        assert_eq!(got, oracle);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Push(u8, u16),
        Pop,
        Decrease(u8, u16),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (any::<u8>(), any::<u16>()).prop_map(|(k, w)| Op::Push(k, w)),
            Just(Op::Pop),
            (any::<u8>(), any::<u16>()).prop_map(|(k, w)| Op::Decrease(k, w)),
        ]
    }

    /// Linear-scan priority queue used as the reference.
    #[derive(Default)]
    struct ScanQueue(Vec<(u16, u8)>);

    impl ScanQueue {
        fn find(&self, k: u8) -> Option<usize> {
            self.0.iter().position(|&(_, d)| d == k)
        }

        fn pop(&mut self) -> Option<(u16, u8)> {
            let (i, _) = self.0.iter().enumerate().min_by_key(|(_, x)| **x)?;
            Some(self.0.swap_remove(i))
        }
    }

    proptest! {
        #[test]
        fn matches_scan_oracle(arity in 2usize..6, ops in proptest::collection::vec(op(), 0..300)) {
            let mut h: KHeap<u8, u16> = KHeap::with_arity(arity);
            let mut oracle = ScanQueue::default();
            for op in ops {
                match op {
                    Op::Push(k, w) => {
                        let r = h.push(HeapEntry::new(0, k, w));
                        if oracle.find(k).is_some() {
                            prop_assert_eq!(r, Err(HeapError::DuplicateKey));
                        } else {
                            prop_assert!(r.is_ok());
                            oracle.0.push((w, k));
                        }
                    }
                    Op::Pop => {
                        let got = h.pop_min().ok().map(|x| (x.weight, x.dst));
                        prop_assert_eq!(got, oracle.pop());
                    }
                    Op::Decrease(k, w) => {
                        let r = h.decrease_key(HeapEntry::new(1, k, w));
                        match oracle.find(k) {
                            None => prop_assert_eq!(r, Err(HeapError::MissingKey)),
                            Some(i) if w >= oracle.0[i].0 => prop_assert_eq!(r, Err(HeapError::NotDecreasing)),
                            Some(i) => {
                                prop_assert!(r.is_ok());
                                oracle.0[i].0 = w;
                            }
                        }
                    }
                }
                prop_assert!(h.check_invariants().is_ok());
                prop_assert_eq!(h.len(), oracle.0.len());
            }
            let mut rest: Vec<(u16, u8)> = drain(&mut h).iter().map(|x| (x.weight, x.dst)).collect();
            let mut expect = oracle.0.clone();
            expect.sort();
            prop_assert_eq!(&rest, &expect);
            rest.clear();
        }
    }
}
