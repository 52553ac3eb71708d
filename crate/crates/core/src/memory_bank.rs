//! FIFO queue of past target features used for the weighted contrastive loss.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::losses::PairSplit;
use crate::numerics::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    /// Unit-norm snapshot of the feature when it was enqueued.
    pub feature: Vec<f64>,
    /// One hard pseudo label per group; `None` for clustering noise, which
    /// is never anyone's positive.
    pub labels: Vec<Option<usize>>,
    pub instance_id: usize,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    queue: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            queue: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.queue.iter()
    }

    /// Appends a batch and drops the oldest entries beyond capacity.
    pub fn enqueue_batch(&mut self, entries: Vec<BankEntry>) -> Result<()> {
        if entries.len() > self.capacity {
            return Err(Error::EntryTooLarge {
                batch: entries.len(),
                capacity: self.capacity,
            });
        }
        let overflow = (self.queue.len() + entries.len()).saturating_sub(self.capacity);
        self.queue.drain(..overflow);
        self.queue.extend(entries);
        Ok(())
    }

    /// Similarities from `anchor` to every entry except its own instance,
    /// split by whether the entry shares the anchor's label in `group`.
    pub fn split_pairs(&self, anchor: &[f64], anchor_label: usize, instance_id: usize, group: usize) -> PairSplit {
        let mut split = PairSplit::default();
        for e in &self.queue {
            if e.instance_id == instance_id {
                continue;
            }
            let s = dot(anchor, &e.feature);
            if e.labels[group] == Some(anchor_label) {
                split.pos.push(s);
            } else {
                split.neg.push(s);
            }
        }
        split
    }

    /// Like [`split_pairs`](Self::split_pairs) but also returns the bank rows
    /// behind each similarity, for gradient computation.
    pub(crate) fn split_with_features(
        &self,
        anchor: &[f64],
        anchor_label: usize,
        instance_id: usize,
        group: usize,
    ) -> (PairSplit, Vec<&[f64]>, Vec<&[f64]>) {
        let mut split = PairSplit::default();
        let (mut pf, mut nf) = (Vec::new(), Vec::new());
        for e in &self.queue {
            if e.instance_id == instance_id {
                continue;
            }
            let s = dot(anchor, &e.feature);
            if e.labels[group] == Some(anchor_label) {
                split.pos.push(s);
                pf.push(e.feature.as_slice());
            } else {
                split.neg.push(s);
                nf.push(e.feature.as_slice());
            }
        }
        (split, pf, nf)
    }

    /// Replaces stored labels with fresh ones looked up by instance id.
    pub fn relabel(&mut self, labels_by_instance: &HashMap<usize, Vec<Option<usize>>>) {
        for e in self.queue.iter_mut() {
            if let Some(l) = labels_by_instance.get(&e.instance_id) {
                e.labels.clone_from(l);
            }
        }
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: usize, label: usize, feature: [f64; 2]) -> BankEntry {
        BankEntry {
            feature: feature.to_vec(),
            labels: vec![Some(label)],
            instance_id: id,
        }
    }

    fn ids(bank: &MemoryBank) -> Vec<usize> {
        bank.entries().map(|e| e.instance_id).collect()
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(4);
        bank.enqueue_batch((0..4).map(|i| entry(i, 0, [1.0, 0.0])).collect())
            .unwrap();
        bank.enqueue_batch((4..6).map(|i| entry(i, 0, [1.0, 0.0])).collect())
            .unwrap();
        assert_eq!(ids(&bank), vec![2, 3, 4, 5]);
    }

    #[test]
    fn enqueue_into_empty() {
        let mut bank = MemoryBank::new(10);
        bank.enqueue_batch((0..3).map(|i| entry(i, 0, [1.0, 0.0])).collect())
            .unwrap();
        assert_eq!(ids(&bank), vec![0, 1, 2]);
    }

    #[test]
    fn repeated_small_batches_keep_last_six() {
        let mut bank = MemoryBank::new(6);
        for step in 0..10 {
            bank.enqueue_batch(vec![entry(2 * step, 0, [1.0, 0.0]), entry(2 * step + 1, 0, [1.0, 0.0])])
                .unwrap();
            let hi = 2 * step + 2;
            let lo = hi.saturating_sub(6);
            assert_eq!(ids(&bank), (lo..hi).collect::<Vec<_>>());
        }
    }

    #[test]
    fn oversize_batch_rejected() {
        let mut bank = MemoryBank::new(2);
        let err = bank
            .enqueue_batch((0..3).map(|i| entry(i, 0, [1.0, 0.0])).collect())
            .unwrap_err();
        assert_eq!(err, Error::EntryTooLarge { batch: 3, capacity: 2 });
    }

    #[test]
    fn split_excludes_self() {
        let mut bank = MemoryBank::new(4);
        bank.enqueue_batch(vec![entry(7, 0, [1.0, 0.0])]).unwrap();
        let s = bank.split_pairs(&[1.0, 0.0], 0, 7, 0);
        assert!(s.pos.is_empty() && s.neg.is_empty());
    }

    #[test]
    fn split_identical_positive() {
        let mut bank = MemoryBank::new(4);
        bank.enqueue_batch(vec![entry(1, 3, [0.6, 0.8])]).unwrap();
        let s = bank.split_pairs(&[0.6, 0.8], 3, 0, 0);
        assert!((s.pos[0] - 1.0).abs() < 1e-15);
        assert!(s.neg.is_empty());
    }

    #[test]
    fn split_mixed_bank_brute_force() {
        let feats = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, -0.6]];
        let labels = [1, 2, 1, 0];
        let mut bank = MemoryBank::new(8);
        bank.enqueue_batch((0..4).map(|i| entry(10 + i, labels[i], feats[i])).collect())
            .unwrap();
        let anchor = [0.28, 0.96];
        let s = bank.split_pairs(&anchor, 1, 99, 0);
        let cos =
            |f: &[f64; 2]| (f[0] * anchor[0] + f[1] * anchor[1]) / (f[0].hypot(f[1]) * anchor[0].hypot(anchor[1]));
        assert_eq!(s.pos.len(), 2);
        assert_eq!(s.neg.len(), 2);
        let expect_pos = [cos(&feats[0]), cos(&feats[2])];
        let expect_neg = [cos(&feats[1]), cos(&feats[3])];
        for (a, b) in s.pos.iter().zip(expect_pos).chain(s.neg.iter().zip(expect_neg)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_entries_are_never_positive() {
        let mut bank = MemoryBank::new(4);
        let mut e = entry(1, 0, [1.0, 0.0]);
        e.labels = vec![None];
        bank.enqueue_batch(vec![e]).unwrap();
        let s = bank.split_pairs(&[1.0, 0.0], 0, 0, 0);
        assert!(s.pos.is_empty());
        assert_eq!(s.neg.len(), 1);
    }

    #[test]
    fn relabel_by_instance() {
        let mut bank = MemoryBank::new(4);
        bank.enqueue_batch(vec![entry(1, 0, [1.0, 0.0]), entry(2, 0, [1.0, 0.0])])
            .unwrap();
        bank.relabel(&HashMap::from([(2, vec![Some(5)])]));
        let labels: Vec<Option<usize>> = bank.entries().map(|e| e.labels[0]).collect();
        assert_eq!(labels, vec![Some(0), Some(5)]);
    }
}
