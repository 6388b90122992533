//! Fixed-capacity ring buffer of past blocks' keys and values.

use crate::numerics::{Scalar, Tensor};

/// Types whose storage can be refilled from another value of the same shape
/// without reallocating.
pub trait Overwrite: Clone {
    fn overwrite_from(&mut self, src: &Self);
    fn resident_bytes(&self) -> usize;
}

impl<S: Scalar> Overwrite for Tensor<S> {
    fn overwrite_from(&mut self, src: &Self) {
        self.copy_from(src);
    }

    fn resident_bytes(&self) -> usize {
        self.byte_size()
    }
}

/// Keys and values of one block with the (unrotated) positions they were computed at.
#[derive(Clone, Debug)]
pub struct KvBlock<T> {
    pub keys: T,
    pub values: T,
    pub positions: Vec<i64>,
}

impl<T: Overwrite> Overwrite for KvBlock<T> {
    fn overwrite_from(&mut self, src: &Self) {
        self.keys.overwrite_from(&src.keys);
        self.values.overwrite_from(&src.values);
        self.positions.clear();
        self.positions.extend_from_slice(&src.positions);
    }

    fn resident_bytes(&self) -> usize {
        self.keys.resident_bytes()
            + self.values.resident_bytes()
            + self.positions.capacity() * std::mem::size_of::<i64>()
    }
}

/// Circular store of the most recent `capacity` entries. Read-out order is
/// oldest to newest.
#[derive(Clone, Debug)]
pub struct KvRing<T> {
    slots: Vec<Option<T>>,
    next: usize,
    len: usize,
}

impl<T> KvRing<T> {
    pub fn new(capacity: usize) -> Self {
        let mut slots = Vec::with_capacity(capacity);
        slots.resize_with(capacity, || None);
        Self { slots, next: 0, len: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Inserts `item`, returning the evicted oldest entry when full. With zero
    /// capacity the item is dropped immediately.
    pub fn push(&mut self, item: T) -> Option<T> {
        if self.slots.is_empty() {
            return Some(item);
        }
        let evicted = self.slots[self.next].replace(item);
        self.advance();
        evicted
    }

    fn advance(&mut self) {
        self.next = (self.next + 1) % self.slots.len();
        self.len = (self.len + 1).min(self.slots.len());
    }

    /// Oldest-to-newest iteration.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let cap = self.slots.len();
        let start = if cap == 0 { 0 } else { (self.next + cap - self.len) % cap };
        (0..self.len).filter_map(move |i| self.slots[(start + i) % cap].as_ref())
    }

    pub fn newest(&self) -> Option<&T> {
        self.iter().last()
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
        self.next = 0;
        self.len = 0;
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> KvRing<U> {
        KvRing {
            slots: self.slots.iter().map(|s| s.as_ref().map(&mut f)).collect(),
            next: self.next,
            len: self.len,
        }
    }
}

impl<T: Overwrite> KvRing<T> {
    /// Like [`KvRing::push`] but copies into the evicted slot's storage, so a
    /// full ring never allocates.
    pub fn push_copy(&mut self, src: &T) {
        if self.slots.is_empty() {
            return;
        }
        match &mut self.slots[self.next] {
            Some(slot) => slot.overwrite_from(src),
            empty => *empty = Some(src.clone()),
        }
        self.advance();
    }

    pub fn resident_bytes(&self) -> usize {
        self.slots.iter().flatten().map(Overwrite::resident_bytes).sum::<usize>()
            + self.slots.capacity() * std::mem::size_of::<Option<T>>()
    }
}

impl<S: Scalar> KvRing<KvBlock<Tensor<S>>> {
    /// Pushes one block of keys, values and positions.
    pub fn push_block(&mut self, keys: &Tensor<S>, values: &Tensor<S>, positions: &[i64]) {
        if self.slots.is_empty() {
            return;
        }
        match &mut self.slots[self.next] {
            Some(slot) => {
                slot.keys.copy_from(keys);
                slot.values.copy_from(values);
                slot.positions.clear();
                slot.positions.extend_from_slice(positions);
            }
            empty => {
                *empty = Some(KvBlock { keys: keys.clone(), values: values.clone(), positions: positions.to_vec() })
            }
        }
        self.advance();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_of_capacity_two() {
        let mut ring = KvRing::new(2);
        for x in ['A', 'B', 'C'] {
            ring.push(x);
        }
        assert_eq!(ring.iter().copied().collect::<Vec<_>>(), vec!['B', 'C']);
    }

    #[test]
    fn zero_capacity_holds_nothing() {
        let mut ring = KvRing::new(0);
        assert_eq!(ring.push(1), Some(1));
        assert_eq!(ring.iter().count(), 0);
    }

    #[test]
    fn partial_fill_in_age_order() {
        let mut ring = KvRing::new(3);
        ring.push(1);
        ring.push(2);
        assert_eq!(ring.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(ring.newest(), Some(&2));
    }

    #[test]
    fn resident_bytes_constant_once_full() {
        let mut ring = KvRing::new(3);
        let k = Tensor::<f32>::zeros(&[4, 8]);
        let mut sizes = Vec::new();
        for t in 0..1000 {
            ring.push_block(&k, &k, &[t, t + 1, t + 2, t + 3]);
            sizes.push(ring.resident_bytes());
        }
        assert!(sizes[2..].iter().all(|&s| s == sizes[2]));
        assert!(sizes[0] < sizes[2]);
    }
}
