//! 64-byte aligned buffers and a caching best-fit buffer pool.

use serde::Serialize;

use super::RuntimeError;

/// Allocation granularity; also the alignment of every buffer.
pub const ALIGN: usize = 64;

#[derive(Clone, Copy)]
#[repr(C, align(64))]
struct Line([u8; ALIGN]);

/// Heap buffer whose start is 64-byte aligned.
#[derive(Default)]
pub struct AlignedBuf {
    lines: Vec<Line>,
}

impl std::fmt::Debug for AlignedBuf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlignedBuf").field("capacity", &self.capacity()).finish()
    }
}

macro_rules! view {
    ($name:ident, $name_mut:ident, $t:ty) => {
        /// First `len` elements reinterpreted as the given type.
        pub fn $name(&self, len: usize) -> &[$t] {
            assert!(len * size_of::<$t>() <= self.capacity(), "view exceeds buffer");
            // SAFETY: in bounds, aligned to 64 and every bit pattern is valid.
            unsafe { std::slice::from_raw_parts(self.lines.as_ptr().cast::<$t>(), len) }
        }

        pub fn $name_mut(&mut self, len: usize) -> &mut [$t] {
            assert!(len * size_of::<$t>() <= self.capacity(), "view exceeds buffer");
            // SAFETY: as above, and `&mut self` guarantees exclusivity.
            unsafe { std::slice::from_raw_parts_mut(self.lines.as_mut_ptr().cast::<$t>(), len) }
        }
    };
}

impl AlignedBuf {
    /// Zeroed buffer of at least `bytes` bytes, rounded up to a multiple of 64.
    pub fn new(bytes: usize) -> Self {
        Self { lines: vec![Line([0; ALIGN]); bytes.div_ceil(ALIGN)] }
    }

    pub fn capacity(&self) -> usize {
        self.lines.len() * ALIGN
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.lines.as_ptr().cast()
    }

    view!(bytes, bytes_mut, u8);
    view!(as_i8, as_i8_mut, i8);
    view!(as_i32, as_i32_mut, i32);
    view!(as_f32, as_f32_mut, f32);
}

/// Handle to a pooled buffer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct BufId(usize);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    /// Buffers obtained from the system allocator over the pool's lifetime.
    pub total_system_allocations: usize,
    pub bytes_in_use: usize,
    pub peak_bytes: usize,
    /// Bytes owned by the pool, free or in use.
    pub reserved_bytes: usize,
}

/// Caching allocator: released buffers are kept and handed out again on a
/// best-fit basis. Bookkeeping vectors are reserved ahead so that serving
/// a request from the cache never touches the heap.
#[derive(Debug, Default)]
pub struct BufferPlanner {
    bufs: Vec<AlignedBuf>,
    in_use: Vec<bool>,
    /// `(capacity, id)`, sorted ascending.
    free: Vec<(usize, usize)>,
    stats: PoolStats,
}

impl BufferPlanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Smallest cached buffer holding `bytes`, or a fresh allocation.
    pub fn acquire(&mut self, bytes: usize) -> BufId {
        let need = bytes.max(1).div_ceil(ALIGN) * ALIGN;
        let pos = self.free.partition_point(|&(cap, _)| cap < need);
        let id = if pos < self.free.len() {
            self.free.remove(pos).1
        } else {
            self.bufs.push(AlignedBuf::new(need));
            self.in_use.push(false);
            self.free.reserve(self.bufs.len() - self.free.len());
            self.stats.total_system_allocations += 1;
            self.stats.reserved_bytes += need;
            self.bufs.len() - 1
        };
        self.in_use[id] = true;
        self.stats.bytes_in_use += self.bufs[id].capacity();
        self.stats.peak_bytes = self.stats.peak_bytes.max(self.stats.bytes_in_use);
        BufId(id)
    }

    pub fn release(&mut self, id: BufId) -> Result<(), RuntimeError> {
        match self.in_use.get(id.0) {
            Some(true) => {}
            Some(false) => return Err(RuntimeError::DoubleRelease(id.0)),
            None => return Err(RuntimeError::UnknownBuffer(id.0)),
        }
        let cap = self.bufs[id.0].capacity();
        self.in_use[id.0] = false;
        self.stats.bytes_in_use -= cap;
        let pos = self.free.partition_point(|&e| e < (cap, id.0));
        self.free.insert(pos, (cap, id.0));
        Ok(())
    }

    pub fn get(&self, id: BufId) -> &AlignedBuf {
        debug_assert!(self.in_use[id.0]);
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: BufId) -> &mut AlignedBuf {
        debug_assert!(self.in_use[id.0]);
        &mut self.bufs[id.0]
    }

    /// Move a buffer out so it can be written while others are read; the
    /// slot holds an empty placeholder until [`restore`](Self::restore).
    pub fn take(&mut self, id: BufId) -> AlignedBuf {
        std::mem::take(&mut self.bufs[id.0])
    }

    pub fn restore(&mut self, id: BufId, buf: AlignedBuf) {
        debug_assert_eq!(self.bufs[id.0].capacity(), 0);
        self.bufs[id.0] = buf;
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn buffers_are_aligned_and_reused() {
        let mut p = BufferPlanner::new();
        let a = p.acquire(100);
        assert_eq!(p.get(a).as_ptr() as usize % ALIGN, 0);
        assert_eq!(p.get(a).capacity(), 128);
        p.release(a).unwrap();
        let b = p.acquire(70);
        assert_eq!(a, b);
        assert_eq!(p.stats().total_system_allocations, 1);
        assert!(matches!(p.release(BufId(9)), Err(RuntimeError::UnknownBuffer(9))));
        p.release(b).unwrap();
        assert!(matches!(p.release(b), Err(RuntimeError::DoubleRelease(_))));
    }

    #[test]
    fn best_fit_prefers_smallest() {
        let mut p = BufferPlanner::new();
        let ids: Vec<_> = [1000, 200, 600].iter().map(|&b| p.acquire(b)).collect();
        ids.iter().for_each(|&i| p.release(i).unwrap());
        let got = p.acquire(300);
        assert_eq!(p.get(got).capacity(), 640);
    }

    #[test]
    fn typed_views_share_storage() {
        let mut b = AlignedBuf::new(16);
        b.as_f32_mut(2).copy_from_slice(&[1.0, -2.0]);
        assert_eq!(b.as_i32(2)[0], 1.0f32.to_bits() as i32);
        assert_eq!(b.bytes(8).len(), 8);
    }

    proptest! {
        #[test]
        fn replaying_requests_allocates_nothing(sizes in proptest::collection::vec(1usize..5000, 1..20)) {
            let mut p = BufferPlanner::new();
            for round in 0..3 {
                let before = p.stats().total_system_allocations;
                let ids: Vec<_> = sizes.iter().map(|&s| p.acquire(s)).collect();
                for (&id, &s) in ids.iter().zip(&sizes) {
                    prop_assert!(p.get(id).capacity() >= s);
                }
                ids.into_iter().for_each(|i| p.release(i).unwrap());
                if round > 0 {
                    prop_assert_eq!(p.stats().total_system_allocations, before);
                }
                prop_assert_eq!(p.stats().bytes_in_use, 0);
            }
        }
    }
}
