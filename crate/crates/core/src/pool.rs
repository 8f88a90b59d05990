//! Fixed-size worker pool that partitions a flat output index space into
//! contiguous ranges.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Ranges per worker; more than one smooths out uneven per-item cost.
const RANGES_PER_THREAD: usize = 4;

pub struct WorkerPool {
    pool: rayon::ThreadPool,
    threads: usize,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("threads", &self.threads)
            .finish()
    }
}

/// Hardware parallelism, or 1 when it cannot be queried.
pub fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

impl WorkerPool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Pool("thread count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("vcnn-worker-{i}"))
            .build()
            .map_err(|e| Error::Pool(e.to_string()))?;
        Ok(Self { pool, threads })
    }

    pub fn with_default_threads() -> Result<Self> {
        Self::new(default_threads())
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    fn range_len(&self, items: usize) -> usize {
        let ranges = self.threads * RANGES_PER_THREAD;
        items.div_ceil(ranges).max(1)
    }

    /// Calls `f(first_item, slice)` for disjoint contiguous ranges of `out`,
    /// where each item occupies `item_len` consecutive floats.
    pub(crate) fn for_each_range<F>(&self, out: &mut [f32], item_len: usize, f: F)
    where
        F: Fn(usize, &mut [f32]) + Sync,
    {
        debug_assert_eq!(out.len() % item_len, 0);
        let items = out.len() / item_len;
        if items == 0 {
            return;
        }
        let per_range = self.range_len(items);
        if self.threads == 1 {
            for (r, chunk) in out.chunks_mut(per_range * item_len).enumerate() {
                f(r * per_range, chunk);
            }
            return;
        }
        self.pool.install(|| {
            out.par_chunks_mut(per_range * item_len)
                .enumerate()
                .for_each(|(r, chunk)| f(r * per_range, chunk));
        });
    }

    /// Splits `out` into `groups` equal regions and hands each range task the
    /// matching sub-slice of every region, so item `x` of a task may write
    /// `regions[k][x]` for all `k` without aliasing another task.
    pub(crate) fn for_each_strided_range<F>(&self, out: &mut [f32], groups: usize, f: F)
    where
        F: Fn(usize, &mut [&mut [f32]]) + Sync,
    {
        debug_assert!(groups > 0 && out.len() % groups == 0);
        let region_len = out.len() / groups;
        if region_len == 0 {
            return;
        }
        let per_range = self.range_len(region_len);
        let n_ranges = region_len.div_ceil(per_range);
        let mut tasks: Vec<Vec<&mut [f32]>> = (0..n_ranges)
            .map(|_| Vec::with_capacity(groups))
            .collect();
        for region in out.chunks_mut(region_len) {
            for (task, piece) in tasks.iter_mut().zip(region.chunks_mut(per_range)) {
                task.push(piece);
            }
        }
        if self.threads == 1 {
            for (r, mut task) in tasks.into_iter().enumerate() {
                f(r * per_range, &mut task);
            }
            return;
        }
        self.pool.install(|| {
            tasks
                .into_par_iter()
                .enumerate()
                .for_each(|(r, mut task)| f(r * per_range, &mut task));
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_threads_rejected() {
        assert!(WorkerPool::new(0).is_err());
    }

    #[test]
    fn contiguous_ranges_cover_everything_once() {
        for threads in [1, 3] {
            let pool = WorkerPool::new(threads).unwrap();
            let mut out = vec![0.0f32; 4 * 37];
            pool.for_each_range(&mut out, 4, |first, chunk| {
                for (i, v) in chunk.iter_mut().enumerate() {
                    *v += (first * 4 + i) as f32 + 1.0;
                }
            });
            for (i, v) in out.iter().enumerate() {
                assert_eq!(*v, i as f32 + 1.0);
            }
        }
    }

    #[test]
    fn strided_ranges_cover_every_region_once() {
        let pool = WorkerPool::new(2).unwrap();
        let groups = 3;
        let mut out = vec![0.0f32; groups * 23];
        pool.for_each_strided_range(&mut out, groups, |first, regions| {
            assert_eq!(regions.len(), groups);
            for (k, region) in regions.iter_mut().enumerate() {
                for (i, v) in region.iter_mut().enumerate() {
                    *v += (k * 1000 + first + i) as f32;
                }
            }
        });
        for k in 0..groups {
            for x in 0..23 {
                assert_eq!(out[k * 23 + x], (k * 1000 + x) as f32);
            }
        }
    }
}
