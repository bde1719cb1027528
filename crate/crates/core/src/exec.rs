//! Block execution: data-parallel over rayon when the `parallel` feature is
//! enabled, sequential otherwise. Results are always returned in block order.

/// How independent blocks are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    Sequential,
    /// Dedicated pool with this many worker threads. Without the `parallel`
    /// feature this behaves like [`Executor::Sequential`].
    Parallel {
        threads: usize,
    },
}

impl Executor {
    pub fn with_workers(workers: usize) -> Self {
        if workers <= 1 {
            Executor::Sequential
        } else {
            Executor::Parallel { threads: workers }
        }
    }

    /// Maps `f` over `0..n` and returns the outputs ordered by index.
    pub fn map_blocks<T, F>(&self, n: u64, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u64) -> T + Sync + Send,
    {
        match *self {
            Executor::Sequential => (0..n).map(f).collect(),
            Executor::Parallel { threads } => parallel_map(threads, n, f),
        }
    }
}

impl Default for Executor {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Executor::Parallel {
                threads: rayon::current_num_threads(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Executor::Sequential
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(threads: usize, n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("failed to build worker pool");
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(_threads: usize, n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
