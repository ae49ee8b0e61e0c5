//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! rayon's pool; without it everything runs on the calling thread. Results
//! are always returned in index order, so output never depends on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether work actually runs on several threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Evaluates `f(0..n)` and collects the results in order.
pub fn map_indexed<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], exec: Exec, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    map_indexed(items.len(), exec, |i| f(&items[i]))
}

/// Runs `f` inside a pool of `workers` threads (or inline without the
/// `parallel` feature, or when `workers` is 0).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if workers > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(f);
        }
    }
    let _ = workers;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = map_indexed(100, Exec::Sequential, |i| i * i);
        let par = map_indexed(100, Exec::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(with_workers(2, || map_slice(&[1, 2, 3], Exec::Parallel, |x| x + 1)), vec![2, 3, 4]);
    }
}
