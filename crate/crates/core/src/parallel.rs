//! Ordered fan-out over independent work items.

use std::thread;

/// Worker count from `BITBUDGET_THREADS`, defaulting to 1.
pub fn worker_count() -> usize {
    std::env::var("BITBUDGET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Evaluates `f(0..n)` on up to `threads` workers and returns results in index
/// order, so any later reduction is independent of the worker count.
pub fn map_ordered<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut chunks: Vec<Vec<T>> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..n).step_by(threads).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut iters: Vec<_> = chunks.drain(..).map(Vec::into_iter).collect();
    (0..n).map(|i| iters[i % threads].next().expect("strided result")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        for threads in 1..5 {
            assert_eq!(map_ordered(7, threads, |i| i * i), vec![0, 1, 4, 9, 16, 25, 36]);
        }
        assert!(map_ordered(0, 3, |i| i).is_empty());
    }
}
