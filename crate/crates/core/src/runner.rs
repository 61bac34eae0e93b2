//! Bounded-thread fan-out for independent experiment runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Internal parallelism cap: `ADASTATE_THREADS` when set, otherwise the
/// machine's available parallelism.
pub fn max_threads() -> usize {
    if let Ok(v) = std::env::var("ADASTATE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `f(0..jobs)` across at most [`max_threads`] workers; results come
/// back in job order regardless of scheduling.
pub fn run_parallel<T, F>(jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = max_threads().min(jobs.max(1));
    if workers <= 1 || jobs <= 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs {
                    break;
                }
                let out = f(idx);
                results.lock().expect("poisoned results")[idx] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("poisoned results")
        .into_iter()
        .map(|r| r.expect("job completed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_come_back_in_order() {
        let out = run_parallel(16, |i| i * i);
        assert_eq!(out, (0..16).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn single_job_runs_inline() {
        assert_eq!(run_parallel(1, |i| i + 1), vec![1]);
    }
}
