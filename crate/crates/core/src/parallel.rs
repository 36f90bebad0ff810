//! Order-preserving parallel map over indices.

use crate::error::Result;

/// Runs `f(0..n)` on up to `jobs` threads. Results come back in index order,
/// so output never depends on the job count.
pub fn par_map<R: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let chunks: Vec<Vec<Result<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| s.spawn(move || (j..n).step_by(jobs).map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut iters: Vec<_> = chunks.into_iter().map(|c| c.into_iter()).collect();
    (0..n)
        .map(|i| iters[i % jobs].next().expect("every index produced"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_jobs() {
        let one = par_map(17, 1, |i| Ok(i * i)).unwrap();
        let four = par_map(17, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(one, four);
        assert!(par_map(0, 3, |i| Ok(i)).unwrap().is_empty());
    }
}
