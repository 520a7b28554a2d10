//! Optional data parallelism controlled by `MGT_THREADS`.
//!
//! `MGT_THREADS=0` or `1` runs serially; unset uses the machine's available
//! parallelism. Results are always collected in index order, so reductions
//! over them are deterministic regardless of the thread count.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;

pub const THREADS_ENV: &str = "MGT_THREADS";

pub fn thread_count() -> usize {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().unwrap_or(0),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn pool(threads: usize) -> Option<&'static rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, &'static rayon::ThreadPool>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().ok()?;
    if let Some(p) = pools.get(&threads) {
        return Some(p);
    }
    let p: &'static rayon::ThreadPool =
        Box::leak(Box::new(rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()?));
    pools.insert(threads, p);
    Some(p)
}

/// `(0..n).map(f)`, possibly on worker threads, in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let threads = thread_count();
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match pool(threads) {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}
