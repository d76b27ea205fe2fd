//! Batch execution policy. With the `parallel` feature the data-parallel
//! loops (per-clip forward/backward, per-video scoring, synthesis) fan out
//! over rayon; without it, or in [`ExecMode::Sequential`], they run in order.
//! Results are always returned in input order, so both modes produce
//! bit-identical outputs.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    /// Whether this mode actually runs on multiple threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Like [`map`] for items that are `Send` but not `Sync` (tapes hold
/// `RefCell`s), consuming them.
pub fn map_owned<T, R, F>(mode: ExecMode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}

/// Like [`map`], stopping at the first error (in input order).
pub fn try_map<T, R, E, F>(mode: ExecMode, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(mode, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..500).collect();
        let f = |x: &u64| (*x as f64).sqrt().sin();
        assert_eq!(map(ExecMode::Sequential, &xs, f), map(ExecMode::Parallel, &xs, f));
        let r: Result<Vec<u64>, String> = try_map(ExecMode::Parallel, &xs, |x| {
            if *x == 7 {
                Err("seven".into())
            } else {
                Ok(*x)
            }
        });
        assert_eq!(r.unwrap_err(), "seven");
    }
}
