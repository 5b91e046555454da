//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it every policy falls back to a sequential loop.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn map<T, R, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match policy {
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Runs `op` inside a pool of at most `threads` workers.
pub fn with_threads<R: Send>(policy: ExecPolicy, threads: Option<usize>, op: impl FnOnce() -> R + Send) -> R {
    match (policy, threads) {
        #[cfg(feature = "parallel")]
        (ExecPolicy::Parallel, Some(n)) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(op),
            Err(_) => op(),
        },
        _ => op(),
    }
}

pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_policies_preserve_order() {
        let items: Vec<u32> = (0..1000).collect();
        let seq = map(ExecPolicy::Sequential, &items, |x| x * 2);
        let par = with_threads(ExecPolicy::Parallel, Some(4), || map(ExecPolicy::Parallel, &items, |x| x * 2));
        assert_eq!(seq, par);
        assert_eq!(seq[999], 1998);
    }
}
