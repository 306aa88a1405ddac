//! Data-parallel helpers. With the `parallel` feature the independent items
//! (map cells, Monte-Carlo runs) are spread over the rayon pool; otherwise,
//! or when [`Execution::Sequential`] is requested, they run in order. Every
//! item is seeded from its index, so both paths produce identical output.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether parallel execution is compiled in.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let f = |i: usize| (i * i) as u64 ^ 0x5a;
        assert_eq!(
            map_indexed(Execution::Sequential, 1000, f),
            map_indexed(Execution::Parallel, 1000, f)
        );
    }
}
