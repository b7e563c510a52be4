//! Order-preserving data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over rayon's global
//! pool; without it everything runs on the calling thread. Results are
//! always returned in input order, so reductions over them are bitwise
//! identical under either strategy.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Maps `f` over `0..n`, failing with the first error in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                let out: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
                out.into_iter().collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let v = Execution::default().map(100, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(v, Execution::Sequential.map(100, |i| Ok(i * i)).unwrap());
    }

    #[test]
    fn first_error_wins() {
        let r = Execution::default().map(10, |i| {
            if i >= 3 {
                Err(crate::Error::InvalidArgument(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "invalid argument: 3");
    }
}
