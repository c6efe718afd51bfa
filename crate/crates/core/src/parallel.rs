//! Execution-mode plumbing for the data-parallel kernels.
//!
//! Every hot loop in the crate writes independent output chunks (rows,
//! channels, image pairs). Each chunk is produced by one invocation with a
//! fixed sequential accumulation order, so results are identical whether the
//! chunks run on the rayon pool or on the calling thread. The `parallel`
//! feature selects the default; benches exercise both explicitly.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Seq,
    #[cfg(feature = "parallel")]
    Par,
}

impl Default for Exec {
    fn default() -> Self {
        default_exec()
    }
}

#[cfg(feature = "parallel")]
pub const fn default_exec() -> Exec {
    Exec::Par
}

#[cfg(not(feature = "parallel"))]
pub const fn default_exec() -> Exec {
    Exec::Seq
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk<F>(exec: Exec, out: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    match exec {
        Exec::Seq => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Exec::Par => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}

/// Map `f` over `items`, preserving input order in the result.
pub fn map_collect<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        Exec::Seq => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Par => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
    }
}
