//! Dense compute kernels: three matmul layouts plus elementwise/row maps.
//!
//! Every kernel exists in a sequential form (`seq`) and, behind the
//! `parallel` feature, a rayon form (`par`) that splits work over
//! *independent output rows only*. Within a row the summation order is
//! fixed, so the parallel results are bitwise identical to the sequential
//! ones for any thread count. The free functions at the top level dispatch
//! to `par` when the feature is enabled and the problem is big enough to
//! amortize fork/join overhead, and to `seq` otherwise; callers never
//! observe a numeric difference.

use crate::scalar::Scalar;

/// Minimum multiply count before a matmul is worth forking.
pub const PAR_MIN_MATMUL_WORK: usize = 1 << 15;
/// Minimum element count before an elementwise map is worth forking.
pub const PAR_MIN_MAP_LEN: usize = 1 << 14;

/// Install a global rayon pool with `n` threads (0 keeps the library
/// default of one thread per core). Safe to call more than once; only the
/// first call takes effect. No-op without the `parallel` feature.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let mut b = rayon::ThreadPoolBuilder::new();
        if n > 0 {
            b = b.num_threads(n);
        }
        let _ = b.build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// How many threads the dispatchers believe they have.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

pub mod seq {
    use super::Scalar;

    /// out[m,n] = a[m,k] · b[k,n]. `out` is fully overwritten.
    pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            row_nn(a, b, &mut out[i * n..(i + 1) * n], i, k, n);
        }
    }

    /// out[m,n] = a[m,k] · b[n,k]ᵀ.
    pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            row_nt(a, b, &mut out[i * n..(i + 1) * n], i, k, n);
        }
    }

    /// out[m,n] = a[k,m]ᵀ · b[k,n].
    pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            row_tn(a, b, &mut out[i * n..(i + 1) * n], i, m, k, n);
        }
    }

    pub fn map_into<F: Scalar>(src: &[F], dst: &mut [F], f: impl Fn(F) -> F + Sync + Send) {
        debug_assert_eq!(src.len(), dst.len());
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = f(s);
        }
    }

    pub fn zip_into<F: Scalar>(a: &[F], b: &[F], dst: &mut [F], f: impl Fn(F, F) -> F + Sync + Send) {
        debug_assert_eq!(a.len(), dst.len());
        debug_assert_eq!(b.len(), dst.len());
        for i in 0..dst.len() {
            dst[i] = f(a[i], b[i]);
        }
    }

    pub fn for_each_row<F: Scalar>(
        data: &mut [F],
        width: usize,
        f: impl Fn(usize, &mut [F]) + Sync + Send,
    ) {
        debug_assert_eq!(data.len() % width.max(1), 0);
        for (i, row) in data.chunks_mut(width).enumerate() {
            f(i, row);
        }
    }

    /// One output row of nn as a sum of scaled b-rows (axpy). Summation
    /// order over `l` is fixed; this is the order the parallel kernels
    /// reproduce.
    pub(super) fn row_nn<F: Scalar>(a: &[F], b: &[F], out_row: &mut [F], i: usize, k: usize, n: usize) {
        out_row.fill(F::zero());
        for l in 0..k {
            let ail = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + ail * b_row[j];
            }
        }
    }

    pub(super) fn row_nt<F: Scalar>(a: &[F], b: &[F], out_row: &mut [F], i: usize, k: usize, n: usize) {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for l in 0..k {
                acc = acc + a_row[l] * b_row[l];
            }
            out_row[j] = acc;
        }
    }

    pub(super) fn row_tn<F: Scalar>(
        a: &[F],
        b: &[F],
        out_row: &mut [F],
        i: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        out_row.fill(F::zero());
        for l in 0..k {
            let ali = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + ali * b_row[j];
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use super::Scalar;
    use rayon::prelude::*;

    pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| super::seq::row_nn(a, b, row, i, k, n));
    }

    pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| super::seq::row_nt(a, b, row, i, k, n));
    }

    pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| super::seq::row_tn(a, b, row, i, m, k, n));
    }

    pub fn map_into<F: Scalar>(src: &[F], dst: &mut [F], f: impl Fn(F) -> F + Sync + Send) {
        debug_assert_eq!(src.len(), dst.len());
        dst.par_iter_mut().zip(src.par_iter()).for_each(|(d, &s)| *d = f(s));
    }

    pub fn zip_into<F: Scalar>(a: &[F], b: &[F], dst: &mut [F], f: impl Fn(F, F) -> F + Sync + Send) {
        debug_assert_eq!(a.len(), dst.len());
        debug_assert_eq!(b.len(), dst.len());
        dst.par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = f(a[i], b[i]));
    }

    pub fn for_each_row<F: Scalar>(
        data: &mut [F],
        width: usize,
        f: impl Fn(usize, &mut [F]) + Sync + Send,
    ) {
        debug_assert_eq!(data.len() % width.max(1), 0);
        data.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

macro_rules! dispatch_matmul {
    ($name:ident) => {
        pub fn $name<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
            #[cfg(feature = "parallel")]
            if m > 1 && m * k * n >= PAR_MIN_MATMUL_WORK && current_threads() > 1 {
                return par::$name(a, b, out, m, k, n);
            }
            seq::$name(a, b, out, m, k, n)
        }
    };
}

dispatch_matmul!(matmul_nn);
dispatch_matmul!(matmul_nt);
dispatch_matmul!(matmul_tn);

pub fn map_into<F: Scalar>(src: &[F], dst: &mut [F], f: impl Fn(F) -> F + Sync + Send) {
    #[cfg(feature = "parallel")]
    if dst.len() >= PAR_MIN_MAP_LEN && current_threads() > 1 {
        return par::map_into(src, dst, f);
    }
    seq::map_into(src, dst, f)
}

pub fn zip_into<F: Scalar>(a: &[F], b: &[F], dst: &mut [F], f: impl Fn(F, F) -> F + Sync + Send) {
    #[cfg(feature = "parallel")]
    if dst.len() >= PAR_MIN_MAP_LEN && current_threads() > 1 {
        return par::zip_into(a, b, dst, f);
    }
    seq::zip_into(a, b, dst, f)
}

pub fn for_each_row<F: Scalar>(data: &mut [F], width: usize, f: impl Fn(usize, &mut [F]) + Sync + Send) {
    #[cfg(feature = "parallel")]
    if data.len() >= PAR_MIN_MAP_LEN && current_threads() > 1 {
        return par::for_each_row(data, width, f);
    }
    seq::for_each_row(data, width, f)
}
