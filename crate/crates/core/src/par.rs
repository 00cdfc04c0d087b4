//! Thin indirection over rayon so every data-parallel loop in the crate has a
//! sequential twin. Building with `--no-default-features` compiles the
//! sequential paths; results are identical either way because each output
//! slot is computed independently from its index.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Build a vector whose element `i` is `f(i)`. Output order is by index, so
/// the result does not depend on scheduling.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Overwrite `out[i]` with `f(i)` for every index.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
    #[cfg(not(feature = "parallel"))]
    out.iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
}

/// Overwrite two same-length slices in lockstep: `(a[i], b[i]) = f(i)`.
pub fn fill2_indexed<A, B, F>(a: &mut [A], b: &mut [B], f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize) -> (A, B) + Sync + Send,
{
    assert_eq!(a.len(), b.len(), "fill2_indexed slice length mismatch");
    #[cfg(feature = "parallel")]
    a.par_iter_mut().zip(b.par_iter_mut()).enumerate().for_each(|(i, (sa, sb))| {
        let (va, vb) = f(i);
        *sa = va;
        *sb = vb;
    });
    #[cfg(not(feature = "parallel"))]
    a.iter_mut().zip(b.iter_mut()).enumerate().for_each(|(i, (sa, sb))| {
        let (va, vb) = f(i);
        *sa = va;
        *sb = vb;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn fill2_writes_both() {
        let mut a = vec![0.0; 10];
        let mut b = vec![0.0; 10];
        fill2_indexed(&mut a, &mut b, |i| (i as f64, -(i as f64)));
        assert_eq!(a[3], 3.0);
        assert_eq!(b[3], -3.0);
    }
}
