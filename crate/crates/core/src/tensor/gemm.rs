use super::real::Real;
use crate::exec;

/// Whether an operand is stored as written (`No`) or as its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Output rows per block. Fixed so the sequential and parallel paths issue
/// identical kernel calls.
const ROW_BLOCK: usize = 128;

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`, all buffers row-major.
///
/// `a` is stored `m×k` when `ta == No` and `k×m` otherwise; likewise `b` is
/// `k×n` or `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    let block = |bi: usize, cblock: &mut [T]| {
        let r0 = bi * ROW_BLOCK;
        let rows = cblock.len() / n;
        // SAFETY: lengths were checked above; the block covers rows r0..r0+rows
        // of op(a) and of c, all of which lie inside the buffers.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                cblock.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    let row_len = ROW_BLOCK * n;
    if c.len() <= row_len {
        block(0, c);
    } else if c.len() % row_len == 0 {
        exec::for_each_row(c, row_len, block);
    } else {
        let split = c.len() - c.len() % row_len;
        let (head, tail) = c.split_at_mut(split);
        exec::for_each_row(head, row_len, block);
        block(split / row_len, tail);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }

    #[test]
    fn matches_naive_in_all_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (300, 7, 5);
        let a = Tensor::<f64>::randn([m, k], 1.0, &mut rng).into_data();
        let b = Tensor::<f64>::randn([k, n], 1.0, &mut rng).into_data();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, Trans::No), (&at, Trans::Yes)] {
            for (bb, tb) in [(&b, Trans::No), (&bt, Trans::Yes)] {
                let mut c = vec![f64::NAN; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn accumulate_adds_into_output() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = vec![1.0f64; 4];
        gemm(2, 2, 2, &a, Trans::No, &b, Trans::No, &mut c, true);
        assert_eq!(c, vec![20.0, 23.0, 44.0, 51.0]);
    }

    #[test]
    fn sequential_and_parallel_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (1000, 33, 70);
        let a = Tensor::<f32>::randn([m, k], 1.0, &mut rng).into_data();
        let b = Tensor::<f32>::randn([k, n], 1.0, &mut rng).into_data();
        let mut seq = vec![0.0f32; m * n];
        let mut par = vec![0.0f32; m * n];
        exec::set_parallel(false);
        gemm(m, k, n, &a, Trans::No, &b, Trans::No, &mut seq, false);
        exec::set_parallel(true);
        gemm(m, k, n, &a, Trans::No, &b, Trans::No, &mut par, false);
        assert!(seq.iter().zip(&par).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
