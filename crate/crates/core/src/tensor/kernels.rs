use super::Scalar;

/// A strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mat {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn dense(rows: usize, cols: usize) -> Mat {
        Mat {
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Mat {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn at(self, off: usize) -> Mat {
        Mat { off, ..self }
    }

    fn last_index(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a·b + beta * c` on strided views. Panics on any out-of-bounds
/// view so the unsafe kernel call below is sound.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(alpha: T, a: &[T], am: Mat, b: &[T], bm: Mat, beta: T, c: &mut [T], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "gemm inner extents");
    assert_eq!(cm.rows, am.rows, "gemm output rows");
    assert_eq!(cm.cols, bm.cols, "gemm output cols");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                let idx = cm.off + i * cm.rs + j * cm.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(am.last_index() < a.len(), "gemm lhs view out of bounds");
    assert!(bm.last_index() < b.len(), "gemm rhs view out of bounds");
    assert!(cm.last_index() < c.len(), "gemm output view out of bounds");
    // SAFETY: all three views were bounds-checked above; `c` is a distinct
    // mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr().add(am.off),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr().add(bm.off),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr().add(cm.off),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}

/// In-place max-subtracted softmax over each contiguous row of width `m`.
pub(crate) fn softmax_rows_inplace<T: Scalar>(x: &mut [T], m: usize) {
    for row in x.chunks_exact_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Given softmax output `p` and upstream `g` (both rows of width `m`), writes
/// `p ∘ (g − ⟨g, p⟩)` into `g`.
pub(crate) fn softmax_rows_backward_inplace<T: Scalar>(p: &[T], g: &mut [T], m: usize) {
    for (pr, gr) in p.chunks_exact(m).zip(g.chunks_exact_mut(m)) {
        let dot: T = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
        for (gv, &pv) in gr.iter_mut().zip(pr) {
            *gv = pv * (*gv - dot);
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Multi-head scaled dot-product attention over `[batch, n, d]` operands laid
/// out row-major; head `h` owns columns `h*dh .. (h+1)*dh`.
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    fn head(&self, b: usize, h: usize) -> Mat {
        Mat {
            off: b * self.n * self.d + h * self.dh(),
            rows: self.n,
            cols: self.dh(),
            rs: self.d,
            cs: 1,
        }
    }

    fn probs(&self, b: usize, h: usize) -> Mat {
        Mat::dense(self.n, self.n).at((b * self.heads + h) * self.n * self.n)
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::one() / T::lit(self.dh() as f64).sqrt()
    }

    /// Returns (output, attention probabilities `[batch, heads, n, n]`).
    pub fn forward<T: Scalar>(&self, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
        let n = self.n;
        let mut probs = vec![T::zero(); self.batch * self.heads * n * n];
        let mut out = vec![T::zero(); self.batch * n * self.d];
        let scale = self.scale::<T>();
        for b in 0..self.batch {
            for h in 0..self.heads {
                let qm = self.head(b, h);
                let pm = self.probs(b, h);
                gemm(scale, q, qm, k, qm.t(), T::zero(), &mut probs, pm);
                let pr = &mut probs[pm.off..pm.off + n * n];
                softmax_rows_inplace(pr, n);
                gemm(T::one(), &probs, pm, v, qm, T::zero(), &mut out, qm);
            }
        }
        (out, probs)
    }

    /// Returns (dq, dk, dv).
    pub fn backward<T: Scalar>(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = self.n;
        let len = self.batch * n * self.d;
        let (mut dq, mut dk, mut dv) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
        let mut ds = vec![T::zero(); n * n];
        let sm = Mat::dense(n, n);
        let scale = self.scale::<T>();
        for b in 0..self.batch {
            for h in 0..self.heads {
                let hm = self.head(b, h);
                let pm = self.probs(b, h);
                // dV = Pᵀ·dO
                gemm(T::one(), probs, pm.t(), g, hm, T::zero(), &mut dv, hm);
                // dP = dO·Vᵀ, then softmax backward in place
                gemm(T::one(), g, hm, v, hm.t(), T::zero(), &mut ds, sm);
                softmax_rows_backward_inplace(&probs[pm.off..pm.off + n * n], &mut ds, n);
                // dQ = scale·dS·K ; dK = scale·dSᵀ·Q
                gemm(scale, &ds, sm, k, hm, T::zero(), &mut dq, hm);
                gemm(scale, &ds, sm.t(), q, hm, T::zero(), &mut dk, hm);
            }
        }
        (dq, dk, dv)
    }
}
