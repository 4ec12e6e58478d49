use super::Float;

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major `rows x cols` view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        MatRef { data, offset, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        MatMut { data, offset, rows, cols, rs, cs: 1 }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c <- alpha * a * b + beta * c`. With `beta == 0` the prior contents of
/// `c` are ignored.
pub fn gemm<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() { T::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    a.check();
    b.check();
    c.check();
    if a.rows <= SMALL_M && c.cs == 1 {
        if b.cs == 1 {
            small_m(alpha, a, b, beta, c);
            return;
        }
        if b.rs == 1 && a.cs == 1 {
            small_m_dot(alpha, a, b, beta, c);
            return;
        }
    }
    // SAFETY: every view was bounds-checked above for its extents and strides,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row counts up to this use row-times-matrix loops: packing `b` for the
/// blocked kernel costs more than the product itself.
const SMALL_M: usize = 16;

fn small_m<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { small_m_avx2(alpha, a, b, beta, c) };
        return;
    }
    small_m_body(alpha, a, b, beta, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_m_avx2<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    small_m_body(alpha, a, b, beta, c);
}

#[inline(always)]
fn small_m_body<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    let n = c.cols;
    for i in 0..c.rows {
        let start = c.offset + i * c.rs;
        let out = &mut c.data[start..start + n];
        if beta == T::zero() {
            out.fill(T::zero());
        } else if beta != T::one() {
            out.iter_mut().for_each(|v| *v *= beta);
        }
    }
    // Each row of `b` is streamed once and applied to every output row.
    let ai = |i: usize, k: usize| alpha * a.data[a.offset + i * a.rs + k * a.cs];
    let brow = |k: usize| &b.data[b.offset + k * b.rs..b.offset + k * b.rs + n];
    let mut k = 0;
    while k + 4 <= a.cols {
        let (b0, b1, b2, b3) = (brow(k), brow(k + 1), brow(k + 2), brow(k + 3));
        for i in 0..c.rows {
            let (a0, a1, a2, a3) = (ai(i, k), ai(i, k + 1), ai(i, k + 2), ai(i, k + 3));
            let start = c.offset + i * c.rs;
            let out = &mut c.data[start..start + n];
            for j in 0..n {
                out[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        k += 4;
    }
    for k in k..a.cols {
        let bk = brow(k);
        for i in 0..c.rows {
            let aik = ai(i, k);
            let start = c.offset + i * c.rs;
            for (o, &bv) in c.data[start..start + n].iter_mut().zip(bk) {
                *o += aik * bv;
            }
        }
    }
}

/// Small-m product against a column-contiguous `b` (e.g. a transposed
/// view): one dot product per output entry.
fn small_m_dot<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    let kk = a.cols;
    for i in 0..c.rows {
        let ar = &a.data[a.offset + i * a.rs..a.offset + i * a.rs + kk];
        for j in 0..c.cols {
            let bc = &b.data[b.offset + j * b.cs..b.offset + j * b.cs + kk];
            let dot = ar.iter().zip(bc).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            let idx = c.offset + i * c.rs + j;
            c.data[idx] = if beta == T::zero() { alpha * dot } else { alpha * dot + beta * c.data[idx] };
        }
    }
}
