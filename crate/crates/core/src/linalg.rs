//! Dense kernels over row-major `f64` slices.

/// `out = W x + b` with `W` of shape `rows × cols`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `gx += Wᵀ g` for `W` of shape `rows × cols`.
pub fn matvec_t_acc(w: &[f64], g: &[f64], rows: usize, cols: usize, gx: &mut [f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        axpy(gr, &w[r * cols..(r + 1) * cols], gx);
    }
}

/// `gw += g xᵀ` (outer product accumulation).
pub fn outer_acc(g: &[f64], x: &[f64], gw: &mut [f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        axpy(gr, x, &mut gw[r * cols..(r + 1) * cols]);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let (mut raw_a, mut raw_b) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        raw_a += x * x;
        raw_b += y * y;
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // rounding leaves a residue of order ε² on constant input
    if saa <= 1e-24 * raw_a || sbb <= 1e-24 * raw_b || saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
