//! Slice-level forward and backward kernels. Shapes are validated by the
//! graph layer before these are called.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output columns `ow` for which `ow * stride + k - pad` lands inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let hi_incl = (extent as isize - 1 - off).div_euclid(s);
        let lo = lo.min(out as isize);
        let hi = (hi_incl + 1).clamp(0, out as isize).max(lo);
        (lo as usize, hi as usize)
    }
}

/// `c += a·b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const NB: usize = 256;
    const KB: usize = 128;
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        for p0 in (0..k).step_by(KB) {
            let p1 = (p0 + KB).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let rows = &mut c[i * n..(i + 4) * n];
                let (r0, rest) = rows.split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                for p in p0..p1 {
                    let brow = &b[p * n + j0..p * n + j1];
                    let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                    for j in 0..brow.len() {
                        let bv = brow[j];
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
                i += 4;
            }
            for i in i..m {
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let av = a[i * k + p];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (o, &bv) in crow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `c += a·bᵀ` for row-major `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const JB: usize = 32;
    for j0 in (0..n).step_by(JB) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in j0..(j0 + JB).min(n) {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }
}

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Unfolds `x` into a `(c_in·kh·kw) × (n·oh·ow)` matrix of receptive fields.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = g.n * oh * ow;
    let in_plane = g.h * g.w;
    let mut col = vec![0.0; g.c_in * g.kh * g.kw * l];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            let (r_lo, r_hi) = g.valid_range(ki, g.h, oh);
            for kj in 0..g.kw {
                let (c_lo, c_hi) = g.valid_range(kj, g.w, ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let xp = &x[(n * g.c_in + ci) * in_plane..(n * g.c_in + ci + 1) * in_plane];
                    for r in r_lo..r_hi {
                        let ih = r * g.stride + ki - g.pad;
                        let base = (n * oh + r) * ow;
                        for c in c_lo..c_hi {
                            dst[base + c] = xp[ih * g.w + c * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`.
fn col2im(g: &ConvGeom, col: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = g.n * oh * ow;
    let in_plane = g.h * g.w;
    let mut x = vec![0.0; g.n * g.c_in * in_plane];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            let (r_lo, r_hi) = g.valid_range(ki, g.h, oh);
            for kj in 0..g.kw {
                let (c_lo, c_hi) = g.valid_range(kj, g.w, ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let xp = &mut x[(n * g.c_in + ci) * in_plane..(n * g.c_in + ci + 1) * in_plane];
                    for r in r_lo..r_hi {
                        let ih = r * g.stride + ki - g.pad;
                        let base = (n * oh + r) * ow;
                        for c in c_lo..c_hi {
                            xp[ih * g.w + c * g.stride + kj - g.pad] += src[base + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `n·c_out·oh·ow` (NCHW) to `c_out × (n·oh·ow)` and back.
fn nchw_to_cl(g: &ConvGeom, t: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let l = g.n * plane;
    let mut out = vec![0.0; g.c_out * l];
    for n in 0..g.n {
        for co in 0..g.c_out {
            out[co * l + n * plane..co * l + (n + 1) * plane]
                .copy_from_slice(&t[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane]);
        }
    }
    out
}

/// Cross-correlation, no kernel flip.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let l = g.n * plane;
    let r = g.c_in * g.kh * g.kw;
    let col = im2col(g, x);
    let mut mat = vec![0.0; g.c_out * l];
    gemm_acc(g.c_out, r, l, k, &col, &mut mat);
    let mut out = vec![0.0; g.n * g.c_out * plane];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let b = bias.map_or(0.0, |b| b[co]);
            let src = &mat[co * l + n * plane..co * l + (n + 1) * plane];
            let dst = &mut out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

pub fn conv2d_backward_input(g: &ConvGeom, gout: &[f64], k: &[f64]) -> Vec<f64> {
    let l = g.n * g.out_h() * g.out_w();
    let r = g.c_in * g.kh * g.kw;
    let gmat = nchw_to_cl(g, gout);
    let kt = transpose(g.c_out, r, k);
    let mut dcol = vec![0.0; r * l];
    gemm_acc(r, g.c_out, l, &kt, &gmat, &mut dcol);
    col2im(g, &dcol)
}

pub fn conv2d_backward_kernel(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let l = g.n * g.out_h() * g.out_w();
    let r = g.c_in * g.kh * g.kw;
    let gmat = nchw_to_cl(g, gout);
    let col = im2col(g, x);
    let mut dk = vec![0.0; g.c_out * r];
    gemm_nt_acc(g.c_out, l, r, &gmat, &col, &mut dk);
    dk
}

pub fn conv2d_backward_bias(g: &ConvGeom, gout: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let mut db = vec![0.0; g.c_out];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let s = (n * g.c_out + co) * plane;
            *d += gout[s..s + plane].iter().sum::<f64>();
        }
    }
    db
}

/// `out[b] = a[b] (m×k) · b[b] (k×n)` for every batch entry.
pub fn bmm(batch: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ab[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bb[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `a · bᵀ` per batch, with a: m×k and b: n×k.
pub fn bmm_nt(batch: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * n * k..(bi + 1) * n * k];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bb[j * k..(j + 1) * k];
                out[(bi * m + i) * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    }
    out
}

/// `aᵀ · b` per batch, with a: k×m and b: k×n.
pub fn bmm_tn(batch: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * k * m..(bi + 1) * k * m];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for p in 0..k {
            let brow = &bb[p * n..(p + 1) * n];
            for i in 0..m {
                let av = ab[p * m + i];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in ob[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Bin `[floor(i*len/out), ceil((i+1)*len/out))`.
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool_forward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    x: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (r0, r1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bin(j, w, ow);
                let mut s = 0.0;
                for r in r0..r1 {
                    s += xp[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                out[(p * oh + i) * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gout: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (r0, r1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bin(j, w, ow);
                let g = gout[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for v in &mut dp[r * w + c0..r * w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat position of a tensor of `out_shape`, the flat position in a
/// source laid out with `src_strides` (stride 0 on broadcast axes).
pub fn gather_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Source strides of `in_shape` broadcast to `out_shape` (same rank).
pub fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(in_shape);
    in_shape
        .iter()
        .zip(out_shape)
        .zip(s)
        .map(|((&i, &o), st)| if i == 1 && o != 1 { 0 } else { st })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_bins_cover_extent() {
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
        assert_eq!(adaptive_bin(1, 4, 2), (2, 4));
    }

    #[test]
    fn valid_range_matches_bounds_check() {
        for &(h, k, s, p) in &[(5, 3, 1, 1), (6, 3, 2, 1), (7, 1, 2, 0), (4, 3, 2, 1), (3, 3, 1, 0)] {
            let g = ConvGeom {
                n: 1,
                c_in: 1,
                h,
                w: h,
                c_out: 1,
                kh: k,
                kw: k,
                stride: s,
                pad: p,
            };
            let out = g.out_h();
            for ki in 0..k {
                let (lo, hi) = g.valid_range(ki, h, out);
                for o in 0..out {
                    let pos = (o * s + ki) as isize - p as isize;
                    let inside = pos >= 0 && (pos as usize) < h;
                    assert_eq!(inside, o >= lo && o < hi, "h={h} k={k} s={s} p={p} ki={ki} o={o}");
                }
            }
        }
    }

    #[test]
    fn gather_map_broadcasts_singletons() {
        let out = [2, 3];
        let st = broadcast_strides(&[1, 3], &out);
        assert_eq!(gather_map(&out, &st), vec![0, 1, 2, 0, 1, 2]);
        let st = broadcast_strides(&[2, 1], &out);
        assert_eq!(gather_map(&out, &st), vec![0, 0, 0, 1, 1, 1]);
    }
}
