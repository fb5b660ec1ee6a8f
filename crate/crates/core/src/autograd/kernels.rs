//! Slice-level kernels. Every linear kernel here comes with its adjoint, which
//! is what the corresponding graph op uses for its backward pass.

use crate::tensor::Real;

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Window {
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.pad;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Unrolls `src` (`C x H x W`) into `dst` (`C*k*k x Ho*Wo`), zero padding.
pub fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, dst: &mut [T]) {
    let k = win.kernel;
    let l = ho * wo;
    debug_assert_eq!(dst.len(), c * k * k * l);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let out = &mut dst[row * l..(row + 1) * l];
                let dy = (ki * win.dilation) as isize - win.pad as isize;
                let dx = (kj * win.dilation) as isize - win.pad as isize;
                for oy in 0..ho {
                    let iy = (oy * win.stride) as isize + dy;
                    let orow = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        orow.fill(T::zero());
                        continue;
                    }
                    let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if win.stride == 1 {
                        // contiguous run of valid columns
                        let lo = ((-dx).max(0) as usize).min(wo);
                        let hi = ((w as isize - dx).clamp(0, wo as isize) as usize).max(lo);
                        orow[..lo].fill(T::zero());
                        if hi > lo {
                            let s = (lo as isize + dx) as usize;
                            orow[lo..hi].copy_from_slice(&irow[s..s + (hi - lo)]);
                        }
                        orow[hi..].fill(T::zero());
                    } else {
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * win.stride) as isize + dx;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                irow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dst`.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, dst: &mut [T]) {
    let k = win.kernel;
    let l = ho * wo;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                let dy = (ki * win.dilation) as isize - win.pad as isize;
                let dx = (kj * win.dilation) as isize - win.pad as isize;
                for oy in 0..ho {
                    let iy = (oy * win.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * win.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps for one axis of a half-pixel-centred linear resize
/// (corner alignment off, edge-clamped).
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl LinearTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut w_hi = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push(t);
        }
        LinearTaps { lo, hi, w_hi }
    }
}

/// Bilinear resize of one `h x w` plane to `oh x ow`.
pub fn bilinear_plane<T: Real>(src: &[T], w: usize, ty: &LinearTaps, tx: &LinearTaps, dst: &mut [T]) {
    let ow = tx.lo.len();
    for (oy, drow) in dst.chunks_mut(ow).enumerate() {
        let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
        let fy = T::of(ty.w_hi[oy]);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for (ox, d) in drow.iter_mut().enumerate() {
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let fx = T::of(tx.w_hi[ox]);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            *d = top + (bot - top) * fy;
        }
    }
}

/// Adjoint of [`bilinear_plane`], accumulating into `dst` (`h x w`).
pub fn bilinear_plane_adjoint<T: Real>(grad: &[T], w: usize, ty: &LinearTaps, tx: &LinearTaps, dst: &mut [T]) {
    let ow = tx.lo.len();
    for (oy, grow) in grad.chunks(ow).enumerate() {
        let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
        let fy = T::of(ty.w_hi[oy]);
        for (ox, &g) in grow.iter().enumerate() {
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let fx = T::of(tx.w_hi[ox]);
            let gt = g * (T::one() - fy);
            let gb = g * fy;
            dst[y0 * w + x0] += gt * (T::one() - fx);
            dst[y0 * w + x1] += gt * fx;
            dst[y1 * w + x0] += gb * (T::one() - fx);
            dst[y1 * w + x1] += gb * fx;
        }
    }
}

/// Mean over non-overlapping `f x f` blocks of an `h x w` plane.
pub fn avg_pool_plane<T: Real>(src: &[T], h: usize, w: usize, f: usize, dst: &mut [T]) {
    let (oh, ow) = (h / f, w / f);
    let inv = T::one() / T::of((f * f) as f64);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = T::zero();
            for dy in 0..f {
                let row = &src[(oy * f + dy) * w + ox * f..(oy * f + dy) * w + ox * f + f];
                for &v in row {
                    s += v;
                }
            }
            dst[oy * ow + ox] = s * inv;
        }
    }
}

pub fn avg_pool_plane_adjoint<T: Real>(grad: &[T], h: usize, w: usize, f: usize, dst: &mut [T]) {
    let ow = w / f;
    let inv = T::one() / T::of((f * f) as f64);
    for y in 0..h {
        for x in 0..w {
            dst[y * w + x] += grad[(y / f) * ow + x / f] * inv;
        }
    }
}

pub fn nearest_up_plane<T: Real>(src: &[T], h: usize, w: usize, f: usize, dst: &mut [T]) {
    let ow = w * f;
    for y in 0..h * f {
        for x in 0..ow {
            dst[y * ow + x] = src[(y / f) * w + x / f];
        }
    }
}

pub fn nearest_up_plane_adjoint<T: Real>(grad: &[T], h: usize, w: usize, f: usize, dst: &mut [T]) {
    let ow = w * f;
    for y in 0..h * f {
        for x in 0..ow {
            dst[(y / f) * w + x / f] += grad[y * ow + x];
        }
    }
}

/// One diagonal-propagation pass over an `L x L` score matrix: each entry
/// becomes the sum of itself and its two diagonal neighbours, where
/// "diagonal" is taken in the index order given by `order` (a permutation
/// of `0..L`). The pass is self-adjoint.
pub fn diagonal_pass<T: Real>(src: &[T], order: &[usize], dst: &mut [T]) {
    let l = order.len();
    dst.fill(T::zero());
    for pi in 0..l {
        let i = order[pi];
        for pj in 0..l {
            let j = order[pj];
            let mut s = src[i * l + j];
            if pi > 0 && pj > 0 {
                s += src[order[pi - 1] * l + order[pj - 1]];
            }
            if pi + 1 < l && pj + 1 < l {
                s += src[order[pi + 1] * l + order[pj + 1]];
            }
            dst[i * l + j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 12.9898).sin() * 0.5).collect()
    }

    #[test]
    fn im2col_adjoint_identity() {
        for &(k, s, p, d) in &[(3, 1, 1, 1), (3, 2, 1, 1), (5, 1, 2, 1), (3, 1, 4, 4), (4, 2, 1, 1)] {
            let win = Window { kernel: k, stride: s, pad: p, dilation: d };
            let (c, h, w) = (2, 7, 6);
            let ho = win.out_len(h).unwrap();
            let wo = win.out_len(w).unwrap();
            let x = pseudo(c * h * w, 1.0);
            let y = pseudo(c * k * k * ho * wo, 3.0);
            let mut ax = vec![0.0; y.len()];
            im2col(&x, c, h, w, win, ho, wo, &mut ax);
            let mut aty = vec![0.0; x.len()];
            col2im(&y, c, h, w, win, ho, wo, &mut aty);
            assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10, "{win:?}");
        }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        let win = Window { kernel: 3, stride: 1, pad: 2, dilation: 2 };
        let (c, h, w) = (1, 5, 4);
        let x = pseudo(h * w, 0.5);
        let (ho, wo) = (win.out_len(h).unwrap(), win.out_len(w).unwrap());
        let mut cols = vec![0.0; 9 * ho * wo];
        im2col(&x, c, h, w, win, ho, wo, &mut cols);
        for ki in 0..3 {
            for kj in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let iy = oy as isize + 2 * ki as isize - 2;
                        let ix = ox as isize + 2 * kj as isize - 2;
                        let expect = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(cols[(ki * 3 + kj) * ho * wo + oy * wo + ox], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn resample_adjoints() {
        let (h, w) = (4, 6);
        let x = pseudo(h * w, 2.0);
        let ty = LinearTaps::new(h, 2 * h);
        let tx = LinearTaps::new(w, 2 * w);
        let y = pseudo(4 * h * w, 5.0);
        let mut ax = vec![0.0; 4 * h * w];
        bilinear_plane(&x, w, &ty, &tx, &mut ax);
        let mut aty = vec![0.0; h * w];
        bilinear_plane_adjoint(&y, w, &ty, &tx, &mut aty);
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10);

        let y = pseudo(h * w / 4, 7.0);
        let mut ax = vec![0.0; h * w / 4];
        avg_pool_plane(&x, h, w, 2, &mut ax);
        let mut aty = vec![0.0; h * w];
        avg_pool_plane_adjoint(&y, h, w, 2, &mut aty);
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10);
    }

    #[test]
    fn diagonal_pass_is_self_adjoint() {
        let l = 6;
        let order: Vec<usize> = vec![0, 3, 1, 4, 2, 5];
        let x = pseudo(l * l, 1.5);
        let y = pseudo(l * l, 8.0);
        let mut ax = vec![0.0; l * l];
        let mut ay = vec![0.0; l * l];
        diagonal_pass(&x, &order, &mut ax);
        diagonal_pass(&y, &order, &mut ay);
        assert!((dot(&ax, &y) - dot(&x, &ay)).abs() < 1e-10);
    }
}
