//! Raw convolution and pooling loops over flat `C x H x W` buffers.
//!
//! "Same" padding for a `kh x kw` kernel puts `(k - 1) / 2` zeros before and
//! the rest after, so an even kernel pads only the bottom row and right
//! column.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn pad_top(&self) -> isize {
        ((self.kh - 1) / 2) as isize
    }

    fn pad_left(&self) -> isize {
        ((self.kw - 1) / 2) as isize
    }

    /// For kernel tap offset `o`, the output positions `[lo, hi)` whose
    /// input `pos + o` lies inside `0..n`.
    fn valid(n: usize, o: isize) -> (usize, usize) {
        let lo = (-o).max(0) as usize;
        let hi = (n as isize - o).clamp(0, n as isize) as usize;
        (lo, hi.max(lo))
    }

    /// `(ky, kx, dy, y range, dx, x range)` for each kernel tap that overlaps
    /// the input.
    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, (usize, usize), isize, (usize, usize))> + '_ {
        (0..self.kh).flat_map(move |ky| {
            (0..self.kw).map(move |kx| {
                let dy = ky as isize - self.pad_top();
                let dx = kx as isize - self.pad_left();
                (ky, kx, dy, Self::valid(self.h, dy), dx, Self::valid(self.w, dx))
            })
        })
        .filter(|&(_, _, _, (y0, y1), _, (x0, x1))| y0 < y1 && x0 < x1)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.c_out * plane];
    let taps: Vec<_> = g.taps().collect();
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.c_in {
            let in_plane = &x[ci * plane..(ci + 1) * plane];
            let wbase = (co * g.c_in + ci) * g.kh * g.kw;
            for &(ky, kx, dy, (y0, y1), dx, (x0, x1)) in &taps {
                let wv = w[wbase + ky * g.kw + kx];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let src = &in_plane[sy * g.w + (x0 as isize + dx) as usize..][..x1 - x0];
                    let dst = &mut out_plane[y * g.w + x0..y * g.w + x1];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.h * g.w;
    let mut gx = vec![T::zero(); g.c_in * plane];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let taps: Vec<_> = g.taps().collect();
    for co in 0..g.c_out {
        let go = &gout[co * plane..(co + 1) * plane];
        gb[co] = go.iter().copied().sum();
        for ci in 0..g.c_in {
            let in_plane = &x[ci * plane..(ci + 1) * plane];
            let gx_plane = &mut gx[ci * plane..(ci + 1) * plane];
            let wbase = (co * g.c_in + ci) * g.kh * g.kw;
            for &(ky, kx, dy, (y0, y1), dx, (x0, x1)) in &taps {
                let widx = wbase + ky * g.kw + kx;
                let wv = w[widx];
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let start = sy * g.w + (x0 as isize + dx) as usize;
                    let grow = &go[y * g.w + x0..y * g.w + x1];
                    let src = &in_plane[start..start + (x1 - x0)];
                    acc += grow.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                    let dst = &mut gx_plane[start..start + (x1 - x0)];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
                gw[widx] += acc;
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping `ph x pw` max pooling; trailing rows/columns that do not
/// fill a window are dropped. Returns the output and, per output element,
/// the flat input index of the first maximum.
pub fn maxpool_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * ph * w + ox * pw;
                let mut best = x[best_i];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let i = base + (oy * ph + dy) * w + ox * pw + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(input_len: usize, argmax: &[u32], gout: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&i, &gv) in argmax.iter().zip(gout) {
        gx[i as usize] += gv;
    }
    gx
}
