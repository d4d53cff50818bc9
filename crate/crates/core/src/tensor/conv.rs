// Cross-correlation and pooling kernels over [N, C, H, W] buffers. The
// batch axis is mapped through `Exec`; per-sample partial kernel gradients
// are reduced in sample order.

use super::Float;
use crate::exec::Exec;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_len(k: usize, input: usize, stride: usize, pad: usize) -> Option<usize> {
        if k > input + 2 * pad || stride == 0 {
            None
        } else {
            Some((input + 2 * pad - k) / stride + 1)
        }
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output positions `lo..hi` whose input coordinate `o*stride + kpos - pad`
/// falls inside `0..in_len`.
#[inline]
fn valid_range(kpos: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    if in_len + pad <= kpos {
        return (0, 0);
    }
    let lo = if pad > kpos {
        (pad - kpos).div_ceil(stride)
    } else {
        0
    };
    let hi = ((in_len - 1 + pad - kpos) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], kernel: &[T], g: ConvGeom, exec: Exec) -> Vec<T> {
    let per_sample = exec.map(g.n, |s| {
        let xs = &x[s * g.c_in * g.in_plane()..(s + 1) * g.c_in * g.in_plane()];
        let mut out = vec![T::zero(); g.c_out * g.out_plane()];
        for oc in 0..g.c_out {
            let out_plane = &mut out[oc * g.out_plane()..(oc + 1) * g.out_plane()];
            for ic in 0..g.c_in {
                let in_plane = &xs[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.k {
                        let wv = kernel[((oc * g.c_in + ic) * g.k + ky) * g.k + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if ox_hi == ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &in_plane[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let span = ox_hi - ox_lo;
                                for (o, &i) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..ix0 + span]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    });
    per_sample.concat()
}

/// Returns (grad wrt input, grad wrt kernel). Either side may be skipped.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    g: ConvGeom,
    want_x: bool,
    want_k: bool,
    exec: Exec,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let klen = kernel.len();
    let per_sample = exec.map(g.n, |s| {
        let xs = &x[s * g.c_in * g.in_plane()..(s + 1) * g.c_in * g.in_plane()];
        let gs = &gout[s * g.c_out * g.out_plane()..(s + 1) * g.c_out * g.out_plane()];
        let mut gx = if want_x {
            vec![T::zero(); g.c_in * g.in_plane()]
        } else {
            Vec::new()
        };
        let mut gk = if want_k { vec![T::zero(); klen] } else { Vec::new() };
        for oc in 0..g.c_out {
            let gplane = &gs[oc * g.out_plane()..(oc + 1) * g.out_plane()];
            for ic in 0..g.c_in {
                let in_plane = &xs[ic * g.in_plane()..(ic + 1) * g.in_plane()];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.k {
                        let kidx = ((oc * g.c_in + ic) * g.k + ky) * g.k + kx;
                        let wv = kernel[kidx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if ox_hi == ox_lo {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &in_plane[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                let go = grow[ox];
                                if want_k {
                                    acc += go * irow[ix];
                                }
                                if want_x {
                                    gx[ic * g.in_plane() + iy * g.w + ix] += wv * go;
                                }
                            }
                        }
                        if want_k {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gk)
    });

    let mut gx_all = want_x.then(|| Vec::with_capacity(x.len()));
    let mut gk_all = want_k.then(|| vec![T::zero(); klen]);
    for (gx, gk) in per_sample {
        if let Some(all) = gx_all.as_mut() {
            all.extend_from_slice(&gx);
        }
        if let Some(all) = gk_all.as_mut() {
            for (a, b) in all.iter_mut().zip(&gk) {
                *a += *b;
            }
        }
    }
    (gx_all, gk_all)
}

/// Non-overlapping `size`x`size` max pooling over planes. Returns the pooled
/// values and the flat input index of each maximum (first maximum on ties).
pub(crate) fn max_pool_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = h / size;
    let ow = w / size;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
