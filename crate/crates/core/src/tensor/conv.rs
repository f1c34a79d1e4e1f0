// im2col / col2im kernels behind conv2d.

use super::{gemm, Element, Mat};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample `[Cin, H, W]` into `[Cin*k*k, Ho*Wo]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npx = g.out_px();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npx..(row + 1) * npx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold `[Cin*k*k, Ho*Wo]` back onto `[Cin, H, W]`, accumulating.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npx = g.out_px();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npx..(row + 1) * npx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.out_px();
    let mut out = vec![T::zero(); batch * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * g.out_px()] };
    let kmat = Mat::new(kernel, g.cout, g.patch());
    for b in 0..batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let ob = &mut out[b * out_per..(b + 1) * out_per];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(kmat, Mat::new(src, g.patch(), g.out_px()), ob, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * g.out_px()..(co + 1) * g.out_px()] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dk: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    batch: usize,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_k, want_b) = want;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.out_px();
    let npx = g.out_px();
    let mut dx = want_x.then(|| vec![T::zero(); batch * in_per]);
    let mut dk = want_k.then(|| vec![T::zero(); kernel.len()]);
    let mut db = want_b.then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); g.patch() * npx] };
    let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); g.patch() * npx] };
    let kmat = Mat::new(kernel, g.cout, g.patch());
    for b in 0..batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let dyb = Mat::new(&dy[b * out_per..(b + 1) * out_per], g.cout, npx);
        if let Some(dk) = dk.as_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(dyb, Mat::new(src, g.patch(), npx).t(), dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if pointwise {
                gemm(kmat.t(), dyb, dxb, true);
            } else {
                gemm(kmat.t(), dyb, &mut dcols, false);
                col2im(&dcols, g, dxb);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dyb.data[co * npx..(co + 1) * npx].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dk, db }
}
