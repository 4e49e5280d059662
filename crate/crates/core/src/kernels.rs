//! Raw loops behind the tape operations. Everything here works on flat
//! row-major slices; shape validation happens in the callers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar};

/// Work (in multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("shapes {a:?} and {b:?} are not broadcastable"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// For every element of `out_shape`, the flat index into a tensor of
/// `shape` that broadcasts to it.
pub fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    if shape == out_shape {
        return (0..n).collect();
    }
    let src = numel(shape);
    // Trailing-suffix broadcast (bias rows) is a plain modulo.
    if out_shape.ends_with(shape) {
        return (0..n).map(|i| i % src).collect();
    }
    let bstr = broadcast_strides(shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(flat);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += bstr[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= bstr[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `grad` (shaped like the broadcast output) back to `shape`.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], out_shape: &[usize], shape: &[usize]) -> Vec<T> {
    if shape == out_shape {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); numel(shape)];
    for (g, i) in grad.iter().zip(broadcast_index(shape, out_shape)) {
        acc[i] = acc[i] + *g;
    }
    acc
}

/// `out (+)= a[m,k] · b[k,n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let row = |i: usize, orow: &mut [T]| {
        if !acc {
            orow.iter_mut().for_each(|v| *v = T::zero());
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().fold(T::zero(), |s, v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `out (+)= a[m,k] · b[n,k]ᵀ`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let dot = dot(arow, brow);
            *o = if acc { *o + dot } else { dot };
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    }
}

/// `out (+)= a[k,m]ᵀ · b[k,n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let row = |i: usize, orow: &mut [T]| {
        if !acc {
            orow.iter_mut().for_each(|v| *v = T::zero());
        }
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    }
}

/// Batch bookkeeping for `[.., m, k] · [.., k, n]`.
#[derive(Debug, Clone)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// Per output batch: (batch index into a, batch index into b).
    pub pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions differ: {a:?} x {b:?}")));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let batch = broadcast_shape(a_batch, b_batch)
            .map_err(|_| Error::dim(format!("matmul batch dims not broadcastable: {a:?} x {b:?}")))?;
        let ia = broadcast_index(a_batch, &batch);
        let ib = broadcast_index(b_batch, &batch);
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            pairs: ia.into_iter().zip(ib).collect(),
        })
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![T::zero(); self.pairs.len() * m * n];
        let run = |(o, &(ia, ib)): (&mut [T], &(usize, usize))| {
            gemm(
                &a[ia * m * k..(ia + 1) * m * k],
                &b[ib * k * n..(ib + 1) * k * n],
                o,
                m,
                k,
                n,
                false,
            )
        };
        if self.pairs.len() > 1 && self.pairs.len() * m * k * n >= PAR_THRESHOLD {
            out.par_chunks_mut(m * n).zip(self.pairs.par_iter()).for_each(run);
        } else {
            out.chunks_mut(m * n).zip(self.pairs.iter()).for_each(run);
        }
        out
    }

    /// Gradients w.r.t. `a` and `b` given upstream `g`.
    pub fn backward<T: Scalar>(&self, a: &[T], b: &[T], g: &[T], want_a: bool, want_b: bool) -> (Vec<T>, Vec<T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = if want_a { vec![T::zero(); a.len()] } else { Vec::new() };
        let mut gb = if want_b { vec![T::zero(); b.len()] } else { Vec::new() };
        for (bo, &(ia, ib)) in self.pairs.iter().enumerate() {
            let gs = &g[bo * m * n..(bo + 1) * m * n];
            if want_a {
                gemm_nt(
                    gs,
                    &b[ib * k * n..(ib + 1) * k * n],
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                    true,
                );
            }
            if want_b {
                gemm_tn(
                    &a[ia * m * k..(ia + 1) * m * k],
                    gs,
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    k,
                    m,
                    n,
                    true,
                );
            }
        }
        (ga, gb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Out-of-range reads take the nearest edge pixel.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl Conv2dGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
        pad_mode: PadMode,
    ) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects [b,c,h,w] input and [o,c/g,kh,kw] weight, got {x:?} and {w:?}"
            )));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::Parameter("conv2d stride and groups must be positive".into()));
        }
        let (c_in, c_out) = (x[1], w[0]);
        if c_in % groups != 0 || c_out % groups != 0 || w[1] * groups != c_in {
            return Err(Error::dim(format!(
                "conv2d channel/group mismatch: input {x:?}, weight {w:?}, groups {groups}"
            )));
        }
        if x[2] + 2 * padding < w[2] || x[3] + 2 * padding < w[3] {
            return Err(Error::dim(format!(
                "conv2d kernel {}x{} larger than padded input {x:?} (padding {padding})",
                w[2], w[3]
            )));
        }
        Ok(Self {
            batch: x[0],
            c_in,
            h: x[2],
            w: x[3],
            c_out,
            kh: w[2],
            kw: w[3],
            stride,
            padding,
            groups,
            pad_mode,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.out_h(), self.out_w()]
    }

    #[inline]
    fn src(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        match self.pad_mode {
            PadMode::Zeros => {
                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                    None
                } else {
                    Some((iy as usize, ix as usize))
                }
            }
            PadMode::Replicate => Some((iy.clamp(0, h - 1) as usize, ix.clamp(0, w - 1) as usize)),
        }
    }

    /// Source pixel of every (kernel tap, output pixel) pair, `[kh*kw, oh*ow]`;
    /// `usize::MAX` marks a zero-padded read.
    fn taps(&self) -> Vec<usize> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut idx = Vec::with_capacity(self.kh * self.kw * oh * ow);
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                for oy in 0..oh {
                    for ox in 0..ow {
                        idx.push(self.src(oy, ky, ox, kx).map_or(usize::MAX, |(iy, ix)| iy * self.w + ix));
                    }
                }
            }
        }
        idx
    }

    /// Unfolds group `g` of the whole batch into `[cin_g*kh*kw, b*oh*ow]`
    /// (columns ordered image-major).
    fn im2col<T: Scalar>(&self, x: &[T], g: usize, taps: &[usize], col: &mut [T]) {
        let in_plane = self.h * self.w;
        let cin_g = self.c_in / self.groups;
        let ksz = self.kh * self.kw;
        let plane = taps.len() / ksz;
        let n = self.batch * plane;
        let pointwise = ksz == 1 && self.stride == 1 && self.padding == 0;
        for ic in 0..cin_g {
            for kk in 0..ksz {
                let t = &taps[kk * plane..][..plane];
                let row = &mut col[(ic * ksz + kk) * n..][..n];
                for (bi, r) in row.chunks_mut(plane).enumerate() {
                    let xc = &x[(bi * self.c_in + g * cin_g + ic) * in_plane..][..in_plane];
                    if pointwise {
                        r.copy_from_slice(xc);
                        continue;
                    }
                    for (c, &ti) in r.iter_mut().zip(t) {
                        *c = if ti == usize::MAX { T::zero() } else { xc[ti] };
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
        let plane = self.out_h() * self.out_w();
        let cout_g = self.c_out / self.groups;
        let k = (self.c_in / self.groups) * self.kh * self.kw;
        let n = self.batch * plane;
        let taps = self.taps();
        let mut out = vec![T::zero(); self.batch * self.c_out * plane];
        let mut col = vec![T::zero(); k * n];
        let mut og = vec![T::zero(); cout_g * n];
        for g in 0..self.groups {
            self.im2col(x, g, &taps, &mut col);
            gemm(&wt[g * cout_g * k..][..cout_g * k], &col, &mut og, cout_g, k, n, false);
            for ocl in 0..cout_g {
                let oc = g * cout_g + ocl;
                let b0 = bias.map_or(T::zero(), |b| b[oc]);
                for (bi, src) in og[ocl * n..][..n].chunks(plane).enumerate() {
                    let dst = &mut out[(bi * self.c_out + oc) * plane..][..plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + b0;
                    }
                }
            }
        }
        out
    }

    /// Returns (grad input, grad weight, grad bias).
    pub fn backward<T: Scalar>(&self, x: &[T], wt: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let plane = self.out_h() * self.out_w();
        let cin_g = self.c_in / self.groups;
        let cout_g = self.c_out / self.groups;
        let ksz = self.kh * self.kw;
        let k = cin_g * ksz;
        let n = self.batch * plane;
        let in_plane = self.h * self.w;
        let taps = self.taps();

        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); wt.len()];
        let mut col = vec![T::zero(); k * n];
        let mut gcol = vec![T::zero(); k * n];
        let mut gg = vec![T::zero(); cout_g * n];
        for grp in 0..self.groups {
            for ocl in 0..cout_g {
                let oc = grp * cout_g + ocl;
                for (bi, dst) in gg[ocl * n..][..n].chunks_mut(plane).enumerate() {
                    dst.copy_from_slice(&g[(bi * self.c_out + oc) * plane..][..plane]);
                }
            }
            self.im2col(x, grp, &taps, &mut col);
            gemm_nt(
                &gg,
                &col,
                &mut gw[grp * cout_g * k..][..cout_g * k],
                cout_g,
                n,
                k,
                false,
            );
            gemm_tn(
                &wt[grp * cout_g * k..][..cout_g * k],
                &gg,
                &mut gcol,
                k,
                cout_g,
                n,
                false,
            );
            for ic in 0..cin_g {
                for kk in 0..ksz {
                    let t = &taps[kk * plane..][..plane];
                    let row = &gcol[(ic * ksz + kk) * n..][..n];
                    for (bi, r) in row.chunks(plane).enumerate() {
                        let gxc = &mut gx[(bi * self.c_in + grp * cin_g + ic) * in_plane..][..in_plane];
                        for (&v, &ti) in r.iter().zip(t) {
                            if ti != usize::MAX {
                                gxc[ti] = gxc[ti] + v;
                            }
                        }
                    }
                }
            }
        }

        let mut gb = vec![T::zero(); self.c_out];
        for bi in 0..self.batch {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let go = &g[(bi * self.c_out + oc) * plane..][..plane];
                *acc = *acc + go.iter().copied().sum::<T>();
            }
        }
        (gx, gw, gb)
    }
}
