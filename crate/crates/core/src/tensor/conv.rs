//! Strided, zero-padded cross-correlation in up to three spatial dimensions,
//! and its adjoint (transposed convolution).
//!
//! All kernels work per sample on `[C, D, H, W]` slabs and lower the
//! correlation to GEMM over column buffers built a few output planes at a
//! time, so peak scratch memory stays near `CHUNK_ELEMS` regardless of volume
//! size. 2D convolution is the `D = 1` case.

use super::{gemm, numel, MatView, Scalar, Tensor};
use crate::error::{Error, Result};

const CHUNK_ELEMS: usize = 1 << 21;

/// Geometry of a correlation mapping an `inp` grid to an `out` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub inp: [usize; 3],
    pub k: [usize; 3],
    pub s: [usize; 3],
    pub p: [usize; 3],
    pub out: [usize; 3],
}

impl Geom {
    pub fn new(op: &'static str, inp: [usize; 3], k: [usize; 3], s: [usize; 3], p: [usize; 3]) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            if s[a] == 0 {
                return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
            }
            if inp[a] + 2 * p[a] < k[a] || k[a] == 0 {
                return Err(Error::shape(
                    op,
                    format!("padded extent {} smaller than kernel {}", inp[a] + 2 * p[a], k[a]),
                ));
            }
            out[a] = (inp[a] + 2 * p[a] - k[a]) / s[a] + 1;
        }
        Ok(Geom { inp, k, s, p, out })
    }

    fn in_vol(&self) -> usize {
        numel(&self.inp)
    }
    fn out_vol(&self) -> usize {
        numel(&self.out)
    }
    fn k_vol(&self) -> usize {
        numel(&self.k)
    }
}

/// Range of output indices `o` with `0 <= o*s + k - p < n_in`.
fn valid_range(n_out: usize, n_in: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if n_in + p > k { ((n_in - 1 + p - k) / s + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

fn planes_per_chunk(rows: usize, plane: usize) -> usize {
    (CHUNK_ELEMS / (rows * plane).max(1)).max(1)
}

/// Column buffer for output planes `z0..z1`: `cols[(ci,kz,ky,kx), o] = x[ci, o*s - p + k]`.
fn im2col<T: Scalar>(x: &[T], cin: usize, g: &Geom, z0: usize, z1: usize, cols: &mut [T]) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let plane = oh * ow;
    let nc = (z1 - z0) * plane;
    let in_vol = g.in_vol();
    let mut r = 0;
    for ci in 0..cin {
        let xc = &x[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..g.k[0] {
            for ky in 0..g.k[1] {
                let (ylo, yhi) = valid_range(oh, ih, ky, g.s[1], g.p[1]);
                for kx in 0..g.k[2] {
                    let (xlo, xhi) = valid_range(ow, iw, kx, g.s[2], g.p[2]);
                    let row = &mut cols[r * nc..(r + 1) * nc];
                    r += 1;
                    for (zi, oz) in (z0..z1).enumerate() {
                        let dst = &mut row[zi * plane..(zi + 1) * plane];
                        let iz = (oz * g.s[0] + kz) as isize - g.p[0] as isize;
                        if iz < 0 || iz as usize >= g.inp[0] {
                            dst.fill(T::zero());
                            continue;
                        }
                        let zbase = iz as usize * ih * iw;
                        for oy in 0..oh {
                            let d = &mut dst[oy * ow..(oy + 1) * ow];
                            if oy < ylo || oy >= yhi {
                                d.fill(T::zero());
                                continue;
                            }
                            let iy = oy * g.s[1] + ky - g.p[1];
                            let src = &xc[zbase + iy * iw..zbase + (iy + 1) * iw];
                            d[..xlo].fill(T::zero());
                            d[xhi..].fill(T::zero());
                            if xlo == xhi {
                                continue;
                            }
                            if g.s[2] == 1 {
                                let start = xlo + kx - g.p[2];
                                d[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    d[ox] = src[ox * g.s[2] + kx - g.p[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` for output planes `z0..z1`
/// back into `x`.
fn col2im<T: Scalar>(cols: &[T], cin: usize, g: &Geom, z0: usize, z1: usize, x: &mut [T]) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let plane = oh * ow;
    let nc = (z1 - z0) * plane;
    let in_vol = g.in_vol();
    let mut r = 0;
    for ci in 0..cin {
        let xc = &mut x[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..g.k[0] {
            for ky in 0..g.k[1] {
                let (ylo, yhi) = valid_range(oh, ih, ky, g.s[1], g.p[1]);
                for kx in 0..g.k[2] {
                    let (xlo, xhi) = valid_range(ow, iw, kx, g.s[2], g.p[2]);
                    let row = &cols[r * nc..(r + 1) * nc];
                    r += 1;
                    if xlo == xhi {
                        continue;
                    }
                    for (zi, oz) in (z0..z1).enumerate() {
                        let iz = (oz * g.s[0] + kz) as isize - g.p[0] as isize;
                        if iz < 0 || iz as usize >= g.inp[0] {
                            continue;
                        }
                        let zbase = iz as usize * ih * iw;
                        let src = &row[zi * plane..(zi + 1) * plane];
                        for oy in ylo..yhi {
                            let iy = oy * g.s[1] + ky - g.p[1];
                            let dst = &mut xc[zbase + iy * iw..zbase + (iy + 1) * iw];
                            let s_row = &src[oy * ow..(oy + 1) * ow];
                            if g.s[2] == 1 {
                                let start = xlo + kx - g.p[2];
                                for (d, &v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&s_row[xlo..xhi]) {
                                    *d = *d + v;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let d = &mut dst[ox * g.s[2] + kx - g.p[2]];
                                    *d = *d + s_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[n, co] = sum_ci w[co, ci] (*) x[n, ci]` (no bias).
pub(crate) fn corr_forward<T: Scalar>(x: &[T], n: usize, cin: usize, w: &[T], cout: usize, g: &Geom) -> Vec<T> {
    let kk = cin * g.k_vol();
    let plane = g.out[1] * g.out[2];
    let step = planes_per_chunk(kk, plane);
    let (in_vol, out_vol) = (g.in_vol(), g.out_vol());
    let mut y = vec![T::zero(); n * cout * out_vol];
    let mut cols = vec![T::zero(); kk * step.min(g.out[0]) * plane];
    for ni in 0..n {
        let xs = &x[ni * cin * in_vol..(ni + 1) * cin * in_vol];
        let ys = &mut y[ni * cout * out_vol..(ni + 1) * cout * out_vol];
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + step).min(g.out[0]);
            let nc = (z1 - z0) * plane;
            im2col(xs, cin, g, z0, z1, &mut cols[..kk * nc]);
            let cv = MatView { rows: cout, cols: nc, rs: out_vol, cs: 1 };
            gemm(
                w,
                MatView::row_major(cout, kk),
                &cols[..kk * nc],
                MatView::row_major(kk, nc),
                T::zero(),
                &mut ys[z0 * plane..],
                cv,
            );
            z0 = z1;
        }
    }
    y
}

/// Adjoint of [`corr_forward`] with respect to its input.
pub(crate) fn corr_backward_data<T: Scalar>(dy: &[T], n: usize, cout: usize, w: &[T], cin: usize, g: &Geom) -> Vec<T> {
    let kk = cin * g.k_vol();
    let plane = g.out[1] * g.out[2];
    let step = planes_per_chunk(kk, plane);
    let (in_vol, out_vol) = (g.in_vol(), g.out_vol());
    let mut dx = vec![T::zero(); n * cin * in_vol];
    let mut cols = vec![T::zero(); kk * step.min(g.out[0]) * plane];
    for ni in 0..n {
        let ys = &dy[ni * cout * out_vol..(ni + 1) * cout * out_vol];
        let xs = &mut dx[ni * cin * in_vol..(ni + 1) * cin * in_vol];
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + step).min(g.out[0]);
            let nc = (z1 - z0) * plane;
            // cols = w^T dy for these planes
            gemm(
                w,
                MatView::row_major(cout, kk).t(),
                &ys[z0 * plane..],
                MatView { rows: cout, cols: nc, rs: out_vol, cs: 1 },
                T::zero(),
                &mut cols[..kk * nc],
                MatView::row_major(kk, nc),
            );
            col2im(&cols[..kk * nc], cin, g, z0, z1, xs);
            z0 = z1;
        }
    }
    dx
}

/// Gradient of [`corr_forward`] with respect to the weights.
pub(crate) fn corr_backward_weight<T: Scalar>(x: &[T], dy: &[T], n: usize, cin: usize, cout: usize, g: &Geom) -> Vec<T> {
    let kk = cin * g.k_vol();
    let plane = g.out[1] * g.out[2];
    let step = planes_per_chunk(kk, plane);
    let (in_vol, out_vol) = (g.in_vol(), g.out_vol());
    let mut dw = vec![T::zero(); cout * kk];
    let mut cols = vec![T::zero(); kk * step.min(g.out[0]) * plane];
    for ni in 0..n {
        let xs = &x[ni * cin * in_vol..(ni + 1) * cin * in_vol];
        let ys = &dy[ni * cout * out_vol..(ni + 1) * cout * out_vol];
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + step).min(g.out[0]);
            let nc = (z1 - z0) * plane;
            im2col(xs, cin, g, z0, z1, &mut cols[..kk * nc]);
            let av = MatView { rows: cout, cols: nc, rs: out_vol, cs: 1 };
            gemm(
                &ys[z0 * plane..],
                av,
                &cols[..kk * nc],
                MatView::row_major(kk, nc).t(),
                T::one(),
                &mut dw,
                MatView::row_major(cout, kk),
            );
            z0 = z1;
        }
    }
    dw
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T], n: usize, c: usize, vol: usize) {
    for ni in 0..n {
        for ci in 0..c {
            let bv = b[ci];
            y[(ni * c + ci) * vol..][..vol].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], n: usize, c: usize, vol: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            out[ci] = out[ci] + g[(ni * c + ci) * vol..][..vol].iter().copied().sum::<T>();
        }
    }
    out
}

/// Lifts `[N, C, spatial...]` of rank `r` (1..=3 spatial dims) to 3 spatial axes.
fn spatial3(shape: &[usize]) -> [usize; 3] {
    let sp = &shape[2..];
    let mut out = [1; 3];
    out[3 - sp.len()..].copy_from_slice(sp);
    out
}

fn lift_hyper(rank: usize, v: usize, fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - rank..].fill(v);
    out
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, c: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c] => Err(Error::shape(op, format!("bias {:?} for {c} channels", b.shape()))),
        _ => Ok(()),
    }
}

fn conv_nd<T: Scalar>(
    op: &'static str,
    rank: usize,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != rank + 2 || ws.len() != rank + 2 {
        return Err(Error::shape(op, format!("input {xs:?} / weight {ws:?} must have rank {}", rank + 2)));
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    if ws[1] != cin {
        return Err(Error::shape(op, format!("input has {cin} channels but weight {ws:?} expects {}", ws[1])));
    }
    check_bias(op, bias, cout)?;
    let g = Geom::new(
        op,
        spatial3(&xs),
        spatial3(&ws),
        lift_hyper(rank, stride, 1),
        lift_hyper(rank, padding, 0),
    )?;
    let mut y = corr_forward(&x.data(), n, cin, &w.data(), cout, &g);
    let vol = g.out_vol();
    if let Some(b) = bias {
        add_bias(&mut y, &b.data(), n, cout, vol);
    }
    let mut shape = vec![n, cout];
    shape.extend_from_slice(&g.out[3 - rank..]);
    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        op,
        shape,
        y,
        inputs,
        Box::new(move |gy, needs| {
            let gx = needs[0].then(|| corr_backward_data(gy, n, cout, &wc.data(), cin, &g));
            let gw = needs[1].then(|| corr_backward_weight(&xc.data(), gy, n, cin, cout, &g));
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| bias_grad(gy, n, cout, vol)));
            }
            out
        }),
    ))
}

/// 3D cross-correlation: input `[N, Cin, D, H, W]`, weight `[Cout, Cin, kd, kh, kw]`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv_nd("conv3d", 3, x, w, bias, stride, padding)
}

/// 2D cross-correlation: input `[N, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv_nd("conv2d", 2, x, w, bias, stride, padding)
}

/// Transposed 3D convolution, the adjoint of [`conv3d`] with the same weight.
///
/// Weight layout is `[Cin, Cout, kd, kh, kw]`; each output extent is
/// `(in - 1) * stride - 2 * padding + k`.
pub fn conv_transpose3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose3d";
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape(OP, format!("input {xs:?} / weight {ws:?} must have rank 5")));
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[1]);
    if ws[0] != cin {
        return Err(Error::shape(OP, format!("input has {cin} channels but weight {ws:?} expects {}", ws[0])));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{OP}: stride must be >= 1")));
    }
    check_bias(OP, bias, cout)?;
    let mut out = [0usize; 3];
    for a in 0..3 {
        let full = (xs[2 + a] - 1) * stride + ws[2 + a];
        if xs[2 + a] == 0 || full <= 2 * padding {
            return Err(Error::shape(OP, format!("padding {padding} leaves no output along axis {a}")));
        }
        out[a] = full - 2 * padding;
    }
    // the forward correlation this op is the adjoint of: out grid -> x grid
    let g = Geom::new(OP, out, spatial3(&ws), [stride; 3], [padding; 3])?;
    debug_assert_eq!(g.out, [xs[2], xs[3], xs[4]]);
    let mut y = corr_backward_data(&x.data(), n, cin, &w.data(), cout, &g);
    let vol = numel(&out);
    if let Some(b) = bias {
        add_bias(&mut y, &b.data(), n, cout, vol);
    }
    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        OP,
        vec![n, cout, out[0], out[1], out[2]],
        y,
        inputs,
        Box::new(move |gy, needs| {
            let gx = needs[0].then(|| corr_forward(gy, n, cout, &wc.data(), cin, &g));
            let gw = needs[1].then(|| corr_backward_weight(gy, &xc.data(), n, cout, cin, &g));
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(gy, n, cout, vol)));
            }
            grads
        }),
    ))
}
