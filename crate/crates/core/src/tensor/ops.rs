use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance guard for [`instance_norm`].
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

pub fn pointwise<T: Scalar>(x: &Tensor<T>, kind: Pointwise) -> Tensor<T> {
    match kind {
        Pointwise::Relu => relu(x),
        Pointwise::LeakyRelu(alpha) => leaky_relu(x, alpha),
        Pointwise::Sigmoid => sigmoid(x),
    }
}

/// ReLU; the derivative at exactly zero is taken as zero.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu_named(x, 0.0, "relu")
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    leaky_relu_named(x, alpha, "leaky_relu")
}

fn leaky_relu_named<T: Scalar>(x: &Tensor<T>, alpha: f64, op: &'static str) -> Tensor<T> {
    let a = T::of(alpha);
    let xs = x.to_vec();
    let out = xs.iter().map(|&v| if v > T::zero() { v } else { a * v }).collect();
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            vec![Some(
                g.iter()
                    .zip(&xs)
                    .map(|(&g, &v)| if v > T::zero() { g } else { a * g })
                    .collect(),
            )]
        }),
    )
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let y = out.clone();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            vec![Some(
                g.iter().zip(&y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
            )]
        }),
    )
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn square<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.to_vec();
    let out = xs.iter().map(|&v| v * v).collect();
    Tensor::from_op(
        "square",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let two = T::of(2.0);
            vec![Some(g.iter().zip(&xs).map(|(&g, &v)| two * v * g).collect())]
        }),
    )
}

pub fn scale<T: Scalar>(x: &Tensor<T>, k: f64) -> Tensor<T> {
    let k = T::of(k);
    let out = x.data().iter().map(|&v| v * k).collect();
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|&g| g * k).collect())]),
    )
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::of(c);
    let out = x.data().iter().map(|&v| v + c).collect();
    Tensor::from_op(
        "add_scalar",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    )
}

#[derive(Clone, Copy)]
enum Layout {
    Same,
    /// `b` is `[N, 1, ...]` against `a`'s `[N, C, ...]`.
    ChannelGate { n: usize, c: usize, spatial: usize },
}

fn binary_layout<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Layout> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(Layout::Same);
    }
    if sa.len() >= 2 && sa.len() == sb.len() && sb[1] == 1 && sa[0] == sb[0] && sa[2..] == sb[2..] {
        return Ok(Layout::ChannelGate {
            n: sa[0],
            c: sa[1],
            spatial: numel(&sa[2..]),
        });
    }
    Err(Error::shape(op, format!("cannot combine {sa:?} with {sb:?}")))
}

/// Sums `g` (shaped like `a`) over the channel axis into `b`'s layout.
fn channel_sum<T: Scalar>(g: &[T], n: usize, c: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * spatial];
    for ni in 0..n {
        let dst = &mut out[ni * spatial..(ni + 1) * spatial];
        for ci in 0..c {
            let src = &g[(ni * c + ci) * spatial..][..spatial];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
    }
    out
}

fn zip_layout<T: Scalar>(a: &[T], b: &[T], layout: Layout, f: impl Fn(T, T) -> T) -> Vec<T> {
    match layout {
        Layout::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Layout::ChannelGate { n, c, spatial } => {
            let mut out = Vec::with_capacity(a.len());
            for ni in 0..n {
                let bs = &b[ni * spatial..(ni + 1) * spatial];
                for ci in 0..c {
                    let as_ = &a[(ni * c + ci) * spatial..][..spatial];
                    out.extend(as_.iter().zip(bs).map(|(&x, &y)| f(x, y)));
                }
            }
            out
        }
    }
}

fn reduce_to_b<T: Scalar>(g: Vec<T>, layout: Layout) -> Vec<T> {
    match layout {
        Layout::Same => g,
        Layout::ChannelGate { n, c, spatial } => channel_sum(&g, n, c, spatial),
    }
}

/// Elementwise sum. `b` may be a single-channel map broadcast over `a`'s channels.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let layout = binary_layout("add", a, b)?;
    let out = zip_layout(&a.data(), &b.data(), layout, |x, y| x + y);
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| reduce_to_b(g.to_vec(), layout)),
            ]
        }),
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let layout = binary_layout("sub", a, b)?;
    let out = zip_layout(&a.data(), &b.data(), layout, |x, y| x - y);
    Ok(Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| reduce_to_b(g.iter().map(|&v| -v).collect(), layout)),
            ]
        }),
    ))
}

/// Elementwise (Hadamard) product. `b` may be a single-channel gate broadcast
/// over `a`'s channels; its gradient is then summed over those channels.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let layout = binary_layout("mul", a, b)?;
    let av = a.to_vec();
    let bv = b.to_vec();
    let out = zip_layout(&av, &bv, layout, |x, y| x * y);
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| zip_layout(g, &bv, layout, |g, y| g * y));
            let gb = needs[1].then(|| reduce_to_b(g.iter().zip(&av).map(|(&g, &x)| g * x).collect(), layout));
            vec![ga, gb]
        }),
    ))
}

/// Softmax over axis 1 at every (batch, spatial) location.
pub fn softmax_channel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 || shape[1] == 0 {
        return Err(Error::shape("softmax_channel", format!("needs [N, C>=1, ...], got {shape:?}")));
    }
    let (n, c, s) = (shape[0], shape[1], numel(&shape[2..]));
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        let base = ni * c * s;
        for si in 0..s {
            let at = |ci: usize| base + ci * s + si;
            let m = (0..c).map(|ci| xs[at(ci)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ci in 0..c {
                let e = (xs[at(ci)] - m).exp();
                out[at(ci)] = e;
                z = z + e;
            }
            for ci in 0..c {
                out[at(ci)] = out[at(ci)] / z;
            }
        }
    }
    drop(xs);
    let y = out.clone();
    Ok(Tensor::from_op(
        "softmax_channel",
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ni in 0..n {
                let base = ni * c * s;
                for si in 0..s {
                    let dot = (0..c).fold(T::zero(), |acc, ci| {
                        let i = base + ci * s + si;
                        acc + g[i] * y[i]
                    });
                    for ci in 0..c {
                        let i = base + ci * s + si;
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

pub fn concat_channels<T: Scalar>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let s0 = first.shape();
    if s0.len() < 2 {
        return Err(Error::shape("concat_channels", format!("needs [N, C, ...], got {s0:?}")));
    }
    for t in inputs {
        let s = t.shape();
        if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
            return Err(Error::shape("concat_channels", format!("{s:?} does not align with {s0:?}")));
        }
    }
    let n = s0[0];
    let spatial = numel(&s0[2..]);
    let chans: Vec<usize> = inputs.iter().map(|t| t.shape()[1]).collect();
    let total: usize = chans.iter().sum();
    let mut out = Vec::with_capacity(n * total * spatial);
    for ni in 0..n {
        for (t, &c) in inputs.iter().zip(&chans) {
            out.extend_from_slice(&t.data()[ni * c * spatial..(ni + 1) * c * spatial]);
        }
    }
    let mut shape = s0.to_vec();
    shape[1] = total;
    Ok(Tensor::from_op(
        "concat_channels",
        shape,
        out,
        inputs.to_vec(),
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&chans)
                .map(|(&need, &c)| need.then(|| Vec::with_capacity(n * c * spatial)))
                .collect();
            for ni in 0..n {
                let mut off = ni * total * spatial;
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    if let Some(gi) = gi {
                        gi.extend_from_slice(&g[off..off + c * spatial]);
                    }
                    off += c * spatial;
                }
            }
            grads
        }),
    ))
}

/// Channels `start..start + len` of `[N, C, ...]`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 || len == 0 || start + len > shape[1] {
        return Err(Error::shape(
            "slice_channels",
            format!("channels {start}..{} out of {shape:?}", start + len),
        ));
    }
    let (n, c, s) = (shape[0], shape[1], numel(&shape[2..]));
    let xs = x.data();
    let mut out = Vec::with_capacity(n * len * s);
    for ni in 0..n {
        out.extend_from_slice(&xs[(ni * c + start) * s..(ni * c + start + len) * s]);
    }
    drop(xs);
    let mut out_shape = shape;
    out_shape[1] = len;
    Ok(Tensor::from_op(
        "slice_channels",
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * c * s];
            for ni in 0..n {
                gx[(ni * c + start) * s..(ni * c + start + len) * s]
                    .copy_from_slice(&g[ni * len * s..(ni + 1) * len * s]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Per-(sample, channel) normalization over the spatial axes followed by a
/// per-channel affine map.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::shape("instance_norm", format!("needs [N, C, spatial...], got {shape:?}")));
    }
    let (n, c, m) = (shape[0], shape[1], numel(&shape[2..]));
    if m < 2 {
        return Err(Error::shape("instance_norm", format!("spatial volume {m} < 2")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "instance_norm",
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let xs = x.data();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mf = T::of(m as f64);
    let mut xhat = vec![T::zero(); xs.len()];
    let mut inv_std = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let r = (ni * c + ci) * m..(ni * c + ci + 1) * m;
            let seg = &xs[r.clone()];
            let mean = seg.iter().copied().sum::<T>() / mf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[ni * c + ci] = is;
            for (i, &v) in r.clone().zip(seg) {
                let h = (v - mean) * is;
                xhat[i] = h;
                out[i] = gv[ci] * h + bv[ci];
            }
        }
    }
    drop(xs);
    Ok(Tensor::from_op(
        "instance_norm",
        shape,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); g.len()]);
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let r = (ni * c + ci) * m..(ni * c + ci + 1) * m;
                    let (mut sum_g, mut sum_gh) = (T::zero(), T::zero());
                    for i in r.clone() {
                        sum_g = sum_g + g[i];
                        sum_gh = sum_gh + g[i] * xhat[i];
                    }
                    ggamma[ci] = ggamma[ci] + sum_gh;
                    gbeta[ci] = gbeta[ci] + sum_g;
                    if let Some(gx) = gx.as_mut() {
                        // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let k = gv[ci] * inv_std[ni * c + ci];
                        let mg = sum_g / mf;
                        let mgh = sum_gh / mf;
                        for i in r {
                            gx[i] = k * (g[i] - mg - xhat[i] * mgh);
                        }
                    }
                }
            }
            vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        }),
    ))
}

/// Inserts a new axis of extent `repeats` at `axis` and tiles the input along it.
pub fn expand_repeat<T: Scalar>(x: &Tensor<T>, axis: usize, repeats: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if repeats == 0 {
        return Err(Error::InvalidArgument("expand_repeat: repeats must be >= 1".into()));
    }
    if axis < 2 || axis > shape.len() {
        return Err(Error::shape(
            "expand_repeat",
            format!("axis {axis} outside spatial range 2..={} of {shape:?}", shape.len()),
        ));
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis..]);
    let xs = x.data();
    let mut out = Vec::with_capacity(outer * repeats * inner);
    for o in 0..outer {
        let src = &xs[o * inner..(o + 1) * inner];
        for _ in 0..repeats {
            out.extend_from_slice(src);
        }
    }
    drop(xs);
    let mut new_shape = shape.to_vec();
    new_shape.insert(axis, repeats);
    Ok(Tensor::from_op(
        "expand_repeat",
        new_shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut gx[o * inner..(o + 1) * inner];
                for r in 0..repeats {
                    let src = &g[(o * repeats + r) * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the layout where output axis `d` is
/// input axis `order[d]`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], order: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let nd = out_shape.len();
    if nd == 0 {
        out.push(src[0]);
        return out;
    }
    let last = nd - 1;
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < total {
        let step = src_strides[last];
        for k in 0..out_shape[last] {
            out.push(src[base + k * step]);
        }
        // advance the odometer over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Reorders axes: output axis `d` is input axis `order[d]`.
pub fn permute_axes<T: Scalar>(x: &Tensor<T>, order: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let mut seen = vec![false; shape.len()];
    if order.len() != shape.len() || order.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(
            "permute_axes",
            format!("{order:?} is not a permutation of the axes of {shape:?}"),
        ));
    }
    let out = permute_data(&x.data(), &shape, order);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let mut inverse = vec![0; order.len()];
    for (d, &a) in order.iter().enumerate() {
        inverse[a] = d;
    }
    let back_shape = out_shape.clone();
    Ok(Tensor::from_op(
        "permute_axes",
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(permute_data(g, &back_shape, &inverse))]),
    ))
}

/// Arithmetic mean over `axes`, which are removed from the shape.
pub fn reduce_mean<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() || reduced[a] {
            return Err(Error::shape("reduce_mean", format!("invalid axes {axes:?} for {shape:?}")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&s, _)| s)
        .collect();
    let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&s, _)| s).product();
    // output stride of each input axis (0 for reduced axes)
    let ostr = strides(&out_shape);
    let mut map_stride = vec![0usize; shape.len()];
    let mut k = 0;
    for (a, &r) in reduced.iter().enumerate() {
        if !r {
            map_stride[a] = ostr[k];
            k += 1;
        }
    }
    let out_index = move |flat: usize| -> usize {
        let mut rem = flat;
        let mut o = 0;
        for a in (0..shape.len()).rev() {
            o += (rem % shape[a]) * map_stride[a];
            rem /= shape[a];
        }
        o
    };
    let xs = x.data();
    let mut out = vec![T::zero(); numel(&out_shape)];
    for (i, &v) in xs.iter().enumerate() {
        let o = out_index(i);
        out[o] = out[o] + v;
    }
    let inv = T::of(1.0 / count.max(1) as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    let n_in = xs.len();
    drop(xs);
    Ok(Tensor::from_op(
        "reduce_mean",
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| vec![Some((0..n_in).map(|i| g[out_index(i)] * inv).collect())]),
    ))
}

/// Mean of every element, as a scalar tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let axes: Vec<usize> = (0..x.ndim()).collect();
    reduce_mean(x, &axes).expect("all axes are valid")
}
