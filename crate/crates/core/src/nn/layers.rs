//! Layer kernels on channel-last single-sample tensors.
//!
//! Each forward function has a matching backward that returns the
//! gradient with respect to its input and, where present, its weights.
//! Loops run in a fixed order so results are bit-reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::Real;
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims};

/// Dense activation of shape `(x, y, z, channels)`, channel fastest, then
/// raster order over voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Dims, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != voxel_count(dims) * channels {
            return Err(Error::Shape(format!(
                "tensor {dims:?}x{channels} needs {} values, got {}",
                voxel_count(dims) * channels,
                data.len()
            )));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![T::zero(); voxel_count(dims) * channels],
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }
}

fn check_len<T>(what: &str, got: &[T], want: usize) -> Result<()> {
    if got.len() != want {
        return Err(Error::Shape(format!("{what}: expected {want} values, got {}", got.len())));
    }
    Ok(())
}

/// Valid output range along one axis for a tap offset `d`.
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

/// Taps of a cubic kernel of odd size `k`, in weight-layout order
/// `(kx, ky, kz)` with `kz` fastest.
fn taps(k: usize) -> Vec<[isize; 3]> {
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k * k);
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Visits every `(output row start, input row start, run length)` for tap
/// `d`, where rows run along x.
fn for_each_run(dims: Dims, d: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = dims;
    let (x0, x1) = tap_range(d[0], nx);
    let (y0, y1) = tap_range(d[1], ny);
    let (z0, z1) = tap_range(d[2], nz);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let zs = (z as isize + d[2]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + d[1]) as usize;
            let out = x0 + nx * (y + ny * z);
            let inp = (x0 as isize + d[0]) as usize + nx * (ys + ny * zs);
            f(out, inp, x1 - x0);
        }
    }
}

/// Zero-padded, stride-1 cross-correlation with a cubic kernel of odd size
/// `k`. Weights are laid out `(kx, ky, kz, cin, cout)`.
pub fn conv3d<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], k: usize, cout: usize) -> Result<Tensor<T>> {
    let cin = x.channels;
    check_len("conv weights", w, k * k * k * cin * cout)?;
    check_len("conv bias", b, cout)?;
    let mut y = Tensor::zeros(x.dims, cout);
    for row in y.data.chunks_exact_mut(cout) {
        row.copy_from_slice(b);
    }
    for (t, d) in taps(k).into_iter().enumerate() {
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        for_each_run(x.dims, d, |o, i, len| {
            let ys = &mut y.data[o * cout..(o + len) * cout];
            let xs = &x.data[i * cin..(i + len) * cin];
            for (yv, xv) in ys.chunks_exact_mut(cout).zip(xs.chunks_exact(cin)) {
                for (&a, wr) in xv.iter().zip(wt.chunks_exact(cout)) {
                    if a == T::zero() {
                        continue;
                    }
                    for (o, &ww) in yv.iter_mut().zip(wr) {
                        *o = *o + a * ww;
                    }
                }
            }
        });
    }
    Ok(y)
}

/// Gradients of [`conv3d`]: `(d input, d weights, d bias)`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    k: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let cin = x.channels;
    let cout = gy.channels;
    check_len("conv weights", w, k * k * k * cin * cout)?;
    if gy.dims != x.dims {
        return Err(Error::Shape("conv gradient dims differ from input".into()));
    }
    let mut gb = vec![T::zero(); cout];
    for row in gy.data.chunks_exact(cout) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    let mut gx = Tensor::zeros(x.dims, cin);
    let mut gw = vec![T::zero(); w.len()];
    let mut wt = vec![T::zero(); cin * cout];
    for (t, d) in taps(k).into_iter().enumerate() {
        let wtap = &w[t * cin * cout..(t + 1) * cin * cout];
        for ci in 0..cin {
            for co in 0..cout {
                wt[co * cin + ci] = wtap[ci * cout + co];
            }
        }
        let gwt = &mut gw[t * cin * cout..(t + 1) * cin * cout];
        for_each_run(x.dims, d, |o, i, len| {
            let gys = &gy.data[o * cout..(o + len) * cout];
            let xs = &x.data[i * cin..(i + len) * cin];
            let gxs = &mut gx.data[i * cin..(i + len) * cin];
            for ((gyv, xv), gxv) in gys
                .chunks_exact(cout)
                .zip(xs.chunks_exact(cin))
                .zip(gxs.chunks_exact_mut(cin))
            {
                for (&g, wr) in gyv.iter().zip(wt.chunks_exact(cin)) {
                    if g == T::zero() {
                        continue;
                    }
                    for (o, &ww) in gxv.iter_mut().zip(wr) {
                        *o = *o + g * ww;
                    }
                }
                for (&a, gr) in xv.iter().zip(gwt.chunks_exact_mut(cout)) {
                    if a == T::zero() {
                        continue;
                    }
                    for (o, &g) in gr.iter_mut().zip(gyv) {
                        *o = *o + a * g;
                    }
                }
            }
        });
    }
    Ok((gx, gw, gb))
}

fn halve(dims: Dims) -> Result<Dims> {
    if dims.iter().any(|&d| d % 2 != 0 || d == 0) {
        return Err(Error::Shape(format!("dims {dims:?} not divisible by the 2x2x2 pool")));
    }
    Ok([dims[0] / 2, dims[1] / 2, dims[2] / 2])
}

/// 2×2×2 max pooling. Also returns, per output element, the flat input
/// index that won (first maximum in x, y, z scan order).
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let out_dims = halve(x.dims)?;
    let c = x.channels;
    let [nx, ny, _] = x.dims;
    let [ox, oy, oz] = out_dims;
    let mut y = Tensor::zeros(out_dims, c);
    let mut arg = vec![0u32; y.data.len()];
    for z in 0..oz {
        for yy in 0..oy {
            for xx in 0..ox {
                let ov = xx + ox * (yy + oy * z);
                for ch in 0..c {
                    let mut best = T::zero();
                    let mut at = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let iv = (2 * xx + dx) + nx * ((2 * yy + dy) + ny * (2 * z + dz));
                                let v = x.data[iv * c + ch];
                                if at == usize::MAX || v > best {
                                    best = v;
                                    at = iv * c + ch;
                                }
                            }
                        }
                    }
                    y.data[ov * c + ch] = best;
                    arg[ov * c + ch] = at as u32;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Routes each output gradient to the input element that won the pool.
pub fn maxpool2_backward<T: Real>(gy: &Tensor<T>, argmax: &[u32], in_dims: Dims) -> Result<Tensor<T>> {
    check_len("pool argmax", argmax, gy.data.len())?;
    let mut gx = Tensor::zeros(in_dims, gy.channels);
    for (&g, &a) in gy.data.iter().zip(argmax) {
        let slot = &mut gx.data[a as usize];
        *slot = *slot + g;
    }
    Ok(gx)
}

/// Transposed convolution with a 2×2×2 kernel and stride 2; every input
/// voxel paints its own 2×2×2 output block. Weights are `(2, 2, 2, cin,
/// cout)`.
pub fn upconv2<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize) -> Result<Tensor<T>> {
    let cin = x.channels;
    check_len("upconv weights", w, 8 * cin * cout)?;
    check_len("upconv bias", b, cout)?;
    let [nx, ny, nz] = x.dims;
    let out_dims = [2 * nx, 2 * ny, 2 * nz];
    let mut y = Tensor::zeros(out_dims, cout);
    for row in y.data.chunks_exact_mut(cout) {
        row.copy_from_slice(b);
    }
    for_each_block(x.dims, |iv, ov, t| {
        let xv = &x.data[iv * cin..(iv + 1) * cin];
        let yv = &mut y.data[ov * cout..(ov + 1) * cout];
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        for (&a, wr) in xv.iter().zip(wt.chunks_exact(cout)) {
            for (o, &ww) in yv.iter_mut().zip(wr) {
                *o = *o + a * ww;
            }
        }
    });
    Ok(y)
}

/// Calls `f(input voxel, output voxel, tap)` for every input voxel and each
/// of its eight output children; taps are ordered `(a, b, c)` with `c`
/// fastest, matching the `(2, 2, 2, ...)` weight layout.
fn for_each_block(in_dims: Dims, mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = in_dims;
    let (ox, oy) = (2 * nx, 2 * ny);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let iv = x + nx * (y + ny * z);
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            let ov = (2 * x + a) + ox * ((2 * y + b) + oy * (2 * z + c));
                            f(iv, ov, (a * 2 + b) * 2 + c);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`upconv2`]: `(d input, d weights, d bias)`.
pub fn upconv2_backward<T: Real>(x: &Tensor<T>, w: &[T], gy: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let cin = x.channels;
    let cout = gy.channels;
    check_len("upconv weights", w, 8 * cin * cout)?;
    if gy.dims != [2 * x.dims[0], 2 * x.dims[1], 2 * x.dims[2]] {
        return Err(Error::Shape("upconv gradient dims must double the input".into()));
    }
    let mut gb = vec![T::zero(); cout];
    for row in gy.data.chunks_exact(cout) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    let mut gx = Tensor::zeros(x.dims, cin);
    let mut gw = vec![T::zero(); w.len()];
    for_each_block(x.dims, |iv, ov, t| {
        let gyv = &gy.data[ov * cout..(ov + 1) * cout];
        let xv = &x.data[iv * cin..(iv + 1) * cin];
        let gxv = &mut gx.data[iv * cin..(iv + 1) * cin];
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        let gwt = &mut gw[t * cin * cout..(t + 1) * cin * cout];
        for ((gxc, &a), (wr, gr)) in gxv
            .iter_mut()
            .zip(xv)
            .zip(wt.chunks_exact(cout).zip(gwt.chunks_exact_mut(cout)))
        {
            let mut acc = *gxc;
            for ((&g, &ww), gwv) in gyv.iter().zip(wr).zip(gr.iter_mut()) {
                acc = acc + g * ww;
                *gwv = *gwv + a * g;
            }
            *gxc = acc;
        }
    });
    Ok((gx, gw, gb))
}

pub const GROUPNORM_EPS: f64 = 1e-5;

/// Largest divisor of `channels` that does not exceed `requested`.
pub fn groupnorm_groups(requested: usize, channels: usize) -> usize {
    (1..=requested.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Values kept from the GroupNorm forward pass for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

/// Normalizes each channel group over all voxels, then applies a
/// per-channel scale and shift.
pub fn groupnorm<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    groups: usize,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let c = x.channels;
    check_len("groupnorm scale", scale, c)?;
    check_len("groupnorm shift", shift, c)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{groups} groups do not divide {c} channels")));
    }
    let cg = c / groups;
    let n = (x.voxels() * cg) as f64;
    let mut sum = vec![0.0f64; groups];
    let mut sq = vec![0.0f64; groups];
    for row in x.data.chunks_exact(c) {
        for (ch, &v) in row.iter().enumerate() {
            let v = v.f64();
            sum[ch / cg] += v;
            sq[ch / cg] += v * v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| 1.0 / libm::sqrt((s / n - m * m).max(0.0) + GROUPNORM_EPS))
        .collect();
    let mut xhat = Tensor::zeros(x.dims, c);
    let mut y = Tensor::zeros(x.dims, c);
    for ((xr, hr), yr) in x
        .data
        .chunks_exact(c)
        .zip(xhat.data.chunks_exact_mut(c))
        .zip(y.data.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let g = ch / cg;
            let h = T::of((xr[ch].f64() - mean[g]) * inv_std[g]);
            hr[ch] = h;
            yr[ch] = scale[ch] * h + shift[ch];
        }
    }
    Ok((y, GroupNormCache { xhat, inv_std, groups }))
}

/// Gradients of [`groupnorm`]: `(d input, d scale, d shift)`.
pub fn groupnorm_backward<T: Real>(
    cache: &GroupNormCache<T>,
    scale: &[T],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = gy.channels;
    if gy.dims != cache.xhat.dims || c != cache.xhat.channels {
        return Err(Error::Shape("groupnorm gradient shape differs from input".into()));
    }
    let groups = cache.groups;
    let cg = c / groups;
    let n = (gy.voxels() * cg) as f64;
    let mut gscale = vec![0.0f64; c];
    let mut gshift = vec![0.0f64; c];
    let mut sum_d = vec![0.0f64; groups];
    let mut sum_dh = vec![0.0f64; groups];
    for (gr, hr) in gy.data.chunks_exact(c).zip(cache.xhat.data.chunks_exact(c)) {
        for ch in 0..c {
            let g = gr[ch].f64();
            let h = hr[ch].f64();
            gscale[ch] += g * h;
            gshift[ch] += g;
            let d = g * scale[ch].f64();
            sum_d[ch / cg] += d;
            sum_dh[ch / cg] += d * h;
        }
    }
    let mut gx = Tensor::zeros(gy.dims, c);
    for ((gr, hr), xr) in gy
        .data
        .chunks_exact(c)
        .zip(cache.xhat.data.chunks_exact(c))
        .zip(gx.data.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let g = ch / cg;
            let d = gr[ch].f64() * scale[ch].f64();
            let h = hr[ch].f64();
            xr[ch] = T::of(cache.inv_std[g] * (d - sum_d[g] / n - h * sum_dh[g] / n));
        }
    }
    Ok((
        gx,
        gscale.into_iter().map(T::of).collect(),
        gshift.into_iter().map(T::of).collect(),
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        dims: x.dims,
        channels: x.channels,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

/// Backward of [`relu`] given its output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        dims: gy.dims,
        channels: gy.channels,
        data: y
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else
/// `1 / (1 - p)`.
pub fn dropout_mask<T: Real, R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Elementwise product with a fixed mask; the backward pass is the same
/// product applied to the gradient.
pub fn apply_mask<T: Real>(x: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    check_len("dropout mask", mask, x.data.len())?;
    Ok(Tensor {
        dims: x.dims,
        channels: x.channels,
        data: x.data.iter().zip(mask).map(|(&a, &m)| a * m).collect(),
    })
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("concat dims {:?} vs {:?}", a.dims, b.dims)));
    }
    let c = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.voxels() * c);
    for (ra, rb) in a.data.chunks_exact(a.channels).zip(b.data.chunks_exact(b.channels)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::new(a.dims, c, data)
}

/// Inverse of [`concat`]: splits off the first `first` channels.
pub fn split<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let second = x.channels - first;
    let mut a = Vec::with_capacity(x.voxels() * first);
    let mut b = Vec::with_capacity(x.voxels() * second);
    for row in x.data.chunks_exact(x.channels) {
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    (
        Tensor {
            dims: x.dims,
            channels: first,
            data: a,
        },
        Tensor {
            dims: x.dims,
            channels: second,
            data: b,
        },
    )
}

/// Mean squared error over every element and its gradient
/// `2 (pred - target) / n`.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "loss over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let r = p.f64() - t.f64();
            sum += r * r;
            T::of(2.0 * r / n)
        })
        .collect();
    Ok((sum / n, grad))
}
