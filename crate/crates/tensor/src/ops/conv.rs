//! Convolutions via im2col + GEMM. 2D convolutions run as 3D convolutions
//! with a unit depth axis.

use crate::array::DenseArray;
use crate::error::{invalid, mismatch, Result};
use crate::graph::Var;
use crate::ops::linalg::gemm;
use crate::scalar::Scalar;

/// Kernel, stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn cube(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

pub fn conv_out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|r| r / s + 1)
}

/// Geometry of one convolution: `channels` input planes of extent `ins`
/// sampled into `outs` output positions.
#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    spec: ConvSpec,
}

impl Geom {
    fn in_len(&self) -> usize {
        self.channels * self.ins.iter().product::<usize>()
    }
    fn out_positions(&self) -> usize {
        self.outs.iter().product()
    }
    fn rows(&self) -> usize {
        self.channels * self.spec.taps()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let [kd, kh, kw] = g.spec.kernel;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let [di, hi, wi] = g.ins;
    let [dout, hout, wout] = g.outs;
    let p = g.out_positions();
    for c in 0..g.channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..dout {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..hout {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let inside_zy = iz >= 0 && (iz as usize) < di && iy >= 0 && (iy as usize) < hi;
                            let base = if inside_zy {
                                ((c * di + iz as usize) * hi + iy as usize) * wi
                            } else {
                                0
                            };
                            for ox in 0..wout {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[o] = if inside_zy && ix >= 0 && (ix as usize) < wi {
                                    x[base + ix as usize]
                                } else {
                                    T::zero()
                                };
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let [kd, kh, kw] = g.spec.kernel;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let [di, hi, wi] = g.ins;
    let [dout, hout, wout] = g.outs;
    let p = g.out_positions();
    for c in 0..g.channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..dout {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..hout {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if !(iz >= 0 && (iz as usize) < di && iy >= 0 && (iy as usize) < hi) {
                                o += wout;
                                continue;
                            }
                            let base = ((c * di + iz as usize) * hi + iy as usize) * wi;
                            for ox in 0..wout {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && (ix as usize) < wi {
                                    x[base + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], positions: usize) {
    for (chunk, &b) in out.chunks_mut(positions).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, positions: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(positions).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum::<T>();
    }
    gb
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `[N, C, D, H, W]` input, `[O, C, kd, kh, kw]` weight, optional `[O]` bias.
    pub fn conv3d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: ConvSpec) -> Result<Var<'g, T>> {
        let xs = self.shape();
        if xs.len() != 5 {
            return Err(invalid("conv3d", format!("input must be rank 5, got {xs:?}")));
        }
        self.conv_impl("conv3d", weight, bias, spec, &xs)
    }

    /// `[N, C, H, W]` input, `[O, C, kh, kw]` weight, optional `[O]` bias.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(invalid("conv2d", format!("input must be rank 4, got {xs:?}")));
        }
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let spec = ConvSpec::square(ws[2], stride, pad);
        let xs5 = [xs[0], xs[1], 1, xs[2], xs[3]];
        self.conv_impl("conv2d", weight, bias, spec, &xs5)
    }

    fn conv_impl(
        self,
        op: &'static str,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: ConvSpec,
        xs: &[usize],
    ) -> Result<Var<'g, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let ws = wv.shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let o = ws[0];
        let taps = spec.taps();
        if ws.len() < 2 || ws[1] != c || wv.len() != o * c * taps {
            return Err(mismatch(op, xv.shape(), &ws));
        }
        let ins = [xs[2], xs[3], xs[4]];
        let mut outs = [0; 3];
        for a in 0..3 {
            outs[a] = conv_out_extent(ins[a], spec.kernel[a], spec.stride[a], spec.pad[a])
                .filter(|_| spec.stride[a] > 0)
                .ok_or_else(|| invalid(op, format!("kernel {:?} too large for input {:?}", spec.kernel, ins)))?;
        }
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.len() != o {
                    return Err(mismatch(op, &[o], bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let geom = Geom { channels: c, ins, outs, spec };
        let p = geom.out_positions();
        let rows = geom.rows();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); rows * p];
        for b in 0..n {
            im2col(&xv.data()[b * geom.in_len()..], &geom, &mut cols);
            gemm(o, rows, p, wv.data(), false, &cols, false, &mut out[b * o * p..(b + 1) * o * p], false);
        }
        if let Some(bv) = &bv {
            add_bias(&mut out, bv.data(), p);
        }
        let mut out_shape = vec![n, o];
        if op == "conv2d" {
            out_shape.extend([outs[1], outs[2]]);
        } else {
            out_shape.extend(outs);
        }
        let value = DenseArray::new(&out_shape, out)?;
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let rb = bias.is_some_and(|b| b.requires_grad());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.graph().custom(op, &inputs, value, move |g| {
            let gd = g.data();
            let mut gx = rx.then(|| vec![T::zero(); xv.len()]);
            let mut gw = rw.then(|| vec![T::zero(); wv.len()]);
            let mut cols = vec![T::zero(); rows * p];
            let mut dcols = vec![T::zero(); rows * p];
            for b in 0..n {
                let gout = &gd[b * o * p..(b + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    im2col(&xv.data()[b * geom.in_len()..], &geom, &mut cols);
                    gemm(o, p, rows, gout, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(rows, o, p, wv.data(), true, gout, false, &mut dcols, false);
                    col2im(&dcols, &geom, &mut gx[b * geom.in_len()..(b + 1) * geom.in_len()]);
                }
            }
            let mut res = vec![
                gx.map(|v| DenseArray::new(xv.shape(), v).expect("conv gx")),
                gw.map(|v| DenseArray::new(wv.shape(), v).expect("conv gw")),
            ];
            if has_bias {
                res.push(rb.then(|| DenseArray::new(&[o], bias_grad(gd, o, p)).expect("conv gb")));
            }
            res
        })
    }

    /// Transposed 3D convolution. `[N, Cin, D, H, W]` input, `[Cin, Cout, kd,
    /// kh, kw]` weight; output extent `(in - 1) * s - 2p + k + output_pad`.
    pub fn conv_transpose3d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: ConvSpec,
        output_pad: [usize; 3],
    ) -> Result<Var<'g, T>> {
        let op = "transpose-conv3d";
        let (xv, wv) = (self.value(), weight.value());
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] {
            return Err(mismatch(op, &xs, &ws));
        }
        if ws[2..] != spec.kernel {
            return Err(invalid(op, format!("weight {ws:?} does not match kernel {:?}", spec.kernel)));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let ins = [xs[2], xs[3], xs[4]];
        let mut outs = [0; 3];
        for a in 0..3 {
            if output_pad[a] >= spec.stride[a].max(1) {
                return Err(invalid(op, "output padding must be smaller than stride"));
            }
            outs[a] = ((ins[a] - 1) * spec.stride[a] + spec.kernel[a] + output_pad[a])
                .checked_sub(2 * spec.pad[a])
                .filter(|&e| e > 0)
                .ok_or_else(|| invalid(op, "padding too large"))?;
        }
        // Adjoint geometry: a forward conv from the output grid onto the input grid.
        let geom = Geom { channels: cout, ins: outs, outs: ins, spec };
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.len() != cout {
                    return Err(mismatch(op, &[cout], bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let pin = geom.out_positions();
        let pout: usize = outs.iter().product();
        let rows = geom.rows();
        let mut out = vec![T::zero(); n * cout * pout];
        let mut cols = vec![T::zero(); rows * pin];
        for b in 0..n {
            gemm(rows, cin, pin, wv.data(), true, &xv.data()[b * cin * pin..], false, &mut cols, false);
            col2im(&cols, &geom, &mut out[b * cout * pout..(b + 1) * cout * pout]);
        }
        if let Some(bv) = &bv {
            add_bias(&mut out, bv.data(), pout);
        }
        let mut out_shape = vec![n, cout];
        out_shape.extend(outs);
        let value = DenseArray::new(&out_shape, out)?;
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let rb = bias.is_some_and(|b| b.requires_grad());
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph().custom(op, &inputs, value, move |g| {
            let gd = g.data();
            let mut gx = rx.then(|| vec![T::zero(); xv.len()]);
            let mut gw = rw.then(|| vec![T::zero(); wv.len()]);
            let mut gcols = vec![T::zero(); rows * pin];
            for b in 0..n {
                im2col(&gd[b * cout * pout..], &geom, &mut gcols);
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, rows, pin, wv.data(), false, &gcols, false, &mut gx[b * cin * pin..(b + 1) * cin * pin], false);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, pin, rows, &xv.data()[b * cin * pin..], false, &gcols, true, gw, true);
                }
            }
            let mut res = vec![
                gx.map(|v| DenseArray::new(xv.shape(), v).expect("convT gx")),
                gw.map(|v| DenseArray::new(wv.shape(), v).expect("convT gw")),
            ];
            if has_bias {
                res.push(rb.then(|| DenseArray::new(&[cout], bias_grad(gd, cout, pout)).expect("convT gb")));
            }
            res
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn naive_conv2d(x: &DenseArray<f64>, w: &DenseArray<f64>, stride: usize, pad: usize) -> DenseArray<f64> {
        let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = DenseArray::zeros(&[1, o, ho, wo]);
        for oc in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[0, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[0, oc, y, xx], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let x = DenseArray::from_fn(&[1, 2, 5, 6], |i| ((i * 37) % 17) as f64 / 17.0 - 0.5);
        let w = DenseArray::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 / 7.0 - 0.5);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let g = Graph::<f64>::new();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, stride, pad).unwrap();
            let want = naive_conv2d(&x, &w, stride, pad);
            assert_eq!(y.shape(), want.shape().to_vec());
            for (a, b) in y.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_conv_output_extent() {
        let g = Graph::<f64>::new();
        let x = g.constant(DenseArray::ones(&[1, 2, 2, 3, 3]));
        let w = g.constant(DenseArray::ones(&[2, 4, 3, 3, 3]));
        let y = x.conv_transpose3d(w, None, ConvSpec::cube(3, 2, 1), [1, 1, 0]).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 4, 6, 5]);
    }
}
