use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Convolution kernel implementation. Both produce the same values up to
/// floating point reassociation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    /// Straight loop nest, also counts multiply-accumulates tap by tap.
    Direct,
    /// Patch unrolling followed by a matrix product.
    #[default]
    Im2col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::Dimension(format!(
                "conv2d input {input:?} has {} channels but kernel {kernel:?} expects {}",
                input[1], kernel[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let out_dim = |size: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Geometry(format!(
                    "{axis}: ({size} + 2*{padding} - {k}) / {stride} + 1 is not a positive integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h: out_dim(input[2], kernel[2], "height")?,
            out_w: out_dim(input[3], kernel[3], "width")?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Multiply-accumulates of one forward evaluation over the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch
            * self.out_channels
            * self.out_h
            * self.out_w
            * self.in_channels
            * self.kernel_h
            * self.kernel_w) as u64
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output `o` and tap `k`, if it lands inside.
    #[inline]
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Six-deep loop evaluation of the cross-correlation, independent of the
/// tape. Returns the output buffer and the number of multiply-accumulate
/// slots visited (padding taps included).
pub fn conv2d_reference<T: Element>(x: &[T], k: &[T], g: &ConvGeometry) -> (Vec<T>, u64) {
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.positions()];
    let mut macs = 0u64;
    let mut idx = 0;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for ci in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                macs += 1;
                                let (Some(iy), Some(ix)) =
                                    (g.source(oy, ky, g.in_h), g.source(ox, kx, g.in_w))
                                else {
                                    continue;
                                };
                                let xv = x[((n * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix];
                                let kv = k[((co * g.in_channels + ci) * g.kernel_h + ky)
                                    * g.kernel_w
                                    + kx];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    (out, macs)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = g.source(oy, ky, g.in_h);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (iy, g.source(ox, kx, g.in_w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.in_w + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.in_w) {
                            plane[iy * g.in_w + ix] = plane[iy * g.in_w + ix] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_im2col<T: Element>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ck, p) = (g.patch_len(), g.positions());
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut cols = vec![T::zero(); ck * p];
    for n in 0..g.batch {
        im2col(&x[n * in_stride..(n + 1) * in_stride], g, &mut cols);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        // SAFETY: kernel is [cout, ck], cols is [ck, p], dst is [cout, p].
        unsafe {
            T::gemm(
                g.out_channels,
                ck,
                p,
                T::one(),
                k.as_ptr(),
                ck as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

pub(super) fn conv2d_backward<T: Element>(
    algo: ConvAlgo,
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    match algo {
        ConvAlgo::Direct => backward_direct(x, k, dy, g, need_dx, need_dk),
        ConvAlgo::Im2col => backward_im2col(x, k, dy, g, need_dx, need_dk),
    }
}

fn backward_direct<T: Element>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = need_dk.then(|| vec![T::zero(); k.len()]);
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let d = dy[((n * g.out_channels + co) * g.out_h + oy) * g.out_w + ox];
                    for ci in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.source(oy, ky, g.in_h) else {
                                continue;
                            };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.source(ox, kx, g.in_w) else {
                                    continue;
                                };
                                let xi = ((n * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix;
                                let ki = ((co * g.in_channels + ci) * g.kernel_h + ky)
                                    * g.kernel_w
                                    + kx;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] = dx[xi] + k[ki] * d;
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[ki] = dk[ki] + x[xi] * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

fn backward_im2col<T: Element>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ck, p, cout) = (g.patch_len(), g.positions(), g.out_channels);
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = cout * p;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = need_dk.then(|| vec![T::zero(); k.len()]);
    let mut cols = vec![T::zero(); ck * p];
    for n in 0..g.batch {
        let dy_n = &dy[n * out_stride..(n + 1) * out_stride];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[n * in_stride..(n + 1) * in_stride], g, &mut cols);
            // SAFETY: dy_n is [cout, p], cols viewed transposed is [p, ck].
            unsafe {
                T::gemm(
                    cout,
                    p,
                    ck,
                    T::one(),
                    dy_n.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    T::one(),
                    dk.as_mut_ptr(),
                    ck as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // SAFETY: kernel viewed transposed is [ck, cout], dy_n is [cout, p].
            unsafe {
                T::gemm(
                    ck,
                    cout,
                    p,
                    T::one(),
                    k.as_ptr(),
                    1,
                    ck as isize,
                    dy_n.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im_add(&cols, g, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    (dx, dk)
}

impl<T: Element> Tape<T> {
    /// Cross-correlation without bias: `[N,Cin,H,W] x [Cout,Cin,h,w]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(x).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let (xs, ks) = (self.value(x).data(), self.value(kernel).data());
        let (out, macs) = match self.conv_algo {
            ConvAlgo::Direct => conv2d_reference(xs, ks, &geom),
            ConvAlgo::Im2col => (forward_im2col(xs, ks, &geom), geom.macs()),
        };
        self.stats.conv_evals += 1;
        self.stats.macs += macs;
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[x, kernel]);
        Ok(self.push(value, rg, Op::Conv2d { x, kernel, geom }, 0))
    }
}
