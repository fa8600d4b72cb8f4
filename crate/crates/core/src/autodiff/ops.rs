use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn same_shape<T: Element>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Multiplies channel `c` of `[N,C,H,W]` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || self.value(s).numel() != shape[1] {
            return Err(Error::Dimension(format!(
                "channel_scale: input {shape:?} with {} scale factors",
                self.value(s).numel()
            )));
        }
        let hw = shape[2] * shape[3];
        let c = shape[1];
        let sv = self.value(s).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[(i / hw) % c])
            .collect();
        let rg = self.any_requires_grad(&[x, s]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::ChannelScale { x, s }, 0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("shape preserved");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Relu { x }, 0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }, 0))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }, 0))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("shape preserved");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Scale { x, factor }, 0)
    }

    /// Adds a constant buffer of the same length.
    pub fn offset(&mut self, x: Var, offset: &[T]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != offset.len() {
            return Err(Error::Dimension(format!(
                "offset: {} values for a tensor of {}",
                offset.len(),
                v.numel()
            )));
        }
        let out: Vec<T> = v.data().iter().zip(offset).map(|(&a, &b)| a + b).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Offset { x }, 0))
    }

    /// Softmax over a vector, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let m = v.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = v.iter().map(|&a| (a - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        let out: Vec<T> = e.into_iter().map(|a| a / z).collect();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(out), rg, Op::Softmax { x }, 0)
    }

    /// `out[k] = sum_{j >= k} x[j]`.
    pub fn reverse_cumsum(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        let mut acc = T::zero();
        for k in (0..v.len()).rev() {
            acc = acc + v[k];
            out[k] = acc;
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(out), rg, Op::ReverseCumsum { x }, 0)
    }

    /// Repeats `x[k]` over positions `bounds[k-1]..bounds[k]` (with
    /// `bounds[-1] = 0`); `bounds` must be strictly increasing.
    pub fn expand_blocks(&mut self, x: Var, bounds: &[usize]) -> Result<Var> {
        let v = self.value(x).data();
        if v.len() != bounds.len() || bounds.windows(2).any(|w| w[0] >= w[1]) || bounds[0] == 0 {
            return Err(Error::Dimension(format!(
                "expand_blocks: {} values with bounds {bounds:?}",
                v.len()
            )));
        }
        let mut out = Vec::with_capacity(*bounds.last().unwrap());
        let mut start = 0;
        for (&val, &end) in v.iter().zip(bounds) {
            out.extend(std::iter::repeat_n(val, end - start));
            start = end;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_vec(out),
            rg,
            Op::ExpandBlocks {
                x,
                bounds: bounds.to_vec(),
            },
            0,
        ))
    }

    /// `sum_i w[i] * x[i]` against constant weights.
    pub fn dot(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let v = self.value(x).data();
        if v.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "dot: {} weights for {} values",
                weights.len(),
                v.len()
            )));
        }
        let s: T = v.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            0,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x }, 0)
    }

    /// Element `index` of a tensor as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.numel() {
            return Err(Error::Index(format!("pick {index} from {} values", v.numel())));
        }
        let value = Tensor::scalar(v.data()[index]);
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Pick { x, index }, 0))
    }

    /// Multiplies every element of `x` by the scalar `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Rank(format!(
                "scale_by needs a scalar factor, got {:?}",
                self.value(s).shape()
            )));
        }
        let f = self.value(s).item();
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e * f).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.any_requires_grad(&[x, s]);
        Ok(self.push(value, rg, Op::ScaleBy { x, s }, 0))
    }

    /// Natural logarithm; every element must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if let Some(bad) = v.data().iter().find(|&&e| e.is_nan() || e <= T::zero()) {
            return Err(Error::Domain(format!("ln of nonpositive value {bad}")));
        }
        let out: Vec<T> = v.data().iter().map(|&e| e.ln()).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Ln { x }, 0))
    }

    /// `bias + sum_i coeffs[i] * xs[i]` over scalar inputs.
    pub fn combine(&mut self, xs: &[Var], coeffs: &[T], bias: T) -> Result<Var> {
        if xs.len() != coeffs.len() {
            return Err(Error::Dimension(format!(
                "combine: {} inputs, {} coefficients",
                xs.len(),
                coeffs.len()
            )));
        }
        let mut s = bias;
        for (&v, &c) in xs.iter().zip(coeffs) {
            let val = self.value(v);
            if val.numel() != 1 {
                return Err(Error::Rank(format!(
                    "combine expects scalars, got {:?}",
                    val.shape()
                )));
            }
            s = s + c * val.item();
        }
        let rg = self.any_requires_grad(xs);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::Combine {
                xs: xs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            0,
        ))
    }

    /// `x [N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 2
            || ws.shape().len() != 2
            || xs.shape()[1] != ws.shape()[1]
            || bs.numel() != ws.shape()[0]
        {
            return Err(Error::Dimension(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xs.shape(),
                ws.shape(),
                bs.shape()
            )));
        }
        let (n, k, m) = (xs.shape()[0], xs.shape()[1], ws.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bs.data());
        }
        // SAFETY: x is [n,k], w^T is [k,m] via strides, out is [n,m].
        unsafe {
            T::gemm(
                n,
                k,
                m,
                T::one(),
                xs.data().as_ptr(),
                k as isize,
                1,
                ws.data().as_ptr(),
                1,
                k as isize,
                T::one(),
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        self.stats.macs += (n * k * m) as u64;
        let rg = self.any_requires_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Linear { x, w, b }, 0))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects [N,C,H,W], got {shape:?}"
            )));
        }
        let hw = shape[2] * shape[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = v
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::GlobalAvgPool { x }, 0))
    }

    /// 2x2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::Geometry(format!(
                "avg_pool2 needs [N,C,H,W] with even H and W, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let xs = v.data();
        let mut out = Vec::with_capacity(xs.len() / 4);
        for plane in xs.chunks(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = 2 * oy * w + 2 * ox;
                    out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::new(vec![shape[0], shape[1], ho, wo], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::AvgPool2 { x }, 0))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let shape = v.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} with {classes} classes")));
        }
        let mut probs = Vec::with_capacity(v.numel());
        let mut loss = T::zero();
        for (row, &label) in v.data().chunks(classes).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&a| (a - m).exp()).sum();
            let log_z = z.ln() + m;
            loss = loss + log_z - row[label];
            probs.extend(row.iter().map(|&a| (a - log_z).exp()));
        }
        loss = loss / T::from_usize(labels.len()).unwrap();
        let rg = self.requires_grad(logits);
        let saved = probs.len() * T::DTYPE.size();
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            saved,
        ))
    }

    /// Mean absolute deviation against a constant target.
    pub fn mae_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let v = self.value(pred);
        if v.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "mae_loss: prediction {:?}, target {:?}",
                v.shape(),
                target.shape()
            )));
        }
        let s: T = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let loss = s / T::from_usize(v.numel()).unwrap();
        let rg = self.requires_grad(pred);
        let saved = target.nbytes();
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Mae {
                pred,
                target: target.data().to_vec(),
            },
            saved,
        ))
    }
}

pub(super) fn channel_scale_backward<T: Element>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    dy: &[T],
    xv: Var,
    sv: Var,
) -> Vec<(Var, Vec<T>)> {
    let shape = x.shape();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let sd = s.data();
    let mut ds = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for (i, (&d, &xi)) in dy.iter().zip(x.data()).enumerate() {
        let ch = (i / hw) % c;
        dx[i] = d * sd[ch];
        ds[ch] = ds[ch] + d * xi;
    }
    vec![(xv, dx), (sv, ds)]
}

pub(super) fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    (xv, wv, bv): (Var, Var, Var),
    (need_x, need_w, need_b): (bool, bool, bool),
) -> Vec<(Var, Vec<T>)> {
    let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = Vec::new();
    if need_x {
        let mut dx = vec![T::zero(); n * k];
        // SAFETY: dy is [n,m], w is [m,k], dx is [n,k].
        unsafe {
            T::gemm(
                n,
                m,
                k,
                T::one(),
                dy.as_ptr(),
                m as isize,
                1,
                w.data().as_ptr(),
                k as isize,
                1,
                T::zero(),
                dx.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        out.push((xv, dx));
    }
    if need_w {
        let mut dw = vec![T::zero(); m * k];
        // SAFETY: dy^T is [m,n] via strides, x is [n,k], dw is [m,k].
        unsafe {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                dy.as_ptr(),
                1,
                m as isize,
                x.data().as_ptr(),
                k as isize,
                1,
                T::zero(),
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        out.push((wv, dw));
    }
    if need_b {
        let mut db = vec![T::zero(); m];
        for row in dy.chunks(m) {
            for (a, &b) in db.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
        out.push((bv, db));
    }
    out
}

pub(super) fn global_avg_pool_backward<T: Element>(
    x: &Tensor<T>,
    dy: &[T],
    xv: Var,
) -> Vec<(Var, Vec<T>)> {
    let shape = x.shape();
    let hw = shape[2] * shape[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let dx = dy
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d * inv, hw))
        .collect();
    vec![(xv, dx)]
}

pub(super) fn avg_pool2_backward<T: Element>(
    x: &Tensor<T>,
    dy: &[T],
    xv: Var,
) -> Vec<(Var, Vec<T>)> {
    let shape = x.shape();
    let (h, w) = (shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); x.numel()];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dplane[oy * wo + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                plane[i] = g;
                plane[i + 1] = g;
                plane[i + w] = g;
                plane[i + w + 1] = g;
            }
        }
    }
    vec![(xv, dx)]
}
