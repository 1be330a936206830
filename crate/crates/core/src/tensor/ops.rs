use super::kernels::{gemm_nn, im2col, ConvGeom};
use super::tape::Backward;
use super::{Result, Tape, Tensor, TensorError};

#[derive(Clone, Copy, PartialEq)]
enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if a.numel() == 1 && a.rank() == 0 {
        Ok(Pairing::LeftScalar)
    } else if b.numel() == 1 && b.rank() == 0 {
        Ok(Pairing::RightScalar)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_with(a: &Tensor, b: &Tensor, p: Pairing, f: impl Fn(f32, f32) -> f32) -> (Vec<usize>, Vec<f32>) {
    match p {
        Pairing::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Pairing::LeftScalar => {
            let s = a.data()[0];
            (b.shape().to_vec(), b.data().iter().map(|&y| f(s, y)).collect())
        }
        Pairing::RightScalar => {
            let s = b.data()[0];
            (a.shape().to_vec(), a.data().iter().map(|&x| f(x, s)).collect())
        }
    }
}

impl Tape {
    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let (m, k) = a.dims2("matmul").map_err(|_| mismatch())?;
        let (k2, n) = b.dims2("matmul").map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        let mut out = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.output(vec![m, n], out, ia.is_some() || ib.is_some(), || Backward::MatMul {
            a: a.data_arc(),
            b: b.data_arc(),
            m,
            k,
            n,
            ia,
            ib,
        }))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = pairing("add", a, b)?;
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        let (shape, data) = zip_with(a, b, p, |x, y| x + y);
        Ok(self.output(shape, data, ia.is_some() || ib.is_some(), || Backward::Add {
            ia,
            ib,
            a_scalar: p == Pairing::LeftScalar,
            b_scalar: p == Pairing::RightScalar,
        }))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = pairing("sub", a, b)?;
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        let (shape, data) = zip_with(a, b, p, |x, y| x - y);
        Ok(self.output(shape, data, ia.is_some() || ib.is_some(), || Backward::Sub {
            ia,
            ib,
            a_scalar: p == Pairing::LeftScalar,
            b_scalar: p == Pairing::RightScalar,
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = pairing("mul", a, b)?;
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        let (shape, data) = zip_with(a, b, p, |x, y| x * y);
        Ok(self.output(shape, data, ia.is_some() || ib.is_some(), || Backward::Mul {
            a: a.data_arc(),
            b: b.data_arc(),
            ia,
            ib,
        }))
    }

    pub fn scale(&self, x: &Tensor, s: f32) -> Result<Tensor> {
        let ia = self.input(x)?;
        let data = x.data().iter().map(|v| v * s).collect();
        Ok(self.output(x.shape().to_vec(), data, ia.is_some(), || Backward::Scale {
            s,
            ia: ia.unwrap(),
        }))
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let ia = self.input(x)?;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Ok(self.output(x.shape().to_vec(), data, ia.is_some(), || Backward::Relu {
            x: x.data_arc(),
            ia: ia.unwrap(),
        }))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(TensorError::NonPositiveLog { index, value });
        }
        let ia = self.input(x)?;
        let data = x.data().iter().map(|v| v.ln()).collect();
        Ok(self.output(x.shape().to_vec(), data, ia.is_some(), || Backward::Log {
            x: x.data_arc(),
            ia: ia.unwrap(),
        }))
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        let ia = self.input(x)?;
        let data: Vec<f32> = x.data().iter().map(|v| v.exp()).collect();
        let y = std::sync::Arc::new(data.clone());
        Ok(self.output(x.shape().to_vec(), data, ia.is_some(), || Backward::Exp {
            y,
            ia: ia.unwrap(),
        }))
    }

    /// `max(x, lo)` elementwise; the gradient passes where `x ≥ lo`.
    pub fn clamp_min(&self, x: &Tensor, lo: f32) -> Result<Tensor> {
        let ia = self.input(x)?;
        let data = x.data().iter().map(|&v| if v >= lo { v } else { lo }).collect();
        Ok(self.output(x.shape().to_vec(), data, ia.is_some(), || Backward::ClampMin {
            x: x.data_arc(),
            lo,
            ia: ia.unwrap(),
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let ia = self.input(x)?;
        let s: f32 = x.data().iter().sum();
        let n = x.numel();
        Ok(self.output(Vec::new(), vec![s], ia.is_some(), || Backward::Sum { ia: ia.unwrap(), n }))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let ia = self.input(x)?;
        let n = x.numel();
        let s: f32 = x.data().iter().sum::<f32>() / n as f32;
        Ok(self.output(Vec::new(), vec![s], ia.is_some(), || Backward::Mean { ia: ia.unwrap(), n }))
    }

    /// `x[B×n] + b[n]`, adding the bias to every row.
    pub fn add_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.dims2("add_bias")?;
        if b.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (ia, ib) = (self.input(x)?, self.input(b)?);
        let mut data = x.to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
        }
        Ok(self.output(x.shape().to_vec(), data, ia.is_some() || ib.is_some(), || {
            Backward::AddBias { cols, ia, ib }
        }))
    }

    /// Row-wise `softmax(z / τ)` of a `[B×K]` tensor, with max subtraction.
    pub fn softmax_rows(&self, z: &Tensor, tau: f32) -> Result<Tensor> {
        let (_, cols) = z.dims2("softmax_rows")?;
        let ia = self.input(z)?;
        let mut y = Vec::with_capacity(z.numel());
        for row in z.data().chunks(cols) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let start = y.len();
            let mut total = 0.0f32;
            for &v in row {
                let e = ((v - max) / tau).exp();
                total += e;
                y.push(e);
            }
            y[start..].iter_mut().for_each(|e| *e /= total);
        }
        let y_arc = std::sync::Arc::new(y.clone());
        Ok(self.output(z.shape().to_vec(), y, ia.is_some(), || Backward::Softmax {
            y: y_arc,
            cols,
            tau,
            ia: ia.unwrap(),
        }))
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: x.shape().to_vec(),
                right: shape,
            });
        }
        let ia = self.input(x)?;
        Ok(self.output(shape, x.to_vec(), ia.is_some(), || Backward::Identity { ia: ia.unwrap() }))
    }

    /// Stride-1 convolution of `x[B,C,H,W]` with `w[O,C,k,k]` and zero
    /// padding `pad`; output `[B,O,H',W']`.
    pub fn conv2d(&self, x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        };
        let (&[batch, in_ch, height, width], &[out_ch, wc, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(mismatch());
        };
        if wc != in_ch || kh != kw || height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(mismatch());
        }
        let geom = ConvGeom { batch, in_ch, height, width, out_ch, kernel: kh, pad };
        let (ix, iw) = (self.input(x)?, self.input(w)?);
        let cols = im2col(x.data(), &geom);
        let (rows, patch) = (geom.positions(), geom.patch());
        // [rows×patch] · [patch×O]  with wᵀ materialized
        let mut wt = vec![0.0; patch * out_ch];
        for o in 0..out_ch {
            for p in 0..patch {
                wt[p * out_ch + o] = w.data()[o * patch + p];
            }
        }
        let mut flat = vec![0.0; rows * out_ch];
        gemm_nn(&cols, &wt, &mut flat, rows, patch, out_ch);
        let plane = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; rows * out_ch];
        for b in 0..batch {
            for p in 0..plane {
                for o in 0..out_ch {
                    out[(b * out_ch + o) * plane + p] = flat[(b * plane + p) * out_ch + o];
                }
            }
        }
        let shape = vec![batch, out_ch, geom.out_h(), geom.out_w()];
        Ok(self.output(shape, out, ix.is_some() || iw.is_some(), || Backward::Conv2d {
            cols: std::sync::Arc::new(cols),
            w: w.data_arc(),
            geom,
            ix,
            iw,
        }))
    }

    /// `x[B,C,H,W] + b[C]`
    pub fn add_channel_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (&[_, ch, h, w], &[bc]) = (x.shape(), b.shape()) else {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        };
        if bc != ch {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let plane = h * w;
        let (ia, ib) = (self.input(x)?, self.input(b)?);
        let mut data = x.to_vec();
        for (i, block) in data.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % ch];
            block.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.output(x.shape().to_vec(), data, ia.is_some() || ib.is_some(), || {
            Backward::AddChannelBias { ch, plane, ia, ib }
        }))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&self, x: &Tensor) -> Result<Tensor> {
        let &[batch, ch, h, w] = x.shape() else {
            return Err(TensorError::Rank { op: "avg_pool2", expected: 4, shape: x.shape().to_vec() });
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::ZeroDim(vec![batch, ch, oh, ow]));
        }
        let ia = self.input(x)?;
        let src = x.data();
        let mut out = vec![0.0; batch * ch * oh * ow];
        for c in 0..batch * ch {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| src[(c * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(c * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        Ok(self.output(vec![batch, ch, oh, ow], out, ia.is_some(), || Backward::AvgPool2 {
            batch_ch: batch * ch,
            h,
            w,
            ia: ia.unwrap(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::parameter(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_product() {
        let tape = Tape::new();
        let c = tape.matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17., 39.]);
        assert!(tape.is_empty(), "constants are not recorded");
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[1.5, -2., 0.25, 7., 3., -1.]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(tape.matmul(&a, &eye).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let err = tape.matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 2], &[0.; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        assert_eq!(tape.relu(&t(&[3], &[-1., 0., 2.])).unwrap().data(), &[0., 0., 2.]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let x = p(&[4], &[1., -2., 0.5, 3.]);
        let tape = Tape::new();
        let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2., -4., 1., 6.]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        assert_eq!(
            tape.log(&t(&[3], &[1., 0., 2.])).unwrap_err(),
            TensorError::NonPositiveLog { index: 1, value: 0. }
        );
        assert!(tape.log(&t(&[1], &[-3.])).is_err());
        assert!(tape.log(&t(&[1], &[f32::NAN])).is_err());
    }

    #[test]
    fn log_gradient_at_half() {
        let x = p(&[1], &[0.5]);
        let tape = Tape::new();
        let y = tape.sum(&tape.log(&x).unwrap()).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let w = p(&[3], &[0.3, -0.7, 2.0]);
        let x = t(&[3], &[4., 5., 6.]);
        let tape = Tape::new();
        let loss = tape.sum(&tape.mul(&w, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), x.to_vec());
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![8., 10., 12.], "second backward doubles");
    }

    #[test]
    fn shape_rules_for_elementwise() {
        let tape = Tape::new();
        let a = t(&[2], &[1., 2.]);
        assert!(matches!(tape.add(&a, &t(&[3], &[0.; 3])), Err(TensorError::ShapeMismatch { .. })));
        // [1] is not a scalar, only rank-0 broadcasts
        assert!(tape.add(&a, &t(&[1], &[1.])).is_err());
        assert_eq!(tape.mul(&a, &Tensor::scalar(3.)).unwrap().data(), &[3., 6.]);
        assert_eq!(tape.sub(&Tensor::scalar(1.), &a).unwrap().data(), &[0., -1.]);
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let s = p(&[], &[2.0]);
        let x = p(&[3], &[1., 2., 3.]);
        let tape = Tape::new();
        let loss = tape.sum(&tape.mul(&s, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let x = p(&[2], &[1., 2.]);
        let tape = Tape::new();
        let y = tape.scale(&x, 2.).unwrap();
        assert!(matches!(tape.backward(&y), Err(TensorError::NotScalar(_))));
        let other = Tape::new();
        let loss = tape.sum(&y).unwrap();
        assert_eq!(other.backward(&loss), Err(TensorError::NotOnTape));
        assert_eq!(tape.backward(&Tensor::scalar(1.)), Err(TensorError::NotOnTape));
    }

    #[test]
    fn detached_path_leaves_grad_empty() {
        let x = p(&[2], &[1., 2.]);
        let w = p(&[2], &[1., 1.]);
        let tape = Tape::new();
        let loss = tape.sum(&tape.mul(&x.detach(), &w).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad(), None);
        assert_eq!(w.grad().unwrap(), vec![1., 2.]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let x = p(&[2], &[1., 2.]);
        let tape = Tape::no_grad();
        let y = tape.sum(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let y = tape.softmax_rows(&t(&[2, 3], &[1., 2., 3., -100., 0., 100.]), 1.0).unwrap();
        for r in 0..2 {
            let s: f32 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn avg_pool_and_channel_bias() {
        let tape = Tape::new();
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(tape.avg_pool2(&x).unwrap().data(), &[2.5]);
        let y = tape.add_channel_bias(&t(&[1, 2, 1, 1], &[0., 0.]), &t(&[2], &[1., -1.])).unwrap();
        assert_eq!(y.data(), &[1., -1.]);
    }

    #[test]
    fn conv_single_channel_by_hand() {
        let tape = Tape::new();
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // centre tap reproduces the input
        let y = tape.conv2d(&x, &t(&[1, 1, 3, 3], &k), 1).unwrap();
        assert_eq!(y.data(), x.data());
        let ones = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = tape.conv2d(&x, &ones, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);
    }
}
