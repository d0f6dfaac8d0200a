//! Differentiable primitives recorded on a [`Tape`].

use crate::autodiff::tape::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{gemm_nt, gemm_tn, Scalar};
use crate::tensor::{invert_perm, matmul, MatmulPlan, Tensor};

/// Default epsilon for every RMS norm in the crate.
pub const RMS_EPS: f64 = 1e-6;

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape_err(
            op,
            format!("{b:?} does not broadcast against {a:?}"),
        ));
    }
    Ok(b.iter().product())
}

/// Sums a gradient shaped like `a` down to a suffix-broadcast operand of `n` elements.
fn reduce_suffix<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], d: usize, out: &mut [T]) {
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
}

/// Row-wise softmax backward: `dx = y ⊙ (g − Σ g·y)`.
pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], g: &[T], d: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - dot);
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + three * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    /// Broadcast batched matrix product `[..,m,k] × [..,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let out = matmul(self.value(a), self.value(b))?;
        self.record("matmul", &[a, b], out, move |args| {
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let (av, bv, g) = (args.inputs[0], args.inputs[1], args.grad);
            let mut ga = args.needs[0].then(|| Tensor::zeros(av.shape()));
            let mut gb = args.needs[1].then(|| Tensor::zeros(bv.shape()));
            for bi in 0..plan.a_index.len() {
                let gc = &g.data()[bi * m * n..(bi + 1) * m * n];
                let ao = plan.a_index[bi] * m * k;
                let bo = plan.b_index[bi] * k * n;
                if let Some(ga) = ga.as_mut() {
                    // dA += dC · Bᵀ
                    gemm_nt(m, n, k, gc, &bv.data()[bo..bo + k * n], &mut ga.data_mut()[ao..ao + m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB += Aᵀ · dC
                    gemm_tn(k, m, n, &av.data()[ao..ao + m * k], gc, &mut gb.data_mut()[bo..bo + k * n]);
                }
            }
            Ok(vec![ga, gb])
        })
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let bshape = self.shape(b).to_vec();
        let n = suffix_broadcast("add", self.shape(a), &bshape)?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(&bv) {
                *o += v;
            }
        }
        self.record("add", &[a, b], out, move |args| {
            Ok(vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| reduce_suffix(args.grad, &bshape)),
            ])
        })
    }

    /// `a − b`, same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, T::one().neg())?;
        self.add(a, nb)
    }

    /// Elementwise `a ⊙ b`, where `b`'s shape is a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let bshape = self.shape(b).to_vec();
        let n = suffix_broadcast("mul", self.shape(a), &bshape)?;
        let mut out = self.value(a).clone();
        {
            let bv = self.value(b).data();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &v) in chunk.iter_mut().zip(bv) {
                    *o *= v;
                }
            }
        }
        self.record("mul", &[a, b], out, move |args| {
            let (av, bv, g) = (args.inputs[0], args.inputs[1], args.grad);
            let ga = args.needs[0].then(|| {
                let mut ga = g.clone();
                for chunk in ga.data_mut().chunks_mut(n) {
                    for (o, &v) in chunk.iter_mut().zip(bv.data()) {
                        *o *= v;
                    }
                }
                ga
            });
            let gb = args.needs[1].then(|| {
                let mut gb = Tensor::zeros(&bshape);
                for (gc, ac) in g.data().chunks(n).zip(av.data().chunks(n)) {
                    for ((o, &gi), &ai) in gb.data_mut().iter_mut().zip(gc).zip(ac) {
                        *o += gi * ai;
                    }
                }
                gb
            });
            Ok(vec![ga, gb])
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v * c);
        self.record("scale", &[a], out, move |args| {
            Ok(vec![Some(args.grad.map(|v| v * c))])
        })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let out = Tensor::new(&[1], vec![self.value(a).sum()])?;
        self.record("sum", &[a], out, move |args| {
            Ok(vec![Some(Tensor::full(&shape, args.grad.item()))])
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(a).numel());
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.record("relu", &[a], out, |args| {
            let g = args.inputs[0].zip_map(args.grad, |x, g| if x > T::zero() { g } else { T::zero() })?;
            Ok(vec![Some(g)])
        })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.record("silu", &[a], out, |args| {
            let g = args.inputs[0].zip_map(args.grad, |x, g| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            })?;
            Ok(vec![Some(g)])
        })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.record("gelu", &[a], out, |args| {
            let g = args.inputs[0].zip_map(args.grad, |x, g| g * gelu_parts(x).1)?;
            Ok(vec![Some(g)])
        })
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
        let mut out = Tensor::zeros(x.shape());
        softmax_rows(x.data(), d, out.data_mut());
        self.record("softmax", &[a], out, move |args| {
            let mut dx = Tensor::zeros(args.output.shape());
            softmax_rows_backward(args.output.data(), args.grad.data(), d, dx.data_mut());
            Ok(vec![Some(dx)])
        })
    }

    /// `y = x / sqrt(mean(x²) + eps) ⊙ scale` over the last axis. `scale`
    /// may carry extra leading axes that form a suffix of `x`'s shape
    /// (per-head scales `[h, d]` against `[.., h, d]`).
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(scale)?;
        if !(eps > T::zero()) {
            return Err(shape_err("rms_norm", "eps must be positive"));
        }
        let sshape = self.shape(scale).to_vec();
        let sn = suffix_broadcast("rms_norm", self.shape(x), &sshape)?;
        let d = *sshape.last().ok_or_else(|| shape_err("rms_norm", "scale must have rank >= 1"))?;
        let xv = self.value(x);
        let sv = self.value(scale).data().to_vec();
        let mut out = Tensor::zeros(xv.shape());
        let mut inv = Vec::with_capacity(xv.numel() / d);
        let dn = T::from_usize_lossy(d);
        for (row, (xr, yr)) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)).enumerate() {
            let ms = xr.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            let s = &sv[(row * d) % sn..(row * d) % sn + d];
            for ((y, &xi), &si) in yr.iter_mut().zip(xr).zip(s) {
                *y = xi * r * si;
            }
        }
        self.record("rms_norm", &[x, scale], out, move |args| {
            let (xv, sv, g) = (args.inputs[0], args.inputs[1], args.grad);
            let mut dx = args.needs[0].then(|| Tensor::zeros(xv.shape()));
            let mut ds = args.needs[1].then(|| Tensor::zeros(sv.shape()));
            for (row, (xr, gr)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                let r = inv[row];
                let so = (row * d) % sn;
                let s = &sv.data()[so..so + d];
                if let Some(dx) = dx.as_mut() {
                    let dot: T = gr.iter().zip(s).zip(xr).map(|((&gi, &si), &xi)| gi * si * xi).sum();
                    let c = r * r * r * dot / dn;
                    for (j, o) in dx.data_mut()[row * d..(row + 1) * d].iter_mut().enumerate() {
                        *o = s[j] * gr[j] * r - c * xr[j];
                    }
                }
                if let Some(ds) = ds.as_mut() {
                    for (j, o) in ds.data_mut()[so..so + d].iter_mut().enumerate() {
                        *o += gr[j] * xr[j] * r;
                    }
                }
            }
            Ok(vec![dx, ds])
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let old = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", &[a], out, move |args| {
            Ok(vec![Some(args.grad.clone().reshape(&old)?)])
        })
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).permute(perm)?;
        let inv = invert_perm(perm);
        self.record("permute", &[a], out, move |args| {
            Ok(vec![Some(args.grad.permute(&inv)?)])
        })
    }

    /// Row gather from `table: [vocab, d]`; output shape is `shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(shape_err("embedding", format!("table must be [vocab, d], got {tshape:?}")));
        }
        if shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", format!("{} ids for shape {shape:?}", ids.len())));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::new(&out_shape, data)?;
        let ids = ids.to_vec();
        self.record("embedding", &[table], out, move |args| {
            let mut gt = Tensor::zeros(&tshape);
            for (&id, gr) in ids.iter().zip(args.grad.data().chunks(d)) {
                for (o, &v) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(gr) {
                    *o += v;
                }
            }
            Ok(vec![Some(gt)])
        })
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `ignore_index`. `logits: [.., vocab]`, one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let v = *lv.shape().last().ok_or_else(|| shape_err("cross_entropy", "rank-0 logits"))?;
        if lv.numel() / v != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), lv.shape()),
            ));
        }
        let valid = targets.iter().filter(|&&t| t != ignore_index).count();
        if valid == 0 {
            return Err(Error::AllIgnored);
        }
        if let Some(&id) = targets.iter().find(|&&t| t != ignore_index && t >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        let mut probs = vec![T::zero(); lv.numel()];
        softmax_rows(lv.data(), v, &mut probs);
        let mut loss = T::zero();
        for (lr, &t) in lv.data().chunks(v).zip(targets) {
            if t == ignore_index {
                continue;
            }
            let max = lr.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + lr.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += lse - lr[t];
        }
        let nv = T::from_usize_lossy(valid);
        let out = Tensor::new(&[1], vec![loss / nv])?;
        let targets = targets.to_vec();
        let lshape = lv.shape().to_vec();
        self.record("cross_entropy", &[logits], out, move |args| {
            let g = args.grad.item() / nv;
            let mut dl = Tensor::zeros(&lshape);
            for ((dr, pr), &t) in dl.data_mut().chunks_mut(v).zip(probs.chunks(v)).zip(&targets) {
                if t == ignore_index {
                    continue;
                }
                for (o, &p) in dr.iter_mut().zip(pr) {
                    *o = p * g;
                }
                dr[t] -= g;
            }
            Ok(vec![Some(dl)])
        })
    }
}
