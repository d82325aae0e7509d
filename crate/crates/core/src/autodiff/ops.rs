//! Differentiable primitives. Every model forward in this crate decomposes
//! into the operations below.

use std::sync::Arc;

use super::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ScanDims, ScanInputs};
use crate::mask::{KernelFootprint, ScanDirection};
use crate::tensor::{Scalar, Tensor, ValidityMask};

fn t<T: Scalar>(dims: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(dims.to_vec(), data).expect("primitive produced consistent dims")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::from_f64_lossy(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.push(
            value,
            &[x],
            Box::new(move |ctx: BackwardCtx<'_, T>| {
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .zip(ctx.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(t(ctx.grad.dims(), data))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = t(va.dims(), data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = t(va.dims(), data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = t(va.dims(), data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| {
                let prod = |other: &Tensor<T>| {
                    let d = ctx.grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
                    t(ctx.grad.dims(), d)
                };
                vec![
                    ctx.needs[0].then(|| prod(ctx.inputs[1])),
                    ctx.needs[1].then(|| prod(ctx.inputs[0])),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// Sigmoid-weighted linear unit, `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                vec![Some(Tensor::full(ctx.inputs[0].dims().to_vec(), g))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_f64_lossy(self.value(x).numel() as f64);
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// `a (M × K) · b (K × N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.dims(a))?;
        let (k2, n) = rank2("matmul", self.dims(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.dims(a), self.dims(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        Ok(self.push(
            t(&[m, n], out),
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    // g (M×N) · bᵀ (N×K)
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, n as isize, 1, ctx.inputs[1].data(), 1, n as isize, T::zero(), &mut d, k as isize, 1);
                    t(&[m, k], d)
                });
                let gb = ctx.needs[1].then(|| {
                    // aᵀ (K×M) · g (M×N)
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ctx.inputs[0].data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut d, n as isize, 1);
                    t(&[k, n], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x · wᵀ + bias` for `x: M × In` (or a vector of length `In`), `w: Out × In`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let (m, input) = match xd[..] {
            [i] => (1, i),
            [m, i] => (m, i),
            _ => return Err(Error::invalid("linear", format!("input rank {}", xd.len()))),
        };
        let (out, win) = rank2("linear", self.dims(w))?;
        if win != input || self.dims(bias) != [out] {
            return Err(Error::shape("linear", &xd, self.dims(w)));
        }
        let mut y = Vec::with_capacity(m * out);
        for _ in 0..m {
            y.extend_from_slice(self.value(bias).data());
        }
        T::gemm(m, input, out, self.value(x).data(), input as isize, 1, self.value(w).data(), 1, input as isize, T::one(), &mut y, out as isize, 1);
        let out_dims = if xd.len() == 1 { vec![out] } else { vec![m, out] };
        Ok(self.push(
            t(&out_dims, y),
            &[x, w, bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    // g (M×Out) · w (Out×In)
                    let mut d = vec![T::zero(); m * input];
                    T::gemm(m, out, input, g, out as isize, 1, ctx.inputs[1].data(), input as isize, 1, T::zero(), &mut d, input as isize, 1);
                    t(ctx.inputs[0].dims(), d)
                });
                let gw = ctx.needs[1].then(|| {
                    // gᵀ (Out×M) · x (M×In)
                    let mut d = vec![T::zero(); out * input];
                    T::gemm(out, m, input, g, 1, out as isize, ctx.inputs[0].data(), input as isize, 1, T::zero(), &mut d, input as isize, 1);
                    t(&[out, input], d)
                });
                let gb = ctx.needs[2].then(|| {
                    let mut d = vec![T::zero(); out];
                    for row in g.chunks_exact(out) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    t(&[out], d)
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2("transpose", self.dims(x))?;
        let value = transpose_data(self.value(x).data(), m, n);
        Ok(self.push(
            t(&[n, m], value),
            &[x],
            Box::new(move |ctx| vec![Some(t(&[m, n], transpose_data(ctx.grad.data(), n, m)))]),
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims.to_vec())?;
        let orig = self.dims(x).to_vec();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(orig.clone()).expect("same numel"))]),
        ))
    }

    /// Columns `start..start + len` of a rank-2 value.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rank2("narrow_cols", self.dims(x))?;
        if len == 0 || start + len > n {
            return Err(Error::invalid("narrow_cols", format!("range {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let data = (0..m).flat_map(|r| src[r * n + start..r * n + start + len].iter().copied()).collect();
        Ok(self.push(
            t(&[m, len], data),
            &[x],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&ctx.grad.data()[r * len..(r + 1) * len]);
                }
                vec![Some(t(&[m, n], d))]
            }),
        ))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty { op: "concat0" })?;
        let tail = self.dims(first)[1..].to_vec();
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            if self.dims(p)[1..] != tail[..] {
                return Err(Error::shape("concat0", self.dims(first), self.dims(p)));
            }
            lead += self.dims(p)[0];
            lens.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&tail);
        Ok(self.push(
            t(&dims, data),
            parts,
            Box::new(move |ctx| {
                let mut off = 0;
                lens.iter()
                    .zip(&ctx.inputs)
                    .map(|(&len, inp)| {
                        let g = t(inp.dims(), ctx.grad.data()[off..off + len].to_vec());
                        off += len;
                        Some(g)
                    })
                    .collect()
            }),
        ))
    }

    /// Cross-correlation of `x: C × H × W` with `w: K × C × kh × kw`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, wd) = rank3("conv2d", self.dims(x))?;
        let wdims = self.dims(w).to_vec();
        let [k, wc, kh, kw] = wdims[..] else {
            return Err(Error::invalid("conv2d", format!("weight dims {wdims:?}")));
        };
        if wc != c {
            return Err(Error::shape("conv2d", self.dims(x), &wdims));
        }
        let fp = KernelFootprint::new(kh, kw, stride, padding);
        let (oh, ow) = fp.output_hw(h, wd)?;
        let cols = kernels::im2col(self.value(x).data(), c, h, wd, &fp, oh, ow);
        let ckk = c * kh * kw;
        let out = kernels::matmul_into(k, ckk, oh * ow, self.value(w).data(), &cols);
        let cols = Arc::new(cols);
        Ok(self.push(
            t(&[k, oh, ow], out),
            &[x, w],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let n = oh * ow;
                let gx = ctx.needs[0].then(|| {
                    // wᵀ (CKK × K) · g (K × n)
                    let mut dcols = vec![T::zero(); ckk * n];
                    T::gemm(ckk, k, n, ctx.inputs[1].data(), 1, ckk as isize, g, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
                    t(&[c, h, wd], kernels::col2im(&dcols, c, h, wd, &fp, oh, ow))
                });
                let gw = ctx.needs[1].then(|| {
                    // g (K × n) · colsᵀ (n × CKK)
                    let mut d = vec![T::zero(); k * ckk];
                    T::gemm(k, n, ckk, g, n as isize, 1, &cols, 1, n as isize, T::zero(), &mut d, ckk as isize, 1);
                    t(&[k, c, kh, kw], d)
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Adds `b[k]` to every position of channel `k`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 || self.dims(b) != [dims[0]] {
            return Err(Error::shape("add_channel_bias", &dims, self.dims(b)));
        }
        let plane: usize = dims[1..].iter().product();
        let bias = self.value(b).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / plane])
            .collect();
        Ok(self.push(
            t(&dims, data),
            &[x, b],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let d = ctx.grad.data().chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
                    t(&[ctx.grad.dims()[0]], d)
                });
                vec![Some(ctx.grad.clone()), gb]
            }),
        ))
    }

    /// Replaces positions where `mask` is 0 with exact zeros. The mask covers
    /// all axes after the leading channel axis.
    pub fn mask_positions(&mut self, x: Var, mask: &ValidityMask) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 || dims[1..] != *mask.dims() {
            return Err(Error::shape("mask_positions", &dims, mask.dims()));
        }
        let keep = Arc::new(mask.bits().to_vec());
        let apply = |data: &[T], keep: &[bool]| -> Vec<T> {
            let plane = keep.len();
            data.iter()
                .enumerate()
                .map(|(i, &v)| if keep[i % plane] { v } else { T::zero() })
                .collect()
        };
        let value = t(&dims, apply(self.value(x).data(), &keep));
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(t(ctx.grad.dims(), apply(ctx.grad.data(), &keep)))]),
        ))
    }

    /// Zeroes rows of a rank-2 value whose `mask` bit is 0.
    pub fn mask_rows(&mut self, x: Var, mask: &ValidityMask) -> Result<Var> {
        let (l, d) = rank2("mask_rows", self.dims(x))?;
        if mask.dims() != [l] {
            return Err(Error::shape("mask_rows", self.dims(x), mask.dims()));
        }
        let keep = Arc::new(mask.bits().to_vec());
        let apply = move |data: &[T], keep: &[bool]| -> Vec<T> {
            data.iter()
                .enumerate()
                .map(|(i, &v)| if keep[i / d] { v } else { T::zero() })
                .collect()
        };
        let value = t(&[l, d], apply(self.value(x).data(), &keep));
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(t(&[l, d], apply(ctx.grad.data(), &keep)))]),
        ))
    }

    /// Multiplies every channel by a constant per-position factor map.
    pub fn scale_positions(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let plane: usize = dims[1..].iter().product();
        if dims.len() < 2 || factors.len() != plane {
            return Err(Error::invalid("scale_positions", format!("{} factors for dims {dims:?}", factors.len())));
        }
        let factors = Arc::new(factors);
        let apply = |data: &[T], f: &[T]| -> Vec<T> {
            data.iter().enumerate().map(|(i, &v)| v * f[i % f.len()]).collect()
        };
        let value = t(&dims, apply(self.value(x).data(), &factors));
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(t(ctx.grad.dims(), apply(ctx.grad.data(), &factors)))]),
        ))
    }

    /// Per-channel sums over each window of `fp`; padded taps read zero.
    pub fn window_sum(&mut self, x: Var, fp: KernelFootprint) -> Result<Var> {
        let (c, h, w) = rank3("window_sum", self.dims(x))?;
        let (oh, ow) = fp.output_hw(h, w)?;
        let data = kernels::window_sum(self.value(x).data(), c, h, w, &fp, oh, ow);
        Ok(self.push(
            t(&[c, oh, ow], data),
            &[x],
            Box::new(move |ctx| {
                vec![Some(t(&[c, h, w], kernels::window_sum_backward(ctx.grad.data(), c, h, w, &fp, oh, ow)))]
            }),
        ))
    }

    /// Per-channel window maximum. Padded taps are skipped; a window made
    /// only of padding yields 0.
    pub fn max_pool2d(&mut self, x: Var, fp: KernelFootprint) -> Result<Var> {
        let (c, h, w) = rank3("max_pool2d", self.dims(x))?;
        let (oh, ow) = fp.output_hw(h, w)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        let mut arg = vec![usize::MAX; c * oh * ow];
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ki in 0..fp.kernel_h {
                        for kj in 0..fp.kernel_w {
                            let i = (oi * fp.stride + ki) as isize - fp.padding as isize;
                            let j = (oj * fp.stride + kj) as isize - fp.padding as isize;
                            if i < 0 || j < 0 || i as usize >= h || j as usize >= w {
                                continue;
                            }
                            let idx = (ci * h + i as usize) * w + j as usize;
                            if best.is_none_or(|(b, _)| src[idx] > b) {
                                best = Some((src[idx], idx));
                            }
                        }
                    }
                    if let Some((v, idx)) = best {
                        out[(ci * oh + oi) * ow + oj] = v;
                        arg[(ci * oh + oi) * ow + oj] = idx;
                    }
                }
            }
        }
        Ok(self.push(
            t(&[c, oh, ow], out),
            &[x],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); c * h * w];
                for (&a, &g) in arg.iter().zip(ctx.grad.data()) {
                    if a != usize::MAX {
                        d[a] += g;
                    }
                }
                vec![Some(t(&[c, h, w], d))]
            }),
        ))
    }

    /// Mean over the rows of `x: L × D` whose `mask` bit is set; zeros when
    /// no row is valid.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &ValidityMask) -> Result<Var> {
        let (l, d) = rank2("masked_mean_rows", self.dims(x))?;
        if mask.dims() != [l] {
            return Err(Error::shape("masked_mean_rows", self.dims(x), mask.dims()));
        }
        let keep = Arc::new(mask.bits().to_vec());
        let count = mask.count_valid();
        let mut sum = vec![T::zero(); d];
        for (r, row) in self.value(x).data().chunks_exact(d).enumerate() {
            if keep[r] {
                for (acc, &v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = if count > 0 {
            T::one() / T::from_f64_lossy(count as f64)
        } else {
            T::zero()
        };
        let mean = sum.into_iter().map(|s| s * inv).collect();
        Ok(self.push(
            t(&[d], mean),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let data = (0..l * d)
                    .map(|i| if keep[i / d] { g[i % d] * inv } else { T::zero() })
                    .collect();
                vec![Some(t(&[l, d], data))]
            }),
        ))
    }

    /// Rows of `x: L × D` with mask bit 0 are replaced by `fill: D`.
    pub fn substitute_rows(&mut self, x: Var, fill: Var, mask: &ValidityMask) -> Result<Var> {
        let (l, d) = rank2("substitute_rows", self.dims(x))?;
        if mask.dims() != [l] || self.dims(fill) != [d] {
            return Err(Error::shape("substitute_rows", self.dims(x), self.dims(fill)));
        }
        let keep = Arc::new(mask.bits().to_vec());
        let src = self.value(x).data();
        let f = self.value(fill).data();
        let data = (0..l * d)
            .map(|i| if keep[i / d] { src[i] } else { f[i % d] })
            .collect();
        Ok(self.push(
            t(&[l, d], data),
            &[x, fill],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gx = (0..l * d).map(|i| if keep[i / d] { g[i] } else { T::zero() }).collect();
                let mut gf = vec![T::zero(); d];
                for (r, row) in g.chunks_exact(d).enumerate() {
                    if !keep[r] {
                        for (acc, &v) in gf.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                vec![Some(t(&[l, d], gx)), Some(t(&[d], gf))]
            }),
        ))
    }

    /// Splits `x: C × H × W` into non-overlapping `p × p` patches in
    /// row-major order, giving `L × (C·p·p)` with a channel-major row layout.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = rank3("patchify", self.dims(x))?;
        let layout = PatchLayout::new(c, h, w, p)?;
        let data = layout.forward(self.value(x).data());
        Ok(self.push(
            t(&[layout.tokens(), layout.width()], data),
            &[x],
            Box::new(move |ctx| vec![Some(t(&[c, h, w], layout.inverse(ctx.grad.data())))]),
        ))
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, x: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
        let layout = PatchLayout::new(c, h, w, p)?;
        if self.dims(x) != [layout.tokens(), layout.width()] {
            return Err(Error::shape("unpatchify", self.dims(x), &[layout.tokens(), layout.width()]));
        }
        let data = layout.inverse(self.value(x).data());
        let (l, width) = (layout.tokens(), layout.width());
        Ok(self.push(
            t(&[c, h, w], data),
            &[x],
            Box::new(move |ctx| vec![Some(t(&[l, width], layout.forward(ctx.grad.data())))]),
        ))
    }

    /// Mean padding for patch rows. `x` is `L × (C·P²)` (channel-major rows)
    /// and `pixel_valid` holds `L × P²` bits. Invalid pixels take the mean
    /// of the valid pixels of the same channel in the same patch; rows with
    /// no valid pixel become zero.
    pub fn mean_pad_patches(&mut self, x: Var, pixel_valid: &[bool], channels: usize) -> Result<Var> {
        let (l, width) = rank2("mean_pad_patches", self.dims(x))?;
        if channels == 0 || width % channels != 0 || pixel_valid.len() != l * (width / channels) {
            return Err(Error::invalid(
                "mean_pad_patches",
                format!("{} mask bits for {l}×{width} with {channels} channels", pixel_valid.len()),
            ));
        }
        let pp = width / channels;
        let keep: Arc<Vec<bool>> = Arc::new(pixel_valid.to_vec());
        let counts: Arc<Vec<usize>> = Arc::new(keep.chunks_exact(pp).map(|r| r.iter().filter(|&&b| b).count()).collect());
        let src = self.value(x).data();
        let mut out = vec![T::zero(); l * width];
        for r in 0..l {
            let n = counts[r];
            if n == 0 {
                continue;
            }
            let inv = T::one() / T::from_f64_lossy(n as f64);
            let bits = &keep[r * pp..(r + 1) * pp];
            for ch in 0..channels {
                let off = r * width + ch * pp;
                let row = &src[off..off + pp];
                let mut mean = T::zero();
                for (v, &b) in row.iter().zip(bits) {
                    if b {
                        mean += *v;
                    }
                }
                mean *= inv;
                for (q, (&v, &b)) in row.iter().zip(bits).enumerate() {
                    out[off + q] = if b { v } else { mean };
                }
            }
        }
        Ok(self.push(
            t(&[l, width], out),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); l * width];
                for r in 0..l {
                    let n = counts[r];
                    if n == 0 {
                        continue;
                    }
                    let inv = T::one() / T::from_f64_lossy(n as f64);
                    let bits = &keep[r * pp..(r + 1) * pp];
                    for ch in 0..channels {
                        let off = r * width + ch * pp;
                        let spread: T = g[off..off + pp]
                            .iter()
                            .zip(bits)
                            .filter(|(_, &b)| !b)
                            .map(|(&v, _)| v)
                            .sum::<T>()
                            * inv;
                        for q in 0..pp {
                            if bits[q] {
                                d[off + q] = g[off + q] + spread;
                            }
                        }
                    }
                }
                vec![Some(t(&[l, width], d))]
            }),
        ))
    }

    /// Row-wise layer normalization of `x: L × D` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (l, d) = rank2("layer_norm", self.dims(x))?;
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape("layer_norm", self.dims(x), self.dims(gamma)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let dn = T::from_f64_lossy(d as f64);
        let mut xhat = vec![T::zero(); l * d];
        let mut rstd = vec![T::zero(); l];
        let mut out = vec![T::zero(); l * d];
        for r in 0..l {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * g[i] + b[i];
            }
        }
        let saved = Arc::new((xhat, rstd));
        Ok(self.push(
            t(&[l, d], out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (xhat, rstd) = &*saved;
                let gy = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut gx = vec![T::zero(); l * d];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..l {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for i in 0..d {
                        let k = r * d + i;
                        gg[i] += gy[k] * xhat[k];
                        gb[i] += gy[k];
                        let dxh = gy[k] * gamma[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[k];
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    for i in 0..d {
                        let k = r * d + i;
                        let dxh = gy[k] * gamma[i];
                        gx[k] = rstd[r] * (dxh - mean_dxh - xhat[k] * mean_dxh_xh);
                    }
                }
                vec![Some(t(&[l, d], gx)), Some(t(&[d], gg)), Some(t(&[d], gb))]
            }),
        ))
    }

    /// Selective scan over `u: L × E` with discretization steps `delta: L × E`,
    /// decay `a: E × N`, input/output maps `b`, `c: L × N` and skip `d: E`.
    /// Bidirectional sums the forward and backward scans.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        direction: ScanDirection,
    ) -> Result<Var> {
        let (len, e) = rank2("selective_scan", self.dims(u))?;
        let (ae, n) = rank2("selective_scan", self.dims(a))?;
        let ok = self.dims(delta) == [len, e]
            && ae == e
            && self.dims(b) == [len, n]
            && self.dims(c) == [len, n]
            && self.dims(d) == [e];
        if !ok {
            return Err(Error::invalid(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                    self.dims(u),
                    self.dims(delta),
                    self.dims(a),
                    self.dims(b),
                    self.dims(c),
                    self.dims(d)
                ),
            ));
        }
        let dims = ScanDims {
            len,
            channels: e,
            states: n,
        };
        let inputs = ScanInputs {
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d_skip: self.value(d).data(),
        };
        let passes: Vec<bool> = match direction {
            ScanDirection::Forward => vec![false],
            ScanDirection::Backward => vec![true],
            ScanDirection::Bidirectional => vec![false, true],
        };
        let mut y = vec![T::zero(); len * e];
        let mut traces = Vec::with_capacity(passes.len());
        for &reverse in &passes {
            let (yp, trace) = kernels::scan_forward(dims, inputs, reverse);
            for (acc, v) in y.iter_mut().zip(yp) {
                *acc += v;
            }
            traces.push((reverse, trace));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "selective_scan" });
        }
        Ok(self.push(
            t(&[len, e], y),
            &[u, delta, a, b, c, d],
            Box::new(move |ctx| {
                let inputs = ScanInputs {
                    u: ctx.inputs[0].data(),
                    delta: ctx.inputs[1].data(),
                    a: ctx.inputs[2].data(),
                    b: ctx.inputs[3].data(),
                    c: ctx.inputs[4].data(),
                    d_skip: ctx.inputs[5].data(),
                };
                let mut total: Option<kernels::ScanGrads<T>> = None;
                for (reverse, trace) in &traces {
                    let g = kernels::scan_backward(dims, inputs, trace, ctx.grad.data(), *reverse);
                    total = Some(match total {
                        None => g,
                        Some(mut acc) => {
                            for (dst, src) in [
                                (&mut acc.u, &g.u),
                                (&mut acc.delta, &g.delta),
                                (&mut acc.a, &g.a),
                                (&mut acc.b, &g.b),
                                (&mut acc.c, &g.c),
                                (&mut acc.d_skip, &g.d_skip),
                            ] {
                                for (x, &y) in dst.iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                            acc
                        }
                    });
                }
                let g = total.expect("at least one scan pass");
                vec![
                    Some(t(&[len, e], g.u)),
                    Some(t(&[len, e], g.delta)),
                    Some(t(&[e, n], g.a)),
                    Some(t(&[len, n], g.b)),
                    Some(t(&[len, n], g.c)),
                    Some(t(&[e], g.d_skip)),
                ]
            }),
        ))
    }

    /// Mean of `sqrt((pred − target)² + eps²)` over positions where `mask`
    /// is set. `mask` covers the positions of a rank-2 `pred` or the
    /// trailing axes of a channel-first one.
    pub fn charbonnier(&mut self, pred: Var, target: &Tensor<T>, mask: &ValidityMask, eps: T) -> Result<Var> {
        if self.dims(pred) != target.dims() || !self.value(pred).numel().is_multiple_of(mask.len()) {
            return Err(Error::shape("charbonnier", self.dims(pred), target.dims()));
        }
        let count = mask.count_valid() * (self.value(pred).numel() / mask.len());
        if count == 0 {
            return Err(Error::NoValidData { op: "charbonnier" });
        }
        let plane = mask.len();
        let keep = Arc::new(mask.bits().to_vec());
        let diff: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .map(|(i, (&p, &q))| if keep[i % plane] { p - q } else { T::zero() })
            .collect();
        let inv = T::one() / T::from_f64_lossy(count as f64);
        let mut total = T::zero();
        for (i, &dv) in diff.iter().enumerate() {
            if keep[i % plane] {
                total += (dv * dv + eps * eps).sqrt();
            }
        }
        let dims = self.dims(pred).to_vec();
        Ok(self.push(
            Tensor::scalar(total * inv),
            &[pred],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] * inv;
                let data = diff
                    .iter()
                    .enumerate()
                    .map(|(i, &dv)| {
                        if keep[i % plane] {
                            g * dv / (dv * dv + eps * eps).sqrt()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![Some(t(&dims, data))]
            }),
        ))
    }

    /// Negative log-likelihood of `label` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        let classes = z.len();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - z[label];
        let probs: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
        let dims = self.dims(logits).to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g * (p - if i == label { T::one() } else { T::zero() }))
                    .collect();
                vec![Some(t(&dims, data))]
            }),
        ))
    }
}

fn rank2(op: &'static str, dims: &[usize]) -> Result<(usize, usize)> {
    match dims {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::invalid(op, format!("expected rank 2, got {dims:?}"))),
    }
}

fn rank3(op: &'static str, dims: &[usize]) -> Result<(usize, usize, usize)> {
    match dims {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::invalid(op, format!("expected rank 3, got {dims:?}"))),
    }
}

fn transpose_data<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

/// Index map between a `C × H × W` map and its `L × (C·P²)` patch rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub channels: usize,
    pub height: usize,
    pub width_px: usize,
    pub patch: usize,
}

impl PatchLayout {
    pub fn new(channels: usize, height: usize, width_px: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width_px.is_multiple_of(patch) {
            return Err(Error::invalid(
                "patchify",
                format!("{height}×{width_px} is not divisible by patch size {patch}"),
            ));
        }
        Ok(Self {
            channels,
            height,
            width_px,
            patch,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width_px / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn width(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Source pixel index (into `C × H × W`) of every patch-row element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (_, gw) = self.grid();
        let p = self.patch;
        let pp = p * p;
        let width = self.width();
        for tok in 0..self.tokens() {
            let (pi, pj) = (tok / gw, tok % gw);
            for ch in 0..self.channels {
                for a in 0..p {
                    for b in 0..p {
                        let src = (ch * self.height + pi * p + a) * self.width_px + pj * p + b;
                        f(tok * width + ch * pp + a * p + b, src);
                    }
                }
            }
        }
    }

    pub fn forward<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); x.len()];
        self.for_each(|dst, src| out[dst] = x[src]);
        out
    }

    pub fn inverse<T: Copy + Default>(&self, rows: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); rows.len()];
        self.for_each(|dst, src| out[src] = rows[dst]);
        out
    }

    /// `L × P²` pixel-validity bits from a spatial `H × W` mask.
    pub fn patch_bits(&self, mask: &ValidityMask) -> Result<Vec<bool>> {
        if mask.dims() != [self.height, self.width_px] {
            return Err(Error::shape("patch_bits", mask.dims(), &[self.height, self.width_px]));
        }
        let single = PatchLayout {
            channels: 1,
            ..*self
        };
        Ok(single.forward(mask.bits()))
    }
}
