//! Raw numeric kernels over flat slices: convolution via im2col, window
//! sums and the selective-scan recurrence with its reverse-time adjoint.

use crate::mask::KernelFootprint;
use crate::tensor::Scalar;

/// Unfolds `x` (`C × H × W`) into a `(C·kh·kw) × (oh·ow)` column matrix.
/// Out-of-bounds taps read zero.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, fp: &KernelFootprint, oh: usize, ow: usize) -> Vec<T> {
    let (kh, kw) = (fp.kernel_h, fp.kernel_w);
    let cols = oh * ow;
    let mut out = vec![T::zero(); c * kh * kw * cols];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..oh {
                    let i = (oi * fp.stride + ki) as isize - fp.padding as isize;
                    if i < 0 || i as usize >= h {
                        continue;
                    }
                    let src = &plane[i as usize * w..(i as usize + 1) * w];
                    for oj in 0..ow {
                        let j = (oj * fp.stride + kj) as isize - fp.padding as isize;
                        if j >= 0 && (j as usize) < w {
                            dst[oi * ow + oj] = src[j as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, fp: &KernelFootprint, oh: usize, ow: usize) -> Vec<T> {
    let (kh, kw) = (fp.kernel_h, fp.kernel_w);
    let ncol = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oi in 0..oh {
                    let i = (oi * fp.stride + ki) as isize - fp.padding as isize;
                    if i < 0 || i as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let j = (oj * fp.stride + kj) as isize - fp.padding as isize;
                        if j >= 0 && (j as usize) < w {
                            plane[i as usize * w + j as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out (K × n) = w (K × m) · cols (m × n)`.
pub fn matmul_into<T: Scalar>(k: usize, m: usize, n: usize, w: &[T], cols: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    T::gemm(k, m, n, w, m as isize, 1, cols, n as isize, 1, T::zero(), &mut out, n as isize, 1);
    out
}

/// Per-channel window sums (`C × oh × ow`); padded taps contribute zero.
pub fn window_sum<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, fp: &KernelFootprint, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = T::zero();
                for ki in 0..fp.kernel_h {
                    let i = (oi * fp.stride + ki) as isize - fp.padding as isize;
                    if i < 0 || i as usize >= h {
                        continue;
                    }
                    for kj in 0..fp.kernel_w {
                        let j = (oj * fp.stride + kj) as isize - fp.padding as isize;
                        if j >= 0 && (j as usize) < w {
                            acc += plane[i as usize * w + j as usize];
                        }
                    }
                }
                out[(ci * oh + oi) * ow + oj] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`window_sum`].
pub fn window_sum_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    fp: &KernelFootprint,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let gv = g[(ci * oh + oi) * ow + oj];
                for ki in 0..fp.kernel_h {
                    let i = (oi * fp.stride + ki) as isize - fp.padding as isize;
                    if i < 0 || i as usize >= h {
                        continue;
                    }
                    for kj in 0..fp.kernel_w {
                        let j = (oj * fp.stride + kj) as isize - fp.padding as isize;
                        if j >= 0 && (j as usize) < w {
                            plane[i as usize * w + j as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Shapes of one selective-scan call: `L` steps, `E` channels, `N` states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub states: usize,
}

/// Borrowed operands of the scan.
///
/// * `u`, `delta`: `L × E`
/// * `a`: `E × N` (continuous-time decay, negative)
/// * `b`, `c`: `L × N`
/// * `d_skip`: `E`
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d_skip: &'a [T],
}

/// States kept from the forward pass for the adjoint recurrence.
pub struct ScanTrace<T> {
    /// `h_t`, laid out `L × E × N` in processing order.
    pub h: Vec<T>,
    /// `exp(Δ_t·A)`, same layout.
    pub decay: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d_skip: Vec<T>,
}

fn time_index(step: usize, len: usize, reverse: bool) -> usize {
    if reverse {
        len - 1 - step
    } else {
        step
    }
}

/// Runs `h_t = exp(Δ_t A) ⊙ h_{t−1} + Δ_t B_t u_t`, `y_t = C_t·h_t + D u_t`
/// from `h = 0`. With `reverse`, time runs from the last token to the first
/// and the output stays in original token order.
pub fn scan_forward<T: Scalar>(dims: ScanDims, x: ScanInputs<'_, T>, reverse: bool) -> (Vec<T>, ScanTrace<T>) {
    let ScanDims {
        len,
        channels: e,
        states: n,
    } = dims;
    let mut y = vec![T::zero(); len * e];
    let mut h_all = vec![T::zero(); len * e * n];
    let mut decay_all = vec![T::zero(); len * e * n];
    let mut h = vec![T::zero(); e * n];
    for step in 0..len {
        let t = time_index(step, len, reverse);
        let bt = &x.b[t * n..(t + 1) * n];
        let ct = &x.c[t * n..(t + 1) * n];
        let base = step * e * n;
        for ch in 0..e {
            let dt = x.delta[t * e + ch];
            let ut = x.u[t * e + ch];
            let du = dt * ut;
            let arow = &x.a[ch * n..(ch + 1) * n];
            let hrow = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for s in 0..n {
                let decay = (dt * arow[s]).exp();
                let hs = decay * hrow[s] + du * bt[s];
                hrow[s] = hs;
                acc += ct[s] * hs;
                decay_all[base + ch * n + s] = decay;
                h_all[base + ch * n + s] = hs;
            }
            y[t * e + ch] = acc + x.d_skip[ch] * ut;
        }
    }
    (
        y,
        ScanTrace {
            h: h_all,
            decay: decay_all,
        },
    )
}

/// Backpropagation through the recurrence, walking processing order backwards.
pub fn scan_backward<T: Scalar>(
    dims: ScanDims,
    x: ScanInputs<'_, T>,
    trace: &ScanTrace<T>,
    gy: &[T],
    reverse: bool,
) -> ScanGrads<T> {
    let ScanDims {
        len,
        channels: e,
        states: n,
    } = dims;
    let mut g = ScanGrads {
        u: vec![T::zero(); len * e],
        delta: vec![T::zero(); len * e],
        a: vec![T::zero(); e * n],
        b: vec![T::zero(); len * n],
        c: vec![T::zero(); len * n],
        d_skip: vec![T::zero(); e],
    };
    // Adjoint of h carried from the later step, already multiplied by its decay.
    let mut carry = vec![T::zero(); e * n];
    for step in (0..len).rev() {
        let t = time_index(step, len, reverse);
        let base = step * e * n;
        let bt = &x.b[t * n..(t + 1) * n];
        let ct = &x.c[t * n..(t + 1) * n];
        for ch in 0..e {
            let gyt = gy[t * e + ch];
            let dt = x.delta[t * e + ch];
            let ut = x.u[t * e + ch];
            g.d_skip[ch] += gyt * ut;
            let mut gu = gyt * x.d_skip[ch];
            let mut gdelta = T::zero();
            for s in 0..n {
                let idx = base + ch * n + s;
                let hs = trace.h[idx];
                let decay = trace.decay[idx];
                let h_prev = if step == 0 { T::zero() } else { trace.h[idx - e * n] };
                g.c[t * n + s] += gyt * hs;
                let dh = gyt * ct[s] + carry[ch * n + s];
                // h = decay·h_prev + Δ·B·u
                let ddecay = dh * h_prev;
                let arow = x.a[ch * n + s];
                gdelta += ddecay * decay * arow + dh * bt[s] * ut;
                g.a[ch * n + s] += ddecay * decay * dt;
                g.b[t * n + s] += dh * dt * ut;
                gu += dh * dt * bt[s];
                carry[ch * n + s] = dh * decay;
            }
            g.u[t * e + ch] += gu;
            g.delta[t * e + ch] += gdelta;
        }
    }
    g
}
