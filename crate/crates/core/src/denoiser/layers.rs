//! Forward and reverse-mode kernels over batched, channel-major 1-D activations.
//!
//! Every forward kernel adds the per-sample multiply-accumulates it performs
//! to a caller-supplied counter; biases, pooling and pointwise ops count zero.

/// A `channels × batch × length` activation. Each channel is one contiguous
/// slab holding every sample of the batch back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub channels: usize,
    pub batch: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(channels: usize, batch: usize, len: usize) -> Self {
        Self {
            channels,
            batch,
            len,
            data: vec![0.0; channels * batch * len],
        }
    }

    pub fn from_vec(channels: usize, batch: usize, len: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * batch * len);
        Self {
            channels,
            batch,
            len,
            data,
        }
    }

    /// Positions per channel across the whole batch.
    pub fn span(&self) -> usize {
        self.batch * self.len
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let s = self.span();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.span();
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel-wise concatenation `[self; other]`.
    pub fn concat(&self, other: &Act) -> Act {
        debug_assert_eq!((self.batch, self.len), (other.batch, other.len));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Act::from_vec(self.channels + other.channels, self.batch, self.len, data)
    }

    pub fn split(&self, first: usize) -> (Act, Act) {
        let cut = first * self.span();
        (
            Act::from_vec(first, self.batch, self.len, self.data[..cut].to_vec()),
            Act::from_vec(self.channels - first, self.batch, self.len, self.data[cut..].to_vec()),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = A·B + beta·C` for row-major operands; `ta`/`tb` read the stored
/// matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded 1-D convolution; `kernel == 1` doubles as a position-wise linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    #[cfg(test)]
    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel + self.cout
    }

    pub fn macs(&self, len: usize) -> u64 {
        (self.cout * self.cin * self.kernel * len) as u64
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight..self.weight + self.cout * self.cin * self.kernel]
    }

    /// Rows `(i, j)` hold input channel `i` shifted by `j − pad`, zero outside each sample.
    fn im2col(&self, x: &Act) -> Vec<f64> {
        let (span, len) = (x.span(), x.len);
        let pad = (self.kernel / 2) as isize;
        let mut cols = vec![0.0; self.cin * self.kernel * span];
        for i in 0..self.cin {
            let xr = x.row(i);
            for j in 0..self.kernel {
                let shift = j as isize - pad;
                let dst = &mut cols[(i * self.kernel + j) * span..][..span];
                for b in 0..x.batch {
                    shifted_add(&mut dst[b * len..(b + 1) * len], &xr[b * len..(b + 1) * len], shift);
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], gx: &mut Act) {
        let (span, len, batch) = (gx.span(), gx.len, gx.batch);
        let pad = (self.kernel / 2) as isize;
        for i in 0..self.cin {
            for j in 0..self.kernel {
                let shift = j as isize - pad;
                let src = &cols[(i * self.kernel + j) * span..][..span];
                let gr = gx.row_mut(i);
                for b in 0..batch {
                    // dst[p] += src[p − shift]
                    shifted_add(&mut gr[b * len..(b + 1) * len], &src[b * len..(b + 1) * len], -shift);
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &Act, macs: &mut u64) -> Act {
        debug_assert_eq!(x.channels, self.cin);
        let span = x.span();
        let mut y = Act::zeros(self.cout, x.batch, x.len);
        for o in 0..self.cout {
            y.row_mut(o).fill(params[self.bias + o]);
        }
        let owned;
        let cols: &[f64] = if self.kernel == 1 {
            &x.data
        } else {
            owned = self.im2col(x);
            &owned
        };
        gemm(self.cout, self.cin * self.kernel, span, self.weights(params), false, cols, false, 1.0, &mut y.data);
        *macs += self.macs(x.len);
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient when asked.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &Act, gy: &Act, need_input: bool) -> Option<Act> {
        let span = x.span();
        let ck = self.cin * self.kernel;
        for o in 0..self.cout {
            grads[self.bias + o] += gy.row(o).iter().sum::<f64>();
        }
        let owned;
        let cols: &[f64] = if self.kernel == 1 {
            &x.data
        } else {
            owned = self.im2col(x);
            &owned
        };
        let gw = &mut grads[self.weight..self.weight + self.cout * ck];
        gemm(self.cout, span, ck, &gy.data, false, cols, true, 1.0, gw);
        if !need_input {
            return None;
        }
        let mut gx = Act::zeros(self.cin, x.batch, x.len);
        if self.kernel == 1 {
            gemm(ck, self.cout, span, self.weights(params), true, &gy.data, false, 0.0, &mut gx.data);
        } else {
            let mut gcols = vec![0.0; ck * span];
            gemm(ck, self.cout, span, self.weights(params), true, &gy.data, false, 0.0, &mut gcols);
            self.col2im(&gcols, &mut gx);
        }
        Some(gx)
    }
}

/// `y[p] += x[p + shift]` over positions where both indices are valid.
fn shifted_add(y: &mut [f64], x: &[f64], shift: isize) {
    let len = y.len() as isize;
    let (ys, xs, n) = if shift >= 0 {
        (0, shift, len - shift)
    } else {
        (-shift, 0, len + shift)
    };
    if n <= 0 {
        return;
    }
    let (ys, xs, n) = (ys as usize, xs as usize, n as usize);
    for (yv, xv) in y[ys..ys + n].iter_mut().zip(&x[xs..xs + n]) {
        *yv += xv;
    }
}

/// Fully connected layer applied to each column of a `features × batch` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn macs(&self) -> u64 {
        (self.output * self.input) as u64
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight..self.weight + self.output * self.input]
    }

    pub fn forward(&self, params: &[f64], x: &[f64], batch: usize, macs: &mut u64) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input * batch);
        let mut y = Vec::with_capacity(self.output * batch);
        for o in 0..self.output {
            y.extend(std::iter::repeat_n(params[self.bias + o], batch));
        }
        gemm(self.output, self.input, batch, self.weights(params), false, x, false, 1.0, &mut y);
        *macs += self.macs();
        y
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &[f64], gy: &[f64], batch: usize) -> Vec<f64> {
        for o in 0..self.output {
            grads[self.bias + o] += gy[o * batch..(o + 1) * batch].iter().sum::<f64>();
        }
        let gw = &mut grads[self.weight..self.weight + self.output * self.input];
        gemm(self.output, batch, self.input, gy, false, x, true, 1.0, gw);
        let mut gx = vec![0.0; self.input * batch];
        gemm(self.input, self.output, batch, self.weights(params), true, gy, false, 0.0, &mut gx);
        gx
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

// Sample boundaries fall on even offsets, so pooling and upsampling can run
// over whole channel slabs.

pub fn avg_pool2(x: &Act) -> Act {
    let data = x.data.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    Act::from_vec(x.channels, x.batch, x.len / 2, data)
}

pub fn avg_pool2_backward(gy: &Act) -> Act {
    let data = gy.data.iter().flat_map(|&g| [0.5 * g, 0.5 * g]).collect();
    Act::from_vec(gy.channels, gy.batch, gy.len * 2, data)
}

pub fn upsample2(x: &Act) -> Act {
    let data = x.data.iter().flat_map(|&v| [v, v]).collect();
    Act::from_vec(x.channels, x.batch, x.len * 2, data)
}

pub fn upsample2_backward(gy: &Act) -> Act {
    let data = gy.data.chunks_exact(2).map(|p| p[0] + p[1]).collect();
    Act::from_vec(gy.channels, gy.batch, gy.len / 2, data)
}

/// Single-head dot-product self-attention over positions with a residual path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub out: Conv,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Act,
    pub q: Act,
    pub k: Act,
    pub v: Act,
    /// Row-stochastic `len × len` weights per sample, row = query position.
    pub weights: Vec<f64>,
    pub mixed: Act,
}

impl Attention {
    #[cfg(test)]
    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count() + self.out.param_count()
    }

    #[cfg(test)]
    pub fn macs(&self, len: usize) -> u64 {
        4 * self.query.macs(len) + 2 * (len * len * self.width) as u64
    }

    fn scale(&self) -> f64 {
        1.0 / (self.width as f64).sqrt()
    }

    pub fn forward(&self, params: &[f64], x: &Act, macs: &mut u64) -> (Act, AttentionCache) {
        let (len, span, w) = (x.len, x.span(), self.width);
        let q = self.query.forward(params, x, macs);
        let k = self.key.forward(params, x, macs);
        let v = self.value.forward(params, x, macs);
        let scale = self.scale();
        let mut weights = vec![0.0; x.batch * len * len];
        let mut mixed = Act::zeros(w, x.batch, len);
        for b in 0..x.batch {
            let off = b * len;
            let wb = &mut weights[b * len * len..(b + 1) * len * len];
            for i in 0..len {
                let row = &mut wb[i * len..(i + 1) * len];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = (0..w).map(|c| q.data[c * span + off + i] * k.data[c * span + off + j]).sum::<f64>() * scale;
                }
                softmax_in_place(row);
            }
            for c in 0..w {
                let vr = &v.data[c * span + off..c * span + off + len];
                for i in 0..len {
                    let row = &wb[i * len..(i + 1) * len];
                    mixed.data[c * span + off + i] = row.iter().zip(vr).map(|(a, b)| a * b).sum();
                }
            }
        }
        *macs += 2 * (len * len * w) as u64;
        let mut y = self.out.forward(params, &mixed, macs);
        y.add_assign(x);
        let cache = AttentionCache {
            input: x.clone(),
            q,
            k,
            v,
            weights,
            mixed,
        };
        (y, cache)
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], cache: &AttentionCache, gy: &Act) -> Act {
        let x = &cache.input;
        let (len, span, w) = (x.len, x.span(), self.width);
        let scale = self.scale();
        let mut gx = gy.clone();
        let gmixed = self
            .out
            .backward(params, grads, &cache.mixed, gy, true)
            .expect("input gradient requested");
        let mut gv = Act::zeros(w, x.batch, len);
        let mut gq = Act::zeros(w, x.batch, len);
        let mut gk = Act::zeros(w, x.batch, len);
        let mut gscore = vec![0.0; len * len];
        let mut ga = vec![0.0; len];
        for b in 0..x.batch {
            let off = b * len;
            let a = &cache.weights[b * len * len..(b + 1) * len * len];
            for i in 0..len {
                // dL/dA[i][j] = Σ_c gmixed[c][i] v[c][j]
                ga.fill(0.0);
                for c in 0..w {
                    let g = gmixed.data[c * span + off + i];
                    let base = c * span + off;
                    for j in 0..len {
                        ga[j] += g * cache.v.data[base + j];
                        gv.data[base + j] += a[i * len + j] * g;
                    }
                }
                let row = &a[i * len..(i + 1) * len];
                let inner: f64 = row.iter().zip(&ga).map(|(p, g)| p * g).sum();
                for j in 0..len {
                    gscore[i * len + j] = row[j] * (ga[j] - inner) * scale;
                }
            }
            for c in 0..w {
                let base = c * span + off;
                for i in 0..len {
                    let mut acc = 0.0;
                    for j in 0..len {
                        let g = gscore[i * len + j];
                        acc += g * cache.k.data[base + j];
                        gk.data[base + j] += g * cache.q.data[base + i];
                    }
                    gq.data[base + i] = acc;
                }
            }
        }
        for (proj, g) in [(&self.query, &gq), (&self.key, &gk), (&self.value, &gv)] {
            let part = proj.backward(params, grads, x, g, true).expect("input gradient requested");
            gx.add_assign(&part);
        }
        gx
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
