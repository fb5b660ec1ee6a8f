use super::kernels::{self, LinearTaps, Window};
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn transpose_data<T: Real>(a: &Tensor<T>, r: usize, c: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    out
}

/// Pointwise activation and its derivative written in terms of the input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Pointwise {
    Elu,
    Leaky(f64),
    Relu,
    Tanh,
    Sigmoid,
    Abs,
}

impl Pointwise {
    fn eval<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Pointwise::Leaky(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(s)
                }
            }
            Pointwise::Relu => x.max(T::zero()),
            Pointwise::Tanh => x.tanh(),
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Abs => x.abs(),
        }
    }

    fn deriv<T: Real>(self, x: T) -> T {
        match self {
            Pointwise::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    x.exp()
                }
            }
            Pointwise::Leaky(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(s)
                }
            }
            Pointwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Pointwise::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Pointwise::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, vec![a, b], |g, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, vec![a, b], |g, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, vec![a, b], |g, p, needs| {
            vec![
                needs[0].then(|| g.zip_map(p[1], |gi, y| gi * y)),
                needs[1].then(|| g.zip_map(p[0], |gi, x| gi * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, vec![a], move |g, _, _| vec![Some(g.map(|x| x * s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, vec![a], |g, _, _| vec![Some(g.clone())])
    }

    pub(crate) fn pointwise(&mut self, a: Var, f: Pointwise) -> Var {
        let v = self.value(a).map(|x| f.eval(x));
        self.push(v, vec![a], move |g, p, _| vec![Some(g.zip_map(p[0], |gi, x| gi * f.deriv(x)))])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.pointwise(a, Pointwise::Elu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.pointwise(a, Pointwise::Leaky(slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.pointwise(a, Pointwise::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.pointwise(a, Pointwise::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.pointwise(a, Pointwise::Sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.pointwise(a, Pointwise::Abs)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, vec![a], move |g, p, _| {
            vec![Some(g.zip_map(p[0], |gi, x| if x > lo && x < hi { gi } else { T::zero() }))]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, vec![a], |g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push(v, vec![a], move |g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0] / n))])
    }

    /// `sum(a * w)` for a constant weight tensor; the usual probe functional
    /// in gradient checks.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != w.shape() {
            return Err(Error::Shape("weighted_sum: weight shape mismatch".into()));
        }
        let s: T = self.value(a).data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum();
        let w = w.clone();
        Ok(self.push(Tensor::scalar(s), vec![a], move |g, _, _| {
            let k = g.data()[0];
            vec![Some(w.map(|x| x * k))]
        }))
    }

    /// Divide a tensor by a scalar node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("div_scalar: divisor must be scalar".into()));
        }
        let d = self.value(s).data()[0];
        let v = self.value(a).map(|x| x / d);
        Ok(self.push(v, vec![a, s], |g, p, needs| {
            let d = p[1].data()[0];
            let ga = needs[0].then(|| g.map(|x| x / d));
            let gs = needs[1].then(|| {
                let dot: T = g.data().iter().zip(p[0].data()).map(|(&gi, &x)| gi * x).sum();
                Tensor::full(p[1].shape(), -dot / (d * d))
            });
            vec![ga, gs]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, vec![a], |g, p, _| {
            vec![Some(g.clone().reshaped(p[0].shape()).expect("reshape grad"))]
        }))
    }

    /// `m * a + (1 - m) * b` with a constant `N x 1 x H x W` mask broadcast
    /// over channels.
    pub fn blend(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        same_shape(self, a, b, "blend")?;
        let (n, c, h, w) = self.value(a).dims4()?;
        if mask.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "blend: mask {:?} does not match image {:?}",
                mask.shape(),
                self.shape(a)
            )));
        }
        let hw = h * w;
        let m = mask.clone();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let o = out.data_mut();
            for i in 0..n {
                let mp = &m.data()[i * hw..(i + 1) * hw];
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for (j, &mv) in mp.iter().enumerate() {
                        o[base + j] = mv * va[base + j] + (T::one() - mv) * vb[base + j];
                    }
                }
            }
        }
        Ok(self.push(out, vec![a, b], move |g, _, needs| {
            let mut ga = needs[0].then(|| Tensor::zeros(g.shape()));
            let mut gb = needs[1].then(|| Tensor::zeros(g.shape()));
            for i in 0..n {
                let mp = &m.data()[i * hw..(i + 1) * hw];
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for (j, &mv) in mp.iter().enumerate() {
                        let gv = g.data()[base + j];
                        if let Some(t) = ga.as_mut() {
                            t.data_mut()[base + j] = gv * mv;
                        }
                        if let Some(t) = gb.as_mut() {
                            t.data_mut()[base + j] = gv * (T::one() - mv);
                        }
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(p),
                    self.shape(parts[0])
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        let mut off = 0;
        for (&p, &pc) in parts.iter().zip(&chans) {
            let src = self.value(p).data();
            for i in 0..n {
                let dst = &mut out.data_mut()[(i * total + off) * hw..(i * total + off + pc) * hw];
                dst.copy_from_slice(&src[i * pc * hw..(i + 1) * pc * hw]);
            }
            off += pc;
        }
        Ok(self.push(out, parts.to_vec(), move |g, _, needs| {
            let mut res = Vec::with_capacity(chans.len());
            let mut off = 0;
            for (k, &pc) in chans.iter().enumerate() {
                if needs[k] {
                    let mut t = Tensor::zeros(&[n, pc, h, w]);
                    for i in 0..n {
                        t.data_mut()[i * pc * hw..(i + 1) * pc * hw]
                            .copy_from_slice(&g.data()[(i * total + off) * hw..(i * total + off + pc) * hw]);
                    }
                    res.push(Some(t));
                } else {
                    res.push(None);
                }
                off += pc;
            }
            res
        }))
    }

    /// Channels `start..start+len` of an NCHW tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if start + len > c {
            return Err(Error::Shape(format!("slice_channels {start}+{len} exceeds {c}")));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for i in 0..n {
            out.data_mut()[i * len * hw..(i + 1) * len * hw]
                .copy_from_slice(&self.value(a).data()[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut t = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                t.data_mut()[(i * c + start) * hw..(i * c + start + len) * hw]
                    .copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
            }
            vec![Some(t)]
        }))
    }

    /// Concatenate along axis 0 (batch items, stacked weight banks).
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let lens: Vec<usize> = vals.iter().map(|t| t.len()).collect();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|t| t.shape().to_vec()).collect();
        let out = Tensor::stack0(&vals)?;
        Ok(self.push(out, parts.to_vec(), move |g, _, needs| {
            let mut off = 0;
            let mut res = Vec::with_capacity(lens.len());
            for (k, &l) in lens.iter().enumerate() {
                res.push(needs[k].then(|| Tensor::new(&shapes[k], g.data()[off..off + l].to_vec()).expect("concat0 grad")));
                off += l;
            }
            res
        }))
    }

    /// Items `start..start+len` along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if start + len > shape[0] {
            return Err(Error::Shape(format!("slice0 {start}+{len} exceeds {}", shape[0])));
        }
        let item: usize = shape[1..].iter().product();
        let mut oshape = shape.clone();
        oshape[0] = len;
        let out = Tensor::new(&oshape, self.value(a).data()[start * item..(start + len) * item].to_vec())?;
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut t = Tensor::zeros(&shape);
            t.data_mut()[start * item..(start + len) * item].copy_from_slice(g.data());
            vec![Some(t)]
        }))
    }

    /// 2-D convolution, NCHW input, `O x C x k x k` weight, optional bias `O`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(weight).dims4()?;
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                self.shape(weight),
                self.shape(x)
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!("conv2d: bias {:?} for {o} filters", self.shape(b))));
            }
        }
        let win = Window {
            kernel: k,
            stride,
            pad: dilation * (k - 1) / 2,
            dilation,
        };
        self.conv_window(x, weight, bias, win)
    }

    pub(crate) fn conv_window(&mut self, x: Var, weight: Var, bias: Option<Var>, win: Window) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (o, _, k, _) = self.value(weight).dims4()?;
        let ho = win.out_len(h).ok_or_else(|| Error::Shape(format!("conv2d: input {h}x{w} too small")))?;
        let wo = win.out_len(w).ok_or_else(|| Error::Shape(format!("conv2d: input {h}x{w} too small")))?;
        let ckk = c * k * k;
        let l = ho * wo;
        let keep_cols = self.requires_grad(weight);
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let mut saved: Vec<Vec<T>> = Vec::new();
        let mut cols = vec![T::zero(); ckk * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            let bv = bias.map(|b| self.value(b).data().to_vec());
            let od = out.data_mut();
            for i in 0..n {
                kernels::im2col(&xv[i * c * h * w..(i + 1) * c * h * w], c, h, w, win, ho, wo, &mut cols);
                let dst = &mut od[i * o * l..(i + 1) * o * l];
                if let Some(bv) = &bv {
                    for (oc, row) in dst.chunks_mut(l).enumerate() {
                        row.fill(bv[oc]);
                    }
                }
                gemm(Trans::No, Trans::No, o, ckk, l, wv, &cols, T::one(), dst);
                if keep_cols {
                    saved.push(cols.clone());
                }
            }
        }
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(out, parents, move |g, p, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| Tensor::zeros(p[0].shape()));
            let mut gw = needs[1].then(|| Tensor::zeros(p[1].shape()));
            let mut dcols = vec![T::zero(); ckk * l];
            for i in 0..n {
                let gy = &gd[i * o * l..(i + 1) * o * l];
                if let Some(gw) = gw.as_mut() {
                    gemm(Trans::No, Trans::Yes, o, l, ckk, gy, &saved[i], T::one(), gw.data_mut());
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(Trans::Yes, Trans::No, ckk, o, l, p[1].data(), gy, T::zero(), &mut dcols);
                    kernels::col2im(
                        &dcols,
                        c,
                        h,
                        w,
                        win,
                        ho,
                        wo,
                        &mut gx.data_mut()[i * c * h * w..(i + 1) * c * h * w],
                    );
                }
            }
            let mut res = vec![gx, gw];
            if p.len() == 3 {
                res.push(needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[o]);
                    for i in 0..n {
                        for oc in 0..o {
                            let s: T = gd[(i * o + oc) * l..(i * o + oc + 1) * l].iter().copied().sum();
                            gb.data_mut()[oc] += s;
                        }
                    }
                    gb
                }));
            }
            res
        }))
    }

    /// Per-plane map through a linear kernel with a known adjoint.
    fn plane_op(
        &mut self,
        a: Var,
        out_hw: (usize, usize),
        fwd: impl Fn(&[T], &mut [T]),
        adj: impl Fn(&[T], &mut [T]) + 'static,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let (oh, ow) = out_hw;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for (src, dst) in self.value(a).data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            fwd(src, dst);
        }
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut t = Tensor::zeros(&[n, c, h, w]);
            for (gp, dst) in g.data().chunks(oh * ow).zip(t.data_mut().chunks_mut(h * w)) {
                adj(gp, dst);
            }
            vec![Some(t)]
        }))
    }

    /// Bilinear upsampling by an integer factor, half-pixel centres.
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(a).dims4()?;
        let ty = LinearTaps::new(h, h * factor);
        let tx = LinearTaps::new(w, w * factor);
        let (ty2, tx2) = (ty.clone(), tx.clone());
        self.plane_op(
            a,
            (h * factor, w * factor),
            |s, d| kernels::bilinear_plane(s, w, &ty, &tx, d),
            move |g, d| kernels::bilinear_plane_adjoint(g, w, &ty2, &tx2, d),
        )
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(a).dims4()?;
        self.plane_op(
            a,
            (h * factor, w * factor),
            |s, d| kernels::nearest_up_plane(s, h, w, factor, d),
            move |g, d| kernels::nearest_up_plane_adjoint(g, h, w, factor, d),
        )
    }

    /// Area-mean downsampling over `factor x factor` blocks.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(a).dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!("avg_pool: {h}x{w} not divisible by {factor}")));
        }
        self.plane_op(
            a,
            (h / factor, w / factor),
            |s, d| kernels::avg_pool_plane(s, h, w, factor, d),
            move |g, d| kernels::avg_pool_plane_adjoint(g, h, w, factor, d),
        )
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(Trans::No, Trans::No, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        Ok(self.push(out, vec![a, b], move |g, p, needs| {
            let ga = needs[0].then(|| {
                let mut t = Tensor::zeros(&[m, k]);
                gemm(Trans::No, Trans::Yes, m, n, k, g.data(), p[1].data(), T::zero(), t.data_mut());
                t
            });
            let gb = needs[1].then(|| {
                let mut t = Tensor::zeros(&[k, n]);
                gemm(Trans::Yes, Trans::No, k, m, n, p[0].data(), g.data(), T::zero(), t.data_mut());
                t
            });
            vec![ga, gb]
        }))
    }

    /// `a^T * b` for `a (k x m)`, `b (k x n)`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_tn: {k}x{m}^T by {k2}x{n}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(Trans::Yes, Trans::No, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        Ok(self.push(out, vec![a, b], move |g, p, needs| {
            // d/da = b g^T (k x m), d/db = a g (k x n)
            let ga = needs[0].then(|| {
                let mut t = Tensor::zeros(&[k, m]);
                gemm(Trans::No, Trans::Yes, k, n, m, p[1].data(), g.data(), T::zero(), t.data_mut());
                t
            });
            let gb = needs[1].then(|| {
                let mut t = Tensor::zeros(&[k, n]);
                gemm(Trans::No, Trans::No, k, m, n, p[0].data(), g.data(), T::zero(), t.data_mut());
                t
            });
            vec![ga, gb]
        }))
    }

    /// Patches of a single `1 x C x H x W` map as columns `C*k*k x L`.
    pub fn unfold(&mut self, a: Var, win: Window) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if n != 1 {
            return Err(Error::Shape("unfold expects a single item".into()));
        }
        let ho = win.out_len(h).ok_or_else(|| Error::Shape("unfold: map too small".into()))?;
        let wo = win.out_len(w).ok_or_else(|| Error::Shape("unfold: map too small".into()))?;
        let rows = c * win.kernel * win.kernel;
        let mut out = Tensor::zeros(&[rows, ho * wo]);
        kernels::im2col(self.value(a).data(), c, h, w, win, ho, wo, out.data_mut());
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut t = Tensor::zeros(&[1, c, h, w]);
            kernels::col2im(g.data(), c, h, w, win, ho, wo, t.data_mut());
            vec![Some(t)]
        }))
    }

    /// Adjoint of [`Graph::unfold`]: overlap-adds columns into a `1 x C x H x W` map.
    pub fn fold(&mut self, cols: Var, c: usize, h: usize, w: usize, win: Window) -> Result<Var> {
        let ho = win.out_len(h).ok_or_else(|| Error::Shape("fold: map too small".into()))?;
        let wo = win.out_len(w).ok_or_else(|| Error::Shape("fold: map too small".into()))?;
        let rows = c * win.kernel * win.kernel;
        if self.shape(cols) != [rows, ho * wo] {
            return Err(Error::Shape(format!(
                "fold: columns {:?}, expected [{rows}, {}]",
                self.shape(cols),
                ho * wo
            )));
        }
        let mut out = Tensor::zeros(&[1, c, h, w]);
        kernels::col2im(self.value(cols).data(), c, h, w, win, ho, wo, out.data_mut());
        Ok(self.push(out, vec![cols], move |g, _, _| {
            let mut t = Tensor::zeros(&[rows, ho * wo]);
            kernels::im2col(g.data(), c, h, w, win, ho, wo, t.data_mut());
            vec![Some(t)]
        }))
    }

    /// Scales each column to unit L2 norm, `x / sqrt(|x|^2 + eps)`.
    pub fn normalize_columns(&mut self, a: Var, eps: T) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut norms = vec![T::zero(); c];
        for i in 0..r {
            for (j, nj) in norms.iter_mut().enumerate() {
                let x = src[i * c + j];
                *nj += x * x;
            }
        }
        for nj in norms.iter_mut() {
            *nj = (*nj + eps).sqrt();
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i * c + j] = src[i * c + j] / norms[j];
            }
        }
        let y = out.clone();
        Ok(self.push(out, vec![a], move |g, _, _| {
            // dx = (g - y * <y, g>) / n
            let gd = g.data();
            let yd = y.data();
            let mut dots = vec![T::zero(); c];
            for i in 0..r {
                for (j, d) in dots.iter_mut().enumerate() {
                    *d += gd[i * c + j] * yd[i * c + j];
                }
            }
            let mut t = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    t.data_mut()[i * c + j] = (gd[i * c + j] - yd[i * c + j] * dots[j]) / norms[j];
                }
            }
            vec![Some(t)]
        }))
    }

    /// Column-wise softmax of `scale * a`.
    pub fn softmax_columns(&mut self, a: Var, scale: T) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[r, c]);
        for j in 0..c {
            let mut mx = T::neg_infinity();
            for i in 0..r {
                mx = mx.max(src[i * c + j] * scale);
            }
            let mut s = T::zero();
            for i in 0..r {
                let e = (src[i * c + j] * scale - mx).exp();
                out.data_mut()[i * c + j] = e;
                s += e;
            }
            for i in 0..r {
                let v = &mut out.data_mut()[i * c + j];
                *v = *v / s;
            }
        }
        let y = out.clone();
        Ok(self.push(out, vec![a], move |g, _, _| {
            let (gd, yd) = (g.data(), y.data());
            let mut dots = vec![T::zero(); c];
            for i in 0..r {
                for (j, d) in dots.iter_mut().enumerate() {
                    *d += gd[i * c + j] * yd[i * c + j];
                }
            }
            let mut t = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    t.data_mut()[i * c + j] = scale * yd[i * c + j] * (gd[i * c + j] - dots[j]);
                }
            }
            vec![Some(t)]
        }))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = transpose_data(self.value(a), r, c);
        Ok(self.push(out, vec![a], move |g, _, _| vec![Some(transpose_data(g, c, r))]))
    }

    /// Selected rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows: row {bad} out of {r}")));
        }
        let mut out = Tensor::zeros(&[rows.len(), c]);
        for (k, &i) in rows.iter().enumerate() {
            out.data_mut()[k * c..(k + 1) * c].copy_from_slice(&self.value(a).data()[i * c..(i + 1) * c]);
        }
        let rows = rows.to_vec();
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut t = Tensor::zeros(&[r, c]);
            for (k, &i) in rows.iter().enumerate() {
                for j in 0..c {
                    t.data_mut()[i * c + j] += g.data()[k * c + j];
                }
            }
            vec![Some(t)]
        }))
    }

    /// Two diagonal-propagation passes over a square score matrix, first in
    /// row-major then in column-major order of an `h x w` grid.
    pub fn propagate_diagonals(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let l = h * w;
        if r != l || c != l {
            return Err(Error::Shape(format!("propagate_diagonals: {r}x{c} for a {h}x{w} grid")));
        }
        let row_major: Vec<usize> = (0..l).collect();
        let col_major: Vec<usize> = (0..l).map(|i| (i % h) * w + i / h).collect();
        let mut tmp = vec![T::zero(); l * l];
        let mut out = Tensor::zeros(&[l, l]);
        kernels::diagonal_pass(self.value(a).data(), &row_major, &mut tmp);
        kernels::diagonal_pass(&tmp, &col_major, out.data_mut());
        Ok(self.push(out, vec![a], move |g, _, _| {
            let mut tmp = vec![T::zero(); l * l];
            let mut t = Tensor::zeros(&[l, l]);
            kernels::diagonal_pass(g.data(), &col_major, &mut tmp);
            kernels::diagonal_pass(&tmp, &row_major, t.data_mut());
            vec![Some(t)]
        }))
    }
}
