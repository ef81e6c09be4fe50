use super::tape::{plane_size, ConvGeom, Op};
use super::{shape_err, Result, Scalar, Tape, TensorError, Var};

pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let pos = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`] for one sample.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let pos = g.positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err(
            op,
            "operand shapes",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn require_rank<T: Scalar>(tape: &Tape<T>, op: &'static str, x: Var, min: usize) -> Result<()> {
    if tape.shape(x).len() < min {
        return Err(shape_err(
            op,
            "rank",
            format!("expected at least {min} axes, got {:?}", tape.shape(x)),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,k,k]` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(OP, "input rank", format!("expected [N,C,H,W], got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(shape_err(OP, "kernel rank", format!("expected [F,C,k,k], got {ks:?}")));
        }
        if ks[1] != xs[1] {
            return Err(shape_err(
                OP,
                "channels",
                format!("kernel expects {} input channels, input has {}", ks[1], xs[1]),
            ));
        }
        if ks[2] != ks[3] {
            return Err(shape_err(OP, "kernel size", format!("kernel must be square, got {ks:?}")));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
        }
        let k = ks[2];
        if k > xs[2] + 2 * pad {
            return Err(shape_err(OP, "height", format!("kernel {k} exceeds padded height {}", xs[2] + 2 * pad)));
        }
        if k > xs[3] + 2 * pad {
            return Err(shape_err(OP, "width", format!("kernel {k} exceeds padded width {}", xs[3] + 2 * pad)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(shape_err(OP, "bias", format!("expected [{}], got {:?}", ks[0], self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let plane = geom.c * geom.h * geom.w;
        let mut cols = vec![T::zero(); geom.n * patch * pos];
        let mut out = vec![T::zero(); geom.n * geom.f * pos];
        {
            let xv = self.value(input);
            let kv = self.value(kernel);
            for n in 0..geom.n {
                let c_n = &mut cols[n * patch * pos..(n + 1) * patch * pos];
                im2col(&geom, &xv[n * plane..(n + 1) * plane], c_n);
                let o_n = &mut out[n * geom.f * pos..(n + 1) * geom.f * pos];
                T::gemm(geom.f, patch, pos, kv, patch as isize, 1, c_n, pos as isize, 1, T::zero(), o_n, pos as isize, 1);
            }
            if let Some(b) = bias {
                let bv = self.value(b);
                for (j, row) in out.chunks_mut(pos).enumerate() {
                    let bj = bv[j % geom.f];
                    row.iter_mut().for_each(|v| *v += bj);
                }
            }
        }
        self.mults += (geom.n * geom.f * pos * patch) as u64;
        self.push(
            OP,
            vec![geom.n, geom.f, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.mults += out.len() as u64;
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        self.mults += out.len() as u64;
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.exp()).collect();
        self.push("exp", self.shape(x).to_vec(), out, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * v).collect();
        self.mults += out.len() as u64;
        self.push("square", self.shape(x).to_vec(), out, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![], vec![s], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Spatial mean per (sample, channel): `[N,C,...] -> [N,C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        require_rank(self, "channel_mean", x, 3)?;
        let shape = self.shape(x).to_vec();
        let plane = plane_size(&shape);
        if plane == 0 {
            return Err(shape_err("channel_mean", "spatial extent", "zero spatial size"));
        }
        let inv = T::one() / T::lit(plane as f64);
        let out = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("channel_mean", shape[..2].to_vec(), out, Op::ChannelMean(x))
    }

    /// Global average pooling, `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.channel_mean(x)
    }

    /// `sqrt(spatial variance + eps)` per (sample, channel): `[N,C,...] -> [N,C]`.
    pub fn channel_std(&mut self, x: Var, eps: T) -> Result<Var> {
        require_rank(self, "channel_std", x, 3)?;
        if eps <= T::zero() {
            return Err(TensorError::Invalid("channel_std: eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let plane = plane_size(&shape);
        if plane == 0 {
            return Err(shape_err("channel_std", "spatial extent", "zero spatial size"));
        }
        let inv = T::one() / T::lit(plane as f64);
        let mut mean = Vec::with_capacity(shape[0] * shape[1]);
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        for c in self.value(x).chunks(plane) {
            let m = c.iter().copied().sum::<T>() * inv;
            let var = c.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv;
            mean.push(m);
            out.push((var + eps).sqrt());
        }
        self.push("channel_std", shape[..2].to_vec(), out, Op::ChannelStd { x, mean })
    }

    /// `(x - mean) / std` with `[N,C]` statistics broadcast over space.
    pub fn standardize(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        const OP: &str = "standardize";
        require_rank(self, OP, x, 3)?;
        let shape = self.shape(x).to_vec();
        for (name, v) in [("mean", mean), ("std", std)] {
            if self.shape(v) != &shape[..2] {
                return Err(shape_err(OP, name, format!("expected {:?}, got {:?}", &shape[..2], self.shape(v))));
            }
        }
        let plane = plane_size(&shape);
        let (mv, sv) = (self.value(mean), self.value(std));
        let mut out = Vec::with_capacity(self.value(x).len());
        for (j, c) in self.value(x).chunks(plane).enumerate() {
            let inv = T::one() / sv[j];
            out.extend(c.iter().map(|&v| (v - mv[j]) * inv));
        }
        self.mults += out.len() as u64;
        self.push(OP, shape, out, Op::Standardize { x, mean, std })
    }

    /// `x * scale + shift` per channel. `scale`/`shift` are `[N,C]`
    /// (per sample) or `[C]` (shared across the batch).
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        const OP: &str = "scale_shift";
        require_rank(self, OP, x, 3)?;
        let shape = self.shape(x).to_vec();
        if self.shape(scale) != self.shape(shift) {
            return Err(shape_err(OP, "shift", format!("{:?} vs scale {:?}", self.shape(shift), self.shape(scale))));
        }
        let per_sample = if self.shape(scale) == &shape[..2] {
            true
        } else if self.shape(scale) == &shape[1..2] {
            false
        } else {
            return Err(shape_err(
                OP,
                "channels",
                format!("scale {:?} does not fit input {:?}", self.shape(scale), shape),
            ));
        };
        let plane = plane_size(&shape);
        let channels = shape[1];
        let (sv, tv) = (self.value(scale), self.value(shift));
        let mut out = Vec::with_capacity(self.value(x).len());
        for (j, c) in self.value(x).chunks(plane).enumerate() {
            let i = if per_sample { j } else { j % channels };
            out.extend(c.iter().map(|&v| v * sv[i] + tv[i]));
        }
        self.mults += out.len() as u64;
        self.push(
            OP,
            shape,
            out,
            Op::ScaleShift {
                x,
                scale,
                shift,
                per_sample,
            },
        )
    }

    /// Multiplies sample `n` (leading axis) by the constant `coeffs[n]`.
    pub fn row_scale(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&coeffs.len()) {
            return Err(shape_err(
                "row_scale",
                "batch",
                format!("{} coefficients for shape {shape:?}", coeffs.len()),
            ));
        }
        let row = self.value(x).len() / coeffs.len().max(1);
        let out: Vec<T> = self
            .value(x)
            .chunks(row.max(1))
            .zip(coeffs)
            .flat_map(|(c, &a)| c.iter().map(move |&v| v * a))
            .collect();
        self.mults += out.len() as u64;
        self.push(
            "row_scale",
            shape,
            out,
            Op::RowScale {
                x,
                coeffs: coeffs.to_vec(),
            },
        )
    }

    /// `x[N,I] * W[O,I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 {
            return Err(shape_err(OP, "input rank", format!("expected [N,I], got {xs:?}")));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err(OP, "in_features", format!("weight {ws:?} vs input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(OP, "bias", format!("expected [{}], got {:?}", ws[0], self.shape(b))));
            }
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o_dim];
        T::gemm(
            n,
            i_dim,
            o_dim,
            self.value(x),
            i_dim as isize,
            1,
            self.value(w),
            1,
            i_dim as isize,
            T::zero(),
            &mut out,
            o_dim as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(o_dim) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        self.mults += (n * i_dim * o_dim) as u64;
        self.push(OP, vec![n, o_dim], out, Op::Linear { x, w, b })
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = match shape.last() {
            Some(&k) if k > 0 => k,
            _ => return Err(shape_err("log_softmax", "class axis", "empty class axis")),
        };
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax(x))
    }

    /// `out[i] = x[perm[i]]` along the leading axis.
    pub fn permute_batch(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute_batch", "batch", format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let row = self.value(x).len() / n.max(1);
        let mut out = Vec::with_capacity(self.value(x).len());
        for &p in perm {
            out.extend_from_slice(&self.value(x)[p * row..(p + 1) * row]);
        }
        self.push(
            "permute_batch",
            shape,
            out,
            Op::PermuteBatch {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                "element count",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }
}
