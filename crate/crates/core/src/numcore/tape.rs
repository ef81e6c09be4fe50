use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf { param: Option<ParamId> },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Square(Var),
    SumAll(Var),
    /// Spatial mean per (sample, channel); also global average pooling.
    ChannelMean(Var),
    ChannelStd { x: Var, mean: Vec<T> },
    Standardize { x: Var, mean: Var, std: Var },
    ScaleShift { x: Var, scale: Var, shift: Var, per_sample: bool },
    RowScale { x: Var, coeffs: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    LogSoftmax(Var),
    PermuteBatch { x: Var, perm: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
}

/// Ordered record of executed operations. Nodes are appended after their
/// inputs, so reverse insertion order is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) mults: u64,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mults: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplications performed by forward operations so far.
    pub fn mult_count(&self) -> u64 {
        self.mults
    }

    pub(crate) fn push(&mut self, op: &'static str, shape: Vec<usize>, value: Vec<T>, node: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            shape,
            value,
            op: node,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf { param: None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; gradients flow back to `store[id]` on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf { param: Some(id) },
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf that is treated as a constant.
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.constant(t)
    }

    /// Copy of `v`'s value cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf { param: None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> T {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.len(), 1, "item() on shape {:?}", node.shape);
        node.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone()).expect("tape values are finite and well-shaped")
    }

    /// Reverse sweep from a scalar `loss`, accumulating (`+=`) into every
    /// trainable parameter leaf reachable from it.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_impl(loss, store, None)
    }

    /// Like [`Tape::backward`] but only parameters in `wanted` receive
    /// gradients; branches that cannot reach them are skipped.
    pub fn backward_for(&self, loss: Var, store: &mut ParamStore<T>, wanted: &[ParamId]) -> Result<()> {
        let mut mask = vec![false; store.len()];
        for id in wanted {
            mask[id.0] = true;
        }
        self.backward_impl(loss, store, Some(&mask))
    }

    fn backward_impl(&self, loss: Var, store: &mut ParamStore<T>, wanted: Option<&[bool]>) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }

        let needs = self.needs_grad(loss, store, wanted);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { param: Some(id) } = node.op {
                store.accumulate(id, &g);
                continue;
            }
            self.propagate(i, &g, &needs, &mut grads);
        }
        Ok(())
    }

    fn needs_grad(&self, loss: Var, store: &ParamStore<T>, wanted: Option<&[bool]>) -> Vec<bool> {
        let mut needs = vec![false; loss.0 + 1];
        for i in 0..=loss.0 {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf { param: Some(id) } => {
                    store.peek(*id).requires_grad() && wanted.is_none_or(|m| m[id.0])
                }
                Op::Leaf { param: None } => false,
                op => inputs(op).iter().any(|v| needs[v.0]),
            };
        }
        needs
    }

    fn propagate(&self, i: usize, g: &[T], needs: &[bool], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &self.nodes[v.0].shape };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if needs[v.0] {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
                f(slot);
            }
        };

        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (patch, pos) = (geom.patch(), geom.positions());
                let fpos = geom.f * pos;
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for n in 0..geom.n {
                            for f in 0..geom.f {
                                let row = &g[n * fpos + f * pos..n * fpos + (f + 1) * pos];
                                db[f] += row.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                acc(*kernel, &mut |dk| {
                    for n in 0..geom.n {
                        // dK[F, patch] += dOut_n[F, P] * cols_n^T
                        T::gemm(
                            geom.f,
                            pos,
                            patch,
                            &g[n * fpos..(n + 1) * fpos],
                            pos as isize,
                            1,
                            &cols[n * patch * pos..(n + 1) * patch * pos],
                            1,
                            pos as isize,
                            T::one(),
                            dk,
                            patch as isize,
                            1,
                        );
                    }
                });
                let kv = val(*kernel);
                acc(*input, &mut |dx| {
                    let mut dcols = vec![T::zero(); patch * pos];
                    for n in 0..geom.n {
                        // dcols = K^T[patch, F] * dOut_n[F, P]
                        T::gemm(
                            patch,
                            geom.f,
                            pos,
                            kv,
                            1,
                            patch as isize,
                            &g[n * fpos..(n + 1) * fpos],
                            pos as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            pos as isize,
                            1,
                        );
                        let plane = geom.c * geom.h * geom.w;
                        super::ops::col2im(geom, &dcols, &mut dx[n * plane..(n + 1) * plane]);
                    }
                });
            }
            Op::Relu(x) => {
                let out = &node.value;
                acc(*x, &mut |dx| {
                    for ((d, &o), &gi) in dx.iter_mut().zip(out).zip(g) {
                        if o > T::zero() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += *c * gi));
            }
            Op::Exp(x) => {
                let out = &node.value;
                acc(*x, &mut |dx| {
                    for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(out) {
                        *d += gi * o;
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::lit(2.0);
                acc(*x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += two * xi * gi;
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::ChannelMean(x) => {
                let plane = plane_size(shp(*x));
                let inv = T::one() / T::lit(plane as f64);
                acc(*x, &mut |dx| {
                    for (chunk, &gi) in dx.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gi * inv);
                    }
                });
            }
            Op::ChannelStd { x, mean } => {
                let plane = plane_size(shp(*x));
                let xv = val(*x);
                let std = &node.value;
                let hw = T::lit(plane as f64);
                acc(*x, &mut |dx| {
                    for (j, chunk) in dx.chunks_mut(plane).enumerate() {
                        let coef = g[j] / (hw * std[j]);
                        let xs = &xv[j * plane..(j + 1) * plane];
                        for (d, &xi) in chunk.iter_mut().zip(xs) {
                            *d += coef * (xi - mean[j]);
                        }
                    }
                });
            }
            Op::Standardize { x, mean, std } => {
                let plane = plane_size(shp(*x));
                let (xv, mv, sv) = (val(*x), val(*mean), val(*std));
                acc(*x, &mut |dx| {
                    for (j, chunk) in dx.chunks_mut(plane).enumerate() {
                        let inv = T::one() / sv[j];
                        let gs = &g[j * plane..(j + 1) * plane];
                        chunk.iter_mut().zip(gs).for_each(|(d, &gi)| *d += gi * inv);
                    }
                });
                acc(*mean, &mut |dm| {
                    for (j, d) in dm.iter_mut().enumerate() {
                        let s: T = g[j * plane..(j + 1) * plane].iter().copied().sum();
                        *d -= s / sv[j];
                    }
                });
                acc(*std, &mut |ds| {
                    for (j, d) in ds.iter_mut().enumerate() {
                        let gs = &g[j * plane..(j + 1) * plane];
                        let xs = &xv[j * plane..(j + 1) * plane];
                        let s: T = gs.iter().zip(xs).map(|(&gi, &xi)| gi * (xi - mv[j])).sum();
                        *d -= s / (sv[j] * sv[j]);
                    }
                });
            }
            Op::ScaleShift {
                x,
                scale,
                shift,
                per_sample,
            } => {
                let xs = shp(*x);
                let plane = plane_size(xs);
                let channels = xs[1];
                let (xv, sv) = (val(*x), val(*scale));
                let idx = |j: usize| if *per_sample { j } else { j % channels };
                acc(*x, &mut |dx| {
                    for (j, chunk) in dx.chunks_mut(plane).enumerate() {
                        let s = sv[idx(j)];
                        let gs = &g[j * plane..(j + 1) * plane];
                        chunk.iter_mut().zip(gs).for_each(|(d, &gi)| *d += gi * s);
                    }
                });
                acc(*scale, &mut |dsc| {
                    for j in 0..xv.len() / plane {
                        let gs = &g[j * plane..(j + 1) * plane];
                        let xs = &xv[j * plane..(j + 1) * plane];
                        dsc[idx(j)] += gs.iter().zip(xs).map(|(&gi, &xi)| gi * xi).sum::<T>();
                    }
                });
                acc(*shift, &mut |dsh| {
                    for j in 0..xv.len() / plane {
                        dsh[idx(j)] += g[j * plane..(j + 1) * plane].iter().copied().sum::<T>();
                    }
                });
            }
            Op::RowScale { x, coeffs } => {
                let row = g.len() / coeffs.len();
                acc(*x, &mut |dx| {
                    for ((chunk, gs), &c) in dx.chunks_mut(row).zip(g.chunks(row)).zip(coeffs) {
                        chunk.iter_mut().zip(gs).for_each(|(d, &gi)| *d += c * gi);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, i_dim) = (shp(*x)[0], shp(*x)[1]);
                let o_dim = shp(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |dx| {
                    // dx[N, I] += g[N, O] * W[O, I]
                    T::gemm(n, o_dim, i_dim, g, o_dim as isize, 1, wv, i_dim as isize, 1, T::one(), dx, i_dim as isize, 1);
                });
                acc(*w, &mut |dw| {
                    // dW[O, I] += g^T[O, N] * x[N, I]
                    T::gemm(o_dim, n, i_dim, g, 1, o_dim as isize, xv, i_dim as isize, 1, T::one(), dw, i_dim as isize, 1);
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(o_dim) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::LogSoftmax(x) => {
                let k = *shp(*x).last().expect("log_softmax input has a class axis");
                let out = &node.value;
                acc(*x, &mut |dx| {
                    for ((d, gs), o) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let total: T = gs.iter().copied().sum();
                        for ((di, &gi), &oi) in d.iter_mut().zip(gs).zip(o) {
                            *di += gi - oi.exp() * total;
                        }
                    }
                });
            }
            Op::PermuteBatch { x, perm } => {
                let row = g.len() / perm.len();
                acc(*x, &mut |dx| {
                    for (i, &src) in perm.iter().enumerate() {
                        add_into(&mut dx[src * row..(src + 1) * row], &g[i * row..(i + 1) * row]);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |dx| add_into(dx, g));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Elements per (sample, channel) plane of an `[N, C, ...]` tensor.
pub(crate) fn plane_size(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Conv2d {
            input, kernel, bias, ..
        } => {
            let mut v = vec![*input, *kernel];
            v.extend(bias);
            v
        }
        Op::Relu(x)
        | Op::Scale(x, _)
        | Op::Exp(x)
        | Op::Square(x)
        | Op::SumAll(x)
        | Op::ChannelMean(x)
        | Op::LogSoftmax(x)
        | Op::Reshape(x) => vec![*x],
        Op::ChannelStd { x, .. } | Op::RowScale { x, .. } | Op::PermuteBatch { x, .. } => vec![*x],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Standardize { x, mean, std } => vec![*x, *mean, *std],
        Op::ScaleShift { x, scale, shift, .. } => vec![*x, *scale, *shift],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
    }
}
