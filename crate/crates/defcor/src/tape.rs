//! Minimal reverse-mode automatic differentiation over dense f64 buffers.
//!
//! The corrector network is small enough that a plain tape with explicit
//! ops covers it: nodes are appended during the forward pass, and
//! `backward` walks the tape once in reverse, accumulating exact analytic
//! gradients. Values are `(channels, height, width)` buffers; scalars are
//! `1x1x1`. Parents always precede children, so the reverse sweep is a
//! single pass.

/// Buffer layout: `c` planes of `h x w`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Shape {
        Shape { c, h, w }
    }

    pub fn scalar() -> Shape {
        Shape { c: 1, h: 1, w: 1 }
    }

    pub fn plane(h: usize, w: usize) -> Shape {
        Shape { c: 1, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// out = a * k
    Scale(Var, f64),
    /// out[i] = map[i] * scalar
    BroadcastMul(Var, Var),
    /// out[i] = map[i] + scalar
    BroadcastAdd(Var, Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    /// out = a[idx] as a scalar
    Index(Var, usize),
    /// out = sqrt(v^2 + eps^2)
    SqrtEps(Var),
    Mean(Var),
    /// forward (order 1) or second (order 2) differences along an axis
    Diff(Var, Axis, u8),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        in_c: usize,
        out_c: usize,
        ksize: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    /// Bilinear warp of a constant image by a tape-held flow; gradients
    /// flow into dx/dy through the interpolation slopes, zero where the
    /// sample coordinate was clamped to the border.
    WarpImage {
        image: Vec<f64>,
        dx: Var,
        dy: Var,
    },
}

pub struct Tape {
    shapes: Vec<Shape>,
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

/// Per-node gradients after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a node; `None` if the output did not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.shapes.push(shape);
        self.values.push(value);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    /// Inserts an input node (parameter or constant).
    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(shape.len(), value.len(), "leaf buffer length");
        self.push(shape, value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Shape::scalar(), vec![value], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.shapes[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b, "add");
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x + y)
            .collect();
        self.push(s, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b, "sub");
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x - y)
            .collect();
        self.push(s, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b, "mul");
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| x * y)
            .collect();
        self.push(s, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let s = self.shapes[a.0];
        let value = self.values[a.0].iter().map(|x| x * k).collect();
        self.push(s, value, Op::Scale(a, k))
    }

    pub fn broadcast_mul(&mut self, map: Var, scalar: Var) -> Var {
        assert_eq!(self.shapes[scalar.0], Shape::scalar(), "broadcast_mul scalar");
        let s = self.shapes[map.0];
        let k = self.values[scalar.0][0];
        let value = self.values[map.0].iter().map(|x| x * k).collect();
        self.push(s, value, Op::BroadcastMul(map, scalar))
    }

    pub fn broadcast_add(&mut self, map: Var, scalar: Var) -> Var {
        assert_eq!(self.shapes[scalar.0], Shape::scalar(), "broadcast_add scalar");
        let s = self.shapes[map.0];
        let k = self.values[scalar.0][0];
        let value = self.values[map.0].iter().map(|x| x + k).collect();
        self.push(s, value, Op::BroadcastAdd(map, scalar))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = self.shapes[a.0];
        let value = self.values[a.0]
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(s, value, Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let s = self.shapes[a.0];
        let value = self.values[a.0].iter().map(|x| x.abs()).collect();
        self.push(s, value, Op::Abs(a))
    }

    /// Extracts one element as a scalar node.
    pub fn index(&mut self, a: Var, idx: usize) -> Var {
        let value = vec![self.values[a.0][idx]];
        self.push(Shape::scalar(), value, Op::Index(a, idx))
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let s = self.shapes[a.0];
        let value = self.values[a.0]
            .iter()
            .map(|&x| (x * x + eps * eps).sqrt())
            .collect();
        self.push(s, value, Op::SqrtEps(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let value = vec![self.values[a.0].iter().sum::<f64>() / n];
        self.push(Shape::scalar(), value, Op::Mean(a))
    }

    /// Forward differences (`order` 1) or central second differences
    /// (`order` 2) along an axis; the output loses 1 or 2 border lines.
    pub fn diff(&mut self, a: Var, axis: Axis, order: u8) -> Var {
        assert!(order == 1 || order == 2, "diff order must be 1 or 2");
        let s = self.shapes[a.0];
        let (oh, ow) = match axis {
            Axis::X => (s.h, s.w - order as usize),
            Axis::Y => (s.h - order as usize, s.w),
        };
        let out_shape = Shape::new(s.c, oh, ow);
        let mut value = vec![0.0; out_shape.len()];
        let v = &self.values[a.0];
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = (c * s.h + y) * s.w + x;
                    let o = (c * oh + y) * ow + x;
                    value[o] = match (axis, order) {
                        (Axis::X, 1) => v[i + 1] - v[i],
                        (Axis::X, 2) => v[i + 2] - 2.0 * v[i + 1] + v[i],
                        (Axis::Y, 1) => v[i + s.w] - v[i],
                        (Axis::Y, 2) => v[i + 2 * s.w] - 2.0 * v[i + s.w] + v[i],
                        _ => unreachable!(),
                    };
                }
            }
        }
        self.push(out_shape, value, Op::Diff(a, axis, order))
    }

    /// Same-padded square convolution (kernel size 1 or 3). Weight layout is
    /// `(out_c, in_c, k, k)` flattened; bias `(out_c)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, ksize: usize) -> Var {
        assert!(ksize == 1 || ksize == 3, "conv kernel size 1 or 3");
        let is = self.shapes[input.0];
        let out_c = self.shapes[bias.0].len();
        let in_c = is.c;
        assert_eq!(
            self.shapes[weight.0].len(),
            out_c * in_c * ksize * ksize,
            "conv weight length"
        );
        let out_shape = Shape::new(out_c, is.h, is.w);
        let value = conv2d_forward(
            &self.values[input.0],
            &self.values[weight.0],
            &self.values[bias.0],
            in_c,
            out_c,
            is.h,
            is.w,
            ksize,
        );
        self.push(
            out_shape,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                in_c,
                out_c,
                ksize,
            },
        )
    }

    /// 2x2 average pooling, stride 2; dimensions must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let s = self.shapes[a.0];
        assert!(s.h % 2 == 0 && s.w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (s.h / 2, s.w / 2);
        let mut value = vec![0.0; s.c * oh * ow];
        let v = &self.values[a.0];
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = (c * s.h + 2 * y) * s.w + 2 * x;
                    value[(c * oh + y) * ow + x] =
                        0.25 * (v[i] + v[i + 1] + v[i + s.w] + v[i + s.w + 1]);
                }
            }
        }
        self.push(Shape::new(s.c, oh, ow), value, Op::AvgPool2(a))
    }

    /// Bilinear 2x upsampling with the align-corners convention.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let s = self.shapes[a.0];
        let (oh, ow) = (s.h * 2, s.w * 2);
        let xmap = axis_map(s.w, ow);
        let ymap = axis_map(s.h, oh);
        let mut value = vec![0.0; s.c * oh * ow];
        let v = &self.values[a.0];
        for c in 0..s.c {
            let plane = &v[c * s.h * s.w..(c + 1) * s.h * s.w];
            for y in 0..oh {
                let (y0, y1, fy) = ymap[y];
                for x in 0..ow {
                    let (x0, x1, fx) = xmap[x];
                    let v00 = plane[y0 * s.w + x0];
                    let v01 = plane[y0 * s.w + x1];
                    let v10 = plane[y1 * s.w + x0];
                    let v11 = plane[y1 * s.w + x1];
                    value[(c * oh + y) * ow + x] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        self.push(Shape::new(s.c, oh, ow), value, Op::Upsample2(a))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        assert!(sa.h == sb.h && sa.w == sb.w, "concat plane dims");
        let mut value = Vec::with_capacity(sa.len() + sb.len());
        value.extend_from_slice(&self.values[a.0]);
        value.extend_from_slice(&self.values[b.0]);
        self.push(Shape::new(sa.c + sb.c, sa.h, sa.w), value, Op::Concat(a, b))
    }

    /// Warps a constant single-channel image by the flow held in `dx`/`dy`
    /// (all three must share plane dims): `out(P) = image(P + flow(P))`,
    /// border-clamped.
    pub fn warp_image(&mut self, image: &[f64], dx: Var, dy: Var) -> Var {
        let s = self.shapes[dx.0];
        assert_eq!(s, self.shapes[dy.0], "warp flow channels");
        assert_eq!(s.c, 1, "warp flow is single-channel per component");
        assert_eq!(image.len(), s.h * s.w, "warp image dims");
        let mut value = vec![0.0; s.h * s.w];
        let (h, w) = (s.h, s.w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = x as f64 + self.values[dx.0][i];
                let sy = y as f64 + self.values[dy.0][i];
                value[i] = bilinear(image, w, h, sx, sy).0;
            }
        }
        self.push(
            s,
            value,
            Op::WarpImage {
                image: image.to_vec(),
                dx,
                dy,
            },
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Shape {
        let (sa, sb) = (self.shapes[a.0], self.shapes[b.0]);
        assert_eq!(sa, sb, "{what}: shape mismatch");
        sa
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shapes[output.0], Shape::scalar(), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap().clone();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let da = acc(&mut before[a.0], g.len());
                    for (d, gg) in da.iter_mut().zip(&g) {
                        *d += gg;
                    }
                    let db = acc(&mut before[b.0], g.len());
                    for (d, gg) in db.iter_mut().zip(&g) {
                        *d += gg;
                    }
                }
                Op::Sub(a, b) => {
                    let da = acc(&mut before[a.0], g.len());
                    for (d, gg) in da.iter_mut().zip(&g) {
                        *d += gg;
                    }
                    let db = acc(&mut before[b.0], g.len());
                    for (d, gg) in db.iter_mut().zip(&g) {
                        *d -= gg;
                    }
                }
                Op::Mul(a, b) => {
                    {
                        let da = acc(&mut before[a.0], g.len());
                        for k in 0..g.len() {
                            da[k] += g[k] * self.values[b.0][k];
                        }
                    }
                    let db = acc(&mut before[b.0], g.len());
                    for k in 0..g.len() {
                        db[k] += g[k] * self.values[a.0][k];
                    }
                }
                Op::Scale(a, k) => {
                    let da = acc(&mut before[a.0], g.len());
                    for (d, gg) in da.iter_mut().zip(&g) {
                        *d += k * gg;
                    }
                }
                Op::BroadcastMul(map, scalar) => {
                    let s = self.values[scalar.0][0];
                    {
                        let dm = acc(&mut before[map.0], g.len());
                        for (d, gg) in dm.iter_mut().zip(&g) {
                            *d += s * gg;
                        }
                    }
                    let ds = acc(&mut before[scalar.0], 1);
                    ds[0] += g
                        .iter()
                        .zip(&self.values[map.0])
                        .map(|(gg, m)| gg * m)
                        .sum::<f64>();
                }
                Op::BroadcastAdd(map, scalar) => {
                    {
                        let dm = acc(&mut before[map.0], g.len());
                        for (d, gg) in dm.iter_mut().zip(&g) {
                            *d += gg;
                        }
                    }
                    let ds = acc(&mut before[scalar.0], 1);
                    ds[0] += g.iter().sum::<f64>();
                }
                Op::LeakyRelu(a, slope) => {
                    let da = acc(&mut before[a.0], g.len());
                    for k in 0..g.len() {
                        let f = if self.values[a.0][k] > 0.0 { 1.0 } else { *slope };
                        da[k] += f * g[k];
                    }
                }
                Op::Abs(a) => {
                    let da = acc(&mut before[a.0], g.len());
                    for k in 0..g.len() {
                        let v = self.values[a.0][k];
                        da[k] += g[k] * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                Op::Index(a, idx) => {
                    let da = acc(&mut before[a.0], self.values[a.0].len());
                    da[*idx] += g[0];
                }
                Op::SqrtEps(a) => {
                    let da = acc(&mut before[a.0], g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] * self.values[a.0][k] / self.values[i][k];
                    }
                }
                Op::Mean(a) => {
                    let n = self.values[a.0].len();
                    let da = acc(&mut before[a.0], n);
                    let gi = g[0] / n as f64;
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                }
                Op::Diff(a, axis, order) => {
                    let s = self.shapes[a.0];
                    let (oh, ow) = match axis {
                        Axis::X => (s.h, s.w - *order as usize),
                        Axis::Y => (s.h - *order as usize, s.w),
                    };
                    let da = acc(&mut before[a.0], s.len());
                    for c in 0..s.c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gi = g[(c * oh + y) * ow + x];
                                let base = (c * s.h + y) * s.w + x;
                                match (axis, order) {
                                    (Axis::X, 1) => {
                                        da[base + 1] += gi;
                                        da[base] -= gi;
                                    }
                                    (Axis::X, 2) => {
                                        da[base + 2] += gi;
                                        da[base + 1] -= 2.0 * gi;
                                        da[base] += gi;
                                    }
                                    (Axis::Y, 1) => {
                                        da[base + s.w] += gi;
                                        da[base] -= gi;
                                    }
                                    (Axis::Y, 2) => {
                                        da[base + 2 * s.w] += gi;
                                        da[base + s.w] -= 2.0 * gi;
                                        da[base] += gi;
                                    }
                                    _ => unreachable!(),
                                }
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    in_c,
                    out_c,
                    ksize,
                } => {
                    let s = self.shapes[input.0];
                    conv2d_backward(
                        &self.values[input.0],
                        &self.values[weight.0],
                        &g,
                        acc(&mut before[input.0], s.len()),
                        *in_c,
                        *out_c,
                        s.h,
                        s.w,
                        *ksize,
                        ConvGrad::Input,
                    );
                    conv2d_backward(
                        &self.values[input.0],
                        &self.values[weight.0],
                        &g,
                        acc(&mut before[weight.0], out_c * in_c * ksize * ksize),
                        *in_c,
                        *out_c,
                        s.h,
                        s.w,
                        *ksize,
                        ConvGrad::Weight,
                    );
                    let db = acc(&mut before[bias.0], *out_c);
                    let hw = s.h * s.w;
                    for (o, dbo) in db.iter_mut().enumerate() {
                        *dbo += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                }
                Op::AvgPool2(a) => {
                    let s = self.shapes[a.0];
                    let (oh, ow) = (s.h / 2, s.w / 2);
                    let da = acc(&mut before[a.0], s.len());
                    for c in 0..s.c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gi = 0.25 * g[(c * oh + y) * ow + x];
                                let i = (c * s.h + 2 * y) * s.w + 2 * x;
                                da[i] += gi;
                                da[i + 1] += gi;
                                da[i + s.w] += gi;
                                da[i + s.w + 1] += gi;
                            }
                        }
                    }
                }
                Op::Upsample2(a) => {
                    let s = self.shapes[a.0];
                    let (oh, ow) = (s.h * 2, s.w * 2);
                    let xmap = axis_map(s.w, ow);
                    let ymap = axis_map(s.h, oh);
                    let da = acc(&mut before[a.0], s.len());
                    for c in 0..s.c {
                        for y in 0..oh {
                            let (y0, y1, fy) = ymap[y];
                            for x in 0..ow {
                                let (x0, x1, fx) = xmap[x];
                                let gi = g[(c * oh + y) * ow + x];
                                let base = c * s.h * s.w;
                                da[base + y0 * s.w + x0] += (1.0 - fy) * (1.0 - fx) * gi;
                                da[base + y0 * s.w + x1] += (1.0 - fy) * fx * gi;
                                da[base + y1 * s.w + x0] += fy * (1.0 - fx) * gi;
                                da[base + y1 * s.w + x1] += fy * fx * gi;
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.values[a.0].len();
                    {
                        let da = acc(&mut before[a.0], na);
                        for (d, gg) in da.iter_mut().zip(&g[..na]) {
                            *d += gg;
                        }
                    }
                    let nb = self.values[b.0].len();
                    let db = acc(&mut before[b.0], nb);
                    for (d, gg) in db.iter_mut().zip(&g[na..]) {
                        *d += gg;
                    }
                }
                Op::WarpImage { image, dx, dy } => {
                    let s = self.shapes[dx.0];
                    let (h, w) = (s.h, s.w);
                    {
                        let ddx = acc(&mut before[dx.0], g.len());
                        for y in 0..h {
                            for x in 0..w {
                                let k = y * w + x;
                                let sx = x as f64 + self.values[dx.0][k];
                                let sy = y as f64 + self.values[dy.0][k];
                                let (_, gx, _) = bilinear(image, w, h, sx, sy);
                                ddx[k] += g[k] * gx;
                            }
                        }
                    }
                    let ddy = acc(&mut before[dy.0], g.len());
                    for y in 0..h {
                        for x in 0..w {
                            let k = y * w + x;
                            let sx = x as f64 + self.values[dx.0][k];
                            let sy = y as f64 + self.values[dy.0][k];
                            let (_, _, gy) = bilinear(image, w, h, sx, sy);
                            ddy[k] += g[k] * gy;
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Value plus partial derivatives w.r.t. the sample coordinates; the
/// derivatives are zero wherever the coordinate was clamped.
#[inline]
fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> (f64, f64, f64) {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let v00 = data[y0 * w + x0];
    let v01 = data[y0 * w + x1];
    let v10 = data[y1 * w + x0];
    let v11 = data[y1 * w + x1];
    let value = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    let inside_x = (x - cx).abs() < f64::EPSILON;
    let inside_y = (y - cy).abs() < f64::EPSILON;
    let gx = if inside_x {
        (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    } else {
        0.0
    };
    let gy = if inside_y {
        (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    } else {
        0.0
    };
    (value, gx, gy)
}

/// (x0, x1, frac) per destination coordinate under align-corners resizing.
fn axis_map(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = if dst <= 1 {
        0.0
    } else {
        (src - 1) as f64 / (dst - 1) as f64
    };
    (0..dst)
        .map(|i| {
            let c = i as f64 * scale;
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    ksize: usize,
) -> Vec<f64> {
    let pad = ksize / 2;
    let hw = h * w;
    let mut out = vec![0.0; out_c * hw];
    for o in 0..out_c {
        let out_plane = &mut out[o * hw..(o + 1) * hw];
        out_plane.fill(bias[o]);
        for ci in 0..in_c {
            let in_plane = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..ksize {
                let dy = ky as isize - pad as isize;
                for kx in 0..ksize {
                    let dx = kx as isize - pad as isize;
                    let wgt = weight[((o * in_c + ci) * ksize + ky) * ksize + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y_lo..y_hi {
                        let src = &in_plane[((y as isize + dy) as usize) * w..];
                        let dst = &mut out_plane[y * w..y * w + w];
                        for x in x_lo..x_hi {
                            dst[x] += wgt * src[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

enum ConvGrad {
    Input,
    Weight,
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    g: &[f64],
    target: &mut [f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    ksize: usize,
    which: ConvGrad,
) {
    let pad = ksize / 2;
    let hw = h * w;
    for o in 0..out_c {
        let g_plane = &g[o * hw..(o + 1) * hw];
        for ci in 0..in_c {
            for ky in 0..ksize {
                let dy = ky as isize - pad as isize;
                for kx in 0..ksize {
                    let dx = kx as isize - pad as isize;
                    let widx = ((o * in_c + ci) * ksize + ky) * ksize + kx;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    match which {
                        ConvGrad::Input => {
                            let wgt = weight[widx];
                            if wgt == 0.0 {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let srow = ((y as isize + dy) as usize) * w;
                                let grow = y * w;
                                for x in x_lo..x_hi {
                                    target[ci * hw + srow + (x as isize + dx) as usize] +=
                                        wgt * g_plane[grow + x];
                                }
                            }
                        }
                        ConvGrad::Weight => {
                            let in_plane = &input[ci * hw..(ci + 1) * hw];
                            let mut acc = 0.0;
                            for y in y_lo..y_hi {
                                let srow = ((y as isize + dy) as usize) * w;
                                let grow = y * w;
                                for x in x_lo..x_hi {
                                    acc += in_plane[srow + (x as isize + dx) as usize]
                                        * g_plane[grow + x];
                                }
                            }
                            target[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_leaf_gradients, random_buffer};

    #[test]
    fn leaky_relu_values() {
        let mut t = Tape::new();
        let a = t.leaf(Shape::new(1, 1, 3), vec![-1.0, 0.0, 2.0]);
        let r = t.leaky_relu(a, 0.01);
        assert_eq!(t.value(r), &[-0.01, 0.0, 2.0]);
    }

    #[test]
    fn mean_and_backward_basics() {
        let mut t = Tape::new();
        let a = t.leaf(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let m = t.mean(a);
        assert_eq!(t.value(m), &[2.5]);
        let g = t.backward(m);
        assert_eq!(g.get(a).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn shared_var_accumulates() {
        // d(mean(a*a))/da = 2a/n
        let mut t = Tape::new();
        let a = t.leaf(Shape::new(1, 1, 2), vec![3.0, -2.0]);
        let sq = t.mul(a, a);
        let m = t.mean(sq);
        let g = t.backward(m);
        assert_eq!(g.get(a).unwrap(), &[3.0, -2.0]);
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("leaky", 3),
            ("abs", 4),
            ("sqrt_eps", 5),
        ] {
            check_leaf_gradients(
                &[Shape::new(1, 4, 6), Shape::new(1, 4, 6)],
                7 + f as u64,
                |t, leaves| {
                    let (a, b) = (leaves[0], leaves[1]);
                    let out = match f {
                        0 => t.add(a, b),
                        1 => t.sub(a, b),
                        2 => t.mul(a, b),
                        3 => t.leaky_relu(a, 0.01),
                        4 => t.abs(a),
                        _ => t.sqrt_eps(a, 1e-3),
                    };
                    let out2 = t.mul(out, out);
                    t.mean(out2)
                },
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn gradcheck_broadcast_and_scale() {
        check_leaf_gradients(
            &[Shape::new(1, 3, 5), Shape::scalar(), Shape::scalar()],
            11,
            |t, leaves| {
                let m = t.broadcast_mul(leaves[0], leaves[1]);
                let m = t.broadcast_add(m, leaves[2]);
                let m = t.scale(m, 1.7);
                let sq = t.mul(m, m);
                t.mean(sq)
            },
        )
        .unwrap();
    }

    #[test]
    fn gradcheck_diff_ops() {
        for axis in [Axis::X, Axis::Y] {
            for order in [1u8, 2] {
                check_leaf_gradients(&[Shape::new(2, 5, 6)], 13, |t, leaves| {
                    let d = t.diff(leaves[0], axis, order);
                    let sq = t.mul(d, d);
                    t.mean(sq)
                })
                .unwrap();
            }
        }
    }

    #[test]
    fn gradcheck_conv() {
        for ksize in [1usize, 3] {
            check_leaf_gradients(
                &[
                    Shape::new(2, 4, 6),
                    Shape::new(3, 2, ksize * ksize),
                    Shape::new(3, 1, 1),
                ],
                17,
                |t, leaves| {
                    let c = t.conv2d(leaves[0], leaves[1], leaves[2], ksize);
                    let c = t.leaky_relu(c, 0.01);
                    let sq = t.mul(c, c);
                    t.mean(sq)
                },
            )
            .unwrap();
        }
    }

    #[test]
    fn gradcheck_pool_upsample_concat() {
        check_leaf_gradients(
            &[Shape::new(2, 4, 6), Shape::new(1, 4, 6)],
            19,
            |t, leaves| {
                let p = t.avg_pool2(leaves[0]);
                let u = t.upsample2(p);
                let c = t.concat(u, leaves[1]);
                let sq = t.mul(c, c);
                t.mean(sq)
            },
        )
        .unwrap();
    }

    #[test]
    fn gradcheck_warp() {
        let image = random_buffer(6 * 5, 23);
        check_leaf_gradients(
            &[Shape::plane(5, 6), Shape::plane(5, 6)],
            29,
            move |t, leaves| {
                let scaled_dx = t.scale(leaves[0], 0.8);
                let scaled_dy = t.scale(leaves[1], 0.8);
                let wimg = t.warp_image(&image, scaled_dx, scaled_dy);
                let sq = t.mul(wimg, wimg);
                t.mean(sq)
            },
        )
        .unwrap();
    }

    #[test]
    fn upsample_exact_on_linear_ramp() {
        let mut t = Tape::new();
        let mut data = vec![0.0; 12];
        for y in 0..3 {
            for x in 0..4 {
                data[y * 4 + x] = 2.0 * x as f64 - y as f64;
            }
        }
        let a = t.leaf(Shape::new(1, 3, 4), data);
        let up = t.upsample2(a);
        let s = t.shape(up);
        // affine in position: check an arbitrary interior sample
        let v = t.value(up)[(2 * s.w) + 3];
        let expect = 2.0 * (3.0 * 3.0 / 7.0) - (2.0 * 2.0 / 5.0);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }
}
