//! Reverse-mode differentiation over a linear tape.
//!
//! Every model here is a static graph, so a forward pass simply appends
//! nodes in evaluation order and `backward` walks them in reverse. Parameter
//! leaves hold no value of their own: they read from the borrowed
//! [`ParamStore`] and their gradients come back indexed by [`ParamId`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{AwbError, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and per-side zero padding of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            pad_top: padding,
            pad_left: padding,
            pad_bottom: padding,
            pad_right: padding,
        }
    }

    /// Stride-1 padding that preserves spatial size; the extra pixel of an
    /// even kernel goes to the bottom/right.
    pub fn same(kernel: usize) -> Self {
        let before = (kernel - 1) / 2;
        let after = kernel - 1 - before;
        Conv2dSpec {
            stride: 1,
            pad_top: before,
            pad_left: before,
            pad_bottom: after,
            pad_right: after,
        }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad_top + self.pad_bottom;
        let pw = w + self.pad_left + self.pad_right;
        if self.stride == 0 || kh == 0 || kw == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Flat per-pixel sparse votes cached by the uv histogram for its backward pass.
#[derive(Clone, Debug, Default)]
struct UvCache<T> {
    u: Vec<T>,
    v: Vec<T>,
    /// Per-pixel bit mask: 1 = r floored, 2 = g floored, 4 = b floored.
    floored: Vec<u8>,
    u_off: Vec<usize>,
    u_votes: Vec<(u32, T)>,
    v_off: Vec<usize>,
    v_votes: Vec<(u32, T)>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BroadcastSpatial {
        x: Var,
    },
    Concat(Vec<Var>),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    PadBottomRight(Var),
    Vote {
        x: Var,
        centers: Var,
        widths: Var,
    },
    UvHistogram {
        image: Var,
        bins: [Var; 4],
        floor: T,
        cache: UvCache<T>,
    },
    Spp {
        x: Var,
        strides: Vec<usize>,
    },
    ColorCorrect {
        image: Var,
        illum: Var,
    },
    NormalizeEps {
        x: Var,
        eps: T,
    },
    Mul(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Flatten(Var),
    AngularLoss {
        pred: Var,
        target: [T; 3],
        clamped: bool,
    },
    WeightedSum(Vec<(Var, T)>),
    SumAll(Var),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of an input or intermediate node; parameters are read with
    /// [`Gradients::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].as_ref()
    }

    pub fn params(&self) -> &[Option<Tensor<T>>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(AwbError::shape(
                "conv2d",
                "expected input [C,H,W], weights [Co,Ci,kh,kw], bias [Co]",
                &[xs, ws, bs],
            ));
        }
        if xs[0] != ws[1] {
            return Err(AwbError::shape(
                "conv2d",
                format!("input has {} channels but weights expect {}", xs[0], ws[1]),
                &[xs, ws],
            ));
        }
        if bs[0] != ws[0] {
            return Err(AwbError::shape(
                "conv2d",
                "bias length != output channels",
                &[ws, bs],
            ));
        }
        if spec.output_size(xs[1], xs[2], ws[2], ws[3]).is_none() {
            return Err(AwbError::shape(
                "conv2d",
                format!("kernel does not fit padded input (spec {spec:?})"),
                &[xs, ws],
            ));
        }
        let out = conv_forward(self.value(x), self.value(w), self.value(b), &spec);
        Ok(self.push(Op::Conv2d { x, w, b, spec }, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(x), out)
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xt = self.value(x);
        let (c, h, w) = xt.chw()?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(AwbError::InvalidArgument(format!(
                "max_pool k={k} stride={stride} on {h}x{w}"
            )));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0usize; c * oh * ow];
        let d = xt.data();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * stride) * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    argmax[o] = best;
                    out.data_mut()[o] = d[best];
                }
            }
        }
        Ok(self.push(Op::MaxPool { x, argmax }, out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (c, h, w) = xt.chw()?;
        let n = T::lit((h * w) as f64);
        let data = xt
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(&[c], data)?;
        Ok(self.push(Op::GlobalAvgPool(x), out))
    }

    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 1 || h == 0 || w == 0 {
            return Err(AwbError::shape(
                "broadcast_spatial",
                format!("expected a vector and h,w >= 1 (h={h}, w={w})"),
                &[xt.shape()],
            ));
        }
        let c = xt.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &v in xt.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::new(&[c, h, w], data)?;
        Ok(self.push(Op::BroadcastSpatial { x }, out))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AwbError::InvalidArgument("concat of zero tensors".into()));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
        let ok = shapes
            .iter()
            .all(|s| s.len() == 3 && s[1..] == shapes[0][1..] && shapes[0].len() == 3);
        if !ok {
            return Err(AwbError::shape(
                "concat_channels",
                "all parts must be [C_i, H, W] with equal H and W",
                &shapes,
            ));
        }
        let (h, w) = (shapes[0][1], shapes[0][2]);
        let c: usize = shapes.iter().map(|s| s[0]).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[c, h, w], data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws, bs) = (xt.shape(), wt.shape(), bt.shape());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(AwbError::shape(
                "dense",
                "expected x [D_in], weights [D_out, D_in], bias [D_out]",
                &[xs, ws, bs],
            ));
        }
        let (dout, din) = (ws[0], ws[1]);
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        let data = (0..dout)
            .map(|o| {
                let row = &wd[o * din..(o + 1) * din];
                row.iter().zip(xd).map(|(&a, &b)| a * b).sum::<T>() + bd[o]
            })
            .collect();
        let out = Tensor::new(&[dout], data)?;
        Ok(self.push(Op::Dense { x, w, b }, out))
    }

    /// Zero-pads a `[C, H, W]` map on the bottom/right up to the next multiple of `m`.
    pub fn pad_to_multiple(&mut self, x: Var, m: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).chw()?;
        let (ph, pw) = (crate::tensor::round_up(h, m), crate::tensor::round_up(w, m));
        if (ph, pw) == (h, w) {
            return Ok(x);
        }
        let out = self.value(x).pad_bottom_right(ph, pw)?;
        Ok(self.push(Op::PadBottomRight(x), out))
    }

    /// Triangular histogram votes `max(0, 1 - |x - center_b| * width_b)`; the
    /// output appends a bin axis to the input shape.
    pub fn vote(&mut self, x: Var, centers: Var, widths: Var) -> Result<Var> {
        let (xt, ct, wt) = (self.value(x), self.value(centers), self.value(widths));
        if ct.rank() != 1 || ct.shape() != wt.shape() {
            return Err(AwbError::shape(
                "vote",
                "centers and widths must be equal-length vectors",
                &[ct.shape(), wt.shape()],
            ));
        }
        let nb = ct.len();
        let mut shape = xt.shape().to_vec();
        shape.push(nb);
        let mut data = Vec::with_capacity(xt.len() * nb);
        for &xv in xt.data() {
            for (&mu, &om) in ct.data().iter().zip(wt.data()) {
                data.push(triangle(xv, mu, om));
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Vote { x, centers, widths }, out))
    }

    /// Normalized 2D log-chroma histogram of a `[3, H, W]` image. Each pixel's
    /// `(u, v) = (ln(g/r), ln(g/b))` votes separably into the u and v bins;
    /// the outer product of the two vote vectors is summed over pixels and
    /// divided by the pixel count. Output shape `[1, B_u, B_v]`.
    pub fn uv_histogram(
        &mut self,
        image: Var,
        centers_u: Var,
        widths_u: Var,
        centers_v: Var,
        widths_v: Var,
        floor: T,
    ) -> Result<Var> {
        let img = self.value(image);
        let (c, h, w) = img.chw()?;
        if c != 3 {
            return Err(AwbError::shape(
                "uv_histogram",
                "image must have 3 channels",
                &[img.shape()],
            ));
        }
        let (cu, wu, cv, wv) = (
            self.value(centers_u),
            self.value(widths_u),
            self.value(centers_v),
            self.value(widths_v),
        );
        if cu.rank() != 1 || cu.shape() != wu.shape() || cv.rank() != 1 || cv.shape() != wv.shape()
        {
            return Err(AwbError::shape(
                "uv_histogram",
                "bin centers and widths must be equal-length vectors per axis",
                &[cu.shape(), wu.shape(), cv.shape(), wv.shape()],
            ));
        }
        let (bu, bv) = (cu.len(), cv.len());
        let n = h * w;
        let d = img.data();
        let mut cache = UvCache {
            u: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            floored: Vec::with_capacity(n),
            u_off: Vec::with_capacity(n + 1),
            v_off: Vec::with_capacity(n + 1),
            ..Default::default()
        };
        let mut hist = vec![T::zero(); bu * bv];
        cache.u_off.push(0);
        cache.v_off.push(0);
        for p in 0..n {
            let mut mask = 0u8;
            let mut fl = |v: T, bit: u8| {
                if v < floor {
                    mask |= bit;
                    floor
                } else {
                    v
                }
            };
            let r = fl(d[p], 1);
            let g = fl(d[n + p], 2);
            let b = fl(d[2 * n + p], 4);
            let lg = g.ln();
            let u = lg - r.ln();
            let v = lg - b.ln();
            cache.u.push(u);
            cache.v.push(v);
            cache.floored.push(mask);
            for (i, (&mu, &om)) in cu.data().iter().zip(wu.data()).enumerate() {
                let vote = triangle(u, mu, om);
                if vote > T::zero() {
                    cache.u_votes.push((i as u32, vote));
                }
            }
            for (j, (&mu, &om)) in cv.data().iter().zip(wv.data()).enumerate() {
                let vote = triangle(v, mu, om);
                if vote > T::zero() {
                    cache.v_votes.push((j as u32, vote));
                }
            }
            let us = &cache.u_votes[*cache.u_off.last().unwrap()..];
            let vs = &cache.v_votes[*cache.v_off.last().unwrap()..];
            for &(i, a) in us {
                let row = &mut hist[i as usize * bv..(i as usize + 1) * bv];
                for &(j, bvote) in vs {
                    row[j as usize] += a * bvote;
                }
            }
            cache.u_off.push(cache.u_votes.len());
            cache.v_off.push(cache.v_votes.len());
        }
        let inv_n = T::one() / T::lit(n as f64);
        hist.iter_mut().for_each(|v| *v *= inv_n);
        let out = Tensor::new(&[1, bu, bv], hist)?;
        Ok(self.push(
            Op::UvHistogram {
                image,
                bins: [centers_u, widths_u, centers_v, widths_v],
                floor,
                cache,
            },
            out,
        ))
    }

    /// Multi-scale average pooling of a square `[1, B, B]` map, flattened and
    /// concatenated in stride order. `B` is zero-padded up to a multiple of the
    /// largest stride.
    pub fn spp(&mut self, x: Var, strides: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let b = spp_side(xt.shape())?;
        if strides.is_empty() || strides.contains(&0) || !strides.windows(2).all(|w| w[0] < w[1]) {
            return Err(AwbError::InvalidArgument(format!(
                "spp strides must be ascending and >= 1, got {strides:?}"
            )));
        }
        let bp = crate::tensor::round_up(b, *strides.last().unwrap());
        let d = xt.data();
        let mut out = Vec::with_capacity(spp_output_len(b, strides));
        for &s in strides {
            let cells = bp / s;
            let inv = T::one() / T::lit((s * s) as f64);
            for cy in 0..cells {
                for cx in 0..cells {
                    let mut acc = T::zero();
                    for y in cy * s..((cy + 1) * s).min(b) {
                        for xx in cx * s..((cx + 1) * s).min(b) {
                            acc += d[y * b + xx];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        let out = Tensor::new(&[out.len()], out)?;
        Ok(self.push(
            Op::Spp {
                x,
                strides: strides.to_vec(),
            },
            out,
        ))
    }

    /// Diagonal white balance of a `[3, H, W]` image by an illuminant `[3]`:
    /// channel k is scaled by `illum_g / illum_k`, so a pixel equal to the
    /// illuminant becomes gray at its original green level.
    pub fn color_correct(&mut self, image: Var, illum: Var) -> Result<Var> {
        let (img, il) = (self.value(image), self.value(illum));
        let (c, _, _) = img.chw()?;
        if c != 3 || il.shape() != [3] {
            return Err(AwbError::shape(
                "color_correct",
                "expected image [3,H,W] and illuminant [3]",
                &[img.shape(), il.shape()],
            ));
        }
        let ild = il.data();
        if let Some(k) = ild.iter().position(|&v| v <= T::zero() || !v.is_finite()) {
            return Err(AwbError::domain(
                "color_correct",
                format!("illuminant channel {} is {}", ["r", "g", "b"][k], ild[k]),
            ));
        }
        let plane = img.len() / 3;
        let mut out = img.clone();
        for k in [0usize, 2] {
            let s = ild[1] / ild[k];
            out.data_mut()[k * plane..(k + 1) * plane]
                .iter_mut()
                .for_each(|v| *v *= s);
        }
        Ok(self.push(Op::ColorCorrect { image, illum }, out))
    }

    /// `(x + eps) / |x + eps|`.
    pub fn normalize_eps(&mut self, x: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 1 {
            return Err(AwbError::shape(
                "normalize",
                "expected a vector",
                &[xt.shape()],
            ));
        }
        let z = xt.map(|v| v + eps);
        let n = z.norm();
        if n <= T::zero() || !n.is_finite() {
            return Err(AwbError::NonFinite(format!("normalize: norm {n}")));
        }
        let out = z.map(|v| v / n);
        Ok(self.push(Op::NormalizeEps { x, eps }, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(AwbError::shape(
                "mul",
                "operands differ",
                &[at.shape(), bt.shape()],
            ));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(at.shape(), data)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Elements `[start, start + len)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 1 || len == 0 || start + len > xt.len() {
            return Err(AwbError::shape(
                "slice",
                format!("range {start}..{} invalid", start + len),
                &[xt.shape()],
            ));
        }
        let out = Tensor::from_slice(&xt.data()[start..start + len]);
        Ok(self.push(Op::Slice { x, start }, out))
    }

    /// Rank-1 view of any tensor.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let out = xt.clone().reshape(&[xt.len()])?;
        Ok(self.push(Op::Flatten(x), out))
    }

    /// Recovery angular error in radians between a predicted `[3]` vector and a
    /// fixed target.
    pub fn angular_loss(&mut self, pred: Var, target: [f64; 3]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != [3] {
            return Err(AwbError::shape(
                "angular_loss",
                "prediction must be [3]",
                &[p.shape()],
            ));
        }
        let t = target.map(T::lit);
        let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        let pn = p.norm();
        if tn <= T::zero() || pn <= T::zero() {
            return Err(AwbError::domain("angular_loss", "zero vector"));
        }
        let pd = p.data();
        let dot = pd[0] * t[0] + pd[1] * t[1] + pd[2] * t[2];
        let cross = [
            pd[1] * t[2] - pd[2] * t[1],
            pd[2] * t[0] - pd[0] * t[2],
            pd[0] * t[1] - pd[1] * t[0],
        ];
        let sin_n = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        // atan2 keeps full precision near 0 and pi, where acos loses half the digits
        let clamped = sin_n <= T::zero();
        let out = Tensor::scalar(sin_n.atan2(dot));
        Ok(self.push(
            Op::AngularLoss {
                pred,
                target: t,
                clamped,
            },
            out,
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(AwbError::InvalidArgument("weighted_sum of nothing".into()));
        }
        let mut acc = T::zero();
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(AwbError::shape(
                    "weighted_sum",
                    "terms must be scalars",
                    &[t.shape()],
                ));
            }
            acc += wgt * t.data()[0];
        }
        Ok(self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(acc)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Hash of every piecewise-linear branch taken during the forward pass
    /// (ReLU signs, pooling winners, vote supports, clamps). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Vote { x, centers, .. } => {
                    i.hash(&mut h);
                    let out = node.value.as_ref().unwrap();
                    let nb = self.value(*centers).len();
                    for (e, &xv) in self.value(*x).data().iter().enumerate() {
                        for (bi, &mu) in self.value(*centers).data().iter().enumerate() {
                            let on = out.data()[e * nb + bi] > T::zero();
                            (on, on && xv > mu).hash(&mut h);
                        }
                    }
                }
                Op::UvHistogram { bins, cache, .. } => {
                    i.hash(&mut h);
                    cache.floored.hash(&mut h);
                    let cu = self.value(bins[0]).data();
                    let cv = self.value(bins[2]).data();
                    for p in 0..cache.u.len() {
                        for &(bi, _) in &cache.u_votes[cache.u_off[p]..cache.u_off[p + 1]] {
                            (bi, cache.u[p] > cu[bi as usize]).hash(&mut h);
                        }
                        u32::MAX.hash(&mut h);
                        for &(bi, _) in &cache.v_votes[cache.v_off[p]..cache.v_off[p + 1]] {
                            (bi, cache.v[p] > cv[bi as usize]).hash(&mut h);
                        }
                        u32::MAX.hash(&mut h);
                    }
                }
                Op::AngularLoss { clamped, .. } => {
                    i.hash(&mut h);
                    clamped.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar output with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(AwbError::shape(
                "backward",
                "loss must be a scalar",
                &[self.value(loss).shape()],
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = node.value.as_ref();
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    accumulate(&mut pgrads[id.0], g);
                    continue;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (gx, gw, gb) = conv_backward(self.value(*x), self.value(*w), &g, spec);
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaxPool { x, argmax, .. } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape();
                    let plane = xs[1] * xs[2];
                    let inv = T::one() / T::lit(plane as f64);
                    let mut data = Vec::with_capacity(xs[0] * plane);
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xs, data)?);
                }
                Op::BroadcastSpatial { x } => {
                    let c = self.value(*x).len();
                    let plane = g.len() / c;
                    let data = g
                        .data()
                        .chunks(plane)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(&[c], data)?);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let gp =
                            Tensor::new(self.value(*p).shape(), g.data()[off..off + n].to_vec())?;
                        off += n;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::Dense { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let din = xt.len();
                    let mut gx = vec![T::zero(); din];
                    let mut gw = vec![T::zero(); wt.len()];
                    for (o, &go) in g.data().iter().enumerate() {
                        let row = &wt.data()[o * din..(o + 1) * din];
                        let grow = &mut gw[o * din..(o + 1) * din];
                        for k in 0..din {
                            gx[k] += row[k] * go;
                            grow[k] = go * xt.data()[k];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xt.shape(), gx)?);
                    accumulate(&mut grads[w.0], Tensor::new(wt.shape(), gw)?);
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::PadBottomRight(x) => {
                    let (c, h, w) = self.value(*x).chw()?;
                    let (_, ph, pw) = g.chw()?;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for y in 0..h {
                            let src = (ch * ph + y) * pw;
                            let dst = (ch * h + y) * w;
                            gx.data_mut()[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Vote { x, centers, widths } => {
                    let (xt, ct, wt) = (self.value(*x), self.value(*centers), self.value(*widths));
                    let nb = ct.len();
                    let out = out.unwrap();
                    let mut gx = vec![T::zero(); xt.len()];
                    let mut gc = vec![T::zero(); nb];
                    let mut gw = vec![T::zero(); nb];
                    for (e, &xv) in xt.data().iter().enumerate() {
                        for bi in 0..nb {
                            let k = e * nb + bi;
                            if out.data()[k] <= T::zero() {
                                continue;
                            }
                            let (dx, dmu, dom) = triangle_grad(xv, ct.data()[bi], wt.data()[bi]);
                            let gv = g.data()[k];
                            gx[e] += gv * dx;
                            gc[bi] += gv * dmu;
                            gw[bi] += gv * dom;
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xt.shape(), gx)?);
                    accumulate(&mut grads[centers.0], Tensor::new(ct.shape(), gc)?);
                    accumulate(&mut grads[widths.0], Tensor::new(wt.shape(), gw)?);
                }
                Op::UvHistogram {
                    image,
                    bins,
                    floor,
                    cache,
                } => {
                    let (gimg, gbins) = self.uv_hist_backward(*image, bins, *floor, cache, &g)?;
                    accumulate(&mut grads[image.0], gimg);
                    for (v, gb) in bins.iter().zip(gbins) {
                        accumulate(&mut grads[v.0], gb);
                    }
                }
                Op::Spp { x, strides } => {
                    let xs = self.value(*x).shape();
                    let b = spp_side(xs)?;
                    let bp = crate::tensor::round_up(b, *strides.last().unwrap());
                    let mut gx = vec![T::zero(); b * b];
                    let mut off = 0;
                    for &s in strides {
                        let cells = bp / s;
                        let inv = T::one() / T::lit((s * s) as f64);
                        for cy in 0..cells {
                            for cx in 0..cells {
                                let gv = g.data()[off] * inv;
                                off += 1;
                                for y in cy * s..((cy + 1) * s).min(b) {
                                    for xx in cx * s..((cx + 1) * s).min(b) {
                                        gx[y * b + xx] += gv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xs, gx)?);
                }
                Op::ColorCorrect { image, illum } => {
                    let (img, il) = (self.value(*image), self.value(*illum));
                    let c = il.data();
                    let plane = img.len() / 3;
                    let mut gimg = g.clone();
                    let mut gil = [T::zero(); 3];
                    for k in [0usize, 2] {
                        let s = c[1] / c[k];
                        let src = &img.data()[k * plane..(k + 1) * plane];
                        let gk = &g.data()[k * plane..(k + 1) * plane];
                        let dot: T = src.iter().zip(gk).map(|(&a, &b)| a * b).sum();
                        gimg.data_mut()[k * plane..(k + 1) * plane]
                            .iter_mut()
                            .for_each(|v| *v *= s);
                        gil[1] += dot / c[k];
                        gil[k] -= dot * c[1] / (c[k] * c[k]);
                    }
                    accumulate(&mut grads[image.0], gimg);
                    accumulate(&mut grads[illum.0], Tensor::from_slice(&gil));
                }
                Op::NormalizeEps { x, eps } => {
                    let z = self.value(*x).map(|v| v + *eps);
                    let n = z.norm();
                    let y = out.unwrap();
                    let dot: T = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                    let gx = Tensor::new(
                        y.shape(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| (gv - yv * dot) / n)
                            .collect(),
                    )?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(
                        at.shape(),
                        g.data()
                            .iter()
                            .zip(bt.data())
                            .map(|(&gv, &v)| gv * v)
                            .collect(),
                    )?;
                    let gb = Tensor::new(
                        bt.shape(),
                        g.data()
                            .iter()
                            .zip(at.data())
                            .map(|(&gv, &v)| gv * v)
                            .collect(),
                    )?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Slice { x, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    gx.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Flatten(x) => {
                    let gx = g.clone().reshape(self.value(*x).shape())?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::AngularLoss {
                    pred,
                    target,
                    clamped,
                } => {
                    let p = self.value(*pred);
                    let theta = out.unwrap().data()[0];
                    let sin = theta.sin();
                    let mut gp = [T::zero(); 3];
                    if !*clamped && sin > T::lit(1e-12) {
                        let pn = p.norm();
                        let tn =
                            (target[0] * target[0] + target[1] * target[1] + target[2] * target[2])
                                .sqrt();
                        let cos = theta.cos();
                        let scale = -g.data()[0] / sin;
                        for k in 0..3 {
                            let dcos = target[k] / (pn * tn) - cos * p.data()[k] / (pn * pn);
                            gp[k] = scale * dcos;
                        }
                    }
                    accumulate(&mut grads[pred.0], Tensor::from_slice(&gp));
                }
                Op::WeightedSum(terms) => {
                    for &(v, wgt) in terms {
                        accumulate(&mut grads[v.0], Tensor::scalar(g.data()[0] * wgt));
                    }
                }
                Op::SumAll(x) => {
                    let xs = self.value(*x).shape();
                    accumulate(&mut grads[x.0], Tensor::full(xs, g.data()[0]));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }

    #[allow(clippy::type_complexity)]
    fn uv_hist_backward(
        &self,
        image: Var,
        bins: &[Var; 4],
        floor: T,
        cache: &UvCache<T>,
        g: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let img = self.value(image);
        let n = cache.u.len();
        let [cu, wu, cv, wv] = bins.map(|b| self.value(b).data());
        let (bu, bv) = (cu.len(), cv.len());
        let gd = g.data();
        let inv_n = T::one() / T::lit(n as f64);
        let mut gimg = vec![T::zero(); 3 * n];
        let mut gbins = [
            vec![T::zero(); bu],
            vec![T::zero(); bu],
            vec![T::zero(); bv],
            vec![T::zero(); bv],
        ];
        let d = img.data();
        for p in 0..n {
            let us = &cache.u_votes[cache.u_off[p]..cache.u_off[p + 1]];
            let vs = &cache.v_votes[cache.v_off[p]..cache.v_off[p + 1]];
            if us.is_empty() || vs.is_empty() {
                continue;
            }
            let (u, v) = (cache.u[p], cache.v[p]);
            let mut gu = T::zero();
            let mut gvv = T::zero();
            for &(i, _) in us {
                let row = &gd[i as usize * bv..(i as usize + 1) * bv];
                let dvote: T = vs.iter().map(|&(j, b)| row[j as usize] * b).sum::<T>() * inv_n;
                let (dx, dmu, dom) = triangle_grad(u, cu[i as usize], wu[i as usize]);
                gu += dvote * dx;
                gbins[0][i as usize] += dvote * dmu;
                gbins[1][i as usize] += dvote * dom;
            }
            for &(j, _) in vs {
                let dvote: T = us
                    .iter()
                    .map(|&(i, a)| gd[i as usize * bv + j as usize] * a)
                    .sum::<T>()
                    * inv_n;
                let (dx, dmu, dom) = triangle_grad(v, cv[j as usize], wv[j as usize]);
                gvv += dvote * dx;
                gbins[2][j as usize] += dvote * dmu;
                gbins[3][j as usize] += dvote * dom;
            }
            let mask = cache.floored[p];
            let r = d[p].max(floor);
            let gch = d[n + p].max(floor);
            let b = d[2 * n + p].max(floor);
            if mask & 1 == 0 {
                gimg[p] -= gu / r;
            }
            if mask & 2 == 0 {
                gimg[n + p] += (gu + gvv) / gch;
            }
            if mask & 4 == 0 {
                gimg[2 * n + p] -= gvv / b;
            }
        }
        let shapes = bins.map(|b| self.value(b).shape().to_vec());
        let gb = gbins
            .into_iter()
            .zip(shapes)
            .map(|(data, s)| Tensor::new(&s, data))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::new(img.shape(), gimg)?, gb))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Single triangular vote `max(0, 1 - |x - mu| * omega)`.
#[inline]
pub fn triangle<T: Real>(x: T, mu: T, omega: T) -> T {
    (T::one() - (x - mu).abs() * omega).max(T::zero())
}

/// Partial derivatives of an active (positive) triangular vote with respect
/// to `(x, mu, omega)`; the kink at `x == mu` takes the zero subgradient.
#[inline]
fn triangle_grad<T: Real>(x: T, mu: T, omega: T) -> (T, T, T) {
    let d = x - mu;
    let s = if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    (-s * omega, s * omega, -d.abs())
}

fn spp_side(shape: &[usize]) -> Result<usize> {
    match *shape {
        [1, a, b] | [a, b] if a == b => Ok(a),
        _ => Err(AwbError::shape(
            "spp",
            "expected a square [1, B, B] map",
            &[shape],
        )),
    }
}

/// Length of the flattened pyramid for a `B x B` histogram.
pub fn spp_output_len(bins: usize, strides: &[usize]) -> usize {
    let Some(&max) = strides.last() else { return 0 };
    let bp = crate::tensor::round_up(bins, max);
    strides.iter().map(|&s| (bp / s) * (bp / s)).sum()
}

/// Output positions `o` in `[0, out_len)` with `0 <= o*stride + k - pad < in_len`.
#[inline]
fn valid_range(
    out_len: usize,
    in_len: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> (usize, usize) {
    let start = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let end = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (start.min(end), end)
}

/// Non-empty `(tap, out_start, out_end)` ranges for each kernel row and column.
type TapRanges = (Vec<(usize, usize, usize)>, Vec<(usize, usize, usize)>);

fn tap_ranges(
    oh: usize,
    ow: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
) -> TapRanges {
    let live = |out: usize, len: usize, k: usize, pad: usize| {
        (0..k)
            .map(|t| {
                let (a, b) = valid_range(out, len, t, pad, spec.stride);
                (t, a, b)
            })
            .filter(|r| r.1 < r.2)
            .collect()
    };
    (
        live(oh, h, kh, spec.pad_top),
        live(ow, wd, kw, spec.pad_left),
    )
}

fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &Conv2dSpec,
) -> Tensor<T> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = spec.output_size(h, wd, kh, kw).expect("checked by caller");
    let s = spec.stride;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    let (xd, wdat) = (x.data(), w.data());
    let od = out.data_mut();
    let (ry, rx) = tap_ranges(oh, ow, h, wd, kh, kw, spec);
    for o in 0..co {
        let plane = &mut od[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(b.data()[o]);
        for c in 0..ci {
            let xin = &xd[c * h * wd..(c + 1) * h * wd];
            for &(ky, oy0, oy1) in &ry {
                for &(kx, ox0, ox1) in &rx {
                    let wv = wdat[((o * ci + c) * kh + ky) * kw + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - spec.pad_top;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let base = kx as isize - spec.pad_left as isize;
                            let src = &row
                                [(ox0 as isize + base) as usize..(ox1 as isize + base) as usize];
                            for (ov, &iv) in orow[ox0..ox1].iter_mut().zip(src) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * s + kx - spec.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &Conv2dSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let s = spec.stride;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let gb: Vec<T> = gd
        .chunks(oh * ow)
        .map(|p| p.iter().copied().sum())
        .collect();
    let (ry, rx) = tap_ranges(oh, ow, h, wd, kh, kw, spec);
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        for o in 0..co {
            let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..ci {
                let xin = &xd[c * h * wd..(c + 1) * h * wd];
                let gxin = &mut gxd[c * h * wd..(c + 1) * h * wd];
                for &(ky, oy0, oy1) in &ry {
                    for &(kx, ox0, ox1) in &rx {
                        let widx = ((o * ci + c) * kh + ky) * kw + kx;
                        let wv = wdat[widx];
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - spec.pad_top;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                let ix = iy * wd + ox * s + kx - spec.pad_left;
                                let gv = grow[ox];
                                acc += gv * xin[ix];
                                gxin[ix] += wv * gv;
                            }
                        }
                        gwd[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, Tensor::from_slice(&gb))
}
