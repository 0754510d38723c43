//! Forward op constructors and the backward dispatcher.

use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

use super::conv::{col2im, im2col, ConvGeom};
use super::{Node, Tape, Var};
use crate::error::Result;

pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// scale * x + offset, element-wise; only the scale matters in backward.
    Affine { scale: f64 },
    MatMul,
    Relu,
    Sigmoid,
    /// ln(max(x, floor)).
    Ln { floor: f64 },
    SumAll,
    /// Row-wise log-softmax over axis 1 of a 2-D array.
    LogSoftmaxRows,
    /// Pick out[i] = x[i, idx[i]] from a 2-D array.
    SelectRows { idx: Vec<usize> },
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    /// (n, c, h, w) -> (n, c) spatial mean.
    GlobalAvgPool,
    /// (n, c, h, w) -> (n, c) spatial max; flat spatial argmax per (n, c).
    GlobalMaxPool { argmax: Vec<usize> },
    /// (n, c, h, w) -> (n, 1, h, w) mean over channels.
    ChannelMean,
    /// (n, c, h, w) -> (n, 1, h, w) max over channels; argmax per (n, h, w).
    ChannelMax { argmax: Vec<usize> },
    /// Two inputs stacked along axis 1; `split` = channels of the first.
    ConcatChannels { split: usize },
    Reshape,
    /// 3x3 zero-padded uniform spatial filter (self-adjoint).
    MeanFilter3x3,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    if a.is_empty() {
        return b.to_vec();
    }
    if b.is_empty() {
        return a.to_vec();
    }
    assert_eq!(a.len(), b.len(), "broadcast rank mismatch: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast: {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
fn reduce_to_shape(g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    if g.shape() == target {
        return g;
    }
    if target.is_empty() {
        let total = g.sum();
        return ArrayD::from_elem(IxDyn(&[]), total);
    }
    let mut out = g;
    for ax in 0..target.len() {
        if target[ax] == 1 && out.shape()[ax] > 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let value = {
            let va = self.value(a).broadcast(IxDyn(&shape)).expect("broadcast a");
            let vb = self.value(b).broadcast(IxDyn(&shape)).expect("broadcast b");
            &va + &vb
        };
        self.push(value, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let value = {
            let va = self.value(a).broadcast(IxDyn(&shape)).expect("broadcast a");
            let vb = self.value(b).broadcast(IxDyn(&shape)).expect("broadcast b");
            &va - &vb
        };
        self.push(value, vec![a.0, b.0], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let value = {
            let va = self.value(a).broadcast(IxDyn(&shape)).expect("broadcast a");
            let vb = self.value(b).broadcast(IxDyn(&shape)).expect("broadcast b");
            &va * &vb
        };
        self.push(value, vec![a.0, b.0], Op::Mul)
    }

    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + offset);
        self.push(value, vec![a.0], Op::Affine { scale })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// (n, k) x (k, m) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let vb = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let value = va.dot(&vb).into_dyn();
        self.push(value, vec![a.0, b.0], Op::MatMul)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, vec![a.0], Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, vec![a.0], Op::Sigmoid)
    }

    pub fn ln_floored(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(value, vec![a.0], Op::Ln { floor })
    }

    /// Sum of all elements, yielding a 0-d scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(value, vec![a.0], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Numerically stable log-softmax along axis 1 of an (n, c) array.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).view().into_dimensionality::<Ix2>().expect("log_softmax 2-D");
        let mut out = Array2::<f64>::zeros(v.raw_dim());
        for (mut orow, irow) in out.rows_mut().into_iter().zip(v.rows()) {
            let m = irow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + irow.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in orow.iter_mut().zip(irow.iter()) {
                *o = x - lse;
            }
        }
        self.push(out.into_dyn(), vec![a.0], Op::LogSoftmaxRows)
    }

    /// out[i] = x[i, idx[i]] for a 2-D input.
    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).view().into_dimensionality::<Ix2>().expect("select_rows 2-D");
        assert_eq!(v.nrows(), idx.len(), "select_rows index length");
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &k)| v[[i, k]]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), out).unwrap();
        self.push(value, vec![a.0], Op::SelectRows { idx })
    }

    /// x: (n, cin, h, w), w: (cout, cin, kh, kw).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv input 4-D");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv weight 4-D");
        let (n, cin, h, wd) = xv.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let w2d = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();
        let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
        for i in 0..n {
            let cols = im2col(xv.index_axis(Axis(0), i), geom);
            let o2d = w2d.dot(&cols);
            out.index_axis_mut(Axis(0), i)
                .assign(&o2d.into_shape_with_order((cout, oh, ow)).unwrap());
        }
        self.push(out.into_dyn(), vec![x.0, w.0], Op::Conv2d { stride, pad })
    }

    /// Transpose convolution. x: (n, cin, h, w), w: (cin, cout, kh, kw);
    /// output spatial size (h-1)*stride - 2*pad + k.
    pub fn conv_t2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("convT input 4-D");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("convT weight 4-D");
        let (n, cin, h, wd) = xv.dim();
        let (wcin, cout, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv_t2d channel mismatch");
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        // The output plays the role of a conv input whose im2col has h*w columns.
        let geom = ConvGeom { cin: cout, h: oh, w: ow, kh, kw, stride, pad };
        debug_assert_eq!(geom.out_h(), h);
        debug_assert_eq!(geom.out_w(), wd);
        let w2d = wv.into_shape_with_order((cin, cout * kh * kw)).unwrap();
        let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
        for i in 0..n {
            let x2d = xv
                .index_axis(Axis(0), i)
                .into_shape_with_order((cin, h * wd))
                .unwrap();
            let cols = w2d.t().dot(&x2d);
            out.index_axis_mut(Axis(0), i).assign(&col2im(cols.view(), geom));
        }
        self.push(out.into_dyn(), vec![x.0, w.0], Op::ConvT2d { stride, pad })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input 4-D");
        let (n, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                out[[i, ch]] = xv.slice(s![i, ch, .., ..]).sum() / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), vec![x.0], Op::GlobalAvgPool)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input 4-D");
        let (n, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.slice(s![i, ch, .., ..]);
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for (k, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[[i, ch]] = best;
                argmax[i * c + ch] = best_k;
            }
        }
        let _ = (h, w);
        self.push(out.into_dyn(), vec![x.0], Op::GlobalMaxPool { argmax })
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input 4-D");
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, 1, h, w));
        for i in 0..n {
            for ii in 0..h {
                for jj in 0..w {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += xv[[i, ch, ii, jj]];
                    }
                    out[[i, 0, ii, jj]] = s / c as f64;
                }
            }
        }
        self.push(out.into_dyn(), vec![x.0], Op::ChannelMean)
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input 4-D");
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, 1, h, w));
        let mut argmax = vec![0usize; n * h * w];
        for i in 0..n {
            for ii in 0..h {
                for jj in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_c = 0;
                    for ch in 0..c {
                        let v = xv[[i, ch, ii, jj]];
                        if v > best {
                            best = v;
                            best_c = ch;
                        }
                    }
                    out[[i, 0, ii, jj]] = best;
                    argmax[(i * h + ii) * w + jj] = best_c;
                }
            }
        }
        self.push(out.into_dyn(), vec![x.0], Op::ChannelMax { argmax })
    }

    /// Stack two (n, *, h, w) arrays along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix4>().expect("concat 4-D");
        let vb = self.value(b).view().into_dimensionality::<Ix4>().expect("concat 4-D");
        let split = va.dim().1;
        let value = ndarray::concatenate(Axis(1), &[va, vb]).expect("concat shapes");
        self.push(value.into_dyn(), vec![a.0, b.0], Op::ConcatChannels { split })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(value, vec![a.0], Op::Reshape)
    }

    /// 3x3 uniform spatial mean with zero padding, applied per channel.
    pub fn mean_filter3x3(&mut self, x: Var) -> Var {
        let value = mean_filter3x3_array(self.value(x));
        self.push(value, vec![x.0], Op::MeanFilter3x3)
    }
}

fn mean_filter3x3_array(x: &ArrayD<f64>) -> ArrayD<f64> {
    let xv = x.view().into_dimensionality::<Ix4>().expect("mean filter input 4-D");
    let (n, c, h, w) = xv.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for ii in 0..h {
                for jj in 0..w {
                    let mut s = 0.0;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let ri = ii as i64 + di;
                            let rj = jj as i64 + dj;
                            if ri >= 0 && ri < h as i64 && rj >= 0 && rj < w as i64 {
                                s += xv[[i, ch, ri as usize, rj as usize]];
                            }
                        }
                    }
                    out[[i, ch, ii, jj]] = s / 9.0;
                }
            }
        }
    }
    out.into_dyn()
}

/// Compute gradients for a node's parents given the upstream gradient.
pub(crate) fn backward(tape: &Tape, node: &Node, g: &ArrayD<f64>) -> Result<Vec<ArrayD<f64>>> {
    let parent = |k: usize| &tape.nodes[node.parents[k]].value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![
            reduce_to_shape(g.clone(), parent(0).shape()),
            reduce_to_shape(g.clone(), parent(1).shape()),
        ],
        Op::Sub => vec![
            reduce_to_shape(g.clone(), parent(0).shape()),
            reduce_to_shape(-g.clone(), parent(1).shape()),
        ],
        Op::Mul => {
            let shape = node.value.shape();
            let va = parent(0).broadcast(IxDyn(shape)).unwrap();
            let vb = parent(1).broadcast(IxDyn(shape)).unwrap();
            vec![
                reduce_to_shape(g * &vb, parent(0).shape()),
                reduce_to_shape(g * &va, parent(1).shape()),
            ]
        }
        Op::Affine { scale } => vec![g.mapv(|x| x * scale)],
        Op::MatMul => {
            let va = parent(0).view().into_dimensionality::<Ix2>().unwrap();
            let vb = parent(1).view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            vec![g2.dot(&vb.t()).into_dyn(), va.t().dot(&g2).into_dyn()]
        }
        Op::Relu => {
            let mask = parent(0).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            vec![g * &mask]
        }
        Op::Sigmoid => {
            let y = &node.value;
            vec![g * &(y * &y.mapv(|v| 1.0 - v))]
        }
        Op::Ln { floor } => {
            let d = parent(0).mapv(|x| if x > *floor { 1.0 / x } else { 0.0 });
            vec![g * &d]
        }
        Op::SumAll => {
            let gs = *g.iter().next().unwrap();
            vec![ArrayD::from_elem(parent(0).raw_dim(), gs)]
        }
        Op::LogSoftmaxRows => {
            // y = log_softmax(x); softmax = exp(y); gx = g - softmax * rowsum(g)
            let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(y.raw_dim());
            for ((mut grow, yrow), gr) in gx.rows_mut().into_iter().zip(y.rows()).zip(g2.rows()) {
                let rowsum: f64 = gr.sum();
                for ((o, &yv), &gv) in grow.iter_mut().zip(yrow.iter()).zip(gr.iter()) {
                    *o = gv - yv.exp() * rowsum;
                }
            }
            vec![gx.into_dyn()]
        }
        Op::SelectRows { idx } => {
            let mut gx = Array2::<f64>::zeros(
                parent(0).view().into_dimensionality::<Ix2>().unwrap().raw_dim(),
            );
            for (i, &k) in idx.iter().enumerate() {
                gx[[i, k]] = g[IxDyn(&[i])];
            }
            vec![gx.into_dyn()]
        }
        Op::Conv2d { stride, pad } => {
            let xv = parent(0).view().into_dimensionality::<Ix4>().unwrap();
            let wv = parent(1).view().into_dimensionality::<Ix4>().unwrap();
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let (n, cin, h, wd) = xv.dim();
            let (cout, _, kh, kw) = wv.dim();
            let geom = ConvGeom { cin, h, w: wd, kh, kw, stride: *stride, pad: *pad };
            let (oh, ow) = (geom.out_h(), geom.out_w());
            let w2d = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();
            let mut gx = Array4::<f64>::zeros((n, cin, h, wd));
            let mut gw2d = Array2::<f64>::zeros((cout, cin * kh * kw));
            for i in 0..n {
                let cols = im2col(xv.index_axis(Axis(0), i), geom);
                let g2d = gv
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((cout, oh * ow))
                    .unwrap();
                gw2d = gw2d + g2d.dot(&cols.t());
                let gcols = w2d.t().dot(&g2d);
                gx.index_axis_mut(Axis(0), i).assign(&col2im(gcols.view(), geom));
            }
            let gw = gw2d.into_shape_with_order((cout, cin, kh, kw)).unwrap();
            vec![gx.into_dyn(), gw.into_dyn()]
        }
        Op::ConvT2d { stride, pad } => {
            let xv = parent(0).view().into_dimensionality::<Ix4>().unwrap();
            let wv = parent(1).view().into_dimensionality::<Ix4>().unwrap();
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let (n, cin, h, wd) = xv.dim();
            let (_, cout, kh, kw) = wv.dim();
            let (_, _, oh, ow) = gv.dim();
            let geom = ConvGeom { cin: cout, h: oh, w: ow, kh, kw, stride: *stride, pad: *pad };
            let w2d = wv.into_shape_with_order((cin, cout * kh * kw)).unwrap();
            let mut gx = Array4::<f64>::zeros((n, cin, h, wd));
            let mut gw2d = Array2::<f64>::zeros((cin, cout * kh * kw));
            for i in 0..n {
                let gcols = im2col(gv.index_axis(Axis(0), i), geom);
                let gx2d = w2d.dot(&gcols);
                gx.index_axis_mut(Axis(0), i)
                    .assign(&gx2d.into_shape_with_order((cin, h, wd)).unwrap());
                let x2d = xv
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((cin, h * wd))
                    .unwrap();
                gw2d = gw2d + x2d.dot(&gcols.t());
            }
            let gw = gw2d.into_shape_with_order((cin, cout, kh, kw)).unwrap();
            vec![gx.into_dyn(), gw.into_dyn()]
        }
        Op::GlobalAvgPool => {
            let xv = parent(0).view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = xv.dim();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            let inv = 1.0 / (h * w) as f64;
            for i in 0..n {
                for ch in 0..c {
                    gx.slice_mut(s![i, ch, .., ..]).fill(g2[[i, ch]] * inv);
                }
            }
            vec![gx.into_dyn()]
        }
        Op::GlobalMaxPool { argmax } => {
            let xv = parent(0).view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = xv.dim();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                for ch in 0..c {
                    let k = argmax[i * c + ch];
                    gx[[i, ch, k / w, k % w]] = g2[[i, ch]];
                }
            }
            vec![gx.into_dyn()]
        }
        Op::ChannelMean => {
            let xv = parent(0).view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = xv.dim();
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            let inv = 1.0 / c as f64;
            for i in 0..n {
                for ch in 0..c {
                    for ii in 0..h {
                        for jj in 0..w {
                            gx[[i, ch, ii, jj]] = g4[[i, 0, ii, jj]] * inv;
                        }
                    }
                }
            }
            vec![gx.into_dyn()]
        }
        Op::ChannelMax { argmax } => {
            let xv = parent(0).view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = xv.dim();
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            for i in 0..n {
                for ii in 0..h {
                    for jj in 0..w {
                        let ch = argmax[(i * h + ii) * w + jj];
                        gx[[i, ch, ii, jj]] = g4[[i, 0, ii, jj]];
                    }
                }
            }
            vec![gx.into_dyn()]
        }
        Op::ConcatChannels { split } => {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let ga = g4.slice(s![.., ..*split, .., ..]).to_owned().into_dyn();
            let gb = g4.slice(s![.., *split.., .., ..]).to_owned().into_dyn();
            vec![ga, gb]
        }
        Op::Reshape => {
            let target = parent(0).raw_dim();
            vec![g.clone().into_shape_with_order(target).unwrap()]
        }
        Op::MeanFilter3x3 => vec![mean_filter3x3_array(g)],
    })
}
