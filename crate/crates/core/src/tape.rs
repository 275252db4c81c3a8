//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! Every differentiable operation appends one node to the [`Tape`] holding its
//! output values and an op record pointing at its inputs. [`Tape::backward`]
//! replays the records in exact reverse execution order, propagating into
//! per-call scratch buffers that are then *added* into each node's persistent
//! gradient, so running backward twice doubles every gradient exactly and
//! nothing ever overwrites an accumulated gradient.
//!
//! The op set is intentionally small: temporal convolutions, pooling, a few
//! pointwise maps, broadcasting combines, softmax variants, top-k column
//! means and the reductions needed to express the whole training objective.
//! Each op's backward is verified against central finite differences in the
//! unit tests below.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise maps supported by [`Tape::apply_pointwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pointwise {
    Sigmoid,
    Relu,
    Abs,
    /// Natural log; inputs must be strictly positive.
    Ln,
    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `mul * x + add`.
    Affine {
        mul: f64,
        add: f64,
    },
}

/// Binary combines supported by [`Tape::combine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// Elementwise sum of equal shapes.
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    /// `out[t,d] = a[t,d] * b[d]` for rank-2 `a` and rank-1 `b` of length D.
    BroadcastMulRowVec,
    /// `out[t,d] = a[t,d] * b[t]` for rank-2 `a` and rank-1 `b` of length T.
    BroadcastMulColVec,
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Reshape {
        input: usize,
    },
    TemporalConv {
        input: usize,
        weights: usize,
        bias: usize,
        kernel: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Pointwise {
        input: usize,
        f: Pointwise,
    },
    Dropout {
        input: usize,
        scale: f64,
        mask: Vec<bool>,
    },
    Combine {
        a: usize,
        b: usize,
        op: Combine,
    },
    ConcatCols {
        a: usize,
        b: usize,
    },
    Column {
        input: usize,
        col: usize,
    },
    SoftmaxVec {
        input: usize,
    },
    LogSoftmaxVec {
        input: usize,
    },
    SoftmaxRows {
        input: usize,
    },
    TopkMeanCols {
        input: usize,
        k: usize,
        /// Row indices of the selected entries, k per column, column-major.
        picked: Vec<usize>,
    },
    WeightedRowSum {
        x: usize,
        w: usize,
    },
    MeanAll {
        input: usize,
    },
    SumAll {
        input: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
    CosineDistance {
        a: usize,
        b: usize,
        degenerate: bool,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite output");
        let n = values.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a data leaf. `needs_grad` data leaves participate in backward
    /// (used by the finite-difference tests); plain inputs should pass false.
    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let values = t.values().to_vec();
        self.push(shape, values, needs_grad, Op::Leaf)
    }

    /// Constant, never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a parameter's current value as a gradient-carrying leaf and
    /// remembers the link for [`Tape::grads_into_params`].
    pub fn bind(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.leaf(params.get(id).value().clone(), true);
        self.bindings.push((id, v.0));
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Copies a node out as a [`Tensor`].
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.values(v).to_vec())
            .expect("tape nodes hold valid tensors")
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                detail: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn rank1(&self, v: Var, op: &'static str) -> Result<usize> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::Shape {
                op,
                detail: format!("expected rank-1 tensor, got shape {s:?}"),
            });
        }
        Ok(s[0])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- ops -------------------------------------------------------------

    /// 1-D convolution along the temporal axis with symmetric zero padding so
    /// the output keeps length T. `input` is T x Din, `weights` K x Din x
    /// Dout, `bias` Dout; K must be odd.
    pub fn temporal_conv(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (t, din) = self.rank2(input, "temporal_conv")?;
        let ws = self.shape(weights);
        if ws.len() != 3 {
            return Err(Error::Shape {
                op: "temporal_conv",
                detail: format!("weights must be rank 3 (K x Din x Dout), got {ws:?}"),
            });
        }
        let (k, wd_in, dout) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal_conv kernel must be odd, got {k}"
            )));
        }
        if wd_in != din {
            return Err(Error::Shape {
                op: "temporal_conv",
                detail: format!("axis 1 of weights is {wd_in}, input channels are {din}"),
            });
        }
        let bn = self.rank1(bias, "temporal_conv")?;
        if bn != dout {
            return Err(Error::Shape {
                op: "temporal_conv",
                detail: format!("bias length {bn} != output channels {dout}"),
            });
        }

        let off = (k - 1) / 2;
        let xv = &self.nodes[input.0].values;
        let wv = &self.nodes[weights.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0; t * dout];
        for row in 0..t {
            let o = &mut out[row * dout..(row + 1) * dout];
            o.copy_from_slice(bv);
            for kk in 0..k {
                let src = row as isize + kk as isize - off as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xv[src as usize * din..(src as usize + 1) * din];
                for (d, &x) in xrow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let wrow = &wv[(kk * din + d) * dout..(kk * din + d + 1) * dout];
                    for (oo, &w) in wrow.iter().enumerate() {
                        o[oo] += x * w;
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            vec![t, dout],
            out,
            needs,
            Op::TemporalConv {
                input: input.0,
                weights: weights.0,
                bias: bias.0,
                kernel: k,
            },
        ))
    }

    /// Mean over the temporal axis: T x D -> D.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (t, d) = self.rank2(input, "global_avg_pool")?;
        if t == 0 {
            return Err(Error::EmptySequence("global_avg_pool"));
        }
        let xv = &self.nodes[input.0].values;
        let mut out = vec![0.0; d];
        for row in 0..t {
            for c in 0..d {
                out[c] += xv[row * d + c];
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        let needs = self.needs(input);
        Ok(self.push(vec![d], out, needs, Op::GlobalAvgPool { input: input.0 }))
    }

    /// Elementwise map. See [`Pointwise`] for the supported functions;
    /// dropout has its own entry point because it draws randomness.
    pub fn apply_pointwise(&mut self, input: Var, f: Pointwise) -> Result<Var> {
        let xv = &self.nodes[input.0].values;
        let out: Vec<f64> = match f {
            Pointwise::Sigmoid => xv.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
            Pointwise::Relu => xv.iter().map(|&x| x.max(0.0)).collect(),
            Pointwise::Abs => xv.iter().map(|&x| x.abs()).collect(),
            Pointwise::Ln => {
                if let Some(i) = xv.iter().position(|&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: "ln",
                        detail: format!("non-positive input {} at flat index {i}", xv[i]),
                    });
                }
                xv.iter().map(|&x| x.ln()).collect()
            }
            Pointwise::Clamp { lo, hi } => xv.iter().map(|&x| x.clamp(lo, hi)).collect(),
            Pointwise::Affine { mul, add } => xv.iter().map(|&x| mul * x + add).collect(),
        };
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        Ok(self.push(shape, out, needs, Op::Pointwise { input: input.0, f }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.apply_pointwise(x, Pointwise::Sigmoid)
            .expect("infallible")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.apply_pointwise(x, Pointwise::Relu)
            .expect("infallible")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.apply_pointwise(x, Pointwise::Abs).expect("infallible")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.apply_pointwise(x, Pointwise::Ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.apply_pointwise(x, Pointwise::Clamp { lo, hi })
            .expect("infallible")
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        self.apply_pointwise(x, Pointwise::Affine { mul, add })
            .expect("infallible")
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode
    /// the input passes through untouched.
    pub fn dropout(&mut self, input: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - p);
        let xv = &self.nodes[input.0].values;
        let mask: Vec<bool> = (0..xv.len()).map(|_| !rng.chance(p)).collect();
        let out: Vec<f64> = xv
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * scale } else { 0.0 })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        Ok(self.push(
            shape,
            out,
            needs,
            Op::Dropout {
                input: input.0,
                scale,
                mask,
            },
        ))
    }

    /// Elementwise / broadcasting binary combine.
    pub fn combine(&mut self, a: Var, b: Var, op: Combine) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match op {
            Combine::Add | Combine::Mul => {
                if sa != sb {
                    return Err(Error::Shape {
                        op: "combine",
                        detail: format!("operand shapes {sa:?} and {sb:?} differ"),
                    });
                }
            }
            Combine::BroadcastMulRowVec => {
                let (_, d) = self.rank2(a, "combine")?;
                let n = self.rank1(b, "combine")?;
                if n != d {
                    return Err(Error::Shape {
                        op: "combine",
                        detail: format!("row vector length {n} != channel axis {d}"),
                    });
                }
            }
            Combine::BroadcastMulColVec => {
                let (t, _) = self.rank2(a, "combine")?;
                let n = self.rank1(b, "combine")?;
                if n != t {
                    return Err(Error::Shape {
                        op: "combine",
                        detail: format!("column vector length {n} != temporal axis {t}"),
                    });
                }
            }
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let out: Vec<f64> = match op {
            Combine::Add => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Combine::Mul => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
            Combine::BroadcastMulRowVec => {
                let d = bv.len();
                av.iter().enumerate().map(|(i, &x)| x * bv[i % d]).collect()
            }
            Combine::BroadcastMulColVec => {
                let d = sa[1];
                av.iter().enumerate().map(|(i, &x)| x * bv[i / d]).collect()
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, needs, Op::Combine { a: a.0, b: b.0, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, Combine::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, Combine::Mul)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// Concatenates two rank-2 tensors along the channel axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, da) = self.rank2(a, "concat_cols")?;
        let (tb, db) = self.rank2(b, "concat_cols")?;
        if ta != tb {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("temporal axes differ: {ta} vs {tb}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(ta * (da + db));
        for row in 0..ta {
            out.extend_from_slice(&av[row * da..(row + 1) * da]);
            out.extend_from_slice(&bv[row * db..(row + 1) * db]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![ta, da + db],
            out,
            needs,
            Op::ConcatCols { a: a.0, b: b.0 },
        ))
    }

    /// Extracts column `col` of a rank-2 tensor as a rank-1 vector.
    pub fn column(&mut self, input: Var, col: usize) -> Result<Var> {
        let (t, d) = self.rank2(input, "column")?;
        if col >= d {
            return Err(Error::Shape {
                op: "column",
                detail: format!("column {col} out of range for {d} channels"),
            });
        }
        let xv = &self.nodes[input.0].values;
        let out: Vec<f64> = (0..t).map(|row| xv[row * d + col]).collect();
        let needs = self.needs(input);
        Ok(self.push(
            vec![t],
            out,
            needs,
            Op::Column {
                input: input.0,
                col,
            },
        ))
    }

    fn softmax_slice(xs: &[f64], out: &mut [f64]) {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = (x - m).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// Softmax of a rank-1 vector.
    pub fn softmax_vec(&mut self, input: Var) -> Result<Var> {
        let n = self.rank1(input, "softmax_vec")?;
        let mut out = vec![0.0; n];
        Self::softmax_slice(&self.nodes[input.0].values, &mut out);
        let needs = self.needs(input);
        Ok(self.push(vec![n], out, needs, Op::SoftmaxVec { input: input.0 }))
    }

    /// Numerically stable log-softmax of a rank-1 vector.
    pub fn log_softmax_vec(&mut self, input: Var) -> Result<Var> {
        let n = self.rank1(input, "log_softmax_vec")?;
        let xv = &self.nodes[input.0].values;
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xv.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let out: Vec<f64> = xv.iter().map(|&x| x - lse).collect();
        let needs = self.needs(input);
        Ok(self.push(vec![n], out, needs, Op::LogSoftmaxVec { input: input.0 }))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let (t, d) = self.rank2(input, "softmax_rows")?;
        let xv = &self.nodes[input.0].values;
        let mut out = vec![0.0; t * d];
        for row in 0..t {
            let (xs, os) = (
                &xv[row * d..(row + 1) * d],
                &mut out[row * d..(row + 1) * d],
            );
            Self::softmax_slice(xs, os);
        }
        let needs = self.needs(input);
        Ok(self.push(vec![t, d], out, needs, Op::SoftmaxRows { input: input.0 }))
    }

    /// Per-column mean of the k largest entries: T x C -> C. Ties are broken
    /// toward earlier rows so the selection is deterministic.
    pub fn topk_mean_cols(&mut self, input: Var, k: usize) -> Result<Var> {
        let (t, c) = self.rank2(input, "topk_mean_cols")?;
        if k == 0 || k > t {
            return Err(Error::Config(format!("top-k k={k} out of range for T={t}")));
        }
        let xv = &self.nodes[input.0].values;
        let mut out = vec![0.0; c];
        let mut picked = Vec::with_capacity(k * c);
        let mut order: Vec<usize> = Vec::with_capacity(t);
        for col in 0..c {
            order.clear();
            order.extend(0..t);
            order.sort_by(|&i, &j| {
                let (a, b) = (xv[i * c + col], xv[j * c + col]);
                b.partial_cmp(&a).unwrap().then(i.cmp(&j))
            });
            let mut sum = 0.0;
            for &row in order.iter().take(k) {
                sum += xv[row * c + col];
                picked.push(row);
            }
            out[col] = sum / k as f64;
        }
        let needs = self.needs(input);
        Ok(self.push(
            vec![c],
            out,
            needs,
            Op::TopkMeanCols {
                input: input.0,
                k,
                picked,
            },
        ))
    }

    /// Weighted sum of rows: `out[f] = sum_t w[t] * x[t,f]`.
    pub fn weighted_row_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, f) = self.rank2(x, "weighted_row_sum")?;
        let n = self.rank1(w, "weighted_row_sum")?;
        if n != t {
            return Err(Error::Shape {
                op: "weighted_row_sum",
                detail: format!("weight length {n} != temporal axis {t}"),
            });
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut out = vec![0.0; f];
        for row in 0..t {
            let xrow = &xv[row * f..(row + 1) * f];
            let wt = wv[row];
            for (o, &xx) in out.iter_mut().zip(xrow) {
                *o += wt * xx;
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(vec![f], out, needs, Op::WeightedRowSum { x: x.0, w: w.0 }))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, input: Var) -> Var {
        let xv = &self.nodes[input.0].values;
        let mean = xv.iter().sum::<f64>() / xv.len() as f64;
        let needs = self.needs(input);
        self.push(vec![], vec![mean], needs, Op::MeanAll { input: input.0 })
    }

    /// Sum over all elements, producing a scalar.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let sum = self.nodes[input.0].values.iter().sum();
        let needs = self.needs(input);
        self.push(vec![], vec![sum], needs, Op::SumAll { input: input.0 })
    }

    /// Dot product of two rank-1 vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.rank1(a, "dot")?;
        let nb = self.rank1(b, "dot")?;
        if na != nb {
            return Err(Error::Shape {
                op: "dot",
                detail: format!("lengths differ: {na} vs {nb}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let v = av.iter().zip(bv).map(|(&x, &y)| x * y).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![], vec![v], needs, Op::Dot { a: a.0, b: b.0 }))
    }

    /// Cosine distance `0.5 * (1 - cos_sim(a, b))` of two rank-1 vectors.
    /// A zero-norm operand makes the pair degenerate: the similarity is taken
    /// as 0 (distance 0.5), no gradient flows, and the flag is returned.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<(Var, bool)> {
        let na = self.rank1(a, "cosine_distance")?;
        let nb = self.rank1(b, "cosine_distance")?;
        if na != nb {
            return Err(Error::Shape {
                op: "cosine_distance",
                detail: format!("lengths differ: {na} vs {nb}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let nu = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let degenerate = nu < 1e-12 || nv < 1e-12;
        let value = if degenerate {
            0.5
        } else {
            let c: f64 = av.iter().zip(bv).map(|(&x, &y)| x * y).sum();
            0.5 * (1.0 - c / (nu * nv))
        };
        let needs = !degenerate && (self.needs(a) || self.needs(b));
        let v = self.push(
            vec![],
            vec![value],
            needs,
            Op::CosineDistance {
                a: a.0,
                b: b.0,
                degenerate,
            },
        );
        Ok((v, degenerate))
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_grad(&mut self, input: Var) -> Var {
        let shape = self.nodes[input.0].shape.clone();
        let values = self.nodes[input.0].values.clone();
        self.push(shape, values, false, Op::StopGrad)
    }

    /// Reinterprets the values under a new shape with the same element count.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input.0].values.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.nodes[input.0].shape),
            });
        }
        let values = self.nodes[input.0].values.clone();
        let needs = self.needs(input);
        Ok(self.push(shape, values, needs, Op::Reshape { input: input.0 }))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse pass from a scalar root. Per-call scratch gradients are
    /// propagated in exact reverse execution order and then added into the
    /// persistent node gradients, so repeated calls accumulate exactly.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].values.len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                detail: format!(
                    "root must be scalar, got shape {:?}",
                    self.nodes[root.0].shape
                ),
            });
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.values.len()])
            .collect();
        let mut touched = vec![false; n];
        scratch[root.0][0] = 1.0;
        touched[root.0] = true;

        for i in (0..=root.0).rev() {
            if !touched[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = scratch.split_at_mut(i);
            let gout: &[f64] = &hi[0];
            let nodes = &self.nodes;
            let needs = |j: usize| nodes[j].needs_grad;
            match &self.nodes[i].op {
                Op::Leaf | Op::StopGrad => {}
                Op::Reshape { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        for (g, &u) in lo[*input].iter_mut().zip(gout) {
                            *g += u;
                        }
                    }
                }
                Op::TemporalConv {
                    input,
                    weights,
                    bias,
                    kernel,
                } => {
                    let (input, weights, bias, k) = (*input, *weights, *bias, *kernel);
                    let t = nodes[input].shape[0];
                    let din = nodes[input].shape[1];
                    let dout = nodes[i].shape[1];
                    let off = (k - 1) / 2;
                    if needs(bias) {
                        touched[bias] = true;
                        let gb = &mut lo[bias];
                        for row in 0..t {
                            for o in 0..dout {
                                gb[o] += gout[row * dout + o];
                            }
                        }
                    }
                    if needs(weights) {
                        touched[weights] = true;
                        let gw = &mut lo[weights];
                        let xv = &nodes[input].values;
                        for row in 0..t {
                            let urow = &gout[row * dout..(row + 1) * dout];
                            for kk in 0..k {
                                let src = row as isize + kk as isize - off as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let xrow = &xv[src as usize * din..(src as usize + 1) * din];
                                for (d, &x) in xrow.iter().enumerate() {
                                    if x == 0.0 {
                                        continue;
                                    }
                                    let base = (kk * din + d) * dout;
                                    for (o, &u) in urow.iter().enumerate() {
                                        gw[base + o] += x * u;
                                    }
                                }
                            }
                        }
                    }
                    if needs(input) {
                        touched[input] = true;
                        let gx = &mut lo[input];
                        let wv = &nodes[weights].values;
                        for row in 0..t {
                            let urow = &gout[row * dout..(row + 1) * dout];
                            for kk in 0..k {
                                let src = row as isize + kk as isize - off as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let grow = &mut gx[src as usize * din..(src as usize + 1) * din];
                                for (d, g) in grow.iter_mut().enumerate() {
                                    let wrow =
                                        &wv[(kk * din + d) * dout..(kk * din + d + 1) * dout];
                                    let mut acc = 0.0;
                                    for (o, &u) in urow.iter().enumerate() {
                                        acc += wrow[o] * u;
                                    }
                                    *g += acc;
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let t = nodes[*input].shape[0];
                        let d = nodes[*input].shape[1];
                        let gx = &mut lo[*input];
                        let inv = 1.0 / t as f64;
                        for row in 0..t {
                            for c in 0..d {
                                gx[row * d + c] += gout[c] * inv;
                            }
                        }
                    }
                }
                Op::Pointwise { input, f } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let xv = &nodes[*input].values;
                        let yv = &nodes[i].values;
                        let gx = &mut lo[*input];
                        match f {
                            Pointwise::Sigmoid => {
                                for ((g, &y), &u) in gx.iter_mut().zip(yv).zip(gout) {
                                    *g += u * y * (1.0 - y);
                                }
                            }
                            Pointwise::Relu => {
                                for ((g, &x), &u) in gx.iter_mut().zip(xv).zip(gout) {
                                    if x > 0.0 {
                                        *g += u;
                                    }
                                }
                            }
                            Pointwise::Abs => {
                                for ((g, &x), &u) in gx.iter_mut().zip(xv).zip(gout) {
                                    *g += u * if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    };
                                }
                            }
                            Pointwise::Ln => {
                                for ((g, &x), &u) in gx.iter_mut().zip(xv).zip(gout) {
                                    *g += u / x;
                                }
                            }
                            Pointwise::Clamp { lo: l, hi: h } => {
                                for ((g, &x), &u) in gx.iter_mut().zip(xv).zip(gout) {
                                    if x > *l && x < *h {
                                        *g += u;
                                    }
                                }
                            }
                            Pointwise::Affine { mul, .. } => {
                                for (g, &u) in gx.iter_mut().zip(gout) {
                                    *g += u * mul;
                                }
                            }
                        }
                    }
                }
                Op::Dropout { input, scale, mask } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let gx = &mut lo[*input];
                        for ((g, &keep), &u) in gx.iter_mut().zip(mask).zip(gout) {
                            if keep {
                                *g += u * scale;
                            }
                        }
                    }
                }
                Op::Combine { a, b, op } => {
                    let (a, b, op) = (*a, *b, *op);
                    match op {
                        Combine::Add => {
                            if needs(a) {
                                touched[a] = true;
                                for (g, &u) in lo[a].iter_mut().zip(gout) {
                                    *g += u;
                                }
                            }
                            if needs(b) {
                                touched[b] = true;
                                for (g, &u) in lo[b].iter_mut().zip(gout) {
                                    *g += u;
                                }
                            }
                        }
                        Combine::Mul => {
                            if needs(a) {
                                touched[a] = true;
                                let bv = &nodes[b].values;
                                for ((g, &y), &u) in lo[a].iter_mut().zip(bv).zip(gout) {
                                    *g += u * y;
                                }
                            }
                            if needs(b) {
                                touched[b] = true;
                                let av = &nodes[a].values;
                                for ((g, &x), &u) in lo[b].iter_mut().zip(av).zip(gout) {
                                    *g += u * x;
                                }
                            }
                        }
                        Combine::BroadcastMulRowVec => {
                            let d = nodes[b].values.len();
                            if needs(a) {
                                touched[a] = true;
                                let bv = &nodes[b].values;
                                for (j, (g, &u)) in lo[a].iter_mut().zip(gout).enumerate() {
                                    *g += u * bv[j % d];
                                }
                            }
                            if needs(b) {
                                touched[b] = true;
                                let av = &nodes[a].values;
                                let gb = &mut lo[b];
                                for (j, (&x, &u)) in av.iter().zip(gout).enumerate() {
                                    gb[j % d] += u * x;
                                }
                            }
                        }
                        Combine::BroadcastMulColVec => {
                            let d = nodes[a].shape[1];
                            if needs(a) {
                                touched[a] = true;
                                let bv = &nodes[b].values;
                                for (j, (g, &u)) in lo[a].iter_mut().zip(gout).enumerate() {
                                    *g += u * bv[j / d];
                                }
                            }
                            if needs(b) {
                                touched[b] = true;
                                let av = &nodes[a].values;
                                let gb = &mut lo[b];
                                for (j, (&x, &u)) in av.iter().zip(gout).enumerate() {
                                    gb[j / d] += u * x;
                                }
                            }
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let t = nodes[a].shape[0];
                    let da = nodes[a].shape[1];
                    let db = nodes[b].shape[1];
                    if needs(a) {
                        touched[a] = true;
                        let ga = &mut lo[a];
                        for row in 0..t {
                            for c in 0..da {
                                ga[row * da + c] += gout[row * (da + db) + c];
                            }
                        }
                    }
                    if needs(b) {
                        touched[b] = true;
                        let gb = &mut lo[b];
                        for row in 0..t {
                            for c in 0..db {
                                gb[row * db + c] += gout[row * (da + db) + da + c];
                            }
                        }
                    }
                }
                Op::Column { input, col } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let d = nodes[*input].shape[1];
                        let gx = &mut lo[*input];
                        for (row, &u) in gout.iter().enumerate() {
                            gx[row * d + col] += u;
                        }
                    }
                }
                Op::SoftmaxVec { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let yv = &nodes[i].values;
                        let dot: f64 = yv.iter().zip(gout).map(|(&y, &u)| y * u).sum();
                        for ((g, &y), &u) in lo[*input].iter_mut().zip(yv).zip(gout) {
                            *g += y * (u - dot);
                        }
                    }
                }
                Op::LogSoftmaxVec { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let yv = &nodes[i].values;
                        let usum: f64 = gout.iter().sum();
                        for ((g, &y), &u) in lo[*input].iter_mut().zip(yv).zip(gout) {
                            *g += u - y.exp() * usum;
                        }
                    }
                }
                Op::SoftmaxRows { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let t = nodes[i].shape[0];
                        let d = nodes[i].shape[1];
                        let yv = &nodes[i].values;
                        let gx = &mut lo[*input];
                        for row in 0..t {
                            let ys = &yv[row * d..(row + 1) * d];
                            let us = &gout[row * d..(row + 1) * d];
                            let dot: f64 = ys.iter().zip(us).map(|(&y, &u)| y * u).sum();
                            let gs = &mut gx[row * d..(row + 1) * d];
                            for ((g, &y), &u) in gs.iter_mut().zip(ys).zip(us) {
                                *g += y * (u - dot);
                            }
                        }
                    }
                }
                Op::TopkMeanCols { input, k, picked } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let c = nodes[i].values.len();
                        let gx = &mut lo[*input];
                        let inv = 1.0 / *k as f64;
                        for col in 0..c {
                            let u = gout[col] * inv;
                            for &row in &picked[col * k..(col + 1) * k] {
                                gx[row * c + col] += u;
                            }
                        }
                    }
                }
                Op::WeightedRowSum { x, w } => {
                    let (x, w) = (*x, *w);
                    let t = nodes[x].shape[0];
                    let f = nodes[x].shape[1];
                    if needs(x) {
                        touched[x] = true;
                        let wv = &nodes[w].values;
                        let gx = &mut lo[x];
                        for row in 0..t {
                            let wt = wv[row];
                            let grow = &mut gx[row * f..(row + 1) * f];
                            for (g, &u) in grow.iter_mut().zip(gout) {
                                *g += wt * u;
                            }
                        }
                    }
                    if needs(w) {
                        touched[w] = true;
                        let xv = &nodes[x].values;
                        let gw = &mut lo[w];
                        for row in 0..t {
                            let xrow = &xv[row * f..(row + 1) * f];
                            let mut acc = 0.0;
                            for (&xx, &u) in xrow.iter().zip(gout) {
                                acc += xx * u;
                            }
                            gw[row] += acc;
                        }
                    }
                }
                Op::MeanAll { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        let inv = gout[0] / nodes[*input].values.len() as f64;
                        for g in lo[*input].iter_mut() {
                            *g += inv;
                        }
                    }
                }
                Op::SumAll { input } => {
                    if needs(*input) {
                        touched[*input] = true;
                        for g in lo[*input].iter_mut() {
                            *g += gout[0];
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let (a, b) = (*a, *b);
                    let u = gout[0];
                    if needs(a) {
                        touched[a] = true;
                        let bv = &nodes[b].values;
                        for (g, &y) in lo[a].iter_mut().zip(bv) {
                            *g += u * y;
                        }
                    }
                    if needs(b) {
                        touched[b] = true;
                        let av = &nodes[a].values;
                        for (g, &x) in lo[b].iter_mut().zip(av) {
                            *g += u * x;
                        }
                    }
                }
                Op::CosineDistance { a, b, degenerate } => {
                    if *degenerate {
                        continue;
                    }
                    let (a, b) = (*a, *b);
                    let u = gout[0];
                    let av = &nodes[a].values;
                    let bv = &nodes[b].values;
                    let nu = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let c: f64 = av.iter().zip(bv).map(|(&x, &y)| x * y).sum();
                    // d = 0.5 (1 - c/(nu nv))
                    if needs(a) {
                        touched[a] = true;
                        for (j, g) in lo[a].iter_mut().enumerate() {
                            let ds = bv[j] / (nu * nv) - c * av[j] / (nu * nu * nu * nv);
                            *g += u * (-0.5) * ds;
                        }
                    }
                    if needs(b) {
                        touched[b] = true;
                        for (j, g) in lo[b].iter_mut().enumerate() {
                            let ds = av[j] / (nu * nv) - c * bv[j] / (nv * nv * nv * nu);
                            *g += u * (-0.5) * ds;
                        }
                    }
                }
            }
        }

        for (node, (s, &t)) in self.nodes.iter_mut().zip(scratch.iter().zip(&touched)) {
            if t {
                for (g, &d) in node.grad.iter_mut().zip(s) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter leaf into the owning
    /// [`ParamSet`]'s gradient buffers.
    pub fn grads_into_params(&self, params: &mut ParamSet) {
        for &(id, node) in &self.bindings {
            let grad = &self.nodes[node].grad;
            let pg = params.get_mut(id).grad_mut();
            for (g, &d) in pg.iter_mut().zip(grad) {
                *g += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    /// Central finite differences on every element of every gradient leaf of
    /// `f`, compared to the tape gradient. `f` builds a scalar loss from the
    /// given leaf tensors (bound with needs_grad=true).
    #[allow(clippy::needless_range_loop)]
    fn check_grads(leaves: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, h: f64, tol: f64) {
        let eval = |tensors: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let root = f(&mut tape, &vars);
            tape.scalar_value(root)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = f(&mut tape, &vars);
        tape.backward(root).unwrap();

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = tape.grad(vars[li]).to_vec();
            for ei in 0..leaf.numel() {
                let mut plus = leaves.to_vec();
                plus[li].values_mut()[ei] += h;
                let mut minus = leaves.to_vec();
                minus[li].values_mut()[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let g = analytic[ei];
                let denom = fd.abs().max(g.abs());
                let rel = if denom > 1e-8 {
                    (fd - g).abs() / denom
                } else {
                    0.0
                };
                assert!(
                    rel <= tol,
                    "leaf {li} elem {ei}: fd={fd} tape={g} rel={rel}"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.range(-1.5, 1.5)).collect();
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        // K=1 identity weights, zero bias.
        let w = tape.leaf(
            Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let b = tape.leaf(t1(&[0.0, 0.0]), false);
        let y = tape.temporal_conv(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_hand_case_with_zero_padding() {
        // T=3, D=1, K=3, weights [1,1,1], input [1,2,3] -> [3,6,5].
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 1, &[1.0, 2.0, 3.0]), false);
        let w = tape.leaf(
            Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap(),
            false,
        );
        let b = tape.leaf(t1(&[0.0]), false);
        let y = tape.temporal_conv(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_k1_equals_matrix_product() {
        let mut rng = Rng::seed(5);
        let x = rand_tensor(&mut rng, vec![7, 4]);
        let w = rand_tensor(&mut rng, vec![1, 4, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = tape.leaf(b.clone(), false);
        let y = tape.temporal_conv(xv, wv, bv).unwrap();
        for t in 0..7 {
            for o in 0..3 {
                let mut want = b.values()[o];
                for d in 0..4 {
                    want += x.values()[t * 4 + d] * w.values()[d * 3 + o];
                }
                let got = tape.values(y)[t * 3 + o];
                assert!((want - got).abs() <= 1e-12, "t={t} o={o}");
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 2, &[0.0; 6]), false);
        let w_even = tape.leaf(Tensor::zeros(vec![2, 2, 2]), false);
        let b = tape.leaf(t1(&[0.0, 0.0]), false);
        assert!(matches!(
            tape.temporal_conv(x, w_even, b),
            Err(Error::Config(_))
        ));
        let w_bad = tape.leaf(Tensor::zeros(vec![3, 5, 2]), false);
        assert!(matches!(
            tape.temporal_conv(x, w_bad, b),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::seed(17);
        let x = rand_tensor(&mut rng, vec![5, 3]);
        let w = rand_tensor(&mut rng, vec![3, 3, 2]);
        let b = rand_tensor(&mut rng, vec![2]);
        check_grads(
            &[x, w, b],
            |tape, vars| {
                let y = tape.temporal_conv(vars[0], vars[1], vars[2]).unwrap();
                tape.sum_all(y)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn pool_constant_rows_and_hand_case() {
        let mut tape = Tape::new();
        let c = tape.leaf(
            t2(4, 2, &[3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0]),
            false,
        );
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.values(y), &[3.0, -1.0]);

        let x = tape.leaf(t2(2, 2, &[0.0, 2.0, 4.0, 6.0]), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.values(y), &[2.0, 4.0]);
    }

    #[test]
    fn pool_backward_distributes_uniformly() {
        let mut rng = Rng::seed(23);
        let x = rand_tensor(&mut rng, vec![6, 3]);
        check_grads(
            &[x],
            |tape, vars| {
                let y = tape.global_avg_pool(vars[0]).unwrap();
                // weight the output so the gradient is not uniform over D
                let w = tape.constant(t1(&[1.0, -2.0, 0.5]));
                let p = tape.mul(y, w).unwrap();
                tape.sum_all(p)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn pointwise_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0]), false);
        let s = tape.sigmoid(x);
        assert_eq!(tape.values(s), &[0.5]);

        let x = tape.leaf(t1(&[-1.0, 2.0]), false);
        let r = tape.relu(x);
        assert_eq!(tape.values(r), &[0.0, 2.0]);
    }

    #[test]
    fn pointwise_gradients_match_finite_differences() {
        let mut rng = Rng::seed(37);
        // keep inputs away from relu/abs kinks
        let mk = |rng: &mut Rng| {
            let v: Vec<f64> = (0..12)
                .map(|_| {
                    let x = rng.range(0.05, 1.5);
                    if rng.chance(0.5) {
                        x
                    } else {
                        -x
                    }
                })
                .collect();
            Tensor::new(vec![4, 3], v).unwrap()
        };
        for f in [
            Pointwise::Sigmoid,
            Pointwise::Relu,
            Pointwise::Abs,
            Pointwise::Affine {
                mul: -1.7,
                add: 0.3,
            },
        ] {
            let x = mk(&mut rng);
            check_grads(
                &[x],
                move |tape, vars| {
                    let y = tape.apply_pointwise(vars[0], f).unwrap();
                    let sq = tape.mul(y, y).unwrap();
                    tape.sum_all(sq)
                },
                1e-4,
                1e-6,
            );
        }
        // ln on positive inputs
        let v: Vec<f64> = (0..6).map(|_| rng.range(0.2, 2.0)).collect();
        let x = Tensor::new(vec![6], v).unwrap();
        check_grads(
            &[x],
            |tape, vars| {
                let y = tape.ln(vars[0]).unwrap();
                tape.sum_all(y)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed(1);
        let x = tape.leaf(t1(&[1.0, 2.0, 3.0]), false);
        for p in [0.0, 0.3, 0.7, 0.99] {
            let y = tape.dropout(x, p, false, &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn dropout_train_mean_preserved() {
        // mean over 1e4 seeded trials of dropout(x) within 2% of x
        let p = 0.7;
        let trials = 10_000;
        let mut rng = Rng::seed(99);
        let x = 1.3_f64;
        let mut sum = 0.0;
        for _ in 0..trials {
            let mut tape = Tape::new();
            let v = tape.leaf(t1(&[x]), false);
            let y = tape.dropout(v, p, true, &mut rng).unwrap();
            sum += tape.values(y)[0];
        }
        let mean = sum / trials as f64;
        assert!((mean - x).abs() / x.abs() < 0.02, "mean {mean} vs x {x}");
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed(1);
        let x = tape.leaf(t1(&[1.0]), false);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_gradient_uses_recorded_mask() {
        let mut rng = Rng::seed(7);
        let x = rand_tensor(&mut rng, vec![30]);
        // evaluate with an identically seeded rng each time so the mask is a
        // fixed linear map and finite differences are valid
        let eval_seed = 1234u64;
        check_grads(
            &[x],
            move |tape, vars| {
                let mut drop_rng = Rng::seed(eval_seed);
                let y = tape.dropout(vars[0], 0.5, true, &mut drop_rng).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn combine_identity_and_broadcast() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let ones = tape.leaf(t2(2, 2, &[1.0; 4]), false);
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.values(y), tape.values(x));

        let g = tape.leaf(t1(&[10.0, 100.0]), false);
        let y = tape.combine(x, g, Combine::BroadcastMulRowVec).unwrap();
        assert_eq!(tape.values(y), &[10.0, 200.0, 30.0, 400.0]);

        let c = tape.leaf(t1(&[2.0, -1.0]), false);
        let y = tape.combine(x, c, Combine::BroadcastMulColVec).unwrap();
        assert_eq!(tape.values(y), &[2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn combine_rejects_incompatible_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 2, &[0.0; 4]), false);
        let y = tape.leaf(t2(2, 3, &[0.0; 6]), false);
        assert!(matches!(tape.add(x, y), Err(Error::Shape { .. })));
        let v = tape.leaf(t1(&[0.0; 3]), false);
        assert!(tape.combine(x, v, Combine::BroadcastMulRowVec).is_err());
    }

    #[test]
    fn combine_gradients_match_finite_differences() {
        let mut rng = Rng::seed(41);
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let b = rand_tensor(&mut rng, vec![4, 3]);
        for op in [Combine::Add, Combine::Mul] {
            check_grads(
                &[a.clone(), b.clone()],
                move |tape, vars| {
                    let y = tape.combine(vars[0], vars[1], op).unwrap();
                    let sq = tape.mul(y, y).unwrap();
                    tape.sum_all(sq)
                },
                1e-4,
                1e-6,
            );
        }
        let row = rand_tensor(&mut rng, vec![3]);
        check_grads(
            &[a.clone(), row],
            |tape, vars| {
                let y = tape
                    .combine(vars[0], vars[1], Combine::BroadcastMulRowVec)
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            1e-4,
            1e-6,
        );
        let col = rand_tensor(&mut rng, vec![4]);
        check_grads(
            &[a, col],
            |tape, vars| {
                let y = tape
                    .combine(vars[0], vars[1], Combine::BroadcastMulColVec)
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn softmax_and_reductions_match_finite_differences() {
        let mut rng = Rng::seed(53);
        let v = rand_tensor(&mut rng, vec![6]);
        check_grads(
            std::slice::from_ref(&v),
            |tape, vars| {
                let y = tape.softmax_vec(vars[0]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            1e-4,
            1e-6,
        );
        check_grads(
            std::slice::from_ref(&v),
            |tape, vars| {
                let y = tape.log_softmax_vec(vars[0]).unwrap();
                let w = tape.constant(t1(&[0.1, 0.5, -0.2, 0.9, 0.0, -1.0]));
                let p = tape.mul(y, w).unwrap();
                tape.sum_all(p)
            },
            1e-4,
            1e-6,
        );
        let m = rand_tensor(&mut rng, vec![3, 4]);
        check_grads(
            &[m],
            |tape, vars| {
                let y = tape.softmax_rows(vars[0]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn topk_mean_cols_selects_and_backprops() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(4, 2, &[4.0, 0.0, 3.0, 0.0, 2.0, 0.0, 1.0, 0.0]), true);
        let v = tape.topk_mean_cols(x, 2).unwrap();
        assert_eq!(tape.values(v), &[3.5, 0.0]);
        let s = tape.sum_all(v);
        tape.backward(s).unwrap();
        // top-2 of column 0 are rows 0 and 1; ties in column 1 resolve to
        // the earliest rows.
        assert_eq!(tape.grad(x), &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_gradient_matches_finite_differences_away_from_ties() {
        // values spaced so no tie is within the FD step
        let x = Tensor::new(
            vec![5, 2],
            vec![0.9, -0.4, 0.1, 0.8, -0.7, 0.2, 0.5, -0.9, 0.3, 0.6],
        )
        .unwrap();
        check_grads(
            &[x],
            |tape, vars| {
                let v = tape.topk_mean_cols(vars[0], 2).unwrap();
                let sq = tape.mul(v, v).unwrap();
                tape.sum_all(sq)
            },
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn weighted_row_sum_dot_cosine_match_finite_differences() {
        let mut rng = Rng::seed(61);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let w = rand_tensor(&mut rng, vec![4]);
        check_grads(
            &[x, w],
            |tape, vars| {
                let y = tape.weighted_row_sum(vars[0], vars[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            1e-4,
            1e-6,
        );
        let a = rand_tensor(&mut rng, vec![5]);
        let b = rand_tensor(&mut rng, vec![5]);
        check_grads(
            &[a.clone(), b.clone()],
            |tape, vars| tape.dot(vars[0], vars[1]).unwrap(),
            1e-4,
            1e-6,
        );
        check_grads(
            &[a, b],
            |tape, vars| tape.cosine_distance(vars[0], vars[1]).unwrap().0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn cosine_distance_flags_zero_norm_as_degenerate() {
        let mut tape = Tape::new();
        let z = tape.leaf(t1(&[0.0, 0.0]), true);
        let b = tape.leaf(t1(&[1.0, 2.0]), true);
        let (d, degenerate) = tape.cosine_distance(z, b).unwrap();
        assert!(degenerate);
        assert_eq!(tape.scalar_value(d), 0.5);
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(b), &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_linear_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0, 3.0]), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_leaves_disconnected_nodes_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        let y = tape.leaf(t1(&[5.0]), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(y), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_twice_doubles_grads_exactly() {
        let mut rng = Rng::seed(71);
        let a = rand_tensor(&mut rng, vec![3, 3]);
        let b = rand_tensor(&mut rng, vec![3, 3]);
        let mut tape = Tape::new();
        let va = tape.leaf(a, true);
        let vb = tape.leaf(b, true);
        let m = tape.mul(va, vb).unwrap();
        let sm = tape.softmax_rows(m).unwrap();
        let s = tape.mean_all(sm);
        tape.backward(s).unwrap();
        let g1: Vec<f64> = tape.grad(va).to_vec();
        tape.backward(s).unwrap();
        let g2: Vec<f64> = tape.grad(va).to_vec();
        for (x1, x2) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * x1, *x2);
        }
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[2.0, 3.0]), true);
        let frozen = tape.stop_grad(x);
        let y = tape.mul(x, frozen).unwrap(); // y = x * sg(x)
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        // only the live operand contributes: ds/dx = sg(x) = x
        assert_eq!(tape.grad(x), &[2.0, 3.0]);
    }

    #[test]
    fn grads_flow_into_params() {
        let mut params = ParamSet::new();
        let id = params.add("w", t1(&[1.0, -2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.bind(&params, id);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        tape.grads_into_params(&mut params);
        assert_eq!(params.get(id).grad(), &[2.0, -4.0]);
    }
}
