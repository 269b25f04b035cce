//! Define-by-run reverse-mode autodiff over dense row-major matrices.
//!
//! Values are computed eagerly as nodes are appended, so a tape is also just
//! a forward evaluator: inference paths build the same graph with
//! `requires_grad = false` leaves and never call [`Tape::backward`]. That
//! keeps evaluation and differentiation on one code path by construction.
//!
//! Shapes are 2-D `[rows, cols]`. Image tensors are `[H*W, channels]` rows in
//! raster order; CNN activations are `[batch, channels*h*w]` with the NCHW
//! layout carried by the op that produced them.

use std::sync::Arc;

use super::linalg;
use super::ops_nn::{self, ConvDims, NchwDims, NormMode};
use super::ops_render::{self, GatherPlan, TriPlan};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Tape-node id (matches the ids reported in numeric-failure errors).
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activation fused into a `linear` layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Logistic,
}

pub(crate) enum Op<F: Real> {
    Source,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// y = k*a + c elementwise; only the slope matters in reverse.
    Affine {
        a: usize,
        k: F,
    },
    Relu(usize),
    Logistic(usize),
    Exp(usize),
    Softplus(usize),
    Clamp01(usize),
    Sum(usize),
    Mean(usize),
    /// mean((a-b)^2) over all elements.
    MseLoss(usize, usize),
    /// Mean binary cross-entropy from logits; targets are 0/1 constants.
    BceLogitsMean {
        logits: usize,
        targets: usize,
    },
    Matmul(usize, usize),
    /// Fused y = act(concat(a, b?) · w + bias?). The activation gradient is
    /// recovered from the stored output, so no pre-activation buffer or
    /// concatenated-input copy is ever materialized. This is the workhorse of
    /// the per-sample decoder, where separate matmul/bias/activation nodes
    /// would each allocate a buffer the size of the whole sample batch.
    Linear {
        a: usize,
        b: Option<usize>,
        w: usize,
        bias: Option<usize>,
        act: Act,
    },
    /// Same values viewed with a different shape (no copy).
    Reshape(usize),
    /// y[i,:] = a[i,:] + bias[0,:]
    BiasRow {
        a: usize,
        bias: usize,
    },
    ConcatCols(usize, usize),
    SliceCols {
        a: usize,
        from: usize,
        to: usize,
    },
    /// y[i,j] = a[i,j] * col[i,0]
    MulCol {
        a: usize,
        col: usize,
    },
    GatherRows {
        a: usize,
        rows: Arc<Vec<u32>>,
    },
    /// Rows reduced in contiguous groups of `group`.
    SumGroups {
        a: usize,
        group: usize,
    },
    /// Exclusive prefix sum within contiguous groups of `group` (cols = 1).
    CumsumExclGroups {
        a: usize,
        group: usize,
    },
    SumMany(Vec<usize>),
    /// y.flat[i] = a.flat[plan[i]]
    Permute {
        a: usize,
        plan: Arc<Vec<u32>>,
    },
    /// Sparse row mixing: warps, blurs, crops, patch extraction.
    WeightedGatherRows {
        a: usize,
        plan: Arc<GatherPlan<F>>,
    },
    /// y[s,:] = sum_k w[s][k] * grid[idx[s][k], :]
    TrilinearGather {
        grid: usize,
        plan: Arc<TriPlan<F>>,
    },
    Conv2d {
        x: usize,
        w: usize,
        dims: ConvDims,
    },
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: NchwDims,
        mode: NormMode<F>,
        /// Batch mean/var saved by the forward pass (train mode).
        saved: Option<Arc<(Vec<F>, Vec<F>)>>,
    },
    AvgPoolGlobal {
        x: usize,
        dims: NchwDims,
    },
    /// JPEG round-trip with straight-through rounding. The linearized map is
    /// exactly the identity (orthonormal DCT, inverse color matrix), so the
    /// backward pass is a pass-through and the plan is not retained.
    JpegSte {
        img: usize,
    },
}

pub(crate) struct Node<F: Real> {
    pub op: Op<F>,
    pub shape: Shape,
    pub values: Arc<Vec<F>>,
    pub requires_grad: bool,
}

pub struct Tape<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
}

/// Gradients of a scalar root with respect to every `requires_grad` node.
#[derive(Debug)]
pub struct Grads<F: Real> {
    g: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient slice for `v`, or `None` if it never received an adjoint
    /// (constant, or unreachable from the root).
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.g[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.g[v.0].take()
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Shape, values: Vec<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.len(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values: Arc::new(values),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    pub fn values(&self, v: Var) -> &[F] {
        &self.nodes[v.0].values
    }

    pub fn value_arc(&self, v: Var) -> Arc<Vec<F>> {
        Arc::clone(&self.nodes[v.0].values)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> F {
        assert_eq!(self.shape(v).len(), 1, "scalar_value on non-scalar node");
        self.values(v)[0]
    }

    // ----- sources -----

    pub fn param(&mut self, values: Arc<Vec<F>>, rows: usize, cols: usize) -> Var {
        let shape = Shape { rows, cols };
        assert_eq!(shape.len(), values.len(), "param shape mismatch");
        self.nodes.push(Node {
            op: Op::Source,
            shape,
            values,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, values: Arc<Vec<F>>, rows: usize, cols: usize) -> Var {
        let shape = Shape { rows, cols };
        assert_eq!(shape.len(), values.len(), "constant shape mismatch");
        self.nodes.push(Node {
            op: Op::Source,
            shape,
            values,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_owned(&mut self, values: Vec<F>, rows: usize, cols: usize) -> Var {
        self.constant(Arc::new(values), rows, cols)
    }

    pub fn scalar_const(&mut self, v: F) -> Var {
        self.constant_owned(vec![v], 1, 1)
    }

    // ----- elementwise -----

    fn map1(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let av = &self.nodes[a.0];
        let values: Vec<F> = av.values.iter().map(|&x| f(x)).collect();
        let shape = av.shape;
        let rg = av.requires_grad;
        self.push(op, shape, values, rg)
    }

    fn zip2(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise shape mismatch");
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(op, sa, values, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip2(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn affine(&mut self, a: Var, k: F, c: F) -> Var {
        self.map1(a, Op::Affine { a: a.0, k }, |x| k * x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map1(a, Op::Relu(a.0), |x| x.max(F::ZERO))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.map1(a, Op::Logistic(a.0), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map1(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        // ln(1 + e^x) = max(x, 0) + ln1p(e^{-|x|}) is stable at both tails.
        self.map1(a, Op::Softplus(a.0), |x| {
            x.max(F::ZERO) + (-x.abs()).exp().ln_1p()
        })
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.map1(a, Op::Clamp01(a.0), |x| x.clamp(F::ZERO, F::ONE))
    }

    // ----- reductions and losses -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.values(a).iter().copied().sum();
        let rg = self.needs(a.0);
        self.push(Op::Sum(a.0), Shape { rows: 1, cols: 1 }, vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).len();
        let s: F = self.values(a).iter().copied().sum();
        let rg = self.needs(a.0);
        self.push(
            Op::Mean(a.0),
            Shape { rows: 1, cols: 1 },
            vec![s / F::from_usize(n)],
            rg,
        )
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let n = F::from_usize(self.shape(a).len());
        let s: F = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(
            Op::MseLoss(a.0, b.0),
            Shape { rows: 1, cols: 1 },
            vec![s / n],
            rg,
        )
    }

    /// Mean of `max(z,0) - z*t + ln(1 + e^{-|z|})` with logits clamped to
    /// +/-30; the clamp only stabilizes the value, the gradient keeps the
    /// (saturated) sigmoid slope so pinned logits are not frozen dead.
    pub fn bce_logits_mean(&mut self, logits: Var, targets: Var) -> Var {
        assert_eq!(self.shape(logits), self.shape(targets), "bce shape mismatch");
        let cap = F::from_f64(30.0);
        let s: F = self
            .values(logits)
            .iter()
            .zip(self.values(targets).iter())
            .map(|(&z, &t)| {
                let z = z.clamp(-cap, cap);
                z.max(F::ZERO) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let n = F::from_usize(self.shape(logits).len());
        let rg = self.needs(logits.0);
        self.push(
            Op::BceLogitsMean {
                logits: logits.0,
                targets: targets.0,
            },
            Shape { rows: 1, cols: 1 },
            vec![s / n],
            rg,
        )
    }

    // ----- linear / structural -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul inner dim mismatch");
        let mut values = vec![F::ZERO; sa.rows * sb.cols];
        linalg::matmul_acc(
            self.values(a),
            self.values(b),
            sa.rows,
            sa.cols,
            sb.cols,
            &mut values,
        );
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(
            Op::Matmul(a.0, b.0),
            Shape {
                rows: sa.rows,
                cols: sb.cols,
            },
            values,
            rg,
        )
    }

    /// Fused linear layer: `act(a·w + bias)`.
    pub fn linear(&mut self, a: Var, w: Var, bias: Option<Var>, act: Act) -> Var {
        self.linear_fused(a, None, w, bias, act)
    }

    /// Fused linear layer over the logical column-concatenation of two
    /// inputs: `act([a | b]·w + bias)` without building the concatenation.
    pub fn linear2(&mut self, a: Var, b: Var, w: Var, bias: Option<Var>, act: Act) -> Var {
        self.linear_fused(a, Some(b), w, bias, act)
    }

    fn linear_fused(&mut self, a: Var, b: Option<Var>, w: Var, bias: Option<Var>, act: Act) -> Var {
        let sa = self.shape(a);
        let sw = self.shape(w);
        let (n, ca) = (sa.rows, sa.cols);
        let cb = b
            .map(|v| {
                let sb = self.shape(v);
                assert_eq!(sb.rows, n, "linear second-input row mismatch");
                sb.cols
            })
            .unwrap_or(0);
        assert_eq!(sw.rows, ca + cb, "linear weight rows mismatch");
        let oc = sw.cols;
        if let Some(bv) = bias {
            let s = self.shape(bv);
            assert!(s.rows == 1 && s.cols == oc, "bias must be [1, out]");
        }
        {
            // Distinct adjoint buffers are assumed in the backward pass.
            let mut ids = vec![a.0, w.0];
            ids.extend(b.map(|v| v.0));
            ids.extend(bias.map(|v| v.0));
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(
                ids.len(),
                2 + b.is_some() as usize + bias.is_some() as usize,
                "linear inputs must be distinct nodes"
            );
        }
        let av = self.value_arc(a);
        let bvv = b.map(|v| self.value_arc(v));
        let wv = self.value_arc(w);
        let biasv = bias.map(|v| self.value_arc(v));
        let mut values = vec![F::ZERO; n * oc];
        for i in 0..n {
            let orow = &mut values[i * oc..(i + 1) * oc];
            if let Some(bs) = &biasv {
                orow.copy_from_slice(&bs[..oc]);
            }
            for (k, &x) in av[i * ca..(i + 1) * ca].iter().enumerate() {
                if x != F::ZERO {
                    linalg::axpy(x, &wv[k * oc..(k + 1) * oc], orow);
                }
            }
            if let Some(bvals) = &bvv {
                for (k, &x) in bvals[i * cb..(i + 1) * cb].iter().enumerate() {
                    if x != F::ZERO {
                        linalg::axpy(x, &wv[(ca + k) * oc..(ca + k + 1) * oc], orow);
                    }
                }
            }
            match act {
                Act::None => {}
                Act::Relu => {
                    for v in orow.iter_mut() {
                        if *v < F::ZERO {
                            *v = F::ZERO;
                        }
                    }
                }
                Act::Logistic => {
                    for v in orow.iter_mut() {
                        *v = sigmoid(*v);
                    }
                }
            }
        }
        let rg = self.needs(a.0)
            || b.map(|v| self.needs(v.0)).unwrap_or(false)
            || self.needs(w.0)
            || bias.map(|v| self.needs(v.0)).unwrap_or(false);
        self.push(
            Op::Linear {
                a: a.0,
                b: b.map(|v| v.0),
                w: w.0,
                bias: bias.map(|v| v.0),
                act,
            },
            Shape { rows: n, cols: oc },
            values,
            rg,
        )
    }

    /// Reinterpret the same values with a new shape (shares the buffer).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), rows * cols, "reshape must preserve element count");
        let values = self.value_arc(a);
        let rg = self.needs(a.0);
        self.nodes.push(Node {
            op: Op::Reshape(a.0),
            shape: Shape { rows, cols },
            values,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn bias_row(&mut self, a: Var, bias: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        assert_eq!(sb.rows, 1, "bias must be [1, n]");
        assert_eq!(sa.cols, sb.cols, "bias width mismatch");
        let bv = self.value_arc(bias);
        let mut values = Vec::with_capacity(sa.len());
        for row in self.values(a).chunks_exact(sa.cols) {
            values.extend(row.iter().zip(bv.iter()).map(|(&x, &b)| x + b));
        }
        let rg = self.needs(a.0) || self.needs(bias.0);
        self.push(
            Op::BiasRow {
                a: a.0,
                bias: bias.0,
            },
            sa,
            values,
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.rows, sb.rows, "concat row mismatch");
        let cols = sa.cols + sb.cols;
        let mut values = Vec::with_capacity(sa.rows * cols);
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        for i in 0..sa.rows {
            values.extend_from_slice(&av[i * sa.cols..(i + 1) * sa.cols]);
            values.extend_from_slice(&bv[i * sb.cols..(i + 1) * sb.cols]);
        }
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(
            Op::ConcatCols(a.0, b.0),
            Shape {
                rows: sa.rows,
                cols,
            },
            values,
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let sa = self.shape(a);
        assert!(from < to && to <= sa.cols, "slice out of range");
        let cols = to - from;
        let mut values = Vec::with_capacity(sa.rows * cols);
        for row in self.values(a).chunks_exact(sa.cols) {
            values.extend_from_slice(&row[from..to]);
        }
        let rg = self.needs(a.0);
        self.push(
            Op::SliceCols { a: a.0, from, to },
            Shape {
                rows: sa.rows,
                cols,
            },
            values,
            rg,
        )
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (sa, sc) = (self.shape(a), self.shape(col));
        assert_eq!(sc.cols, 1, "col must be [n, 1]");
        assert_eq!(sa.rows, sc.rows, "mul_col row mismatch");
        let cv = self.value_arc(col);
        let mut values = Vec::with_capacity(sa.len());
        for (i, row) in self.values(a).chunks_exact(sa.cols).enumerate() {
            let c = cv[i];
            values.extend(row.iter().map(|&x| x * c));
        }
        let rg = self.needs(a.0) || self.needs(col.0);
        self.push(
            Op::MulCol {
                a: a.0,
                col: col.0,
            },
            sa,
            values,
            rg,
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<u32>>) -> Var {
        let sa = self.shape(a);
        let mut values = Vec::with_capacity(rows.len() * sa.cols);
        let av = self.values(a);
        for &r in rows.iter() {
            let r = r as usize;
            assert!(r < sa.rows, "gather row out of range");
            values.extend_from_slice(&av[r * sa.cols..(r + 1) * sa.cols]);
        }
        let rg = self.needs(a.0);
        let shape = Shape {
            rows: rows.len(),
            cols: sa.cols,
        };
        self.push(Op::GatherRows { a: a.0, rows }, shape, values, rg)
    }

    pub fn sum_groups(&mut self, a: Var, group: usize) -> Var {
        let sa = self.shape(a);
        assert!(group > 0 && sa.rows % group == 0, "group must divide rows");
        let out_rows = sa.rows / group;
        let mut values = vec![F::ZERO; out_rows * sa.cols];
        let av = self.values(a);
        for (i, row) in av.chunks_exact(sa.cols).enumerate() {
            let o = i / group;
            let orow = &mut values[o * sa.cols..(o + 1) * sa.cols];
            for (ov, &x) in orow.iter_mut().zip(row) {
                *ov += x;
            }
        }
        let rg = self.needs(a.0);
        self.push(
            Op::SumGroups { a: a.0, group },
            Shape {
                rows: out_rows,
                cols: sa.cols,
            },
            values,
            rg,
        )
    }

    pub fn cumsum_excl_groups(&mut self, a: Var, group: usize) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.cols, 1, "cumsum expects a column");
        assert!(group > 0 && sa.rows % group == 0, "group must divide rows");
        let av = self.values(a);
        let mut values = vec![F::ZERO; sa.rows];
        for g in 0..sa.rows / group {
            let base = g * group;
            let mut acc = F::ZERO;
            for i in 0..group {
                values[base + i] = acc;
                acc += av[base + i];
            }
        }
        let rg = self.needs(a.0);
        self.push(Op::CumsumExclGroups { a: a.0, group }, sa, values, rg)
    }

    pub fn sum_many(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "sum_many needs inputs");
        let shape = self.shape(inputs[0]);
        let mut values = self.values(inputs[0]).to_vec();
        let mut rg = self.needs(inputs[0].0);
        for v in &inputs[1..] {
            assert_eq!(self.shape(*v), shape, "sum_many shape mismatch");
            for (o, &x) in values.iter_mut().zip(self.values(*v)) {
                *o += x;
            }
            rg |= self.needs(v.0);
        }
        self.push(
            Op::SumMany(inputs.iter().map(|v| v.0).collect()),
            shape,
            values,
            rg,
        )
    }

    pub fn permute(&mut self, a: Var, plan: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(plan.len(), rows * cols, "permute plan length mismatch");
        let av = self.values(a);
        let values: Vec<F> = plan.iter().map(|&i| av[i as usize]).collect();
        let rg = self.needs(a.0);
        self.push(
            Op::Permute { a: a.0, plan },
            Shape { rows, cols },
            values,
            rg,
        )
    }

    pub fn weighted_gather_rows(&mut self, a: Var, plan: Arc<GatherPlan<F>>) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.rows, plan.in_rows, "gather plan built for other input");
        let values = ops_render::weighted_gather_forward(self.values(a), sa.cols, &plan);
        let rg = self.needs(a.0);
        let shape = Shape {
            rows: plan.out_rows(),
            cols: sa.cols,
        };
        self.push(
            Op::WeightedGatherRows { a: a.0, plan },
            shape,
            values,
            rg,
        )
    }

    pub fn trilinear_gather(&mut self, grid: Var, plan: Arc<TriPlan<F>>) -> Var {
        let sg = self.shape(grid);
        let values = ops_render::trilinear_forward(self.values(grid), sg.cols, &plan);
        let rg = self.needs(grid.0);
        let shape = Shape {
            rows: plan.idx.len(),
            cols: sg.cols,
        };
        self.push(
            Op::TrilinearGather {
                grid: grid.0,
                plan,
            },
            shape,
            values,
            rg,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, dims: ConvDims) -> Var {
        let sx = self.shape(x);
        let sw = self.shape(w);
        assert_eq!(sx.rows, dims.n, "conv batch mismatch");
        assert_eq!(sx.cols, dims.c_in * dims.h * dims.w, "conv input mismatch");
        assert_eq!(
            (sw.rows, sw.cols),
            (dims.c_out, dims.c_in * dims.kh * dims.kw),
            "conv weight mismatch"
        );
        let values = ops_nn::conv2d_forward(self.values(x), self.values(w), &dims);
        let (oh, ow) = dims.out_hw();
        let rg = self.needs(x.0) || self.needs(w.0);
        self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                dims,
            },
            Shape {
                rows: dims.n,
                cols: dims.c_out * oh * ow,
            },
            values,
            rg,
        )
    }

    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        dims: NchwDims,
        mode: NormMode<F>,
    ) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.rows, dims.n, "norm batch mismatch");
        assert_eq!(sx.cols, dims.c * dims.h * dims.w, "norm input mismatch");
        assert_eq!(self.shape(gamma).len(), dims.c, "gamma length mismatch");
        assert_eq!(self.shape(beta).len(), dims.c, "beta length mismatch");
        let (values, saved) = ops_nn::channel_norm_forward(
            self.values(x),
            self.values(gamma),
            self.values(beta),
            &dims,
            &mode,
        );
        let rg = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            Op::ChannelNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                dims,
                mode,
                saved,
            },
            sx,
            values,
            rg,
        )
    }

    /// Batch mean/variance computed by a train-mode [`Self::channel_norm`]
    /// node; used by the trainer to maintain running statistics.
    pub fn norm_batch_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[v.0].op {
            Op::ChannelNorm { saved: Some(s), .. } => Some((&s.0, &s.1)),
            _ => None,
        }
    }

    pub fn avg_pool_global(&mut self, x: Var, dims: NchwDims) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.rows, dims.n, "pool batch mismatch");
        assert_eq!(sx.cols, dims.c * dims.h * dims.w, "pool input mismatch");
        let hw = F::from_usize(dims.h * dims.w);
        let mut values = Vec::with_capacity(dims.n * dims.c);
        for row in self.values(x).chunks_exact(sx.cols) {
            for c in 0..dims.c {
                let plane = &row[c * dims.h * dims.w..(c + 1) * dims.h * dims.w];
                values.push(plane.iter().copied().sum::<F>() / hw);
            }
        }
        let rg = self.needs(x.0);
        self.push(
            Op::AvgPoolGlobal { x: x.0, dims },
            Shape {
                rows: dims.n,
                cols: dims.c,
            },
            values,
            rg,
        )
    }

    pub fn jpeg_ste(&mut self, img: Var, plan: Arc<ops_render::JpegPlan>) -> Var {
        let s = self.shape(img);
        assert_eq!(s.cols, 3, "jpeg expects rgb rows");
        assert_eq!(s.rows, plan.h * plan.w, "jpeg plan size mismatch");
        let values = ops_render::jpeg_forward(self.values(img), &plan);
        let rg = self.needs(img.0);
        self.push(Op::JpegSte { img: img.0 }, s, values, rg)
    }

    // ----- backward -----

    /// Reverse-mode gradients of the scalar `root` with respect to all
    /// `requires_grad` nodes. Errors if the root value or any parameter
    /// gradient comes out non-finite.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        assert_eq!(
            self.shape(root).len(),
            1,
            "backward root must be a scalar"
        );
        if !self.values(root)[0].is_finite() {
            return Err(Error::NonFinite {
                node: root.0,
                context: "loss value".into(),
            });
        }
        let mut g: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(vec![F::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                g[i] = None;
                continue;
            }
            // The adjoint of node i is complete once every later node has
            // been processed; take it so memory is released as we go.
            let Some(gout) = g[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Source) {
                g[i] = Some(gout); // keep leaf gradients for the caller
                continue;
            }
            self.backprop_node(i, &gout, &mut g);
        }

        // Leaf gradients are what optimizers consume; ensure they are finite.
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Source, Some(gi)) = (&node.op, &g[i]) {
                if !gi.iter().all(|&x| x.is_finite()) {
                    return Err(Error::NonFinite {
                        node: i,
                        context: "parameter gradient".into(),
                    });
                }
            }
        }
        Ok(Grads { g })
    }

    fn backprop_node(&self, i: usize, gout: &[F], g: &mut [Option<Vec<F>>]) {
        // Accumulation target helper: allocates the zero buffer on demand.
        macro_rules! acc {
            ($idx:expr) => {{
                let idx: usize = $idx;
                if g[idx].is_none() {
                    g[idx] = Some(vec![F::ZERO; self.nodes[idx].shape.len()]);
                }
                g[idx].as_mut().unwrap()
            }};
        }

        match &self.nodes[i].op {
            Op::Source => unreachable!("sources handled by caller"),

            Op::Add(a, b) => {
                if self.needs(*a) {
                    linalg::axpy(F::ONE, gout, acc!(*a));
                }
                if self.needs(*b) {
                    linalg::axpy(F::ONE, gout, acc!(*b));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    linalg::axpy(F::ONE, gout, acc!(*a));
                }
                if self.needs(*b) {
                    linalg::axpy(-F::ONE, gout, acc!(*b));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = Arc::clone(&self.nodes[*b].values);
                    for ((o, &gv), &x) in acc!(*a).iter_mut().zip(gout).zip(bv.iter()) {
                        *o += gv * x;
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(&self.nodes[*a].values);
                    for ((o, &gv), &x) in acc!(*b).iter_mut().zip(gout).zip(av.iter()) {
                        *o += gv * x;
                    }
                }
            }
            Op::Affine { a, k } => {
                if self.needs(*a) {
                    linalg::axpy(*k, gout, acc!(*a));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let yv = Arc::clone(&self.nodes[i].values);
                    for ((o, &gv), &y) in acc!(*a).iter_mut().zip(gout).zip(yv.iter()) {
                        if y > F::ZERO {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Logistic(a) => {
                if self.needs(*a) {
                    let yv = Arc::clone(&self.nodes[i].values);
                    for ((o, &gv), &y) in acc!(*a).iter_mut().zip(gout).zip(yv.iter()) {
                        *o += gv * y * (F::ONE - y);
                    }
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let yv = Arc::clone(&self.nodes[i].values);
                    for ((o, &gv), &y) in acc!(*a).iter_mut().zip(gout).zip(yv.iter()) {
                        *o += gv * y;
                    }
                }
            }
            Op::Softplus(a) => {
                if self.needs(*a) {
                    let xv = Arc::clone(&self.nodes[*a].values);
                    for ((o, &gv), &x) in acc!(*a).iter_mut().zip(gout).zip(xv.iter()) {
                        *o += gv * sigmoid(x);
                    }
                }
            }
            Op::Clamp01(a) => {
                if self.needs(*a) {
                    let xv = Arc::clone(&self.nodes[*a].values);
                    for ((o, &gv), &x) in acc!(*a).iter_mut().zip(gout).zip(xv.iter()) {
                        if x > F::ZERO && x < F::ONE {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let gv = gout[0];
                    for o in acc!(*a).iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = F::from_usize(self.nodes[*a].shape.len());
                    let gv = gout[0] / n;
                    for o in acc!(*a).iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::MseLoss(a, b) => {
                let n = F::from_usize(self.nodes[*a].shape.len());
                let k = gout[0] * F::from_f64(2.0) / n;
                let (av, bv) = (
                    Arc::clone(&self.nodes[*a].values),
                    Arc::clone(&self.nodes[*b].values),
                );
                if self.needs(*a) {
                    for ((o, &x), &y) in acc!(*a).iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *o += k * (x - y);
                    }
                }
                if self.needs(*b) {
                    for ((o, &x), &y) in acc!(*b).iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::BceLogitsMean { logits, targets } => {
                if self.needs(*logits) {
                    let n = F::from_usize(self.nodes[*logits].shape.len());
                    let k = gout[0] / n;
                    let cap = F::from_f64(30.0);
                    let (zv, tv) = (
                        Arc::clone(&self.nodes[*logits].values),
                        Arc::clone(&self.nodes[*targets].values),
                    );
                    for ((o, &z), &t) in acc!(*logits).iter_mut().zip(zv.iter()).zip(tv.iter()) {
                        *o += k * (sigmoid(z.clamp(-cap, cap)) - t);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[*a].shape, self.nodes[*b].shape);
                let (av, bv) = (
                    Arc::clone(&self.nodes[*a].values),
                    Arc::clone(&self.nodes[*b].values),
                );
                if self.needs(*a) {
                    // dA += G * B^T
                    linalg::matmul_bt_acc(gout, &bv, sa.rows, sb.cols, sa.cols, acc!(*a));
                }
                if self.needs(*b) {
                    // dB += A^T * G
                    linalg::matmul_at_acc(&av, gout, sa.rows, sa.cols, sb.cols, acc!(*b));
                }
            }
            Op::Linear { a, b, w, bias, act } => {
                let (a, b, w, bias, act) = (*a, *b, *w, *bias, *act);
                let Shape { rows: n, cols: oc } = self.nodes[i].shape;
                let ca = self.nodes[a].shape.cols;
                let cb = b.map(|x| self.nodes[x].shape.cols).unwrap_or(0);
                let yv = Arc::clone(&self.nodes[i].values);
                let av = Arc::clone(&self.nodes[a].values);
                let bv = b.map(|x| Arc::clone(&self.nodes[x].values));
                let wv = Arc::clone(&self.nodes[w].values);
                // Take adjoint buffers out so the row loop can write all of
                // them without re-borrowing.
                let mut take = |idx: Option<usize>| -> Option<Vec<F>> {
                    let idx = idx?;
                    if !self.needs(idx) {
                        return None;
                    }
                    Some(
                        g[idx]
                            .take()
                            .unwrap_or_else(|| vec![F::ZERO; self.nodes[idx].shape.len()]),
                    )
                };
                let mut da = take(Some(a));
                let mut db = take(b);
                let mut dw = take(Some(w));
                let mut dbias = take(bias);
                let mut scratch = vec![F::ZERO; oc];
                for row in 0..n {
                    let grow = &gout[row * oc..(row + 1) * oc];
                    if linalg::row_is_zero(grow) {
                        continue;
                    }
                    let ge: &[F] = match act {
                        Act::None => grow,
                        Act::Relu => {
                            for (s, (&gv, &y)) in scratch
                                .iter_mut()
                                .zip(grow.iter().zip(&yv[row * oc..(row + 1) * oc]))
                            {
                                *s = if y > F::ZERO { gv } else { F::ZERO };
                            }
                            &scratch
                        }
                        Act::Logistic => {
                            for (s, (&gv, &y)) in scratch
                                .iter_mut()
                                .zip(grow.iter().zip(&yv[row * oc..(row + 1) * oc]))
                            {
                                *s = gv * y * (F::ONE - y);
                            }
                            &scratch
                        }
                    };
                    if let Some(dst) = &mut da {
                        for (o, wrow) in dst[row * ca..(row + 1) * ca]
                            .iter_mut()
                            .zip(wv.chunks_exact(oc))
                        {
                            *o += linalg::dot(ge, wrow);
                        }
                    }
                    if let Some(dst) = &mut db {
                        for (k, o) in dst[row * cb..(row + 1) * cb].iter_mut().enumerate() {
                            *o += linalg::dot(ge, &wv[(ca + k) * oc..(ca + k + 1) * oc]);
                        }
                    }
                    if let Some(dst) = &mut dw {
                        for (k, &x) in av[row * ca..(row + 1) * ca].iter().enumerate() {
                            if x != F::ZERO {
                                linalg::axpy(x, ge, &mut dst[k * oc..(k + 1) * oc]);
                            }
                        }
                        if let Some(bvals) = &bv {
                            for (k, &x) in bvals[row * cb..(row + 1) * cb].iter().enumerate() {
                                if x != F::ZERO {
                                    linalg::axpy(x, ge, &mut dst[(ca + k) * oc..(ca + k + 1) * oc]);
                                }
                            }
                        }
                    }
                    if let Some(dst) = &mut dbias {
                        linalg::axpy(F::ONE, ge, dst);
                    }
                }
                g[a] = da.or_else(|| g[a].take());
                if let Some(bi) = b {
                    g[bi] = db.or_else(|| g[bi].take());
                }
                g[w] = dw.or_else(|| g[w].take());
                if let Some(bi) = bias {
                    g[bi] = dbias.or_else(|| g[bi].take());
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    linalg::axpy(F::ONE, gout, acc!(*a));
                }
            }
            Op::BiasRow { a, bias } => {
                let cols = self.nodes[i].shape.cols;
                if self.needs(*a) {
                    linalg::axpy(F::ONE, gout, acc!(*a));
                }
                if self.needs(*bias) {
                    let gb = acc!(*bias);
                    for row in gout.chunks_exact(cols) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[*a].shape.cols, self.nodes[*b].shape.cols);
                let cols = ca + cb;
                if self.needs(*a) {
                    let ga = acc!(*a);
                    for (r, row) in gout.chunks_exact(cols).enumerate() {
                        for (o, &gv) in ga[r * ca..(r + 1) * ca].iter_mut().zip(&row[..ca]) {
                            *o += gv;
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = acc!(*b);
                    for (r, row) in gout.chunks_exact(cols).enumerate() {
                        for (o, &gv) in gb[r * cb..(r + 1) * cb].iter_mut().zip(&row[ca..]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceCols { a, from, to } => {
                if self.needs(*a) {
                    let ca = self.nodes[*a].shape.cols;
                    let cols = to - from;
                    let ga = acc!(*a);
                    for (r, row) in gout.chunks_exact(cols).enumerate() {
                        for (o, &gv) in ga[r * ca + from..r * ca + to].iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MulCol { a, col } => {
                let cols = self.nodes[i].shape.cols;
                let cv = Arc::clone(&self.nodes[*col].values);
                if self.needs(*a) {
                    let ga = acc!(*a);
                    for (r, row) in gout.chunks_exact(cols).enumerate() {
                        let c = cv[r];
                        for (o, &gv) in ga[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                            *o += gv * c;
                        }
                    }
                }
                if self.needs(*col) {
                    let av = Arc::clone(&self.nodes[*a].values);
                    let gc = acc!(*col);
                    for (r, row) in gout.chunks_exact(cols).enumerate() {
                        let arow = &av[r * cols..(r + 1) * cols];
                        gc[r] += row.iter().zip(arow).map(|(&gv, &x)| gv * x).sum::<F>();
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                if self.needs(*a) {
                    let cols = self.nodes[i].shape.cols;
                    let ga = acc!(*a);
                    for (r, row) in gout.chunks_exact(cols).enumerate() {
                        let src = rows[r] as usize;
                        for (o, &gv) in ga[src * cols..(src + 1) * cols].iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SumGroups { a, group } => {
                if self.needs(*a) {
                    let cols = self.nodes[i].shape.cols;
                    let ga = acc!(*a);
                    for (r, orow) in ga.chunks_exact_mut(cols).enumerate() {
                        let src = r / group;
                        for (o, &gv) in orow.iter_mut().zip(&gout[src * cols..(src + 1) * cols]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::CumsumExclGroups { a, group } => {
                if self.needs(*a) {
                    // d/da_j sum_i g_i * y_i with y_i = sum_{j<i} a_j
                    // => ga_j += sum_{i>j within group} g_i
                    let ga = acc!(*a);
                    let rows = self.nodes[i].shape.rows;
                    for gi in 0..rows / group {
                        let base = gi * group;
                        let mut suffix = F::ZERO;
                        for j in (0..*group).rev() {
                            ga[base + j] += suffix;
                            suffix += gout[base + j];
                        }
                    }
                }
            }
            Op::SumMany(inputs) => {
                for &a in inputs {
                    if self.needs(a) {
                        linalg::axpy(F::ONE, gout, acc!(a));
                    }
                }
            }
            Op::Permute { a, plan } => {
                if self.needs(*a) {
                    let ga = acc!(*a);
                    for (&src, &gv) in plan.iter().zip(gout) {
                        ga[src as usize] += gv;
                    }
                }
            }
            Op::WeightedGatherRows { a, plan } => {
                if self.needs(*a) {
                    let cols = self.nodes[i].shape.cols;
                    ops_render::weighted_gather_backward(gout, cols, plan, acc!(*a));
                }
            }
            Op::TrilinearGather { grid, plan } => {
                if self.needs(*grid) {
                    let cols = self.nodes[i].shape.cols;
                    ops_render::trilinear_backward(gout, cols, plan, acc!(*grid));
                }
            }
            Op::Conv2d { x, w, dims } => {
                let (xv, wv) = (
                    Arc::clone(&self.nodes[*x].values),
                    Arc::clone(&self.nodes[*w].values),
                );
                if self.needs(*x) {
                    ops_nn::conv2d_backward_x(gout, &wv, dims, acc!(*x));
                }
                if self.needs(*w) {
                    ops_nn::conv2d_backward_w(gout, &xv, dims, acc!(*w));
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                dims,
                mode,
                saved,
            } => {
                let (xv, gv_) = (
                    Arc::clone(&self.nodes[*x].values),
                    Arc::clone(&self.nodes[*gamma].values),
                );
                let needs = (self.needs(*x), self.needs(*gamma), self.needs(*beta));
                // Split mutable access: compute into temporaries then merge.
                let mut gx = needs.0.then(|| vec![F::ZERO; xv.len()]);
                let mut gg = needs.1.then(|| vec![F::ZERO; dims.c]);
                let mut gb = needs.2.then(|| vec![F::ZERO; dims.c]);
                ops_nn::channel_norm_backward(
                    gout,
                    &xv,
                    &gv_,
                    dims,
                    mode,
                    saved.as_deref(),
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    linalg::axpy(F::ONE, &gx, acc!(*x));
                }
                if let Some(gg) = gg {
                    linalg::axpy(F::ONE, &gg, acc!(*gamma));
                }
                if let Some(gb) = gb {
                    linalg::axpy(F::ONE, &gb, acc!(*beta));
                }
            }
            Op::AvgPoolGlobal { x, dims } => {
                if self.needs(*x) {
                    let hw = dims.h * dims.w;
                    let k = F::ONE / F::from_usize(hw);
                    let gx = acc!(*x);
                    let cols = dims.c * hw;
                    for n in 0..dims.n {
                        for c in 0..dims.c {
                            let gv = gout[n * dims.c + c] * k;
                            let plane = &mut gx[n * cols + c * hw..n * cols + (c + 1) * hw];
                            for o in plane {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::JpegSte { img, .. } => {
                if self.needs(*img) {
                    // Straight-through rounding + orthonormal DCT + inverse
                    // color transform compose to the identity Jacobian.
                    linalg::axpy(F::ONE, gout, acc!(*img));
                }
            }
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}
