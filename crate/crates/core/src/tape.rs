//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value. [`Tape::backward`] then walks the nodes in reverse order and
//! accumulates the gradient of a scalar root with respect to every node.
//!
//! Values are `f64` matrices; scalars are `1 × 1` matrices. The operation
//! set is the one needed by the encoders, the biaffine decoder, the KL
//! terms and the samplers, plus two fused operations (an LSTM layer and an
//! externally linearized scalar) that would be wasteful to spell out node by
//! node.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    AppendOnes(Var),
    SelectRows(Var, Vec<usize>),
    BroadcastRows(Var),
    Sum(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Gather(Var, Vec<(usize, usize)>),
    RowBilinear {
        left: Var,
        right: Var,
        weight: Var,
    },
    Linearized {
        input: Var,
        grad: Mat,
    },
    Lstm(Box<LstmCache>),
}

#[derive(Debug)]
struct LstmCache {
    input: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    batch: usize,
    steps: usize,
    reverse: bool,
    // Post-activation gates (i, f, g, o) per row of the input.
    gates: Mat,
    cells: Mat,
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Takes the gradient of `v`, or zeros of the given shape if `v` did not
    /// influence the root.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `[a | 1]`
    pub fn append_ones(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut v = Mat::ones((r, c + 1));
        v.slice_mut(s![.., ..c]).assign(self.value(a));
        self.push(v, Op::AppendOnes(a))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = r
            .broadcast((n, r.ncols()))
            .expect("broadcast_rows")
            .to_owned();
        self.push(v, Op::BroadcastRows(row))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a)).mapv(f64::exp);
        self.push(v, Op::Softmax(a))
    }

    /// Sum of the selected `(row, col)` entries.
    pub fn gather_sum(&mut self, a: Var, cells: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let total: f64 = cells.iter().map(|&(r, c)| m[[r, c]]).sum();
        self.push(Mat::from_elem((1, 1), total), Op::Gather(a, cells.to_vec()))
    }

    /// Row-wise bilinear forms: `out[m][l] = left[m] · W_l · right[m]ᵀ`, where
    /// `weight` stacks the `ℓ` matrices `W_l` (each `p × q`) vertically.
    pub fn row_bilinear(&mut self, left: Var, right: Var, weight: Var) -> Var {
        let l = self.value(left);
        let r = self.value(right);
        let w = self.value(weight);
        let p = l.ncols();
        assert_eq!(w.nrows() % p, 0, "row_bilinear: weight rows not a multiple of left width");
        assert_eq!(w.ncols(), r.ncols());
        let labels = w.nrows() / p;
        let mut out = Mat::zeros((l.nrows(), labels));
        for lab in 0..labels {
            let wl = w.slice(s![lab * p..(lab + 1) * p, ..]);
            let t = l.dot(&wl);
            Zip::from(out.column_mut(lab))
                .and(t.rows())
                .and(r.rows())
                .for_each(|o, tr, rr| *o = tr.dot(&rr));
        }
        self.push(out, Op::RowBilinear { left, right, weight })
    }

    /// A scalar node whose value and gradient with respect to `input` were
    /// computed elsewhere.
    pub fn linearized(&mut self, input: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(grad.dim(), self.shape(input));
        self.push(Mat::from_elem((1, 1), value), Op::Linearized { input, grad })
    }

    /// One direction of an LSTM layer over `batch` sequences of `steps`
    /// tokens each, stacked sequence-major in `input` (`batch·steps × F`).
    /// Gate order in the weights is input, forget, cell, output. Returns the
    /// hidden states in the same row layout (`batch·steps × h`).
    pub fn lstm(
        &mut self,
        input: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        batch: usize,
        reverse: bool,
    ) -> Var {
        let x = self.value(input);
        let rows = x.nrows();
        assert!(batch > 0 && rows % batch == 0, "lstm: rows not divisible by batch");
        let steps = rows / batch;
        let wh = self.value(w_hh);
        let h = wh.nrows();
        assert_eq!(wh.ncols(), 4 * h);
        let pre_all = x.dot(self.value(w_ih)) + self.value(bias);
        let mut gates = Mat::zeros((rows, 4 * h));
        let mut cells = Mat::zeros((rows, h));
        let mut hidden = Mat::zeros((rows, h));
        let mut h_prev = Mat::zeros((batch, h));
        let mut c_prev = Mat::zeros((batch, h));
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let rec = h_prev.dot(wh);
            for b in 0..batch {
                let row = b * steps + t;
                for j in 0..h {
                    let i_g = sigmoid(pre_all[[row, j]] + rec[[b, j]]);
                    let f_g = sigmoid(pre_all[[row, h + j]] + rec[[b, h + j]]);
                    let g_g = (pre_all[[row, 2 * h + j]] + rec[[b, 2 * h + j]]).tanh();
                    let o_g = sigmoid(pre_all[[row, 3 * h + j]] + rec[[b, 3 * h + j]]);
                    let c = f_g * c_prev[[b, j]] + i_g * g_g;
                    gates[[row, j]] = i_g;
                    gates[[row, h + j]] = f_g;
                    gates[[row, 2 * h + j]] = g_g;
                    gates[[row, 3 * h + j]] = o_g;
                    cells[[row, j]] = c;
                    let hv = o_g * c.tanh();
                    hidden[[row, j]] = hv;
                    h_prev[[b, j]] = hv;
                    c_prev[[b, j]] = c;
                }
            }
        }
        let cache = LstmCache {
            input,
            w_ih,
            w_hh,
            bias,
            batch,
            steps,
            reverse,
            gates,
            cells,
        };
        self.push(hidden, Op::Lstm(Box::new(cache)))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            // Leaf gradients are the result; leave them in place.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let gb = -(&g * out) / bv;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::Tanh(a) => {
                    let ga = &g * &out.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &out.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = &g / &(out * 2.0);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * out),
                Op::Log(a) => acc(&mut grads, *a, &g / self.value(*a)),
                Op::Square(a) => acc(&mut grads, *a, &g * &(self.value(*a) * 2.0)),
                Op::SliceCols(a, start, end) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![offset..offset + r, ..]).to_owned());
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + c]).to_owned());
                        offset += c;
                    }
                }
                Op::AppendOnes(a) => {
                    let c = self.shape(*a).1;
                    acc(&mut grads, *a, g.slice(s![.., ..c]).to_owned());
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastRows(row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for (mut gr, orow) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let total = gr.sum();
                        Zip::from(&mut gr).and(&orow).for_each(|x, &lp| *x -= lp.exp() * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = g.clone();
                    for (mut gr, orow) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let dot = gr.dot(&orow);
                        Zip::from(&mut gr).and(&orow).for_each(|x, &p| *x = p * (*x - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, cells) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for &(r, c) in cells {
                        ga[[r, c]] += g[[0, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowBilinear { left, right, weight } => {
                    let l = self.value(*left);
                    let r = self.value(*right);
                    let w = self.value(*weight);
                    let p = l.ncols();
                    let labels = w.nrows() / p;
                    let mut gl = Mat::zeros(l.dim());
                    let mut gr = Mat::zeros(r.dim());
                    let mut gw = Mat::zeros(w.dim());
                    for lab in 0..labels {
                        let wl = w.slice(s![lab * p..(lab + 1) * p, ..]);
                        let col = g.column(lab);
                        let lw = l.dot(&wl);
                        let rw = r.dot(&wl.t());
                        // Rows scaled by the upstream gradient of this label.
                        let mut scaled_l = l.clone();
                        for (mut row, &c) in scaled_l.rows_mut().into_iter().zip(col.iter()) {
                            row *= c;
                        }
                        gw.slice_mut(s![lab * p..(lab + 1) * p, ..])
                            .scaled_add(1.0, &scaled_l.t().dot(r));
                        for (m, &c) in col.iter().enumerate() {
                            if c != 0.0 {
                                gl.row_mut(m).scaled_add(c, &rw.row(m));
                                gr.row_mut(m).scaled_add(c, &lw.row(m));
                            }
                        }
                    }
                    acc(&mut grads, *left, gl);
                    acc(&mut grads, *right, gr);
                    acc(&mut grads, *weight, gw);
                }
                Op::Linearized { input, grad } => {
                    acc(&mut grads, *input, grad * g[[0, 0]]);
                }
                Op::Lstm(cache) => {
                    let (gx, gih, ghh, gb) = self.lstm_backward(cache, &g);
                    acc(&mut grads, cache.input, gx);
                    acc(&mut grads, cache.w_ih, gih);
                    acc(&mut grads, cache.w_hh, ghh);
                    acc(&mut grads, cache.bias, gb);
                }
            }
        }
        Grads { grads }
    }

    fn lstm_backward(&self, cache: &LstmCache, g_hidden: &Mat) -> (Mat, Mat, Mat, Mat) {
        let x = self.value(cache.input);
        let w_ih = self.value(cache.w_ih);
        let w_hh = self.value(cache.w_hh);
        let hidden_all = {
            // Recover hidden states from gates and cells: h = o ⊙ tanh(c).
            let h = w_hh.nrows();
            let mut hs = Mat::zeros(cache.cells.dim());
            Zip::from(&mut hs)
                .and(&cache.cells)
                .and(&cache.gates.slice(s![.., 3 * h..4 * h]))
                .for_each(|hv, &c, &o| *hv = o * c.tanh());
            hs
        };
        let h = w_hh.nrows();
        let (batch, steps) = (cache.batch, cache.steps);
        let rows = batch * steps;
        let mut d_pre = Mat::zeros((rows, 4 * h));
        let mut dh_next = Mat::zeros((batch, h));
        let mut dc_next = Mat::zeros((batch, h));
        let mut g_hh = Mat::zeros(w_hh.dim());
        for k in (0..steps).rev() {
            let t = if cache.reverse { steps - 1 - k } else { k };
            let prev_t = if k == 0 {
                None
            } else if cache.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let mut d_step = Mat::zeros((batch, 4 * h));
            let mut h_prev = Mat::zeros((batch, h));
            for b in 0..batch {
                let row = b * steps + t;
                for j in 0..h {
                    let i_g = cache.gates[[row, j]];
                    let f_g = cache.gates[[row, h + j]];
                    let g_g = cache.gates[[row, 2 * h + j]];
                    let o_g = cache.gates[[row, 3 * h + j]];
                    let c = cache.cells[[row, j]];
                    let c_prev = match prev_t {
                        Some(pt) => cache.cells[[b * steps + pt, j]],
                        None => 0.0,
                    };
                    if let Some(pt) = prev_t {
                        h_prev[[b, j]] = hidden_all[[b * steps + pt, j]];
                    }
                    let tc = c.tanh();
                    let dh = g_hidden[[row, j]] + dh_next[[b, j]];
                    let d_o = dh * tc;
                    let dc = dh * o_g * (1.0 - tc * tc) + dc_next[[b, j]];
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev;
                    dc_next[[b, j]] = dc * f_g;
                    d_step[[b, j]] = d_i * i_g * (1.0 - i_g);
                    d_step[[b, h + j]] = d_f * f_g * (1.0 - f_g);
                    d_step[[b, 2 * h + j]] = d_g * (1.0 - g_g * g_g);
                    d_step[[b, 3 * h + j]] = d_o * o_g * (1.0 - o_g);
                }
            }
            g_hh += &h_prev.t().dot(&d_step);
            dh_next = d_step.dot(&w_hh.t());
            for b in 0..batch {
                d_pre.row_mut(b * steps + t).assign(&d_step.row(b));
            }
        }
        let g_x = d_pre.dot(&w_ih.t());
        let g_ih = x.t().dot(&d_pre);
        let g_b = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        (g_x, g_ih, g_hh, g_b)
    }
}


#[cfg(test)]
mod tests {
    use super::testing::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 1, 2)];
        let err = max_rel_error(&params, |t, v| {
            let xw = t.matmul(v[0], v[1]);
            let z = t.add_row(xw, v[2]);
            let a = t.tanh(z);
            let b = t.sigmoid(z);
            let c = t.mul(a, b);
            let sq = t.square(c);
            let e = t.exp(sq);
            let pos = t.offset(e, 0.5);
            let l = t.ln(pos);
            let d = t.div(l, pos);
            let s = t.sqrt(pos);
            let both = t.add(d, s);
            let scaled = t.scale(both, 0.7);
            let diff = t.sub(scaled, c);
            t.sum(diff)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 1, 3), rand_mat(&mut rng, 4, 3)];
        let err = max_rel_error(&params, |t, v| {
            let top = t.slice_rows(v[0], 0, 2);
            let left = t.slice_cols(v[0], 1, 3);
            let stacked = t.concat_rows(&[top, v[1]]);
            let wide = t.concat_cols(&[left, v[2]]);
            let ones = t.append_ones(stacked);
            let sel = t.select_rows(wide, &[3, 0, 0]);
            let bc = t.broadcast_rows(v[1], 3);
            let sel = t.slice_cols(sel, 0, 4);
            let prod = t.matmul_bt(sel, ones);
            let ls = t.log_softmax(prod);
            let sm = t.softmax(bc);
            let g = t.gather_sum(ls, &[(0, 1), (2, 2), (0, 1)]);
            let sms = t.sum(sm);
            let sq = t.square(sms);
            t.add(g, sq)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn row_bilinear_matches_explicit_loops_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let left = rand_mat(&mut rng, 3, 2);
        let right = rand_mat(&mut rng, 3, 4);
        let weight = rand_mat(&mut rng, 5 * 2, 4);
        let mut tape = Tape::new();
        let (l, r, w) = (tape.leaf(left.clone()), tape.leaf(right.clone()), tape.leaf(weight.clone()));
        let out = tape.row_bilinear(l, r, w);
        for m in 0..3 {
            for lab in 0..5 {
                let mut expect = 0.0;
                for i in 0..2 {
                    for j in 0..4 {
                        expect += left[[m, i]] * weight[[lab * 2 + i, j]] * right[[m, j]];
                    }
                }
                assert!((tape.value(out)[[m, lab]] - expect).abs() < 1e-12);
            }
        }
        let err = max_rel_error(&[left, right, weight], |t, v| {
            let o = t.row_bilinear(v[0], v[1], v[2]);
            let ls = t.log_softmax(o);
            t.gather_sum(ls, &[(0, 0), (1, 3), (2, 4)])
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn lstm_gradients_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, h, batch, steps) = (3, 2, 2, 4);
        let params = vec![
            rand_mat(&mut rng, batch * steps, f),
            rand_mat(&mut rng, f, 4 * h),
            rand_mat(&mut rng, h, 4 * h),
            rand_mat(&mut rng, 1, 4 * h),
            rand_mat(&mut rng, batch * steps, 2 * h),
        ];
        let err = max_rel_error(&params, |t, v| {
            let fwd = t.lstm(v[0], v[1], v[2], v[3], batch, false);
            let bwd = t.lstm(v[0], v[1], v[2], v[3], batch, true);
            let both = t.concat_cols(&[fwd, bwd]);
            let weighted = t.mul(both, v[4]);
            t.sum(weighted)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn lstm_reverse_equals_forward_on_reversed_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 5, 3);
        let (wi, wh, b) = (rand_mat(&mut rng, 3, 8), rand_mat(&mut rng, 2, 8), rand_mat(&mut rng, 1, 8));
        let mut tape = Tape::new();
        let rev_rows: Vec<usize> = (0..5).rev().collect();
        let xv = tape.leaf(x.clone());
        let xr = tape.leaf(x.select(Axis(0), &rev_rows));
        let (wiv, whv, bv) = (tape.leaf(wi), tape.leaf(wh), tape.leaf(b));
        let a = tape.lstm(xv, wiv, whv, bv, 1, true);
        let c = tape.lstm(xr, wiv, whv, bv, 1, false);
        let c_back = tape.value(c).select(Axis(0), &rev_rows);
        assert!((tape.value(a) - &c_back).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::ones((2, 2)));
        let b = tape.leaf(Mat::ones((2, 2)));
        let s = tape.sum(a);
        let mut g = tape.backward(s);
        assert!(g.get(b).is_none());
        assert_eq!(g.take_or_zeros(b, (2, 2)), Mat::zeros((2, 2)));
    }
}
