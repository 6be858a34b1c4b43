//! Dense layers with hand-written backward passes.
//!
//! Everything is `f64` and row-major. Forward passes return a trace that the
//! matching backward pass consumes; backward passes accumulate into the
//! `grad` slot of every parameter they touch.

use rand::Rng;

/// A parameter matrix (or vector when `cols == 1`) with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param {
            rows,
            cols,
            value: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn uniform(rows: usize, cols: usize, range: f64, rng: &mut impl Rng) -> Self {
        let mut p = Param::zeros(rows, cols);
        if range > 0.0 {
            for v in &mut p.value {
                *v = rng.gen_range(-range..=range);
            }
        }
        p
    }

    /// Glorot/Xavier uniform initialization with fan-in `cols`, fan-out `rows`.
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let range = (6.0 / (rows + cols) as f64).sqrt();
        Param::uniform(rows, cols, range, rng)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.value[r * self.cols..(r + 1) * self.cols]
    }

    pub fn grad_row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.grad[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `out += W[:, offset..offset + x.len()] · x` for a `rows × cols` matrix.
pub fn matvec_acc(w: &[f64], cols: usize, offset: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols + offset..r * cols + offset + x.len()];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dx += W[:, offset..offset + dx.len()]ᵀ · dy`.
pub fn matvec_t_acc(w: &[f64], cols: usize, offset: usize, dy: &[f64], dx: &mut [f64]) {
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols + offset..r * cols + offset + dx.len()];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += a * g;
        }
    }
}

/// `G[:, offset..offset + x.len()] += dy · xᵀ`.
pub fn outer_acc(g: &mut [f64], cols: usize, offset: usize, dy: &[f64], x: &[f64]) {
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut g[r * cols + offset..r * cols + offset + x.len()];
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi += d * xi;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Param::zeros(output, input),
            bias: Param::zeros(output, 1),
        }
    }

    pub fn xavier(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::xavier(output, input, rng),
            bias: Param::zeros(output, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.value.clone();
        matvec_acc(&self.weight.value, self.weight.cols, 0, x, &mut y);
        y
    }

    /// Accumulates parameter gradients and adds the input gradient to `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        outer_acc(&mut self.weight.grad, self.weight.cols, 0, dy, x);
        for (g, d) in self.bias.grad.iter_mut().zip(dy) {
            *g += d;
        }
        matvec_t_acc(&self.weight.value, self.weight.cols, 0, dy, dx);
    }
}

/// One direction of an LSTM layer. Gates are stacked `[input, forget,
/// candidate, output]` in the rows of a `4h × (in + h)` weight acting on
/// `[x_t; h_{t-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug, Default)]
pub struct LstmStep {
    z: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct LstmTrace {
    pub steps: Vec<LstmStep>,
}

impl LstmTrace {
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.h.clone()).collect()
    }

    pub fn last(&self) -> &[f64] {
        &self.steps.last().expect("empty sequence").h
    }
}

impl Lstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm {
            input,
            hidden,
            weight: Param::zeros(4 * hidden, input + hidden),
            bias: Param::zeros(4 * hidden, 1),
        }
    }

    pub fn xavier(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Lstm {
            input,
            hidden,
            weight: Param::xavier(4 * hidden, input + hidden, rng),
            bias: Param::zeros(4 * hidden, 1),
        }
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> LstmTrace {
        let h = self.hidden;
        let mut steps: Vec<LstmStep> = Vec::with_capacity(xs.len());
        let zero = vec![0.0; h];
        for x in xs {
            let (h_prev, c_prev) = match steps.last() {
                Some(s) => (&s.h, &s.c),
                None => (&zero, &zero),
            };
            let mut z = Vec::with_capacity(self.input + h);
            z.extend_from_slice(x);
            z.extend_from_slice(h_prev);
            let mut a = self.bias.value.clone();
            matvec_acc(&self.weight.value, self.weight.cols, 0, &z, &mut a);
            let i: Vec<f64> = a[..h].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = a[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = a[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
            let o: Vec<f64> = a[3 * h..].iter().map(|&v| sigmoid(v)).collect();
            let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let hv: Vec<f64> = (0..h).map(|j| o[j] * tanh_c[j]).collect();
            steps.push(LstmStep {
                z,
                i,
                f,
                g,
                o,
                c,
                tanh_c,
                h: hv,
            });
        }
        LstmTrace { steps }
    }

    /// Backpropagation through time. `dh[t]` is the loss gradient flowing
    /// into the output at step `t`; returns the gradient of every input.
    pub fn backward(&mut self, trace: &LstmTrace, dh: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let n = trace.steps.len();
        let mut dxs = vec![vec![0.0; self.input]; n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let zero = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        for t in (0..n).rev() {
            let s = &trace.steps[t];
            let c_prev = if t > 0 { &trace.steps[t - 1].c } else { &zero };
            for j in 0..h {
                let dhj = dh[t][j] + dh_next[j];
                let d_o = dhj * s.tanh_c[j];
                let dc = dc_next[j] + dhj * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
                let di = dc * s.g[j];
                let dg = dc * s.i[j];
                let df = dc * c_prev[j];
                dc_next[j] = dc * s.f[j];
                da[j] = di * s.i[j] * (1.0 - s.i[j]);
                da[h + j] = df * s.f[j] * (1.0 - s.f[j]);
                da[2 * h + j] = dg * (1.0 - s.g[j] * s.g[j]);
                da[3 * h + j] = d_o * s.o[j] * (1.0 - s.o[j]);
            }
            outer_acc(&mut self.weight.grad, self.weight.cols, 0, &da, &s.z);
            for (g, d) in self.bias.grad.iter_mut().zip(&da) {
                *g += d;
            }
            let mut dz = vec![0.0; self.input + h];
            matvec_t_acc(&self.weight.value, self.weight.cols, 0, &da, &mut dz);
            dxs[t].copy_from_slice(&dz[..self.input]);
            dh_next.copy_from_slice(&dz[self.input..]);
        }
        dxs
    }
}

/// Forward and backward LSTMs; output at `t` is `[h_fwd_t; h_bwd_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Clone, Debug, Default)]
pub struct BiLstmTrace {
    fwd: LstmTrace,
    bwd: LstmTrace,
}

impl BiLstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        BiLstm {
            fwd: Lstm::zeros(input, hidden),
            bwd: Lstm::zeros(input, hidden),
        }
    }

    pub fn xavier(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            fwd: Lstm::xavier(input, hidden, rng),
            bwd: Lstm::xavier(input, hidden, rng),
        }
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, BiLstmTrace) {
        let fwd = self.fwd.forward(xs);
        let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let bwd = self.bwd.forward(&reversed);
        let n = xs.len();
        let out = (0..n)
            .map(|t| {
                let mut v = fwd.steps[t].h.clone();
                v.extend_from_slice(&bwd.steps[n - 1 - t].h);
                v
            })
            .collect();
        (out, BiLstmTrace { fwd, bwd })
    }

    pub fn backward(&mut self, trace: &BiLstmTrace, dout: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.fwd.hidden;
        let n = dout.len();
        let d_fwd: Vec<Vec<f64>> = dout.iter().map(|d| d[..h].to_vec()).collect();
        let d_bwd: Vec<Vec<f64>> = dout.iter().rev().map(|d| d[h..].to_vec()).collect();
        let mut dx = self.fwd.backward(&trace.fwd, &d_fwd);
        let dx_rev = self.bwd.backward(&trace.bwd, &d_bwd);
        for t in 0..n {
            for (a, b) in dx[t].iter_mut().zip(&dx_rev[n - 1 - t]) {
                *a += b;
            }
        }
        dx
    }
}

/// Inverted dropout mask: each entry is 0 with probability `rate` and
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(x: &[f64], mask: &[f64]) -> Vec<f64> {
    x.iter().zip(mask).map(|(a, m)| a * m).collect()
}
