//! Minimal neural-network core: two-layer LSTM stacks, linear layers,
//! softmax/softplus, hand-written backpropagation through time, Adam with
//! decoupled weight decay, and a finite-difference gradient checker.
//!
//! Everything is generic over [`Scalar`] so models train in `f32` and are
//! gradient-checked in `f64`. Layer-1 inputs are split into a sparse
//! one-hot block (given as active column indices) and a dense block; the
//! one-hot part of the input projection is a row gather.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Named parameter tensors. Gradients use the same type as the model.
pub trait ParamSet<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>);

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn total_count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, mut a) in self.tensors_mut() {
            a.fill(T::zero());
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst += &s;
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_array<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize), bound: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || cst(rng.random_range(-bound..=bound)))
}

/// Dense layer `y = x W + b`, with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        Linear {
            w: uniform_array((n_in, n_out), bound, rng),
            b: Array1::from_shape_simple_fn(n_out, || cst(rng.random_range(-bound..=bound))),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.n_out()));
        y.rows_mut().into_iter().for_each(|mut r| r.assign(&self.b));
        general_mat_mul(T::one(), &x, &self.w, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn param_count(n_in: usize, n_out: usize) -> usize {
        n_in * n_out + n_out
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "w"), self.w.view().into_dyn()));
        out.push((join(prefix, "b"), self.b.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "w"), self.w.view_mut().into_dyn()));
        out.push((join(prefix, "b"), self.b.view_mut().into_dyn()));
    }
}

/// One timestep of layer-1 input for a batch: `n_active` one-hot columns
/// per row (absolute column indices) plus a dense block.
#[derive(Debug, Clone)]
pub struct StepInput<T> {
    pub active: Vec<u32>,
    pub n_active: usize,
    pub dense: Array2<T>,
}

impl<T: Scalar> StepInput<T> {
    pub fn dense_only(dense: Array2<T>) -> Self {
        StepInput {
            active: Vec::new(),
            n_active: 0,
            dense,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.dense.nrows()
    }

    /// Materializes the full feature matrix (one-hot block then dense block).
    pub fn to_dense(&self, n_onehot: usize) -> Array2<T> {
        let bs = self.batch_size();
        let mut x = Array2::zeros((bs, n_onehot + self.dense.ncols()));
        for r in 0..bs {
            for &k in &self.active[r * self.n_active..(r + 1) * self.n_active] {
                x[[r, k as usize]] = T::one();
            }
        }
        x.slice_mut(s![.., n_onehot..]).assign(&self.dense);
        x
    }
}

/// A single LSTM layer with one combined bias; gate order is i, f, g, o.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    pub w_x: Array2<T>,
    pub w_h: Array2<T>,
    pub b: Array1<T>,
    /// Leading rows of `w_x` addressed by one-hot indices.
    pub n_onehot: usize,
}

struct LayerStep<T> {
    gates: Array2<T>,
    c_prev: Array2<T>,
    h_prev: Array2<T>,
    c: Array2<T>,
    tanh_c: Array2<T>,
}

impl<T: Scalar> LstmLayer<T> {
    pub fn zeros(n_onehot: usize, n_dense: usize, hidden: usize) -> Self {
        LstmLayer {
            w_x: Array2::zeros((n_onehot + n_dense, 4 * hidden)),
            w_h: Array2::zeros((hidden, 4 * hidden)),
            b: Array1::zeros(4 * hidden),
            n_onehot,
        }
    }

    pub fn init<R: Rng + ?Sized>(n_onehot: usize, n_dense: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmLayer {
            w_x: uniform_array((n_onehot + n_dense, 4 * hidden), bound, rng),
            w_h: uniform_array((hidden, 4 * hidden), bound, rng),
            b: Array1::from_shape_simple_fn(4 * hidden, || cst(rng.random_range(-bound..=bound))),
            n_onehot,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn param_count(n_in: usize, hidden: usize) -> usize {
        4 * (hidden * n_in + hidden * hidden + hidden)
    }

    fn check_input(&self, active: &[u32], n_active: usize, dense: &ArrayView2<T>) -> Result<()> {
        let n_dense = self.w_x.nrows() - self.n_onehot;
        if dense.ncols() != n_dense {
            return Err(Error::Shape(format!(
                "layer expects {n_dense} dense inputs, got {}",
                dense.ncols()
            )));
        }
        if active.len() != n_active * dense.nrows() {
            return Err(Error::Shape("one-hot index block does not match batch size".into()));
        }
        if active.iter().any(|&k| k as usize >= self.n_onehot) {
            return Err(Error::Shape("one-hot index outside the one-hot block".into()));
        }
        Ok(())
    }

    fn step(
        &self,
        active: &[u32],
        n_active: usize,
        dense: ArrayView2<T>,
        h_prev: &Array2<T>,
        c_prev: &Array2<T>,
    ) -> LayerStep<T> {
        let bs = dense.nrows();
        let hid = self.hidden();
        let mut gates = Array2::zeros((bs, 4 * hid));
        gates.rows_mut().into_iter().for_each(|mut r| r.assign(&self.b));
        if dense.ncols() > 0 {
            let w_dense = self.w_x.slice(s![self.n_onehot.., ..]);
            general_mat_mul(T::one(), &dense, &w_dense, T::one(), &mut gates);
        }
        general_mat_mul(T::one(), h_prev, &self.w_h, T::one(), &mut gates);
        if n_active > 0 {
            for (r, mut row) in gates.rows_mut().into_iter().enumerate() {
                for &k in &active[r * n_active..(r + 1) * n_active] {
                    row += &self.w_x.row(k as usize);
                }
            }
        }
        let mut c = Array2::zeros((bs, hid));
        let mut tanh_c = Array2::zeros((bs, hid));
        for r in 0..bs {
            let mut g = gates.row_mut(r);
            let g = g.as_slice_mut().expect("contiguous gate row");
            for j in 0..hid {
                g[j] = sigmoid(g[j]);
                g[hid + j] = sigmoid(g[hid + j]);
                g[2 * hid + j] = g[2 * hid + j].tanh();
                g[3 * hid + j] = sigmoid(g[3 * hid + j]);
                let cv = g[hid + j] * c_prev[[r, j]] + g[j] * g[2 * hid + j];
                c[[r, j]] = cv;
                tanh_c[[r, j]] = cv.tanh();
            }
        }
        LayerStep {
            gates,
            c_prev: c_prev.clone(),
            h_prev: h_prev.clone(),
            c,
            tanh_c,
        }
    }

    fn output(step: &LayerStep<T>) -> Array2<T> {
        let hid = step.c.ncols();
        &step.gates.slice(s![.., 3 * hid..]) * &step.tanh_c
    }
}

impl<T: Scalar> ParamSet<T> for LstmLayer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "w_x"), self.w_x.view().into_dyn()));
        out.push((join(prefix, "w_h"), self.w_h.view().into_dyn()));
        out.push((join(prefix, "b"), self.b.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "w_x"), self.w_x.view_mut().into_dyn()));
        out.push((join(prefix, "w_h"), self.w_h.view_mut().into_dyn()));
        out.push((join(prefix, "b"), self.b.view_mut().into_dyn()));
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > cst(30.0) {
        x + (-x).exp()
    } else if x < cst(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-subtracted softmax of a vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Recurrent state of a two-layer stack for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h1: Array2<T>,
    pub c1: Array2<T>,
    pub h2: Array2<T>,
    pub c2: Array2<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        let z = Array2::zeros((batch, hidden));
        LstmState {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.h1.nrows()
    }

    /// Repeats every row `times` times consecutively (row `r` becomes rows
    /// `r*times .. (r+1)*times`).
    pub fn repeat_rows(&self, times: usize) -> Self {
        let rep = |a: &Array2<T>| {
            let idx: Vec<usize> = (0..a.nrows()).flat_map(|r| std::iter::repeat_n(r, times)).collect();
            a.select(Axis(0), &idx)
        };
        LstmState {
            h1: rep(&self.h1),
            c1: rep(&self.c1),
            h2: rep(&self.h2),
            c2: rep(&self.c2),
        }
    }
}

/// Two LSTM layers of equal width with inverted dropout between them.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack<T> {
    pub layer1: LstmLayer<T>,
    pub layer2: LstmLayer<T>,
    pub dropout: f64,
}

/// Saved activations of a training forward pass.
pub struct StackTrace<T> {
    l1: Vec<LayerStep<T>>,
    l2: Vec<LayerStep<T>>,
    masks: Vec<Option<Array2<T>>>,
    l2_inputs: Vec<Array2<T>>,
}

impl<T: Scalar> LstmStack<T> {
    pub fn init<R: Rng + ?Sized>(n_onehot: usize, n_dense: usize, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        LstmStack {
            layer1: LstmLayer::init(n_onehot, n_dense, hidden, rng),
            layer2: LstmLayer::init(0, hidden, hidden, rng),
            dropout,
        }
    }

    pub fn zeros(n_onehot: usize, n_dense: usize, hidden: usize, dropout: f64) -> Self {
        LstmStack {
            layer1: LstmLayer::zeros(n_onehot, n_dense, hidden),
            layer2: LstmLayer::zeros(0, hidden, hidden),
            dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layer1.hidden()
    }

    pub fn param_count(n_in: usize, hidden: usize) -> usize {
        LstmLayer::<T>::param_count(n_in, hidden) + LstmLayer::<T>::param_count(hidden, hidden)
    }

    /// One inference step (no dropout); returns the layer-2 hidden output.
    pub fn step(&self, input: &StepInput<T>, state: &mut LstmState<T>) -> Result<Array2<T>> {
        self.layer1
            .check_input(&input.active, input.n_active, &input.dense.view())?;
        let a = self
            .layer1
            .step(&input.active, input.n_active, input.dense.view(), &state.h1, &state.c1);
        let h1 = LstmLayer::output(&a);
        let b = self.layer2.step(&[], 0, h1.view(), &state.h2, &state.c2);
        let h2 = LstmLayer::output(&b);
        state.h1 = h1;
        state.c1 = a.c;
        state.h2 = h2.clone();
        state.c2 = b.c;
        Ok(h2)
    }

    /// Runs a whole sequence. With `dropout_rng` set, dropout masks are drawn
    /// per timestep (training mode); without it dropout is the identity.
    pub fn forward_seq<R: Rng + ?Sized>(
        &self,
        inputs: &[StepInput<T>],
        state: LstmState<T>,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Vec<Array2<T>>, LstmState<T>, StackTrace<T>)> {
        let mut state = state;
        let mut trace = StackTrace {
            l1: Vec::with_capacity(inputs.len()),
            l2: Vec::with_capacity(inputs.len()),
            masks: Vec::with_capacity(inputs.len()),
            l2_inputs: Vec::with_capacity(inputs.len()),
        };
        let mut outputs = Vec::with_capacity(inputs.len());
        for input in inputs {
            self.layer1
                .check_input(&input.active, input.n_active, &input.dense.view())?;
            let a = self
                .layer1
                .step(&input.active, input.n_active, input.dense.view(), &state.h1, &state.c1);
            let h1 = LstmLayer::output(&a);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => Some(dropout_mask(h1.dim(), self.dropout, rng)),
                _ => None,
            };
            let x2 = match &mask {
                Some(m) => &h1 * m,
                None => h1.clone(),
            };
            let b = self.layer2.step(&[], 0, x2.view(), &state.h2, &state.c2);
            let h2 = LstmLayer::output(&b);
            state.h1 = h1;
            state.c1 = a.c.clone();
            state.h2 = h2.clone();
            state.c2 = b.c.clone();
            outputs.push(h2);
            trace.l1.push(a);
            trace.l2.push(b);
            trace.masks.push(mask);
            trace.l2_inputs.push(x2);
        }
        Ok((outputs, state, trace))
    }

    /// Backpropagates `d_out[t] = dL/dh2_t` through the recorded sequence,
    /// accumulating into `grad`. Initial states receive no gradient.
    pub fn backward_seq(
        &self,
        inputs: &[StepInput<T>],
        trace: &StackTrace<T>,
        d_out: &[Option<Array2<T>>],
        grad: &mut LstmStack<T>,
    ) {
        let steps = inputs.len();
        let mut d_h1_above: Vec<Option<Array2<T>>> = Vec::with_capacity(steps);
        {
            let dx = layer_backward(
                &self.layer2,
                &mut grad.layer2,
                &trace.l2,
                |t| LayerIn::Dense(trace.l2_inputs[t].view()),
                d_out,
                true,
            );
            for (t, d) in dx.into_iter().enumerate() {
                d_h1_above.push(d.map(|d| match &trace.masks[t] {
                    Some(m) => d * m,
                    None => d,
                }));
            }
        }
        layer_backward(
            &self.layer1,
            &mut grad.layer1,
            &trace.l1,
            |t| LayerIn::Mixed(&inputs[t]),
            &d_h1_above,
            false,
        );
    }
}

impl<T: Scalar> ParamSet<T> for LstmStack<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.layer1.collect(&join(prefix, "lstm1"), out);
        self.layer2.collect(&join(prefix, "lstm2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.layer1.collect_mut(&join(prefix, "lstm1"), out);
        self.layer2.collect_mut(&join(prefix, "lstm2"), out);
    }
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(dim: (usize, usize), p: f64, rng: &mut R) -> Array2<T> {
    let keep: T = cst(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(dim, || {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

enum LayerIn<'a, T> {
    Dense(ArrayView2<'a, T>),
    Mixed(&'a StepInput<T>),
}

/// Reverse pass over one layer. Returns `dL/dx_t` when `want_dx`.
fn layer_backward<'a, T: Scalar, F>(
    layer: &LstmLayer<T>,
    grad: &mut LstmLayer<T>,
    steps: &[LayerStep<T>],
    input_of: F,
    d_out: &[Option<Array2<T>>],
    want_dx: bool,
) -> Vec<Option<Array2<T>>>
where
    F: Fn(usize) -> LayerIn<'a, T>,
{
    let n = steps.len();
    let mut dx_all: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
    let Some(first) = steps.first() else {
        return dx_all;
    };
    let (bs, hid) = first.c.dim();
    let mut dh_next: Array2<T> = Array2::zeros((bs, hid));
    let mut dc_next: Array2<T> = Array2::zeros((bs, hid));
    let mut started = false;
    let mut d_gates = Array2::<T>::zeros((bs, 4 * hid));
    for t in (0..n).rev() {
        if !started {
            if d_out[t].is_none() {
                continue;
            }
            started = true;
        }
        let st = &steps[t];
        let mut dh = dh_next.clone();
        if let Some(d) = &d_out[t] {
            dh += d;
        }
        for r in 0..bs {
            let g = st.gates.row(r);
            let g = g.as_slice().expect("contiguous gates");
            let mut dg = d_gates.row_mut(r);
            let dg = dg.as_slice_mut().expect("contiguous grads");
            for j in 0..hid {
                let (i, f, gg, o) = (g[j], g[hid + j], g[2 * hid + j], g[3 * hid + j]);
                let tc = st.tanh_c[[r, j]];
                let dhv = dh[[r, j]];
                let dc = dhv * o * (T::one() - tc * tc) + dc_next[[r, j]];
                dg[j] = dc * gg * i * (T::one() - i);
                dg[hid + j] = dc * st.c_prev[[r, j]] * f * (T::one() - f);
                dg[2 * hid + j] = dc * i * (T::one() - gg * gg);
                dg[3 * hid + j] = dhv * tc * o * (T::one() - o);
                dc_next[[r, j]] = dc * f;
            }
        }
        grad.b += &d_gates.sum_axis(Axis(0));
        general_mat_mul(T::one(), &st.h_prev.t(), &d_gates, T::one(), &mut grad.w_h);
        match input_of(t) {
            LayerIn::Dense(x) => {
                general_mat_mul(T::one(), &x.t(), &d_gates, T::one(), &mut grad.w_x);
                if want_dx {
                    dx_all[t] = Some(d_gates.dot(&layer.w_x.t()));
                }
            }
            LayerIn::Mixed(inp) => {
                if inp.dense.ncols() > 0 {
                    let mut gw = grad.w_x.slice_mut(s![layer.n_onehot.., ..]);
                    general_mat_mul(T::one(), &inp.dense.t(), &d_gates, T::one(), &mut gw);
                }
                for r in 0..bs {
                    let row = d_gates.row(r);
                    for &k in &inp.active[r * inp.n_active..(r + 1) * inp.n_active] {
                        let mut target = grad.w_x.row_mut(k as usize);
                        target += &row;
                    }
                }
                if want_dx {
                    dx_all[t] = Some(d_gates.dot(&layer.w_x.t()));
                }
            }
        }
        dh_next = d_gates.dot(&layer.w_h.t());
    }
    dx_all
}

/// Adam hyperparameters. Weight decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// `params <- params - lr*wd*params`, then a bias-corrected Adam step.
pub fn adam_update<T: Scalar, P: ParamSet<T>>(params: &mut P, grads: &P, state: &mut AdamState, cfg: &AdamConfig) {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    if state.m.is_empty() {
        state.m = p.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t);
    let bc2 = 1.0 - cfg.beta2.powi(state.t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (k, ((_, pa), (_, ga))) in p.iter_mut().zip(g.iter()).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &gr)) in pa.iter_mut().zip(ga.iter()).enumerate() {
            let gr = gr.to_f64().unwrap_or(0.0);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr * gr;
            let step = cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            let wv = w.to_f64().unwrap_or(0.0) * decay - step;
            *w = cst(wv);
        }
    }
}

/// Central finite differences of `loss` with respect to every parameter.
pub fn finite_difference_grads<P, F>(params: &mut P, eps: f64, mut loss: F) -> Vec<Vec<f64>>
where
    P: ParamSet<f64>,
    F: FnMut(&P) -> f64,
{
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, a)| a.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = nth(params, k, i);
            set_nth(params, k, i, orig + eps);
            let up = loss(params);
            set_nth(params, k, i, orig - eps);
            let down = loss(params);
            set_nth(params, k, i, orig);
            *gi = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

fn nth<P: ParamSet<f64>>(params: &mut P, k: usize, i: usize) -> f64 {
    let mut t = params.tensors_mut();
    *t[k].1.iter_mut().nth(i).expect("index in tensor")
}

fn set_nth<P: ParamSet<f64>>(params: &mut P, k: usize, i: usize, v: f64) {
    let mut t = params.tensors_mut();
    *t[k].1.iter_mut().nth(i).expect("index in tensor") = v;
}

/// Largest relative error between analytic and numeric gradients, using
/// `|a - n| / max(|a| + |n|, floor)`.
pub fn max_relative_error<P: ParamSet<f64>>(analytic: &P, numeric: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, a), n) in analytic.tensors().iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let rel = (x - y).abs() / (x.abs() + y.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Elementwise map over two equal-shape arrays into a new array.
pub(crate) fn zip_map<T: Scalar>(a: &Array2<T>, b: &Array2<T>, f: impl Fn(T, T) -> T) -> Array2<T> {
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out).and(a).and(b).for_each(|o, &x, &y| *o = f(x, y));
    out
}
