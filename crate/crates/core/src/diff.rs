//! Dense MLP chains with a hand-written reverse pass.
//!
//! All parameters of a model live in one flat [`ParamSet`]; an [`Mlp`] is a
//! view onto a contiguous slice of it. That keeps Adam, gradient summation
//! and checkpointing trivial: they all work on `&[f64]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return invalid(format!("{rows}x{cols} tensor cannot hold {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Layer widths of an MLP. Hidden layers use ReLU, the output is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return invalid(format!("an MLP needs >= 2 positive widths, got {widths:?}"));
        }
        Ok(Self { widths })
    }

    /// `input -> hidden x layers -> output`.
    pub fn with_hidden(input: usize, hidden: usize, layers: usize, output: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, layers));
        widths.push(output);
        Self::new(widths)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter buffer with named segments. `version` bumps on every
/// mutable access so that tapes recorded against older values are rejected.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    data: Vec<f64>,
    entries: Vec<ParamEntry>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.data.resize(offset + len, 0.0);
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            offset,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.data
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replaces all values; the layout must match.
    pub fn load(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return invalid(format!(
                "parameter count mismatch: expected {}, got {}",
                self.data.len(),
                values.len()
            ));
        }
        self.data_mut().copy_from_slice(values);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// An MLP whose weights live inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`]: the input and the post-ReLU
/// output of each hidden layer.
#[derive(Debug)]
pub struct MlpTape {
    activations: Vec<Tensor2>,
    version: u64,
    first_offset: usize,
}

impl Mlp {
    pub fn register(params: &mut ParamSet, name: &str, spec: MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                w: params.add(format!("{name}.w{i}"), vec![w[0], w[1]]),
                b: params.add(format!("{name}.b{i}"), vec![w[1]]),
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect();
        Self { spec, layers }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Uniform fan-in initialisation, zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let data = params.data_mut();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let gain = if i == last { 3.0 } else { 6.0 };
            let bound = (gain / l.fan_in as f64).sqrt();
            for w in &mut data[l.w..l.w + l.fan_in * l.fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
            data[l.b..l.b + l.fan_out].fill(0.0);
        }
    }

    pub fn forward(&self, params: &ParamSet, input: Tensor2) -> Result<(Tensor2, MlpTape)> {
        if input.cols != self.spec.input_dim() {
            return invalid(format!(
                "MLP expects {} input columns, got {}",
                self.spec.input_dim(),
                input.cols
            ));
        }
        let p = params.data();
        let batch = input.rows;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = Tensor2::zeros(batch, l.fan_out);
            let bias = &p[l.b..l.b + l.fan_out];
            for r in 0..batch {
                out.row_mut(r).copy_from_slice(bias);
            }
            gemm(
                batch,
                l.fan_in,
                l.fan_out,
                cur.data(),
                (l.fan_in as isize, 1),
                &p[l.w..l.w + l.fan_in * l.fan_out],
                (l.fan_out as isize, 1),
                out.data_mut(),
                1.0,
            );
            if i != last {
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(cur);
            cur = out;
        }
        let tape = MlpTape {
            activations,
            version: params.version(),
            first_offset: self.layers[0].w,
        };
        Ok((cur, tape))
    }

    /// Accumulates parameter gradients into `grads` (full parameter-set
    /// length) and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        params: &ParamSet,
        tape: &MlpTape,
        grad_out: &Tensor2,
        grads: &mut [f64],
    ) -> Result<Tensor2> {
        if tape.version != params.version() || tape.first_offset != self.layers[0].w {
            return Err(Error::InvalidState(
                "tape was recorded against different parameters".into(),
            ));
        }
        if grads.len() != params.len() {
            return invalid("gradient buffer does not match parameter set");
        }
        let batch = tape.activations[0].rows;
        if grad_out.rows != batch || grad_out.cols != self.spec.output_dim() {
            return invalid("output gradient shape mismatch");
        }
        let p = params.data();
        let mut delta = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let a = &tape.activations[i];
            // dW += A^T dZ
            gemm(
                l.fan_in,
                batch,
                l.fan_out,
                a.data(),
                (1, l.fan_in as isize),
                delta.data(),
                (l.fan_out as isize, 1),
                &mut grads[l.w..l.w + l.fan_in * l.fan_out],
                1.0,
            );
            let db = &mut grads[l.b..l.b + l.fan_out];
            for r in 0..batch {
                for (g, d) in db.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            // dA = dZ W^T
            let mut next = Tensor2::zeros(batch, l.fan_in);
            gemm(
                batch,
                l.fan_out,
                l.fan_in,
                delta.data(),
                (l.fan_out as isize, 1),
                &p[l.w..l.w + l.fan_in * l.fan_out],
                (1, l.fan_out as isize),
                next.data_mut(),
                1.0,
            );
            if i > 0 {
                // ReLU mask; the subgradient at zero is zero.
                for (d, &act) in next.data_mut().iter_mut().zip(a.data()) {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// `c += a * b` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers sized for the (m, k, n) shapes and
    // strides above; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Step-wise learning-rate decay: the rate is divided by `factors[i]` once
/// `decay_steps[i]` updates have been applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_steps: Vec<u64>,
    pub factors: Vec<f64>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay_steps: Vec::new(),
            factors: Vec::new(),
        }
    }

    /// Three decays alternating between a factor of 2 and 5.
    pub fn alternating(initial: f64, decay_steps: [u64; 3]) -> Self {
        Self {
            initial,
            decay_steps: decay_steps.to_vec(),
            factors: vec![2.0, 5.0, 2.0],
        }
    }

    /// Decays at fixed fractions of the total number of steps.
    pub fn at_fractions(initial: f64, total_steps: u64, fractions: &[f64]) -> Self {
        let steps: Vec<u64> = fractions
            .iter()
            .map(|f| (f * total_steps as f64).round() as u64)
            .collect();
        let factors = (0..steps.len())
            .map(|i| if i % 2 == 0 { 2.0 } else { 5.0 })
            .collect();
        Self {
            initial,
            decay_steps: steps,
            factors,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let mut lr = self.initial;
        for (&s, &f) in self.decay_steps.iter().zip(&self.factors) {
            if step >= s {
                lr /= f;
            }
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(n_params: usize, schedule: LrSchedule) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return invalid(format!(
            "adam shapes disagree: params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let data = params.data_mut();
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a `1e-6` magnitude floor so that components that are
/// zero in both routes do not divide by zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `analytic[i]` with the central difference of `f` at `x` for each
/// index in `indices`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> FdReport {
    let mut probe = x.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: usize::MAX,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst_index == usize::MAX {
            report = FdReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line forward pass written independently of the gemm path.
    fn naive_forward(spec: &MlpSpec, p: &[f64], offset: usize, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut off = offset;
        let n_layers = spec.widths.len() - 1;
        for l in 0..n_layers {
            let (fi, fo) = (spec.widths[l], spec.widths[l + 1]);
            let w = &p[off..off + fi * fo];
            let b = &p[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut s = b[o];
                for i in 0..fi {
                    s += cur[i] * w[i * fo + o];
                }
                next[o] = if l + 1 < n_layers { s.max(0.0) } else { s };
            }
            cur = next;
        }
        cur
    }

    fn random_net(widths: Vec<usize>, seed: u64) -> (ParamSet, Mlp) {
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "net", MlpSpec::new(widths).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mlp.init(&mut params, &mut rng);
        // Non-zero biases exercise the bias paths too.
        for v in params.data_mut().iter_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        (params, mlp)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "z", MlpSpec::new(vec![3, 4, 2]).unwrap());
        let (out, _) = mlp.forward(&params, random_input(5, 3, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "id", MlpSpec::new(vec![3, 3]).unwrap());
        let d = params.data_mut();
        for i in 0..3 {
            d[i * 3 + i] = 1.0;
        }
        let x = random_input(4, 3, 2);
        let (out, _) = mlp.forward(&params, x.clone()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        let (params, mlp) = random_net(vec![5, 7, 6, 3], 42);
        let x = random_input(9, 5, 43);
        let (out, _) = mlp.forward(&params, x.clone()).unwrap();
        for r in 0..9 {
            let expect = naive_forward(mlp.spec(), params.data(), 0, x.row(r));
            for (a, b) in out.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (params, mlp) = random_net(vec![4, 3], 1);
        assert!(matches!(
            mlp.forward(&params, Tensor2::zeros(2, 5)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn scalar_relu_chain_rule() {
        // f(x) = relu(w x + b) feeding an identity output layer.
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "s", MlpSpec::new(vec![1, 1, 1]).unwrap());
        params.data_mut().copy_from_slice(&[2.0, -1.0, 1.0, 0.0]);
        let x = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        let (out, tape) = mlp.forward(&params, x).unwrap();
        assert_eq!(out.data(), &[1.0]);
        let mut grads = vec![0.0; params.len()];
        let gx = mlp
            .backward(&params, &tape, &Tensor2::from_vec(1, 1, vec![1.0]).unwrap(), &mut grads)
            .unwrap();
        assert_eq!(grads[0], 1.0); // df/dw = x
        assert_eq!(grads[1], 1.0); // df/db
        assert_eq!(gx.data(), &[2.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let (params, mlp) = random_net(vec![3, 5, 2], 3);
        let (_, tape) = mlp.forward(&params, random_input(4, 3, 4)).unwrap();
        let mut grads = vec![0.0; params.len()];
        mlp.backward(&params, &tape, &Tensor2::zeros(4, 2), &mut grads).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let (mut params, mlp) = random_net(vec![3, 2], 5);
        let (_, tape) = mlp.forward(&params, random_input(1, 3, 6)).unwrap();
        params.data_mut()[0] += 1.0;
        let mut grads = vec![0.0; params.len()];
        assert!(matches!(
            mlp.backward(&params, &tape, &Tensor2::zeros(1, 2), &mut grads),
            Err(Error::InvalidState(_))
        ));
    }

    fn weighted_sum_loss(mlp: &Mlp, params: &ParamSet, x: &Tensor2, w: &[f64]) -> f64 {
        let (out, _) = mlp.forward(params, x.clone()).unwrap();
        out.data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences_on_many_seeds() {
        for seed in 0..20u64 {
            let depth = (seed % 3) as usize + 1;
            let mut widths = vec![4];
            widths.extend(std::iter::repeat(6).take(depth));
            widths.push(3);
            let (params, mlp) = random_net(widths, 100 + seed);
            let x = random_input(5, 4, 200 + seed);
            let w: Vec<f64> = random_input(5, 3, 300 + seed).into_vec();
            let (_, tape) = mlp.forward(&params, x.clone()).unwrap();
            let mut grads = vec![0.0; params.len()];
            let go = Tensor2::from_vec(5, 3, w.clone()).unwrap();
            mlp.backward(&params, &tape, &go, &mut grads).unwrap();
            let base = params.data().to_vec();
            let indices: Vec<usize> = (0..base.len()).collect();
            let report = finite_difference_check(
                |p| {
                    let mut probe = params.clone();
                    probe.load(p).unwrap();
                    weighted_sum_loss(&mlp, &probe, &x, &w)
                },
                &base,
                &grads,
                &indices,
                1e-5,
            );
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let (params, mlp) = random_net(vec![3, 4, 2], 9);
        let (_, tape) = mlp.forward(&params, random_input(3, 3, 10)).unwrap();
        let g1 = random_input(3, 2, 11);
        let g2 = random_input(3, 2, 12);
        let mut sum = g1.clone();
        for (a, b) in sum.data_mut().iter_mut().zip(g2.data()) {
            *a += b;
        }
        let run = |g: &Tensor2| {
            let mut grads = vec![0.0; params.len()];
            mlp.backward(&params, &tape, g, &mut grads).unwrap();
            grads
        };
        let (a, b, s) = (run(&g1), run(&g2), run(&sum));
        for i in 0..s.len() {
            assert!((a[i] + b[i] - s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (mut params, _) = random_net(vec![2, 2], 1);
        let before = params.data().to_vec();
        let mut state = AdamState::new(params.len(), LrSchedule::constant(1e-3));
        adam_step(&mut params, &vec![0.0; before.len()], &mut state).unwrap();
        assert_eq!(params.data(), before.as_slice());
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut params = ParamSet::new();
        params.add("x", vec![1]);
        let mut state = AdamState::new(1, LrSchedule::constant(1e-3));
        adam_step(&mut params, &[0.37], &mut state).unwrap();
        let expect = -1e-3 * 0.37 / (0.37 + 1e-8);
        assert!((params.data()[0] - expect).abs() < 1e-15);
        assert!((params.data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = ParamSet::new();
        params.add("x", vec![2]);
        let mut state = AdamState::new(2, LrSchedule::constant(1e-3));
        assert!(adam_step(&mut params, &[1.0], &mut state).is_err());
    }

    #[test]
    fn alternating_schedule_regimes() {
        let s = LrSchedule::alternating(0.001, [100, 200, 300]);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(s.lr_at(0), 0.001));
        assert!(close(s.lr_at(99), 0.001));
        assert!(close(s.lr_at(100), 0.0005));
        assert!(close(s.lr_at(250), 0.0001));
        assert!(close(s.lr_at(300), 0.00005));
        assert!(close(s.lr_at(10_000), 0.00005));
    }
}
