//! Dense vectors and matrices, the two-layer perceptron used by both relation
//! networks, the Adam optimizer, and a central-difference gradient checker.
//!
//! Vectors are plain `[f64]` slices. Matrices are row-major and their shape is
//! fixed at construction. Gradients are computed in closed form by the owning
//! modules; there is no general autodiff here.

use crate::error::{Error, Result};

/// Row-major dense matrix with a fixed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Borrowed row-major matrix, typically a window into a flat parameter block.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("matrix row", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.view().matvec(x)
    }
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(MatrixView { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim("matvec operand", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::dim("transpose matvec operand", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Element-wise mean of equally sized vectors. `None` for an empty input.
pub fn mean_of<'a, I>(vectors: I) -> Result<Option<Vec<f64>>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        if v.len() != acc.len() {
            return Err(Error::dim("averaged vector", acc.len(), v.len()));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    let inv = count as f64;
    acc.iter_mut().for_each(|a| *a /= inv);
    Ok(Some(acc))
}

pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Smallest and largest doubles strictly inside (0, 1).
const SIGMOID_FLOOR: f64 = f64::MIN_POSITIVE;
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, saturating at the nearest representable values inside
/// the open unit interval so that the result is never exactly 0 or 1.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

/// Intermediate values of a two-layer perceptron evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2Trace {
    /// `W1·x + b1`
    pub pre_activation: Vec<f64>,
    /// `ReLU(pre_activation)`
    pub hidden: Vec<f64>,
    pub output: f64,
}

/// Evaluates `b2 + w2·ReLU(W1·x + b1)`.
pub fn mlp2_forward(
    w1: MatrixView<'_>,
    b1: &[f64],
    w2: &[f64],
    b2: f64,
    x: &[f64],
) -> Result<Mlp2Trace> {
    let hidden_width = w1.rows();
    if x.len() != w1.cols() {
        return Err(Error::dim("x", w1.cols(), x.len()));
    }
    if b1.len() != hidden_width {
        return Err(Error::dim("b1", hidden_width, b1.len()));
    }
    if w2.len() != hidden_width {
        return Err(Error::dim("w2", hidden_width, w2.len()));
    }
    let pre_activation: Vec<f64> = (0..hidden_width)
        .map(|i| dot(w1.row(i), x) + b1[i])
        .collect();
    let hidden: Vec<f64> = pre_activation.iter().copied().map(relu).collect();
    let output = b2 + dot(w2, &hidden);
    Ok(Mlp2Trace {
        pre_activation,
        hidden,
        output,
    })
}

/// Gradient accumulators for [`mlp2_backward`]; each is added to, not overwritten.
pub struct Mlp2Grads<'a> {
    pub w1: &'a mut [f64],
    pub b1: &'a mut [f64],
    pub w2: &'a mut [f64],
    pub b2: &'a mut f64,
    pub x: Option<&'a mut [f64]>,
}

/// Back-propagates `upstream = dL/d(output)` through a traced forward pass.
/// The ReLU subgradient at zero is zero.
#[allow(clippy::needless_range_loop)]
pub fn mlp2_backward(
    w1: MatrixView<'_>,
    w2: &[f64],
    x: &[f64],
    trace: &Mlp2Trace,
    upstream: f64,
    grads: Mlp2Grads<'_>,
) {
    let hidden_width = w1.rows();
    let input_width = w1.cols();
    *grads.b2 += upstream;
    let mut d_x = grads.x;
    for i in 0..hidden_width {
        grads.w2[i] += upstream * trace.hidden[i];
        if trace.pre_activation[i] <= 0.0 {
            continue;
        }
        let d_pre = upstream * w2[i];
        grads.b1[i] += d_pre;
        axpy(
            d_pre,
            x,
            &mut grads.w1[i * input_width..(i + 1) * input_width],
        );
        if let Some(dx) = d_x.as_deref_mut() {
            axpy(d_pre, w1.row(i), dx);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::dim("gradient", params.len(), grads.len()));
    }
    if state.len() != params.len() {
        return Err(Error::dim("adam moments", params.len(), state.len()));
    }
    state.step_count += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Maximum over parameters of
/// `|analytic − central| / max(1, |analytic|, |central|)`, where `central` is
/// the central difference `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("analytic gradient", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut eval = |p: &[f64]| {
        let y = f(p);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Evaluation(format!("objective returned {y}")))
        }
    };
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let plus = eval(&probe)?;
        probe[i] = params[i] - h;
        let minus = eval(&probe)?;
        probe[i] = params[i];
        let central = (plus - minus) / (2.0 * h);
        let scale = 1f64.max(analytic[i].abs()).max(central.abs());
        worst = worst.max((analytic[i] - central).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mlp(w1: &Matrix, b1: &[f64], w2: &[f64], b2: f64, x: &[f64]) -> f64 {
        mlp2_forward(w1.view(), b1, w2, b2, x).unwrap().output
    }

    #[test]
    fn mlp2_hand_traces() {
        let w1 = Matrix::identity(2);
        assert_eq!(mlp(&w1, &[0.0, 0.0], &[1.0, 1.0], 0.0, &[1.0, -2.0]), 1.0);

        let w1 = Matrix::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(mlp(&w1, &[-1.0], &[3.0], 0.5, &[1.0]), 3.5);

        let zero = Matrix::zeros(3, 4);
        assert_eq!(mlp(&zero, &[0.0; 3], &[0.0; 3], 0.0, &[5.0, -1.0, 2.0, 9.0]), 0.0);
    }

    #[test]
    fn mlp2_names_bad_operand() {
        let w1 = Matrix::zeros(2, 3);
        let err = mlp2_forward(w1.view(), &[0.0; 2], &[0.0; 3], 0.0, &[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("w2"), "{err}");
        let err = mlp2_forward(w1.view(), &[0.0; 2], &[0.0; 2], 0.0, &[0.0; 2]).unwrap_err();
        assert!(err.to_string().contains("x"), "{err}");
        let err = mlp2_forward(w1.view(), &[0.0; 1], &[0.0; 2], 0.0, &[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("b1"), "{err}");
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        for z in [-1e4, -800.0, -40.0, 0.0, 40.0, 800.0, 1e4] {
            let s = sigmoid(z);
            assert!(s > 0.0 && s < 1.0, "sigmoid({z}) = {s}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut state = AdamState::new(3, AdamConfig::with_lr(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        adam_step(&mut p, &[0.0; 3], &mut state).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut state = AdamState::new(1, AdamConfig::with_lr(0.1));
        let mut p = vec![0.0];
        adam_step(&mut p, &[2.0], &mut state).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert_eq!(p[0], -0.1 * 2.0 / (2.0 + 1e-8));
    }

    #[test]
    fn adam_two_steps_unrolled() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new(1, cfg);
        let mut p = vec![0.0];
        adam_step(&mut p, &[1.0], &mut state).unwrap();
        let after_one = p[0];
        adam_step(&mut p, &[1.0], &mut state).unwrap();
        // Hand unroll: with a constant gradient m̂ = v̂ = 1 at every step.
        let step = 0.1 * 1.0 / (1.0 + 1e-8);
        assert!(after_one < 0.0 && p[0] < after_one);
        assert!((after_one + step).abs() < 1e-15);
        assert!((p[0] + 2.0 * step).abs() < 1e-12);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut state = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut [0.0, 0.0], &[1.0], &mut state).is_err());
        assert!(adam_step(&mut [0.0], &[1.0], &mut state).is_err());
    }

    #[test]
    fn grad_check_examples() {
        let square = |p: &[f64]| p[0] * p[0];
        assert!(grad_check(square, &[3.0], &[6.0], 1e-3).unwrap() < 1e-6);
        assert!(grad_check(|_| 4.2, &[1.0, 2.0], &[0.0, 0.0], 1e-3).unwrap() < 1e-12);
        let wrong = grad_check(square, &[3.0], &[5.0], 1e-3).unwrap();
        assert!((wrong - 1.0 / 6.0).abs() < 1e-6, "{wrong}");
    }

    #[test]
    fn grad_check_errors() {
        assert!(matches!(
            grad_check(|_| f64::NAN, &[1.0], &[0.0], 1e-3),
            Err(Error::Evaluation(_))
        ));
        assert!(grad_check(|_| 0.0, &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn mean_of_vectors() {
        let a = [0.0, 0.0];
        let b = [2.0, 2.0];
        let m = mean_of([&a[..], &b[..]]).unwrap().unwrap();
        assert_eq!(m, vec![1.0, 1.0]);
        assert!(mean_of(std::iter::empty::<&[f64]>()).unwrap().is_none());
        assert!(mean_of([&a[..], &[1.0][..]]).is_err());
    }

    fn small_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, len)
    }

    proptest! {
        #[test]
        fn mlp2_homogeneous_in_output_layer(
            w1 in small_vec(6), b1 in small_vec(2), w2 in small_vec(2),
            b2 in -2.0f64..2.0, x in small_vec(3),
        ) {
            let w1 = Matrix::from_vec(2, 3, w1).unwrap();
            let base = mlp(&w1, &b1, &w2, b2, &x);
            let w2x2: Vec<f64> = w2.iter().map(|v| 2.0 * v).collect();
            let doubled = mlp(&w1, &b1, &w2x2, 2.0 * b2, &x);
            prop_assert!((doubled - 2.0 * base).abs() < 1e-12);
        }

        #[test]
        fn mlp2_backward_matches_finite_differences(
            w1 in small_vec(12), b1 in small_vec(3), w2 in small_vec(3),
            b2 in -2.0f64..2.0, x in small_vec(4),
        ) {
            let hidden = 3;
            let input = 4;
            let w1m = Matrix::from_vec(hidden, input, w1.clone()).unwrap();
            let trace = mlp2_forward(w1m.view(), &b1, &w2, b2, &x).unwrap();
            // Skip instances sitting on a ReLU kink.
            prop_assume!(trace.pre_activation.iter().all(|z| z.abs() > 1e-3));

            let mut dw1 = vec![0.0; hidden * input];
            let mut db1 = vec![0.0; hidden];
            let mut dw2 = vec![0.0; hidden];
            let mut db2 = 0.0;
            let mut dx = vec![0.0; input];
            mlp2_backward(w1m.view(), &w2, &x, &trace, 1.0, Mlp2Grads {
                w1: &mut dw1, b1: &mut db1, w2: &mut dw2, b2: &mut db2, x: Some(&mut dx),
            });

            let mut flat: Vec<f64> = w1.clone();
            flat.extend(&b1);
            flat.extend(&w2);
            flat.push(b2);
            flat.extend(&x);
            let mut analytic = dw1;
            analytic.extend(db1);
            analytic.extend(dw2);
            analytic.push(db2);
            analytic.extend(dx);

            let f = |p: &[f64]| {
                let (w1, rest) = p.split_at(hidden * input);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, rest) = rest.split_at(hidden);
                let (b2, x) = rest.split_at(1);
                let w1 = MatrixView::new(hidden, input, w1).unwrap();
                mlp2_forward(w1, b1, w2, b2[0], x).unwrap().output
            };
            let err = grad_check(f, &flat, &analytic, 1e-4).unwrap();
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn adam_fresh_state_zero_gradient_identity(
            params in small_vec(5), lr in 1e-6f64..1.0, steps in 0u64..50,
        ) {
            let mut state = AdamState::new(5, AdamConfig::with_lr(lr));
            state.step_count = steps;
            let mut p = params.clone();
            adam_step(&mut p, &[0.0; 5], &mut state).unwrap();
            prop_assert_eq!(p, params);
            prop_assert_eq!(state.step_count, steps + 1);
        }
    }
}
