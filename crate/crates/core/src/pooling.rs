//! Parameterized Lp pooling with a trainable binary kernel-shape matrix.
//!
//! Each output `i` aggregates the inputs selected by row `i` of a shape
//! matrix `W` with its own exponent `p_i`:
//!
//! ```text
//! f_i(x) = ( (1/N_i) * sum_j W_ij * x_j^p_i )^(1/p_i)
//! ```
//!
//! `N_i` is the input length `J` ([`Normalization::InputSize`], the default)
//! or the selected mass `sum_j W_ij` ([`Normalization::SelectedWeight`]).
//! `p = 1` gives the mean and `p -> inf` the maximum of the selected inputs.
//!
//! `W` and `p` are never stored directly. The trainable logits `W~` and `p~`
//! map through `W = sigmoid((W~ - 0.5) / T)` while meta-training,
//! `W = step(W~ - 0.5)` at evaluation, and `p = exp(p~)`.
//!
//! Evaluation happens in log space with a max shift, so `p` in the thousands
//! is as stable as `p = 1`.

use ndarray::{Array1, Array2, Axis, IxDyn, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Array, Tensor, TensorError};

/// Inputs are clamped to this floor before taking logarithms.
pub const INPUT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PoolingError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("negative pooling input {value} at flat index {index}")]
    NegativeInput { index: usize, value: f64 },
    #[error("non-finite parameter at flat index {0}")]
    NonFiniteParameter(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("incompatible geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PoolingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sigmoid-relaxed shape matrix; differentiable in `W~`.
    MetaTraining,
    /// Binary shape matrix from the unit step.
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    /// Divide by the input length `J`.
    #[default]
    InputSize,
    /// Divide by `sum_j W_ij`, making each output a weighted power mean.
    SelectedWeight,
}

/// Non-tensor settings shared by every form of the layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolConfig {
    pub temperature: f64,
    pub mode: Mode,
    pub normalization: Normalization,
}

impl PoolConfig {
    pub fn new(temperature: f64, mode: Mode) -> Self {
        PoolConfig {
            temperature,
            mode,
            normalization: Normalization::InputSize,
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

/// Shape transform: sigmoid relaxation while meta-training, unit step otherwise.
///
/// The step returns 1 at zero, so `W~ = 0.5` selects its input.
pub fn transform_shape(shape_logits: &Tensor, temperature: f64, mode: Mode) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(PoolingError::NonPositiveTemperature(temperature));
    }
    check_finite(shape_logits)?;
    match mode {
        Mode::MetaTraining => Ok(shape_logits
            .offset(-0.5)?
            .scale(1.0 / temperature)?
            .sigmoid()?),
        Mode::Evaluation => Ok(Tensor::constant(
            shape_logits
                .value()
                .mapv(|v| if v - 0.5 < 0.0 { 0.0 } else { 1.0 }),
        )),
    }
}

/// Scalar form of the meta-training shape transform.
pub fn sigmoid_shape(logit: f64, temperature: f64) -> f64 {
    let z = (logit - 0.5) / temperature;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Exponent transform `p = exp(p~)`.
pub fn transform_operation(exponent_logits: &Tensor) -> Result<Tensor> {
    check_finite(exponent_logits)?;
    Ok(exponent_logits.exp()?)
}

fn check_finite(t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(PoolingError::NonFiniteParameter(i)),
        None => Ok(()),
    }
}

fn check_nonnegative(x: &Tensor) -> Result<()> {
    match x.data().iter().position(|&v| v < 0.0) {
        Some(index) => Err(PoolingError::NegativeInput {
            index,
            value: x.data()[index],
        }),
        None => Ok(()),
    }
}

/// Lp aggregation over the last axis.
///
/// `x` is `(..., K or 1, J)`, `w` is the derived shape matrix broadcastable
/// to `(..., K, J)` and `p` the derived exponents shaped `(..., K, 1)`.
/// Returns `(..., K, 1)`. Rows with no selected input yield 0.
fn lp_aggregate(x: &Tensor, w: &Tensor, p: &Tensor, normalization: Normalization) -> Result<Tensor> {
    let last = x.shape().len() - 1;
    let j = x.shape()[last];
    let z = x.clamp_min(INPUT_FLOOR)?.log()?.mul(p)?;

    // Shift by the largest selected term; the shift is a constant for differentiation.
    let zshape = z.shape().to_vec();
    let wb = w
        .value()
        .broadcast(IxDyn(&zshape))
        .ok_or_else(|| PoolingError::Dimension(format!("{:?} vs {:?}", w.shape(), zshape)))?;
    let mut shift = z.value().map_axis(Axis(last), |_| 0.0f64);
    Zip::from(&mut shift)
        .and(z.value().lanes(Axis(last)))
        .and(wb.lanes(Axis(last)))
        .for_each(|m, zl, wl| {
            *m = zl
                .iter()
                .zip(wl.iter())
                .filter(|(_, &wv)| wv > 0.0)
                .map(|(&zv, _)| zv)
                .fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                *m = 0.0;
            }
        });
    let shift = Tensor::constant(shift.insert_axis(Axis(last)));

    let mut centered = z.sub(&shift)?;
    if w.data().iter().any(|&v| v == 0.0) {
        // Unselected terms may sit far above the shift; cap them so exp stays finite.
        // Selected terms are <= 0 already, so the cap leaves them and their gradient intact.
        centered = centered.sub(&centered.relu()?)?;
    }
    let mass = centered.exp()?.mul(w)?.sum_axis(last)?;
    let empty = mass.value().mapv(|v| if v == 0.0 { 1.0 } else { 0.0 });
    let any_empty = empty.iter().any(|&v| v > 0.0);
    let mass = if any_empty { mass.add(&Tensor::constant(empty.clone()))? } else { mass };
    let log_mean = match normalization {
        Normalization::InputSize => mass.log()?.add(&shift)?.offset(-(j as f64).ln())?,
        Normalization::SelectedWeight => {
            let wlast = w.shape().len() - 1;
            let wsum = w.sum_axis(wlast)?;
            let wempty = wsum.value().mapv(|v| if v == 0.0 { 1.0 } else { 0.0 });
            let wsum = wsum.add(&Tensor::constant(wempty))?;
            mass.log()?.add(&shift)?.sub(&wsum.log()?)?
        }
    };
    let out = log_mean.div(p)?.exp()?;
    if any_empty {
        Ok(out.mul(&Tensor::constant(empty.mapv(|v| 1.0 - v)))?)
    } else {
        Ok(out)
    }
}

/// Dense form: `x` is `(J)` or `(S, J)`, logits are `(I, J)` and `(I)`.
/// Returns `(I)` or `(S, I)`.
pub fn pool_dense(x: &Tensor, shape_logits: &Tensor, exponent_logits: &Tensor, cfg: &PoolConfig) -> Result<Tensor> {
    let (i, j) = match shape_logits.shape() {
        [i, j] => (*i, *j),
        s => return Err(PoolingError::Dimension(format!("shape logits must be a matrix, got {s:?}"))),
    };
    if exponent_logits.shape() != [i] {
        return Err(PoolingError::Dimension(format!(
            "exponent logits {:?} do not match {i} outputs",
            exponent_logits.shape()
        )));
    }
    let batch = match x.shape() {
        [n] if *n == j => None,
        [s, n] if *n == j => Some(*s),
        s => return Err(PoolingError::Dimension(format!("input {s:?} does not end in J = {j}"))),
    };
    check_nonnegative(x)?;
    let w = transform_shape(shape_logits, cfg.temperature, cfg.mode)?;
    let p = transform_operation(exponent_logits)?.reshape(&[i, 1])?;
    match batch {
        None => {
            let out = lp_aggregate(&x.reshape(&[1, j])?, &w, &p, cfg.normalization)?;
            Ok(out.reshape(&[i])?)
        }
        Some(s) => {
            let out = lp_aggregate(&x.reshape(&[s, 1, j])?, &w, &p, cfg.normalization)?;
            Ok(out.reshape(&[s, i])?)
        }
    }
}

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    /// Window positions along height and width.
    pub grid: (usize, usize),
}

impl WindowGeometry {
    /// Geometry for an `h × w` input; windows must tile it exactly.
    pub fn for_input(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        use crate::tensor::window_count;
        match (
            window_count(h, window.0, stride.0),
            window_count(w, window.1, stride.1),
        ) {
            (Some(gh), Some(gw)) => Ok(WindowGeometry {
                window,
                stride,
                grid: (gh, gw),
            }),
            _ => Err(PoolingError::Geometry(format!(
                "{h}x{w} input is not tiled by {}x{} windows with stride {}x{}",
                window.0, window.1, stride.0, stride.1
            ))),
        }
    }

    pub fn area(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn positions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn input_extent(&self) -> (usize, usize) {
        (
            (self.grid.0 - 1) * self.stride.0 + self.window.0,
            (self.grid.1 - 1) * self.stride.1 + self.window.1,
        )
    }
}

/// Promotes `C×H×W` to `1×C×H×W`; returns the 4-D view and whether it was promoted.
fn as_batch(image: &Tensor) -> Result<(Tensor, bool)> {
    match image.shape() {
        [c, h, w] => Ok((image.reshape(&[1, *c, *h, *w])?, true)),
        [_, _, _, _] => Ok((image.clone(), false)),
        s => Err(PoolingError::Dimension(format!("expected C×H×W or B×C×H×W, got {s:?}"))),
    }
}

fn windows(image: &Tensor, geom: &WindowGeometry) -> Result<(Tensor, bool, [usize; 2])> {
    let (x, promoted) = as_batch(image)?;
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    if (h, w) != geom.input_extent() || WindowGeometry::for_input(h, w, geom.window, geom.stride)? != *geom {
        return Err(PoolingError::Geometry(format!(
            "{h}x{w} input does not match a {}x{} window grid",
            geom.grid.0, geom.grid.1
        )));
    }
    let cols = x.unfold2d(geom.window.0, geom.window.1, geom.stride.0, geom.stride.1)?;
    Ok((cols, promoted, [s[0], s[1]]))
}

fn unwindow(out: Tensor, promoted: bool, bc: [usize; 2], geom: &WindowGeometry) -> Result<Tensor> {
    let (gh, gw) = geom.grid;
    Ok(if promoted {
        out.reshape(&[bc[1], gh, gw])?
    } else {
        out.reshape(&[bc[0], bc[1], gh, gw])?
    })
}

/// Sliding-window form. Shared logits are `(P, J)` / `(P)`; per-channel
/// logits are `(C, P, J)` / `(C, P)`, with `P` window positions in raster
/// order and `J` the window area. One output per window.
pub fn pool_windows(
    image: &Tensor,
    geom: &WindowGeometry,
    shape_logits: &Tensor,
    exponent_logits: &Tensor,
    cfg: &PoolConfig,
) -> Result<Tensor> {
    check_nonnegative(image)?;
    let (cols, promoted, bc) = windows(image, geom)?;
    let (positions, area) = (geom.positions(), geom.area());
    let pshape = match shape_logits.shape() {
        [p, j] if *p == positions && *j == area => vec![positions, 1],
        [c, p, j] if *c == bc[1] && *p == positions && *j == area => vec![*c, positions, 1],
        s => {
            return Err(PoolingError::Dimension(format!(
                "shape logits {s:?} do not match {positions} windows of area {area} and {} channels",
                bc[1]
            )))
        }
    };
    if exponent_logits.shape() != &pshape[..pshape.len() - 1] {
        return Err(PoolingError::Dimension(format!(
            "exponent logits {:?} do not match shape logits {:?}",
            exponent_logits.shape(),
            shape_logits.shape()
        )));
    }
    let w = transform_shape(shape_logits, cfg.temperature, cfg.mode)?;
    let p = transform_operation(exponent_logits)?.reshape(&pshape)?;
    let out = lp_aggregate(&cols, &w, &p, cfg.normalization)?;
    unwindow(out, promoted, bc, geom)
}

pub fn max_pool(image: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let geom = geometry_of(image, window, stride)?;
    let (cols, promoted, bc) = windows(image, &geom)?;
    unwindow(cols.max_axis(3)?, promoted, bc, &geom)
}

pub fn avg_pool(image: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let geom = geometry_of(image, window, stride)?;
    let (cols, promoted, bc) = windows(image, &geom)?;
    unwindow(cols.mean_axis(3)?, promoted, bc, &geom)
}

fn geometry_of(image: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<WindowGeometry> {
    let s = image.shape();
    if s.len() < 3 {
        return Err(PoolingError::Dimension(format!("expected an image, got {s:?}")));
    }
    WindowGeometry::for_input(s[s.len() - 2], s[s.len() - 1], window, stride)
}

/// Dense-form parameters: `W~` is `I×J`, `p~` has length `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub shape_logits: Array2<f64>,
    pub exponent_logits: Array1<f64>,
    pub config: PoolConfig,
}

impl PoolingParams {
    pub fn outputs(&self) -> usize {
        self.shape_logits.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.shape_logits.ncols()
    }

    pub fn shape_matrix(&self) -> Result<Array2<f64>> {
        derived_shape(&self.shape_logits.clone().into_dyn(), &self.config)?
            .into_dimensionality()
            .map_err(|e| PoolingError::Dimension(e.to_string()))
    }

    pub fn exponents(&self) -> Array1<f64> {
        self.exponent_logits.mapv(f64::exp)
    }

    pub fn pool(&self, x: &Tensor) -> Result<Tensor> {
        pool_dense(
            x,
            &Tensor::constant(self.shape_logits.clone().into_dyn()),
            &Tensor::constant(self.exponent_logits.clone().into_dyn()),
            &self.config,
        )
    }
}

/// Sliding-window parameters, one `W` row and one `p` per window position
/// (and per channel unless shared).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedPoolingParams {
    pub geometry: WindowGeometry,
    /// `(P, J)` when shared across channels, `(C, P, J)` otherwise.
    pub shape_logits: Array,
    /// `(P)` when shared, `(C, P)` otherwise.
    pub exponent_logits: Array,
    pub config: PoolConfig,
}

impl WindowedPoolingParams {
    pub fn channel_sharing(&self) -> bool {
        self.shape_logits.ndim() == 2
    }

    pub fn pool(&self, image: &Tensor) -> Result<Tensor> {
        pool_windows(
            image,
            &self.geometry,
            &Tensor::constant(self.shape_logits.clone()),
            &Tensor::constant(self.exponent_logits.clone()),
            &self.config,
        )
    }

    /// The dense parameters of one window (`I = 1`), for the shared layout.
    pub fn window_params(&self, row: usize, col: usize) -> Option<PoolingParams> {
        if !self.channel_sharing() || row >= self.geometry.grid.0 || col >= self.geometry.grid.1 {
            return None;
        }
        let k = row * self.geometry.grid.1 + col;
        let area = self.geometry.area();
        let w = self.shape_logits.index_axis(Axis(0), k).to_owned();
        Some(PoolingParams {
            shape_logits: w.into_shape_with_order((1, area)).ok()?,
            exponent_logits: Array1::from_elem(1, self.exponent_logits[[k]]),
            config: self.config,
        })
    }

    pub fn shape_matrix(&self) -> Result<Array> {
        derived_shape(&self.shape_logits, &self.config)
    }

    pub fn exponents(&self) -> Array {
        self.exponent_logits.mapv(f64::exp)
    }
}

fn derived_shape(logits: &Array, cfg: &PoolConfig) -> Result<Array> {
    Ok(transform_shape(&Tensor::constant(logits.clone()), cfg.temperature, cfg.mode)?
        .value()
        .clone())
}

/// `W~ ~ Uniform(0.4, 0.6)` i.i.d., `p~ = 0`.
pub fn init_pooling_params(outputs: usize, inputs: usize, temperature: f64, seed: u64) -> Result<PoolingParams> {
    if !(temperature > 0.0) {
        return Err(PoolingError::NonPositiveTemperature(temperature));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PoolingParams {
        shape_logits: Array2::from_shape_fn((outputs, inputs), |_| rng.gen_range(0.4..0.6)),
        exponent_logits: Array1::zeros(outputs),
        config: PoolConfig::new(temperature, Mode::MetaTraining),
    })
}

/// Windowed variant of [`init_pooling_params`]; `channels = None` shares parameters.
pub fn init_windowed_params(
    geometry: WindowGeometry,
    channels: Option<usize>,
    temperature: f64,
    seed: u64,
) -> Result<WindowedPoolingParams> {
    if !(temperature > 0.0) {
        return Err(PoolingError::NonPositiveTemperature(temperature));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, j) = (geometry.positions(), geometry.area());
    let (wshape, pshape) = match channels {
        None => (vec![p, j], vec![p]),
        Some(c) => (vec![c, p, j], vec![c, p]),
    };
    Ok(WindowedPoolingParams {
        geometry,
        shape_logits: Array::from_shape_fn(IxDyn(&wshape), |_| rng.gen_range(0.4..0.6)),
        exponent_logits: Array::zeros(IxDyn(&pshape)),
        config: PoolConfig::new(temperature, Mode::MetaTraining),
    })
}

/// Rows of a binary shape matrix with no selected entry (their output is 0).
pub fn empty_rows(binary: &Array2<f64>) -> Vec<usize> {
    binary
        .outer_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().all(|&v| v == 0.0))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, grad, Tape};
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::Rng;

    fn dense(x: &[f64], w_row: &[f64], p: f64, mode: Mode) -> f64 {
        // Logits 0.75 / 0.25 step to 1 / 0; p~ = ln p.
        let logits: Vec<f64> = w_row.iter().map(|&w| if w > 0.5 { 0.75 } else { 0.25 }).collect();
        let params = PoolingParams {
            shape_logits: Array2::from_shape_vec((1, w_row.len()), logits).unwrap(),
            exponent_logits: arr1(&[p.ln()]),
            config: PoolConfig::new(0.2, mode),
        };
        params.pool(&Tensor::constant(arr1(x).into_dyn())).unwrap().item()
    }

    /// Oracle: direct log-space evaluation, independent of the tensor path.
    fn oracle(x: &[f64], w: &[f64], p: f64, norm: f64) -> f64 {
        let terms: Vec<f64> = x
            .iter()
            .zip(w)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&x, &w)| w.ln() + p * x.max(INPUT_FLOOR).ln())
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        ((lse - norm.ln()) / p).exp()
    }

    #[test]
    fn shape_transform_examples() {
        let logits = Tensor::constant(arr1(&[0.5, 0.7, 0.3]).into_dyn());
        let soft = transform_shape(&logits, 0.2, Mode::MetaTraining).unwrap();
        assert_eq!(soft.data()[0], 0.5);
        assert!((soft.data()[1] - 0.7310585786300049).abs() < 1e-12);
        assert!((soft.data()[2] - 0.2689414213699951).abs() < 1e-12);
        let hard = transform_shape(&logits, 0.2, Mode::Evaluation).unwrap();
        assert_eq!(hard.to_vec(), vec![1.0, 1.0, 0.0]);
        assert!(matches!(
            transform_shape(&logits, 0.0, Mode::MetaTraining),
            Err(PoolingError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn operation_transform_examples() {
        let p = transform_operation(&Tensor::constant(arr1(&[0.0, 1.0, -0.6931]).into_dyn())).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert!((p.data()[1] - std::f64::consts::E).abs() < 1e-12);
        assert!((p.data()[2] - 0.5).abs() < 1e-4);
        let bad = Tensor::constant(arr1(&[f64::NAN]).into_dyn());
        assert!(transform_operation(&bad).is_err());
    }

    #[test]
    fn dense_examples() {
        let ev = Mode::Evaluation;
        assert!((dense(&[1., 2., 3., 4.], &[1., 1., 1., 1.], 1.0, ev) - 2.5).abs() < 1e-12);
        assert!((dense(&[1., 2., 3., 4.], &[1., 0., 1., 0.], 1.0, ev) - 1.0).abs() < 1e-12);
        let expected = oracle(&[0.2, 0.9, 0.5, 0.1], &[1.; 4], 1000.0, 4.0);
        assert!((expected - 0.9 * 0.25f64.powf(1e-3)).abs() < 1e-12);
        let got = dense(&[0.2, 0.9, 0.5, 0.1], &[1.; 4], 1000.0, ev);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.89875).abs() < 1e-5);
        assert!((dense(&[3., 4., 1., 1.], &[1., 1., 0., 0.], 2.0, ev) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dense_rejects_bad_inputs() {
        let params = init_pooling_params(2, 3, 0.2, 0).unwrap();
        let neg = Tensor::constant(arr1(&[0.1, -0.2, 0.3]).into_dyn());
        assert!(matches!(params.pool(&neg), Err(PoolingError::NegativeInput { index: 1, .. })));
        let short = Tensor::constant(arr1(&[0.1, 0.2]).into_dyn());
        assert!(matches!(params.pool(&short), Err(PoolingError::Dimension(_))));
    }

    #[test]
    fn zero_inputs_are_clamped() {
        let params = init_pooling_params(2, 3, 0.2, 0).unwrap();
        let tape = Tape::new();
        let x = tape.var(arr1(&[0.0, 0.0, 0.5]).into_dyn());
        let y = params.pool(&x).unwrap().sum().unwrap();
        let g = grad(&y, &[&x]).unwrap().remove(0);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_row_in_evaluation_mode_yields_zero() {
        let params = PoolingParams {
            shape_logits: arr2(&[[0.1, 0.2], [0.9, 0.9]]),
            exponent_logits: arr1(&[0.0, 0.0]),
            config: PoolConfig::new(0.2, Mode::Evaluation),
        };
        let y = params.pool(&Tensor::constant(arr1(&[0.4, 0.8]).into_dyn())).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.6).abs() < 1e-12);
        assert_eq!(empty_rows(&params.shape_matrix().unwrap()), vec![0]);
        let sel = PoolingParams {
            config: params.config.with_normalization(Normalization::SelectedWeight),
            ..params
        };
        let y = sel.pool(&Tensor::constant(arr1(&[0.4, 0.8]).into_dyn())).unwrap();
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn selected_weight_normalization_is_a_power_mean() {
        let params = PoolingParams {
            shape_logits: arr2(&[[0.9, 0.1, 0.9, 0.1]]),
            exponent_logits: arr1(&[0.0]),
            config: PoolConfig::new(0.2, Mode::Evaluation).with_normalization(Normalization::SelectedWeight),
        };
        let y = params.pool(&Tensor::constant(arr1(&[1., 2., 3., 4.]).into_dyn())).unwrap();
        assert!((y.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn window_examples() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let geom = WindowGeometry::for_input(2, 2, (2, 2), (2, 2)).unwrap();
        let mut params = init_windowed_params(geom, None, 0.2, 0).unwrap();
        params.config.mode = Mode::Evaluation;
        params.shape_logits.fill(0.9);
        let y = params.pool(&img).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.item() - 2.5).abs() < 1e-12);

        params.shape_logits = arr2(&[[0.9, 0.1, 0.9, 0.1]]).into_dyn();
        params.exponent_logits.fill(1000f64.ln());
        let y = params.pool(&img).unwrap().item();
        let expected = oracle(&[1., 3.], &[1., 1.], 1000.0, 4.0);
        assert!((y - expected).abs() < 1e-12);
        assert!((y - 2.99584).abs() < 1e-5);
    }

    #[test]
    fn shared_parameters_apply_to_every_channel() {
        let mut data = vec![0.3; 16];
        data[8..].iter_mut().for_each(|v| *v = 0.7);
        let img = Tensor::from_vec(&[2, 2, 4], data).unwrap();
        let geom = WindowGeometry::for_input(2, 4, (2, 2), (2, 2)).unwrap();
        let mut params = init_windowed_params(geom, None, 0.2, 9).unwrap();
        params.exponent_logits = arr1(&[0.3, 1.2]).into_dyn();
        let y = params.pool(&img).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        // Constant channels give a per-window factor that is identical across channels.
        let r0 = y.data()[0] / 0.3;
        let r1 = y.data()[2] / 0.7;
        assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn per_channel_parameters_are_supported() {
        let img = Tensor::from_vec(&[2, 2, 2], vec![1., 2., 3., 4., 1., 2., 3., 4.]).unwrap();
        let geom = WindowGeometry::for_input(2, 2, (2, 2), (2, 2)).unwrap();
        let mut params = init_windowed_params(geom, Some(2), 0.2, 0).unwrap();
        params.config.mode = Mode::Evaluation;
        params.shape_logits = Array::from_shape_vec(IxDyn(&[2, 1, 4]), vec![0.9, 0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1]).unwrap();
        let y = params.pool(&img).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12 && (y.data()[1] - 0.25).abs() < 1e-12);
        assert!(params.window_params(0, 0).is_none());
    }

    #[test]
    fn geometry_errors() {
        assert!(WindowGeometry::for_input(5, 4, (2, 2), (2, 2)).is_err());
        let img = Tensor::from_vec(&[1, 3, 3], vec![1.0; 9]).unwrap();
        assert!(max_pool(&img, (2, 2), (2, 2)).is_err());
        assert!(avg_pool(&img, (2, 2), (2, 2)).is_err());
    }

    #[test]
    fn baseline_examples() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(max_pool(&img, (2, 2), (2, 2)).unwrap().item(), 4.0);
        assert_eq!(avg_pool(&img, (2, 2), (2, 2)).unwrap().item(), 2.5);
        let flat = Tensor::from_vec(&[2, 4, 4], vec![0.37; 32]).unwrap();
        for y in [max_pool(&flat, (2, 2), (2, 2)).unwrap(), avg_pool(&flat, (2, 2), (2, 2)).unwrap()] {
            assert_eq!(y.shape(), &[2, 2, 2]);
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn avg_pool_equals_all_ones_unit_exponent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::constant(Array::from_shape_fn(IxDyn(&[3, 6, 4]), |_| rng.gen_range(0.01..1.0)));
        let geom = WindowGeometry::for_input(6, 4, (2, 2), (2, 2)).unwrap();
        let mut params = init_windowed_params(geom, None, 0.2, 0).unwrap();
        params.config.mode = Mode::Evaluation;
        params.shape_logits.fill(1.0);
        let a = params.pool(&img).unwrap();
        let b = avg_pool(&img, (2, 2), (2, 2)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * y);
        }
    }

    #[test]
    fn init_examples() {
        let a = init_pooling_params(30, 60, 0.2, 7).unwrap();
        let b = init_pooling_params(30, 60, 0.2, 7).unwrap();
        assert_eq!(a.shape_logits, b.shape_logits);
        assert!(a.exponents().iter().all(|&p| p == 1.0));
        let w = a.shape_matrix().unwrap();
        let (lo, hi) = (1.0 / (1.0 + 0.5f64.exp()), 1.0 / (1.0 + (-0.5f64).exp()));
        assert!((lo - 0.3775).abs() < 1e-4 && (hi - 0.6225).abs() < 1e-4);
        assert!(w.iter().all(|&v| v > lo && v < hi));
        assert!(init_pooling_params(1, 1, -1.0, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (i, j) = (2, 4);
            let x = Array::from_shape_fn(IxDyn(&[3, j]), |_| rng.gen_range(0.1..1.0));
            let wl = Array::from_shape_fn(IxDyn(&[i, j]), |_| rng.gen_range(0.3..0.7));
            let pl = Array::from_shape_fn(IxDyn(&[i]), |_| rng.gen_range(-0.5..1.5));
            let weights = Tensor::constant(Array::from_shape_fn(IxDyn(&[3, i]), |_| rng.gen_range(-1.0..1.0)));
            let norm = if seed % 2 == 0 { Normalization::InputSize } else { Normalization::SelectedWeight };
            let cfg = PoolConfig::new(0.2, Mode::MetaTraining).with_normalization(norm);
            let (xc, wc, pc) = (Tensor::constant(x.clone()), Tensor::constant(wl.clone()), Tensor::constant(pl.clone()));
            let f = |xx: &Tensor, ww: &Tensor, pp: &Tensor| pool_dense(xx, ww, pp, &cfg).unwrap().mul(&weights).unwrap().sum();
            let ex = finite_difference_check(|v| f(v, &wc, &pc), &x, 1e-6).unwrap();
            let ew = finite_difference_check(|v| f(&xc, v, &pc), &wl, 1e-6).unwrap();
            let ep = finite_difference_check(|v| f(&xc, &wc, v), &pl, 1e-6).unwrap();
            assert!(ex.max(ew).max(ep) <= 1e-4, "seed {seed}: {ex} {ew} {ep}");
        }
    }

    #[test]
    fn windowed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = WindowGeometry::for_input(4, 4, (2, 2), (2, 2)).unwrap();
        let x = Array::from_shape_fn(IxDyn(&[2, 2, 4, 4]), |_| rng.gen_range(0.1..1.0));
        let wl = Array::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(0.3..0.7));
        let pl = Array::from_shape_fn(IxDyn(&[4]), |_| rng.gen_range(-0.5..1.5));
        let cfg = PoolConfig::new(0.2, Mode::MetaTraining);
        let (xc, wc, pc) = (Tensor::constant(x.clone()), Tensor::constant(wl.clone()), Tensor::constant(pl.clone()));
        let f = |xx: &Tensor, ww: &Tensor, pp: &Tensor| pool_windows(xx, &geom, ww, pp, &cfg).unwrap().square().unwrap().sum();
        assert!(finite_difference_check(|v| f(v, &wc, &pc), &x, 1e-6).unwrap() <= 1e-4);
        assert!(finite_difference_check(|v| f(&xc, v, &pc), &wl, 1e-6).unwrap() <= 1e-4);
        assert!(finite_difference_check(|v| f(&xc, &wc, v), &pl, 1e-6).unwrap() <= 1e-4);
    }

    fn binary_params(w: &[bool], p: f64) -> PoolingParams {
        let row: Vec<f64> = w.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
        PoolingParams {
            shape_logits: Array2::from_shape_vec((1, w.len()), row).unwrap(),
            exponent_logits: arr1(&[p.ln()]),
            config: PoolConfig::new(0.2, Mode::Evaluation),
        }
    }

    proptest! {
        #[test]
        fn average_identity(x in prop::collection::vec(0.01f64..10.0, 1..12)) {
            let params = binary_params(&vec![true; x.len()], 1.0);
            let y = params.pool(&Tensor::constant(arr1(&x).into_dyn())).unwrap().item();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            prop_assert!((y - mean).abs() <= 1e-12 * mean);
        }

        #[test]
        fn max_limit(pairs in prop::collection::vec((0.1f64..1.0, any::<bool>()), 1..12), pick in any::<prop::sample::Index>()) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut w: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let k = pick.index(w.len());
            w[k] = true;
            let y = binary_params(&w, 1e4).pool(&Tensor::constant(arr1(&x).into_dyn())).unwrap().item();
            let m = x.iter().zip(&w).filter(|(_, &s)| s).map(|(&v, _)| v).fold(0.0, f64::max);
            prop_assert!((y - m).abs() <= 1e-3 * m);
        }

        #[test]
        fn monotone_in_selected_inputs(x in prop::collection::vec(0.05f64..1.0, 2..8), k in any::<prop::sample::Index>(), pl in -1.0f64..3.0, bump in 0.01f64..0.5) {
            let j = k.index(x.len());
            let params = PoolingParams {
                shape_logits: Array2::from_elem((1, x.len()), 0.55),
                exponent_logits: arr1(&[pl]),
                config: PoolConfig::new(0.2, Mode::MetaTraining),
            };
            let before = params.pool(&Tensor::constant(arr1(&x).into_dyn())).unwrap().item();
            let mut y = x.clone();
            y[j] += bump;
            let after = params.pool(&Tensor::constant(arr1(&y).into_dyn())).unwrap().item();
            prop_assert!(after > before);
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..1000, perm_seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = PoolingParams {
                shape_logits: Array2::from_shape_fn((3, 6), |_| rng.gen_range(0.0..1.0)),
                exponent_logits: Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..3.0)),
                config: PoolConfig::new(0.2, Mode::MetaTraining),
            };
            let x = Array1::from_shape_fn(6, |_| rng.gen_range(0.01..1.0));
            let mut order: Vec<usize> = (0..6).collect();
            let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..6).rev() {
                order.swap(i, prng.gen_range(0..=i));
            }
            let permuted = PoolingParams {
                shape_logits: params.shape_logits.select(Axis(1), &order),
                ..params.clone()
            };
            let a = params.pool(&Tensor::constant(x.clone().into_dyn())).unwrap();
            let b = permuted.pool(&Tensor::constant(x.select(Axis(0), &order).into_dyn())).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }

        #[test]
        fn temperature_limit(offset in 0.05f64..3.0, below in any::<bool>()) {
            let logit = if below { 0.5 - offset } else { 0.5 + offset };
            let t = Tensor::constant(arr1(&[logit]).into_dyn());
            let soft = transform_shape(&t, 1e-3, Mode::MetaTraining).unwrap().item();
            let hard = transform_shape(&t, 1e-3, Mode::Evaluation).unwrap().item();
            prop_assert!((soft - hard).abs() <= 1e-10);
        }
    }
}
