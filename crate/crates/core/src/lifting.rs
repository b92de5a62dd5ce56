//! Measurement windows and the lifted output map.
//!
//! A [`SampleBuffer`] holds the last `N` accepted output/input samples with
//! their time stamps plus the full-rate control history spanning the window,
//! so integration between samples sees every input segment even when the
//! window is downsampled. [`lift`] chains the model flow through the window
//! stamps and evaluates the output map at each one; the window cost compares
//! that prediction row by row against the stored measurements under a
//! per-row weight matrix.

use crate::dynamics::{flow, ContinuousModel, ControlSignal, DynamicsError, IntegratorConfig};
use crate::fd;
use crate::filters::{BankState, FilterBank};
use crate::metrics::Counters;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("output row has length {got}, buffer rows are {expected} wide")]
    RowWidth { got: usize, expected: usize },
    #[error("input row has length {got}, buffer inputs are {expected} wide")]
    InputWidth { got: usize, expected: usize },
    #[error("sample stamps must be strictly increasing: {prev} then {next}")]
    NonIncreasingStamp { prev: f64, next: f64 },
    #[error("control history rejected the sample: {0}")]
    Control(#[from] DynamicsError),
    #[error("buffer rebuild needs exactly {expected} rows, got {got}")]
    RebuildCount { got: usize, expected: usize },
    #[error(
        "rebuild history is not grid-aligned: stamps {prev} and {next} are {got} apart, expected {expected}"
    )]
    MisalignedHistory { prev: f64, next: f64, got: f64, expected: f64 },
}

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("buffer holds {fill} of {capacity} samples; lifting needs a full window")]
    BufferNotFull { fill: usize, capacity: usize },
    #[error("model output width {model_p} does not match buffer row width {row_width}")]
    OutputWidth { model_p: usize, row_width: usize },
    #[error("window-start filter state is missing or has wrong arity")]
    MissingFilterState,
    #[error("no control history recorded before the window start")]
    NoControls,
    #[error("integration failed while chaining to row {row}: {source}")]
    Integration { row: usize, source: DynamicsError },
    #[error("weight set has {weights} rows of width {weight_width}, window has {rows} rows of width {row_width}")]
    WeightShape { weights: usize, weight_width: usize, rows: usize, row_width: usize },
}

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("weight set must contain at least one matrix")]
    Empty,
    #[error("weight matrix {index} is {rows}x{cols}, expected square")]
    NotSquare { index: usize, rows: usize, cols: usize },
    #[error("weight matrix {index} has width {got}, expected {expected}")]
    MixedWidth { index: usize, got: usize, expected: usize },
    #[error("weight matrix {index} is not symmetric")]
    NotSymmetric { index: usize },
    #[error("weight matrix {index} is not positive definite (eigenvalue {eigenvalue})")]
    NotPositiveDefinite { index: usize, eigenvalue: f64 },
}

/// Sliding window of the last `capacity` accepted samples. Rows are raw
/// outputs, or raw-plus-filtered rows when a filter bank is in play; each row
/// can carry the filter bank state from just before that row's measurement
/// was absorbed, which is what a filtered lift replays from.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    capacity: usize,
    downsample: usize,
    base_period: f64,
    y_width: usize,
    u_width: usize,
    stamps: Vec<f64>,
    ys: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    filter_pre: Vec<BankState>,
    controls: Option<ControlSignal>,
}

impl SampleBuffer {
    pub fn new(
        capacity: usize,
        downsample: usize,
        base_period: f64,
        y_width: usize,
        u_width: usize,
    ) -> Self {
        assert!(capacity >= 1, "window length must be >= 1");
        assert!(downsample >= 1, "downsample factor must be >= 1");
        assert!(base_period > 0.0, "base period must be positive");
        SampleBuffer {
            capacity,
            downsample,
            base_period,
            y_width,
            u_width,
            stamps: Vec::with_capacity(capacity),
            ys: Vec::with_capacity(capacity),
            us: Vec::with_capacity(capacity),
            filter_pre: Vec::with_capacity(capacity),
            controls: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn base_period(&self) -> f64 {
        self.base_period
    }

    pub fn grid_period(&self) -> f64 {
        self.base_period * self.downsample as f64
    }

    pub fn fill(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_full(&self) -> bool {
        self.stamps.len() == self.capacity
    }

    pub fn y_width(&self) -> usize {
        self.y_width
    }

    pub fn u_width(&self) -> usize {
        self.u_width
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn y_rows(&self) -> &[DVector<f64>] {
        &self.ys
    }

    pub fn u_rows(&self) -> &[DVector<f64>] {
        &self.us
    }

    pub fn window_start_filter_state(&self) -> Option<&BankState> {
        self.filter_pre.first()
    }

    pub fn controls(&self) -> Option<&ControlSignal> {
        self.controls.as_ref()
    }

    /// Record a full-rate control sample so integration between window stamps
    /// sees every input segment. Re-recording an instant is a no-op.
    pub fn record_control(&mut self, t: f64, u: DVector<f64>) -> Result<(), BufferError> {
        if u.len() != self.u_width {
            return Err(BufferError::InputWidth { got: u.len(), expected: self.u_width });
        }
        match &mut self.controls {
            Some(c) => c.record(t, u)?,
            None => self.controls = Some(ControlSignal::constant(t, u, self.base_period)),
        }
        Ok(())
    }

    /// Accept a sample without filter bookkeeping (raw windows).
    pub fn push(&mut self, y: DVector<f64>, u: DVector<f64>, t: f64) -> Result<(), BufferError> {
        self.push_with_filter_state(y, u, t, Vec::new())
    }

    /// Accept a sample, shifting the oldest row out once the window is full.
    /// `filter_pre` is the filter bank state just before this measurement was
    /// absorbed; raw windows pass an empty state.
    pub fn push_with_filter_state(
        &mut self,
        y: DVector<f64>,
        u: DVector<f64>,
        t: f64,
        filter_pre: BankState,
    ) -> Result<(), BufferError> {
        if y.len() != self.y_width {
            return Err(BufferError::RowWidth { got: y.len(), expected: self.y_width });
        }
        if u.len() != self.u_width {
            return Err(BufferError::InputWidth { got: u.len(), expected: self.u_width });
        }
        if let Some(&last) = self.stamps.last() {
            if t <= last {
                return Err(BufferError::NonIncreasingStamp { prev: last, next: t });
            }
        }
        self.record_control(t, u.clone())?;
        if self.is_full() {
            self.stamps.remove(0);
            self.ys.remove(0);
            self.us.remove(0);
            self.filter_pre.remove(0);
        }
        self.stamps.push(t);
        self.ys.push(y);
        self.us.push(u);
        self.filter_pre.push(filter_pre);
        Ok(())
    }

    /// Replace the whole window with consecutive grid samples (used when the
    /// accepted-sample spacing limit forces a fresh start). The rows must be
    /// exactly one window, stamped one grid period apart.
    pub fn rebuild(
        &mut self,
        rows: Vec<(f64, DVector<f64>, DVector<f64>, BankState)>,
    ) -> Result<(), BufferError> {
        if rows.len() != self.capacity {
            return Err(BufferError::RebuildCount { got: rows.len(), expected: self.capacity });
        }
        let grid = self.grid_period();
        for pair in rows.windows(2) {
            let (prev, next) = (pair[0].0, pair[1].0);
            let gap = next - prev;
            if (gap - grid).abs() > grid * 1e-6 {
                return Err(BufferError::MisalignedHistory { prev, next, got: gap, expected: grid });
            }
        }
        for (_, y, u, _) in &rows {
            if y.len() != self.y_width {
                return Err(BufferError::RowWidth { got: y.len(), expected: self.y_width });
            }
            if u.len() != self.u_width {
                return Err(BufferError::InputWidth { got: u.len(), expected: self.u_width });
            }
        }
        self.stamps.clear();
        self.ys.clear();
        self.us.clear();
        self.filter_pre.clear();
        for (t, y, u, pre) in rows {
            self.stamps.push(t);
            self.ys.push(y);
            self.us.push(u);
            self.filter_pre.push(pre);
        }
        Ok(())
    }

    /// Drop control history that no longer affects integrations from `t` on.
    pub fn prune_controls_before(&mut self, t: f64) {
        if let Some(c) = &mut self.controls {
            c.prune_before(t);
        }
    }
}

/// Window prediction produced by lifting a window-start state: one output row
/// per buffer stamp, plus the chained states at those stamps and the state
/// the lift started from.
#[derive(Clone, Debug)]
pub struct LiftedOutput {
    pub rows: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub start: DVector<f64>,
}

impl LiftedOutput {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }
}

/// Per-row symmetric positive definite weights, validated on construction.
/// The Cholesky factors are kept alongside so weighted residuals come cheap.
#[derive(Clone, Debug)]
pub struct WeightSet {
    mats: Vec<DMatrix<f64>>,
    sqrt_t: Vec<DMatrix<f64>>,
}

impl WeightSet {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self, WeightError> {
        if mats.is_empty() {
            return Err(WeightError::Empty);
        }
        let width = mats[0].nrows();
        let mut sqrt_t = Vec::with_capacity(mats.len());
        for (index, w) in mats.iter().enumerate() {
            if w.nrows() != w.ncols() {
                return Err(WeightError::NotSquare { index, rows: w.nrows(), cols: w.ncols() });
            }
            if w.nrows() != width {
                return Err(WeightError::MixedWidth { index, got: w.nrows(), expected: width });
            }
            let scale = 1.0 + w.amax();
            if (w - w.transpose()).amax() > 1e-12 * scale {
                return Err(WeightError::NotSymmetric { index });
            }
            let eig = w.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            if min_eig <= 1e-12 {
                return Err(WeightError::NotPositiveDefinite { index, eigenvalue: min_eig });
            }
            let chol = w
                .clone()
                .cholesky()
                .expect("positive definite matrix must admit a Cholesky factor");
            sqrt_t.push(chol.l().transpose());
        }
        Ok(WeightSet { mats, sqrt_t })
    }

    pub fn identity(rows: usize, width: usize) -> Self {
        WeightSet {
            mats: (0..rows).map(|_| DMatrix::identity(width, width)).collect(),
            sqrt_t: (0..rows).map(|_| DMatrix::identity(width, width)).collect(),
        }
    }

    /// Identity on the raw channel, `filtered_weight` on every filtered one.
    pub fn filtered_identity(rows: usize, bank_len: usize, filtered_weight: f64) -> Result<Self, WeightError> {
        let width = 1 + bank_len;
        let mut diag = DMatrix::identity(width, width);
        for i in 1..width {
            diag[(i, i)] = filtered_weight;
        }
        WeightSet::new((0..rows).map(|_| diag.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn width(&self) -> usize {
        self.mats[0].nrows()
    }

    pub fn mat(&self, j: usize) -> &DMatrix<f64> {
        &self.mats[j]
    }

    /// Upper-triangular factor `U` with `W = U' U`; `|U r|^2 = r' W r`.
    pub fn sqrt_t(&self, j: usize) -> &DMatrix<f64> {
        &self.sqrt_t[j]
    }
}

fn chain_states(
    model: &ContinuousModel,
    start: &DVector<f64>,
    buf: &SampleBuffer,
    cfg: &IntegratorConfig,
    counters: &Counters,
) -> Result<Vec<DVector<f64>>, LiftError> {
    if !buf.is_full() {
        return Err(LiftError::BufferNotFull { fill: buf.fill(), capacity: buf.capacity() });
    }
    let controls = buf.controls().ok_or(LiftError::NoControls)?;
    let stamps = buf.stamps();
    let mut states = Vec::with_capacity(stamps.len());
    let mut state = start.clone();
    states.push(state.clone());
    for j in 1..stamps.len() {
        state = flow(model, &state, controls, stamps[j - 1], stamps[j], cfg, counters)
            .map_err(|source| LiftError::Integration { row: j, source })?;
        states.push(state.clone());
    }
    Ok(states)
}

/// Predict the raw output rows a window would show if the state at its first
/// stamp were `start`: chain the flow stamp to stamp, reading the output map
/// at each one. Costs `N - 1` integrations, none for a single-sample window.
pub fn lift(
    model: &ContinuousModel,
    start: &DVector<f64>,
    buf: &SampleBuffer,
    cfg: &IntegratorConfig,
    counters: &Counters,
) -> Result<LiftedOutput, LiftError> {
    if model.output_dim() != buf.y_width() {
        return Err(LiftError::OutputWidth { model_p: model.output_dim(), row_width: buf.y_width() });
    }
    let states = chain_states(model, start, buf, cfg, counters)?;
    let rows = states
        .iter()
        .zip(buf.u_rows())
        .map(|(x, u)| model.output(x, u))
        .collect();
    Ok(LiftedOutput { rows, states, start: start.clone() })
}

/// Filtered variant: predicts raw outputs, then replays the filter bank over
/// them from the window-start filter state, producing `[raw, filtered...]`
/// rows that line up with the buffer's augmented measurement rows.
pub fn lift_filtered(
    model: &ContinuousModel,
    start: &DVector<f64>,
    buf: &SampleBuffer,
    cfg: &IntegratorConfig,
    bank: &FilterBank,
    counters: &Counters,
) -> Result<LiftedOutput, LiftError> {
    if bank.is_empty() {
        return lift(model, start, buf, cfg, counters);
    }
    if model.output_dim() != 1 || buf.y_width() != bank.row_width() {
        return Err(LiftError::OutputWidth { model_p: model.output_dim(), row_width: buf.y_width() });
    }
    let pre = buf
        .window_start_filter_state()
        .filter(|s| s.len() == bank.len())
        .ok_or(LiftError::MissingFilterState)?
        .clone();
    let states = chain_states(model, start, buf, cfg, counters)?;
    let raw: Vec<f64> = states
        .iter()
        .zip(buf.u_rows())
        .map(|(x, u)| model.output(x, u)[0])
        .collect();
    let (_, filtered) = bank.replay(&pre, &raw);
    let rows = raw
        .iter()
        .zip(&filtered)
        .map(|(y, fs)| {
            let mut row = Vec::with_capacity(1 + fs.len());
            row.push(*y);
            row.extend_from_slice(fs);
            DVector::from_vec(row)
        })
        .collect();
    Ok(LiftedOutput { rows, states, start: start.clone() })
}

/// Weighted window mismatch: the sum over rows of `r' W_j r` with
/// `r = measured - predicted`. Nonnegative, zero exactly when the prediction
/// reproduces every stored row.
pub fn cost(buf: &SampleBuffer, predicted: &LiftedOutput, weights: &WeightSet) -> Result<f64, LiftError> {
    let rows = buf.y_rows();
    if predicted.rows.len() != rows.len()
        || weights.len() != rows.len()
        || weights.width() != buf.y_width()
        || predicted.width() != buf.y_width()
    {
        return Err(LiftError::WeightShape {
            weights: weights.len(),
            weight_width: weights.width(),
            rows: rows.len(),
            row_width: buf.y_width(),
        });
    }
    let mut total = 0.0;
    for (j, (y, h)) in rows.iter().zip(&predicted.rows).enumerate() {
        let r = y - h;
        total += (weights.mat(j) * &r).dot(&r);
    }
    Ok(total)
}

/// Central finite-difference gradient of the window cost with respect to the
/// window-start state. Component `i` is perturbed by `fd_step * (1 + |z_i|)`;
/// the stencil spends `2 n` lifts.
pub fn cost_gradient(
    model: &ContinuousModel,
    start: &DVector<f64>,
    buf: &SampleBuffer,
    weights: &WeightSet,
    cfg: &IntegratorConfig,
    fd_step: f64,
    counters: &Counters,
) -> Result<DVector<f64>, LiftError> {
    let mut eval = |z: &DVector<f64>| -> Result<f64, LiftError> {
        cost(buf, &lift(model, z, buf, cfg, counters)?, weights)
    };
    fd::central_gradient(&mut eval, start, fd_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_model, simulate, ModelKind, ModelParams, ParamValue};
    use crate::metrics::Counters;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn rotation_model() -> ContinuousModel {
        // x' = [x2, -x1], y = x1: closed-form solution is a rotation, which
        // gives an oracle for the lifted rows that never touches the lift.
        ContinuousModel::new(
            2,
            1,
            1,
            Box::new(|x, _| dvector![x[1], -x[0]]),
            Box::new(|x, _| dvector![x[0]]),
        )
    }

    fn static_model() -> ContinuousModel {
        // x' = 0, y = x: rows repeat the window-start state.
        ContinuousModel::new(
            1,
            1,
            1,
            Box::new(|_, _| dvector![0.0]),
            Box::new(|x, _| dvector![x[0]]),
        )
    }

    fn filled_buffer(n: usize, ts: f64) -> SampleBuffer {
        let mut buf = SampleBuffer::new(n, 1, ts, 1, 1);
        for j in 0..n {
            buf.push(dvector![j as f64], dvector![0.0], j as f64 * ts).unwrap();
        }
        buf
    }

    #[test]
    fn push_shifts_out_the_oldest_row() {
        let mut buf = SampleBuffer::new(3, 1, 1.0, 1, 1);
        for (t, v) in [(0.0, 10.0), (1.0, 11.0), (2.0, 12.0)] {
            buf.push(dvector![v], dvector![0.0], t).unwrap();
        }
        assert!(buf.is_full());
        buf.push(dvector![13.0], dvector![0.0], 3.0).unwrap();
        assert_eq!(buf.stamps(), &[1.0, 2.0, 3.0]);
        let vals: Vec<f64> = buf.y_rows().iter().map(|r| r[0]).collect();
        assert_eq!(vals, vec![11.0, 12.0, 13.0]);
    }

    #[test]
    fn push_validates_widths_and_stamp_order() {
        let mut buf = SampleBuffer::new(2, 1, 1.0, 2, 1);
        assert!(matches!(
            buf.push(dvector![0.0], dvector![0.0], 0.0),
            Err(BufferError::RowWidth { .. })
        ));
        buf.push(dvector![0.0, 0.0], dvector![0.0], 0.0).unwrap();
        assert!(matches!(
            buf.push(dvector![1.0, 1.0], dvector![0.0, 0.0], 1.0),
            Err(BufferError::InputWidth { .. })
        ));
        assert!(matches!(
            buf.push(dvector![1.0, 1.0], dvector![0.0], 0.0),
            Err(BufferError::NonIncreasingStamp { .. })
        ));
    }

    #[test]
    fn lift_rows_match_rotation_oracle() {
        let model = rotation_model();
        let ts = 0.2;
        let n = 4;
        let mut buf = SampleBuffer::new(n, 1, ts, 1, 1);
        for j in 0..n {
            buf.push(dvector![0.0], dvector![0.0], j as f64 * ts).unwrap();
        }
        let start = dvector![0.8, -0.5];
        let counters = Counters::new();
        let lifted = lift(&model, &start, &buf, &IntegratorConfig::rk4(50), &counters).unwrap();
        for (j, row) in lifted.rows.iter().enumerate() {
            let t = j as f64 * ts;
            // Rotation closed form: x1(t) = x1 cos t + x2 sin t.
            let expected = start[0] * t.cos() + start[1] * t.sin();
            assert_relative_eq!(row[0], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_row_window_lifts_without_integrating() {
        let model = rotation_model();
        let mut buf = SampleBuffer::new(1, 1, 0.1, 1, 1);
        buf.push(dvector![0.0], dvector![0.0], 0.0).unwrap();
        let counters = Counters::new();
        let lifted =
            lift(&model, &dvector![2.0, 1.0], &buf, &IntegratorConfig::rk4(10), &counters).unwrap();
        assert_eq!(lifted.rows.len(), 1);
        assert_eq!(lifted.rows[0][0], 2.0);
        assert_eq!(counters.snapshot().integ_total(), 0);
    }

    #[test]
    fn lift_requires_a_full_buffer() {
        let model = rotation_model();
        let mut buf = SampleBuffer::new(3, 1, 0.1, 1, 1);
        buf.push(dvector![0.0], dvector![0.0], 0.0).unwrap();
        let counters = Counters::new();
        let err = lift(&model, &dvector![0.0, 0.0], &buf, &IntegratorConfig::rk4(10), &counters)
            .unwrap_err();
        assert!(matches!(err, LiftError::BufferNotFull { fill: 1, capacity: 3 }));
    }

    #[test]
    fn lift_preserves_constant_state_components() {
        let mut params = ModelParams::new();
        for (k, v) in [("epsilon", 1.0), ("nu", 1.0), ("gamma1", 2.0), ("w_t", 0.5), ("s", 0.1), ("q", 1.0)] {
            params.insert(k.to_string(), ParamValue::Scalar(v));
        }
        let model = make_model(ModelKind::Runaway, &params).unwrap().model;
        let ts = 0.05;
        let mut buf = SampleBuffer::new(5, 1, ts, 1, 1);
        for j in 0..5 {
            buf.push(dvector![0.0], dvector![0.0], j as f64 * ts).unwrap();
        }
        let counters = Counters::new();
        let start = dvector![0.7, 0.05, 2.5];
        let lifted = lift(&model, &start, &buf, &IntegratorConfig::rk4(10), &counters).unwrap();
        for state in &lifted.states {
            assert_eq!(state[2].to_bits(), 2.5f64.to_bits());
        }
    }

    #[test]
    fn cost_single_row_hand_case() {
        let mut buf = SampleBuffer::new(1, 1, 1.0, 1, 1);
        buf.push(dvector![5.0], dvector![0.0], 0.0).unwrap();
        let predicted = LiftedOutput {
            rows: vec![dvector![3.0]],
            states: vec![dvector![3.0]],
            start: dvector![3.0],
        };
        let w = WeightSet::new(vec![DMatrix::from_element(1, 1, 3.0)]).unwrap();
        let c = cost(&buf, &predicted, &w).unwrap();
        assert_relative_eq!(c, 3.0 * 4.0, epsilon = 1e-14);
    }

    #[test]
    fn cost_vanishes_when_prediction_matches_window() {
        let model = rotation_model();
        let ts = 0.1;
        let u = ControlSignal::constant(0.0, dvector![0.0], ts);
        let counters = Counters::new();
        let truth = simulate(
            &model,
            &dvector![1.0, 0.3],
            &u,
            0.0,
            0.5,
            ts,
            &IntegratorConfig::rk4(8),
            &counters,
        )
        .unwrap();
        let n = truth.len();
        let mut buf = SampleBuffer::new(n, 1, ts, 1, 1);
        for j in 0..n {
            buf.push(truth.outputs[j].clone(), dvector![0.0], truth.times[j]).unwrap();
        }
        let lifted =
            lift(&model, &dvector![1.0, 0.3], &buf, &IntegratorConfig::rk4(8), &counters).unwrap();
        let w = WeightSet::identity(n, 1);
        let c = cost(&buf, &lifted, &w).unwrap();
        assert!(c >= 0.0);
        assert!(c < 1e-20, "cost at the generating state was {c}");
    }

    #[test]
    fn cost_gradient_matches_hand_derivative_on_static_window() {
        // Static model, rows y = [0, 2], identity weights: the window cost is
        // (0 - z)^2 + (2 - z)^2 = 2(z - 1)^2 + 2, so grad(0) = -4.
        let model = static_model();
        let mut buf = SampleBuffer::new(2, 1, 1.0, 1, 1);
        buf.push(dvector![0.0], dvector![0.0], 0.0).unwrap();
        buf.push(dvector![2.0], dvector![0.0], 1.0).unwrap();
        let w = WeightSet::identity(2, 1);
        let counters = Counters::new();
        let g = cost_gradient(
            &model,
            &dvector![0.0],
            &buf,
            &w,
            &IntegratorConfig::rk4(4),
            1e-6,
            &counters,
        )
        .unwrap();
        assert!((g[0] - (-4.0)).abs() < 1e-6, "gradient {g}");
    }

    #[test]
    fn cost_gradient_spends_two_lifts_per_component() {
        let model = rotation_model();
        let n = 3;
        let ts = 0.1;
        let buf = {
            let mut b = SampleBuffer::new(n, 1, ts, 1, 1);
            for j in 0..n {
                b.push(dvector![0.1 * j as f64], dvector![0.0], j as f64 * ts).unwrap();
            }
            b
        };
        let w = WeightSet::identity(n, 1);
        let counters = Counters::new();
        let substeps = 7;
        cost_gradient(
            &model,
            &dvector![0.5, 0.5],
            &buf,
            &w,
            &IntegratorConfig::rk4(substeps),
            1e-6,
            &counters,
        )
        .unwrap();
        // 2 state components, two lifts each, (n-1) spans of one base period.
        let expected = 2 * 2 * (n as u64 - 1) * substeps as u64;
        assert_eq!(counters.snapshot().integ_total(), expected);
    }

    #[test]
    fn gradient_vanishes_at_least_squares_minimizer() {
        // Static scalar model: the cost is sum w_j (y_j - z)^2 and the
        // minimizer is the weighted mean, computable by hand.
        let model = static_model();
        let ys = [1.0, 4.0, 2.5];
        let ws = [2.0, 1.0, 3.0];
        let mut buf = SampleBuffer::new(3, 1, 1.0, 1, 1);
        for (j, y) in ys.iter().enumerate() {
            buf.push(dvector![*y], dvector![0.0], j as f64).unwrap();
        }
        let w = WeightSet::new(ws.iter().map(|w| DMatrix::from_element(1, 1, *w)).collect())
            .unwrap();
        let minimizer = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / ws.iter().sum::<f64>();
        let counters = Counters::new();
        let g = cost_gradient(
            &model,
            &dvector![minimizer],
            &buf,
            &w,
            &IntegratorConfig::rk4(2),
            1e-4,
            &counters,
        )
        .unwrap();
        assert!(g.norm() < 1e-6, "gradient at minimizer: {g}");
    }

    #[test]
    fn filtered_lift_reproduces_recorded_filter_channel_exactly() {
        use crate::filters::{DiscreteFilter, FilterKind};
        let model = rotation_model();
        let ts = 0.1;
        // Downsample 1: the estimator-side spans match the generator's spans
        // bit for bit, so the filtered channel must too.
        let bank = FilterBank::new(vec![
            DiscreteFilter::new(FilterKind::DirtyDerivative { smoothing: 0.5 }, ts).unwrap(),
            DiscreteFilter::new(FilterKind::LossyIntegrator { leak: 0.95 }, ts).unwrap(),
        ]);
        let counters = Counters::new();
        let u = ControlSignal::constant(0.0, dvector![0.0], ts);
        let x0 = dvector![1.0, 0.0];
        let truth = simulate(&model, &x0, &u, 0.0, 0.6, ts, &IntegratorConfig::rk4(6), &counters)
            .unwrap();
        let n = truth.len();
        let mut buf = SampleBuffer::new(n, 1, ts, bank.row_width(), 1);
        let mut state = bank.initial_state();
        for j in 0..n {
            let pre = state.clone();
            let y = truth.outputs[j][0];
            let (next, outs) = bank.step(&state, y);
            state = next;
            let mut row = vec![y];
            row.extend_from_slice(&outs);
            buf.push_with_filter_state(DVector::from_vec(row), dvector![0.0], truth.times[j], pre)
                .unwrap();
        }
        let lifted =
            lift_filtered(&model, &x0, &buf, &IntegratorConfig::rk4(6), &bank, &counters).unwrap();
        for (got, want) in lifted.rows.iter().zip(buf.y_rows()) {
            for (a, b) in got.iter().zip(want.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let w = WeightSet::identity(n, bank.row_width());
        assert_eq!(cost(&buf, &lifted, &w).unwrap(), 0.0);
    }

    #[test]
    fn filtered_lift_with_empty_bank_is_the_raw_lift() {
        let model = rotation_model();
        let buf = filled_buffer(3, 0.1);
        let counters = Counters::new();
        let bank = FilterBank::empty();
        let a = lift(&model, &dvector![1.0, 1.0], &buf, &IntegratorConfig::rk4(5), &counters)
            .unwrap();
        let b = lift_filtered(&model, &dvector![1.0, 1.0], &buf, &IntegratorConfig::rk4(5), &bank, &counters)
            .unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn weight_validation_rejects_bad_matrices() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(
            WeightSet::new(vec![asym]),
            Err(WeightError::NotSymmetric { .. })
        ));
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            WeightSet::new(vec![singular]),
            Err(WeightError::NotPositiveDefinite { .. })
        ));
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        assert!(WeightSet::new(vec![ok]).is_ok());
    }

    #[test]
    fn rebuild_replaces_rows_and_checks_grid_alignment() {
        let mut buf = filled_buffer(3, 1.0);
        let rows = vec![
            (10.0, dvector![1.0], dvector![0.0], Vec::new()),
            (11.0, dvector![2.0], dvector![0.0], Vec::new()),
            (12.0, dvector![3.0], dvector![0.0], Vec::new()),
        ];
        buf.rebuild(rows).unwrap();
        assert_eq!(buf.stamps(), &[10.0, 11.0, 12.0]);
        let bad = vec![
            (20.0, dvector![1.0], dvector![0.0], Vec::new()),
            (21.0, dvector![2.0], dvector![0.0], Vec::new()),
            (23.0, dvector![3.0], dvector![0.0], Vec::new()),
        ];
        assert!(matches!(buf.rebuild(bad), Err(BufferError::MisalignedHistory { .. })));
        let short = vec![(0.0, dvector![1.0], dvector![0.0], Vec::new())];
        assert!(matches!(buf.rebuild(short), Err(BufferError::RebuildCount { .. })));
    }

    proptest! {
        /// The window cost is a sum over rows, so any simultaneous
        /// permutation of measured rows, predicted rows, and weights leaves
        /// it unchanged up to summation roundoff.
        #[test]
        fn cost_is_permutation_invariant(
            vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.1f64..4.0), 2..8),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = vals.len();
            let build = |order: &[usize]| {
                let mut buf = SampleBuffer::new(n, 1, 1.0, 1, 1);
                let mut rows = Vec::new();
                let mut mats = Vec::new();
                for (slot, &idx) in order.iter().enumerate() {
                    let (y, h, w) = vals[idx];
                    buf.push(dvector![y], dvector![0.0], slot as f64).unwrap();
                    rows.push(dvector![h]);
                    mats.push(DMatrix::from_element(1, 1, w));
                }
                let predicted = LiftedOutput {
                    rows,
                    states: vec![dvector![0.0]; n],
                    start: dvector![0.0],
                };
                cost(&buf, &predicted, &WeightSet::new(mats).unwrap()).unwrap()
            };
            let forward: Vec<usize> = (0..n).collect();
            let mut shuffled = forward.clone();
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let a = build(&forward);
            let b = build(&shuffled);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        /// Nonnegativity holds for every valid weight set and prediction.
        #[test]
        fn cost_is_nonnegative(
            ys in proptest::collection::vec(-10.0f64..10.0, 3),
            hs in proptest::collection::vec(-10.0f64..10.0, 3),
            w in 0.05f64..5.0,
        ) {
            let mut buf = SampleBuffer::new(3, 1, 1.0, 1, 1);
            for (j, y) in ys.iter().enumerate() {
                buf.push(dvector![*y], dvector![0.0], j as f64).unwrap();
            }
            let predicted = LiftedOutput {
                rows: hs.iter().map(|h| dvector![*h]).collect(),
                states: vec![dvector![0.0]; 3],
                start: dvector![0.0],
            };
            let ws = WeightSet::new(
                (0..3).map(|_| DMatrix::from_element(1, 1, w)).collect(),
            ).unwrap();
            prop_assert!(cost(&buf, &predicted, &ws).unwrap() >= 0.0);
        }
    }

    /// Sampling the cost along a line in state space and fitting a parabola
    /// leaves residuals at rounding level for a linear model, where the cost
    /// is exactly quadratic.
    #[test]
    fn lti_cost_is_quadratic_along_lines() {
        let model = rotation_model();
        let ts = 0.15;
        let n = 4;
        let counters = Counters::new();
        let u = ControlSignal::constant(0.0, dvector![0.0], ts);
        let truth = simulate(
            &model,
            &dvector![0.9, -0.2],
            &u,
            0.0,
            ts * (n as f64 - 1.0),
            ts,
            &IntegratorConfig::rk4(6),
            &counters,
        )
        .unwrap();
        let mut buf = SampleBuffer::new(n, 1, ts, 1, 1);
        for j in 0..n {
            buf.push(truth.outputs[j].clone(), dvector![0.0], truth.times[j]).unwrap();
        }
        let w = WeightSet::identity(n, 1);
        let base = dvector![0.4, 0.1];
        let dir = dvector![1.0, -0.7];
        let mut samples = Vec::new();
        for k in 0..5 {
            let s = k as f64 * 0.5;
            let z = &base + &dir * s;
            let c = cost(
                &buf,
                &lift(&model, &z, &buf, &IntegratorConfig::rk4(6), &counters).unwrap(),
                &w,
            )
            .unwrap();
            samples.push((s, c));
        }
        // Least-squares parabola through the five samples.
        let design = DMatrix::from_fn(5, 3, |r, c| samples[r].0.powi(c as i32));
        let rhs = DVector::from_fn(5, |r, _| samples[r].1);
        let coeffs = (design.transpose() * &design)
            .lu()
            .solve(&(design.transpose() * &rhs))
            .unwrap();
        let scale = rhs.amax().max(1.0);
        for (s, c) in &samples {
            let fit = coeffs[0] + coeffs[1] * s + coeffs[2] * s * s;
            assert!(
                (fit - c).abs() <= 1e-10 * scale,
                "parabola residual {} at s = {s}",
                (fit - c).abs()
            );
        }
    }
}
