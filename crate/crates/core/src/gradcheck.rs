//! Central finite-difference checks of tape gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::JointBatch;
use crate::masking::MaskCache;
use crate::model::{Mode, Model, ModelConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::training::{smoothed_loss, TrainError};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Relative errors use `max(|a|, |n|, DENOM_FLOOR)` as denominator so that
/// gradients that are zero up to rounding do not dominate.
pub const DENOM_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Slot name and flat index of the worst relative error.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: (String::new(), 0),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if rel > self.max_rel_err || self.checked == 0 {
            self.max_rel_err = rel;
            self.worst = (name.to_string(), index);
        }
        self.checked += 1;
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked={} max_rel_err={:.3e} max_abs_err={:.3e} worst={}[{}]",
            self.checked, self.max_rel_err, self.max_abs_err, self.worst.0, self.worst.1
        )
    }
}

/// Checks the gradient of a scalar function of `inputs` built on a tape.
/// Every input element is perturbed.
pub fn check_function<F>(inputs: &[Tensor], mut f: F) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&leaves)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };
    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for slot in 0..xs.len() {
        for i in 0..xs[slot].numel() {
            let orig = xs[slot].data()[i];
            xs[slot].data_mut()[i] = orig + STEP;
            let plus = eval(&xs)?;
            xs[slot].data_mut()[i] = orig - STEP;
            let minus = eval(&xs)?;
            xs[slot].data_mut()[i] = orig;
            report.record(&format!("input{slot}"), i, analytic[slot][i], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Evaluation-mode smoothed loss of `model` on `batch`.
pub fn model_loss(model: &Model, cache: &mut MaskCache, batch: &JointBatch, smoothing: f64) -> Result<f64, TrainError> {
    let masks = model.masks(cache, batch)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, &masks, &mut Mode::eval())?;
    let (loss, _) = smoothed_loss(&mut tape, fwd.logits, batch, smoothing)?;
    Ok(tape.value(loss)[0])
}

/// Compares tape gradients of the smoothed loss against central
/// differences for every parameter element.
pub fn check_model(model: &Model, batch: &JointBatch, smoothing: f64) -> Result<GradCheckReport, TrainError> {
    let mut m = model.clone();
    m.params.set_requires_grad(true);
    m.params.zero_grad();
    let mut cache = MaskCache::new();
    let masks = m.masks(&mut cache, batch)?;
    let mut tape = Tape::new();
    let fwd = m.forward(&mut tape, batch, &masks, &mut Mode::eval())?;
    let (loss, _) = smoothed_loss(&mut tape, fwd.logits, batch, smoothing)?;
    tape.backward(loss)?;
    m.accumulate_grads(&tape, &fwd.params)?;
    drop(tape);
    let analytic: Vec<Vec<f64>> = m
        .params
        .iter()
        .iter()
        .map(|t| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    m.params.set_requires_grad(false);

    let names = m.params.names();
    let mut report = GradCheckReport::new();
    for (slot, name) in names.iter().enumerate() {
        let n = m.params.iter()[slot].numel();
        for i in 0..n {
            let orig = m.params.iter()[slot].data()[i];
            m.params.iter_mut()[slot].data_mut()[i] = orig + STEP;
            let plus = model_loss(&m, &mut cache, batch, smoothing)?;
            m.params.iter_mut()[slot].data_mut()[i] = orig - STEP;
            let minus = model_loss(&m, &mut cache, batch, smoothing)?;
            m.params.iter_mut()[slot].data_mut()[i] = orig;
            report.record(name, i, analytic[slot][i], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Random batch of two rows whose longest row has source block `s` (tokens
/// plus EOS) and target block `t` (BOS plus tokens). The second row is
/// shorter so padding is exercised.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize, s: usize, t: usize) -> JointBatch {
    assert!(s >= 2 && t >= 1 && vocab_size > 4);
    let mut tok = |n: usize| (0..n).map(|_| rng.random_range(4..vocab_size)).collect::<Vec<_>>();
    let rows = vec![(tok(s - 1), tok(t - 1)), (tok(s - 2), tok(t.saturating_sub(2)))];
    JointBatch::from_ids(&rows).expect("valid ids")
}

/// The full-model check at the tiny geometry: two layers, `d = 8`, two
/// heads, 13 tokens, `S = 4`, `T = 3`.
pub fn tiny_model_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport, TrainError> {
    let model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);
    let batch = random_batch(&mut rng, config.vocab_size, 4, 3);
    check_model(&model, &batch, 0.1)
}

/// Random three-layer ReLU MLP with a log-softmax objective.
pub fn mlp_check(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
    };
    let inputs = vec![
        rand(&[4, 5]),
        rand(&[5, 6]),
        rand(&[6]),
        rand(&[6, 6]),
        rand(&[6]),
        rand(&[6, 3]),
        rand(&[3]),
        rand(&[4, 3]),
    ];
    check_function(&inputs, |tape, v| {
        let h = tape.matmul(v[0], v[1])?;
        let h = tape.add(h, v[2])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, v[3])?;
        let h = tape.add(h, v[4])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, v[5])?;
        let h = tape.add(h, v[6])?;
        let lp = tape.log_softmax(h)?;
        let w = tape.mul(lp, v[7])?;
        Ok(tape.sum(w))
    })
}
