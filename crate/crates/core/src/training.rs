//! Plaintext training: Nesterov momentum, L2 on activation coefficients,
//! and optional knowledge distillation from a ReLU teacher.

use std::io::Write;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelWeights, NetworkSpec, ParamKind, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub reg_lambda: f64,
    /// Also apply the L2 penalty to convolution weights.
    pub reg_conv_weights: bool,
    pub temperature: f64,
    pub distill_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Uniform noise added to identity activation coefficients at init.
    pub coeff_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            reg_lambda: 1e-4,
            reg_conv_weights: false,
            temperature: 4.0,
            distill_alpha: 0.5,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            coeff_noise: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.reg_lambda >= 0.0) {
            return bad("reg_lambda must be nonnegative");
        }
        if !(self.temperature >= 1.0) {
            return bad("temperature must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.distill_alpha) {
            return bad("distill_alpha must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Mean losses over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub hard_label_loss: f64,
    pub distill_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
}

/// Row-wise `softmax(logits / T)`.
pub fn softmax_with_temperature(logits: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("temperature {t} must be positive")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            epoch: 0,
            loss: f64::NAN,
        });
    }
    let mut out = logits / t;
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(out)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &l)| argmax(*r) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Hard-label cross-entropy, plus the distillation term when a teacher is
/// given. Returns the report and the gradient of the total loss with
/// respect to the student logits.
pub fn kd_loss(
    student: &Array2<f64>,
    teacher: Option<&Array2<f64>>,
    labels: &[usize],
    t: f64,
    alpha: f64,
) -> Result<(LossReport, Array2<f64>)> {
    let (m, k) = student.dim();
    if labels.len() != m || teacher.is_some_and(|tl| tl.dim() != (m, k)) {
        return Err(Error::Shape("logit and label shapes differ".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {l} out of range for {k} logits")));
    }
    let mf = m as f64;
    let p = softmax_with_temperature(student, 1.0)?;
    let hard = labels.iter().enumerate().map(|(i, &l)| -p[[i, l]].ln()).sum::<f64>() / mf;
    let mut hard_grad = p;
    for (i, &l) in labels.iter().enumerate() {
        hard_grad[[i, l]] -= 1.0;
    }
    hard_grad /= mf;
    let report = |hard, distill, total| LossReport {
        hard_label_loss: hard,
        distill_loss: distill,
        total_loss: total,
        accuracy: accuracy(student, labels),
    };
    let Some(teacher) = teacher else {
        return Ok((report(hard, 0.0, hard), hard_grad));
    };
    let qs = softmax_with_temperature(student, t)?;
    let pt = softmax_with_temperature(teacher, t)?;
    let distill = -(&pt * &qs.mapv(f64::ln)).sum() / mf;
    let total = alpha * t * t * distill + (1.0 - alpha) * hard;
    // d/ds of the soft cross-entropy is (q_s - p_t) / T per sample
    let soft_grad = (&qs - &pt) * (alpha * t / mf);
    let grad = soft_grad + hard_grad * (1.0 - alpha);
    Ok((report(hard, distill, total), grad))
}

/// `raw + lambda * param`, the gradient of `J + lambda/2 * |c|^2`.
pub fn regularized_grad(raw: &[f64], param: &[f64], lambda: f64) -> Vec<f64> {
    raw.iter().zip(param).map(|(g, c)| g + lambda * c).collect()
}

/// Impulse per trainable scalar, in [`ModelWeights::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            velocity: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One Nesterov step: the gradient is taken at `c + mu*V`, then
/// `V <- mu*V - lr*g` and `c <- c + V` with the new impulse.
pub fn nesterov_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad_at: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
    lr: f64,
    mu: f64,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    let look: Vec<f64> = params.iter().zip(&state.velocity).map(|(c, v)| c + mu * v).collect();
    let g = grad_at(&look)?;
    if g.len() != params.len() {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    for ((c, v), g) in params.iter_mut().zip(&mut state.velocity).zip(g) {
        *v = mu * *v - lr * g;
        *c += *v;
    }
    state.step += 1;
    Ok(())
}

pub fn flatten(w: &ModelWeights) -> Vec<f64> {
    w.params().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
}

pub fn unflatten(w: &mut ModelWeights, flat: &[f64]) {
    let mut off = 0;
    w.visit_mut(|_, s| {
        s.copy_from_slice(&flat[off..off + s.len()]);
        off += s.len();
    });
}

fn reg_mask(w: &ModelWeights, conv_too: bool) -> Vec<bool> {
    w.params()
        .into_iter()
        .flat_map(|(k, s)| {
            let on = k == ParamKind::Coefficient || (conv_too && k == ParamKind::ConvWeight);
            std::iter::repeat(on).take(s.len())
        })
        .collect()
}

/// Loss and flat gradient of a training-mode forward pass on one batch.
/// Batch-norm batch statistics are returned through the cache.
pub fn batch_gradient(
    spec: &NetworkSpec,
    weights: &ModelWeights,
    x: &Array4<f64>,
    labels: &[usize],
    teacher_logits: Option<&Array2<f64>>,
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<f64>, model::ForwardCache)> {
    let (out, cache) = model::forward(spec, weights, x, Mode::Train)?;
    let dims = out.dim();
    let logits = model::flatten_logits(out);
    let (report, dlogits) = kd_loss(&logits, teacher_logits, labels, cfg.temperature, cfg.distill_alpha)?;
    let upstream = dlogits.into_shape_with_order(dims).expect("same element count");
    let (grads, _) = model::backward(spec, weights, &cache, &upstream)?;
    Ok((report, flatten(&grads), cache))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub hard_loss: f64,
    pub distill_loss: f64,
    pub total_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub metrics: Vec<EpochMetrics>,
}

/// Eval-mode logits in chunks to bound memory.
pub fn predict(spec: &NetworkSpec, weights: &ModelWeights, x: &Array4<f64>, chunk: usize) -> Result<Array2<f64>> {
    let n = x.dim().0;
    let mut parts = Vec::new();
    for lo in (0..n).step_by(chunk.max(1)) {
        let hi = (lo + chunk.max(1)).min(n);
        parts.push(model::logits(
            spec,
            weights,
            &x.slice_axis(Axis(0), (lo..hi).into()).to_owned(),
        )?);
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, spec.num_classes)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same class count"))
}

pub fn evaluate(spec: &NetworkSpec, weights: &ModelWeights, data: &Dataset, split: Split) -> Result<f64> {
    let (x, y) = data.split(split);
    if y.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(accuracy(&predict(spec, weights, &x, 256)?, &y))
}

/// Mini-batch training over the training split from `init`. The teacher,
/// when given, supplies eval-mode soft targets for every batch.
pub fn train(
    spec: &NetworkSpec,
    init: ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<(&NetworkSpec, &ModelWeights)>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.check(spec)?;
    if data.image_shape() != spec.input {
        return Err(Error::Shape(format!(
            "dataset images {:?} do not match network input {:?}",
            data.image_shape(),
            spec.input
        )));
    }
    let mut weights = init;
    weights.normalize_layout();
    let mut c = flatten(&weights);
    let mask = reg_mask(&weights, cfg.reg_conv_weights);
    let mut state = OptimizerState::new(c.len());
    // data order is seeded separately from initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order = data.indices(Split::Train);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossReport::default();
        let mut seen = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(idx);
            let teacher_logits = match teacher {
                Some((ts, tw)) => Some(model::logits(ts, tw, &x)?),
                None => None,
            };
            let mut report = LossReport::default();
            let mut cache = None;
            let mut look_weights = weights.clone();
            nesterov_step(
                &mut state,
                &mut c,
                |look| {
                    unflatten(&mut look_weights, look);
                    let (r, g, fc) = batch_gradient(spec, &look_weights, &x, &y, teacher_logits.as_ref(), cfg)?;
                    report = r;
                    cache = Some(fc);
                    Ok(g.iter()
                        .zip(look)
                        .zip(&mask)
                        .map(|((g, p), &on)| if on { g + cfg.reg_lambda * p } else { *g })
                        .collect())
                },
                cfg.learning_rate,
                cfg.momentum,
            )?;
            if !report.total_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: report.total_loss,
                });
            }
            unflatten(&mut weights, &c);
            if let Some(fc) = &cache {
                model::update_running_stats(&mut weights, fc, BN_MOMENTUM);
            }
            let b = idx.len() as f64;
            sums.hard_label_loss += report.hard_label_loss * b;
            sums.distill_loss += report.distill_loss * b;
            sums.total_loss += report.total_loss * b;
            sums.accuracy += report.accuracy * b;
            seen += idx.len();
        }
        let n = seen.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            hard_loss: sums.hard_label_loss / n,
            distill_loss: sums.distill_loss / n,
            total_loss: sums.total_loss / n,
            train_acc: sums.accuracy / n,
            val_acc: evaluate(spec, &weights, data, Split::Val)?,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { weights, metrics })
}

/// Trains a ReLU network from a seeded initialization.
pub fn train_teacher(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if spec.is_polynomial() || spec.activations().next().is_none() {
        return Err(Error::Config("the teacher must use ReLU activations".into()));
    }
    let init = ModelWeights::init(spec, 0.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    train(spec, init, data, cfg, None, |_| {})
}

/// Trains a polynomial network, distilling from `teacher` when given.
pub fn train_student(
    spec: &NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<(&NetworkSpec, &ModelWeights)>,
) -> Result<TrainOutcome> {
    if !spec.is_polynomial() {
        return Err(Error::Config("the student must use polynomial activations".into()));
    }
    let init = ModelWeights::init(spec, cfg.coeff_noise, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    train(spec, init, data, cfg, teacher, |_| {})
}

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
