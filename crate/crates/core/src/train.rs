//! Training loops, loss weighting and learning-rate scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Stage2Data;
use crate::error::{CoreError, Result};
use crate::model::{FinetuneMode, FinetunePolicy, Stage2Model};
use crate::nn::{scalar, to_f64_vec};
use crate::tokenizer::{gan_step_losses, grad_norm, lambda_from_norms, vq_loss, Discriminator, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    Prediction,
    Target,
}

impl Denominator {
    pub fn as_str(self) -> &'static str {
        match self {
            Denominator::Prediction => "prediction",
            Denominator::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps, checked at epoch boundaries.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dwa_temperature: f64,
    /// Alternate the hinge discriminator with the tokenizer in stage 1.
    pub adversarial: bool,
    /// Optimizer steps before the adversarial terms switch on.
    pub adversarial_start: usize,
    /// Constant factor on the adaptive weight of the generator loss.
    pub adversarial_weight: f64,
    /// Codes unused for this many consecutive steps are re-seeded.
    pub dead_code_steps: usize,
    /// Denominator of the stage-2 training loss.
    pub loss_denominator: Denominator,
    pub freeze_decoders: bool,
    pub val_fraction: f64,
    /// Stage 2 stops after the first epoch whose training NMSE is below this for every task.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr_stage1: 2e-4,
            lr_stage2: 4.5e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            min_lr: 1e-6,
            epochs: 500,
            max_steps: None,
            seed: 0,
            dwa_temperature: 2.0,
            adversarial: true,
            adversarial_start: 0,
            adversarial_weight: 1.0,
            dead_code_steps: 200,
            loss_denominator: Denominator::Prediction,
            freeze_decoders: true,
            val_fraction: 0.1,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr_stage1 > 0.0
            && self.lr_stage2 > 0.0
            && self.plateau_patience >= 1
            && self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.min_lr > 0.0
            && self.dwa_temperature > 0.0
            && self.adversarial_weight >= 0.0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.stop_below.is_none_or(|v| v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid training config {self:?}")))
        }
    }
}

pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
}

/// Reduce-on-plateau: after more than `patience` epochs without a relative
/// improvement of 1e-4, the rate is multiplied by `factor`, never below `min_lr`.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self { factor, patience, min_lr, lr: lr.max(min_lr), best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn from_config(lr: f64, cfg: &TrainConfig) -> Self {
        Self::new(lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - 1e-4) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// Per-task epoch-mean losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub tasks: Vec<String>,
    pub losses: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(tasks: &[String]) -> Self {
        Self { tasks: tasks.to_vec(), losses: vec![Vec::new(); tasks.len()] }
    }

    pub fn push(&mut self, epoch_losses: &[f64]) {
        for (h, &l) in self.losses.iter_mut().zip(epoch_losses) {
            h.push(l);
        }
    }

    pub fn epochs(&self) -> usize {
        self.losses.first().map_or(0, Vec::len)
    }
}

/// Dynamic weight averaging for epoch `t` (1-based): uniform for `t < 3`,
/// else `P * softmax(r / T)` with `r_p = L_p(t-1) / L_p(t-2)`.
pub fn dwa_weights(history: &LossHistory, t: usize, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(CoreError::Config(format!("DWA temperature {temperature} must be > 0")));
    }
    let p = history.losses.len();
    if t < 3 {
        return Ok(vec![1.0; p]);
    }
    let ratios: Vec<f64> = history
        .losses
        .iter()
        .map(|l| {
            let (prev, prev2) = (l.get(t - 2).copied(), l.get(t - 3).copied());
            match (prev, prev2) {
                (Some(a), Some(b)) if b != 0.0 && (a / b).is_finite() => a / b,
                _ => 1.0,
            }
        })
        .collect();
    let m = ratios.iter().fold(f64::NEG_INFINITY, |a, &r| a.max(r / temperature));
    let e: Vec<f64> = ratios.iter().map(|r| (r / temperature - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.iter().map(|v| p as f64 * v / s).collect())
}

/// Epoch-level metrics keyed by component name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub rows: Vec<(usize, String, f64)>,
}

impl Curves {
    pub fn push(&mut self, epoch: usize, component: &str, value: f64) {
        self.rows.push((epoch, component.to_string(), value));
    }

    pub fn series(&self, component: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.1 == component).map(|r| r.2).collect()
    }

    pub fn last(&self, component: &str) -> Option<f64> {
        self.series(component).last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,component,value\n");
        for (e, c, v) in &self.rows {
            let _ = writeln!(s, "{e},{c},{v}");
        }
        s
    }
}

/// Tracks code usage; codes idle for `patience` steps are reported dead.
#[derive(Debug, Clone)]
pub struct DeadCodes {
    last_used: Vec<usize>,
    patience: usize,
}

impl DeadCodes {
    pub fn new(k: usize, patience: usize) -> Self {
        Self { last_used: vec![0; k], patience }
    }

    pub fn update(&mut self, indices: &[u32], step: usize) -> Vec<usize> {
        for &i in indices {
            self.last_used[i as usize] = step;
        }
        if self.patience == 0 {
            return Vec::new();
        }
        let dead: Vec<usize> = (0..self.last_used.len()).filter(|&j| step - self.last_used[j] >= self.patience).collect();
        for &j in &dead {
            self.last_used[j] = step;
        }
        dead
    }
}

/// Replaces `dead` rows with randomly chosen encoder outputs from `z` (`rows x n_z`).
pub fn reseed_codes(tok: &Tokenizer, dead: &[usize], z: &[f64], rng: &mut ChaCha8Rng) -> Result<()> {
    if dead.is_empty() {
        return Ok(());
    }
    let n_z = tok.cfg.n_z;
    let rows = z.len() / n_z;
    if rows == 0 {
        return Ok(());
    }
    let mut cb = tok.codebook()?;
    for &j in dead {
        let r = rng.random_range(0..rows);
        for (dst, src) in cb.entries[j * n_z..(j + 1) * n_z].iter_mut().zip(&z[r * n_z..(r + 1) * n_z]) {
            *dst = *src as f32;
        }
    }
    tok.set_codebook(&cb)
}

/// `grads[v] += scale * other[v]` for every `v` in `vars`.
pub fn add_scaled(grads: &mut GradStore, other: &GradStore, vars: &[Var], scale: f64) -> Result<()> {
    if scale == 0.0 {
        return Ok(());
    }
    for v in vars {
        if let Some(g2) = other.get(v.as_tensor()) {
            let sum = match grads.get(v.as_tensor()) {
                Some(g1) => (g1 + (g2 * scale)?)?,
                None => (g2 * scale)?,
            };
            grads.insert(v.as_tensor(), sum);
        }
    }
    Ok(())
}

pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    pub curves: Curves,
    pub lambdas: Vec<f64>,
    pub steps: usize,
}

/// Alternating tokenizer / discriminator training on `(N, H, W, C)` data.
pub fn train_stage1(tok: &Tokenizer, disc: &Discriminator, data: &Tensor, cfg: &TrainConfig) -> Result<Stage1Report> {
    cfg.validate()?;
    let n = data.dims()[0];
    if n == 0 {
        return Err(CoreError::EmptyDataset("stage-1 data".into()));
    }
    let data = data.to_dtype(tok.ps.dtype())?;
    let vars = tok.ps.all_vars();
    let mut opt = adam(vars.clone(), cfg.lr_stage1)?;
    let mut dopt = adam(disc.ps.all_vars(), cfg.lr_stage1)?;
    let mut sched = Plateau::from_config(cfg.lr_stage1, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dead = DeadCodes::new(tok.cfg.k, cfg.dead_code_steps);
    let mut report = Stage1Report { curves: Curves::default(), lambdas: Vec::new(), steps: 0 };
    let mut last_good = tok.to_checkpoint()?;
    let names = ["total", "mse", "ssim", "codebook", "commitment", "loss_g", "loss_d", "lambda"];

    for epoch in 1..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| report.steps >= m) {
            break;
        }
        let mut sums = [0.0f64; 8];
        let mut count = 0.0;
        for batch in batches(n, cfg.batch_size, &mut rng) {
            let idx = Tensor::from_vec(batch.iter().map(|&i| i as u32).collect::<Vec<_>>(), batch.len(), data.device())?;
            let x = data.index_select(&idx, 0)?;
            let out = tok.forward(&x)?;
            let loss = vq_loss(&x, &out.recon, &out.quant, tok.cfg.beta)?;
            let total = scalar(&loss.total)?;
            if !total.is_finite() {
                return Err(CoreError::Diverged { epoch, last_good: Some(Box::new(last_good)) });
            }
            let mut grads = loss.total.backward()?;
            let (mut lam, mut lg, mut ld) = (0.0, 0.0, 0.0);
            if cfg.adversarial && report.steps >= cfg.adversarial_start {
                let (loss_d, loss_g) = gan_step_losses(disc, &x, &out.recon)?;
                let gg = loss_g.backward()?;
                lam = cfg.adversarial_weight
                    * lambda_from_norms(grad_norm(&grads, tok.last_layer())?, grad_norm(&gg, tok.last_layer())?);
                add_scaled(&mut grads, &gg, &vars, lam)?;
                lg = scalar(&loss_g)?;
                ld = scalar(&loss_d)?;
                opt.step(&grads)?;
                dopt.step(&loss_d.backward()?)?;
            } else {
                opt.step(&grads)?;
            }
            report.steps += 1;
            report.lambdas.push(lam);
            let gone = dead.update(&out.quant.indices, report.steps);
            if !gone.is_empty() {
                reseed_codes(tok, &gone, &to_f64_vec(&out.grid.tokens)?, &mut rng)?;
            }
            let vals = [total, scalar(&loss.mse)?, scalar(&loss.ssim)?, scalar(&loss.codebook)?, scalar(&loss.commitment)?, lg, ld, lam];
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * w;
            }
            count += w;
        }
        for (name, s) in names.iter().zip(sums) {
            report.curves.push(epoch, name, s / count);
        }
        let lr = sched.step(sums[0] / count);
        opt.set_learning_rate(lr);
        dopt.set_learning_rate(lr);
        report.curves.push(epoch, "lr", lr);
        last_good = tok.to_checkpoint()?;
    }
    Ok(report)
}

/// Differentiable NMSE over all entries: `sum (t - p)^2 / sum d^2`, with `d`
/// the prediction or the target.
pub fn nmse_loss(target: &Tensor, pred: &Tensor, denominator: Denominator) -> Result<Tensor> {
    let num = (target - pred)?.sqr()?.sum_all()?;
    let den = match denominator {
        Denominator::Prediction => pred.sqr()?.sum_all()?,
        Denominator::Target => target.sqr()?.sum_all()?,
    };
    Ok(num.div(&den)?)
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub curves: Curves,
    pub history: LossHistory,
    /// DWA weights used in each epoch.
    pub weights: Vec<Vec<f64>>,
    pub steps: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Stage2Report {
    /// Last-epoch training NMSE per task.
    pub fn final_train_nmse(&self) -> BTreeMap<String, f64> {
        let last: Vec<f64> = self.history.losses.iter().map(|l| l.last().copied().unwrap_or(f64::NAN)).collect();
        keyed(&self.history.tasks, &last)
    }
}

/// Per-task NMSE of the whole dataset, evaluated in one pass per chunk.
pub fn dataset_nmse(model: &Stage2Model, data: &Stage2Data, tasks: &[String], denominator: Denominator, snap: bool) -> Result<BTreeMap<String, f64>> {
    let mut num: BTreeMap<String, f64> = BTreeMap::new();
    let mut den: BTreeMap<String, f64> = BTreeMap::new();
    let chunk = 64;
    for start in (0..data.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        let part = data.subset(&idx)?;
        let pred = model.forward(part.input(), tasks, snap)?;
        for t in tasks {
            let target = part.targets.get(t).ok_or_else(|| CoreError::UnknownTask(t.clone()))?;
            let p = pred.maps[t].to_dtype(candle_core::DType::F64)?;
            let y = target.to_dtype(candle_core::DType::F64)?;
            *num.entry(t.clone()).or_default() += scalar(&(&y - &p)?.sqr()?.sum_all()?)?;
            let d = match denominator {
                Denominator::Prediction => p.sqr()?.sum_all()?,
                Denominator::Target => y.sqr()?.sum_all()?,
            };
            *den.entry(t.clone()).or_default() += scalar(&d)?;
        }
    }
    tasks
        .iter()
        .map(|t| {
            let d = den[t];
            if d == 0.0 {
                Err(CoreError::DegenerateDenominator)
            } else {
                Ok((t.clone(), num[t] / d))
            }
        })
        .collect()
}

/// Multi-task NMSE training with DWA weights. Only the variables allowed by
/// `mode` are updated.
pub fn train_stage2(model: &Stage2Model, data: &Stage2Data, cfg: &TrainConfig, mode: FinetuneMode) -> Result<Stage2Report> {
    train_stage2_tasks(model, data, cfg, mode, &model.tasks().to_vec())
}

pub fn train_stage2_tasks(
    model: &Stage2Model,
    data: &Stage2Data,
    cfg: &TrainConfig,
    mode: FinetuneMode,
    tasks: &[String],
) -> Result<Stage2Report> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::EmptyDataset("stage-2 data".into()));
    }
    for t in tasks {
        if !data.targets.contains_key(t) {
            return Err(CoreError::IncompleteSnapshot { id: data.ids[0].clone(), task: t.clone() });
        }
    }
    let (train_idx, val_idx) = data.split(cfg.val_fraction);
    let train = data.subset(&train_idx)?;
    let val = data.subset(&val_idx)?;
    let vars = model.trainable_vars(mode);
    if vars.is_empty() {
        return Err(CoreError::Config(format!("no trainable parameters under {mode:?}")));
    }
    let mut opt = adam(vars, cfg.lr_stage2)?;
    let mut sched = Plateau::from_config(cfg.lr_stage2, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Stage2Report {
        curves: Curves::default(),
        history: LossHistory::new(tasks),
        weights: Vec::new(),
        steps: 0,
        train_size: train.len(),
        val_size: val.len(),
    };
    let mut last_good = model.to_checkpoint()?;
    for epoch in 1..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| report.steps >= m) {
            break;
        }
        let w = dwa_weights(&report.history, epoch, cfg.dwa_temperature)?;
        let mut sums = vec![0.0; tasks.len()];
        let mut count = 0.0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let part = train.subset(&batch)?;
            let pred = model.forward(part.input(), tasks, false)?;
            let mut total: Option<Tensor> = None;
            for (p, t) in tasks.iter().enumerate() {
                let l = nmse_loss(&part.targets[t].to_dtype(model.ps.dtype())?, &pred.maps[t], cfg.loss_denominator)?;
                let v = scalar(&l)?;
                if !v.is_finite() {
                    return Err(CoreError::Diverged { epoch, last_good: Some(Box::new(last_good)) });
                }
                sums[p] += v * batch.len() as f64;
                let wl = (l * w[p])?;
                total = Some(match total {
                    Some(acc) => (acc + wl)?,
                    None => wl,
                });
            }
            opt.backward_step(&total.expect("at least one task"))?;
            report.steps += 1;
            count += batch.len() as f64;
        }
        let epoch_losses: Vec<f64> = sums.iter().map(|s| s / count).collect();
        report.history.push(&epoch_losses);
        let val_nmse = dataset_nmse(model, &val, tasks, cfg.loss_denominator, false)?;
        let val_total: f64 = val_nmse.values().sum();
        if !val_total.is_finite() {
            return Err(CoreError::Diverged { epoch, last_good: Some(Box::new(last_good)) });
        }
        for (p, t) in tasks.iter().enumerate() {
            report.curves.push(epoch, &format!("train_nmse_{t}"), epoch_losses[p]);
            report.curves.push(epoch, &format!("val_nmse_{t}"), val_nmse[t]);
            report.curves.push(epoch, &format!("dwa_{t}"), w[p]);
        }
        report.curves.push(epoch, "val_total", val_total);
        let lr = sched.step(val_total);
        opt.set_learning_rate(lr);
        report.curves.push(epoch, "lr", lr);
        report.weights.push(w);
        if cfg.stop_below.is_some_and(|s| epoch_losses.iter().all(|l| *l < s)) {
            break;
        }
        last_good = model.to_checkpoint()?;
    }
    Ok(report)
}

/// Fine-tunes on `subset` (at most `policy.sample_budget` samples) under the policy's freeze scope.
pub fn finetune(model: &Stage2Model, policy: &FinetunePolicy, subset: &Stage2Data, cfg: &TrainConfig) -> Result<Stage2Report> {
    if subset.is_empty() {
        return Err(CoreError::EmptyDataset("fine-tuning subset".into()));
    }
    if subset.len() > policy.sample_budget {
        return Err(CoreError::Config(format!("subset of {} exceeds budget {}", subset.len(), policy.sample_budget)));
    }
    let tasks: Vec<String> = model.tasks().iter().filter(|t| subset.targets.contains_key(*t)).cloned().collect();
    train_stage2_tasks(model, subset, cfg, policy.mode, &tasks)
}

/// Per-sample reconstruction MSE of a tokenizer on `(N, H, W, C)` data.
pub fn reconstruction_mse(tok: &Tokenizer, data: &Tensor) -> Result<Vec<f64>> {
    let data = data.to_dtype(tok.ps.dtype())?;
    let out = tok.forward(&data)?;
    let n = data.dims()[0];
    let err = (&data - &out.recon)?.sqr()?.reshape((n, ()))?.mean(1)?;
    to_f64_vec(&err)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub(crate) fn keyed<T: Clone>(keys: &[String], vals: &[T]) -> BTreeMap<String, T> {
    keys.iter().cloned().zip(vals.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerConfig;
    use candle_core::{DType, Device};

    #[test]
    fn dwa_examples() {
        let tasks = vec!["a".to_string(), "b".to_string()];
        let mut h = LossHistory::new(&tasks);
        assert_eq!(dwa_weights(&h, 1, 2.0).unwrap(), vec![1.0, 1.0]);
        h.push(&[1.0, 1.0]);
        h.push(&[1.0, 0.5]);
        let w = dwa_weights(&h, 3, 2.0).unwrap();
        // Hand-evaluated: 2 * softmax(0.5, 0.25).
        let (ea, eb) = (0.5f64.exp(), 0.25f64.exp());
        assert!((w[0] - 2.0 * ea / (ea + eb)).abs() < 1e-12);
        // The exact values are (1.12438, 0.87562); the printed pair is rounded up.
        assert!((w[0] - 1.1245).abs() < 2e-4 && (w[1] - 0.8755).abs() < 2e-4);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);

        let mut same = LossHistory::new(&tasks);
        for l in [0.9, 0.7, 0.4] {
            same.push(&[l, l]);
        }
        assert_eq!(dwa_weights(&same, 4, 2.0).unwrap(), vec![1.0, 1.0]);
        let mut zero = LossHistory::new(&tasks);
        zero.push(&[0.0, 1.0]);
        zero.push(&[1.0, 1.0]);
        let w = dwa_weights(&zero, 3, 2.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    proptest::proptest! {
        #[test]
        fn dwa_weights_invariants(
            losses in proptest::collection::vec(proptest::collection::vec(0.01f64..10.0, 3), 1..6),
            scale in 0.1f64..10.0,
            temp in 0.5f64..4.0,
        ) {
            let tasks: Vec<String> = (0..losses.len()).map(|i| format!("t{i}")).collect();
            let mut h = LossHistory::new(&tasks);
            let mut scaled = LossHistory::new(&tasks);
            for e in 0..3 {
                let row: Vec<f64> = losses.iter().map(|l| l[e]).collect();
                h.push(&row);
                let mut srow = row.clone();
                srow[0] *= scale;
                scaled.push(&srow);
            }
            let w = dwa_weights(&h, 4, temp).unwrap();
            let sum: f64 = w.iter().sum();
            proptest::prop_assert!((sum - tasks.len() as f64).abs() < 1e-9);
            proptest::prop_assert!(w.iter().all(|v| *v > 0.0));
            let r: Vec<f64> = losses.iter().map(|l| l[2] / l[1]).collect();
            for i in 0..r.len() {
                for j in 0..r.len() {
                    if r[i] > r[j] {
                        proptest::prop_assert!(w[i] >= w[j]);
                    }
                }
            }
            let ws = dwa_weights(&scaled, 4, temp).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut p = Plateau::new(1e-3, 0.5, 10, 1e-6);
        assert_eq!(p.step(1.0), 1e-3);
        for _ in 0..10 {
            assert_eq!(p.step(1.0), 1e-3);
        }
        assert_eq!(p.step(1.0), 5e-4);
        let mut q = Plateau::new(3e-6, 0.5, 1, 1e-6);
        for _ in 0..20 {
            q.step(1.0);
        }
        assert_eq!(q.lr, 1e-6);
    }

    #[test]
    fn dead_codes_fire_after_patience() {
        let mut d = DeadCodes::new(3, 2);
        assert!(d.update(&[0, 1], 1).is_empty());
        assert_eq!(d.update(&[0], 2), vec![2]);
        assert_eq!(d.update(&[0], 3), vec![1]);
    }

    #[test]
    fn stage1_is_deterministic_and_lambda_valid() {
        let cfg = TokenizerConfig { depth: 1, width: 8, heads: 2, patch_size: 4, k: 8, n_z: 4, beta: 0.25, channels: 1, disc_channels: 4 };
        let data = Tensor::from_vec((0..4 * 16 * 16).map(|i| ((i * 37) % 17) as f32 / 17.0).collect::<Vec<_>>(), (4, 16, 16, 1), &Device::Cpu).unwrap();
        let tc = TrainConfig { batch_size: 2, epochs: 3, lr_stage1: 1e-3, ..Default::default() };
        let run = || {
            let tok = Tokenizer::new(cfg.clone(), 1, DType::F32).unwrap();
            let disc = Discriminator::new(1, 4, 2, DType::F32).unwrap();
            let r = train_stage1(&tok, &disc, &data, &tc).unwrap();
            (r, tok.ps.to_records(|_| true).unwrap())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.curves, b.curves);
        assert_eq!(pa, pb);
        assert_eq!(a.steps, 6);
        assert!(a.lambdas.iter().all(|l| l.is_finite() && *l >= 0.0));
        let csv = a.curves.to_csv();
        assert!(csv.starts_with("epoch,component,value\n1,total,"));
    }
}
