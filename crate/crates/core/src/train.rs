//! Seeded minibatch training with Adam.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamId};
use crate::data::PairDataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::models::{combos_from_logits, HeadMode, SplitModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    SumOfFactorCrossEntropy,
    SummedBinary,
}

/// Stop once the training loss moves less than `min_delta` across `window`
/// iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub window: usize,
    pub min_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss_mode")]
    pub loss_mode: LossMode,
    /// Iterations between snapshots; 0 records only the first and last.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub plateau: Option<Plateau>,
    /// Training samples used for snapshot loss and accuracy.
    #[serde(default = "default_train_eval")]
    pub train_eval_samples: usize,
}

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_loss_mode() -> LossMode {
    LossMode::SumOfFactorCrossEntropy
}
fn default_train_eval() -> usize {
    10_000
}

impl TrainConfig {
    pub fn new(batch_size: usize, iterations: usize, seed: u64) -> Self {
        Self {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size,
            iterations,
            seed,
            loss_mode: default_loss_mode(),
            eval_every: 0,
            plateau: None,
            train_eval_samples: default_train_eval(),
        }
    }

    pub fn validate(&self, head_mode: HeadMode) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.batch_size > 0
            && self.train_eval_samples > 0;
        if !positive {
            return Err(Error::Validation(format!("invalid training config {self:?}")));
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || p.min_delta.is_nan() || p.min_delta < 0.0 {
                return Err(Error::Validation(format!("invalid plateau rule {p:?}")));
            }
        }
        let expected = match head_mode {
            HeadMode::Softmax => LossMode::SumOfFactorCrossEntropy,
            HeadMode::Binary => LossMode::SummedBinary,
        };
        if self.loss_mode != expected {
            return Err(Error::Validation(format!(
                "loss mode {:?} does not match {head_mode:?} heads",
                self.loss_mode
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` is keyed by parameter index.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let g = grads
            .get(ParamId(i))
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {i}")))?;
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.get(ParamId(i)).expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mj = config.beta1 * *mj + (1.0 - config.beta1) * gj;
            *vj = config.beta2 * *vj + (1.0 - config.beta2) * gj * gj;
            *w -= config.learning_rate * (*mj / c1) / ((*vj / c2).sqrt() + config.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub metrics: Option<MetricsRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    IterationLimit,
    Plateau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub snapshots: Vec<Snapshot>,
    pub stop_reason: StopReason,
    pub iterations_run: usize,
}

impl RunHistory {
    pub const CSV_HEADER: &'static str =
        "iteration,loss,train_acc,test_sample_acc,test_set_acc,random_set_acc,ood_partitions";

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("history always holds the initial snapshot")
    }

    pub fn final_train_acc(&self) -> f64 {
        self.last().train_acc
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.snapshots {
            let _ = write!(out, "{},{},{}", s.iteration, s.loss, s.train_acc);
            match &s.metrics {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        ",{},{},{},{}",
                        m.test_sample_acc, m.test_set_acc, m.random_set_acc, m.ood_partition_count
                    );
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

const EVAL_CHUNK: usize = 1024;

/// Mean loss and exact-tuple accuracy over the first `n` samples.
pub fn evaluate_training(model: &SplitModel, data: &PairDataset, n: usize) -> Result<(f64, f64)> {
    let n = n.min(data.len());
    if n == 0 {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut loss = 0.0;
    let mut hits = 0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..n.min(start + EVAL_CHUNK)).collect();
        let labels: Vec<_> = idx.iter().map(|&i| data.labels()[i].clone()).collect();
        let mut g = Graph::new();
        let params = model.attach(&mut g);
        let x = g.input(data.batch(&idx)?);
        let logits = model.forward(&mut g, &params, x)?;
        let l = model.loss(&mut g, &logits, &labels)?;
        loss += g.value(l).item() * idx.len() as f64;
        let values: Vec<Tensor> = logits.iter().map(|&id| g.value(id).clone()).collect();
        let preds = combos_from_logits(&values, model.spec().head_mode);
        hits += preds.iter().zip(&labels).filter(|(p, t)| p == t).count();
    }
    Ok((loss / n as f64, hits as f64 / n as f64))
}

/// Trains `model` in place. `hook` is called at every snapshot and may
/// return test metrics for it.
pub fn train<H>(
    model: &mut SplitModel,
    data: &PairDataset,
    config: &TrainConfig,
    mut hook: H,
) -> Result<RunHistory>
where
    H: FnMut(&SplitModel, usize) -> Result<Option<MetricsRecord>>,
{
    config.validate(model.spec().head_mode)?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(model.params());
    let mut snapshots = Vec::new();
    let mut snap = |model: &SplitModel, iteration: usize| -> Result<f64> {
        let (loss, train_acc) = evaluate_training(model, data, config.train_eval_samples)?;
        let metrics = hook(model, iteration)?;
        snapshots.push(Snapshot {
            iteration,
            loss,
            train_acc,
            metrics,
        });
        Ok(loss)
    };
    snap(model, 0)?;

    let mut stop_reason = StopReason::IterationLimit;
    let mut plateau_ref = snapshots_loss_at_start(config, model, data)?;
    let mut last_snap = 0;
    let mut it = 0;
    while it < config.iterations {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let labels: Vec<_> = idx.iter().map(|&i| data.labels()[i].clone()).collect();
        let mut g = Graph::new();
        let params = model.attach(&mut g);
        let x = g.input(data.batch(&idx)?);
        let logits = model.forward(&mut g, &params, x)?;
        it += 1;
        if logits.iter().any(|&l| !g.value(l).is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            });
        }
        let loss = model.loss(&mut g, &logits, &labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        adam_step(model.params_mut(), &grads, &mut state, config)?;

        if let (Some(p), Some(prev)) = (config.plateau, plateau_ref) {
            if it % p.window == 0 {
                let (cur, _) = evaluate_training(model, data, config.train_eval_samples)?;
                if (prev - cur).abs() < p.min_delta {
                    stop_reason = StopReason::Plateau;
                    break;
                }
                plateau_ref = Some(cur);
            }
        }
        if config.eval_every > 0 && it % config.eval_every == 0 && it < config.iterations {
            snap(model, it)?;
            last_snap = it;
        }
    }
    if it > last_snap {
        snap(model, it)?;
    }
    Ok(RunHistory {
        snapshots,
        stop_reason,
        iterations_run: it,
    })
}

fn snapshots_loss_at_start(
    config: &TrainConfig,
    model: &SplitModel,
    data: &PairDataset,
) -> Result<Option<f64>> {
    match config.plateau {
        Some(_) => Ok(Some(evaluate_training(model, data, config.train_eval_samples)?.0)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth2d, Role, Synth2dCase};
    use crate::models::SplitModelSpec;

    fn grads_of(values: Vec<Tensor>) -> Gradients {
        let mut g = Graph::new();
        let nodes: Vec<_> = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| g.param(ParamId(i), v))
            .collect();
        let mut total = g.sum(nodes[0]).unwrap();
        for &n in &nodes[1..] {
            let s = g.sum(n).unwrap();
            total = g.add(total, s).unwrap();
        }
        // d(sum)/dp = 1 everywhere; scale afterwards to the wanted gradient.
        g.backward(total).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_rows(&[&[1.0, -2.0]])];
        let mut state = AdamState::new(&params);
        state.m[0].data_mut()[0] = 0.5;
        let mut grads = grads_of(vec![Tensor::zeros(&[1, 2])]);
        grads.get_mut(ParamId(0)).unwrap().data_mut().fill(0.0);
        let cfg = TrainConfig::new(1, 1, 0);
        // With m = 0.5 the first coordinate still moves; the second must not.
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert_eq!(params[0].data()[1], -2.0);
        assert!((state.m[0].data()[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut params = vec![Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let mut grads = grads_of(vec![Tensor::scalar(0.0), Tensor::scalar(0.0)]);
        grads.get_mut(ParamId(0)).unwrap().data_mut()[0] = 3.0;
        grads.get_mut(ParamId(1)).unwrap().data_mut()[0] = -0.01;
        let cfg = TrainConfig::new(1, 1, 0);
        for _ in 0..200 {
            let before: Vec<f64> = params.iter().map(|p| p.item()).collect();
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let d0 = params[0].item() - before[0];
            let d1 = params[1].item() - before[1];
            assert!((d0 + cfg.learning_rate).abs() < 1e-6, "{d0}");
            assert!((d1 - cfg.learning_rate).abs() < 1e-5, "{d1}");
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w - 3)^2, gradient 2(w - 3).
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let mut cfg = TrainConfig::new(1, 1, 0);
        cfg.learning_rate = 0.01;
        let mut grads = grads_of(vec![Tensor::scalar(0.0)]);
        let mut steps = 0;
        while (params[0].item() - 3.0).abs() >= 1e-6 {
            grads.get_mut(ParamId(0)).unwrap().data_mut()[0] = 2.0 * (params[0].item() - 3.0);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            steps += 1;
            assert!(steps <= 5000, "w = {}", params[0].item());
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&[Tensor::zeros(&[3])]);
        let grads = grads_of(vec![Tensor::zeros(&[2])]);
        let err = adam_step(&mut params, &grads, &mut state, &TrainConfig::new(1, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
    }

    fn blobs(seed: u64) -> (SplitModel, PairDataset) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = synth2d(Synth2dCase::BlobsA, Role::Train, 60, &mut rng).unwrap();
        let model = SplitModel::build(&SplitModelSpec::mlp2d(6), seed).unwrap();
        (model, data)
    }

    #[test]
    fn zero_iterations_gives_initial_snapshot() {
        let (mut model, data) = blobs(0);
        let h = train(&mut model, &data, &TrainConfig::new(10, 0, 0), |_, _| Ok(None)).unwrap();
        assert_eq!(h.snapshots.len(), 1);
        assert_eq!(h.snapshots[0].iteration, 0);
    }

    #[test]
    fn same_seed_same_history() {
        let mut cfg = TrainConfig::new(10, 50, 9);
        cfg.eval_every = 10;
        cfg.learning_rate = 0.01;
        let run = || {
            let (mut model, data) = blobs(1);
            let h = train(&mut model, &data, &cfg, |_, _| Ok(None)).unwrap();
            (h, model.to_bytes())
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(ma, mb);
        let its: Vec<usize> = a.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(its, vec![0, 10, 20, 30, 40, 50]);
    }

    #[test]
    fn divergence_aborts() {
        let (mut model, data) = blobs(2);
        let mut cfg = TrainConfig::new(10, 20, 0);
        cfg.learning_rate = 1e300;
        let err = train(&mut model, &data, &cfg, |_, _| Ok(None)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn loss_mode_must_match_heads() {
        let mut cfg = TrainConfig::new(1, 1, 0);
        cfg.loss_mode = LossMode::SummedBinary;
        assert!(cfg.validate(HeadMode::Softmax).is_err());
        assert!(cfg.validate(HeadMode::Binary).is_ok());
    }

    #[test]
    fn history_csv_columns() {
        let h = RunHistory {
            snapshots: vec![Snapshot {
                iteration: 0,
                loss: 1.5,
                train_acc: 0.25,
                metrics: None,
            }],
            stop_reason: StopReason::IterationLimit,
            iterations_run: 0,
        };
        assert_eq!(
            h.to_csv(),
            "iteration,loss,train_acc,test_sample_acc,test_set_acc,random_set_acc,ood_partitions\n0,1.5,0.25,,,,\n"
        );
    }
}
