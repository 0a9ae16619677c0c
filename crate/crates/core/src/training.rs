//! Optimizers and the two training stages.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::TrainConfig;
use crate::datasets::Sample;
use crate::error::{Result, SanError};
use crate::evaluation::{evaluate, RetrievalReport};
use crate::model::{batch_loss, prepare_image, SanModel};
use crate::params::{named_rng, ParamStore};
use crate::saliency;
use crate::tensor::{GradientMap, Graph, Tensor};

fn check_grad<'a>(params: &'a mut ParamStore, name: &str, g: &Tensor) -> Result<&'a mut Tensor> {
    let p = params
        .get_mut(name)
        .ok_or_else(|| SanError::Usage(format!("gradient for unknown parameter {name:?}")))?;
    if p.shape() != g.shape() {
        return Err(SanError::shape("optimizer step", p.shape(), g.shape()));
    }
    Ok(p)
}

/// `p ← p − lr·g` for every parameter that has a gradient.
pub fn sgd_step(params: &mut ParamStore, grads: &GradientMap, lr: f64) -> Result<()> {
    for (name, g) in grads {
        check_grad(params, name, g)?;
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        p.axpy(-lr, g)?;
    }
    Ok(())
}

/// Bias-corrected Adam with per-parameter moment tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            check_grad(params, name, g)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((p, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Endless stream of sample indices: a fresh seeded permutation per pass.
struct EpochSampler {
    n: usize,
    seed: u64,
    tag: &'static str,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64, tag: &'static str) -> Self {
        EpochSampler {
            n,
            seed,
            tag,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.order
                .shuffle(&mut named_rng(self.seed, &format!("{}.epoch.{}", self.tag, self.epoch)));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn check_sample_sizes(model: &SanModel, samples: &[Sample]) -> Result<()> {
    let s = model.config.image_size;
    for x in samples {
        if x.image.shape() != [3, s, s] {
            return Err(SanError::Data(format!(
                "sample {}: image shape {:?}, model expects [3, {s}, {s}]",
                x.id,
                x.image.shape()
            )));
        }
        if x.mask.shape() != [s, s] {
            return Err(SanError::Data(format!("sample {}: mask shape {:?} does not match image", x.id, x.mask.shape())));
        }
        if x.captions.is_empty() {
            return Err(SanError::Data(format!("sample {} has no captions", x.id)));
        }
    }
    Ok(())
}

fn check_params(cfg: &TrainConfig, model: &SanModel) -> Result<()> {
    SanModel::initial_params(&cfg.model, model.vocab.len(), 0).check_compatible(&model.params)
}

/// Mask-supervised SGD on the saliency network alone. Every other parameter
/// is left untouched. Returns the batch-mean loss of every iteration.
pub fn train_stage1(cfg: &TrainConfig, model: &mut SanModel, samples: &[Sample]) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_params(cfg, model)?;
    if samples.is_empty() {
        return Err(SanError::Usage("stage 1 needs at least one sample".into()));
    }
    check_sample_sizes(model, samples)?;
    let mut sampler = EpochSampler::new(samples.len(), cfg.seed, "stage1");
    let b = cfg.stage1.batch;
    let mut losses = Vec::with_capacity(cfg.stage1.iterations);
    for _ in 0..cfg.stage1.iterations {
        let mut acc: GradientMap = GradientMap::new();
        let mut total = 0.0;
        for _ in 0..b {
            let s = &samples[sampler.next_index()];
            let mut g = Graph::new();
            let x = g.constant(prepare_image(&s.image));
            let out = saliency::forward(&mut g, &model.params, x)?;
            let l = saliency::saliency_loss(&mut g, out.s1, &s.mask)?;
            total += g.value(l).item()?;
            for (name, grad) in g.backward(l)?.into_params() {
                match acc.get_mut(&name) {
                    Some(a) => a.axpy(1.0, &grad)?,
                    None => {
                        acc.insert(name, grad);
                    }
                }
            }
        }
        let scale = 1.0 / b as f64;
        for grad in acc.values_mut() {
            grad.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(SanError::Numeric(format!("stage-1 loss became {loss}")));
        }
        debug_assert!(acc.keys().all(|n| n.starts_with(saliency::PREFIX)));
        sgd_step(&mut model.params, &acc, cfg.stage1.lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// One stage-2 epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Retrieval on the monitoring set, when one was given.
    pub report: Option<RetrievalReport>,
}

/// Batches of `(image index, caption index)` for one epoch. Each image occurs
/// once, so no batch holds two captions of the same image. A trailing batch
/// smaller than 2 is dropped.
pub fn epoch_batches(samples: &[Sample], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut rng = named_rng(seed, &format!("stage2.epoch.{epoch}"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let picks: Vec<(usize, usize)> = order
        .into_iter()
        .map(|i| (i, rng.gen_range(0..samples[i].captions.len())))
        .collect();
    picks
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[_]>::to_vec)
        .collect()
}

/// Adam on every parameter under the ranking loss of `cfg.variant`.
/// `monitor` is evaluated after each epoch (when non-empty) and its report
/// passed to `on_epoch`; returning `false` ends training.
pub fn train_stage2(
    cfg: &TrainConfig,
    model: &mut SanModel,
    samples: &[Sample],
    monitor: &[Sample],
    threads: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> bool,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_params(cfg, model)?;
    if samples.len() < 2 {
        return Err(SanError::Usage("stage 2 needs at least two samples".into()));
    }
    check_sample_sizes(model, samples)?;
    let tokens: Vec<Vec<_>> = samples
        .iter()
        .map(|s| s.captions.iter().map(|c| model.tokenize(c)).collect())
        .collect::<Result<_>>()?;
    let mut adam = Adam::new();
    let mut log = Vec::new();
    for epoch in 0..cfg.stage2.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(samples, cfg.stage2.batch, cfg.seed, epoch);
        for batch in &batches {
            let images: Vec<&Tensor> = batch.iter().map(|&(i, _)| &samples[i].image).collect();
            let caps: Vec<_> = batch.iter().map(|&(i, c)| &tokens[i][c]).collect();
            let mut g = Graph::new();
            let (l, _) = batch_loss(&mut g, model, &images, &caps, cfg.variant, &cfg.loss)?;
            let loss = g.value(l).item()?;
            if !loss.is_finite() {
                return Err(SanError::Numeric(format!("stage-2 loss became {loss} in epoch {epoch}")));
            }
            total += loss;
            let grads = g.backward(l)?.into_params();
            adam.step(&mut model.params, &grads, cfg.stage2.lr)?;
        }
        let report = if monitor.is_empty() {
            None
        } else {
            Some(evaluate(model, monitor, cfg.variant, threads)?.0)
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: total / batches.len().max(1) as f64,
            report,
        };
        let go_on = on_epoch(&rec);
        log.push(rec);
        if !go_on {
            break;
        }
    }
    Ok(log)
}
