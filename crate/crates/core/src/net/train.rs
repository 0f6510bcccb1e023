use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{adam_step, argmax, backward_with, forward, loss, Architecture, ModelParams, Wanted};
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::grid::{represent, represent_backward, represent_backward_kernel, GridSpec, GridTensor};
use crate::kernel::{KernelKind, MLP_PARAM_COUNT};
use crate::optim::Adam;

/// One labelled, time-normalized stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stream: EventStream,
    pub label: usize,
}

/// A network together with the representation it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: GridSpec,
    pub model: ModelParams,
}

impl Classifier {
    pub fn new(spec: GridSpec, classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let arch = Architecture::new(spec.channels(), spec.width.into(), spec.height.into(), classes)?;
        Ok(Self {
            spec,
            model: ModelParams::init(arch, seed),
        })
    }

    pub fn classes(&self) -> usize {
        self.model.arch.classes
    }

    /// The 32-bit network input for a stream.
    pub fn input(&self, stream: &EventStream) -> Result<Vec<f32>> {
        Ok(represent(stream, &self.spec)?.to_f32())
    }

    pub fn logits(&self, stream: &EventStream) -> Result<Vec<f32>> {
        Ok(forward(&self.model, &self.input(stream)?)?.0)
    }

    pub fn predict(&self, stream: &EventStream) -> Result<usize> {
        Ok(argmax(&self.logits(stream)?))
    }

    pub fn loss(&self, stream: &EventStream, class: usize) -> Result<f64> {
        Ok(loss(&self.logits(stream)?, class))
    }

    /// Loss at `class` and its gradient with respect to every event time.
    pub fn time_gradient(&self, stream: &EventStream, class: usize) -> Result<(f64, Vec<f64>)> {
        let tensor = represent(stream, &self.spec)?;
        let (logits, cache) = forward(&self.model, &tensor.to_f32())?;
        let (_, din) = backward_with(&self.model, &cache, class, Wanted { params: false, input: true })?;
        let grad = self.widen(&tensor, din.expect("input gradient requested"));
        Ok((loss(&logits, class), represent_backward(stream, &self.spec, &grad)?))
    }

    fn widen(&self, like: &GridTensor, values: Vec<f32>) -> GridTensor {
        GridTensor {
            values: values.into_iter().map(f64::from).collect(),
            ..like.clone()
        }
    }
}

/// Learning-rate schedule and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f32,
    pub decay_every: usize,
    /// Shuffle seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            lr_decay: 0.5,
            decay_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

struct SampleGrad {
    loss: f64,
    correct: bool,
    model: ModelParams,
    kernel: Option<Vec<f64>>,
}

/// Optimizer state for the network and, when learnable, the kernel.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub adam: Adam<f32>,
    pub kernel_adam: Option<Adam<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl Trainer {
    pub fn new(clf: &Classifier, lr: f32) -> Self {
        let kernel_adam = matches!(clf.spec.kernel.kind, KernelKind::Mlp(_))
            .then(|| Adam::new(MLP_PARAM_COUNT, f64::from(lr)));
        Self {
            adam: Adam::new(clf.model.data.len(), lr),
            kernel_adam,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.adam.lr = lr;
        if let Some(k) = self.kernel_adam.as_mut() {
            k.lr = f64::from(lr);
        }
    }

    fn sample_grad(clf: &Classifier, stream: &EventStream, label: usize, learn_kernel: bool) -> Result<SampleGrad> {
        let tensor = represent(stream, &clf.spec)?;
        let (logits, cache) = forward(&clf.model, &tensor.to_f32())?;
        let (g, din) = backward_with(
            &clf.model,
            &cache,
            label,
            Wanted {
                params: true,
                input: learn_kernel,
            },
        )?;
        let kernel = match din {
            Some(din) => Some(represent_backward_kernel(stream, &clf.spec, &clf.widen(&tensor, din))?),
            None => None,
        };
        Ok(SampleGrad {
            loss: loss(&logits, label),
            correct: argmax(&logits) == label,
            model: g.expect("params requested"),
            kernel,
        })
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn step(&mut self, clf: &mut Classifier, batch: &[(&EventStream, usize)]) -> Result<BatchStats> {
        if batch.is_empty() {
            return Ok(BatchStats::default());
        }
        let learn_kernel = self.kernel_adam.is_some();
        let per_sample: Vec<SampleGrad> = batch
            .par_iter()
            .map(|(s, y)| Self::sample_grad(clf, s, *y, learn_kernel))
            .collect::<Result<_>>()?;
        let mut stats = BatchStats::default();
        let mut total = ModelParams::zeros(clf.model.arch);
        let mut kernel_total = learn_kernel.then(|| vec![0.0; MLP_PARAM_COUNT]);
        for g in &per_sample {
            total.add_assign(&g.model);
            if let (Some(acc), Some(k)) = (kernel_total.as_mut(), g.kernel.as_ref()) {
                acc.iter_mut().zip(k).for_each(|(a, b)| *a += b);
            }
            stats.loss_sum += g.loss;
            stats.correct += usize::from(g.correct);
            stats.count += 1;
        }
        let inv = 1.0 / batch.len() as f32;
        total.scale(inv);
        adam_step(&mut clf.model, &total, &mut self.adam)?;
        if let (Some(adam), Some(mut grad), KernelKind::Mlp(mlp)) =
            (self.kernel_adam.as_mut(), kernel_total, &mut clf.spec.kernel.kind)
        {
            grad.iter_mut().for_each(|g| *g *= f64::from(inv));
            adam.try_step(&mut mlp.weights, &grad)?;
        }
        Ok(stats)
    }
}

/// Mini-batch training with a per-epoch learning-rate decay. Returns one
/// record per epoch.
pub fn train(clf: &mut Classifier, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trainer = Trainer::new(clf, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        trainer.set_lr(lr);
        order.shuffle(&mut rng);
        let mut totals = BatchStats::default();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(&EventStream, usize)> =
                chunk.iter().map(|&i| (&train_set[i].stream, train_set[i].label)).collect();
            let s = trainer.step(clf, &batch)?;
            totals.loss_sum += s.loss_sum;
            totals.correct += s.correct;
            totals.count += s.count;
        }
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(clf, val_set)?)
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: totals.loss_sum / totals.count as f64,
            train_accuracy: totals.correct as f64 / totals.count as f64,
            val_accuracy,
        });
    }
    Ok(history)
}

/// Top-1 accuracy.
pub fn evaluate(clf: &Classifier, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = samples
        .par_iter()
        .map(|s| clf.predict(&s.stream).map(|p| usize::from(p == s.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}
