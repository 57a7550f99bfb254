//! Datasets, SGD training and the oracle ensemble.

mod idx;
mod oracle;

pub use idx::{load_idx, load_split, parse_idx, split_paths, IMAGES_MAGIC, LABELS_MAGIC};
pub use oracle::{Oracle, OracleError, ORACLE_MEMBERS};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Network, NetworkError};
use crate::par;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("no IDX files matching {0}")]
    Missing(PathBuf),
    #[error("IDX format: {0}")]
    Format(String),
    #[error("dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled `[1, h, w]` images with pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} >= {classes} classes"
            )));
        }
        if images
            .iter()
            .any(|im| im.data().iter().any(|&p| !(0.0..=1.0).contains(&p)))
        {
            return Err(DataError::Invalid("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Indices of samples with label `class`, in file order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Running accuracy over the epoch's minibatches (before each update).
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    /// `epoch,train_acc,test_acc,mean_loss` rows; an empty field marks a
    /// missing test split.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_acc,test_acc,mean_loss\n");
        for e in &self.epochs {
            let test = e.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_accuracy, test, e.mean_loss
            ));
        }
        out
    }
}

/// Gradient of the summed cross-entropy over `samples`.
struct BatchGrad {
    grads: Vec<(usize, Vec<f64>, Vec<f64>)>,
    loss: f64,
    correct: usize,
}

fn batch_gradient(
    net: &Network,
    data: &Dataset,
    samples: &[usize],
) -> Result<BatchGrad, NetworkError> {
    let mut acc: Option<BatchGrad> = None;
    for &s in samples {
        let mut g = Graph::new();
        let x = g.leaf_ref(data.image(s), false);
        let rec = net.record_logits(&mut g, x, true)?;
        let logits = rec.last();
        let predicted = g.value(logits).argmax();
        let loss = g.softmax_cross_entropy(logits, data.label(s))?;
        g.backward(loss)?;
        let loss_value = g.value(loss).data()[0];
        let grads: Vec<(usize, Vec<f64>, Vec<f64>)> = rec
            .params
            .iter()
            .map(|&(i, w, b)| {
                (
                    i,
                    g.take_grad(w).expect("weights are trainable"),
                    g.take_grad(b).expect("bias is trainable"),
                )
            })
            .collect();
        let correct = usize::from(predicted == data.label(s));
        match &mut acc {
            None => {
                acc = Some(BatchGrad {
                    grads,
                    loss: loss_value,
                    correct,
                })
            }
            Some(a) => {
                a.loss += loss_value;
                a.correct += correct;
                for ((_, aw, ab), (_, gw, gb)) in a.grads.iter_mut().zip(grads) {
                    aw.iter_mut().zip(gw).for_each(|(x, y)| *x += y);
                    ab.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok(acc.expect("non-empty sample chunk"))
}

/// Samples per gradient worker. Fixed so the summation order, and with it
/// the trained weights, do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Minibatch SGD on softmax cross-entropy with a per-seed shuffle.
///
/// Reports running train accuracy, test accuracy (when `test` is given) and
/// mean loss for every epoch. Non-convergence is reported, not an error.
pub fn train(
    mut net: Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport), NetworkError> {
    if data.is_empty() {
        return Err(NetworkError::Format("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let batch = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for mb in order.chunks(batch) {
            let parts = par::map_chunks(mb, GRAD_CHUNK, |chunk| batch_gradient(&net, data, chunk));
            let mut total: Option<BatchGrad> = None;
            for part in parts {
                let part = part?;
                match &mut total {
                    None => total = Some(part),
                    Some(t) => {
                        t.loss += part.loss;
                        t.correct += part.correct;
                        for ((_, tw, tb), (_, pw, pb)) in t.grads.iter_mut().zip(part.grads) {
                            tw.iter_mut().zip(pw).for_each(|(x, y)| *x += y);
                            tb.iter_mut().zip(pb).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let total = total.expect("non-empty minibatch");
            loss_sum += total.loss;
            correct += total.correct;
            let step = cfg.learning_rate / mb.len() as f64;
            let params = net.params_mut();
            for (i, gw, gb) in total.grads {
                let p = params[i].as_mut().expect("weighted layer");
                p.weights
                    .data_mut()
                    .iter_mut()
                    .zip(gw)
                    .for_each(|(w, g)| *w -= step * g);
                p.bias
                    .data_mut()
                    .iter_mut()
                    .zip(gb)
                    .for_each(|(b, g)| *b -= step * g);
            }
        }
        let test_accuracy = match test {
            Some(t) => Some(accuracy(&net, t)?),
            None => None,
        };
        report.epochs.push(EpochStats {
            epoch,
            train_accuracy: correct as f64 / data.len() as f64,
            test_accuracy,
            mean_loss: loss_sum / data.len() as f64,
        });
    }
    net.mark_trained();
    Ok((net, report))
}

/// Fraction of `data` classified correctly.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64, NetworkError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = par::map_range(data.len(), |i| {
        net.predict(data.image(i))
            .map(|(c, _)| usize::from(c == data.label(i)))
    });
    let mut correct = 0;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;
    use rand::Rng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| {
                Tensor::new(
                    vec![1, 8, 8],
                    (0..64).map(|_| rng.random::<f64>()).collect(),
                )
                .unwrap()
            })
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(images, labels, 3, Split::Train).unwrap()
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec::parse("input 1 8 8\nconv3-2\nmaxpooling-2\nFC-16\nFC-3").unwrap()
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let net = Network::init(&toy_spec(), 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, report) = train(net.clone(), &toy_data(10, 0), None, &cfg).unwrap();
        assert_eq!(trained.params(), net.params());
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn single_sample_is_memorised() {
        let data = toy_data(1, 4);
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 0,
        };
        let (trained, _) = train(Network::init(&toy_spec(), 2), &data, None, &cfg).unwrap();
        let logits = trained.logits(data.image(0)).unwrap();
        let (loss, _) = crate::tensor::ops::softmax_cross_entropy(&logits, data.label(0)).unwrap();
        assert!(loss < 0.01, "loss {loss}");
        assert!(trained.is_trained());
    }

    #[test]
    fn training_is_reproducible() {
        let data = toy_data(40, 9);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 3,
        };
        let a = train(Network::init(&toy_spec(), 2), &data, Some(&data), &cfg).unwrap();
        let b = train(Network::init(&toy_spec(), 2), &data, Some(&data), &cfg).unwrap();
        assert_eq!(a.0.params(), b.0.params());
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.epochs.len(), 2);
        assert!(a
            .1
            .to_csv()
            .starts_with("epoch,train_acc,test_acc,mean_loss\n1,"));
    }

    #[test]
    fn empty_data_rejected() {
        let data = toy_data(3, 0).head(0);
        assert!(train(
            Network::init(&toy_spec(), 0),
            &data,
            None,
            &TrainConfig::default()
        )
        .is_err());
    }

    #[test]
    fn dataset_invariants() {
        let im = vec![Tensor::full(&[1, 2, 2], 0.5)];
        assert!(Dataset::new(im.clone(), vec![0, 1], 10, Split::Test).is_err());
        assert!(Dataset::new(im.clone(), vec![10], 10, Split::Test).is_err());
        assert!(Dataset::new(
            vec![Tensor::full(&[1, 2, 2], 1.5)],
            vec![0],
            10,
            Split::Test
        )
        .is_err());
        assert!(Dataset::new(im, vec![9], 10, Split::Test).is_ok());
    }
}
