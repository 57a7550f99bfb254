use thiserror::Error;

use super::{train, Dataset, TrainConfig, TrainReport};
use crate::network::{Network, NetworkError, NetworkSpec};
use crate::par;
use crate::tensor::{ops, Tensor};

pub const ORACLE_MEMBERS: usize = 5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("an oracle needs exactly {ORACLE_MEMBERS} members, got {0}")]
    MemberCount(usize),
    #[error("oracle member {0} has a different architecture")]
    SpecMismatch(usize),
    #[error("oracle member {0} is untrained")]
    Untrained(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Five independently trained classifiers sharing one architecture.
///
/// Predictions average the members' softmax vectors.
#[derive(Debug, Clone)]
pub struct Oracle {
    members: Vec<Network>,
}

impl Oracle {
    pub fn new(members: Vec<Network>) -> Result<Self, OracleError> {
        if members.len() != ORACLE_MEMBERS {
            return Err(OracleError::MemberCount(members.len()));
        }
        let spec = members[0].spec();
        for (i, m) in members.iter().enumerate() {
            if m.spec() != spec {
                return Err(OracleError::SpecMismatch(i));
            }
            if !m.is_trained() {
                return Err(OracleError::Untrained(i));
            }
        }
        Ok(Self { members })
    }

    /// Trains one member per seed (initialisation and shuffling both use the
    /// member's seed). Members train in parallel.
    pub fn train(
        spec: &NetworkSpec,
        seeds: &[u64],
        data: &Dataset,
        test: Option<&Dataset>,
        cfg: &TrainConfig,
    ) -> Result<(Self, Vec<TrainReport>), OracleError> {
        if seeds.len() != ORACLE_MEMBERS {
            return Err(OracleError::MemberCount(seeds.len()));
        }
        let runs = par::map(seeds, |&seed| {
            let member_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            train(Network::init(spec, seed), data, test, &member_cfg)
        });
        let mut members = Vec::new();
        let mut reports = Vec::new();
        for run in runs {
            let (net, report) = run?;
            members.push(net);
            reports.push(report);
        }
        Ok((Self::new(members)?, reports))
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.members[0].spec()
    }

    /// Member-averaged class probabilities.
    pub fn mean_probabilities(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
        let mut mean = vec![0.0; self.spec().classes()];
        for m in &self.members {
            let probs = ops::softmax(m.logits(x)?.data());
            mean.iter_mut().zip(probs).for_each(|(a, p)| *a += p);
        }
        let n = self.members.len() as f64;
        mean.iter_mut().for_each(|a| *a /= n);
        Ok(mean)
    }

    /// Argmax of the mean softmax and that class's mean probability.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f64), OracleError> {
        let mean = self.mean_probabilities(x)?;
        Ok(aggregate_class(&mean))
    }
}

/// `(argmax, value)` with the first index winning ties.
pub(crate) fn aggregate_class(mean: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in mean.iter().enumerate() {
        if p > mean[best] {
            best = i;
        }
    }
    (best, mean[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerParams, NetworkSpec};

    /// A 1x2x2 -> 2-class network whose logits are fixed by the fc bias.
    fn fixed(logits: [f64; 2]) -> Network {
        let spec = NetworkSpec::parse("input 1 2 2\nFC-2").unwrap();
        let params = vec![
            None,
            Some(LayerParams {
                weights: Tensor::zeros(&[2, 4]),
                bias: Tensor::vector(logits.to_vec()),
            }),
        ];
        let mut net = Network::from_params(&spec, params, 0).unwrap();
        net.mark_trained();
        net
    }

    fn logits_for(p0: f64) -> [f64; 2] {
        // softmax([ln p0, ln (1-p0)]) = [p0, 1-p0]
        [p0.ln(), (1.0 - p0).ln()]
    }

    #[test]
    fn unanimous_members() {
        let members = (0..5).map(|_| fixed([60.0, -60.0])).collect();
        let oracle = Oracle::new(members).unwrap();
        let (class, conf) = oracle.predict(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(class, 0);
        assert!((conf - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_beats_majority() {
        let probs = [0.6, 0.6, 0.6, 0.1, 0.1];
        let members = probs.iter().map(|&p| fixed(logits_for(p))).collect();
        let oracle = Oracle::new(members).unwrap();
        let mean = oracle
            .mean_probabilities(&Tensor::zeros(&[1, 2, 2]))
            .unwrap();
        assert!((mean[0] - 0.4).abs() < 1e-12);
        assert!((mean[1] - 0.6).abs() < 1e-12);
        let (class, conf) = oracle.predict(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(class, 1);
        assert!((conf - 0.6).abs() < 1e-12);
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(
            Oracle::new(vec![fixed([0.0, 0.0])]),
            Err(OracleError::MemberCount(1))
        ));
        let mut members: Vec<Network> = (0..5).map(|_| fixed([0.0, 0.0])).collect();
        members[2] = Network::init(members[2].spec(), 0);
        assert!(matches!(
            Oracle::new(members),
            Err(OracleError::Untrained(2))
        ));
    }
}
