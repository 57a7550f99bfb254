use serde::{Deserialize, Serialize};

/// Piecewise-constant step lengths: `(iteration span, step length)` pairs
/// covering `[0, total)` in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    spans: Vec<(usize, f64)>,
}

impl StepSchedule {
    pub fn new(spans: Vec<(usize, f64)>) -> Result<Self, String> {
        for &(len, step) in &spans {
            if len == 0 {
                return Err("schedule spans must be non-empty".into());
            }
            if !(step > 0.0 && step.is_finite()) {
                return Err(format!("step length {step} must be positive and finite"));
            }
        }
        Ok(Self { spans })
    }

    pub fn constant(iterations: usize, step: f64) -> Result<Self, String> {
        if iterations == 0 {
            return Self::new(Vec::new());
        }
        Self::new(vec![(iterations, step)])
    }

    /// 30K iterations: 1e-3 for the first 10K, 1e-4 for the last 20K.
    pub fn mnist() -> Self {
        Self::new(vec![(10_000, 1e-3), (20_000, 1e-4)]).expect("valid")
    }

    /// 30K iterations: 1e-4 for the first 10K, 1e-5 for the last 20K.
    pub fn large() -> Self {
        Self::new(vec![(10_000, 1e-4), (20_000, 1e-5)]).expect("valid")
    }

    pub fn spans(&self) -> &[(usize, f64)] {
        &self.spans
    }

    pub fn total_iterations(&self) -> usize {
        self.spans.iter().map(|s| s.0).sum()
    }

    /// Step length for iteration `t`; the last span extends past the end.
    pub fn step_at(&self, t: usize) -> f64 {
        let mut end = 0;
        for &(len, step) in &self.spans {
            end += len;
            if t < end {
                return step;
            }
        }
        self.spans.last().map_or(0.0, |s| s.1)
    }

    /// Parses `len:step,len:step,...`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let spans = text
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|part| {
                let (len, step) = part
                    .split_once(':')
                    .ok_or_else(|| format!("expected `iterations:step`, got `{part}`"))?;
                let len = len
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| format!("bad iteration count `{len}`"))?;
                let step = step
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad step length `{step}`"))?;
                Ok((len, step))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Self::new(spans)
    }
}

/// Weight of the oracle term over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LambdaSchedule {
    Off,
    /// `initial · decay^t`.
    Exponential {
        initial: f64,
        decay: f64,
    },
}

impl LambdaSchedule {
    pub fn exponential(initial: f64, decay: f64) -> Result<Self, String> {
        if !(initial >= 0.0 && initial.is_finite()) {
            return Err(format!("initial lambda {initial} must be >= 0"));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(format!("lambda decay {decay} must lie in (0, 1]"));
        }
        Ok(LambdaSchedule::Exponential { initial, decay })
    }

    /// Decay chosen so that `λ(iterations) == last`.
    pub fn decaying_to(initial: f64, last: f64, iterations: usize) -> Result<Self, String> {
        if !(last > 0.0 && last <= initial) {
            return Err(format!("final lambda {last} must lie in (0, {initial}]"));
        }
        let decay = if iterations == 0 {
            1.0
        } else {
            (last / initial).powf(1.0 / iterations as f64)
        };
        Self::exponential(initial, decay)
    }

    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LambdaSchedule::Off => 0.0,
            LambdaSchedule::Exponential { initial, decay } => initial * decay.powf(t as f64),
        }
    }

    /// True when the oracle term can ever be non-zero.
    pub fn is_active(&self) -> bool {
        matches!(*self, LambdaSchedule::Exponential { initial, .. } if initial > 0.0)
    }

    /// Parses `off`, `exp:INITIAL:DECAY` or `decay:INITIAL:FINAL` (the latter
    /// needs the iteration count).
    pub fn parse(text: &str, iterations: usize) -> Result<Self, String> {
        let parts: Vec<&str> = text.trim().split(':').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number `{s}`"));
        match parts[..] {
            ["off"] => Ok(LambdaSchedule::Off),
            ["exp", a, b] => Self::exponential(num(a)?, num(b)?),
            ["decay", a, b] => Self::decaying_to(num(a)?, num(b)?, iterations),
            _ => Err(format!(
                "lambda schedule must be `off`, `exp:L0:GAMMA` or `decay:L0:FINAL`, got `{text}`"
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_schedule() {
        let s = StepSchedule::mnist();
        assert_eq!(s.total_iterations(), 30_000);
        assert_eq!(s.step_at(0), 1e-3);
        assert_eq!(s.step_at(9_999), 1e-3);
        assert_eq!(s.step_at(10_000), 1e-4);
        assert_eq!(s.step_at(29_999), 1e-4);
    }

    #[test]
    fn parse_schedule() {
        assert_eq!(
            StepSchedule::parse("10000:1e-3,20000:1e-4").unwrap(),
            StepSchedule::mnist()
        );
        assert!(StepSchedule::parse("10:0").is_err());
        assert!(StepSchedule::parse("0:1").is_err());
        assert!(StepSchedule::parse("abc").is_err());
    }

    #[test]
    fn lambda_geometric_midpoint() {
        let t = 30_000;
        let s = LambdaSchedule::decaying_to(10.0, 0.01, t).unwrap();
        assert!((s.at(0) - 10.0).abs() < 1e-12);
        assert!((s.at(t) - 0.01).abs() < 1e-9);
        assert!((s.at(t / 2) - (10.0f64 * 0.01).sqrt()).abs() < 1e-9);
        assert!((s.at(t / 2) - 0.316).abs() < 1e-3);
    }

    #[test]
    fn lambda_constant_and_off() {
        let s = LambdaSchedule::exponential(10.0, 1.0).unwrap();
        assert_eq!(s.at(0), 10.0);
        assert_eq!(s.at(12345), 10.0);
        assert_eq!(LambdaSchedule::Off.at(3), 0.0);
        assert!(!LambdaSchedule::Off.is_active());
        assert!(LambdaSchedule::exponential(1.0, 0.0).is_err());
        assert!(LambdaSchedule::exponential(-1.0, 0.5).is_err());
        assert_eq!(
            LambdaSchedule::parse("off", 10).unwrap(),
            LambdaSchedule::Off
        );
    }
}
