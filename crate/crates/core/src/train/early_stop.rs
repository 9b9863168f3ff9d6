use serde::{Deserialize, Serialize};

const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive evaluations that fail to beat the
/// best metric so far by more than 1e-6. The first evaluation always
/// counts as an improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_evals: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_evals: 0,
        }
    }

    pub fn update(&mut self, metric: f64) -> StopDecision {
        match self.best {
            Some(best) if metric <= best + MIN_IMPROVEMENT => {
                self.bad_evals += 1;
                if self.bad_evals >= self.patience {
                    return StopDecision::Stop;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_evals = 0;
            }
        }
        StopDecision::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(patience: usize, metrics: &[f64]) -> Option<usize> {
        let mut es = EarlyStopping::new(patience);
        metrics.iter().position(|&m| es.update(m) == StopDecision::Stop)
    }

    #[test]
    fn improving_metrics_continue() {
        assert_eq!(run(2, &[0.5, 0.6, 0.7]), None);
    }

    #[test]
    fn flat_metrics_stop_after_patience() {
        assert_eq!(run(2, &[0.7, 0.7, 0.7]), Some(2));
        assert_eq!(run(0, &[0.7, 0.7]), Some(1));
        assert_eq!(run(0, &[0.5, 0.6, 0.6]), Some(2));
    }

    #[test]
    fn tiny_gains_do_not_count() {
        assert_eq!(run(2, &[0.5, 0.5 + 5e-7, 0.5 + 9e-7]), Some(2));
    }
}
