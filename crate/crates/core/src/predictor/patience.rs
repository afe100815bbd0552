use log::info;

/// Keep predicting while `t ≤ p` or `|1 - L(t)/L(t-p)| ≥ ε`, where `t` is the
/// number of recorded losses and `L(t)` the latest one.
///
/// `L(t-p) = 0` stops. Non-finite losses (no delegate has trained yet) keep going.
pub fn patience_check(history: &[f64], patience: usize, epsilon: f64) -> bool {
    let t = history.len();
    if t <= patience {
        return true;
    }
    let current = history[t - 1];
    let reference = history[t - 1 - patience];
    if !current.is_finite() || !reference.is_finite() {
        return true;
    }
    if reference == 0.0 {
        info!("reference loss L(t-p) is zero; treating ratio as 1");
        return false;
    }
    (1.0 - current / reference).abs() >= epsilon
}

/// Latching wrapper around [`patience_check`]: once it says stop, it stays stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct PatienceMonitor {
    pub patience: usize,
    pub epsilon: f64,
    active: bool,
    stopped_at: Option<usize>,
}

impl PatienceMonitor {
    pub fn new(patience: usize, epsilon: f64) -> Self {
        PatienceMonitor {
            patience,
            epsilon,
            active: true,
            stopped_at: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Round (history length) at which the monitor latched off.
    pub fn stopped_at(&self) -> Option<usize> {
        self.stopped_at
    }

    pub fn check(&mut self, history: &[f64]) -> bool {
        if self.active && !patience_check(history, self.patience, self.epsilon) {
            self.active = false;
            self.stopped_at = Some(history.len());
            info!("patience criterion met at round {}; predictor disabled", history.len());
        }
        self.active
    }
}
