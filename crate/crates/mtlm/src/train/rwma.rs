//! Online loss-weight adaptation by randomized weighted majority.
//!
//! The three tasks are treated as experts. At each evaluation round the
//! trainer reports one step loss per task; an expert whose loss series
//! anti-correlates with the language-model series over the last ten rounds
//! has its raw weight multiplied by exp((1-eta)*l), where l is the fraction
//! of loss increases in its recent window. Normalized weights are then
//! clamped into a configured band and renormalized on the simplex.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RwmaConfig {
    /// Number of experts (tasks).
    pub experts: usize,
    /// Evaluation rounds per epoch; sets the learning coefficient.
    pub horizon: usize,
    /// Band each normalized weight is clamped into.
    pub clamp: (f64, f64),
    /// Step-loss window used for the increase fraction.
    pub window: usize,
    /// Trailing rounds used for the correlation trigger.
    pub rho_window: usize,
    /// Use the classical (1-eta)^l decay instead of the exp((1-eta)l)
    /// growth rule, for comparison runs.
    pub classical_decay: bool,
}

impl Default for RwmaConfig {
    fn default() -> Self {
        RwmaConfig {
            experts: 3,
            horizon: 50,
            clamp: (0.2, 0.6),
            window: 1000,
            rho_window: 10,
            classical_decay: false,
        }
    }
}

impl RwmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 2 {
            return Err(Error::Config(format!(
                "need at least 2 experts, got {}",
                self.experts
            )));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.window < 2 || self.rho_window < 2 {
            return Err(Error::Config("loss windows must hold at least 2 entries".into()));
        }
        let (lo, hi) = self.clamp;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 || lo >= hi {
            return Err(Error::Config(format!("clamp range ({lo}, {hi}) is not a band in [0,1]")));
        }
        let d = self.experts as f64;
        if d * lo > 1.0 || d * hi < 1.0 {
            return Err(Error::Config(format!(
                "clamp range ({lo}, {hi}) cannot hold {d} weights summing to 1"
            )));
        }
        Ok(())
    }

    /// eta = sqrt(2 ln d / T).
    pub fn eta(&self) -> f64 {
        (2.0 * (self.experts as f64).ln() / self.horizon as f64).sqrt()
    }
}

/// Guard against raw-weight overflow: the growth rule only multiplies, so
/// after enough updates the raw weights are rescaled by their maximum.
/// Rescaling changes nothing downstream because only ratios matter. The
/// floor keeps repeatedly rescaled experts strictly positive; any weight
/// that small is pinned to the bottom of the clamp band regardless.
const RAW_CEILING: f64 = 1e100;
const RAW_FLOOR: f64 = 1e-150;

#[derive(Debug, Clone)]
pub struct RwmaState {
    cfg: RwmaConfig,
    eta: f64,
    raw: Vec<f64>,
    windows: Vec<VecDeque<f64>>,
    t: usize,
}

/// Expert index of the language-model task, the reference series for the
/// correlation trigger.
pub const LM_EXPERT: usize = 0;

impl RwmaState {
    pub fn new(cfg: RwmaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RwmaState {
            eta: cfg.eta(),
            raw: vec![1.0; cfg.experts],
            windows: vec![VecDeque::with_capacity(cfg.window.min(4096)); cfg.experts],
            cfg,
            t: 0,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw
    }

    /// Current normalized, clamped weights.
    pub fn alpha(&self) -> Vec<f64> {
        clamp_simplex(&self.raw, self.cfg.clamp.0, self.cfg.clamp.1)
    }

    /// Degradation estimate per expert: the fraction of adjacent increases
    /// in its loss window.
    pub fn degradation(&self) -> Vec<f64> {
        self.windows.iter().map(|w| increase_fraction(&window_slice(w))).collect()
    }

    /// One evaluation round: record step losses, update raw weights for
    /// experts whose series anti-correlates with the language model's, and
    /// return the new weights.
    pub fn step(&mut self, step_losses: &[f64]) -> Result<Vec<f64>> {
        if step_losses.len() != self.cfg.experts {
            return Err(Error::Domain(format!(
                "{} step losses for {} experts",
                step_losses.len(),
                self.cfg.experts
            )));
        }
        if step_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("non-finite step loss in {step_losses:?}")));
        }
        for (window, &loss) in self.windows.iter_mut().zip(step_losses) {
            if window.len() == self.cfg.window {
                window.pop_front();
            }
            window.push_back(loss);
        }
        self.t += 1;

        if self.t > self.cfg.rho_window {
            let lm_tail = tail(&self.windows[LM_EXPERT], self.cfg.rho_window);
            let mut updated = false;
            for i in 0..self.cfg.experts {
                let task_tail = tail(&self.windows[i], self.cfg.rho_window);
                let rho = pearson_rho(&lm_tail, &task_tail)?;
                if rho < 0.0 {
                    let l = increase_fraction(&window_slice(&self.windows[i]));
                    let factor = if self.cfg.classical_decay {
                        (1.0 - self.eta).powf(l)
                    } else {
                        ((1.0 - self.eta) * l).exp()
                    };
                    self.raw[i] *= factor;
                    updated = true;
                }
            }
            if updated && self.raw.iter().any(|&w| w > RAW_CEILING) {
                let max = self.raw.iter().cloned().fold(f64::MIN, f64::max);
                for w in &mut self.raw {
                    *w = (*w / max).max(RAW_FLOOR);
                }
            }
        }
        Ok(self.alpha())
    }
}

fn window_slice(window: &VecDeque<f64>) -> Vec<f64> {
    window.iter().copied().collect()
}

fn tail(window: &VecDeque<f64>, k: usize) -> Vec<f64> {
    window.iter().skip(window.len().saturating_sub(k)).copied().collect()
}

/// Fraction of adjacent pairs where the series increased. Fewer than two
/// points means no evidence of degradation.
pub fn increase_fraction(series: &[f64]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let increases = series.windows(2).filter(|p| p[1] > p[0]).count();
    increases as f64 / (series.len() - 1) as f64
}

/// Standard Pearson correlation; zero-variance series correlate with
/// nothing by convention, which keeps the trigger inactive on plateaus.
pub fn pearson_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!(
            "correlation over series of lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Domain("correlation needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// Project positive raw weights onto the simplex slice {x: sum x = 1,
/// lo <= x_i <= hi}. Violating coordinates are pinned at their bound and
/// the remaining budget is split among the free coordinates in proportion
/// to their raw weights; each round pins at least one coordinate, so at
/// most d rounds run.
pub fn clamp_simplex(raw: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let d = raw.len();
    debug_assert!(d as f64 * lo <= 1.0 + 1e-12 && d as f64 * hi >= 1.0 - 1e-12);
    let mut pinned: Vec<Option<f64>> = vec![None; d];
    for _round in 0..d {
        let budget = 1.0 - pinned.iter().flatten().sum::<f64>();
        let free_mass: f64 =
            raw.iter().zip(&pinned).filter(|(_, p)| p.is_none()).map(|(w, _)| w).sum();
        if free_mass <= 0.0 {
            break;
        }
        let mut worst: Option<(usize, f64, f64)> = None;
        for i in 0..d {
            if pinned[i].is_some() {
                continue;
            }
            let x = budget * raw[i] / free_mass;
            let (bound, violation) = if x < lo {
                (lo, lo - x)
            } else if x > hi {
                (hi, x - hi)
            } else {
                continue;
            };
            if worst.map_or(true, |(_, _, v)| violation > v) {
                worst = Some((i, bound, violation));
            }
        }
        match worst {
            Some((i, bound, _)) => pinned[i] = Some(bound),
            None => {
                // Every free coordinate fits: finalize.
                for i in 0..d {
                    if pinned[i].is_none() {
                        pinned[i] = Some(budget * raw[i] / free_mass);
                    }
                }
                break;
            }
        }
    }
    pinned
        .into_iter()
        .map(|p| p.expect("all coordinates resolved").clamp(lo, hi))
        .collect()
}
