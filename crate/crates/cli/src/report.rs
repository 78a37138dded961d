//! Metrics, Bayesian-bootstrap intervals, and deterministic text output.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Default bootstrap replicate count.
pub const BOOTSTRAP_REPLICATES: usize = 10_000;

/// Mean log predictive density of the true labels.
pub fn mlpd(log_probs: &[f64]) -> f64 {
    log_probs.iter().sum::<f64>() / log_probs.len() as f64
}

pub fn accuracy(correct: &[f64]) -> f64 {
    correct.iter().sum::<f64>() / correct.len() as f64
}

/// Bayesian-bootstrap 95% interval of the mean of `values`: each replicate
/// reweights the observations with normalized unit-exponential draws.
pub fn bayesian_bootstrap95(values: &[f64], replicates: usize, seed: u64) -> (f64, f64) {
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let mut weights = Vec::with_capacity(n);
        let mut total = 0.0;
        for _ in 0..n {
            let e = -(1.0 - rng.gen::<f64>()).ln();
            weights.push(e);
            total += e;
        }
        let stat: f64 = values
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w / total)
            .sum();
        stats.push(stat);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| stats[((replicates - 1) as f64 * q).round() as usize];
    let point = values.iter().sum::<f64>() / n as f64;
    // The interval must bracket the point estimate.
    (pick(0.025).min(point), pick(0.975).max(point))
}

/// Fixed-width float for report bodies.
pub fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "NA".to_string()
    }
}

/// Full-precision float for values that must round-trip.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// A line-oriented report assembled in memory and written atomically, so
/// output bytes depend only on the computed values.
#[derive(Default)]
pub struct Report {
    lines: Vec<String>,
}

impl Report {
    pub fn new(title: &str) -> Self {
        Self {
            lines: vec![format!("# {title}")],
        }
    }

    pub fn kv(&mut self, key: &str, value: impl AsRef<str>) {
        self.lines.push(format!("{key}\t{}", value.as_ref()));
    }

    pub fn raw(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    pub fn blank(&mut self) {
        self.lines.push(String::new());
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: Option<&str>) -> anyhow::Result<()> {
        let body = self.render();
        print!("{body}");
        if let Some(p) = path {
            std::fs::write(p, body)?;
        }
        Ok(())
    }
}
