//! Finite-difference gradient check over dense, recurrent and mixed stacks.

use anyhow::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cogradar_core::neural::{gradient_check, Batch, NetworkSpec, QNetwork, WeightInit};

/// Largest tolerated relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackReport {
    pub stack: &'static str,
    pub dense_max_rel_error: f64,
    pub lstm_max_rel_error: Option<f64>,
    pub n_checked: usize,
}

impl StackReport {
    pub fn max_rel_error(&self) -> f64 {
        self.dense_max_rel_error.max(self.lstm_max_rel_error.unwrap_or(0.0))
    }
}

fn stacks() -> [(&'static str, NetworkSpec); 3] {
    let spec = |hidden: Vec<usize>, lstm: Option<usize>| NetworkSpec {
        input_dim: 7,
        hidden,
        lstm_units: lstm,
        output_dim: 4,
        hidden_init: WeightInit::Glorot,
    };
    [
        ("dense", spec(vec![9, 6], None)),
        ("lstm", spec(vec![], Some(5))),
        ("mixed", spec(vec![8], Some(5))),
    ]
}

fn random_batch(rng: &mut ChaCha8Rng, input_dim: usize, steps: usize, batch: usize, n_actions: usize) -> Batch {
    Batch {
        inputs: (0..steps)
            .map(|_| Array2::from_shape_fn((batch, input_dim), |_| rng.gen_range(-1.0..1.0)))
            .collect(),
        actions: (0..batch).map(|_| rng.gen_range(0..n_actions)).collect(),
        targets: (0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Worst relative error per stack over `n_seeds` random networks and
/// batches.
pub fn run(n_seeds: u64) -> Result<Vec<StackReport>> {
    let mut out = Vec::new();
    for (name, spec) in stacks() {
        let mut report = StackReport {
            stack: name,
            dense_max_rel_error: 0.0,
            lstm_max_rel_error: None,
            n_checked: 0,
        };
        for seed in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = QNetwork::new(&spec, &mut rng)?;
            let steps = if spec.lstm_units.is_some() { 4 } else { 1 };
            let batch = random_batch(&mut rng, spec.input_dim, steps, 3, spec.output_dim);
            let r = gradient_check(&net, &batch, 1e-5)?;
            report.dense_max_rel_error = report.dense_max_rel_error.max(r.dense_max_rel_error);
            if let Some(e) = r.lstm_max_rel_error {
                let cur = report.lstm_max_rel_error.get_or_insert(0.0);
                *cur = cur.max(e);
            }
            report.n_checked += r.n_checked;
        }
        out.push(report);
    }
    Ok(out)
}

pub fn format_report(reports: &[StackReport]) -> String {
    let mut s = String::from("stack,dense_max_rel_error,lstm_max_rel_error,parameters_checked\n");
    for r in reports {
        let lstm = r.lstm_max_rel_error.map(|e| format!("{e:e}")).unwrap_or_default();
        s.push_str(&format!("{},{:e},{},{}\n", r.stack, r.dense_max_rel_error, lstm, r.n_checked));
    }
    s
}
