use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Batch;
use crate::degrade::{DatasetBundle, Pairing, Task};
use crate::error::{ensure, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Deterministic minibatches: the batch for `step` depends only on
/// `(seed, step)`, so a resumed run sees the same data.
pub trait BatchSource {
    fn batch(&self, step: u64, batch_size: usize, seed: u64) -> Result<Batch>;
}

/// Task-stratified sampling from a dataset bundle. Slot `j` of a batch gets
/// task `j mod K`. Paired bundles give `x = x*`; unpaired bundles draw the
/// clean batch independently of the degraded one.
pub struct BundleSource<'a> {
    bundle: &'a DatasetBundle,
    by_task: Vec<(Task, Vec<usize>)>,
}

impl<'a> BundleSource<'a> {
    pub fn new(bundle: &'a DatasetBundle) -> Result<Self> {
        let mut by_task: Vec<(Task, Vec<usize>)> = Vec::new();
        for t in bundle.tasks() {
            let idx: Vec<usize> = (0..bundle.degraded.len()).filter(|&i| bundle.degraded[i].task == t).collect();
            if !idx.is_empty() {
                by_task.push((t, idx));
            }
        }
        ensure!(!by_task.is_empty(), "dataset has no degraded items");
        ensure!(!bundle.clean_pool.is_empty(), "dataset has no clean images");
        Ok(BundleSource { bundle, by_task })
    }
}

impl BatchSource for BundleSource<'_> {
    fn batch(&self, step: u64, batch_size: usize, seed: u64) -> Result<Batch> {
        ensure!(batch_size > 0, "batch size must be positive");
        let mut rng = rng_for(seed, "batch", step);
        let mut ys = Vec::with_capacity(batch_size);
        let mut tasks = Vec::with_capacity(batch_size);
        let mut targets = Vec::with_capacity(batch_size);
        for j in 0..batch_size {
            let (task, idx) = &self.by_task[j % self.by_task.len()];
            let i = idx[rng.gen_range(0..idx.len())];
            let item = &self.bundle.degraded[i];
            ys.push(item.image.clone());
            tasks.push(*task);
            if let Some(c) = item.clean_index {
                targets.push(self.bundle.clean_pool[c].clone());
            }
        }
        let y = Tensor::stack(&ys)?;
        match self.bundle.pairing {
            Pairing::Paired => {
                ensure!(targets.len() == batch_size, "paired dataset item without ground truth");
                let xs = Tensor::stack(&targets)?;
                Ok(Batch {
                    y,
                    x: xs.clone(),
                    x_star: Some(xs),
                    tasks,
                })
            }
            Pairing::Unpaired => {
                let pool = &self.bundle.clean_pool;
                let xs: Vec<Tensor> = (0..batch_size).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect();
                Ok(Batch {
                    y,
                    x: Tensor::stack(&xs)?,
                    x_star: None,
                    tasks,
                })
            }
        }
    }
}

/// `P = N(mu_p, sd_p^2)` and `Q = N(mu_q, sd_q^2)` on the real line, as
/// `[B,1]` columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPair {
    pub p: (f64, f64),
    pub q: (f64, f64),
}

impl BatchSource for GaussianPair {
    fn batch(&self, step: u64, batch_size: usize, seed: u64) -> Result<Batch> {
        ensure!(batch_size > 0, "batch size must be positive");
        let np = Normal::new(self.p.0, self.p.1).map_err(|e| Error::contract(e.to_string()))?;
        let nq = Normal::new(self.q.0, self.q.1).map_err(|e| Error::contract(e.to_string()))?;
        let mut ry = rng_for(seed, "batch-p", step);
        let mut rx = rng_for(seed, "batch-q", step);
        let y = (0..batch_size).map(|_| np.sample(&mut ry)).collect();
        let x = (0..batch_size).map(|_| nq.sample(&mut rx)).collect();
        Ok(Batch {
            y: Tensor::new(vec![batch_size, 1], y)?,
            x: Tensor::new(vec![batch_size, 1], x)?,
            x_star: None,
            tasks: vec![Task::Noise; batch_size],
        })
    }
}
