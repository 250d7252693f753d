//! Toy regression task: fit `y = T·x` for a fixed random map `T` with
//! full-batch gradient descent, with the balance controller adjusting the
//! routing bias after every step.

use serde::Serialize;

use crate::balance::LoadTracker;
use crate::error::{GroveError, Result};
use crate::layer::{
    batch_forward, grove_backward_into, ForwardMode, Gradients, GroveLayer, MoeLayer,
};
use crate::math::{normal_init, Matrix, Rng, Vector};

pub struct ToyTask {
    pub target: Matrix,
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
}

impl ToyTask {
    pub fn new(d: usize, samples: usize, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 11);
        let target = normal_init(&mut rng, d, d, 0.1 / (d as f64).sqrt());
        let inputs: Vec<Vector> = (0..samples).map(|_| rng.normal_vector(d, 1.0)).collect();
        let targets = inputs
            .iter()
            .map(|x| target.matvec(x).expect("target is d × d"))
            .collect();
        ToyTask {
            target,
            inputs,
            targets,
        }
    }

    fn mse(&self, outputs: &[Vector]) -> f64 {
        let d = self.targets.first().map_or(1, Vector::len) as f64;
        let total: f64 = outputs
            .iter()
            .zip(&self.targets)
            .map(|(y, t)| {
                y.iter()
                    .zip(t.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum();
        total / (d * outputs.len() as f64)
    }

    pub fn loss(&self, layer: &GroveLayer) -> Result<f64> {
        let out = batch_forward(layer, &self.inputs, ForwardMode::Dedup)?;
        Ok(self.mse(&out.outputs))
    }

    pub fn loss_moe(&self, layer: &MoeLayer) -> Result<f64> {
        let outputs = self
            .inputs
            .iter()
            .map(|x| layer.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.mse(&outputs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainStep {
    pub step: usize,
    /// Loss before this step's update.
    pub loss: f64,
    pub max_violation: f64,
    pub rms_violation: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            learning_rate: 2.0,
        }
    }
}

fn apply(layer: &mut GroveLayer, grads: &Gradients, lr: f64) -> Result<()> {
    layer.router.weight.axpy(-lr, &grads.router)?;
    for (p, g) in layer
        .experts
        .iter_mut()
        .chain(layer.adjugates.iter_mut())
        .zip(grads.experts.iter().chain(&grads.adjugates))
    {
        p.gate.axpy(-lr, &g.gate)?;
        p.up.axpy(-lr, &g.up)?;
        p.down.axpy(-lr, &g.down)?;
    }
    Ok(())
}

pub fn train_toy(
    layer: &mut GroveLayer,
    task: &ToyTask,
    opts: &TrainOptions,
) -> Result<Vec<TrainStep>> {
    if opts.steps == 0 {
        return Err(GroveError::config("steps", "must be at least 1"));
    }
    let c = layer.config.clone();
    let mut tracker = LoadTracker::new(c.n, c.alpha, c.ema_decay).with_bias(layer.bias.clone())?;
    let batch = task.inputs.len() as f64;
    let mut history = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let out = batch_forward(layer, &task.inputs, ForwardMode::Dedup)?;
        let loss = task.mse(&out.outputs);

        let mut grads = Gradients::zeros(layer);
        for ((x, y), (t, decision)) in task
            .inputs
            .iter()
            .zip(&out.outputs)
            .zip(task.targets.iter().zip(&out.decisions))
        {
            let upstream = y.sub(t)?.scaled(2.0 / (batch * c.d as f64));
            grove_backward_into(layer, x, decision, &upstream, &mut grads)?;
        }
        apply(layer, &grads, opts.learning_rate)?;

        if step == 0 {
            tracker.set_load(out.load)?;
        } else {
            tracker.update_load(&out.load)?;
        }
        let metrics = tracker.imbalance_metrics();
        tracker.update_bias();
        layer.bias = tracker.bias.clone();

        history.push(TrainStep {
            step,
            loss,
            max_violation: metrics.max_violation,
            rms_violation: metrics.rms_violation,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::upcycle;
    use crate::config::MoeConfig;

    #[test]
    fn loss_decreases_and_reruns_match() {
        let moe = MoeLayer::random(
            MoeConfig {
                d: 8,
                n: 16,
                k: 4,
                m: 12,
            },
            3,
        )
        .unwrap();
        let task = ToyTask::new(8, 32, 5);
        let base = upcycle(&moe, 8, 4, 0.25, 0.006, 1).unwrap();
        let opts = TrainOptions {
            steps: 60,
            ..Default::default()
        };

        let mut a = base.clone();
        let ha = train_toy(&mut a, &task, &opts).unwrap();
        assert!(ha.last().unwrap().loss < ha[0].loss);
        assert_eq!(ha[0].loss, task.loss_moe(&moe).unwrap());

        let mut b = base.clone();
        let hb = train_toy(&mut b, &task, &opts).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }
}
