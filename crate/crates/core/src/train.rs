//! Minibatch training loop shared by every trainable component.
//!
//! Per-example losses in a minibatch are evaluated in parallel, then their
//! gradients are summed in example order, so results do not depend on the
//! number of worker threads.

use kig_tensor::{Adam, Gradients, ParamSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 8, lr: 1e-3, clip: 1.0, seed: 0, max_steps: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Runs Adam over `items` in shuffled minibatches. `loss_fn` returns the
/// loss of one example and its gradients with respect to `params`.
pub fn train<T, F>(what: &str, items: &[T], params: &mut ParamSet, opts: &TrainOpts, loss_fn: F) -> Result<TrainLog>
where
    T: Sync,
    F: Fn(&ParamSet, &T) -> Result<(f64, Gradients)> + Sync,
{
    if items.is_empty() {
        return Err(Error::Config(format!("{what}: no training examples")));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config(format!("{what}: batch size must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr).with_clip(opts.clip);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    params.zero_grads();
    'epochs: for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for batch in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| log.steps >= m) {
                if seen > 0 {
                    log.epoch_losses.push(total / seen as f64);
                }
                break 'epochs;
            }
            let snapshot: &ParamSet = params;
            let results: Vec<Result<(f64, Gradients)>> =
                batch.par_iter().map(|&i| loss_fn(snapshot, &items[i])).collect();
            let mut merged = Gradients::default();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                merged.merge(g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!("{what}: non-finite loss at step {}", log.steps)));
            }
            merged.accumulate_into(params, 1.0 / batch.len() as f64)?;
            if !params.grad_norm().is_finite() {
                return Err(Error::Numerical(format!("{what}: non-finite gradient at step {}", log.steps)));
            }
            adam.step(params)?;
            log.steps += 1;
            total += batch_loss;
            seen += batch.len();
        }
        let mean = total / seen.max(1) as f64;
        log::info!("{what}: epoch {} mean loss {mean:.4} ({} steps)", epoch + 1, log.steps);
        log.epoch_losses.push(mean);
    }
    params.assert_finite().map_err(|e| Error::Numerical(format!("{what}: {e}")))?;
    Ok(log)
}

/// Mean of `f` over `items`, evaluated in parallel and summed in order.
pub fn mean_over<T, F>(items: &[T], f: F) -> Result<f64>
where
    T: Sync,
    F: Fn(&T) -> Result<f64> + Sync,
{
    if items.is_empty() {
        return Ok(0.0);
    }
    let vals: Vec<Result<f64>> = items.par_iter().map(&f).collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kig_tensor::{Tape, Tensor};

    fn fit(seed: u64) -> (ParamSet, TrainLog) {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::zeros(&[1, 2]));
        let items: Vec<(f64, f64, f64)> = (0..40).map(|i| {
            let x = i as f64 / 10.0;
            (x, 1.0, 3.0 * x - 2.0)
        }).collect();
        let opts = TrainOpts { epochs: 60, batch_size: 8, lr: 0.1, clip: 100.0, seed, max_steps: None };
        let log = train("line", &items, &mut params, &opts, |p, &(x, one, y)| {
            let mut tape = Tape::new();
            let wv = tape.param(p, w);
            let xv = tape.constant(&Tensor::new(vec![2, 1], vec![x, one]).unwrap());
            let pred = tape.matmul(wv, xv)?;
            let target = tape.constant(&Tensor::new(vec![1, 1], vec![-y]).unwrap());
            let err = tape.add(pred, target)?;
            let sq = tape.mul(err, err)?;
            let loss = tape.sum(sq);
            let value = tape.scalar(loss);
            Ok((value, tape.backward(loss)?))
        })
        .unwrap();
        (params, log)
    }

    #[test]
    fn fits_a_line_deterministically() {
        let (p, log) = fit(1);
        let w = p.get(kig_tensor::ParamId(0)).data();
        assert!((w[0] - 3.0).abs() < 0.05 && (w[1] + 2.0).abs() < 0.1, "{w:?}");
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
        assert_eq!(fit(1).0.fingerprint(), p.fingerprint());
    }

    #[test]
    fn empty_input_is_a_config_error() {
        let mut p = ParamSet::new();
        let r = train::<u8, _>("x", &[], &mut p, &TrainOpts::default(), |_, _| unreachable!());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
