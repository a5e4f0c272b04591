//! Synthetic rectangle segmentation task and a plain SGD loop.
//!
//! Each image is a cool, dark background with one or two warm axis-aligned
//! rectangles; the label is 1 inside any rectangle and 0 elsewhere. The
//! batch is drawn once from the seed and reused every step, so training is
//! full-batch and deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::MetaSeg;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Fixed batch of images and per-pixel labels.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    /// `n × 3 × H × W`, normalized like inference input.
    pub images: Tensor,
    /// Row-major `n × H × W` class indices.
    pub labels: Vec<usize>,
}

/// Offset mixed into the model seed so data and weights draw from
/// independent streams.
const DATA_STREAM: u64 = 0x5eed_da7a;

pub fn rectangles(seed: u64, n: usize, h: usize, w: usize) -> Result<SyntheticTask> {
    if n == 0 || h < 4 || w < 4 {
        return Err(Error::Config(format!("synthetic task needs n >= 1 and at least 4x4 images, got {n}x{h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM);
    let mut images = Vec::with_capacity(n);
    let mut labels = vec![0usize; n * h * w];
    for i in 0..n {
        let bg = [rng.gen_range(0..60), rng.gen_range(40..110), rng.gen_range(90..200)];
        let mut img = RgbImage::filled(w, h, bg);
        for _ in 0..rng.gen_range(1..=2) {
            let rh = rng.gen_range(h / 4..=h / 2);
            let rw = rng.gen_range(w / 4..=w / 2);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            let fg = [rng.gen_range(200..=255), rng.gen_range(60..200), rng.gen_range(0..60)];
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    img.pixels[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&fg);
                    labels[(i * h + y) * w + x] = 1;
                }
            }
        }
        images.push(img.to_tensor());
    }
    Ok(SyntheticTask {
        images: Tensor::concat_batch(&images)?,
        labels,
    })
}

/// Mean per-pixel cross-entropy of the full-resolution logits.
pub fn loss_and_grad(model: &MetaSeg, store: &mut ParamStore, task: &SyntheticTask, with_grad: bool) -> Result<f64> {
    let s = task.images.shape();
    let mut tape = Tape::new();
    let x = tape.input(task.images.clone());
    let g = model.forward_graph(&mut tape, store, x)?;
    let up = tape.upsample_bilinear(g.logits, s.h, s.w)?;
    let loss = tape.cross_entropy(up, &task.labels)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value}")));
    }
    if with_grad {
        store.zero_grads();
        tape.backward_scalar(loss, store)?;
    }
    Ok(value)
}

/// Run `steps` SGD updates and return `steps + 1` losses: the loss before
/// each update followed by the loss after the last one. `on_loss` sees each
/// value as it is produced.
pub fn train(
    model: &MetaSeg,
    store: &mut ParamStore,
    task: &SyntheticTask,
    steps: usize,
    lr: f64,
    mut on_loss: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let last = step == steps;
        let loss = loss_and_grad(model, store, task, !last)?;
        on_loss(step, loss);
        losses.push(loss);
        if !last {
            store.sgd_step(lr);
        }
    }
    Ok(losses)
}

/// Mean of the first and last `window` losses.
pub fn window_means(losses: &[f64], window: usize) -> (f64, f64) {
    let k = window.min(losses.len()).max(1);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}

/// Training succeeded if the last-10 mean fell below the first-10 mean.
/// A run with no updates trivially succeeds.
pub fn improved(losses: &[f64]) -> bool {
    if losses.len() < 2 {
        return true;
    }
    let (first, last) = window_means(losses, 10);
    last < first
}
