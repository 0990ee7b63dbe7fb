//! Assembling model inputs and targets from dataset samples.

use crate::datapipe::{Dataset, ExposureSelection, Sample};
use crate::models::{Batch, MultitaskTargets};
use crate::tensor::{Element, Tensor};

/// Stacks the samples' power histories and per-step image tensors into
/// one batch. All samples must share the history length.
pub fn assemble_batch<T: Element>(
    dataset: &Dataset,
    samples: &[&Sample],
    selection: ExposureSelection,
    with_images: bool,
) -> Batch<T> {
    let n = samples.len();
    assert!(n > 0, "empty batch");
    let k = samples[0].step_q.len();

    let mut power = Vec::with_capacity(n * k);
    for s in samples {
        assert_eq!(s.step_q.len(), k, "inconsistent history length in batch");
        power.extend(s.step_q.iter().map(|&q| T::from_f64_lossy(q)));
    }
    let power_history = Tensor::new(vec![n, k], power).expect("power batch geometry");

    let image_steps = if with_images {
        let h = dataset.meta.resolution;
        let c = selection.channel_count();
        (0..k)
            .map(|step| {
                let mut data = Vec::with_capacity(n * c * h * h);
                for s in samples {
                    let rec = &dataset.days[s.day_index].minutes[s.step_minute_idx[step]];
                    let t: Tensor<T> = rec.stack.to_tensor(selection);
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![n, c, h, h], data).expect("image batch geometry")
            })
            .collect()
    } else {
        Vec::new()
    };

    Batch {
        power_history,
        image_steps,
    }
}

/// Main-task target Δq as an [N, 1] tensor.
pub fn delta_q_tensor<T: Element>(samples: &[&Sample]) -> Tensor<T> {
    Tensor::new(
        vec![samples.len(), 1],
        samples
            .iter()
            .map(|s| T::from_f64_lossy(s.delta_q))
            .collect(),
    )
    .expect("target geometry")
}

/// Full multi-task targets for a batch.
pub fn assemble_targets<T: Element>(samples: &[&Sample]) -> MultitaskTargets<T> {
    let n = samples.len();
    let k = samples[0].step_q.len();
    let step_q = (0..k)
        .map(|step| {
            Tensor::new(
                vec![n, 1],
                samples
                    .iter()
                    .map(|s| T::from_f64_lossy(s.step_q[step]))
                    .collect(),
            )
            .expect("geometry")
        })
        .collect();
    let step_theta = (0..k)
        .map(|step| {
            let mut data = Vec::with_capacity(2 * n);
            for s in samples {
                data.push(T::from_f64_lossy(s.step_theta[step][0]));
                data.push(T::from_f64_lossy(s.step_theta[step][1]));
            }
            Tensor::new(vec![n, 2], data).expect("geometry")
        })
        .collect();
    let mut dtheta = Vec::with_capacity(2 * n);
    for s in samples {
        dtheta.push(T::from_f64_lossy(s.delta_theta[0]));
        dtheta.push(T::from_f64_lossy(s.delta_theta[1]));
    }
    MultitaskTargets {
        delta_q: delta_q_tensor(samples),
        step_q: Some(step_q),
        step_theta: Some(step_theta),
        delta_theta: Some(Tensor::new(vec![n, 2], dtheta).expect("geometry")),
        delta_s: Some(
            Tensor::new(
                vec![n, 1],
                samples
                    .iter()
                    .map(|s| T::from_f64_lossy(s.delta_s))
                    .collect(),
            )
            .expect("geometry"),
        ),
    }
}
