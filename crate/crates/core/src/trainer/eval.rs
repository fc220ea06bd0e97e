use crate::autodiff::{Tape, Tensor};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::nn::{Bind, Model, ParamStore};
use crate::tasks::{ConfusionMatrix, MetricValue, OdsAccumulator, RmseAccumulator, SegMap, Task};

const EVAL_BATCH: usize = 16;

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::Shape(format!("stack: {:?} vs {:?}", s, img.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::Shape("stack: no images".into()))?);
    Tensor::new(&full, data)
}

/// Target-head prediction `[N, channels, H, W]` without augmentation.
pub fn predict(model: &Model, params: &ParamStore, images: &[&Tensor], task: Task) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(stack_images(images.iter().copied())?);
    let bind = Bind::frozen(params);
    let f = model.features(&mut tape, &bind, x)?;
    let y = model.predict(&mut tape, &bind, task, f)?;
    Ok(tape.value(y).clone())
}

fn argmax_map(logits: &[f64], classes: usize, h: usize, w: usize) -> SegMap {
    let hw = h * w;
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * hw + p] > logits[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    SegMap { height: h, width: w, data }
}

/// Task metric of the target head over `samples`; auxiliary heads are unused.
pub fn evaluate(model: &Model, params: &ParamStore, samples: &[SyntheticSample], task: Task) -> Result<MetricValue> {
    evaluate_refs(model, params, &samples.iter().collect::<Vec<_>>(), task)
}

pub fn evaluate_refs(model: &Model, params: &ParamStore, samples: &[&SyntheticSample], task: Task) -> Result<MetricValue> {
    let channels = model.target_head(task)?.out_ch;
    if samples.is_empty() {
        return Err(Error::Domain("evaluate: empty dataset".into()));
    }
    let mut rmse = RmseAccumulator::default();
    let mut conf = ConfusionMatrix::new(channels);
    let mut ods = OdsAccumulator::default();
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let out = predict(model, params, &images, task)?;
        let per = out.len() / chunk.len();
        for (s, pred) in chunk.iter().zip(out.data().chunks(per)) {
            match task {
                Task::Depth => rmse.add(pred, &s.depth.data)?,
                Task::Semseg => conf.add(&argmax_map(pred, channels, s.height(), s.width()), &s.seg)?,
                Task::Boundary => ods.add(&crate::tasks::sigmoid_probs(pred), &s.boundary)?,
            }
        }
    }
    Ok(match task {
        Task::Depth => rmse.finish(),
        Task::Semseg => conf.finish(),
        Task::Boundary => ods.finish(),
    })
}
