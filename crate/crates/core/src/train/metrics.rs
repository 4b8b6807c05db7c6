use serde::Serialize;

use crate::data::Dataset;
use crate::model::Covt;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

/// Class indices ordered by descending score, ties to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Top-1/top-5 percentages and confusion counts from `[N, K]` logits.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let k = logits.shape()[1];
    let mut confusion = vec![vec![0; k]; k];
    let (mut hit1, mut hit5) = (0, 0);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let order = ranking(row);
        confusion[label][order[0]] += 1;
        hit1 += (order[0] == label) as usize;
        hit5 += order.iter().take(5).any(|&c| c == label) as usize;
    }
    let n = labels.len();
    Ok(EvalReport { top1: 100.0 * hit1 as f64 / n as f64, top5: 100.0 * hit5 as f64 / n as f64, confusion, count: n })
}

const EVAL_CHUNK: usize = 16;

/// Inference-mode logits for every item, in dataset order.
pub fn predict(model: &Covt, dataset: &Dataset) -> Result<Tensor> {
    let chunks: Vec<Vec<usize>> =
        (0..dataset.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let run = |idx: &Vec<usize>| model.logits(&dataset.batch_images(idx));
    #[cfg(feature = "parallel")]
    let parts: Vec<Tensor> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Tensor> = chunks.iter().map(run).collect::<Result<_>>()?;
    let k = model.config.num_classes;
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new([dataset.len(), k], data)?)
}

pub fn evaluate(model: &Covt, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let labels: Vec<usize> = dataset.items.iter().map(|s| s.label).collect();
    score_logits(&predict(model, dataset)?, &labels)
}
