//! Open-set inference and scoring: the entropy-threshold decision rule, the
//! per-class accuracy metrics, and whole-domain evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Graph};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::style::Mode;
use crate::types::{LabelSpace, SampleRecord};

/// Entropy threshold in bits: half the entropy of a uniform distribution
/// over the known classes.
pub fn rejection_threshold_bits(num_known: usize) -> f64 {
    0.5 * (num_known as f64).log2()
}

/// Shannon entropy in bits of a probability vector; zero-mass entries
/// contribute nothing.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.log2())
        .sum()
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

#[derive(Debug, Clone)]
pub struct OpenSetPrediction {
    /// Softmax scores over the known classes.
    pub scores: Vec<f64>,
    pub entropy_bits: f64,
    /// Known class id, or the label space's unknown sentinel.
    pub predicted: usize,
}

/// Decision rule on known-class probabilities: accept the argmax class only
/// when the score entropy is strictly below the threshold; a tie rejects.
pub fn decide_scores(scores: &[f64], label_space: &LabelSpace) -> Result<OpenSetPrediction> {
    let k = label_space.num_known();
    if scores.len() != k {
        return Err(Error::shape(format!(
            "{} scores for {} known classes",
            scores.len(),
            k
        )));
    }
    let h = entropy_bits(scores);
    let predicted = if h < rejection_threshold_bits(k) {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    } else {
        label_space.unknown_token()
    };
    Ok(OpenSetPrediction {
        scores: scores.to_vec(),
        entropy_bits: h,
        predicted,
    })
}

/// Decision rule on raw class logits.
pub fn decide_logits(logits: &[f64], label_space: &LabelSpace) -> Result<OpenSetPrediction> {
    decide_scores(&stable_softmax(logits), label_space)
}

/// Evaluation metrics as fractions in [0, 1]. `acc` averages the per-class
/// accuracies of every class that actually appears in the ground truth, with
/// "unknown" counting as one class. Unknown-dependent metrics are absent
/// when no unknown ground truth exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_known: Option<f64>,
    pub acc_unknown: Option<f64>,
    pub acc: f64,
    pub hs: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub total: usize,
}

/// Score predictions against ground truth. Both slices hold class ids where
/// `num_known` is the unknown sentinel.
pub fn compute_metrics(gt: &[usize], pred: &[usize], num_known: usize) -> Result<Metrics> {
    if gt.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} ground-truth labels vs {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::data("cannot score an empty evaluation set"));
    }
    let classes = num_known + 1;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        if g >= classes || p >= classes {
            return Err(Error::data(format!(
                "label {} outside the {} known classes plus unknown",
                g.max(p),
                num_known
            )));
        }
        total[g] += 1;
        if g == p {
            correct[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            if total[c] > 0 {
                Some(correct[c] as f64 / total[c] as f64)
            } else {
                None
            }
        })
        .collect();

    let known_accs: Vec<f64> = per_class[..num_known].iter().flatten().copied().collect();
    let acc_known = if known_accs.is_empty() {
        None
    } else {
        Some(known_accs.iter().sum::<f64>() / known_accs.len() as f64)
    };
    let acc_unknown = per_class[num_known];

    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let acc = present.iter().sum::<f64>() / present.len() as f64;

    let hs = match (acc_known, acc_unknown) {
        (Some(a), Some(u)) => {
            if a + u > 0.0 {
                Some(2.0 * a * u / (a + u))
            } else {
                Some(0.0)
            }
        }
        _ => None,
    };

    Ok(Metrics {
        acc_known,
        acc_unknown,
        acc,
        hs,
        per_class,
        total: gt.len(),
    })
}

/// One scored sample, as written to the predictions dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub domain: String,
    pub true_label: usize,
    pub scores: Vec<f64>,
    pub entropy_bits: f64,
    pub predicted: usize,
}

/// Run the model over a sample list in eval mode and score it. Chunking by
/// `batch_size` cannot change the outputs: normalization is per-sample.
pub fn evaluate_domain(
    model: &Model,
    normalizer: &Normalizer,
    label_space: &LabelSpace,
    samples: &[SampleRecord],
    batch_size: usize,
) -> Result<(Vec<PredictionRecord>, Metrics)> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate an empty sample list"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let (h, w) = (chunk[0].image.shape()[1], chunk[0].image.shape()[2]);
        let mut batch = Arr::zeros(ndarray::IxDyn(&[chunk.len(), 3, h, w]));
        for (bi, s) in chunk.iter().enumerate() {
            let img = normalizer.apply(&s.image);
            if img.shape() != [3, h, w] {
                return Err(Error::shape(format!(
                    "sample {} has shape {:?}, expected 3x{}x{}",
                    s.id,
                    s.image.shape(),
                    h,
                    w
                )));
            }
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        batch[[bi, c, y, x]] = img[[c, y, x]];
                    }
                }
            }
        }
        let mut g = Graph::new();
        let vars = model.params.to_graph_frozen(&mut g);
        let x = g.constant(batch);
        let out = model.forward(&mut g, &vars, x, Mode::Eval, None)?;
        let logits = g.value(out.class_logits);
        for (bi, s) in chunk.iter().enumerate() {
            let row: Vec<f64> = (0..model.cfg.num_known).map(|k| logits[[bi, k]]).collect();
            let p = decide_logits(&row, label_space)?;
            records.push(PredictionRecord {
                id: s.id.clone(),
                domain: s.domain.clone(),
                true_label: s.label,
                scores: p.scores,
                entropy_bits: p.entropy_bits,
                predicted: p.predicted,
            });
        }
    }
    let gt: Vec<usize> = records.iter().map(|r| r.true_label).collect();
    let pred: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let metrics = compute_metrics(&gt, &pred, label_space.num_known())?;
    Ok((records, metrics))
}
