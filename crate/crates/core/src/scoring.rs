//! Anomaly scores, threshold calibration and evaluation metrics.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::{decode, encode, encode_again, GeneratorVars};
use crate::synth::{Label, Sample};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::Models;

/// Images per forward pass when scoring many samples.
pub const SCORE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    /// Distance between the latent of the input and of its reconstruction.
    Latent,
    /// Distance between the input and its reconstruction.
    Image,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Latent => "latent",
            ScoreMode::Image => "image",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(ScoreMode::Latent),
            "image" => Ok(ScoreMode::Image),
            _ => Err(Error::arg(format!("unknown score mode {s:?}"))),
        }
    }
}

/// Forward pass of a batch through `G_en`, `G_de` and `E`.
#[derive(Clone, Debug)]
pub struct Inference {
    pub input: Tensor<f32>,
    pub recon: Tensor<f32>,
    pub h_in: Tensor<f32>,
    pub h_re: Tensor<f32>,
}

pub fn infer(models: &Models, x: &Tensor<f32>) -> Result<Inference> {
    let gc = models.generator_config();
    let store = &models.generator.params;
    let mut g = Graph::new();
    let frozen: Vec<Var> = store.tensors().iter().map(|t| g.input(t.clone())).collect();
    let vars = GeneratorVars::lookup(gc, store, &frozen)?;
    let xv = g.input(x.clone());
    let h_in = encode(&mut g, gc, &vars, xv)?;
    let recon = decode(&mut g, gc, &vars, h_in)?;
    let h_re = encode_again(&mut g, gc, &vars, recon)?;
    Ok(Inference {
        input: x.clone(),
        recon: g.value(recon).clone(),
        h_in: g.value(h_in).clone(),
        h_re: g.value(h_re).clone(),
    })
}

/// Euclidean distance, accumulated in `f64`.
pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("distance between {} and {} values", a.len(), b.len())));
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// Per-image distance between two equally shaped batches.
pub fn per_image_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape().is_empty() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let per = a.numel() / a.shape()[0];
    a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| l2_distance(x, y))
        .collect()
}

impl Inference {
    pub fn scores(&self, mode: ScoreMode) -> Result<Vec<f64>> {
        match mode {
            ScoreMode::Latent => per_image_distance(&self.h_in, &self.h_re),
            ScoreMode::Image => per_image_distance(&self.input, &self.recon),
        }
    }
}

/// Score of a single `[1, c, side, side]` image.
pub fn anomaly_score(models: &Models, image: &Tensor<f32>, mode: ScoreMode) -> Result<f64> {
    if image.shape().first() != Some(&1) {
        return Err(Error::shape(format!("expected one image, got {:?}", image.shape())));
    }
    Ok(infer(models, image)?.scores(mode)?[0])
}

pub fn score_samples(models: &Models, samples: &[Sample], mode: ScoreMode) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(infer(models, &Sample::batch(&refs)?)?.scores(mode)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Predicted {
    Normal,
    Disease,
}

impl fmt::Display for Predicted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predicted::Normal => "normal",
            Predicted::Disease => "disease",
        })
    }
}

/// A score at or above `phi` is a disease call.
pub fn classify(score: f64, phi: f64) -> Predicted {
    if score >= phi {
        Predicted::Disease
    } else {
        Predicted::Normal
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    pub id: String,
    pub score: f64,
    pub predicted: Predicted,
    pub truth: Option<Label>,
    pub mode: ScoreMode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    /// `labels[i]` is true for disease.
    pub fn at(scores: &[f64], labels: &[bool], phi: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (classify(s, phi) == Predicted::Disease, y) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn sensitivity(&self) -> f64 {
        let pos = self.tp + self.fn_;
        if pos == 0 {
            0.0
        } else {
            self.tp as f64 / pos as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub phi: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
}

fn check_two_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "need both classes, got {pos} disease and {neg} normal"
        )));
    }
    Ok((pos, neg))
}

/// Candidate thresholds: the lowest score, every midpoint between
/// consecutive distinct scores, and the value just above the highest score.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    if let (Some(&lo), Some(&hi)) = (s.first(), s.last()) {
        out.push(lo);
        out.extend(s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        out.push(hi.next_up());
    }
    out
}

/// Threshold with the best accuracy on `(score, is_disease)` pairs; ties go
/// to higher sensitivity, then to the smaller threshold.
pub fn calibrate_threshold(val: &[(f64, bool)]) -> Result<Calibration> {
    let labels: Vec<bool> = val.iter().map(|v| v.1).collect();
    let (pos, neg) = check_two_classes(&labels)?;
    if let Some(bad) = val.iter().find(|v| !v.0.is_finite()) {
        return Err(Error::Numeric(format!("validation score {}", bad.0)));
    }
    let mut sorted: Vec<(f64, bool)> = val.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sweep upward: at each candidate, everything below it is called normal.
    let candidates = threshold_candidates(&val.iter().map(|v| v.0).collect::<Vec<_>>());
    let mut below = 0;
    let (mut tn, mut fn_) = (0usize, 0usize);
    let mut best: Option<(usize, usize, f64)> = None;
    for phi in candidates {
        while below < sorted.len() && sorted[below].0 < phi {
            if sorted[below].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            below += 1;
        }
        let tp = pos - fn_;
        let correct = tp + tn;
        let better = match best {
            None => true,
            Some((c, t, _)) => correct > c || (correct == c && tp > t),
        };
        if better {
            best = Some((correct, tp, phi));
        }
    }
    let (correct, tp, phi) = best.expect("at least one candidate");
    Ok(Calibration {
        phi,
        accuracy: correct as f64 / (pos + neg) as f64,
        sensitivity: tp as f64 / pos as f64,
    })
}

/// Mann-Whitney AUC with ties counted as half, via one sort.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = check_two_classes(labels)?;
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {bad}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut correct, mut ties) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        correct += p * neg_below;
        ties += p * n;
        neg_below += n;
        i = j;
    }
    Ok((correct as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
}

/// `(fpr, tpr)` points from the strictest threshold to the loosest.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_two_classes(labels)?;
    let mut c = threshold_candidates(scores);
    c.reverse();
    Ok(c.into_iter()
        .map(|phi| {
            let m = Confusion::at(scores, labels, phi);
            (m.fp as f64 / neg as f64, m.tp as f64 / pos as f64)
        })
        .collect())
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in points {
        s.push_str(&format!("{f:.6},{t:.6}\n"));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub phi: f64,
    pub confusion: Confusion,
}

impl EvalSummary {
    pub const CSV_HEADER: &'static str = "auc,acc,sen,phi,tp,tn,fp,fn";

    pub fn from_scores(scores: &[f64], labels: &[bool], phi: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let confusion = Confusion::at(scores, labels, phi);
        Ok(EvalSummary {
            auc: auc(scores, labels)?,
            acc: confusion.accuracy(),
            sen: confusion.sensitivity(),
            phi,
            confusion,
        })
    }

    pub fn csv_row(&self) -> String {
        let c = &self.confusion;
        format!(
            "{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.auc, self.acc, self.sen, self.phi, c.tp, c.tn, c.fp, c.fn_
        )
    }
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.confusion;
        write!(
            f,
            "AUC {:.4}  Acc {:.4}  Sen {:.4}  (phi {:.6}; TP {} TN {} FP {} FN {})",
            self.auc, self.acc, self.sen, self.phi, c.tp, c.tn, c.fp, c.fn_
        )
    }
}

/// Scores every sample, applies `phi` and summarizes. Samples need labels.
pub fn evaluate(
    models: &Models,
    samples: &[Sample],
    phi: f64,
    mode: ScoreMode,
) -> Result<(EvalSummary, Vec<AnomalyReport>)> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let scores = score_samples(models, samples, mode)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label.is_anomalous()).collect();
    let summary = EvalSummary::from_scores(&scores, &labels, phi)?;
    let reports = samples
        .iter()
        .zip(&scores)
        .map(|(s, &score)| AnomalyReport {
            id: s.id.clone(),
            score,
            predicted: classify(score, phi),
            truth: Some(s.label),
            mode,
        })
        .collect();
    Ok((summary, reports))
}

pub fn scores_csv(reports: &[AnomalyReport]) -> String {
    let mut s = String::from("sample_id,score,label,predicted\n");
    for r in reports {
        let label = r.truth.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{},{}\n", r.id, r.score, label, r.predicted));
    }
    s
}

pub fn write_scores_csv(path: &Path, reports: &[AnomalyReport]) -> Result<()> {
    fs::write(path, scores_csv(reports))?;
    Ok(())
}
