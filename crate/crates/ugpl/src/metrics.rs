//! Classification metrics: accuracy, per-class and macro F1, confusion
//! matrix, and the per-component (global / local / fused) breakdown.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Headline metrics (the fused prediction).
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub global: ComponentMetrics,
    pub local: ComponentMetrics,
    pub fused: ComponentMetrics,
    pub mean_u_g: f64,
    pub mean_w_g: f64,
}

/// confusion[label][pred]
pub fn confusion_matrix(labels: &[usize], preds: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&l, &p) in labels.iter().zip(preds) {
        m[l][p] += 1;
    }
    m
}

pub fn accuracy_from_confusion(confusion: &[Vec<usize>]) -> f64 {
    let trace: usize = confusion.iter().enumerate().map(|(i, row)| row[i]).sum();
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

/// Per-class F1 = 2TP / (2TP + FP + FN); zero when the denominator is zero.
pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    let c = confusion.len();
    (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let fn_: usize = (0..c).filter(|&j| j != k).map(|j| confusion[k][j]).sum();
            let fp: usize = (0..c).filter(|&i| i != k).map(|i| confusion[i][k]).sum();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

pub fn component_metrics(labels: &[usize], preds: &[usize], num_classes: usize) -> ComponentMetrics {
    let confusion = confusion_matrix(labels, preds, num_classes);
    let per_class = per_class_f1(&confusion);
    ComponentMetrics {
        accuracy: accuracy_from_confusion(&confusion),
        macro_f1: per_class.iter().sum::<f64>() / per_class.len() as f64,
        per_class_f1: per_class,
    }
}

/// Assemble the full report from per-sample predictions.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    labels: &[usize],
    global_preds: &[usize],
    local_preds: &[usize],
    fused_preds: &[usize],
    u_gs: &[f64],
    w_gs: &[f64],
    num_classes: usize,
) -> MetricsReport {
    let fused = component_metrics(labels, fused_preds, num_classes);
    let confusion = confusion_matrix(labels, fused_preds, num_classes);
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    MetricsReport {
        accuracy: fused.accuracy,
        macro_f1: fused.macro_f1,
        per_class_f1: fused.per_class_f1.clone(),
        confusion,
        global: component_metrics(labels, global_preds, num_classes),
        local: component_metrics(labels, local_preds, num_classes),
        fused,
        mean_u_g: mean(u_gs),
        mean_w_g: mean(w_gs),
    }
}
