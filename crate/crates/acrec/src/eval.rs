//! Precision@K evaluation with a view/click breakdown and percentile
//! bootstrap confidence intervals.
//!
//! Every prediction step of every sequence is one event. The candidate set
//! is always the full vocabulary — clicked-recommendation steps get no
//! slate-restricted shortlist, so the view and click rows measure the same
//! task. A "click" event is one whose target item was in the slate shown at
//! the previous step; everything else is a "view" (navigation) event.

use rayon::prelude::*;

use crate::datapipe::EncodedSequence;
use crate::model::{forward, ModelParams, Variant};
use crate::numkernel::{topk, Rng};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_N_BOOT: usize = 30;
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    View,
    Click,
}

/// One scored prediction event.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub sequence: usize,
    pub step: usize,
    pub target: usize,
    pub hit: bool,
    pub kind: EventKind,
}

/// Point estimate plus bootstrap CI for one event subset.
#[derive(Debug, Clone, Copy)]
pub struct SubsetMetric {
    pub n: usize,
    pub precision: f64,
    pub ci: (f64, f64),
}

/// Precision@K report with global/view/click breakdown. A breakdown entry is
/// `None` when its event subset is empty (its count is then 0).
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub k: usize,
    pub global: Option<SubsetMetric>,
    pub view: Option<SubsetMetric>,
    pub click: Option<SubsetMetric>,
}

/// Percentile bootstrap CI of the mean of a boolean sample: `n_boot`
/// resamples with replacement at the original size, interval at the
/// (1−level)/2 and 1−(1−level)/2 quantiles of the resample means (linear
/// interpolation between order statistics). Deterministic given the rng.
pub fn bootstrap_ci(hits: &[bool], n_boot: usize, level: f64, rng: &mut Rng) -> (f64, f64) {
    assert!(!hits.is_empty(), "bootstrap_ci on empty sample");
    assert!(n_boot >= 1 && level > 0.0 && level < 1.0);
    let n = hits.len();
    let mut means = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut sum = 0usize;
        for _ in 0..n {
            if hits[rng.below(n)] {
                sum += 1;
            }
        }
        means.push(sum as f64 / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let quantile = |q: f64| -> f64 {
        let h = (means.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if lo + 1 < means.len() {
            means[lo] + frac * (means[lo + 1] - means[lo])
        } else {
            means[lo]
        }
    };
    let alpha = (1.0 - level) / 2.0;
    (quantile(alpha), quantile(1.0 - alpha))
}

fn subset_metric(hits: &[bool], n_boot: usize, level: f64, rng: &mut Rng) -> Option<SubsetMetric> {
    if hits.is_empty() {
        return None;
    }
    let precision = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let ci = bootstrap_ci(hits, n_boot, level, rng);
    Some(SubsetMetric { n: hits.len(), precision, ci })
}

impl MetricReport {
    /// Aggregate event records. Bootstrap order is fixed (global, view,
    /// click) so reports are reproducible for a given rng.
    pub fn from_records(
        records: &[EventRecord],
        k: usize,
        n_boot: usize,
        level: f64,
        rng: &mut Rng,
    ) -> MetricReport {
        let all: Vec<bool> = records.iter().map(|r| r.hit).collect();
        let views: Vec<bool> =
            records.iter().filter(|r| r.kind == EventKind::View).map(|r| r.hit).collect();
        let clicks: Vec<bool> =
            records.iter().filter(|r| r.kind == EventKind::Click).map(|r| r.hit).collect();
        MetricReport {
            k,
            global: subset_metric(&all, n_boot, level, rng),
            view: subset_metric(&views, n_boot, level, rng),
            click: subset_metric(&clicks, n_boot, level, rng),
        }
    }

    pub fn csv_header() -> &'static str {
        "model,K,global,view,click,ci_global_lo,ci_global_hi,ci_view_lo,ci_view_hi,\
         ci_click_lo,ci_click_hi,n_global,n_view,n_click"
    }

    pub fn csv_row(&self, model: &str) -> String {
        let prec = |m: &Option<SubsetMetric>| {
            m.map(|s| format!("{:.6}", s.precision)).unwrap_or_default()
        };
        let ci_lo =
            |m: &Option<SubsetMetric>| m.map(|s| format!("{:.6}", s.ci.0)).unwrap_or_default();
        let ci_hi =
            |m: &Option<SubsetMetric>| m.map(|s| format!("{:.6}", s.ci.1)).unwrap_or_default();
        let n = |m: &Option<SubsetMetric>| m.map(|s| s.n).unwrap_or(0);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            model,
            self.k,
            prec(&self.global),
            prec(&self.view),
            prec(&self.click),
            ci_lo(&self.global),
            ci_hi(&self.global),
            ci_lo(&self.view),
            ci_hi(&self.view),
            ci_lo(&self.click),
            ci_hi(&self.click),
            n(&self.global),
            n(&self.view),
            n(&self.click),
        )
    }

    pub fn to_text(&self, model: &str) -> String {
        let fmt = |name: &str, m: &Option<SubsetMetric>| match m {
            Some(s) => format!(
                "  {name:<6} precision@{} = {:.4}  ci95 = [{:.4}, {:.4}]  n = {}\n",
                self.k, s.precision, s.ci.0, s.ci.1, s.n
            ),
            None => format!("  {name:<6} precision@{} = n/a (0 events)\n", self.k),
        };
        let mut out = format!("model {model}\n");
        out.push_str(&fmt("global", &self.global));
        out.push_str(&fmt("view", &self.view));
        out.push_str(&fmt("click", &self.click));
        out
    }
}

/// Score every prediction step of every sequence against the full
/// vocabulary: hit ⇔ the true next item is in the model's top K.
pub fn evaluate(
    params: &ModelParams,
    variant: Variant,
    sequences: &[EncodedSequence],
    k: usize,
    rng: &mut Rng,
) -> (Vec<EventRecord>, MetricReport) {
    assert!(k >= 1 && k <= params.v_x, "K must lie in [1, V_x]");
    let per_seq: Vec<Vec<EventRecord>> = sequences
        .par_iter()
        .enumerate()
        .map(|(si, seq)| {
            let tape = forward(params, seq, variant);
            tape.steps
                .iter()
                .enumerate()
                .map(|(t, st)| {
                    let target = seq.items[t + 1];
                    let top = topk(&st.logits, k);
                    EventRecord {
                        sequence: si,
                        step: t,
                        target,
                        hit: top.contains(&target),
                        kind: if seq.click_target[t] {
                            EventKind::Click
                        } else {
                            EventKind::View
                        },
                    }
                })
                .collect()
        })
        .collect();
    let records: Vec<EventRecord> = per_seq.into_iter().flatten().collect();
    let report =
        MetricReport::from_records(&records, k, DEFAULT_N_BOOT, DEFAULT_CI_LEVEL, rng);
    (records, report)
}
