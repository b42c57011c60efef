//! Plain-text projections of the JSON results.

use std::fmt::Write;

use lungbench_core::{AucEstimate, FrocBootstrap, FrocCurve, FrocGroupRow, SubgroupRow};

pub fn froc_table(curve: &FrocCurve, boot: Option<&FrocBootstrap>, groups: Option<&[FrocGroupRow]>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scans {}  annotations {}", curve.n_scans, curve.n_annotations);
    let _ = writeln!(s, "{:>8}  {:>11}  {}", "FP/scan", "sensitivity", if boot.is_some() { "95% CI" } else { "" });
    for k in 0..curve.fp_rates.len() {
        let ci = boot.map(|b| format!("[{:.4}, {:.4}]", b.sensitivities[k].low, b.sensitivities[k].high));
        let _ = writeln!(s, "{:>8}  {:>11.4}  {}", curve.fp_rates[k], curve.sensitivities[k], ci.unwrap_or_default());
    }
    let ci = boot.map(|b| format!("[{:.4}, {:.4}]", b.cpm.low, b.cpm.high));
    let _ = writeln!(s, "{:>8}  {:>11.4}  {}", "CPM", curve.cpm, ci.unwrap_or_default());
    if let Some(groups) = groups {
        let _ = writeln!(s, "\n{:<16} {:>6} {:>12} {:>8}", "group", "scans", "annotations", "CPM");
        for g in groups {
            let cpm = g.curve.as_ref().map_or("n/a".to_string(), |c| format!("{:.4}", c.cpm));
            let _ = writeln!(s, "{:<16} {:>6} {:>12} {:>8}", g.group, g.n_scans, g.n_annotations, cpm);
        }
    }
    s
}

fn auc_row(s: &mut String, group: &str, n: usize, n_pos: usize, n_neg: usize, e: Option<&AucEstimate>, why: Option<&str>) {
    let (auc, ci) = match e {
        Some(e) => (format!("{:.4}", e.auc), format!("[{:.4}, {:.4}]", e.ci_low, e.ci_high)),
        None => ("n/a".to_string(), why.unwrap_or("").to_string()),
    };
    let _ = writeln!(s, "{group:<16} {n:>6} {n_pos:>6} {n_neg:>6} {auc:>8}  {ci}");
}

pub fn auc_table(overall: &AucEstimate, groups: Option<&[SubgroupRow]>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>6} {:>6} {:>6} {:>8}  {:.0}% CI", "group", "n", "pos", "neg", "AUC", overall.level * 100.0);
    let n = overall.n_pos + overall.n_neg;
    auc_row(&mut s, "overall", n, overall.n_pos, overall.n_neg, Some(overall), None);
    for g in groups.unwrap_or_default() {
        auc_row(&mut s, &g.group, g.n, g.n_pos, g.n_neg, g.estimate.as_ref(), g.insufficient.as_deref());
    }
    s
}
