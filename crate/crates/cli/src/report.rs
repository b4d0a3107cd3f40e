//! Text tables and CSV shared by the subcommands.

use std::fmt::Write;

use serde_json::{json, Value};

use paqdet::analysis::{CostReport, EpochMetrics};
use paqdet::data::{Dataset, SplitName, CLASS_NAMES};
use paqdet::eval::APResult;

fn fmt_ap(v: Option<&f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

pub fn class_count_table(ds: &Dataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>7} {:>7} {:>7} {:>7}", "Class", "train", "val", "test", "total");
    let splits = [SplitName::Train, SplitName::Val, SplitName::Test].map(|n| ds.split(n).class_counts());
    let mut totals = [0usize; 4];
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let row: Vec<usize> = splits.iter().map(|counts| counts.get(c).copied().unwrap_or(0)).collect();
        let total: usize = row.iter().sum();
        let _ = writeln!(s, "{name:<14} {:>7} {:>7} {:>7} {total:>7}", row[0], row[1], row[2]);
        for (t, v) in totals.iter_mut().zip(row.iter().chain([total].iter())) {
            *t += v;
        }
    }
    let _ = writeln!(
        s,
        "{:<14} {:>7} {:>7} {:>7} {:>7}",
        "All", totals[0], totals[1], totals[2], totals[3]
    );
    s
}

/// One row per class plus the mean; AP values in percent, `-` for classes
/// without ground truth.
pub fn ap_table(r: &APResult, instances: &[usize]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>9} {:>7} {:>9}", "Class", "instances", "AP50", "AP50:95");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let _ = writeln!(
            s,
            "{name:<14} {:>9} {:>7} {:>9}",
            instances.get(c).copied().unwrap_or(0),
            fmt_ap(r.per_class_ap50.get(&c)),
            fmt_ap(r.per_class_ap5095.get(&c))
        );
    }
    let _ = writeln!(
        s,
        "{:<14} {:>9} {:>7.1} {:>9.1}",
        "All",
        instances.iter().sum::<usize>(),
        100.0 * r.map50,
        100.0 * r.map5095
    );
    let _ = writeln!(s, "precision {:.3}  recall {:.3}", r.precision, r.recall);
    s
}

pub fn activation_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(
        "epoch,mode,train_loss,lr,matched_fraction,gini_query_matches,gini_query_grads,gini_pattern_grads,map50,map5095\n",
    );
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.mode,
            m.train_loss,
            m.lr,
            m.matched_fraction,
            m.gini_query_matches,
            m.gini_query_grads,
            m.gini_pattern_grads,
            m.map50,
            m.map5095
        );
    }
    s
}

pub struct RunSummary {
    pub name: String,
    pub last: EpochMetrics,
    pub cost: CostReport,
    pub closed_form_paq_params: usize,
    pub rare: Vec<usize>,
    pub has_checkpoint: bool,
}

impl RunSummary {
    fn rare_mean(&self, rare: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = rare.iter().filter_map(|c| self.last.per_class_ap50.get(c).copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.4}", b - a),
        _ => "-".to_string(),
    }
}

pub fn ab_table(a: &RunSummary, b: &RunSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "A: {} ({}, epoch {})", a.name, a.last.mode, a.last.epoch);
    let _ = writeln!(s, "B: {} ({}, epoch {})", b.name, b.last.mode, b.last.epoch);
    let _ = writeln!(s, "{:<22} {:>12} {:>12} {:>10}", "metric", "A", "B", "B-A");
    let mut row = |name: &str, x: Option<f64>, y: Option<f64>| {
        let _ = writeln!(s, "{name:<22} {:>12} {:>12} {:>10}", opt(x), opt(y), delta(x, y));
    };
    row("map50", Some(a.last.map50), Some(b.last.map50));
    row("map50:95", Some(a.last.map5095), Some(b.last.map5095));
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        row(
            &format!("AP50 {name}"),
            a.last.per_class_ap50.get(&c).copied(),
            b.last.per_class_ap50.get(&c).copied(),
        );
    }
    row("rare-class AP50 mean", a.rare_mean(&a.rare), b.rare_mean(&a.rare));
    row("matched_fraction", Some(a.last.matched_fraction), Some(b.last.matched_fraction));
    row("gini query matches", Some(a.last.gini_query_matches), Some(b.last.gini_query_matches));
    row("gini query grads", Some(a.last.gini_query_grads), Some(b.last.gini_query_grads));
    row("gini pattern grads", Some(a.last.gini_pattern_grads), Some(b.last.gini_pattern_grads));
    let _ = writeln!(s, "{:<22} {:>12} {:>12}", "params", a.cost.total_params, b.cost.total_params);
    let _ = writeln!(s, "{:<22} {:>12} {:>12}", "query module params", a.cost.paq_params, b.cost.paq_params);
    let _ = writeln!(
        s,
        "{:<22} {:>12} {:>12}",
        "  closed form", a.closed_form_paq_params, b.closed_form_paq_params
    );
    let _ = writeln!(s, "{:<22} {:>12} {:>12}", "MACs/forward", a.cost.total_flops, b.cost.total_flops);
    let _ = writeln!(
        s,
        "{:<22} {:>11.2}% {:>11.2}%",
        "query module MACs",
        100.0 * a.cost.paq_flop_fraction(),
        100.0 * b.cost.paq_flop_fraction()
    );
    let rare: Vec<&str> = a.rare.iter().filter_map(|&c| CLASS_NAMES.get(c).copied()).collect();
    let _ = writeln!(s, "rare classes: {}", rare.join(", "));
    s
}

fn side_json(r: &RunSummary) -> Value {
    json!({
        "run": r.name,
        "mode": r.last.mode,
        "epoch": r.last.epoch,
        "map50": r.last.map50,
        "map5095": r.last.map5095,
        "per_class_ap50": r.last.per_class_ap50,
        "per_class_ap5095": r.last.per_class_ap5095,
        "rare_ap50_mean": r.rare_mean(&r.rare),
        "matched_fraction": r.last.matched_fraction,
        "gini_query_matches": r.last.gini_query_matches,
        "gini_query_grads": r.last.gini_query_grads,
        "gini_pattern_grads": r.last.gini_pattern_grads,
        "cost": r.cost,
        "paq_params_closed_form": r.closed_form_paq_params,
        "has_checkpoint": r.has_checkpoint,
    })
}

pub fn ab_json(a: &RunSummary, b: &RunSummary) -> Value {
    json!({
        "a": side_json(a),
        "b": side_json(b),
        "delta_map50": b.last.map50 - a.last.map50,
        "delta_map5095": b.last.map5095 - a.last.map5095,
    })
}
