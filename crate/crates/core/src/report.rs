//! Evaluation report files: CSV tables, a JSON dump and two small SVG plots.
//!
//! The SVG writer emits only `line`, `polyline`, `rect` and `text`
//! elements with coordinates rounded to two decimals, so output is stable
//! across runs and platforms.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::metrics::{quantile_sorted, EvalReport, RiskRow};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in [
        ("n", r.n as f64),
        ("oa", r.oa),
        ("precision", r.precision),
        ("sensitivity", r.sensitivity),
        ("specificity", r.specificity),
        ("f1", r.f1),
        ("auc", r.auc),
        ("ece", r.ece),
    ] {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Empty cells mark undefined values.
pub fn per_class_csv(r: &EvalReport) -> String {
    let mut s = String::from("class,support,predicted,precision,sensitivity,specificity,f1,auc\n");
    for (c, m) in r.per_class.iter().enumerate() {
        let _ = writeln!(
            s,
            "{c},{},{},{},{},{},{},{}",
            m.support,
            m.predicted,
            opt(m.precision),
            opt(m.sensitivity),
            opt(m.specificity),
            opt(m.f1),
            opt(r.per_class_auc.get(c).copied().flatten())
        );
    }
    s
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(r: &EvalReport) -> String {
    let k = r.confusion.k;
    let mut s = String::from("truth");
    (0..k).for_each(|p| {
        let _ = write!(s, ",pred_{p}");
    });
    s.push('\n');
    for t in 0..k {
        s.push_str(&t.to_string());
        (0..k).for_each(|p| {
            let _ = write!(s, ",{}", r.confusion.get(t, p));
        });
        s.push('\n');
    }
    s
}

pub fn risk_coverage_csv(rows: &[RiskRow]) -> String {
    let mut s = String::from("coverage,retained,threshold,selective_accuracy,risk\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.coverage, r.retained, r.threshold, r.selective_accuracy, r.risk);
    }
    s
}

pub fn confidence_split_csv(r: &EvalReport) -> String {
    let mut s = String::from("group,count,q1,median,q3\n");
    let cs = &r.confidence_split;
    for (name, n, q) in [("correct", cs.n_correct, cs.correct), ("incorrect", cs.n_incorrect, cs.incorrect)] {
        let _ = writeln!(
            s,
            "{name},{n},{},{},{}",
            opt(q.map(|q| q.q1)),
            opt(q.map(|q| q.median)),
            opt(q.map(|q| q.q3))
        );
    }
    s
}

pub fn samples_csv(r: &EvalReport) -> String {
    let mut s = String::from("index,label,pred,confidence,entropy,total_evidence\n");
    for (i, x) in r.samples.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{}", x.label, x.pred, x.confidence, x.entropy, x.total_evidence);
    }
    s
}

pub fn summary_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "samples      {}", r.n);
    let _ = writeln!(s, "classes      {}", r.num_classes);
    let _ = writeln!(s, "OA           {:.4}", r.oa);
    let _ = writeln!(s, "precision    {:.4}", r.precision);
    let _ = writeln!(s, "sensitivity  {:.4}", r.sensitivity);
    let _ = writeln!(s, "specificity  {:.4}", r.specificity);
    let _ = writeln!(s, "F1           {:.4}", r.f1);
    let _ = writeln!(s, "AUC          {:.4}", r.auc);
    let _ = writeln!(s, "ECE          {:.4}", r.ece);
    if let Some(gap) = r.confidence_split.gap {
        let _ = writeln!(s, "median confidence gap (correct - incorrect)  {gap:.4}");
    }
    for (c, why) in &r.excluded {
        let _ = writeln!(s, "class {c} excluded: {why}");
    }
    s
}

pub fn to_json(r: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(r).map_err(|e| CoreError::input(format!("cannot serialize report: {e}")))
}

pub fn from_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| {
        CoreError::format(0, format!("report JSON line {} column {}: {e}", e.line(), e.column()))
    })
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn svg_open(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn py(v: f64) -> f64 {
    H - BOTTOM - v.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
}

/// Frame with a [0, 1] y axis, ticks every 0.2 and axis labels.
fn axes(s: &mut String, xlabel: &str, ylabel: &str) {
    let (x0, x1) = (LEFT, W - RIGHT);
    let _ = writeln!(s, "<line x1=\"{x0:.2}\" y1=\"{:.2}\" x2=\"{x1:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", py(0.0), py(0.0));
    let _ = writeln!(s, "<line x1=\"{x0:.2}\" y1=\"{:.2}\" x2=\"{x0:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", py(0.0), py(1.0));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{x0:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            x0 - 4.0,
            py(v),
            py(v)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{v:.1}</text>",
            x0 - 6.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
        (py(0.0) + py(1.0)) / 2.0,
        (py(0.0) + py(1.0)) / 2.0,
        escape(ylabel)
    );
}

/// Selective accuracy against coverage, x axis running from 0 to 1.
pub fn risk_coverage_svg(rows: &[RiskRow]) -> String {
    let mut s = String::new();
    svg_open(&mut s, "Risk-coverage");
    axes(&mut s, "coverage", "selective accuracy");
    let px = |c: f64| LEFT + c.clamp(0.0, 1.0) * (W - LEFT - RIGHT);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{v:.1}</text>",
            px(v),
            py(0.0) + 14.0
        );
    }
    let mut pts: Vec<&RiskRow> = rows.iter().collect();
    pts.sort_by(|a, b| a.coverage.total_cmp(&b.coverage));
    let points: Vec<String> = pts
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.coverage), py(r.selective_accuracy)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>",
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

/// Box plot of confidence for correct and incorrect predictions. Boxes span
/// the quartiles, the bar marks the median and whiskers reach the extremes.
pub fn confidence_box_svg(r: &EvalReport) -> String {
    let mut s = String::new();
    svg_open(&mut s, "Confidence by outcome");
    axes(&mut s, "prediction outcome", "confidence");
    let groups = [("correct", true), ("incorrect", false)];
    let slot = (W - LEFT - RIGHT) / groups.len() as f64;
    for (g, (name, want)) in groups.iter().enumerate() {
        let cx = LEFT + slot * (g as f64 + 0.5);
        let mut v: Vec<f64> = r
            .samples
            .iter()
            .filter(|x| (x.pred == x.label) == *want)
            .map(|x| x.confidence)
            .collect();
        let _ = writeln!(
            s,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{name} (n={})</text>",
            py(0.0) + 14.0,
            v.len()
        );
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let (lo, hi) = (v[0], v[v.len() - 1]);
        let (q1, med, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
        let half = slot * 0.2;
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            py(lo),
            py(hi)
        );
        for w in [lo, hi] {
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                cx - half / 2.0,
                py(w),
                cx + half / 2.0,
                py(w)
            );
        }
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#aec7e8\" stroke=\"black\"/>",
            cx - half,
            py(q3),
            2.0 * half,
            py(q1) - py(q3)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#d62728\" stroke-width=\"2\"/>",
            cx - half,
            py(med),
            cx + half,
            py(med)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the evaluation bundle: `report.json`, `summary.txt`,
/// `summary.csv`, `per_class.csv`, `confusion.csv`, `risk_coverage.csv`,
/// `confidence_split.csv` and `samples.csv`.
pub fn write_eval_bundle(r: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_json(r)?)?;
    std::fs::write(dir.join("summary.txt"), summary_text(r))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(r))?;
    std::fs::write(dir.join("per_class.csv"), per_class_csv(r))?;
    std::fs::write(dir.join("confusion.csv"), confusion_csv(r))?;
    std::fs::write(dir.join("risk_coverage.csv"), risk_coverage_csv(&r.risk_coverage))?;
    std::fs::write(dir.join("confidence_split.csv"), confidence_split_csv(r))?;
    std::fs::write(dir.join("samples.csv"), samples_csv(r))?;
    Ok(())
}

/// Writes `risk_coverage.svg`, `confidence_split.svg` and their CSV tables.
pub fn write_plots(r: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("risk_coverage.svg"), risk_coverage_svg(&r.risk_coverage))?;
    std::fs::write(dir.join("confidence_split.svg"), confidence_box_svg(r))?;
    std::fs::write(dir.join("risk_coverage.csv"), risk_coverage_csv(&r.risk_coverage))?;
    std::fs::write(dir.join("confidence_split.csv"), confidence_split_csv(r))?;
    Ok(())
}
