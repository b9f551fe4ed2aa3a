//! Text renderings of metrics and result tables.

use std::fmt::Write as _;

use serde_json::json;
use sovmas_core::rouge::SigReport;
use sovmas_core::train::{EvalRecord, RougeTable, StepMetrics};

/// One JSON Lines record for a training step.
pub fn step_json(m: &StepMetrics) -> String {
    json!({
        "kind": "step",
        "step": m.step,
        "language": m.language,
        "mas": finite_or_null(m.mas),
        "vis2sum": finite_or_null(m.vis2sum),
        "mim": finite_or_null(m.mim),
        "joint": finite_or_null(m.joint),
        "lr": m.lr,
        "grad_norm": finite_or_null(m.grad_norm),
        "skipped": m.skipped,
    })
    .to_string()
}

/// One JSON Lines record for an evaluation.
pub fn eval_json(e: &EvalRecord) -> String {
    let rows: Vec<_> = e
        .table
        .rows
        .iter()
        .chain(std::iter::once(&e.table.average))
        .map(|r| json!({"language": r.language, "r1": r.r1, "r2": r.r2, "rl": r.rl, "examples": r.examples}))
        .collect();
    json!({"kind": "eval", "step": e.step, "split": e.split, "rows": rows}).to_string()
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Tab-separated ROUGE table with the `Avg.` row last.
pub fn rouge_tsv(table: &RougeTable) -> String {
    let mut s = String::from("language\tR-1\tR-2\tR-L\n");
    for r in table.rows.iter().chain(std::iter::once(&table.average)) {
        let _ = writeln!(s, "{}\t{:.2}\t{:.2}\t{:.2}", r.language, r.r1, r.r2, r.rl);
    }
    s
}

/// Plot data: one CSV line per step.
pub fn loss_csv(steps: &[StepMetrics]) -> String {
    let mut s = String::from("step,language,mas,vis2sum,mim,joint,lr\n");
    for m in steps {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", m.step, m.language, m.mas, m.vis2sum, m.mim, m.joint, m.lr);
    }
    s
}

pub fn significance_json(system_a: &str, system_b: &str, metric: &str, r: &SigReport) -> String {
    json!({
        "system_a": system_a,
        "system_b": system_b,
        "metric": metric,
        "p_value": r.p_value,
        "resamples": r.resamples,
        "mean_difference": r.mean_difference,
    })
    .to_string()
}

/// Per-language example and image counts with the `Avg. of Images` column.
pub fn stats_table(rows: &[(String, usize, usize)]) -> String {
    let mut s = String::from("language\tsamples\timages\tAvg. of Images\n");
    let (mut n, mut imgs) = (0, 0);
    for (lang, count, images) in rows {
        let _ = writeln!(s, "{lang}\t{count}\t{images}\t{:.2}", avg(*images, *count));
        n += count;
        imgs += images;
    }
    let _ = writeln!(s, "Total\t{n}\t{imgs}\t{:.2}", avg(imgs, n));
    s
}

fn avg(images: usize, samples: usize) -> f64 {
    if samples == 0 {
        0.0
    } else {
        images as f64 / samples as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sovmas_core::train::RougeRow;

    fn row(l: &str, v: f64) -> RougeRow {
        RougeRow { language: l.into(), r1: v, r2: v / 2.0, rl: v, examples: 1 }
    }

    #[test]
    fn tsv_ends_with_average() {
        let t = RougeTable { rows: vec![row("en", 40.0), row("fr", 20.0)], average: row("Avg.", 30.0), per_example: vec![] };
        let tsv = rouge_tsv(&t);
        let lines: Vec<_> = tsv.lines().collect();
        assert_eq!(lines[0], "language\tR-1\tR-2\tR-L");
        assert_eq!(lines[3], "Avg.\t30.00\t15.00\t30.00");
    }

    #[test]
    fn step_json_maps_non_finite_to_null() {
        let m = StepMetrics {
            step: 3,
            language: "en".into(),
            mas: f64::NAN,
            vis2sum: 1.0,
            mim: 0.0,
            joint: f64::INFINITY,
            lr: 1e-3,
            grad_norm: 0.5,
            skipped: true,
        };
        let v: serde_json::Value = serde_json::from_str(&step_json(&m)).unwrap();
        assert!(v["mas"].is_null() && v["joint"].is_null());
        assert_eq!(v["step"], 3);
    }

    #[test]
    fn stats_average_is_images_over_samples() {
        let t = stats_table(&[("en".into(), 100, 323), ("fr".into(), 0, 0)]);
        assert!(t.lines().nth(1).unwrap().ends_with("3.23"));
        assert!(t.lines().last().unwrap().starts_with("Total\t100\t323\t3.23"));
    }
}
