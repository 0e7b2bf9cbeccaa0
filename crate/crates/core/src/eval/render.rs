//! Markdown tables and CSV for stored reports.

use std::fmt::Write as _;

use super::recipe::{RecipeReport, SizePoint};
use super::{AblationRow, EvalReport};

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

pub fn eval_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.framework.as_str().into(),
                pct(r.acc_all),
                pct(r.acc_no_nan),
                r.nan_count.to_string(),
                r.total.to_string(),
            ]
        })
        .collect();
    table(&mut out, &["run", "framework", "All", "No NaN", "NaN", "total"], &rows);
    out
}

pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("run,framework,visual_pointer,total,correct,wrong,nan_count,acc_all,acc_no_nan\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            r.label,
            r.framework.as_str(),
            r.visual_pointer,
            r.total,
            r.correct,
            r.wrong,
            r.nan_count,
            r.acc_all,
            r.acc_no_nan
        );
    }
    out
}

pub fn per_type_table(r: &EvalReport) -> String {
    let mut out = String::new();
    let rows: Vec<Vec<String>> = r
        .per_type
        .iter()
        .map(|(t, a)| vec![t.clone(), a.total.to_string(), pct(a.accuracy())])
        .collect();
    table(&mut out, &["question type", "questions", "accuracy"], &rows);
    out
}

pub fn taxonomy_table(r: &EvalReport) -> String {
    let mut out = String::new();
    let total = r.taxonomy.total().max(1) as f64;
    let rows: Vec<Vec<String>> = r
        .taxonomy
        .entries()
        .iter()
        .map(|(k, n)| vec![k.to_string(), n.to_string(), pct(*n as f64 / total)])
        .collect();
    table(&mut out, &["error", "count", "share"], &rows);
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.distilled.to_string(),
                r.runs.to_string(),
                pct(r.acc_all),
                pct(r.acc_no_nan),
            ]
        })
        .collect();
    table(&mut out, &["distilled modules", "runs", "All", "No NaN"], &rows);
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("distilled,runs,acc_all,acc_no_nan\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.distilled, r.runs, r.acc_all, r.acc_no_nan);
    }
    out
}

/// size,accuracy pairs for plotting.
pub fn curve_csv(points: &[SizePoint]) -> String {
    let mut out = String::from("questions,triples,learned_keys,acc_all,acc_no_nan\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            p.questions, p.triples, p.learned_keys, p.acc_all, p.acc_no_nan
        );
    }
    out
}

pub fn recipe_markdown(r: &RecipeReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Recipe report (seed {})\n", r.seed);

    let _ = writeln!(out, "## Splits\n");
    let rows: Vec<Vec<String>> = r
        .splits
        .iter()
        .map(|(n, s)| {
            let (p1, p2) = r.phase_counts.get(n).copied().unwrap_or_default();
            vec![
                n.clone(),
                s.questions.to_string(),
                s.scenes.to_string(),
                p1.to_string(),
                p2.to_string(),
            ]
        })
        .collect();
    table(
        &mut out,
        &["split", "questions", "scenes", "phase one", "phase two"],
        &rows,
    );
    let rows: Vec<Vec<String>> = r
        .triples
        .per_module_kind
        .iter()
        .map(|(k, n)| vec![k.clone(), n.to_string()])
        .collect();
    let _ = writeln!(
        out,
        "Triples: {} (skipped steps: {})\n",
        r.triples.triples, r.harvest_skipped
    );
    table(&mut out, &["module", "triples"], &rows);

    let _ = writeln!(out, "## Main comparison\n");
    out.push_str(&eval_table(&r.main));

    let _ = writeln!(out, "## Visual pointer\n");
    table(
        &mut out,
        &["subset", "questions", "with pointer", "without pointer"],
        &[
            vec![
                "ambiguous find patch".into(),
                r.pointer.ambiguous_subset.to_string(),
                pct(r.pointer.subset_acc_with),
                pct(r.pointer.subset_acc_without),
            ],
            vec![
                "all".into(),
                r.pointer.questions.to_string(),
                pct(r.pointer.acc_with),
                pct(r.pointer.acc_without),
            ],
        ],
    );

    let _ = writeln!(out, "## Cross-framework transplant\n");
    out.push_str(&eval_table(&[
        r.cross_framework.baseline.clone(),
        r.cross_framework.transplanted.clone(),
    ]));

    let _ = writeln!(out, "## Distilled module count\n");
    out.push_str(&ablation_table(&r.distilled_count));

    let _ = writeln!(out, "## simple_query students\n");
    let swaps: Vec<EvalReport> = r
        .simple_query_swaps
        .iter()
        .flat_map(|s| [s.baseline.clone(), s.distilled.clone()])
        .collect();
    out.push_str(&eval_table(&swaps));

    let _ = writeln!(out, "## Training set size\n");
    let rows: Vec<Vec<String>> = r
        .trainset_size
        .iter()
        .map(|p| {
            vec![
                p.questions.to_string(),
                p.triples.to_string(),
                p.learned_keys.to_string(),
                pct(p.acc_all),
            ]
        })
        .collect();
    table(&mut out, &["questions", "triples", "learned keys", "All"], &rows);

    let _ = writeln!(out, "## Grounding\n");
    let rows: Vec<Vec<String>> = [&r.grounding.baseline, &r.grounding.distilled]
        .iter()
        .map(|g| vec![g.label.clone(), g.items.to_string(), pct(g.mean_iou)])
        .collect();
    table(&mut out, &["run", "items", "mean IoU"], &rows);

    if let Some(d) = r.main.iter().find(|m| m.label == super::recipe::DISTILLED) {
        let _ = writeln!(out, "## Errors of the distilled run\n");
        out.push_str(&taxonomy_table(d));
        let _ = writeln!(out, "## Per question type (distilled)\n");
        out.push_str(&per_type_table(d));
    }

    for c in &r.cases {
        out.push_str(c);
        out.push('\n');
    }
    out
}
