//! Aligned-text and JSON tables. Both renderings carry the same rounded
//! numbers.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::EvalResult;
use crate::schema::Schema;

const DECIMALS: i32 = 4;

fn round(v: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS);
    (v * scale).round() / scale
}

fn fmt(v: f64) -> String {
    format!("{:.*}", DECIMALS as usize, round(v))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "-".into())
}

/// A rendered report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub text: String,
    pub json: Value,
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category_id: u32,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCategoryRow {
    pub category: String,
    pub n_train: usize,
    pub n_val: usize,
    pub ap_box: Option<f64>,
    pub ap_kps_without_ft: f64,
    pub ap_kps_with_ft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCategoryTable {
    pub rows: Vec<PerCategoryRow>,
}

/// Per-category comparison of a universal and a finetuned evaluation,
/// with an optional box-AP column and a closing "all" row.
pub fn report_per_category(
    schema: &Schema,
    stats: &[CategoryStats],
    without_ft: &EvalResult,
    with_ft: &EvalResult,
    boxes: Option<&EvalResult>,
) -> Table {
    let mut rows = Vec::new();
    for c in &without_ft.per_category {
        let name = schema
            .category(c.category_id)
            .map(|s| s.name.clone())
            .unwrap_or_else(|_| c.category_id.to_string());
        let st = stats.iter().find(|s| s.category_id == c.category_id);
        rows.push(PerCategoryRow {
            category: name,
            n_train: st.map_or(0, |s| s.n_train),
            n_val: st.map_or(c.n_gt, |s| s.n_val),
            ap_box: boxes.and_then(|b| b.category_ap(c.category_id)).map(round),
            ap_kps_without_ft: round(c.ap),
            ap_kps_with_ft: round(with_ft.category_ap(c.category_id).unwrap_or(0.0)),
        });
    }
    let n = without_ft.per_category.len().max(1) as f64;
    let mean_with = without_ft
        .per_category
        .iter()
        .map(|c| with_ft.category_ap(c.category_id).unwrap_or(0.0))
        .sum::<f64>()
        / n;
    rows.push(PerCategoryRow {
        category: "all".into(),
        n_train: rows.iter().map(|r| r.n_train).sum(),
        n_val: rows.iter().map(|r| r.n_val).sum(),
        ap_box: boxes.map(|b| round(b.overall_ap)),
        ap_kps_without_ft: round(without_ft.overall_ap),
        ap_kps_with_ft: round(mean_with),
    });
    let mut cells = vec![vec![
        "category".to_string(),
        "#train".into(),
        "#val".into(),
        "AP_box".into(),
        "AP_kps w/o ft".into(),
        "AP_kps w/ ft".into(),
    ]];
    for r in &rows {
        cells.push(vec![
            r.category.clone(),
            r.n_train.to_string(),
            r.n_val.to_string(),
            fmt_opt(r.ap_box),
            fmt(r.ap_kps_without_ft),
            fmt(r.ap_kps_with_ft),
        ]);
    }
    let table = PerCategoryTable { rows };
    Table {
        text: align(&cells),
        json: serde_json::to_value(&table).expect("table serializes"),
    }
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub det_model: String,
    pub ap_box: Option<f64>,
    pub aggregation: bool,
    pub finetune: bool,
    pub hflip_train: bool,
    pub hflip_test: bool,
    pub ap_kps: f64,
}

type Cell = Box<dyn Fn(&AblationRun) -> String>;

/// Runs as columns, settings as rows.
pub fn report_ablation(runs: &[AblationRun]) -> Table {
    let mark = |b: bool| if b { "✓".to_string() } else { String::new() };
    let mut cells = vec![std::iter::once(String::new())
        .chain(runs.iter().map(|r| r.name.clone()))
        .collect::<Vec<_>>()];
    let rows: [(&str, Cell); 7] = [
        ("det model", Box::new(|r| r.det_model.clone())),
        ("AP_box", Box::new(|r| fmt_opt(r.ap_box))),
        ("aggregation", Box::new(move |r| mark(r.aggregation))),
        ("finetune", Box::new(move |r| mark(r.finetune))),
        ("hflip train", Box::new(move |r| mark(r.hflip_train))),
        ("hflip test", Box::new(move |r| mark(r.hflip_test))),
        ("AP_kps", Box::new(|r| fmt(r.ap_kps))),
    ];
    for (label, cell) in &rows {
        cells.push(
            std::iter::once(label.to_string())
                .chain(runs.iter().map(cell))
                .collect(),
        );
    }
    let json_runs: Vec<Value> = runs
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "det_model": r.det_model,
                "ap_box": r.ap_box.map(round),
                "aggregation": r.aggregation,
                "finetune": r.finetune,
                "hflip_train": r.hflip_train,
                "hflip_test": r.hflip_test,
                "ap_kps": round(r.ap_kps),
            })
        })
        .collect();
    Table {
        text: align(&cells),
        json: json!({ "runs": json_runs }),
    }
}
