//! Tabular output as aligned text, CSV or JSON.

use serde_json::{Map, Value};
use uvq_core::storage::CompressionReport;

use crate::pipeline::{BaselineRow, ZooMember};

#[derive(
    Clone,
    Copy,
    Debug,
    Default,
    PartialEq,
    Eq,
    clap::ValueEnum,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Table => self.text(),
            OutputFormat::Csv => self.csv(),
            OutputFormat::Json => serde_json::to_string_pretty(&self.json()).unwrap() + "\n",
        }
    }

    pub fn json(&self) -> Value {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let obj: Map<String, Value> = self
                    .columns
                    .iter()
                    .cloned()
                    .zip(r.iter().cloned())
                    .collect();
                Value::Object(obj)
            })
            .collect();
        serde_json::json!({ "title": self.title, "rows": Value::Array(rows) })
    }

    fn text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(short).collect())
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |vals: Vec<&str>| {
            let padded: Vec<String> = vals
                .iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:>w$}"))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("{}\n", self.title);
        out += &line(self.columns.iter().map(String::as_str).collect());
        out += &(widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  ")
            + "\n");
        for r in &cells {
            out += &line(r.iter().map(String::as_str).collect());
        }
        out
    }

    fn csv(&self) -> String {
        let mut out = self.columns.join(",") + "\n";
        for r in &self.rows {
            let vals: Vec<String> = r.iter().map(full).collect();
            out += &(vals.join(",") + "\n");
        }
        out
    }
}

fn short(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap();
            if x != 0.0 && (x.abs() < 1e-2 || x.abs() >= 1e5) {
                format!("{x:.3e}")
            } else {
                format!("{x:.4}")
            }
        }
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn full(v: &Value) -> String {
    match v {
        Value::String(s) if s.contains(',') || s.contains('"') => {
            format!("\"{}\"", s.replace('"', "\"\""))
        }
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

pub fn zoo_table(members: &[ZooMember]) -> Table {
    let mut t = Table::new("float zoo", &["network", "task", "params", "test_score"]);
    for m in members {
        let task = match m.dataset.task {
            uvq_core::data::Task::Classification { .. } => "accuracy",
            uvq_core::data::Task::Regression => "r2",
        };
        t.push(vec![
            m.net.name.clone().into(),
            task.into(),
            m.net.param_count().into(),
            m.float_score.into(),
        ]);
    }
    t
}

pub fn baseline_table(rows: &[BaselineRow]) -> Table {
    let mut t = Table::new(
        "quantizer comparison",
        &[
            "method",
            "config",
            "mse",
            "bits_per_weight",
            "ratio",
            "ratio_rounded",
            "io",
        ],
    );
    for r in rows {
        t.push(vec![
            r.method.clone().into(),
            r.config.clone().into(),
            r.mse.into(),
            r.bits_per_weight.into(),
            r.ratio.into(),
            format!("{}x", r.ratio.round()).into(),
            r.codebook_loads.into(),
        ]);
    }
    t
}

pub fn compression_table(reports: &[CompressionReport]) -> Table {
    let mut t = Table::new(
        "compression report",
        &[
            "network",
            "layers",
            "weights",
            "bits_per_weight",
            "ratio_weights",
            "ratio_total",
            "ratio_amortized",
            "codebook_bytes",
            "io",
            "mse",
        ],
    );
    for r in reports {
        t.push(vec![
            r.name.clone().into(),
            r.compressed_layers.into(),
            r.compressed_weights.into(),
            r.bits_per_weight.into(),
            r.ratio_weights_only.into(),
            r.ratio_total.into(),
            r.ratio_total_amortized.into(),
            r.codebook_bytes.into(),
            r.codebook_loads.into(),
            r.mse.map_or(Value::Null, Value::from),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_agree_on_content() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec!["x,y".into(), 0.5.into()]);
        assert_eq!(t.render(OutputFormat::Csv), "a,b\n\"x,y\",0.5\n");
        let j: Value = serde_json::from_str(&t.render(OutputFormat::Json)).unwrap();
        assert_eq!(j["rows"][0]["b"], 0.5);
        let text = t.render(OutputFormat::Table);
        assert!(text.contains("x,y") && text.contains("0.5000"));
    }
}
