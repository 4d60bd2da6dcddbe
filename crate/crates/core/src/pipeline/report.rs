use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    /// One value per column; `None` renders as `-`.
    pub values: Vec<Option<f64>>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, label: &str, values: &[f64]) -> &mut Self {
        self.rows.push(Row {
            label: label.into(),
            values: values.iter().map(|&v| Some(v)).collect(),
            note: None,
        });
        self
    }

    pub fn noted_row(&mut self, label: &str, values: &[Option<f64>], note: &str) -> &mut Self {
        self.rows.push(Row {
            label: label.into(),
            values: values.to_vec(),
            note: Some(note.into()),
        });
        self
    }

    pub fn value(&self, label: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == label)?.values.get(c).copied().flatten()
    }

    /// Column-aligned plain text.
    pub fn render(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.values.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.4}"))).collect())
            .collect();
        let label_w = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(5);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| cells.iter().map(|r| r.get(i).map_or(0, String::len)).max().unwrap_or(0).max(c.chars().count()))
            .collect();
        let mut out = format!("{}\n", self.title);
        let _ = write!(out, "{:label_w$}", "");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (r, vals) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{:label_w$}", r.label);
            for (v, w) in vals.iter().zip(&widths) {
                let _ = write!(out, "  {v:>w$}");
            }
            if let Some(n) = &r.note {
                let _ = write!(out, "  ({n})");
            }
            out.push('\n');
        }
        out
    }
}

/// Named metric tables together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: Config,
    pub tables: Vec<Table>,
}

impl MetricsReport {
    pub fn new(config: &Config) -> Self {
        Self {
            config: config.clone(),
            tables: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        self.tables.iter().map(Table::render).collect::<Vec<_>>().join("\n")
    }

    pub fn table(&self, title: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.title == title)
    }
}
