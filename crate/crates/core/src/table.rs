//! CSV and JSON result files. Floats are written with 17 significant
//! digits so every value parses back bit for bit; lines end in LF.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(f) => Some(*f),
            _ => None,
        }
    }

    fn render(&self, out: &mut String) -> Result<()> {
        match self {
            Cell::Int(i) => write!(out, "{i}").unwrap(),
            Cell::Float(f) => write!(out, "{}", format_float(*f)).unwrap(),
            Cell::Text(s) => {
                if s.contains([',', '\n', '\r', '"']) {
                    return Err(Error::Parse(format!("text cell {s:?} needs quoting")));
                }
                out.push_str(s);
            }
            Cell::Empty => {}
        }
        Ok(())
    }

    fn parse(field: &str) -> Cell {
        if field.is_empty() {
            Cell::Empty
        } else if let Ok(i) = field.parse::<i64>() {
            Cell::Int(i)
        } else if let Ok(f) = field.parse::<f64>() {
            Cell::Float(f)
        } else {
            Cell::Text(field.to_string())
        }
    }
}

/// `{:.16e}` for finite values; `inf`, `-inf`, `NaN` otherwise.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = self.columns.join(",");
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                let col = self
                    .columns
                    .get(row.len())
                    .cloned()
                    .unwrap_or_else(|| format!("<extra column {}>", row.len()));
                return Err(Error::Shape(format!(
                    "row {i} has {} cells for {} columns (column {col})",
                    row.len(),
                    self.columns.len()
                )));
            }
            for (j, c) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                c.render(&mut s)?;
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse_csv(text: &str) -> Result<Table> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<Cell> = line.split(',').map(Cell::parse).collect();
            if row.len() != columns.len() {
                return Err(Error::Parse(format!("CSV line {} has {} fields", i + 2, row.len())));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }
}

/// Writes `table` after checking its header against `schema`.
pub fn write_csv(table: &Table, schema: &[&str], path: &Path) -> Result<()> {
    for (i, want) in schema.iter().enumerate() {
        match table.columns.get(i) {
            Some(have) if have == want => {}
            Some(have) => {
                return Err(Error::Shape(format!("column {i}: expected {want}, found {have}")));
            }
            None => return Err(Error::Shape(format!("missing column {want}"))),
        }
    }
    if table.columns.len() > schema.len() {
        return Err(Error::Shape(format!("unexpected column {}", table.columns[schema.len()])));
    }
    std::fs::write(path, table.to_csv()?)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    Table::parse_csv(&std::fs::read_to_string(path)?)
}

pub fn write_summary(value: &serde_json::Value, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
