use std::collections::BTreeMap;
use std::io::Write;

use serde_json::{json, Value};

use crate::{Format, Inputs};

/// A per-node table for plotting, one row per node in file-id order.
#[derive(Debug, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

#[derive(Debug)]
pub struct Output {
    pub result: Value,
    pub units: BTreeMap<&'static str, &'static str>,
    pub table: Option<Table>,
}

impl Output {
    pub fn new(result: Value, units: &[(&'static str, &'static str)]) -> Self {
        Self { result, units: units.iter().copied().collect(), table: None }
    }

    pub fn with_table(mut self, table: Table) -> Self {
        self.table = Some(table);
        self
    }

    fn render(&self, command: &str, inputs: &Inputs) -> Result<String, String> {
        match inputs.format {
            Format::Json => {
                let doc = json!({
                    "command": command,
                    "seed": inputs.seed,
                    "units": self.units,
                    "result": self.result,
                });
                serde_json::to_string_pretty(&doc).map(|s| s + "\n").map_err(|e| e.to_string())
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let cell = |v: &Value| match v {
                    Value::Null => String::new(),
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                match &self.table {
                    Some(t) => {
                        w.write_record(&t.columns).map_err(|e| e.to_string())?;
                        for row in &t.rows {
                            w.write_record(row.iter().map(cell)).map_err(|e| e.to_string())?;
                        }
                    }
                    None => {
                        w.write_record(["key", "value"]).map_err(|e| e.to_string())?;
                        if let Value::Object(map) = &self.result {
                            for (k, v) in map {
                                if !v.is_array() && !v.is_object() {
                                    w.write_record([k.clone(), cell(v)]).map_err(|e| e.to_string())?;
                                }
                            }
                        }
                    }
                }
                let bytes = w.into_inner().map_err(|e| e.to_string())?;
                String::from_utf8(bytes).map_err(|e| e.to_string())
            }
        }
    }

    pub fn emit(&self, command: &str, inputs: &Inputs) -> Result<(), String> {
        let text = self.render(command, inputs)?;
        match &inputs.out {
            Some(path) => std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display())),
            None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| e.to_string()),
        }
    }
}
