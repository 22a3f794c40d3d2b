use serde::Serialize;
use serde_json::Value;

use crate::{CliError, FitArtifact, Format, GofArtifact, Meta, PredictArtifact, SimulateArtifact};

/// An artifact that can be written as JSON or CSV.
pub trait Render: Serialize {
    fn meta(&self) -> &Meta;
    /// CSV body without the provenance comment lines.
    fn csv_body(&self) -> Result<String, CliError>;
}

pub fn render<A: Render>(artifact: &A, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(artifact)
                .map_err(|e| CliError::Input(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => {
            let meta = artifact.meta();
            let config = serde_json::to_string(&meta.run_config)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let mut s = format!(
                "# {} {}\n# seed {}\n# run_config {config}\n",
                meta.tool, meta.version, meta.seed
            );
            s.push_str(&artifact.csv_body()?);
            Ok(s)
        }
    }
}

/// Flattens nested objects and arrays into `(key, value)` pairs; array positions are 1-based.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}_{k}")
        }
    };
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                flatten(&join(k), x, out);
            }
        }
        Value::Array(xs) => {
            for (i, x) in xs.iter().enumerate() {
                flatten(&join(&(i + 1).to_string()), x, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn wide_row<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Input(e.to_string()))?;
    let mut pairs = Vec::new();
    flatten("", &v, &mut pairs);
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Input(e.to_string());
    w.write_record(pairs.iter().map(|p| p.0.as_str()))
        .map_err(err)?;
    w.write_record(pairs.iter().map(|p| p.1.as_str()))
        .map_err(err)?;
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, CliError> {
    let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Input(e.to_string()))
}

impl Render for FitArtifact {
    fn meta(&self) -> &Meta {
        &self.meta
    }

    fn csv_body(&self) -> Result<String, CliError> {
        wide_row(&self.summary)
    }
}

impl Render for SimulateArtifact {
    fn meta(&self) -> &Meta {
        &self.meta
    }

    fn csv_body(&self) -> Result<String, CliError> {
        Ok(self.summary.to_csv())
    }
}

impl Render for GofArtifact {
    fn meta(&self) -> &Meta {
        &self.meta
    }

    fn csv_body(&self) -> Result<String, CliError> {
        #[derive(Serialize)]
        struct Row<'a> {
            excluded: usize,
            #[serde(flatten)]
            report: &'a sipml::GofReport,
        }
        wide_row(&Row {
            excluded: self.excluded,
            report: &self.report,
        })
    }
}

impl Render for PredictArtifact {
    fn meta(&self) -> &Meta {
        &self.meta
    }

    fn csv_body(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.predictions {
            w.serialize(p).map_err(|e| CliError::Input(e.to_string()))?;
        }
        finish(w)
    }
}
