#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use tempfile::TempDir;
use vcosim::config::{parse_scenario, validate, ScenarioConfig, SAMPLE_SCENARIO};
use vcosim::orchestrator::{run, RunError, RunOptions, RunSummary};

pub fn sample_config() -> ScenarioConfig {
    parse_scenario(SAMPLE_SCENARIO).expect("sample parses")
}

pub fn run_config(cfg: ScenarioConfig, opts: &RunOptions) -> (TempDir, Result<RunSummary, RunError>) {
    let dir = tempfile::tempdir().expect("tempdir");
    let scenario = validate(cfg).expect("valid scenario");
    let res = run(scenario, dir.path(), opts);
    (dir, res)
}

pub fn run_ok(cfg: ScenarioConfig, opts: &RunOptions) -> (TempDir, RunSummary) {
    let (dir, res) = run_config(cfg, opts);
    (dir, res.expect("run completes"))
}

/// A CSV file as header plus rows of named fields.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<HashMap<String, String>>,
}

impl Table {
    pub fn read(path: &Path) -> Table {
        let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().expect("header").split(',').map(str::to_string).collect();
        let rows = lines
            .map(|l| {
                let fields: Vec<&str> = l.split(',').collect();
                assert_eq!(fields.len(), header.len(), "row width in {}: {l}", path.display());
                header.iter().cloned().zip(fields.into_iter().map(str::to_string)).collect()
            })
            .collect();
        Table { header, rows }
    }

    pub fn num(row: &HashMap<String, String>, col: &str) -> f64 {
        row[col].parse().unwrap_or_else(|_| panic!("{col} = {} is not a number", row[col]))
    }

    pub fn opt(row: &HashMap<String, String>, col: &str) -> Option<f64> {
        match row[col].as_str() {
            "NA" => None,
            v => Some(v.parse().unwrap_or_else(|_| panic!("{col} = {v} is not a number"))),
        }
    }
}
