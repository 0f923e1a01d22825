use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{train, Progress, RunRecord};
use super::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::format_table;

/// Ablation grid file: the configurations to compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub runs: Vec<RunConfig>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: AblationGrid =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for r in &grid.runs {
            r.validate()?;
        }
        Ok(grid)
    }
}

/// Mean scores of one configuration over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// `[AP, AP50, AP75]` per seed.
    pub per_seed: Vec<[f64; 3]>,
    pub mean_ap: f64,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Group records by configuration label, in first-seen order.
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut rows: Vec<AblationRow> = Vec::new();
        for r in records {
            let label = r.config.label();
            let scores = [r.report.ap, r.report.ap50, r.report.ap75];
            match rows.iter_mut().find(|row| row.label == label) {
                Some(row) => {
                    row.seeds.push(r.config.seed);
                    row.per_seed.push(scores);
                }
                None => rows.push(AblationRow {
                    label,
                    seeds: vec![r.config.seed],
                    per_seed: vec![scores],
                    mean_ap: 0.0,
                    mean_ap50: 0.0,
                    mean_ap75: 0.0,
                }),
            }
        }
        for row in &mut rows {
            let n = row.per_seed.len() as f64;
            let mean = |i: usize| row.per_seed.iter().map(|s| s[i]).sum::<f64>() / n;
            (row.mean_ap, row.mean_ap50, row.mean_ap75) = (mean(0), mean(1), mean(2));
        }
        AblationTable { rows }
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<(String, [f64; 3])> =
            self.rows.iter().map(|r| (r.label.clone(), [r.mean_ap, r.mean_ap50, r.mean_ap75])).collect();
        format_table(&rows)
    }
}

/// Train every configuration once per seed (the seed overrides the
/// configuration's own) and tabulate mean scores.
pub fn ablate(
    grid: &[RunConfig],
    seeds: &[u64],
    dataset: &Dataset,
    mut on_record: impl FnMut(&RunRecord),
    progress: &mut dyn Progress,
) -> Result<(Vec<RunRecord>, AblationTable)> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut records = Vec::with_capacity(grid.len() * seeds.len());
    for cfg in grid {
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let outcome = train(&cfg, dataset, progress)?;
            on_record(&outcome.record);
            records.push(outcome.record);
        }
    }
    let table = AblationTable::from_records(&records);
    Ok((records, table))
}
