//! Tidy CSV emission for downstream plotting. Each figure reads one
//! finished artifact; asking for a figure whose stage has not run is an
//! error that names the missing stage.

use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};

use lethe_core::diffusion::TrainOutcome;
use lethe_core::sampler::AlignmentReport;

use crate::config::ExperimentConfig;
use crate::stages::{read_json, SelectionRecord, StagePaths, STAGE_EVALUATE, STAGE_SAMPLE, STAGE_TRAIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Per-candidate forget/retain accuracy scatter with the winner flagged.
    Selection,
    /// Hypernetwork training loss per step with smoothed window means.
    Curve,
    /// Prompted-vs-achieved loss pairs from the target sweep.
    Alignment,
}

impl FromStr for Figure {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Figure> {
        match s.trim() {
            "selection" => Ok(Figure::Selection),
            "curve" => Ok(Figure::Curve),
            "alignment" => Ok(Figure::Alignment),
            other => bail!("unknown figure {other:?}; expected selection, curve, or alignment"),
        }
    }
}

/// Parses a comma-separated figure list; empty input selects nothing.
pub fn parse_figures(s: &str) -> Result<Vec<Figure>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(Figure::from_str)
        .collect()
}

fn require(file: PathBuf, stage: &str, figure: &str) -> Result<PathBuf> {
    if file.exists() {
        Ok(file)
    } else {
        Err(anyhow!(
            "figure {figure} needs {} from stage {stage}; run that stage first",
            file.display()
        ))
    }
}

/// Writes the selected figures' CSVs under `plots/` and returns their
/// paths. An empty selection writes nothing.
pub fn emit_plot_data(
    cfg: &ExperimentConfig,
    paths: &StagePaths,
    figures: &[Figure],
) -> Result<Vec<PathBuf>> {
    if figures.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(paths.plots_dir())?;
    let mut written = Vec::new();
    for &figure in figures {
        let out = match figure {
            Figure::Selection => {
                let src = require(paths.selection_json(), STAGE_SAMPLE, "selection")?;
                let record: SelectionRecord = read_json(&src)?;
                let out = paths.plots_dir().join("selection_scatter.csv");
                fs::write(&out, record.table.to_csv())?;
                out
            }
            Figure::Curve => {
                let src = require(paths.curve(), STAGE_TRAIN, "curve")?;
                let outcome: TrainOutcome = read_json(&src)?;
                let out = paths.plots_dir().join("learning_curve.csv");
                fs::write(&out, curve_csv(&outcome, cfg.trainer.plateau_window))?;
                out
            }
            Figure::Alignment => {
                let src = require(paths.alignment_json(), STAGE_EVALUATE, "alignment")?;
                let report: AlignmentReport = read_json(&src)?;
                let out = paths.plots_dir().join("alignment_sweep.csv");
                fs::write(&out, report.to_csv())?;
                out
            }
        };
        written.push(out);
    }
    Ok(written)
}

/// One row per optimization step; the window-mean column is filled on
/// the last step of each completed smoothing window.
fn curve_csv(outcome: &TrainOutcome, window: usize) -> String {
    let mut csv = String::from("step,loss,window_mean\n");
    for (i, loss) in outcome.curve.iter().enumerate() {
        let step = i + 1;
        let mean = if window > 0 && step % window == 0 {
            outcome
                .window_means
                .get(step / window - 1)
                .map(|m| m.to_string())
                .unwrap_or_default()
        } else {
            String::new()
        };
        csv.push_str(&format!("{step},{loss},{mean}\n"));
    }
    csv
}
