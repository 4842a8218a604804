//! `export-plots`: turn run directories into plot-ready CSV series and an
//! ablation summary, with a JSON bundle manifest. No rendering.

use std::path::{Path, PathBuf};

use coral_core::error::{CoralError, Result};
use serde::{Deserialize, Serialize};

use crate::runner::read_metrics;

pub const PLOTS_SCHEMA: &str = "coral-plots/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotBundle {
    pub schema: String,
    pub inputs: Vec<String>,
    pub files: Vec<String>,
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Writes `<run>_pck_vs_step.csv` and `<run>_entropy_vs_step.csv` per run,
/// `ablation_bars.csv` across runs, and `bundle.json`.
pub fn run_export_plots(run_dirs: &[PathBuf], out: &Path) -> Result<PlotBundle> {
    if run_dirs.is_empty() {
        return Err(CoralError::EmptyDomain("no run directories given".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut bars = String::from(
        "run,steps,final_pck_a1,final_pck_a2,final_pck_a4,final_mean_entropy,final_velocity,final_total\n",
    );
    for dir in run_dirs {
        let rows = read_metrics(dir)?;
        let label = run_label(dir);

        let mut pck = String::from("step,pck_a1,pck_a2,pck_a4\n");
        let mut ent = String::from("step,mean_entropy\n");
        for r in &rows {
            pck.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.pck[0], r.pck[1], r.pck[2]
            ));
            ent.push_str(&format!("{},{}\n", r.step, r.mean_entropy));
        }
        let pck_name = format!("{label}_pck_vs_step.csv");
        let ent_name = format!("{label}_entropy_vs_step.csv");
        std::fs::write(out.join(&pck_name), pck)?;
        std::fs::write(out.join(&ent_name), ent)?;
        files.push(pck_name);
        files.push(ent_name);

        if let Some(last) = rows.last() {
            bars.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                label,
                last.step,
                last.pck[0],
                last.pck[1],
                last.pck[2],
                last.mean_entropy,
                last.velocity,
                last.total
            ));
        }
    }
    std::fs::write(out.join("ablation_bars.csv"), bars)?;
    files.push("ablation_bars.csv".to_string());

    let bundle = PlotBundle {
        schema: PLOTS_SCHEMA.to_string(),
        inputs: run_dirs.iter().map(|d| d.display().to_string()).collect(),
        files,
    };
    let json = serde_json::to_string_pretty(&bundle)
        .map_err(|e| CoralError::Format(format!("plot bundle: {e}")))?;
    std::fs::write(out.join("bundle.json"), json)?;
    Ok(bundle)
}
