//! Atomic file output and the run summary document.

use std::path::Path;

use cocl_core::error::Result;
use cocl_core::eval::AccuracyMatrix;
use serde_json::json;

use crate::config::ExperimentConfig;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Write via a temp file in the same directory plus rename, so readers never
/// observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn summary_json(
    cfg: &ExperimentConfig,
    matrix: &AccuracyMatrix,
    buffer_counts: &[Vec<(u32, usize)>],
    run_id: &str,
) -> String {
    let per_task: Vec<f64> = matrix.entries.last().cloned().unwrap_or_default();
    let occupancy: Vec<serde_json::Value> = buffer_counts
        .iter()
        .enumerate()
        .map(|(t, counts)| {
            json!({
                "after_task": t + 1,
                "total": counts.iter().map(|(_, c)| c).sum::<usize>(),
                "per_class": counts
                    .iter()
                    .map(|(label, c)| json!({"label": label, "count": c}))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    let config_echo: serde_json::Map<String, serde_json::Value> = cfg
        .echo
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
        .collect();
    let doc = json!({
        "run_id": run_id,
        "seed": cfg.seed,
        "final_average_accuracy": matrix.final_average(),
        "per_task_accuracy": per_task,
        "off_diagonal_mean": matrix.off_diagonal_mean(),
        "forgetting_mean": matrix.forgetting_mean(),
        "accuracy_matrix": matrix.entries,
        "buffer_occupancy": occupancy,
        "config": config_echo,
    });
    serde_json::to_string_pretty(&doc).expect("summary serialization cannot fail") + "\n"
}
