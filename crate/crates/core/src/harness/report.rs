//! Ablation-table and class-histogram CSV emission from run manifests.

use std::path::Path;

use super::run::RunManifest;
use super::HarnessError;

/// One row per run: the configuration columns that vary across ablations
/// plus the final metric. Manifests evaluated on a different dataset than
/// the first are flagged in the `conflict` column.
pub fn ablation_csv(manifests: &[RunManifest]) -> Result<String, HarnessError> {
    if manifests.is_empty() {
        return Err(HarnessError::Stage {
            stage: "report",
            message: "no manifests given".into(),
        });
    }
    let reference = &manifests[0].dataset_fingerprint;
    let mut out = String::from(
        "run,loss,trainer,batch_size,accumulate_steps,epochs,pretrain_epochs,\
         pseudo_fraction,tta_views,macro_f1,head_f1,tail_f1,conflict\n",
    );
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in manifests {
        let conflict = if &m.dataset_fingerprint != reference {
            "dataset_mismatch"
        } else {
            ""
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.config.model_id(),
            m.config.loss.name(),
            m.config.trainer.name(),
            m.config.batch_size,
            m.config.accumulate_steps,
            m.config.epochs,
            m.config.pretrain_epochs,
            m.config.pseudo_label_fraction,
            m.config.tta.num_views,
            m.final_metrics.macro_f1,
            fmt_opt(m.final_metrics.head_f1),
            fmt_opt(m.final_metrics.tail_f1),
            conflict,
        ));
    }
    Ok(out)
}

/// `class,count` histogram rows from the first manifest.
pub fn class_counts_csv(manifests: &[RunManifest]) -> Result<String, HarnessError> {
    let first = manifests.first().ok_or(HarnessError::Stage {
        stage: "report",
        message: "no manifests given".into(),
    })?;
    let mut out = String::from("class,count\n");
    for (c, n) in first.class_counts.iter().enumerate() {
        out.push_str(&format!("{c},{n}\n"));
    }
    Ok(out)
}

/// Write both report CSVs into `out_dir`.
pub fn emit_reports(manifests: &[RunManifest], out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Stage {
        stage: "report",
        message: e.to_string(),
    })?;
    let write = |name: &str, body: String| -> Result<(), HarnessError> {
        std::fs::write(out_dir.join(name), body).map_err(|e| HarnessError::Stage {
            stage: "report",
            message: e.to_string(),
        })
    };
    write("ablation.csv", ablation_csv(manifests)?)?;
    write("class_counts.csv", class_counts_csv(manifests)?)?;
    Ok(())
}
