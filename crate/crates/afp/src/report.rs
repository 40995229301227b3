//! Evaluation reports: per-case CSV, aggregate JSON and markdown tables.

use std::path::Path;

use afp_core::metrics::{AggregateReport, MeanStd, MetricsReport};
use afp_core::segnet::SegEpochLog;
use afp_core::synth::EpochLog;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::{write_file, Provenance};

fn csv_bytes(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| AppError::write(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| AppError::write(path, e))?;
    }
    w.into_inner().map_err(|e| AppError::write(path, e))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let bytes = csv_bytes(path, header, rows)?;
    write_file(path, &bytes)
}

/// One row per case; label columns are `dice_<k>` / `nsd_<k>`.
pub fn write_case_csv(reports: &[MetricsReport], prov: &Provenance, path: &Path) -> Result<()> {
    let labels: Vec<u32> = reports
        .iter()
        .flat_map(|r| r.per_label.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header: Vec<String> = ["case_id", "mae", "ssim"].map(String::from).to_vec();
    for l in &labels {
        header.push(format!("dice_{l}"));
        header.push(format!("nsd_{l}"));
    }
    header.extend(["tolerance_mm", "config_hash", "seed"].map(String::from));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.case_id.clone(), r.mae.to_string(), r.ssim.to_string()];
            for l in &labels {
                let s = r.per_label.get(l);
                row.push(s.map_or(String::new(), |s| s.dice.to_string()));
                row.push(s.map_or(String::new(), |s| s.nsd.to_string()));
            }
            row.extend([
                r.tolerance_mm.to_string(),
                prov.config_hash.clone(),
                prov.seed.to_string(),
            ]);
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDocument {
    pub provenance: Provenance,
    pub aggregate: AggregateReport,
}

pub fn write_aggregate_json(agg: &AggregateReport, prov: &Provenance, path: &Path) -> Result<()> {
    let doc = AggregateDocument {
        provenance: prov.clone(),
        aggregate: agg.clone(),
    };
    write_file(
        path,
        &serde_json::to_vec_pretty(&doc).expect("aggregate serializes"),
    )
}

pub fn read_aggregate_json(path: &Path) -> Result<AggregateDocument> {
    let text = crate::io::read_file(path)?;
    serde_json::from_slice(&text).map_err(|e| AppError::read(path, e))
}

pub fn write_seg_curve(curve: &[SegEpochLog], prov: &Provenance, path: &Path) -> Result<()> {
    let header = ["epoch", "train_loss", "val_dice", "config_hash", "seed"].map(String::from);
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                l.train_loss.to_string(),
                l.val_dice.to_string(),
                prov.config_hash.clone(),
                prov.seed.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_synth_log(log: &[EpochLog], prov: &Provenance, path: &Path) -> Result<()> {
    let header = [
        "stage",
        "epoch",
        "lr",
        "w_l1",
        "w_afp",
        "w_adv",
        "w_fm",
        "train_total",
        "train_l1",
        "train_afp",
        "train_adv",
        "train_fm",
        "train_disc",
        "val_total",
        "val_l1",
        "val_afp",
        "config_hash",
        "seed",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|l| {
            let mut row = vec![l.stage.to_string(), l.epoch.to_string()];
            row.extend(
                [
                    l.lr,
                    l.w_l1,
                    l.w_afp,
                    l.w_adv,
                    l.w_fm,
                    l.train_total,
                    l.train_l1,
                    l.train_afp,
                    l.train_adv,
                    l.train_fm,
                    l.train_disc,
                    l.val_total,
                    l.val_l1,
                    l.val_afp,
                ]
                .map(|v| v.to_string()),
            );
            row.extend([prov.config_hash.clone(), prov.seed.to_string()]);
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// `mean ± std` with four decimals, the layout used in result tables.
pub fn cell(m: &MeanStd) -> String {
    format!("{:.4} ± {:.4}", m.mean, m.std)
}

/// Markdown table with one row per run and one Dice/NSD column pair per
/// label found in any run.
pub fn ablation_markdown(
    runs: &[(String, AggregateReport)],
    label_names: &std::collections::BTreeMap<u32, String>,
) -> String {
    let labels: std::collections::BTreeSet<u32> = runs
        .iter()
        .flat_map(|(_, a)| a.per_label.keys().copied())
        .collect();
    let name = |l: &u32| {
        label_names
            .get(l)
            .cloned()
            .unwrap_or_else(|| format!("label {l}"))
    };
    let mut head = vec!["Run".to_string(), "MAE".into(), "SSIM".into()];
    for l in &labels {
        head.push(format!("Dice ({})", name(l)));
        head.push(format!("NSD ({})", name(l)));
    }
    let mut out = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
    for (run, a) in runs {
        let mut cells = vec![run.clone(), cell(&a.mae), cell(&a.ssim)];
        for l in &labels {
            match a.per_label.get(l) {
                Some(s) => cells.extend([cell(&s.dice), cell(&s.nsd)]),
                None => cells.extend(["n/a".to_string(), "n/a".to_string()]),
            }
        }
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}
