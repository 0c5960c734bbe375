//! Turn a metrics stream into a loss-curve CSV and a human-readable summary.

use epct_core::train::loops::mean_and_ci95;
use epct_core::train::metrics::MetricsRecord;
use std::collections::BTreeSet;
use std::fmt::Write as _;

pub struct ReportFiles {
    pub csv: String,
    pub summary: String,
}

pub fn render(records: &[MetricsRecord]) -> ReportFiles {
    let mut loss_keys: BTreeSet<String> = BTreeSet::new();
    for r in records {
        loss_keys.extend(r.losses.keys().cloned());
    }

    let mut csv = String::from("step,epoch,stage,lr,wall_ms,seed");
    for k in &loss_keys {
        let _ = write!(csv, ",{k}");
    }
    csv.push('\n');
    for r in records {
        let _ = write!(
            csv,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.stage, r.lr, r.wall_ms, r.seed
        );
        for k in &loss_keys {
            match r.losses.get(k) {
                Some(v) => {
                    let _ = write!(csv, ",{v}");
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }

    let mut summary = String::new();
    if records.is_empty() {
        summary.push_str("warning: empty metrics stream, nothing to report\n");
        return ReportFiles { csv, summary };
    }
    let stages: BTreeSet<&str> = records.iter().map(|r| r.stage.as_str()).collect();
    for stage in stages {
        let of_stage: Vec<&MetricsRecord> =
            records.iter().filter(|r| r.stage == stage).collect();
        let _ = writeln!(summary, "stage {stage}: {} records", of_stage.len());
        if stage == "metatest" {
            let accs: Vec<f64> = of_stage
                .iter()
                .filter_map(|r| r.losses.get("accuracy").copied())
                .collect();
            if !accs.is_empty() {
                let (mean, ci) = mean_and_ci95(&accs);
                let _ = writeln!(
                    summary,
                    "  accuracy over {} episodes: {mean} ± {ci}",
                    accs.len()
                );
            }
        } else {
            if let (Some(first), Some(last)) = (of_stage.first(), of_stage.last()) {
                for key in first.losses.keys() {
                    if let (Some(a), Some(b)) = (first.losses.get(key), last.losses.get(key)) {
                        let _ = writeln!(summary, "  {key}: first {a}, last {b}");
                    }
                }
            }
        }
    }
    ReportFiles { csv, summary }
}
