//! Cross-run comparison: steps to a shared validation-loss threshold and
//! relative speedup ratios.
//!
//! The threshold defaults to the final mean validation loss of the static
//! baseline among the input files, so each corpus calibrates its own bar.
//! A method's speedup ratio is `baseline_steps / method_steps`; methods that
//! never reach the threshold are reported as such and excluded from ratios.

use super::metrics::{read_metrics, MetricsRow, RunMeta};
use crate::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ReportEntry {
    pub path: PathBuf,
    pub mode: String,
    pub seed: u64,
    pub final_mean_val_loss: f64,
    pub final_mean_val_ppl: f64,
    pub steps_to_threshold: Option<usize>,
    pub speedup_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub threshold: f64,
    pub baseline: PathBuf,
    pub entries: Vec<ReportEntry>,
}

fn steps_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.mean_val_loss <= threshold)
        .map(|r| r.step)
}

/// Builds the comparison from two or more metrics files. All files must
/// share the step count and corpus hash. Without an explicit threshold, one
/// input must be a static-mode run to calibrate against.
pub fn compare_report(files: &[PathBuf], threshold_override: Option<f64>) -> Result<Report> {
    if files.len() < 2 {
        return Err(Error::InvalidArgument(
            "report needs at least two metrics files".into(),
        ));
    }
    let mut parsed: Vec<(PathBuf, RunMeta, Vec<MetricsRow>)> = Vec::new();
    for path in files {
        let (meta, rows) = read_metrics(path)?;
        if rows.is_empty() {
            return Err(Error::Format(format!("{} has no rows", path.display())));
        }
        parsed.push((path.clone(), meta, rows));
    }
    let (first_steps, first_hash) = (parsed[0].1.steps, parsed[0].1.corpus_hash.clone());
    for (path, meta, _) in &parsed {
        if meta.steps != first_steps {
            return Err(Error::InvalidArgument(format!(
                "{} ran {} steps, expected {first_steps}",
                path.display(),
                meta.steps
            )));
        }
        if meta.corpus_hash != first_hash {
            return Err(Error::InvalidArgument(format!(
                "{} used corpus {}, expected {first_hash}: runs must share a corpus",
                path.display(),
                meta.corpus_hash
            )));
        }
    }

    let baseline_idx = parsed
        .iter()
        .position(|(_, meta, _)| meta.mode == "static")
        .unwrap_or(0);
    let threshold = match threshold_override {
        Some(t) => t,
        None => {
            if parsed[baseline_idx].1.mode != "static" {
                return Err(Error::InvalidArgument(
                    "no static-mode run among inputs; pass an explicit threshold".into(),
                ));
            }
            parsed[baseline_idx].2.last().unwrap().mean_val_loss
        }
    };

    let baseline_steps = steps_to_threshold(&parsed[baseline_idx].2, threshold);
    let mut entries = Vec::new();
    for (path, meta, rows) in &parsed {
        let last = rows.last().unwrap();
        let steps = steps_to_threshold(rows, threshold);
        let speedup_ratio = match (baseline_steps, steps) {
            (Some(b), Some(s)) if s > 0 => Some(b as f64 / s as f64),
            _ => None,
        };
        entries.push(ReportEntry {
            path: path.clone(),
            mode: meta.mode.clone(),
            seed: meta.seed,
            final_mean_val_loss: last.mean_val_loss,
            final_mean_val_ppl: last.mean_val_ppl,
            steps_to_threshold: steps,
            speedup_ratio,
        });
    }

    Ok(Report {
        threshold,
        baseline: parsed[baseline_idx].0.clone(),
        entries,
    })
}

impl Report {
    /// Plain-text table of the comparison.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "threshold: mean validation loss {:.6} (baseline: {})\n",
            self.threshold,
            self.baseline.display()
        ));
        out.push_str(&format!(
            "{:<32} {:>8} {:>18} {:>14} {:>10}\n",
            "run", "seed", "steps-to-threshold", "final-ppl", "speedup"
        ));
        for e in &self.entries {
            let steps = e
                .steps_to_threshold
                .map(|s| s.to_string())
                .unwrap_or_else(|| "not reached".into());
            let ratio = e
                .speedup_ratio
                .map(|r| format!("{r:.3}x"))
                .unwrap_or_else(|| "n/a".into());
            let name = format!(
                "{} ({})",
                e.path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| e.path.display().to_string()),
                e.mode
            );
            out.push_str(&format!(
                "{:<32} {:>8} {:>18} {:>14.4} {:>10}\n",
                name, e.seed, steps, e.final_mean_val_ppl, ratio
            ));
        }
        out
    }

    /// CSV rendering of the comparison.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "path,mode,seed,steps_to_threshold,final_mean_val_loss,final_mean_val_ppl,speedup_ratio\n",
        );
        for e in &self.entries {
            let steps = e
                .steps_to_threshold
                .map(|s| s.to_string())
                .unwrap_or_else(|| "not_reached".into());
            let ratio = e
                .speedup_ratio
                .map(|r| format!("{r:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{}\n",
                e.path.display(),
                e.mode,
                e.seed,
                steps,
                e.final_mean_val_loss,
                e.final_mean_val_ppl,
                ratio
            ));
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::metrics::{write_metrics, MetricsRow, RunMeta};

    fn write_run(
        dir: &Path,
        name: &str,
        mode: &str,
        losses: &[f64],
        hash: &str,
    ) -> PathBuf {
        let k = 2;
        let meta = RunMeta {
            mode: mode.into(),
            seed: 1,
            steps: (losses.len() - 1) * 100,
            k,
            corpus_hash: hash.into(),
        };
        let rows: Vec<MetricsRow> = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| MetricsRow {
                step: i * 100,
                alpha: vec![0.5; k],
                train_loss: vec![l; k],
                val_loss: vec![l; k],
                val_ppl: vec![l.exp(); k],
                mean_val_loss: l,
                mean_val_ppl: l.exp(),
                reward: vec![0.0; k],
            })
            .collect();
        let path = dir.join(name);
        write_metrics(&path, &meta, &rows).unwrap();
        path
    }

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn identical_files_have_ratio_one() {
        let dir = tmp_dir("acodm_report_identity");
        let losses = [5.0, 4.0, 3.0, 2.0];
        let a = write_run(&dir, "a.csv", "static", &losses, "h1");
        let b = write_run(&dir, "b.csv", "static", &losses, "h1");
        let report = compare_report(&[a, b], None).unwrap();
        for e in &report.entries {
            assert_eq!(e.speedup_ratio, Some(1.0));
        }
    }

    #[test]
    fn faster_file_gets_ratio_two() {
        let dir = tmp_dir("acodm_report_ratio");
        // baseline (static) reaches 2.0 at step 1000, method at step 500
        let slow = [5.0, 4.5, 4.0, 3.5, 3.0, 2.8, 2.6, 2.4, 2.2, 2.1, 2.0];
        let fast = [5.0, 4.0, 3.0, 2.5, 2.2, 2.0, 1.9, 1.8, 1.7, 1.6, 1.5];
        let b = write_run(&dir, "slow.csv", "static", &slow, "h2");
        let a = write_run(&dir, "fast.csv", "ac-odm", &fast, "h2");
        let report = compare_report(&[a.clone(), b], None).unwrap();
        let fast_entry = report
            .entries
            .iter()
            .find(|e| e.path == a)
            .unwrap();
        assert_eq!(fast_entry.steps_to_threshold, Some(500));
        assert_eq!(fast_entry.speedup_ratio, Some(2.0));
    }

    #[test]
    fn unreached_threshold_is_reported_and_excluded() {
        let dir = tmp_dir("acodm_report_unreached");
        let base = [5.0, 4.0, 3.0];
        let stuck = [5.0, 4.9, 4.8];
        let b = write_run(&dir, "base.csv", "static", &base, "h3");
        let s = write_run(&dir, "stuck.csv", "exp3", &stuck, "h3");
        let report = compare_report(&[b, s.clone()], None).unwrap();
        let stuck_entry = report.entries.iter().find(|e| e.path == s).unwrap();
        assert_eq!(stuck_entry.steps_to_threshold, None);
        assert_eq!(stuck_entry.speedup_ratio, None);
        let text = report.render_text();
        assert!(text.contains("not reached"));
    }

    #[test]
    fn mismatched_corpus_hash_rejected() {
        let dir = tmp_dir("acodm_report_hash");
        let a = write_run(&dir, "a.csv", "static", &[5.0, 4.0], "h4");
        let b = write_run(&dir, "b.csv", "ac-odm", &[5.0, 4.0], "h5");
        assert!(compare_report(&[a, b], None).is_err());
    }

    #[test]
    fn missing_static_requires_explicit_threshold() {
        let dir = tmp_dir("acodm_report_nostatic");
        let a = write_run(&dir, "a.csv", "ac-odm", &[5.0, 4.0], "h6");
        let b = write_run(&dir, "b.csv", "exp3", &[5.0, 4.0], "h6");
        assert!(compare_report(&[a.clone(), b.clone()], None).is_err());
        assert!(compare_report(&[a, b], Some(4.5)).is_ok());
    }
}
