//! Metrics CSV format.
//!
//! Each run writes one CSV whose first line is a `#` comment carrying run
//! metadata (mode, seed, step count, domain count, corpus hash), followed by
//! a header row and one data row per logging interval. Floats are serialized
//! with 17 significant digits so identical-seed runs diff clean byte for
//! byte. Wall-clock timings live in a separate overhead file, never here.

use crate::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

pub const METRICS_FORMAT: &str = "acodm-metrics v1";

/// One logged row. Perplexity columns are `exp(loss)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub alpha: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_ppl: Vec<f64>,
    pub mean_val_loss: f64,
    pub mean_val_ppl: f64,
    pub reward: Vec<f64>,
}

/// Run metadata embedded in the CSV comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
    pub k: usize,
    pub corpus_hash: String,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_metrics(path: &Path, meta: &RunMeta, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# {METRICS_FORMAT} mode={} seed={} steps={} k={} corpus={}\n",
        meta.mode, meta.seed, meta.steps, meta.k, meta.corpus_hash
    ));
    let k = meta.k;
    let mut header: Vec<String> = vec!["step".into()];
    for name in ["alpha", "train_loss", "val_loss", "val_ppl"] {
        for i in 0..k {
            header.push(format!("{name}_{i}"));
        }
    }
    header.push("mean_val_loss".into());
    header.push("mean_val_ppl".into());
    for i in 0..k {
        header.push(format!("reward_{i}"));
    }
    out.push_str(&header.join(","));
    out.push('\n');

    for row in rows {
        let mut fields: Vec<String> = vec![row.step.to_string()];
        for group in [&row.alpha, &row.train_loss, &row.val_loss, &row.val_ppl] {
            if group.len() != k {
                return Err(Error::Format(format!(
                    "row at step {} has {} entries for k = {k}",
                    row.step,
                    group.len()
                )));
            }
            fields.extend(group.iter().map(|&v| fmt_f64(v)));
        }
        fields.push(fmt_f64(row.mean_val_loss));
        fields.push(fmt_f64(row.mean_val_ppl));
        fields.extend(row.reward.iter().map(|&v| fmt_f64(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_meta(line: &str) -> Result<RunMeta> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("missing metadata comment line".into()))?
        .trim();
    if !body.starts_with(METRICS_FORMAT) {
        return Err(Error::Format(format!("unknown metrics format: {body}")));
    }
    let mut mode = None;
    let mut seed = None;
    let mut steps = None;
    let mut k = None;
    let mut corpus = None;
    for part in body.split_whitespace() {
        if let Some((key, value)) = part.split_once('=') {
            match key {
                "mode" => mode = Some(value.to_string()),
                "seed" => seed = value.parse().ok(),
                "steps" => steps = value.parse().ok(),
                "k" => k = value.parse().ok(),
                "corpus" => corpus = Some(value.to_string()),
                _ => {}
            }
        }
    }
    Ok(RunMeta {
        mode: mode.ok_or_else(|| Error::Format("metadata missing mode".into()))?,
        seed: seed.ok_or_else(|| Error::Format("metadata missing seed".into()))?,
        steps: steps.ok_or_else(|| Error::Format("metadata missing steps".into()))?,
        k: k.ok_or_else(|| Error::Format("metadata missing k".into()))?,
        corpus_hash: corpus.ok_or_else(|| Error::Format("metadata missing corpus".into()))?,
    })
}

pub fn read_metrics(path: &Path) -> Result<(RunMeta, Vec<MetricsRow>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty metrics file".into()))??;
    let meta = parse_meta(&meta_line)?;
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("metrics file missing header".into()))??;
    let names: Vec<&str> = header.split(',').collect();
    let k = meta.k;
    let expected = 1 + 4 * k + 2 + k;
    if names.len() != expected {
        return Err(Error::Format(format!(
            "header has {} columns, expected {expected}",
            names.len()
        )));
    }

    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::Format(format!(
                "row has {} columns, expected {expected}",
                fields.len()
            )));
        }
        let mut it = fields.into_iter();
        let step: usize = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("bad step field".into()))?;
        let take_vec = |it: &mut dyn Iterator<Item = &str>, n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    it.next()
                        .ok_or_else(|| Error::Format("short row".into()))?
                        .parse::<f64>()
                        .map_err(|_| Error::Format("bad float field".into()))
                })
                .collect()
        };
        let alpha = take_vec(&mut it, k)?;
        let train_loss = take_vec(&mut it, k)?;
        let val_loss = take_vec(&mut it, k)?;
        let val_ppl = take_vec(&mut it, k)?;
        let mean_val_loss: f64 = it
            .next()
            .ok_or_else(|| Error::Format("short row".into()))?
            .parse()
            .map_err(|_| Error::Format("bad float field".into()))?;
        let mean_val_ppl: f64 = it
            .next()
            .ok_or_else(|| Error::Format("short row".into()))?
            .parse()
            .map_err(|_| Error::Format("bad float field".into()))?;
        let reward = take_vec(&mut it, k)?;
        rows.push(MetricsRow {
            step,
            alpha,
            train_loss,
            val_loss,
            val_ppl,
            mean_val_loss,
            mean_val_ppl,
            reward,
        });
    }
    Ok((meta, rows))
}

/// Wall-clock accounting for one run, kept out of the metrics file so the
/// metrics stay reproducible byte for byte.
#[derive(Debug, Clone, Default)]
pub struct Timings {
    pub total_s: f64,
    pub env_s: f64,
    pub alignment_s: f64,
    pub agent_update_s: f64,
    pub policy_s: f64,
    pub validation_s: f64,
}

impl Timings {
    /// Fraction of total step time spent on agent updates plus alignment.
    pub fn overhead_frac(&self) -> f64 {
        if self.total_s <= 0.0 {
            return 0.0;
        }
        (self.agent_update_s + self.alignment_s) / self.total_s
    }
}

pub fn write_overhead(path: &Path, t: &Timings) -> Result<()> {
    let mut out = String::new();
    out.push_str("total_s,env_s,alignment_s,agent_update_s,policy_s,validation_s,overhead_frac\n");
    out.push_str(&format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        t.total_s,
        t.env_s,
        t.alignment_s,
        t.agent_update_s,
        t.policy_s,
        t.validation_s,
        t.overhead_frac()
    ));
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_overhead(path: &Path) -> Result<Timings> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let _header = lines
        .next()
        .ok_or_else(|| Error::Format("empty overhead file".into()))?;
    let row = lines
        .next()
        .ok_or_else(|| Error::Format("overhead file missing data row".into()))?;
    let vals: Vec<f64> = row
        .split(',')
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format("bad overhead field".into()))?;
    if vals.len() != 7 {
        return Err(Error::Format("overhead row must have 7 fields".into()));
    }
    Ok(Timings {
        total_s: vals[0],
        env_s: vals[1],
        alignment_s: vals[2],
        agent_update_s: vals[3],
        policy_s: vals[4],
        validation_s: vals[5],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows(k: usize) -> (RunMeta, Vec<MetricsRow>) {
        let meta = RunMeta {
            mode: "static".into(),
            seed: 3,
            steps: 20,
            k,
            corpus_hash: "abcd1234".into(),
        };
        let rows = (0..3)
            .map(|i| MetricsRow {
                step: i * 10,
                alpha: vec![1.0 / k as f64; k],
                train_loss: vec![5.0 - i as f64; k],
                val_loss: vec![5.5 - i as f64; k],
                val_ppl: vec![(5.5f64 - i as f64).exp(); k],
                mean_val_loss: 5.5 - i as f64,
                mean_val_ppl: (5.5f64 - i as f64).exp(),
                reward: vec![0.1 * i as f64; k],
            })
            .collect();
        (meta, rows)
    }

    #[test]
    fn metrics_round_trip() {
        let dir = std::env::temp_dir().join("acodm_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let (meta, rows) = sample_rows(3);
        write_metrics(&path, &meta, &rows).unwrap();
        let (meta2, rows2) = read_metrics(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(rows, rows2);
    }

    #[test]
    fn seventeen_digit_round_trip_is_exact() {
        let v = std::f64::consts::PI / 7.0;
        let s = fmt_f64(v);
        let back: f64 = s.parse().unwrap();
        assert_eq!(v.to_bits(), back.to_bits());
    }

    #[test]
    fn overhead_round_trip() {
        let dir = std::env::temp_dir().join("acodm_overhead_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("o.csv");
        let t = Timings {
            total_s: 10.0,
            env_s: 8.0,
            alignment_s: 0.5,
            agent_update_s: 1.0,
            policy_s: 0.2,
            validation_s: 0.3,
        };
        write_overhead(&path, &t).unwrap();
        let back = read_overhead(&path).unwrap();
        assert!((back.overhead_frac() - 0.15).abs() <= 1e-9);
    }
}
