//! Evaluation reports and paired comparison.
//!
//! Report file layout:
//!
//! ```text
//! # seed: <master seed>
//! # episodes: <count>
//! # <key>: <value>          (config, model, data fingerprints, protocol, ...)
//! # date: <free text>       (the only line allowed to differ between reruns)
//! <index>\t<accuracy>       (one per episode, index from 0)
//! <mean>\t<ci95>
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean and `1.96·sd/√n` half-width; the sample standard deviation of a
/// single value is taken as 0.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub seed: u64,
    pub mean: f64,
    pub ci95: f64,
    /// Ordered `key: value` metadata.
    pub header: Vec<(String, String)>,
    pub date: Option<String>,
    /// Seconds spent evaluating; not written to the file.
    pub wall_time: Option<f64>,
}

impl EvalReport {
    pub fn new(accuracies: Vec<f64>, seed: u64) -> Self {
        let (mean, ci95) = mean_ci95(&accuracies);
        Self {
            accuracies,
            seed,
            mean,
            ci95,
            header: Vec::new(),
            date: None,
            wall_time: None,
        }
    }

    pub fn episodes(&self) -> usize {
        self.accuracies.len()
    }

    /// Sets or replaces a header entry.
    pub fn set(&mut self, key: &str, value: &str) {
        let value = value.replace('\n', " ");
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed: {}\n# episodes: {}\n", self.seed, self.episodes());
        for (k, v) in &self.header {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        if let Some(d) = &self.date {
            out.push_str(&format!("# date: {d}\n"));
        }
        for (i, a) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{i}\t{a}\n"));
        }
        out.push_str(&format!("{}\t{}\n", self.mean, self.ci95));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format(format!("report line {}: {msg}", line + 1));
        let mut seed = None;
        let mut episodes = None;
        let mut header = Vec::new();
        let mut date = None;
        let mut rows: Vec<(usize, &str)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once(':')
                    .ok_or_else(|| bad(i, "header line without ':'".into()))?;
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(i, format!("seed: {e}")))?),
                    "episodes" => episodes = Some(v.parse::<usize>().map_err(|e| bad(i, format!("episodes: {e}")))?),
                    "date" => date = Some(v.to_string()),
                    _ => header.push((k.to_string(), v.to_string())),
                }
            } else if !line.trim().is_empty() {
                rows.push((i, line));
            }
        }
        let seed = seed.ok_or_else(|| Error::Format("report has no seed line".into()))?;
        let episodes = episodes.ok_or_else(|| Error::Format("report has no episodes line".into()))?;
        let (&(footer_line, footer), body) = rows
            .split_last()
            .ok_or_else(|| Error::Format("report has no footer".into()))?;
        if body.len() != episodes {
            return Err(Error::Format(format!("{} episode lines, header says {episodes}", body.len())));
        }
        let mut accuracies = Vec::with_capacity(episodes);
        for (expect, &(i, line)) in body.iter().enumerate() {
            let (idx, acc) = line.split_once('\t').ok_or_else(|| bad(i, "expected index<TAB>accuracy".into()))?;
            if idx.parse::<usize>().ok() != Some(expect) {
                return Err(bad(i, format!("expected episode index {expect}, found {idx:?}")));
            }
            let acc: f64 = acc.parse().map_err(|e| bad(i, format!("accuracy: {e}")))?;
            if !(0.0..=1.0).contains(&acc) {
                return Err(bad(i, format!("accuracy {acc} outside [0, 1]")));
            }
            accuracies.push(acc);
        }
        let (m, c) = footer
            .split_once('\t')
            .ok_or_else(|| bad(footer_line, "expected mean<TAB>ci95 footer".into()))?;
        let stored: (f64, f64) = (
            m.parse().map_err(|e| bad(footer_line, format!("mean: {e}")))?,
            c.parse().map_err(|e| bad(footer_line, format!("ci95: {e}")))?,
        );
        let mut report = Self::new(accuracies, seed);
        if (report.mean - stored.0).abs() > 1e-9 || (report.ci95 - stored.1).abs() > 1e-9 {
            return Err(bad(
                footer_line,
                format!(
                    "footer {} ± {} disagrees with the episode lines ({} ± {})",
                    stored.0, stored.1, report.mean, report.ci95
                ),
            ));
        }
        report.header = header;
        report.date = date;
        Ok(report)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Paired t-test of `b − a` over shared episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedStats {
    pub episodes: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `b − a`.
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
}

impl fmt::Display for PairedStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "episodes\t{}", self.episodes)?;
        writeln!(f, "mean_a\t{:.4}", self.mean_a)?;
        writeln!(f, "mean_b\t{:.4}", self.mean_b)?;
        writeln!(f, "diff\t{:.4}", self.mean_diff)?;
        writeln!(f, "t\t{:.4}", self.t)?;
        write!(f, "p_value\t{:.4e}", self.p)
    }
}

/// Compares two reports episode by episode. Both must come from the same
/// master seed, episode count and (when recorded) dataset.
pub fn compare_paired(a: &EvalReport, b: &EvalReport) -> Result<PairedStats> {
    if a.seed != b.seed {
        return Err(Error::Mismatch(format!(
            "reports use different seeds ({} vs {}), episodes are not paired",
            a.seed, b.seed
        )));
    }
    if a.episodes() != b.episodes() || a.episodes() == 0 {
        return Err(Error::Mismatch(format!(
            "reports cover {} and {} episodes",
            a.episodes(),
            b.episodes()
        )));
    }
    if let (Some(da), Some(db)) = (a.get("data"), b.get("data")) {
        if da != db {
            return Err(Error::Mismatch(format!("reports come from different datasets ({da} vs {db})")));
        }
    }
    let diffs: Vec<f64> = a.accuracies.iter().zip(&b.accuracies).map(|(x, y)| y - x).collect();
    let n = diffs.len();
    let mean_diff = diffs.iter().sum::<f64>() / n as f64;
    let sd_diff = if n > 1 {
        (diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let (t, p) = if mean_diff == 0.0 {
        (0.0, 1.0)
    } else if sd_diff == 0.0 || n < 2 {
        (f64::INFINITY.copysign(mean_diff), 0.0)
    } else {
        let t = mean_diff / (sd_diff / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::contract(e.to_string()))?;
        (t, 2.0 * dist.cdf(-t.abs()))
    };
    Ok(PairedStats {
        episodes: n,
        mean_a: a.mean,
        mean_b: b.mean,
        mean_diff,
        sd_diff,
        t,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: Vec<f64>) -> EvalReport {
        let mut r = EvalReport::new(acc, 42);
        r.set("config", "abc");
        r.set("data", "ff00");
        r
    }

    #[test]
    fn singleton_has_zero_ci() {
        let r = EvalReport::new(vec![0.6], 1);
        assert_eq!((r.mean, r.ci95), (0.6, 0.0));
    }

    #[test]
    fn text_round_trip() {
        let mut r = report(vec![0.2, 1.0 / 3.0, 0.95]);
        r.date = Some("unix 123".into());
        let back = EvalReport::parse(&r.to_text()).unwrap();
        assert_eq!(back, r);
        let text = r.to_text();
        assert!(text.lines().any(|l| l == "1\t0.3333333333333333"));
    }

    #[test]
    fn tampered_footer_is_rejected() {
        let text = report(vec![0.5, 0.7]).to_text().replace("0.6\t", "0.65\t");
        assert!(matches!(EvalReport::parse(&text), Err(Error::Format(_))));
    }

    #[test]
    fn self_comparison() {
        let r = report(vec![0.5, 0.7, 0.9]);
        let s = compare_paired(&r, &r).unwrap();
        assert_eq!((s.mean_diff, s.t, s.p), (0.0, 0.0, 1.0));
    }

    #[test]
    fn constant_shift() {
        let a = report(vec![0.5, 0.7, 0.9, 0.4]);
        let b = report(a.accuracies.iter().map(|x| x + 0.01).collect());
        let s = compare_paired(&a, &b).unwrap();
        assert!((s.mean_diff - 0.01).abs() < 1e-12);
        assert!(s.p < 1e-6, "{}", s.p);
    }

    #[test]
    fn t_statistic_matches_formula() {
        let a = report(vec![0.1, 0.4, 0.35, 0.8, 0.55]);
        let b = report(vec![0.2, 0.3, 0.5, 0.9, 0.6]);
        let s = compare_paired(&a, &b).unwrap();
        let d = [0.1, -0.1, 0.15, 0.1, 0.05];
        let m = d.iter().sum::<f64>() / 5.0;
        let sd = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0).sqrt();
        assert!((s.t - m / (sd / 5f64.sqrt())).abs() < 1e-9);
        assert!(s.p > 0.0 && s.p < 1.0);
    }

    #[test]
    fn mismatched_seeds_refused() {
        let a = report(vec![0.5, 0.6]);
        let mut b = a.clone();
        b.seed = 43;
        assert!(matches!(compare_paired(&a, &b), Err(Error::Mismatch(_))));
        let mut c = a.clone();
        c.set("data", "other");
        assert!(matches!(compare_paired(&a, &c), Err(Error::Mismatch(_))));
    }
}
