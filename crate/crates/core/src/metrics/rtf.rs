//! Real-time-factor accounting over per-stage processing times.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRtf {
    pub name: String,
    pub processing_s: f64,
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_duration_s: f64,
    pub stages: Vec<StageRtf>,
    pub total_processing_s: f64,
    pub total_rtf: f64,
}

/// Panics if `audio_duration_s` is not positive.
pub fn rtf_report<S: AsRef<str>>(stage_timings: &[(S, f64)], audio_duration_s: f64) -> RtfReport {
    assert!(audio_duration_s > 0.0, "audio duration must be positive");
    let stages: Vec<StageRtf> = stage_timings
        .iter()
        .map(|(name, t)| StageRtf { name: name.as_ref().to_string(), processing_s: *t, rtf: t / audio_duration_s })
        .collect();
    let total: f64 = stages.iter().map(|s| s.processing_s).sum();
    RtfReport { audio_duration_s, stages, total_processing_s: total, total_rtf: total / audio_duration_s }
}

impl RtfReport {
    /// The same report with one stage left out.
    pub fn excluding(&self, stage: &str) -> RtfReport {
        let kept: Vec<(&str, f64)> =
            self.stages.iter().filter(|s| s.name != stage).map(|s| (s.name.as_str(), s.processing_s)).collect();
        rtf_report(&kept, self.audio_duration_s)
    }

    /// Plain-text table: seconds to two decimals, RTF to four.
    pub fn render(&self) -> String {
        let width = self.stages.iter().map(|s| s.name.len()).chain(["Audio Duration".len()]).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>8}", "Stage", "Time (s)", "RTF");
        let rule = "-".repeat(width + 24);
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "{:<width$}  {:>12.2}  {:>8}", "Audio Duration", self.audio_duration_s, "--");
        let _ = writeln!(out, "{rule}");
        for s in &self.stages {
            let _ = writeln!(out, "{:<width$}  {:>12.2}  {:>8.4}", s.name, s.processing_s, s.rtf);
        }
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "{:<width$}  {:>12.2}  {:>8.4}", "Total", self.total_processing_s, self.total_rtf);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let r = rtf_report(&[("all", 20.95)], 120.0);
        assert_eq!(format!("{:.4}", r.total_rtf), "0.1746");
        let zero = rtf_report(&[("idle", 0.0)], 10.0);
        assert_eq!(zero.stages[0].rtf, 0.0);
        let three = rtf_report(&[("a", 1.0), ("b", 1.0), ("c", 1.0)], 30.0);
        assert!((three.total_rtf - 0.1).abs() < 1e-12);
        assert!(three.render().contains("Total"));
        assert!((three.excluding("b").total_rtf - 2.0 / 30.0).abs() < 1e-12);
    }
}
