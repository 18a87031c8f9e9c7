//! Wall-clock latency instrumentation for the three pipeline stages.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Track,
    LandmarkQuality,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Detect, Stage::Track, Stage::LandmarkQuality];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Track => "track",
            Stage::LandmarkQuality => "landmark_quality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
}

impl TimingReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TimingProbe {
    samples: BTreeMap<Stage, Vec<Duration>>,
}

impl TimingProbe {
    pub fn record(&mut self, stage: Stage, d: Duration) {
        self.samples.entry(stage).or_default().push(d);
    }

    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(stage, start.elapsed());
        out
    }

    pub fn report(&self) -> TimingReport {
        TimingReport {
            stages: self
                .samples
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(&stage, v)| summarize(stage, v))
                .collect(),
        }
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(stage: Stage, samples: &[Duration]) -> StageTiming {
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    StageTiming {
        stage,
        count: ms.len(),
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
        max_ms: ms[ms.len() - 1],
    }
}

/// Summarize a batch of latencies for one stage; `None` for an empty batch.
pub fn timing_probe(stage: Stage, samples: &[Duration]) -> Option<StageTiming> {
    (!samples.is_empty()).then(|| summarize(stage, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_probe_reports_nothing() {
        assert!(TimingProbe::default().report().stages.is_empty());
        assert!(timing_probe(Stage::Detect, &[]).is_none());
    }

    #[test]
    fn summary_statistics() {
        let d: Vec<Duration> = (1..=20).map(Duration::from_millis).collect();
        let s = timing_probe(Stage::Track, &d).unwrap();
        assert_eq!(s.count, 20);
        assert!((s.mean_ms - 10.5).abs() < 1e-9);
        assert!((s.p50_ms - 10.0).abs() < 1e-9);
        assert!((s.p95_ms - 19.0).abs() < 1e-9);
        assert!((s.max_ms - 20.0).abs() < 1e-9);
    }

    #[test]
    fn stages_in_fixed_order() {
        let mut p = TimingProbe::default();
        for s in [Stage::LandmarkQuality, Stage::Detect, Stage::Track] {
            p.record(s, Duration::from_micros(5));
        }
        let order: Vec<Stage> = p.report().stages.iter().map(|s| s.stage).collect();
        assert_eq!(order, Stage::ALL);
    }
}
