//! Per-frame scoring and per-track best-face selection.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{crop_region, resample_region, BoundingBox, ImageBuffer, LandmarkSet};
use crate::error::{FqaError, Result};
use crate::monet::{predict, MonetWeights, QualityHead, INPUT_SIZE};
use crate::pipeline::align::{align_face, AlignmentTemplate};
use crate::pipeline::detect::Detector;
use crate::pipeline::timing::{Stage, TimingProbe, TimingReport};
use crate::pipeline::tracker::{update_tracks, Detection, HistoryEntry, TrackEvent, TrackerParams, TrackerState};
use crate::synth::{render_scenario_frame, ScenarioFrame};

/// Landmarks (in face-crop pixels) and quality from one network pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFace {
    pub landmarks: LandmarkSet,
    pub quality: f64,
}

pub trait FaceScorer: Sync {
    fn score(&self, face: &ImageBuffer) -> Result<ScoredFace>;
}

pub struct MonetScorer<'a> {
    pub weights: &'a MonetWeights,
    pub head: &'a QualityHead,
}

impl FaceScorer for MonetScorer<'_> {
    fn score(&self, face: &ImageBuffer) -> Result<ScoredFace> {
        let p = predict(self.weights, self.head, face)?;
        Ok(ScoredFace {
            landmarks: p.landmarks,
            quality: p.quality.value,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFace {
    pub track_id: u64,
    pub frame: u64,
    pub quality: f64,
    pub crop_ref: String,
    pub aligned: ImageBuffer,
}

/// The `k` best faces seen so far: higher quality first, earlier frame on ties.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub k: usize,
    pub entries: Vec<SelectedFace>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK { k, entries: Vec::new() }
    }

    pub fn insert(&mut self, face: SelectedFace) {
        let pos = self
            .entries
            .iter()
            .position(|e| face.quality > e.quality || (face.quality == e.quality && face.frame < e.frame))
            .unwrap_or(self.entries.len());
        if pos < self.k {
            self.entries.insert(pos, face);
            self.entries.truncate(self.k);
        }
    }
}

/// One line of the selection output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub track_id: u64,
    pub rank: usize,
    pub frame: u64,
    pub quality: f64,
    pub crop_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracker: TrackerParams,
    /// Faces kept per track.
    pub k: usize,
    /// Margin added around each detection before scoring, as a fraction of box size.
    pub margin: f64,
    pub frame_width: usize,
    pub frame_height: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tracker: TrackerParams::default(),
            k: 3,
            margin: 0.0,
            frame_width: 320,
            frame_height: 240,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameOutput {
    pub events: Vec<TrackEvent>,
    /// Current top-k per open track.
    pub selections: BTreeMap<u64, Vec<SelectionRecord>>,
    pub failures: Vec<String>,
}

pub fn crop_ref(track_id: u64, frame: u64) -> String {
    format!("track{track_id:04}_frame{frame:06}.png")
}

/// Square face crop around `bbox` at the network input size, plus the region
/// it was cut from (for mapping landmarks back to the frame).
fn face_crop(image: &ImageBuffer, bbox: &BoundingBox, margin: f64) -> Result<(ImageBuffer, BoundingBox)> {
    let (x, y, w, h) = crop_region(bbox, margin);
    let side = w.max(h);
    let square = BoundingBox { x: x + (w - side) / 2.0, y: y + (h - side) / 2.0, w: side, h: side };
    let region = square
        .clip_to(image.width(), image.height())
        .ok_or_else(|| FqaError::invalid("detection lies outside the frame"))?;
    let crop = resample_region(image, (region.x, region.y, region.w, region.h), INPUT_SIZE, INPUT_SIZE);
    Ok((crop, region))
}

pub struct Pipeline<'s> {
    pub config: PipelineConfig,
    pub template: AlignmentTemplate,
    pub state: TrackerState,
    pub probe: TimingProbe,
    scorer: &'s dyn FaceScorer,
    best: BTreeMap<u64, TopK>,
}

impl<'s> Pipeline<'s> {
    pub fn new(config: PipelineConfig, scorer: &'s dyn FaceScorer) -> Self {
        Pipeline {
            config,
            template: AlignmentTemplate::default(),
            state: TrackerState::new(config.tracker),
            probe: TimingProbe::default(),
            scorer,
            best: BTreeMap::new(),
        }
    }

    /// Track, score and select for one frame.
    ///
    /// Faces are cropped from the detection box and scored once; the predicted
    /// landmarks drive the alignment. A face that fails to score or align is
    /// logged and left out of its track's history.
    pub fn process_frame(&mut self, frame: u64, image: &ImageBuffer, detections: &[Detection]) -> Result<FrameOutput> {
        let start = Instant::now();
        let update = update_tracks(&mut self.state, detections, frame)?;
        self.probe.record(Stage::Track, start.elapsed());

        let jobs: Vec<(usize, u64)> = update
            .assignments
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.map(|id| (i, id)))
            .collect();
        let margin = self.config.margin;
        let (scorer, template) = (self.scorer, &self.template);
        let results: Vec<(u64, Duration, Result<(f64, ImageBuffer)>)> = jobs
            .par_iter()
            .map(|&(i, id)| {
                let t0 = Instant::now();
                let r = face_crop(image, &detections[i].bbox, margin).and_then(|(crop, region)| {
                    let scored = scorer.score(&crop)?;
                    if !scored.quality.is_finite() {
                        return Err(FqaError::invalid("quality score is not finite"));
                    }
                    let (sx, sy) = (region.w / crop.width() as f64, region.h / crop.height() as f64);
                    let lm = scored.landmarks.map(|[x, y]| [region.x + x * sx, region.y + y * sy]);
                    Ok((scored.quality, align_face(image, &lm, template)?))
                });
                (id, t0.elapsed(), r)
            })
            .collect();

        let mut out = FrameOutput { events: update.events, ..Default::default() };
        for (id, elapsed, r) in results {
            self.probe.record(Stage::LandmarkQuality, elapsed);
            match r {
                Ok((quality, aligned)) => {
                    let cref = crop_ref(id, frame);
                    if let Some(track) = self.state.track_mut(id) {
                        track.push(HistoryEntry { frame, crop_ref: cref.clone(), quality })?;
                    }
                    self.best.entry(id).or_insert_with(|| TopK::new(self.config.k)).insert(SelectedFace {
                        track_id: id,
                        frame,
                        quality,
                        crop_ref: cref,
                        aligned,
                    });
                }
                Err(e) => {
                    warn!("frame {frame}, track {id}: {e}");
                    out.failures.push(format!("frame {frame} track {id}: {e}"));
                }
            }
        }
        for t in &self.state.tracks {
            if let Some(top) = self.best.get(&t.id) {
                out.selections.insert(t.id, records(top));
            }
        }
        Ok(out)
    }

    pub fn top_k(&self, track_id: u64) -> Option<&TopK> {
        self.best.get(&track_id)
    }

    /// Close all tracks and return the final selection for every track.
    pub fn finish(&mut self) -> Vec<SelectionRecord> {
        self.state.finish();
        self.best.values().flat_map(records).collect()
    }

    /// Write the aligned crops of the current selections into `dir`.
    pub fn write_selected_crops(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FqaError::io(dir, e))?;
        for face in self.best.values().flat_map(|t| &t.entries) {
            face.aligned.save_png(&dir.join(&face.crop_ref))?;
        }
        Ok(())
    }
}

fn records(top: &TopK) -> Vec<SelectionRecord> {
    top.entries
        .iter()
        .enumerate()
        .map(|(rank, e)| SelectionRecord {
            track_id: e.track_id,
            rank,
            frame: e.frame,
            quality: e.quality,
            crop_path: e.crop_ref.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationResult {
    pub selections: Vec<SelectionRecord>,
    pub timing: TimingReport,
    pub tracks: usize,
    pub failures: Vec<String>,
}

/// Render every scenario frame, run the detector and the pipeline over it.
pub fn simulate(
    scenario: &[ScenarioFrame],
    detector: &mut dyn Detector,
    pipeline: &mut Pipeline<'_>,
) -> Result<SimulationResult> {
    let (w, h) = (pipeline.config.frame_width, pipeline.config.frame_height);
    let mut frames: Vec<&ScenarioFrame> = scenario.iter().collect();
    frames.sort_by_key(|f| f.frame);
    let mut failures = Vec::new();
    for f in frames {
        let image = render_scenario_frame(f, w, h);
        let t0 = Instant::now();
        let detections = detector.detect(f.frame, &image)?;
        pipeline.probe.record(Stage::Detect, t0.elapsed());
        failures.extend(pipeline.process_frame(f.frame, &image, &detections)?.failures);
    }
    let selections = pipeline.finish();
    Ok(SimulationResult {
        selections,
        timing: pipeline.probe.report(),
        tracks: pipeline.state.next_id as usize,
        failures,
    })
}

pub fn write_selections(path: &Path, selections: &[SelectionRecord]) -> Result<()> {
    crate::data::write_lines(path, selections)
}
