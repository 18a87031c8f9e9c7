//! Mutual-best IoU association and track lifecycle.

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{FqaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(prev index, curr index)` pairs in increasing prev order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_prev: Vec<usize>,
    pub unmatched_curr: Vec<usize>,
}

/// Index of the largest value, lowest index on ties; `None` when empty.
fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    values.enumerate().fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
}

/// Pair `i` with `j` when each is the other's highest-IoU candidate and the IoU
/// reaches `iou_threshold`.
pub fn associate_bidirectional(prev: &[BoundingBox], curr: &[BoundingBox], iou_threshold: f64) -> Matching {
    let best_for_prev: Vec<Option<(usize, f64)>> =
        prev.iter().map(|p| argmax(curr.iter().map(|c| p.iou(c)))).collect();
    let best_for_curr: Vec<Option<usize>> = curr
        .iter()
        .map(|c| argmax(prev.iter().map(|p| p.iou(c))).map(|(i, _)| i))
        .collect();
    let mut m = Matching::default();
    let mut curr_used = vec![false; curr.len()];
    for (i, best) in best_for_prev.iter().enumerate() {
        match *best {
            Some((j, iou)) if iou >= iou_threshold && best_for_curr[j] == Some(i) => {
                m.pairs.push((i, j));
                curr_used[j] = true;
            }
            _ => m.unmatched_prev.push(i),
        }
    }
    m.unmatched_curr = (0..curr.len()).filter(|&j| !curr_used[j]).collect();
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    /// Missed at least one frame but still eligible for re-association.
    Lost,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub frame: u64,
    pub crop_ref: String,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub status: TrackStatus,
    pub last_box: BoundingBox,
    pub last_frame: u64,
    pub misses: u32,
    pub history: Vec<HistoryEntry>,
}

impl Track {
    /// Append a scored face; frames must strictly increase.
    pub fn push(&mut self, entry: HistoryEntry) -> Result<()> {
        if let Some(last) = self.history.last() {
            if entry.frame <= last.frame {
                return Err(FqaError::invalid(format!(
                    "track {}: history frame {} not after {}",
                    self.id, entry.frame, last.frame
                )));
            }
        }
        self.history.push(entry);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    pub iou_threshold: f64,
    pub max_misses: u32,
    /// Detections below this confidence are ignored.
    pub min_confidence: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            iou_threshold: 0.3,
            max_misses: 5,
            min_confidence: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrackEvent {
    Born { track_id: u64, detection: usize },
    Extended { track_id: u64, detection: usize },
    Missed { track_id: u64 },
    Terminated { track_id: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameUpdate {
    pub events: Vec<TrackEvent>,
    /// Track id for each input detection (`None` when gated out by confidence).
    pub assignments: Vec<Option<u64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrackerState {
    /// Active and lost tracks, in id order.
    pub tracks: Vec<Track>,
    /// Terminated tracks in termination order.
    pub finished: Vec<Track>,
    pub next_id: u64,
    pub params: TrackerParams,
    pub last_frame: Option<u64>,
}

impl TrackerState {
    pub fn new(params: TrackerParams) -> Self {
        TrackerState {
            params,
            ..Default::default()
        }
    }

    pub fn track(&self, id: u64) -> Option<&Track> {
        self.tracks.iter().chain(&self.finished).find(|t| t.id == id)
    }

    pub fn track_mut(&mut self, id: u64) -> Option<&mut Track> {
        self.tracks.iter_mut().chain(self.finished.iter_mut()).find(|t| t.id == id)
    }

    /// Every track seen so far, in id order.
    pub fn all_tracks(&self) -> Vec<&Track> {
        let mut all: Vec<&Track> = self.tracks.iter().chain(&self.finished).collect();
        all.sort_by_key(|t| t.id);
        all
    }

    /// Terminate everything still open (end of stream).
    pub fn finish(&mut self) -> Vec<TrackEvent> {
        let mut events = Vec::new();
        for mut t in self.tracks.drain(..) {
            t.status = TrackStatus::Terminated;
            events.push(TrackEvent::Terminated { track_id: t.id });
            self.finished.push(t);
        }
        events
    }
}

/// Advance the tracker by one frame.
///
/// Matched tracks take the new box; unmatched detections start new tracks;
/// unmatched tracks count a miss and terminate once misses reach
/// `max_misses`.
pub fn update_tracks(state: &mut TrackerState, detections: &[Detection], frame: u64) -> Result<FrameUpdate> {
    if let Some(last) = state.last_frame {
        if frame <= last {
            return Err(FqaError::invalid(format!("frame {frame} arrived after frame {last}")));
        }
    }
    state.last_frame = Some(frame);

    let kept: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].confidence >= state.params.min_confidence)
        .collect();
    let prev: Vec<BoundingBox> = state.tracks.iter().map(|t| t.last_box).collect();
    let curr: Vec<BoundingBox> = kept.iter().map(|&i| detections[i].bbox).collect();
    let m = associate_bidirectional(&prev, &curr, state.params.iou_threshold);

    let mut update = FrameUpdate {
        events: Vec::new(),
        assignments: vec![None; detections.len()],
    };
    for &(ti, cj) in &m.pairs {
        let det = kept[cj];
        let t = &mut state.tracks[ti];
        t.last_box = detections[det].bbox;
        t.last_frame = frame;
        t.misses = 0;
        t.status = TrackStatus::Active;
        update.assignments[det] = Some(t.id);
        update.events.push(TrackEvent::Extended { track_id: t.id, detection: det });
    }
    let mut terminated = Vec::new();
    for &ti in &m.unmatched_prev {
        let t = &mut state.tracks[ti];
        t.misses += 1;
        if t.misses >= state.params.max_misses {
            t.status = TrackStatus::Terminated;
            terminated.push(ti);
            update.events.push(TrackEvent::Terminated { track_id: t.id });
        } else {
            t.status = TrackStatus::Lost;
            update.events.push(TrackEvent::Missed { track_id: t.id });
        }
    }
    for &ti in terminated.iter().rev() {
        let t = state.tracks.remove(ti);
        state.finished.push(t);
    }
    for &cj in &m.unmatched_curr {
        let det = kept[cj];
        let id = state.next_id;
        state.next_id += 1;
        state.tracks.push(Track {
            id,
            status: TrackStatus::Active,
            last_box: detections[det].bbox,
            last_frame: frame,
            misses: 0,
            history: Vec::new(),
        });
        update.assignments[det] = Some(id);
        update.events.push(TrackEvent::Born { track_id: id, detection: det });
    }
    Ok(update)
}
