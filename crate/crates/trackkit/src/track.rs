//! Stateful per-sequence multi-object tracker: two-stage association of
//! high- then low-confidence detections against predicted track boxes,
//! with SORT-style lifecycle management.

use crate::assign::{fused_iou_cost, hungarian, CostMatrix, Orientation};
use crate::detect::{box_iou, Detection};
use crate::mask::{Box2D, RleMask};
use crate::motion::{BoxKalman, KalmanNoise};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrackError {
    #[error("frame index {got} is not greater than the previous frame {prev}")]
    NonMonotonicFrame { got: u64, prev: u64 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    ConstantVelocity,
    Static,
}

/// Association thresholds and lifecycle parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub track_high_thresh: f64,
    pub track_low_thresh: f64,
    pub new_track_thresh: f64,
    pub match_thresh: f64,
    /// Frames a lost track survives before removal (a.k.a. max_age).
    pub track_buffer: u64,
    /// Matched updates required before a tentative track is reported.
    pub min_hits: u64,
    pub motion: MotionModel,
    pub kalman: KalmanNoise,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            track_high_thresh: 0.6,
            track_low_thresh: 0.1,
            new_track_thresh: 0.7,
            match_thresh: 0.8,
            track_buffer: 60,
            min_hits: 3,
            motion: MotionModel::ConstantVelocity,
            kalman: KalmanNoise::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(0.0..=1.0).contains(&self.track_low_thresh)
            || !(0.0..=1.0).contains(&self.track_high_thresh)
            || self.track_low_thresh > self.track_high_thresh
        {
            return Err(TrackError::InvalidConfig(
                "need 0 <= track_low_thresh <= track_high_thresh <= 1".into(),
            ));
        }
        if self.track_buffer < 1 {
            return Err(TrackError::InvalidConfig("track_buffer must be >= 1".into()));
        }
        if self.min_hits < 1 {
            return Err(TrackError::InvalidConfig("min_hits must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Tentative,
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone)]
enum Motion {
    Kalman(BoxKalman),
    Static(Box2D),
}

/// One reported frame of a track.
#[derive(Debug, Clone)]
pub struct TrackEntry {
    pub frame: u64,
    pub bbox: Box2D,
    pub mask: Option<RleMask>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub state: TrackState,
    pub hits: u64,
    pub frames_since_update: u64,
    motion: Motion,
    predicted: Box2D,
    entries: Vec<TrackEntry>,
    /// Index of the detection matched in the current step, if any.
    pending_det: Option<usize>,
}

impl Track {
    fn new(id: u64, det: &Detection, det_index: usize, config: &TrackerConfig) -> Self {
        let motion = match config.motion {
            MotionModel::ConstantVelocity => Motion::Kalman(BoxKalman::new(&det.bbox, config.kalman)),
            MotionModel::Static => Motion::Static(det.bbox),
        };
        Self {
            id,
            state: TrackState::Tentative,
            hits: 1,
            frames_since_update: 0,
            motion,
            predicted: det.bbox,
            entries: Vec::new(),
            pending_det: Some(det_index),
        }
    }

    fn predict(&mut self) -> Box2D {
        self.predicted = match &mut self.motion {
            Motion::Kalman(kf) => kf.predict(),
            Motion::Static(b) => *b,
        };
        self.predicted
    }

    fn update_matched(&mut self, det: &Detection) {
        match &mut self.motion {
            Motion::Kalman(kf) => kf.update(&det.bbox),
            Motion::Static(b) => *b = det.bbox,
        }
        self.hits += 1;
        self.frames_since_update = 0;
        if self.state == TrackState::Lost {
            self.state = TrackState::Active;
        }
    }
}

/// Time update of a track's motion model; returns the predicted box.
/// Static mode returns the last observed box unchanged.
pub fn motion_predict(track: &mut Track) -> Box2D {
    track.predict()
}

/// Contiguous fragment of an identity: per-frame entries plus start/end
/// metadata used by merging and interpolation.
#[derive(Debug, Clone)]
pub struct Tracklet {
    pub id: u64,
    pub s: u64,
    pub e: u64,
    pub b_first: Box2D,
    pub b_last: Box2D,
    pub entries: Vec<TrackEntry>,
}

impl Tracklet {
    /// Build from entries, which must be non-empty and sorted by frame.
    pub fn from_entries(id: u64, entries: Vec<TrackEntry>) -> Self {
        assert!(!entries.is_empty(), "tracklet needs at least one entry");
        debug_assert!(entries.windows(2).all(|w| w[0].frame < w[1].frame));
        Self {
            id,
            s: entries.first().unwrap().frame,
            e: entries.last().unwrap().frame,
            b_first: entries.first().unwrap().bbox,
            b_last: entries.last().unwrap().bbox,
            entries,
        }
    }
}

/// Per-sequence tracker. One instance is single-threaded and stateful;
/// instances for different sequences are independent.
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackError> {
        config.validate()?;
        Ok(Self {
            config,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
        })
    }

    /// Associate one frame of detections. Detections below
    /// `track_low_thresh` are discarded; scores in [low, high) form the
    /// second-stage pool. Returns (track id, detection) for every track
    /// that is in the active state after this step.
    pub fn step(
        &mut self,
        frame_index: u64,
        dets: &[Detection],
    ) -> Result<Vec<(u64, Detection)>, TrackError> {
        if let Some(prev) = self.last_frame {
            if frame_index <= prev {
                return Err(TrackError::NonMonotonicFrame {
                    got: frame_index,
                    prev,
                });
            }
        }
        self.last_frame = Some(frame_index);

        for track in &mut self.tracks {
            if track.state != TrackState::Removed {
                track.predict();
            }
        }

        let high: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].score >= self.config.track_high_thresh)
            .collect();
        let low: Vec<usize> = (0..dets.len())
            .filter(|&i| {
                dets[i].score >= self.config.track_low_thresh
                    && dets[i].score < self.config.track_high_thresh
            })
            .collect();

        let mut matched_track = vec![false; self.tracks.len()];
        let mut matched_det = vec![false; dets.len()];

        // Stage 1: tracked and lost tracks against the high pool, cost
        // fused with detection confidence, gated at match_thresh.
        let stage1_tracks: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].state != TrackState::Removed)
            .collect();
        self.associate(
            &stage1_tracks,
            &high,
            dets,
            true,
            &mut matched_track,
            &mut matched_det,
        );

        // Stage 2: remaining active tracks against the low pool on plain
        // IoU; lost tracks do not participate so low-confidence noise
        // cannot resurrect them.
        let stage2_tracks: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| !matched_track[i] && self.tracks[i].state == TrackState::Active)
            .collect();
        self.associate(
            &stage2_tracks,
            &low,
            dets,
            false,
            &mut matched_track,
            &mut matched_det,
        );

        // New tracks from unmatched confident detections.
        for &di in &high {
            if !matched_det[di] && dets[di].score >= self.config.new_track_thresh {
                let track = Track::new(self.next_id, &dets[di], di, &self.config);
                self.next_id += 1;
                matched_track.push(true);
                self.tracks.push(track);
            }
        }

        // Lifecycle: coast unmatched tracks, expire, promote.
        for (i, track) in self.tracks.iter_mut().enumerate() {
            if !matched_track[i] && track.state != TrackState::Removed {
                track.frames_since_update += 1;
                match track.state {
                    TrackState::Tentative => track.state = TrackState::Removed,
                    TrackState::Active => track.state = TrackState::Lost,
                    TrackState::Lost => {
                        if track.frames_since_update > self.config.track_buffer {
                            track.state = TrackState::Removed;
                        }
                    }
                    TrackState::Removed => {}
                }
            }
            if track.state == TrackState::Tentative && track.hits >= self.config.min_hits {
                track.state = TrackState::Active;
            }
        }

        // Report active tracks matched this frame.
        let mut outputs = Vec::new();
        for track in &mut self.tracks {
            if let Some(di) = track.pending_det.take() {
                if track.state == TrackState::Active {
                    let det = &dets[di];
                    track.entries.push(TrackEntry {
                        frame: frame_index,
                        bbox: det.bbox,
                        mask: det.mask.clone(),
                        score: det.score,
                    });
                    outputs.push((track.id, det.clone()));
                }
            }
        }
        outputs.sort_by_key(|&(id, _)| id);
        Ok(outputs)
    }

    fn associate(
        &mut self,
        track_indices: &[usize],
        det_indices: &[usize],
        dets: &[Detection],
        fuse_scores: bool,
        matched_track: &mut [bool],
        matched_det: &mut [bool],
    ) {
        if track_indices.is_empty() || det_indices.is_empty() {
            return;
        }
        let boxes: Vec<Box2D> = track_indices
            .iter()
            .map(|&i| self.tracks[i].predicted)
            .collect();
        let pool: Vec<Detection> = det_indices.iter().map(|&i| dets[i].clone()).collect();
        let matrix = if fuse_scores {
            fused_iou_cost(&boxes, &pool)
        } else {
            let mut values = Vec::with_capacity(boxes.len() * pool.len());
            for b in &boxes {
                for d in &pool {
                    values.push(1.0 - box_iou(b, &d.bbox));
                }
            }
            CostMatrix::new(boxes.len(), pool.len(), values, Orientation::MinimizeCost)
        };
        let pairs = hungarian(&matrix).expect("association costs are finite");
        for (r, c) in pairs {
            if matrix.get(r, c) > self.config.match_thresh {
                continue;
            }
            let ti = track_indices[r];
            let di = det_indices[c];
            matched_track[ti] = true;
            matched_det[di] = true;
            self.tracks[ti].update_matched(&dets[di]);
            self.tracks[ti].pending_det = Some(di);
        }
    }

    /// End the sequence: every track that was ever reported becomes a
    /// tracklet whose entries are exactly its reported frames.
    pub fn finalize(self) -> Vec<Tracklet> {
        let mut out: Vec<Tracklet> = self
            .tracks
            .into_iter()
            .filter(|t| !t.entries.is_empty())
            .map(|t| Tracklet::from_entries(t.id, t.entries))
            .collect();
        out.sort_by_key(|t| t.id);
        out
    }
}
