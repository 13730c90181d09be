//! Bounding-box association tracker: greedy descending-IoU matching between
//! consecutive frames, chained into tracks. No re-identification after a
//! missed frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{bbox_iou, InstanceMask};
use crate::fields::SequenceSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Minimum bbox IoU to link two detections.
    pub iou_threshold: f64,
    pub same_class_only: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            iou_threshold: 0.3,
            same_class_only: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config("iou_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Association {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_prev: Vec<usize>,
    pub unmatched_next: Vec<usize>,
}

/// One-to-one greedy matching in descending bbox-IoU order; ties broken by
/// (prev_idx, next_idx) lexicographic order.
pub fn associate(
    prev: &[InstanceMask],
    next: &[InstanceMask],
    cfg: &TrackerConfig,
) -> Result<Association> {
    cfg.validate()?;
    if let (Some(a), Some(b)) = (prev.first(), next.first()) {
        if a.mask.dim() != b.mask.dim() {
            return Err(Error::Shape("associate: frames differ in grid shape".into()));
        }
    }
    let mut candidates = Vec::new();
    for (i, p) in prev.iter().enumerate() {
        for (j, n) in next.iter().enumerate() {
            if cfg.same_class_only && p.class_id != n.class_id {
                continue;
            }
            let iou = bbox_iou(p.bbox, n.bbox);
            if iou >= cfg.iou_threshold {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_prev = vec![false; prev.len()];
    let mut used_next = vec![false; next.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_prev[i] && !used_next[j] {
            used_prev[i] = true;
            used_next[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    Ok(Association {
        pairs,
        unmatched_prev: (0..prev.len()).filter(|&i| !used_prev[i]).collect(),
        unmatched_next: (0..next.len()).filter(|&j| !used_next[j]).collect(),
    })
}

/// A track id encodes frame of birth and birth index within that frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrackId {
    pub birth_frame: usize,
    pub birth_index: usize,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub start_frame: usize,
    /// Instance index per covered frame, starting at `start_frame`.
    pub indices: Vec<usize>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Instance index at absolute frame `t`, if covered.
    pub fn at_frame(&self, t: usize) -> Option<usize> {
        if t < self.start_frame || t >= self.start_frame + self.indices.len() {
            None
        } else {
            Some(self.indices[t - self.start_frame])
        }
    }
}

/// Chain pairwise associations across the whole sequence. A track that
/// misses a frame terminates; empty detections never match (their bbox is
/// the EMPTY sentinel, IoU 0).
pub fn build_tracks(sample: &SequenceSample, cfg: &TrackerConfig) -> Result<Vec<Track>> {
    let mut tracks: Vec<Track> = Vec::new();
    // open[i] = track slot currently holding detection i of the latest frame
    let mut open: Vec<Option<usize>> = sample.instances[0]
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.is_empty() {
                None
            } else {
                tracks.push(Track {
                    id: TrackId {
                        birth_frame: 0,
                        birth_index: i,
                    },
                    start_frame: 0,
                    indices: vec![i],
                });
                Some(tracks.len() - 1)
            }
        })
        .collect();
    for t in 1..sample.frames() {
        let assoc = associate(&sample.instances[t - 1], &sample.instances[t], cfg)?;
        let mut next_open: Vec<Option<usize>> = vec![None; sample.instances[t].len()];
        for (i, j) in assoc.pairs {
            if let Some(slot) = open[i] {
                tracks[slot].indices.push(j);
                next_open[j] = Some(slot);
            }
        }
        for j in assoc.unmatched_next {
            if !sample.instances[t][j].is_empty() {
                tracks.push(Track {
                    id: TrackId {
                        birth_frame: t,
                        birth_index: j,
                    },
                    start_frame: t,
                    indices: vec![j],
                });
                next_open[j] = Some(tracks.len() - 1);
            }
        }
        open = next_open;
    }
    Ok(tracks)
}
