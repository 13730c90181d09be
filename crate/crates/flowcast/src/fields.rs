//! Grid-valued domain types shared across the pipeline: dense flow fields,
//! binary instance masks, per-pixel semantic maps, and whole-sequence samples,
//! plus the binary flow file container and IoU primitives.
//!
//! Conventions fixed repo-wide: grids are row-major with the origin at the
//! top-left and y pointing down; `flows[i]` maps pixel positions in frame `i`
//! to frame `i + 1` (forward flow).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Dense 2D displacement grid in pixels per frame step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    /// Horizontal displacement, shape (height, width).
    pub u: Array2<f32>,
    /// Vertical displacement, shape (height, width).
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn new(u: Array2<f32>, v: Array2<f32>) -> Result<Self> {
        if u.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "flow u {:?} vs v {:?}",
                u.dim(),
                v.dim()
            )));
        }
        Ok(FlowField { u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            u: Array2::zeros((height, width)),
            v: Array2::zeros((height, width)),
        }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        FlowField {
            u: Array2::from_elem((height, width), u),
            v: Array2::from_elem((height, width), v),
        }
    }

    pub fn height(&self) -> usize {
        self.u.nrows()
    }

    pub fn width(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|x| x.is_finite()) && self.v.iter().all(|x| x.is_finite())
    }

    /// Mean flow vector over the pixels where `support` is nonzero.
    /// Returns `None` for an empty support.
    pub fn mean_over(&self, support: &Array2<u8>) -> Option<(f32, f32)> {
        let mut su = 0f64;
        let mut sv = 0f64;
        let mut n = 0u64;
        for ((r, c), &m) in support.indexed_iter() {
            if m != 0 {
                su += self.u[(r, c)] as f64;
                sv += self.v[(r, c)] as f64;
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(((su / n as f64) as f32, (sv / n as f64) as f32))
        }
    }
}

/// Tight axis-aligned bounding box with half-open pixel bounds
/// `[x0, x1) × [y0, y1)`. An empty mask has no box (`Option<BBox>::None`
/// is the EMPTY sentinel throughout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }
}

/// Intersection-over-union of two optional boxes; EMPTY vs anything is 0.
pub fn bbox_iou(a: Option<BBox>, b: Option<BBox>) -> f64 {
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        _ => return 0.0,
    };
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix1 <= ix0 || iy1 <= iy0 {
        return 0.0;
    }
    let inter = (ix1 - ix0) as u64 * (iy1 - iy0) as u64;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|a∧b| / |a∨b|` over binary grids. Both empty is defined as 1.0 so a
/// correctly predicted disappearance scores perfectly.
pub fn mask_iou(a: &Array2<u8>, b: &Array2<u8>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mask_iou {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let x = x != 0;
        let y = y != 0;
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Tight bounds of the nonzero pixels of a binary grid.
pub fn tight_bbox(mask: &Array2<u8>) -> Option<BBox> {
    let mut x0 = u32::MAX;
    let mut y0 = u32::MAX;
    let mut x1 = 0u32;
    let mut y1 = 0u32;
    let mut any = false;
    for ((r, c), &m) in mask.indexed_iter() {
        if m != 0 {
            any = true;
            x0 = x0.min(c as u32);
            y0 = y0.min(r as u32);
            x1 = x1.max(c as u32 + 1);
            y1 = y1.max(r as u32 + 1);
        }
    }
    if any {
        Some(BBox::new(x0, y0, x1, y1))
    } else {
        None
    }
}

/// One object's binary occupancy grid plus identity, class, and score.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub id: u64,
    pub class_id: u8,
    pub score: f64,
    /// Binary grid, entries in {0, 1}.
    pub mask: Array2<u8>,
    /// Tight bounds of the nonzero pixels; `None` for an empty mask.
    pub bbox: Option<BBox>,
}

impl InstanceMask {
    pub fn new(id: u64, class_id: u8, score: f64, mask: Array2<u8>) -> Self {
        let bbox = tight_bbox(&mask);
        InstanceMask {
            id,
            class_id,
            score,
            mask,
            bbox,
        }
    }

    pub fn area(&self) -> u64 {
        self.mask.iter().filter(|&&m| m != 0).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_none()
    }

    /// Rebuild the derived bbox after the mask grid was edited in place.
    pub fn refresh_bbox(&mut self) {
        self.bbox = tight_bbox(&self.mask);
    }
}

/// Number of moving-object classes; labels are 1..=8, background is 0.
pub const NUM_CLASSES: u8 = 8;

/// Per-pixel class-label grid over moving-object classes and background.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub labels: Array2<u8>,
}

impl SemanticMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.iter().any(|&l| l > NUM_CLASSES) {
            return Err(Error::Format(format!(
                "semantic label out of range 0..={NUM_CLASSES}"
            )));
        }
        Ok(SemanticMap { labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SemanticMap {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }
}

/// Provenance of a generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub config: String,
}

/// An ordered run of frames: flows, per-frame instances, and semantic maps.
/// `flows[i]` maps frame `i` to frame `i + 1`, so there are `frames - 1` flows.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub flows: Vec<FlowField>,
    pub instances: Vec<Vec<InstanceMask>>,
    pub semantics: Vec<SemanticMap>,
    pub meta: SampleMeta,
}

impl SequenceSample {
    pub fn frames(&self) -> usize {
        self.semantics.len()
    }

    pub fn height(&self) -> usize {
        self.semantics[0].height()
    }

    pub fn width(&self) -> usize {
        self.semantics[0].width()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.frames();
        if self.flows.len() + 1 != l || self.instances.len() != l {
            return Err(Error::Shape(format!(
                "sequence with {} frames has {} flows / {} instance lists",
                l,
                self.flows.len(),
                self.instances.len()
            )));
        }
        let shape = (self.height(), self.width());
        for f in &self.flows {
            if f.u.dim() != shape {
                return Err(Error::Shape("flow grid shape differs".into()));
            }
            if !f.is_finite() {
                return Err(Error::Format("non-finite flow entry".into()));
            }
        }
        for (sem, insts) in self.semantics.iter().zip(&self.instances) {
            if sem.labels.dim() != shape {
                return Err(Error::Shape("semantic grid shape differs".into()));
            }
            for inst in insts {
                if inst.mask.dim() != shape {
                    return Err(Error::Shape("instance grid shape differs".into()));
                }
            }
        }
        Ok(())
    }
}

/// Write a flow field in the binary flow container: magic "PIEH",
/// little-endian i32 width and height, then row-major interleaved
/// float32 (u, v) pairs.
pub fn flow_write(field: &FlowField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    flow_write_to(field, &mut w)
}

pub fn flow_write_to<W: Write>(field: &FlowField, w: &mut W) -> Result<()> {
    w.write_all(FLO_MAGIC)?;
    w.write_i32::<LittleEndian>(field.width() as i32)?;
    w.write_i32::<LittleEndian>(field.height() as i32)?;
    for r in 0..field.height() {
        for c in 0..field.width() {
            w.write_f32::<LittleEndian>(field.u[(r, c)])?;
            w.write_f32::<LittleEndian>(field.v[(r, c)])?;
        }
    }
    Ok(())
}

/// Read a flow field written by [`flow_write`]; bit-exact round trip.
pub fn flow_read(path: &Path) -> Result<FlowField> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    flow_read_from(&mut r)
}

pub fn flow_read_from<R: Read>(r: &mut R) -> Result<FlowField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated flow header".into()))?;
    if &magic != FLO_MAGIC {
        return Err(Error::Format(format!(
            "bad flow magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width = r
        .read_i32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated flow header".into()))?;
    let height = r
        .read_i32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated flow header".into()))?;
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!(
            "nonpositive flow dims {width}x{height}"
        )));
    }
    let (width, height) = (width as usize, height as usize);
    let mut u = Array2::zeros((height, width));
    let mut v = Array2::zeros((height, width));
    for row in 0..height {
        for col in 0..width {
            u[(row, col)] = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::Format("truncated flow payload".into()))?;
            v[(row, col)] = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::Format("truncated flow payload".into()))?;
        }
    }
    Ok(FlowField { u, v })
}

/// Persist a label grid as an 8-bit grayscale PNG.
pub fn labels_write(labels: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let buf: Vec<u8> = labels.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Format("label grid to image".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn labels_read(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::Format(e.to_string()))
}
