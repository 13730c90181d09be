//! Non-learned mask transport baselines: copy-last, mean-flow shift, and
//! dense forward-splat warping.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fields::{FlowField, InstanceMask};

/// The copy-last baseline: the mask is carried over unchanged.
pub fn copy_last(inst: &InstanceMask) -> InstanceMask {
    inst.clone()
}

fn check_shapes(inst: &InstanceMask, flow: &FlowField) -> Result<()> {
    if inst.mask.dim() != flow.u.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs flow {:?}",
            inst.mask.dim(),
            flow.u.dim()
        )));
    }
    Ok(())
}

/// Translate the whole mask by the rounded mean flow over its support
/// (round half away from zero); pixels shifted out of frame are dropped.
pub fn shift_mask(inst: &InstanceMask, flow: &FlowField) -> Result<InstanceMask> {
    check_shapes(inst, flow)?;
    let (h, w) = inst.mask.dim();
    let (du, dv) = match flow.mean_over(&inst.mask) {
        Some((u, v)) => (u.round() as i64, v.round() as i64),
        None => (0, 0),
    };
    let mut out = Array2::zeros((h, w));
    for ((r, c), &m) in inst.mask.indexed_iter() {
        if m != 0 {
            let nr = r as i64 + dv;
            let nc = c as i64 + du;
            if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                out[(nr as usize, nc as usize)] = 1;
            }
        }
    }
    Ok(InstanceMask::new(inst.id, inst.class_id, inst.score, out))
}

/// Forward-splat each foreground pixel onto the 4 nearest integer cells with
/// bilinear weights; binarize where the accumulated weight reaches 0.5.
/// Out-of-frame contributions are dropped.
pub fn warp_mask(inst: &InstanceMask, flow: &FlowField) -> Result<InstanceMask> {
    check_shapes(inst, flow)?;
    let (h, w) = inst.mask.dim();
    let mut acc = Array2::<f64>::zeros((h, w));
    for ((r, c), &m) in inst.mask.indexed_iter() {
        if m == 0 {
            continue;
        }
        let tx = c as f64 + flow.u[(r, c)] as f64;
        let ty = r as f64 + flow.v[(r, c)] as f64;
        let x0 = tx.floor();
        let y0 = ty.floor();
        let fx = tx - x0;
        let fy = ty - y0;
        let cells = [
            (y0 as i64, x0 as i64, (1.0 - fx) * (1.0 - fy)),
            (y0 as i64, x0 as i64 + 1, fx * (1.0 - fy)),
            (y0 as i64 + 1, x0 as i64, (1.0 - fx) * fy),
            (y0 as i64 + 1, x0 as i64 + 1, fx * fy),
        ];
        for (rr, cc, wgt) in cells {
            if wgt > 0.0 && rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                acc[(rr as usize, cc as usize)] += wgt;
            }
        }
    }
    let out = acc.mapv(|a| (a >= 0.5) as u8);
    Ok(InstanceMask::new(inst.id, inst.class_id, inst.score, out))
}

/// Left-fold of [`warp_mask`] over a flow sequence (multi-step baseline).
pub fn warp_iterated(inst: &InstanceMask, flows: &[FlowField]) -> Result<InstanceMask> {
    if flows.is_empty() {
        return Err(Error::Shape("warp_iterated needs n >= 1 flows".into()));
    }
    let mut cur = inst.clone();
    for f in flows {
        cur = warp_mask(&cur, f)?;
    }
    Ok(cur)
}
