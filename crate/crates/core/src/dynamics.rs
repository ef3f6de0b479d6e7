//! Per-Gaussian dynamics mask: threshold optical flow into dynamic image
//! areas, look up object labels in the rendered identity image, and flag
//! every Gaussian carrying a dynamic label. Refreshed on a fixed period or
//! whenever the Gaussian count changes.

use crate::gaussians::GaussianSet;
use crate::geometry::Camera;
use crate::io::Image;
use crate::par;
use crate::render::{id_to_label, render, RenderOptions};
use crate::Result;

/// Dense optical flow as a 2-channel image: channel 0 holds the horizontal
/// displacement u, channel 1 the vertical displacement v, both in pixels,
/// mapping frame t−1 onto frame t.
pub type FlowField = Image;

/// Block-matching flow: per block, the displacement within ±radius that
/// minimizes the sum of absolute differences; ties prefer the smallest
/// displacement so identical frames give exactly zero flow. Blocks tile the
/// image (edge blocks clipped), giving a dense field directly.
pub fn flow_blockmatch(prev: &Image, cur: &Image, block: usize, radius: usize) -> Result<FlowField> {
    if !prev.same_shape(cur) {
        return Err(crate::CoreError::ShapeMismatch("flow frame shapes".into()));
    }
    let (h, w, c) = (prev.h, prev.w, prev.c);
    let block = block.max(1);
    let bw = w.div_ceil(block);
    let bh = h.div_ceil(block);

    // search offsets ordered by |d|² then (dy, dx): first strict improvement
    // wins, so the zero vector is preferred on ties
    let mut offsets: Vec<(i64, i64)> = Vec::new();
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            offsets.push((dy, dx));
        }
    }
    offsets.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));

    let sample = |img: &Image, y: i64, x: i64, ch: usize| -> f64 {
        // border replicate
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        img.at(yy, xx, ch)
    };

    let best: Vec<(f64, f64)> = par::map_indexed(bh * bw, |bi| {
        let by = bi / bw;
        let bx = bi % bw;
        let y0 = by * block;
        let x0 = bx * block;
        let y1 = (y0 + block).min(h);
        let x1 = (x0 + block).min(w);
        let mut best_sad = f64::INFINITY;
        let mut best_d = (0i64, 0i64);
        for &(dy, dx) in &offsets {
            let mut sad = 0.0;
            'search: for y in y0..y1 {
                for x in x0..x1 {
                    for ch in 0..c {
                        sad += (prev.at(y, x, ch) - sample(cur, y as i64 + dy, x as i64 + dx, ch)).abs();
                    }
                    if sad >= best_sad {
                        break 'search;
                    }
                }
            }
            if sad < best_sad {
                best_sad = sad;
                best_d = (dy, dx);
            }
        }
        (best_d.1 as f64, best_d.0 as f64) // (u, v)
    });

    let mut flow = Image::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = best[(y / block) * bw + x / block];
            *flow.at_mut(y, x, 0) = u;
            *flow.at_mut(y, x, 1) = v;
        }
    }
    Ok(flow)
}

/// Pixels whose flow magnitude exceeds γ_op.
pub fn dynamic_area(flow: &FlowField, gamma_op: f64) -> Vec<bool> {
    (0..flow.h * flow.w)
        .map(|i| {
            let u = flow.data[i * 2];
            let v = flow.data[i * 2 + 1];
            (u * u + v * v).sqrt() > gamma_op
        })
        .collect()
}

/// Per-Gaussian dynamics classification plus the bookkeeping needed to
/// decide when to refresh it.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsMask {
    /// One flag per primitive (base first, then var) at creation time.
    pub flags: Vec<bool>,
    pub dynamic_labels: Vec<usize>,
    pub creation_t: u32,
    pub count_at_creation: usize,
}

impl DynamicsMask {
    /// All-dynamic mask (used by the `--no-dynamics` ablation).
    pub fn all_dynamic(set: &GaussianSet, t: u32) -> DynamicsMask {
        DynamicsMask {
            flags: vec![true; set.total()],
            dynamic_labels: Vec::new(),
            creation_t: t,
            count_at_creation: set.total(),
        }
    }

    /// Write the flags into the primitives.
    pub fn apply_to(&self, set: &mut GaussianSet) {
        assert_eq!(self.flags.len(), set.total());
        for i in 0..set.total() {
            set.primitive_mut(i).dynamic_flag = self.flags[i];
        }
    }
}

/// Refresh when the mask is `period` timesteps old or the Gaussian count
/// changed (densification and inheritance both change it).
pub fn needs_refresh(mask: &DynamicsMask, t: u32, current_count: usize, period: u32) -> bool {
    t.saturating_sub(mask.creation_t) >= period || current_count != mask.count_at_creation
}

/// Build the per-Gaussian dynamics mask from per-view flow fields and the
/// rendered identity image of the current set.
///
/// A label is dynamic if, in any view, at least `rho` of its pixels fall
/// inside that view's thresholded dynamic area. A Gaussian is dynamic if
/// its argmax identity label is in the dynamic set.
pub fn build_mask(
    set: &GaussianSet,
    cams: &[Camera],
    flows: &[FlowField],
    codebook: &[Vec<f64>],
    gamma_op: f64,
    rho: f64,
    t: u32,
) -> Result<DynamicsMask> {
    assert_eq!(cams.len(), flows.len());
    let n_labels = codebook.len();
    let mut dynamic_labels: Vec<usize> = Vec::new();

    // per-view label statistics are independent; the union is a reduction
    let stats: Vec<Result<(Vec<u64>, Vec<u64>)>> = par::map_indexed(cams.len(), |vi| {
        let cam = &cams[vi];
        let flow = &flows[vi];
        if flow.h != cam.height as usize || flow.w != cam.width as usize {
            return Err(crate::CoreError::ShapeMismatch(format!(
                "flow {}x{} vs camera {}x{}",
                flow.h, flow.w, cam.height, cam.width
            )));
        }
        let area = dynamic_area(flow, gamma_op);
        let out = render(cam, set, None, RenderOptions { with_id: true })?;
        let mut total = vec![0u64; n_labels];
        let mut inside = vec![0u64; n_labels];
        for (pix, &in_area) in area.iter().enumerate() {
            let feat = &out.id_feature.data[pix * out.id_feature.c..(pix + 1) * out.id_feature.c];
            let label = id_to_label(feat, codebook);
            total[label] += 1;
            if in_area {
                inside[label] += 1;
            }
        }
        Ok((total, inside))
    });

    for label in 0..n_labels {
        for s in &stats {
            let (total, inside) = match s {
                Ok(v) => v,
                Err(e) => return Err(crate::CoreError::Data(e.to_string())),
            };
            if total[label] > 0 && inside[label] as f64 / total[label] as f64 >= rho {
                dynamic_labels.push(label);
                break;
            }
        }
    }

    let flags: Vec<bool> =
        (0..set.total()).map(|i| dynamic_labels.contains(&set.primitive(i).argmax_identity())).collect();
    Ok(DynamicsMask { flags, dynamic_labels, creation_t: t, count_at_creation: set.total() })
}
