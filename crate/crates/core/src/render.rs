//! Differentiable splatting renderer.
//!
//! Forward: project every Gaussian, cull (behind camera, peak alpha below
//! 1/255, masked out), sort globally by camera depth, then composite
//! front-to-back per pixel inside each Gaussian's 3σ elliptical footprint.
//! Identity features blend with the same per-contribution weights as RGB.
//!
//! Backward: replays compositing from the contribution cache, producing
//! gradients for every Gaussian parameter plus the view-space positional
//! gradient norms that drive densification. Forward and backward pass 1
//! parallelize over pixel rows, backward pass 2 over Gaussians; merge order
//! is fixed, so results do not depend on the thread count.

use crate::error::CoreError;
use crate::gaussians::{GaussianSet, MaskView};
use crate::geometry::{
    backprop_quat_normalize, rotmat_grad_of_unit, rotmat_of_unit, Camera, Quat, COV2D_FLOOR,
};
use crate::io::Image;
use crate::par;
use crate::Result;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

/// Peak-alpha culling threshold: a Gaussian whose center alpha is below
/// this never contributes.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Elliptical footprint cutoff in squared Mahalanobis distance (3σ).
pub const FOOTPRINT_D2: f64 = 9.0;
/// Hard cap on the screen-space footprint radius, px. Bounds the
/// contribution cache against degenerate huge Gaussians; healthy desk-scale
/// scenes stay far below it.
pub const FOOTPRINT_RADIUS_CAP: f64 = 80.0;

const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    /// Composite the identity-feature image alongside RGB.
    pub with_id: bool,
}

/// One compositing step at one pixel: Gaussian global index, its alpha, and
/// the transmittance in front of it.
#[derive(Debug, Clone, Copy)]
pub struct ContribEntry {
    pub gaussian: u32,
    pub alpha: f64,
    pub transmittance: f64,
}

/// Per-visible-Gaussian projection cache carried from forward to backward.
#[derive(Debug, Clone)]
struct Prepared {
    /// Global index into base ∪ var (base first).
    idx: u32,
    mean: Vector2<f64>,
    /// Inverse of the floored 2D covariance.
    conic: Matrix2<f64>,
    depth: f64,
    p_cam: Vector3<f64>,
    o_eff: f64,
    color: [f64; 3],
    color_clamped: [bool; 3],
    view_dir: Vector3<f64>,
    dist_to_cam: f64,
    rot: Matrix3<f64>,
    q_raw: Quat,
    j: Matrix2x3<f64>,
    /// J·W — pinhole Jacobian times extrinsic rotation.
    m: Matrix2x3<f64>,
    s_eff: Vector3<f64>,
    sh: [f64; 12],
    /// Inclusive pixel bbox, clipped to the image.
    x0: i32,
    x1: i32,
    y0: i32,
    y1: i32,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    /// K_id channels when requested, zero channels otherwise.
    pub id_feature: Image,
    pub alpha: Image,
    /// Per-pixel compositing log, CSR layout: entries for pixel i live at
    /// `contrib[contrib_offsets[i]..contrib_offsets[i+1]]`, front to back.
    pub contrib: Vec<ContribEntry>,
    pub contrib_offsets: Vec<u32>,
    cam: Camera,
    prepared: Vec<Prepared>,
    n_total: usize,
    n_base: usize,
    sh_degree: u32,
    k_id: usize,
    with_id: bool,
}

/// Gradients for every Gaussian parameter, indexed by global index
/// (base first, then var).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    /// Flattened n_total × sh_stride in primitive sh layout.
    pub sh: Vec<f64>,
    pub sh_stride: usize,
    /// Flattened n_total × k_id.
    pub identity: Vec<f64>,
    /// dL/db for the straight-through mask, one per var primitive.
    pub mask_b: Vec<f64>,
    /// ‖dL/d(projected 2D mean)‖ per Gaussian — the view-space positional
    /// gradient that drives densification.
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Running per-Gaussian average of view-space positional gradient norms.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub grad_sum: Vec<f64>,
    pub vis_count: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> GradAccumulator {
        GradAccumulator { grad_sum: vec![0.0; n], vis_count: vec![0; n] }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        assert_eq!(self.grad_sum.len(), grads.mean2d_norm.len());
        for i in 0..self.grad_sum.len() {
            if grads.visible[i] {
                self.grad_sum[i] += grads.mean2d_norm[i];
                self.vis_count[i] += 1;
            }
        }
    }

    /// Average norm; 0 where the Gaussian was never visible.
    pub fn mean(&self, i: usize) -> f64 {
        if self.vis_count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.vis_count[i] as f64
        }
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.grad_sum.len()).map(|i| self.mean(i)).collect()
    }
}

/// Evaluate one SH color channel: 0.5 offset, clamped to [0, 1]. Degree 1
/// adds the direction-linear band.
fn eval_color(sh: &[f64], sh_degree: u32, dir: Vector3<f64>, ch: usize) -> (f64, bool) {
    let mut v = 0.5 + SH_C0 * sh[ch];
    if sh_degree >= 1 {
        v += SH_C1 * (-dir.y * sh[3 + ch] + dir.z * sh[6 + ch] - dir.x * sh[9 + ch]);
    }
    let clamped = !(0.0..=1.0).contains(&v);
    (v.clamp(0.0, 1.0), clamped)
}

/// Project and cull; returns the depth-sorted visible list.
fn prepare(
    cam: &Camera,
    set: &GaussianSet,
    mask: Option<&MaskView>,
    positions: Option<&[Vector3<f64>]>,
    rotations: Option<&[Quat]>,
) -> Result<Vec<Prepared>> {
    if let Some(view) = mask {
        if view.keep.len() != set.var.len() {
            return Err(CoreError::MaskLengthMismatch { mask: view.keep.len(), var: set.var.len() });
        }
    }
    let n_base = set.base.len();
    let wrot = cam.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
    let cam_center = cam.center_world();

    let mut out: Vec<Prepared> = Vec::with_capacity(set.total());
    for idx in 0..set.total() {
        let g = set.primitive(idx);
        // Eq. 1 masking: quantized-to-zero var primitives are excluded
        // outright, so they contribute nothing anywhere.
        if idx >= n_base {
            if let Some(view) = mask {
                if !view.keep[idx - n_base] {
                    continue;
                }
            }
        }
        let o_eff = g.opacity();
        if o_eff < ALPHA_SKIP {
            continue;
        }
        let position = positions.map_or(g.position, |p| p[idx]);
        let rotation = rotations.map_or(g.rotation, |q| q[idx]);

        let p_cam = cam.world_to_camera_point(position);
        if p_cam.z <= cam.near {
            continue;
        }
        let (u, v) = cam.pinhole_pixel(p_cam);
        let q_unit = match rotation.normalized() {
            Ok(q) => q,
            Err(_) => continue,
        };
        let rot = rotmat_of_unit(q_unit);
        let s_eff = g.scale();
        let scale2 = Matrix3::from_diagonal(&s_eff.component_mul(&s_eff));
        let cov3 = rot * scale2 * rot.transpose();
        let j = cam.perspective_jacobian(p_cam);
        let m = j * wrot;
        let mut cov2 = m * cov3 * m.transpose();
        cov2[(0, 0)] += COV2D_FLOOR;
        cov2[(1, 1)] += COV2D_FLOOR;
        let off = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);

        let det = cov2[(0, 0)] * cov2[(1, 1)] - off * off;
        if det <= 0.0 || !det.is_finite() {
            continue;
        }
        let conic = Matrix2::new(cov2[(1, 1)] / det, -off / det, -off / det, cov2[(0, 0)] / det);

        // conservative bbox from the major eigenvalue
        let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
        let lam_max = mid + ((mid * mid - det).max(0.0)).sqrt();
        let radius = (FOOTPRINT_D2.sqrt() * lam_max.sqrt()).min(FOOTPRINT_RADIUS_CAP);
        let x0 = (u - radius).floor().max(0.0) as i32;
        let x1 = (u + radius).ceil().min(cam.width as f64 - 1.0) as i32;
        let y0 = (v - radius).floor().max(0.0) as i32;
        let y1 = (v + radius).ceil().min(cam.height as f64 - 1.0) as i32;
        if x0 > x1 || y0 > y1 || (u + radius) < 0.0 || (v + radius) < 0.0 {
            continue;
        }

        let to_g = position - cam_center;
        let dist = to_g.norm();
        let view_dir = if dist > 1e-12 { to_g / dist } else { Vector3::z() };
        let mut sh = [0.0; 12];
        sh[..g.sh.len()].copy_from_slice(&g.sh);
        let mut color = [0.0; 3];
        let mut color_clamped = [false; 3];
        for ch in 0..3 {
            let (c, cl) = eval_color(&g.sh, set.sh_degree, view_dir, ch);
            color[ch] = c;
            color_clamped[ch] = cl;
        }

        out.push(Prepared {
            idx: idx as u32,
            mean: Vector2::new(u, v),
            conic,
            depth: p_cam.z,
            p_cam,
            o_eff,
            color,
            color_clamped,
            view_dir,
            dist_to_cam: dist,
            rot,
            q_raw: rotation,
            j,
            m,
            s_eff,
            sh,
            x0,
            x1,
            y0,
            y1,
        });
    }
    // strictly increasing camera depth; ties break by original index
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.idx.cmp(&b.idx)));
    Ok(out)
}

/// Render with an optional Eq. 1 mask and optional per-Gaussian deformed
/// positions/rotations (used by the shift stage before baking).
pub fn render_deformed(
    cam: &Camera,
    set: &GaussianSet,
    mask: Option<&MaskView>,
    positions: Option<&[Vector3<f64>]>,
    rotations: Option<&[Quat]>,
    opts: RenderOptions,
) -> Result<RenderOutput> {
    let k_id = if opts.with_id { set.k_id as usize } else { 0 };
    let (h, w) = (cam.height as usize, cam.width as usize);
    let prepared = prepare(cam, set, mask, positions, rotations)?;

    // identity vectors by visible slot, for cheap access in the hot loop
    let ids: Vec<&[f64]> =
        prepared.iter().map(|p| set.primitive(p.idx as usize).identity.as_slice()).collect();

    // bin visible gaussians into tiles, preserving depth order
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (vi, p) in prepared.iter().enumerate() {
        for ty in (p.y0 as usize / TILE)..=(p.y1 as usize / TILE) {
            for tx in (p.x0 as usize / TILE)..=(p.x1 as usize / TILE) {
                tile_lists[ty * tiles_x + tx].push(vi as u32);
            }
        }
    }

    struct RowBand {
        rgb: Vec<f64>,
        id: Vec<f64>,
        alpha: Vec<f64>,
        contrib: Vec<ContribEntry>,
        counts: Vec<u32>,
    }

    // one band per tile row; bands own disjoint image rows
    let bands: Vec<RowBand> = par::map_indexed(tiles_y, |ty| {
        let y_lo = ty * TILE;
        let y_hi = ((ty + 1) * TILE).min(h);
        let rows = y_hi - y_lo;
        let mut band = RowBand {
            rgb: vec![0.0; rows * w * 3],
            id: vec![0.0; rows * w * k_id],
            alpha: vec![0.0; rows * w],
            contrib: Vec::new(),
            counts: vec![0; rows * w],
        };
        for y in y_lo..y_hi {
            let by = y - y_lo;
            for x in 0..w {
                let list = &tile_lists[ty * tiles_x + x / TILE];
                let mut trans = 1.0f64;
                let base_rgb = (by * w + x) * 3;
                let base_id = (by * w + x) * k_id;
                let mut count = 0u32;
                for &vi in list {
                    let p = &prepared[vi as usize];
                    if (x as i32) < p.x0 || (x as i32) > p.x1 || (y as i32) < p.y0 || (y as i32) > p.y1 {
                        continue;
                    }
                    let dx = x as f64 - p.mean.x;
                    let dy = y as f64 - p.mean.y;
                    let d2 = p.conic[(0, 0)] * dx * dx
                        + 2.0 * p.conic[(0, 1)] * dx * dy
                        + p.conic[(1, 1)] * dy * dy;
                    if d2 > FOOTPRINT_D2 {
                        continue;
                    }
                    let alpha = p.o_eff * (-0.5 * d2).exp();
                    let weight = alpha * trans;
                    band.rgb[base_rgb] += p.color[0] * weight;
                    band.rgb[base_rgb + 1] += p.color[1] * weight;
                    band.rgb[base_rgb + 2] += p.color[2] * weight;
                    for (k, &ev) in ids[vi as usize].iter().take(k_id).enumerate() {
                        band.id[base_id + k] += ev * weight;
                    }
                    band.alpha[by * w + x] += weight;
                    band.contrib.push(ContribEntry { gaussian: vi, alpha, transmittance: trans });
                    count += 1;
                    trans *= 1.0 - alpha;
                }
                band.counts[by * w + x] = count;
            }
        }
        band
    });

    // assemble bands in band order: CSR pixel order is row-major
    let mut rgb = Image::zeros(h, w, 3);
    let mut id_feature = Image::zeros(h, w, k_id);
    let mut alpha = Image::zeros(h, w, 1);
    let mut contrib = Vec::new();
    let mut contrib_offsets = Vec::with_capacity(h * w + 1);
    contrib_offsets.push(0u32);
    for (ty, band) in bands.into_iter().enumerate() {
        let y_lo = ty * TILE;
        let rows = band.alpha.len() / w;
        rgb.data[y_lo * w * 3..(y_lo + rows) * w * 3].copy_from_slice(&band.rgb);
        if k_id > 0 {
            id_feature.data[y_lo * w * k_id..(y_lo + rows) * w * k_id].copy_from_slice(&band.id);
        }
        alpha.data[y_lo * w..(y_lo + rows) * w].copy_from_slice(&band.alpha);
        let mut fixed = band.contrib;
        for e in fixed.iter_mut() {
            // rewrite visible-slot indices to global Gaussian indices
            e.gaussian = prepared[e.gaussian as usize].idx;
        }
        contrib.extend_from_slice(&fixed);
        for &c in &band.counts {
            contrib_offsets.push(contrib_offsets.last().unwrap() + c);
        }
    }

    Ok(RenderOutput {
        rgb,
        id_feature,
        alpha,
        contrib,
        contrib_offsets,
        cam: cam.clone(),
        prepared,
        n_total: set.total(),
        n_base: set.base.len(),
        sh_degree: set.sh_degree,
        k_id,
        with_id: opts.with_id,
    })
}

/// Render the set as stored (no deformation).
pub fn render(cam: &Camera, set: &GaussianSet, mask: Option<&MaskView>, opts: RenderOptions) -> Result<RenderOutput> {
    render_deformed(cam, set, mask, None, None, opts)
}

/// Backward pass. `grad_rgb` (and optionally `grad_id`) hold dLoss/dImage;
/// `set` must be the exact set the forward pass rendered.
pub fn backward(
    out: &RenderOutput,
    set: &GaussianSet,
    grad_rgb: &Image,
    grad_id: Option<&Image>,
) -> Result<Gradients> {
    if set.total() != out.n_total || set.base.len() != out.n_base || set.sh_degree != out.sh_degree {
        return Err(CoreError::ShapeMismatch("render cache does not match this Gaussian set".into()));
    }
    if !grad_rgb.same_shape(&out.rgb) {
        return Err(CoreError::ShapeMismatch("grad_rgb shape".into()));
    }
    if let Some(gi) = grad_id {
        if !out.with_id {
            return Err(CoreError::ShapeMismatch(
                "identity gradients supplied but forward ran without identity".into(),
            ));
        }
        if !gi.same_shape(&out.id_feature) {
            return Err(CoreError::ShapeMismatch("grad_id shape".into()));
        }
    }
    let w = out.rgb.w;
    let h = out.rgb.h;
    let k_id = out.k_id;
    let n = out.n_total;
    let sh_stride = 3 * crate::gaussians::sh_coeffs_per_channel(out.sh_degree);

    // global index -> prepared slot (u32::MAX = culled)
    let mut slot_of = vec![u32::MAX; n];
    for (vi, p) in out.prepared.iter().enumerate() {
        slot_of[p.idx as usize] = vi as u32;
    }

    // pass 1: per-pixel dL/dα, iterating contributions back to front.
    // dC/dα_k = c_k·T_k − B_k/(1−α_k) with B_k the color accumulated behind k.
    let dl_dalpha: Vec<f64> = {
        let offsets = &out.contrib_offsets;
        let entries = &out.contrib;
        let chunks: Vec<Vec<f64>> = par::map_chunks(h * w, w, |range| {
            let mut local =
                vec![0.0; (offsets[range.end] - offsets[range.start]) as usize];
            let out_base = offsets[range.start] as usize;
            let mut behind_id = vec![0.0; k_id];
            for pix in range {
                let s = offsets[pix] as usize;
                let e = offsets[pix + 1] as usize;
                let mut behind_rgb = [0.0f64; 3];
                behind_id.iter_mut().for_each(|v| *v = 0.0);
                for i in (s..e).rev() {
                    let entry = entries[i];
                    let p = &out.prepared[slot_of[entry.gaussian as usize] as usize];
                    let one_minus = 1.0 - entry.alpha;
                    let mut dl_da = 0.0;
                    for ch in 0..3 {
                        let gr = grad_rgb.data[pix * 3 + ch];
                        dl_da += gr * (p.color[ch] * entry.transmittance - behind_rgb[ch] / one_minus);
                    }
                    if let Some(gimg) = grad_id {
                        let ev = &set.primitive(entry.gaussian as usize).identity;
                        for k in 0..k_id {
                            let gr = gimg.data[pix * k_id + k];
                            dl_da += gr * (ev[k] * entry.transmittance - behind_id[k] / one_minus);
                        }
                    }
                    local[i - out_base] = dl_da;
                    let wgt = entry.alpha * entry.transmittance;
                    for ch in 0..3 {
                        behind_rgb[ch] += p.color[ch] * wgt;
                    }
                    if grad_id.is_some() {
                        let ev = &set.primitive(entry.gaussian as usize).identity;
                        for k in 0..k_id {
                            behind_id[k] += ev[k] * wgt;
                        }
                    }
                }
            }
            local
        });
        chunks.concat()
    };

    // group contributions by gaussian (counting sort, stable in pixel order)
    let mut starts = vec![0u32; n + 1];
    for e in &out.contrib {
        starts[e.gaussian as usize + 1] += 1;
    }
    for i in 0..n {
        starts[i + 1] += starts[i];
    }
    let total = out.contrib.len();
    let mut g_pixel = vec![0u32; total];
    let mut g_alpha = vec![0.0f64; total];
    let mut g_trans = vec![0.0f64; total];
    let mut g_dla = vec![0.0f64; total];
    {
        let mut cursor: Vec<u32> = starts.clone();
        let mut pix = 0usize;
        for (i, e) in out.contrib.iter().enumerate() {
            while out.contrib_offsets[pix + 1] as usize <= i {
                pix += 1;
            }
            let slot = cursor[e.gaussian as usize] as usize;
            g_pixel[slot] = pix as u32;
            g_alpha[slot] = e.alpha;
            g_trans[slot] = e.transmittance;
            g_dla[slot] = dl_dalpha[i];
            cursor[e.gaussian as usize] += 1;
        }
    }

    struct PerGaussian {
        position: Vector3<f64>,
        rotation: [f64; 4],
        log_scale: Vector3<f64>,
        logit_opacity: f64,
        sh: [f64; 12],
        identity: Vec<f64>,
        mask_b: f64,
        mean_norm: f64,
        visible: bool,
    }

    let wrot = out.cam.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
    let (fx, fy) = (out.cam.fx, out.cam.fy);

    // pass 2: per-gaussian parameter chain over its own contributions
    let results: Vec<PerGaussian> = par::map_indexed(n, |gi| {
        let mut res = PerGaussian {
            position: Vector3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vector3::zeros(),
            logit_opacity: 0.0,
            sh: [0.0; 12],
            identity: vec![0.0; k_id],
            mask_b: 0.0,
            mean_norm: 0.0,
            visible: slot_of[gi] != u32::MAX,
        };
        if !res.visible {
            return res;
        }
        let p = &out.prepared[slot_of[gi] as usize];
        let s = starts[gi] as usize;
        let e = starts[gi + 1] as usize;

        let mut d_mean = Vector2::zeros();
        let mut d_conic = Matrix2::zeros();
        let mut d_oeff = 0.0;
        let mut d_color = [0.0f64; 3];
        let mut d_id = vec![0.0f64; k_id];
        for k in s..e {
            let pix = g_pixel[k] as usize;
            let alpha = g_alpha[k];
            let trans = g_trans[k];
            let dla = g_dla[k];
            let d = Vector2::new((pix % w) as f64 - p.mean.x, (pix / w) as f64 - p.mean.y);
            let gval = alpha / p.o_eff;
            let dl_dg = p.o_eff * dla;
            // g = exp(−½ΔᵀAΔ): dg/dmean = g·(AΔ), dg/dA = −½g·ΔΔᵀ
            let a_d = p.conic * d;
            d_mean += dl_dg * gval * a_d;
            d_conic += (-0.5 * dl_dg * gval) * (d * d.transpose());
            d_oeff += gval * dla;
            let wgt = alpha * trans;
            for ch in 0..3 {
                d_color[ch] += wgt * grad_rgb.data[pix * 3 + ch];
            }
            if let Some(gimg) = grad_id {
                for kk in 0..k_id {
                    d_id[kk] += wgt * gimg.data[pix * k_id + kk];
                }
            }
        }
        res.mean_norm = d_mean.norm();

        // conic = Σ₂D⁻¹ → dL/dΣ₂D = −A·dL/dA·A (the diagonal floor is
        // constant and drops out)
        let sym_dconic = 0.5 * (d_conic + d_conic.transpose());
        let d_cov2 = -(p.conic * sym_dconic * p.conic);
        // Σ₂D = M Σ Mᵀ: dΣ = Mᵀ dΣ₂D M, dM = 2 dΣ₂D M Σ
        let scale2 = Matrix3::from_diagonal(&p.s_eff.component_mul(&p.s_eff));
        let cov3 = p.rot * scale2 * p.rot.transpose();
        let d_sigma = p.m.transpose() * d_cov2 * p.m;
        let d_m = 2.0 * d_cov2 * p.m * cov3;

        // scale chain: N = Rᵀ dΣ R; dL/d(log s_k) = 2 s_k² N_kk
        let nmat = p.rot.transpose() * d_sigma * p.rot;
        let d_ls = Vector3::new(
            2.0 * p.s_eff.x * p.s_eff.x * nmat[(0, 0)],
            2.0 * p.s_eff.y * p.s_eff.y * nmat[(1, 1)],
            2.0 * p.s_eff.z * p.s_eff.z * nmat[(2, 2)],
        );
        res.log_scale = d_ls;

        // rotation chain: dR = 2 dΣ R S², then through quat normalization
        let d_rot = 2.0 * d_sigma * p.rot * scale2;
        let q_unit = p.q_raw.normalized().expect("prepared quaternions normalize");
        let dr_dq = rotmat_grad_of_unit(q_unit);
        let mut d_qunit = [0.0; 4];
        for k in 0..4 {
            d_qunit[k] = d_rot.component_mul(&dr_dq[k]).sum();
        }
        res.rotation = backprop_quat_normalize(p.q_raw, d_qunit);

        // opacity (o_eff = sigmoid(logit) for rendered primitives)
        res.logit_opacity = d_oeff * p.o_eff * (1.0 - p.o_eff);
        // straight-through mask route: b multiplies opacity and scale
        res.mask_b = d_oeff * p.o_eff + d_ls.sum();

        // color → SH; clamping gates the gradient. Degree 1 couples the
        // view direction back into the position gradient.
        let mut d_dir = Vector3::zeros();
        for ch in 0..3 {
            if p.color_clamped[ch] {
                continue;
            }
            let dc = d_color[ch];
            res.sh[ch] += SH_C0 * dc;
            if out.sh_degree >= 1 {
                res.sh[3 + ch] += -SH_C1 * p.view_dir.y * dc;
                res.sh[6 + ch] += SH_C1 * p.view_dir.z * dc;
                res.sh[9 + ch] += -SH_C1 * p.view_dir.x * dc;
                d_dir += SH_C1 * dc * Vector3::new(-p.sh[9 + ch], -p.sh[3 + ch], p.sh[6 + ch]);
            }
        }
        res.identity = d_id;

        // position: mean path (dmean/dp_cam = J) plus the J-dependence of
        // the covariance projection, all rotated back to world coordinates
        let mut d_pcam = p.j.transpose() * d_mean;
        let d_j = d_m * wrot.transpose();
        let (x, y, z) = (p.p_cam.x, p.p_cam.y, p.p_cam.z);
        let iz2 = 1.0 / (z * z);
        let (fx_z2, fy_z2) = (fx * iz2, fy * iz2);
        d_pcam.x += d_j[(0, 2)] * -fx_z2;
        d_pcam.y += d_j[(1, 2)] * -fy_z2;
        d_pcam.z += d_j[(0, 0)] * -fx_z2
            + d_j[(1, 1)] * -fy_z2
            + d_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
            + d_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
        let mut d_pos = wrot.transpose() * d_pcam;
        if out.sh_degree >= 1 && d_dir != Vector3::zeros() {
            let proj = Matrix3::identity() - p.view_dir * p.view_dir.transpose();
            d_pos += proj * d_dir / p.dist_to_cam;
        }
        res.position = d_pos;
        res
    });

    let mut grads = Gradients {
        position: vec![Vector3::zeros(); n],
        rotation: vec![[0.0; 4]; n],
        log_scale: vec![Vector3::zeros(); n],
        logit_opacity: vec![0.0; n],
        sh: vec![0.0; n * sh_stride],
        sh_stride,
        identity: vec![0.0; n * k_id.max(1)],
        mask_b: vec![0.0; set.var.len()],
        mean2d_norm: vec![0.0; n],
        visible: vec![false; n],
    };
    for (gi, r) in results.into_iter().enumerate() {
        grads.visible[gi] = r.visible;
        if !r.visible {
            continue;
        }
        grads.position[gi] = r.position;
        grads.rotation[gi] = r.rotation;
        grads.log_scale[gi] = r.log_scale;
        grads.logit_opacity[gi] = r.logit_opacity;
        grads.sh[gi * sh_stride..(gi + 1) * sh_stride].copy_from_slice(&r.sh[..sh_stride]);
        if k_id > 0 {
            grads.identity[gi * k_id..(gi + 1) * k_id].copy_from_slice(&r.identity);
        }
        grads.mean2d_norm[gi] = r.mean_norm;
        if gi >= out.n_base {
            grads.mask_b[gi - out.n_base] = r.mask_b;
        }
    }
    Ok(grads)
}

/// Map an identity-feature pixel to a label: argmax inner product against
/// the codebook rows; ties break to the lowest label id.
pub fn id_to_label(pixel: &[f64], codebook: &[Vec<f64>]) -> usize {
    assert!(!codebook.is_empty(), "codebook must be non-empty");
    let mut best = 0usize;
    let mut best_dot = f64::NEG_INFINITY;
    for (label, code) in codebook.iter().enumerate() {
        let dot: f64 = pixel.iter().zip(code).map(|(a, b)| a * b).sum();
        if dot > best_dot {
            best_dot = dot;
            best = label;
        }
    }
    best
}

/// One-hot identity codebook for labels 0..n_labels.
pub fn one_hot_codebook(n_labels: usize, k_id: usize) -> Vec<Vec<f64>> {
    assert!(n_labels <= k_id, "K_id must cover all labels");
    (0..n_labels)
        .map(|l| (0..k_id).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gaussians::{inverse_sigmoid, GaussianPrimitive};
    use crate::geometry::quat_to_rotmat;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_camera(w: u32, h: u32) -> Camera {
        Camera::look_at(
            w,
            h,
            w as f64 * 0.9,
            w as f64 * 0.9,
            Vector3::new(0.0, -3.0, 0.6),
            Vector3::zeros(),
            Vector3::z(),
            0.1,
            50.0,
        )
        .unwrap()
    }

    pub(crate) fn random_scene(n: usize, seed: u64, k_id: u32) -> GaussianSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = GaussianSet::new(0, k_id);
        for _ in 0..n {
            let mut id = vec![0.0; k_id as usize];
            id[rng.gen_range(0..k_id as usize)] = 1.0;
            set.base.push(GaussianPrimitive {
                position: Vector3::new(
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                rotation: Quat::new(
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                log_scale: Vector3::new(
                    rng.gen_range(-2.5..-1.2),
                    rng.gen_range(-2.5..-1.2),
                    rng.gen_range(-2.5..-1.2),
                ),
                logit_opacity: inverse_sigmoid(rng.gen_range(0.15..0.9)),
                sh: vec![
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                identity: id,
                dynamic_flag: false,
            });
        }
        set
    }

    /// Scalar brute-force compositor: loops every Gaussian per pixel with
    /// no tiling, binning, or shared compositing machinery.
    pub(crate) fn oracle_render(cam: &Camera, set: &GaussianSet, keep_var: Option<&[bool]>) -> (Image, Image) {
        struct Splat {
            depth: f64,
            idx: usize,
            mean: (f64, f64),
            conic: (f64, f64, f64),
            color: [f64; 3],
            o: f64,
        }
        let mut splats = Vec::new();
        for idx in 0..set.total() {
            if idx >= set.base.len() {
                if let Some(k) = keep_var {
                    if !k[idx - set.base.len()] {
                        continue;
                    }
                }
            }
            let g = set.primitive(idx);
            let o = g.opacity();
            if o < 1.0 / 255.0 {
                continue;
            }
            let p_cam = cam.world_to_camera_point(g.position);
            if p_cam.z <= cam.near {
                continue;
            }
            let (u, v) = cam.pinhole_pixel(p_cam);
            // covariance path written out longhand
            let r = quat_to_rotmat(g.rotation).unwrap();
            let s = g.scale();
            let sigma = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
            let j = cam.perspective_jacobian(p_cam);
            let wr = cam.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
            let c2 = j * wr * sigma * wr.transpose() * j.transpose();
            let (a, b, c) = (c2[(0, 0)] + COV2D_FLOOR, 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)] + COV2D_FLOOR);
            let det = a * c - b * b;
            let color = [
                (0.5 + 0.28209479177387814 * g.sh[0]).clamp(0.0, 1.0),
                (0.5 + 0.28209479177387814 * g.sh[1]).clamp(0.0, 1.0),
                (0.5 + 0.28209479177387814 * g.sh[2]).clamp(0.0, 1.0),
            ];
            splats.push(Splat {
                depth: p_cam.z,
                idx,
                mean: (u, v),
                conic: (c / det, -b / det, a / det),
                color,
                o,
            });
        }
        splats.sort_by(|x, y| x.depth.total_cmp(&y.depth).then(x.idx.cmp(&y.idx)));

        let (h, w) = (cam.height as usize, cam.width as usize);
        let mut rgb = Image::zeros(h, w, 3);
        let mut alpha = Image::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let mut t = 1.0;
                for sp in &splats {
                    let dx = x as f64 - sp.mean.0;
                    let dy = y as f64 - sp.mean.1;
                    let d2 = sp.conic.0 * dx * dx + 2.0 * sp.conic.1 * dx * dy + sp.conic.2 * dy * dy;
                    if d2 > 9.0 {
                        continue;
                    }
                    let a = sp.o * (-0.5 * d2).exp();
                    for ch in 0..3 {
                        *rgb.at_mut(y, x, ch) += sp.color[ch] * a * t;
                    }
                    *alpha.at_mut(y, x, 0) += a * t;
                    t *= 1.0 - a;
                }
            }
        }
        (rgb, alpha)
    }

    #[test]
    fn empty_set_renders_black() {
        let cam = small_camera(16, 16);
        let set = GaussianSet::new(0, 4);
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        assert!(out.rgb.data.iter().all(|&v| v == 0.0));
        assert!(out.alpha.data.iter().all(|&v| v == 0.0));
        assert!(out.contrib.is_empty());
    }

    #[test]
    fn single_saturated_gaussian_hits_its_color() {
        let cam = small_camera(17, 17);
        let mut set = GaussianSet::new(0, 1);
        // big footprint, nearly opaque, centered on the principal point
        let p = cam.backproject(cam.cx, cam.cy, 3.0);
        set.base.push(GaussianPrimitive {
            position: p,
            rotation: Quat::IDENTITY,
            log_scale: Vector3::new(-0.7, -0.7, -0.7),
            logit_opacity: 12.0,
            sh: vec![0.9, -0.3, 0.2],
            identity: vec![1.0],
            dynamic_flag: false,
        });
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        let (cy, cx) = (cam.cy.round() as usize, cam.cx.round() as usize);
        for ch in 0..3 {
            let want = (0.5 + 0.28209479177387814 * set.base[0].sh[ch]).clamp(0.0, 1.0);
            assert!((out.rgb.at(cy, cx, ch) - want).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn matches_scalar_compositing_oracle() {
        let cam = small_camera(32, 32);
        for seed in 0..8 {
            let set = random_scene(24, seed, 4);
            let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
            let (orgb, oalpha) = oracle_render(&cam, &set, None);
            for (a, b) in out.rgb.data.iter().zip(&orgb.data) {
                assert!((a - b).abs() < 1e-6, "rgb {a} vs {b}");
            }
            for (a, b) in out.alpha.data.iter().zip(&oalpha.data) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permuting_input_order_does_not_change_output() {
        let cam = small_camera(24, 24);
        let set = random_scene(12, 99, 4);
        let out1 = render(&cam, &set, None, RenderOptions::default()).unwrap();
        let mut permuted = set.clone();
        permuted.base.reverse();
        permuted.base.swap(0, 5);
        let out2 = render(&cam, &permuted, None, RenderOptions::default()).unwrap();
        assert_eq!(out1.rgb.data, out2.rgb.data);
        assert_eq!(out1.alpha.data, out2.alpha.data);
    }

    #[test]
    fn masked_out_equals_deleted_bit_exactly() {
        let cam = small_camera(24, 24);
        let mut set = random_scene(6, 3, 4);
        // move half into var
        set.var = set.base.split_off(3);
        let keep = vec![true, false, true];
        let masked = render(&cam, &set, Some(&MaskView { keep: keep.clone() }), RenderOptions { with_id: true }).unwrap();

        let mut deleted = set.clone();
        deleted.var.remove(1);
        let plain = render(&cam, &deleted, None, RenderOptions { with_id: true }).unwrap();
        assert_eq!(masked.rgb.data, plain.rgb.data);
        assert_eq!(masked.alpha.data, plain.alpha.data);
        assert_eq!(masked.id_feature.data, plain.id_feature.data);
    }

    #[test]
    fn accumulated_alpha_is_nondecreasing_and_bounded() {
        let cam = small_camera(24, 24);
        let set = random_scene(16, 5, 4);
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        for pix in 0..out.rgb.h * out.rgb.w {
            let s = out.contrib_offsets[pix] as usize;
            let e = out.contrib_offsets[pix + 1] as usize;
            let mut acc = 0.0;
            for entry in &out.contrib[s..e] {
                let next = acc + entry.alpha * entry.transmittance;
                assert!(next >= acc);
                acc = next;
            }
            assert!((0.0..=1.0 + 1e-12).contains(&acc));
            assert_relative_eq!(acc, out.alpha.data[pix], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_grad_rgb_gives_zero_gradients() {
        let cam = small_camera(16, 16);
        let set = random_scene(5, 7, 4);
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        let zeros = Image::zeros(16, 16, 3);
        let g = backward(&out, &set, &zeros, None).unwrap();
        assert!(g.position.iter().all(|v| v.norm() == 0.0));
        assert!(g.logit_opacity.iter().all(|&v| v == 0.0));
        assert!(g.sh.iter().all(|&v| v == 0.0));
        assert!(g.mean2d_norm.iter().all(|&v| v == 0.0));
    }

    /// Weighted-sum loss for finite differences: L = Σ w ∘ rgb (+ id term).
    pub(crate) fn fd_loss(cam: &Camera, set: &GaussianSet, w_rgb: &Image, w_id: Option<&Image>) -> f64 {
        let out = render(&cam.clone(), set, None, RenderOptions { with_id: w_id.is_some() }).unwrap();
        let mut l: f64 = out.rgb.data.iter().zip(&w_rgb.data).map(|(a, b)| a * b).sum();
        if let Some(wi) = w_id {
            l += out.id_feature.data.iter().zip(&wi.data).map(|(a, b)| a * b).sum::<f64>();
        }
        l
    }

    pub(crate) fn check_gradients(cam: &Camera, set: &GaussianSet, with_id: bool, seed: u64) {
        let (h, w) = (cam.height as usize, cam.width as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_rgb = Image::zeros(h, w, 3);
        for v in w_rgb.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let w_id = if with_id {
            let mut wi = Image::zeros(h, w, set.k_id as usize);
            for v in wi.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            Some(wi)
        } else {
            None
        };

        let out = render(cam, set, None, RenderOptions { with_id }).unwrap();
        let grads = backward(&out, set, &w_rgb, w_id.as_ref()).unwrap();

        let step = 1e-4;
        let tol_rel = 1e-3;
        let tol_abs = 1e-6;
        let mut checked = 0usize;
        let check = |name: &str, analytic: f64, fd: f64| {
            let err = (analytic - fd).abs();
            let scale = analytic.abs().max(fd.abs());
            assert!(
                err < tol_abs || err / scale < tol_rel,
                "{name}: analytic {analytic:.3e} vs fd {fd:.3e} (rel {:.2e})",
                err / scale.max(1e-300)
            );
        };

        for gi in 0..set.total() {
            // position
            for k in 0..3 {
                let mut hi = set.clone();
                let mut lo = set.clone();
                hi.primitive_mut(gi).position[k] += step;
                lo.primitive_mut(gi).position[k] -= step;
                let fd = (fd_loss(cam, &hi, &w_rgb, w_id.as_ref()) - fd_loss(cam, &lo, &w_rgb, w_id.as_ref()))
                    / (2.0 * step);
                check(&format!("g{gi}.pos[{k}]"), grads.position[gi][k], fd);
                checked += 1;
            }
            // rotation (raw quaternion components)
            for k in 0..4 {
                let mut hi = set.clone();
                let mut lo = set.clone();
                let mut qh = hi.primitive(gi).rotation.to_array();
                let mut ql = lo.primitive(gi).rotation.to_array();
                qh[k] += step;
                ql[k] -= step;
                hi.primitive_mut(gi).rotation = Quat::from_array(qh);
                lo.primitive_mut(gi).rotation = Quat::from_array(ql);
                let fd = (fd_loss(cam, &hi, &w_rgb, w_id.as_ref()) - fd_loss(cam, &lo, &w_rgb, w_id.as_ref()))
                    / (2.0 * step);
                check(&format!("g{gi}.rot[{k}]"), grads.rotation[gi][k], fd);
            }
            // log scale
            for k in 0..3 {
                let mut hi = set.clone();
                let mut lo = set.clone();
                hi.primitive_mut(gi).log_scale[k] += step;
                lo.primitive_mut(gi).log_scale[k] -= step;
                let fd = (fd_loss(cam, &hi, &w_rgb, w_id.as_ref()) - fd_loss(cam, &lo, &w_rgb, w_id.as_ref()))
                    / (2.0 * step);
                check(&format!("g{gi}.ls[{k}]"), grads.log_scale[gi][k], fd);
            }
            // opacity logit
            {
                let mut hi = set.clone();
                let mut lo = set.clone();
                hi.primitive_mut(gi).logit_opacity += step;
                lo.primitive_mut(gi).logit_opacity -= step;
                let fd = (fd_loss(cam, &hi, &w_rgb, w_id.as_ref()) - fd_loss(cam, &lo, &w_rgb, w_id.as_ref()))
                    / (2.0 * step);
                check(&format!("g{gi}.op"), grads.logit_opacity[gi], fd);
            }
            // sh
            for k in 0..grads.sh_stride {
                let mut hi = set.clone();
                let mut lo = set.clone();
                hi.primitive_mut(gi).sh[k] += step;
                lo.primitive_mut(gi).sh[k] -= step;
                let fd = (fd_loss(cam, &hi, &w_rgb, w_id.as_ref()) - fd_loss(cam, &lo, &w_rgb, w_id.as_ref()))
                    / (2.0 * step);
                check(&format!("g{gi}.sh[{k}]"), grads.sh[gi * grads.sh_stride + k], fd);
            }
            // identity (only when composited)
            if with_id {
                for k in 0..set.k_id as usize {
                    let mut hi = set.clone();
                    let mut lo = set.clone();
                    hi.primitive_mut(gi).identity[k] += step;
                    lo.primitive_mut(gi).identity[k] -= step;
                    let fd = (fd_loss(cam, &hi, &w_rgb, w_id.as_ref())
                        - fd_loss(cam, &lo, &w_rgb, w_id.as_ref()))
                        / (2.0 * step);
                    check(&format!("g{gi}.id[{k}]"), grads.identity[gi * set.k_id as usize + k], fd);
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn gradients_match_finite_differences_small_scene() {
        let cam = small_camera(16, 16);
        let set = random_scene(4, 21, 4);
        check_gradients(&cam, &set, true, 100);
    }

    #[test]
    fn degree1_sh_gradients_match_finite_differences() {
        let cam = small_camera(16, 16);
        let mut set = random_scene(3, 22, 4);
        set.sh_degree = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for g in set.base.iter_mut() {
            g.sh = (0..12).map(|i| if i < 3 { g.sh[i] * 0.5 } else { rng.gen_range(-0.2..0.2) }).collect();
        }
        check_gradients(&cam, &set, false, 101);
    }

    #[test]
    fn occlusion_gradient_signs_and_fd() {
        let cam = small_camera(16, 16);
        let mut set = GaussianSet::new(0, 1);
        let center = cam.backproject(cam.cx, cam.cy, 3.0);
        let toward_cam = (cam.center_world() - center).normalize();
        // front gaussian: red-ish; back gaussian: blue-ish, directly behind
        for (off, red) in [(0.6, true), (0.0, false)] {
            set.base.push(GaussianPrimitive {
                position: center + toward_cam * off,
                rotation: Quat::IDENTITY,
                log_scale: Vector3::new(-1.6, -1.6, -1.6),
                logit_opacity: inverse_sigmoid(0.6),
                sh: if red { vec![0.9, -0.6, -0.6] } else { vec![-0.6, -0.6, 0.9] },
                identity: vec![1.0],
                dynamic_flag: false,
            });
        }
        // reward = mean of the red channel
        let mut w_rgb = Image::zeros(16, 16, 3);
        for pix in 0..16 * 16 {
            w_rgb.data[pix * 3] = 1.0 / (16.0 * 16.0);
        }
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        let grads = backward(&out, &set, &w_rgb, None).unwrap();
        // more front opacity → more red
        assert!(grads.logit_opacity[0] > 0.0);
        // the occluded gaussian's red coefficient still matters, scaled by
        // the front transmittance; verify the whole thing against FD
        check_gradients(&cam, &set, false, 102);

        // transmittance scaling at the central pixel
        let pix = (cam.cy.round() as usize) * 16 + cam.cx.round() as usize;
        let s = out.contrib_offsets[pix] as usize;
        let e = out.contrib_offsets[pix + 1] as usize;
        let entries = &out.contrib[s..e];
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].gaussian, 0);
        assert_relative_eq!(entries[1].transmittance, 1.0 - entries[0].alpha, epsilon = 1e-12);
    }

    #[test]
    fn mask_ste_route_matches_scaling_finite_difference() {
        // d(render)/db for b multiplying both opacity and scale, at b = 1
        let cam = small_camera(16, 16);
        let mut set = random_scene(4, 31, 4);
        set.var = set.base.split_off(2);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut w_rgb = Image::zeros(16, 16, 3);
        for v in w_rgb.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        let grads = backward(&out, &set, &w_rgb, None).unwrap();

        let step = 1e-5;
        for vi in 0..set.var.len() {
            let scale_by = |f: f64| {
                let mut s = set.clone();
                let g = &mut s.var[vi];
                g.logit_opacity = inverse_sigmoid(f * g.opacity());
                g.log_scale.iter_mut().for_each(|v| *v += f.ln());
                s
            };
            let fd = (fd_loss(&cam, &scale_by(1.0 + step), &w_rgb, None)
                - fd_loss(&cam, &scale_by(1.0 - step), &w_rgb, None))
                / (2.0 * step);
            let a = grads.mask_b[vi];
            let scale = a.abs().max(fd.abs()).max(1e-9);
            assert!((a - fd).abs() / scale < 1e-3, "var {vi}: {a} vs fd {fd}");
        }
    }

    #[test]
    fn id_to_label_examples() {
        let codebook = one_hot_codebook(4, 6);
        let mut one_hot = vec![0.0; 6];
        one_hot[2] = 1.0;
        assert_eq!(id_to_label(&one_hot, &codebook), 2);
        // zero pixel ties → label 0
        assert_eq!(id_to_label(&[0.0; 6], &codebook), 0);
        // blended pixel: argmax by dot product
        let mut blend = vec![0.0; 6];
        blend[1] = 0.7;
        blend[3] = 0.3;
        assert_eq!(id_to_label(&blend, &codebook), 1);
    }

    #[test]
    fn backward_rejects_mismatched_inputs() {
        let cam = small_camera(16, 16);
        let set = random_scene(3, 41, 4);
        let out = render(&cam, &set, None, RenderOptions::default()).unwrap();
        let bad = Image::zeros(8, 8, 3);
        assert!(backward(&out, &set, &bad, None).is_err());
        let good = Image::zeros(16, 16, 3);
        let other = random_scene(5, 42, 4);
        assert!(backward(&out, &other, &good, None).is_err());
        // id grads without id forward
        let gid = Image::zeros(16, 16, 4);
        assert!(backward(&out, &set, &good, Some(&gid)).is_err());
    }
}
