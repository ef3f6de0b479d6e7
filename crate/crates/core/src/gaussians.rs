//! Scene state: the base/var partitioned Gaussian set, the learnable
//! inheritance mask over the var partition, and snapshot/restore.
//!
//! The base partition keeps a fixed count after initialization; the var
//! partition holds densified primitives whose count changes every timestep.
//! Opacity is stored as a logit and scale as a log so optimization steps
//! are unconstrained.

use crate::error::CoreError;
use crate::geometry::Quat;
use crate::io;
use crate::Result;
use nalgebra::Vector3;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d sigmoid / dx.
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Inverse sigmoid; input clamped away from {0, 1}.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Number of spherical-harmonics coefficients per color channel for a degree.
pub fn sh_coeffs_per_channel(sh_degree: u32) -> usize {
    ((sh_degree + 1) * (sh_degree + 1)) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    /// SH coefficients, layout [coeff][channel], length 3·(degree+1)².
    pub sh: Vec<f64>,
    /// Identity encoding, length K_id (uniform per set).
    pub identity: Vec<f64>,
    pub dynamic_flag: bool,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Argmax identity channel; ties break to the lowest index.
    pub fn argmax_identity(&self) -> usize {
        let mut best = 0usize;
        for (i, &v) in self.identity.iter().enumerate() {
            if v > self.identity[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub base: Vec<GaussianPrimitive>,
    pub var: Vec<GaussianPrimitive>,
    pub timestep: u32,
    pub sh_degree: u32,
    pub k_id: u32,
}

impl GaussianSet {
    pub fn new(sh_degree: u32, k_id: u32) -> GaussianSet {
        GaussianSet { base: Vec::new(), var: Vec::new(), timestep: 0, sh_degree, k_id }
    }

    pub fn total(&self) -> usize {
        self.base.len() + self.var.len()
    }

    /// Global index into base ∪ var (base first).
    pub fn primitive(&self, idx: usize) -> &GaussianPrimitive {
        if idx < self.base.len() {
            &self.base[idx]
        } else {
            &self.var[idx - self.base.len()]
        }
    }

    pub fn primitive_mut(&mut self, idx: usize) -> &mut GaussianPrimitive {
        let n = self.base.len();
        if idx < n {
            &mut self.base[idx]
        } else {
            &mut self.var[idx - n]
        }
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &GaussianPrimitive> {
        self.base.iter().chain(self.var.iter())
    }

    /// Validates per-primitive invariants; used at stage boundaries.
    pub fn validate(&self, expected_base: Option<usize>) -> Result<()> {
        if let Some(n) = expected_base {
            if self.base.len() != n {
                return Err(CoreError::CorruptState(format!(
                    "base count changed: expected {n}, found {}",
                    self.base.len()
                )));
            }
        }
        let sh_len = 3 * sh_coeffs_per_channel(self.sh_degree);
        for g in self.iter_all() {
            if g.identity.len() != self.k_id as usize {
                return Err(CoreError::CorruptState(format!(
                    "identity length {} != K_id {}",
                    g.identity.len(),
                    self.k_id
                )));
            }
            if g.sh.len() != sh_len {
                return Err(CoreError::CorruptState(format!("sh length {} != {}", g.sh.len(), sh_len)));
            }
            let s = g.scale();
            if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite() && s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
                return Err(CoreError::CorruptState("non-finite or non-positive scale".into()));
            }
        }
        Ok(())
    }

    /// Serialize to the checkpoint byte format (see `io::checkpoint`).
    pub fn snapshot(&self) -> Vec<u8> {
        io::checkpoint::encode_set(self)
    }

    /// Inverse of `snapshot`. Rejects truncated or trailing bytes.
    pub fn restore(bytes: &[u8]) -> Result<GaussianSet> {
        io::checkpoint::decode_set_strict(bytes)
    }

    /// Round every parameter through f32, matching checkpoint precision.
    /// Called after each on-disk save so resumed runs see bit-identical state.
    pub fn quantize_to_f32(&mut self) {
        let q = |v: f64| v as f32 as f64;
        for g in self.base.iter_mut().chain(self.var.iter_mut()) {
            g.position = g.position.map(q);
            g.rotation = Quat::from_array(g.rotation.to_array().map(q));
            g.log_scale = g.log_scale.map(q);
            g.logit_opacity = q(g.logit_opacity);
            for v in g.sh.iter_mut() {
                *v = q(*v);
            }
            for v in g.identity.iter_mut() {
                *v = q(*v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Inheritance mask
// ---------------------------------------------------------------------------

/// Learnable per-var-primitive selection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InheritanceMask {
    pub m: Vec<f64>,
}

impl InheritanceMask {
    pub fn new(len: usize, m_init: f64) -> InheritanceMask {
        InheritanceMask { m: vec![m_init; len] }
    }

    /// Quant(sigmoid(m)) with the inclusive-at-0.5 threshold: true keeps.
    pub fn keep(&self, i: usize) -> bool {
        quantize_mask(self.m[i])
    }
}

/// Threshold sigmoid(m) at 0.5 (inclusive), i.e. m ≥ 0 keeps.
pub fn quantize_mask(m: f64) -> bool {
    sigmoid(m) >= 0.5
}

/// Rendering-time view of the mask: per-var keep bits. Stored parameters
/// are untouched; masked-out primitives render with zero opacity and scale,
/// which the renderer realizes by excluding them entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskView {
    pub keep: Vec<bool>,
}

impl MaskView {
    pub fn all_kept(len: usize) -> MaskView {
        MaskView { keep: vec![true; len] }
    }

    /// Effective opacity of var primitive i under the mask.
    pub fn opacity_eff(&self, g: &GaussianPrimitive, i: usize) -> f64 {
        if self.keep[i] {
            g.opacity()
        } else {
            0.0
        }
    }

    /// Effective linear scale of var primitive i under the mask.
    pub fn scale_eff(&self, g: &GaussianPrimitive, i: usize) -> Vector3<f64> {
        if self.keep[i] {
            g.scale()
        } else {
            Vector3::zeros()
        }
    }
}

/// Build the rendering view o_r = Quant(sigmoid(m)) ∘ o, s_r likewise.
pub fn apply_mask(set: &GaussianSet, mask: &InheritanceMask) -> Result<MaskView> {
    if mask.m.len() != set.var.len() {
        return Err(CoreError::MaskLengthMismatch { mask: mask.m.len(), var: set.var.len() });
    }
    Ok(MaskView { keep: mask.m.iter().map(|&m| quantize_mask(m)).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FinalizeStats {
    pub inherited: usize,
    pub dropped: usize,
}

/// Delete var primitives whose quantized mask is zero; survivors keep their
/// original (unmasked) opacity and scale.
pub fn finalize_mask(set: &mut GaussianSet, mask: &InheritanceMask) -> Result<FinalizeStats> {
    if mask.m.len() != set.var.len() {
        return Err(CoreError::MaskLengthMismatch { mask: mask.m.len(), var: set.var.len() });
    }
    let before = set.var.len();
    let mut keep_iter = mask.m.iter().map(|&m| quantize_mask(m));
    set.var.retain(|_| keep_iter.next().unwrap());
    Ok(FinalizeStats { inherited: set.var.len(), dropped: before - set.var.len() })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn test_primitive(seed: f64) -> GaussianPrimitive {
        // values are f32-exact so snapshots round-trip to field equality
        let q = Quat::new(1.0, 0.25, -0.125, 0.0).normalized().unwrap();
        GaussianPrimitive {
            position: Vector3::new(seed, -seed, 0.5 * seed),
            rotation: Quat::from_array(q.to_array().map(|v| v as f32 as f64)),
            log_scale: Vector3::new(-1.0, -1.5, -2.0),
            logit_opacity: 0.75,
            sh: vec![0.125, 0.25, -0.5],
            identity: vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            dynamic_flag: false,
        }
    }

    fn test_set(n_base: usize, n_var: usize) -> GaussianSet {
        let mut set = GaussianSet::new(0, 8);
        for i in 0..n_base {
            set.base.push(test_primitive(i as f64 * 0.25));
        }
        for i in 0..n_var {
            let mut g = test_primitive(-(i as f64) * 0.5);
            g.dynamic_flag = true;
            set.var.push(g);
        }
        set
    }

    #[test]
    fn mask_saturation_keeps_and_drops() {
        let set = test_set(2, 3);
        let mask = InheritanceMask { m: vec![10.0, -10.0, 0.0] };
        let view = apply_mask(&set, &mask).unwrap();
        // saturated high: original values
        assert_eq!(view.opacity_eff(&set.var[0], 0), set.var[0].opacity());
        assert_eq!(view.scale_eff(&set.var[0], 0), set.var[0].scale());
        // saturated low: zeroed
        assert_eq!(view.opacity_eff(&set.var[1], 1), 0.0);
        assert_eq!(view.scale_eff(&set.var[1], 1), Vector3::zeros());
        // boundary: sigmoid(0) = 0.5 quantizes to 1 (inclusive threshold)
        assert_eq!(view.opacity_eff(&set.var[2], 2), set.var[2].opacity());
    }

    #[test]
    fn mask_length_mismatch_errors() {
        let set = test_set(1, 2);
        let mask = InheritanceMask::new(3, 0.0);
        assert!(matches!(apply_mask(&set, &mask), Err(CoreError::MaskLengthMismatch { .. })));
    }

    #[test]
    fn apply_mask_does_not_mutate_and_is_idempotent() {
        let set = test_set(1, 2);
        let before = set.clone();
        let mask = InheritanceMask { m: vec![-1.0, 1.0] };
        let v1 = apply_mask(&set, &mask).unwrap();
        let v2 = apply_mask(&set, &mask).unwrap();
        assert_eq!(set, before);
        assert_eq!(v1, v2);
    }

    #[test]
    fn finalize_mask_drops_all_and_none() {
        let mut all_drop = test_set(1, 4);
        let stats = finalize_mask(&mut all_drop, &InheritanceMask::new(4, -10.0)).unwrap();
        assert_eq!(all_drop.var.len(), 0);
        assert_eq!(stats, FinalizeStats { inherited: 0, dropped: 4 });

        let mut all_keep = test_set(1, 4);
        let orig = all_keep.var.clone();
        finalize_mask(&mut all_keep, &InheritanceMask::new(4, 10.0)).unwrap();
        assert_eq!(all_keep.var, orig);
    }

    #[test]
    fn finalize_mask_matches_brute_force_filter() {
        let mut set = test_set(2, 6);
        let m = vec![3.0, -0.2, 0.0, -7.0, 1.5, -0.001];
        // brute force: count sigmoid(m) >= 0.5
        let expected: Vec<usize> =
            m.iter().enumerate().filter(|(_, &mi)| sigmoid(mi) >= 0.5).map(|(i, _)| i).collect();
        let orig = set.var.clone();
        let stats = finalize_mask(&mut set, &InheritanceMask { m }).unwrap();
        assert_eq!(stats.inherited, expected.len());
        for (kept, &src) in set.var.iter().zip(&expected) {
            assert_eq!(kept, &orig[src]);
        }
    }

    #[test]
    fn snapshot_restore_roundtrip_equality() {
        let mut set = test_set(3, 2);
        set.timestep = 7;
        let bytes = set.snapshot();
        let back = GaussianSet::restore(&bytes).unwrap();
        assert_eq!(back, set);
        // bytes round-trip exactly
        assert_eq!(back.snapshot(), bytes);
    }

    #[test]
    fn restore_truncated_blob_errors() {
        let set = test_set(2, 1);
        let bytes = set.snapshot();
        assert!(GaussianSet::restore(&bytes[..bytes.len() - 3]).is_err());
        assert!(GaussianSet::restore(&bytes[..10]).is_err());
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut set = test_set(2, 2);
        let expect = set.clone();
        let bytes = set.snapshot();
        set.base[0].position.x += 100.0;
        set.var.pop();
        let back = GaussianSet::restore(&bytes).unwrap();
        assert_eq!(back, expect);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut set = test_set(1, 1);
        set.base[0].position.x = 0.1 + 0.2; // not f32-exact
        set.quantize_to_f32();
        let once = set.clone();
        set.quantize_to_f32();
        assert_eq!(set, once);
    }
}
