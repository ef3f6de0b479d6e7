//! Multi-resolution hash-encoding deformation field: per-level trilinear
//! feature interpolation feeding a small ReLU MLP that emits a position
//! offset μ ∈ R³ and a rotation offset σ ∈ R⁴ per query point.
//!
//! Two capacity tiers exist side by side: a high-capacity field for the
//! dynamic Gaussian group and a lightweight one for the static group. The
//! MLP output layer starts at zero weights with the σ bias at the identity
//! quaternion, so a fresh field is exactly the identity deformation while
//! every head stays trainable.

use crate::error::CoreError;
use crate::geometry::{quat_left_matrix, quat_mul, Aabb, Quat};
use crate::io::{push_f32, push_u32, Reader};
use crate::par;
use crate::Result;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Spatial hash primes; the first coordinate passes through unmultiplied.
const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashGridConfig {
    pub levels: u32,
    /// Table size T per level; must be a power of two.
    pub table_size: u32,
    pub features_per_entry: u32,
    pub base_resolution: u32,
    pub finest_resolution: u32,
    pub mlp_hidden: u32,
    pub mlp_layers: u32,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() {
            return Err(CoreError::Config(format!("table_size {} is not a power of two", self.table_size)));
        }
        if self.finest_resolution < self.base_resolution {
            return Err(CoreError::Config("finest_resolution < base_resolution".into()));
        }
        if self.levels < 1 || self.mlp_layers < 1 {
            return Err(CoreError::Config("levels and mlp_layers must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        (self.levels * self.features_per_entry) as usize
    }

    pub fn table_param_count(&self) -> usize {
        (self.levels * self.table_size * self.features_per_entry) as usize
    }
}

/// Dataset capacity profile for the dual-field construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashProfile {
    N3dv,
    MeetRoom,
}

impl HashProfile {
    /// (dynamic (T, F), static (T, F)).
    pub fn table_sizes(&self) -> ((u32, u32), (u32, u32)) {
        match self {
            HashProfile::N3dv => ((1 << 16, 4), (1 << 14, 2)),
            HashProfile::MeetRoom => ((1 << 15, 4), (1 << 13, 2)),
        }
    }
}

/// Flat MLP: hidden ReLU layers plus a linear 7-dim output. Parameters live
/// in one flat vector, layer by layer, weights row-major then bias.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    sizes: Vec<(usize, usize)>, // (out, in) per layer
    params: Vec<f64>,
}

impl Mlp {
    fn new(input: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Mlp {
        let mut sizes = Vec::new();
        let mut fan_in = input;
        for _ in 0..layers {
            sizes.push((hidden, fan_in));
            fan_in = hidden;
        }
        sizes.push((7, fan_in));
        let total: usize = sizes.iter().map(|(o, i)| o * i + o).sum();
        let mut params = vec![0.0; total];
        // Xavier-uniform hidden layers; output layer stays zero except the
        // σ_w bias, making the initial deformation the identity.
        let mut off = 0;
        for (li, &(out, inp)) in sizes.iter().enumerate() {
            let bound = (6.0 / (out + inp) as f64).sqrt();
            if li + 1 < sizes.len() {
                for k in 0..out * inp {
                    params[off + k] = rng.gen_range(-bound..bound);
                }
            }
            off += out * inp + out;
        }
        let mut mlp = Mlp { sizes, params };
        let (_, b_off) = mlp.layer_offsets(layers);
        mlp.params[b_off + 3] = 1.0; // σ bias = identity quaternion
        mlp
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for &(out, inp) in self.sizes.iter().take(layer) {
            off += out * inp + out;
        }
        let (out, inp) = self.sizes[layer];
        (off, off + out * inp)
    }

    /// Forward pass caching post-activation values per layer.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.sizes.len());
        let mut cur = x.to_vec();
        for (li, &(out, inp)) in self.sizes.iter().enumerate() {
            let (w_off, b_off) = self.layer_offsets(li);
            let mut next = vec![0.0; out];
            for o in 0..out {
                let row = &self.params[w_off + o * inp..w_off + (o + 1) * inp];
                let mut acc = self.params[b_off + o];
                for (a, b) in row.iter().zip(&cur) {
                    acc += a * b;
                }
                next[o] = if li + 1 < self.sizes.len() { acc.max(0.0) } else { acc };
            }
            acts.push(next.clone());
            cur = next;
        }
        let out = acts.last().unwrap().clone();
        (out, acts)
    }

    /// Backward pass; accumulates parameter gradients into `grad_params`
    /// and returns dL/dinput.
    fn backward(&self, x: &[f64], acts: &[Vec<f64>], d_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for li in (0..self.sizes.len()).rev() {
            let (out, inp) = self.sizes[li];
            let (w_off, b_off) = self.layer_offsets(li);
            if li + 1 < self.sizes.len() {
                // ReLU gate from the cached post-activation
                for o in 0..out {
                    if acts[li][o] <= 0.0 {
                        delta[o] = 0.0;
                    }
                }
            }
            let prev: &[f64] = if li == 0 { x } else { &acts[li - 1] };
            let mut d_prev = vec![0.0; inp];
            for o in 0..out {
                let d = delta[o];
                grad_params[b_off + o] += d;
                let row_off = w_off + o * inp;
                for i in 0..inp {
                    grad_params[row_off + i] += d * prev[i];
                    d_prev[i] += d * self.params[row_off + i];
                }
            }
            delta = d_prev;
        }
        delta
    }
}

/// Corner indices and trilinear weights for one query, all levels.
#[derive(Debug, Clone)]
struct EncodeCache {
    corners: Vec<[u32; 8]>,
    weights: Vec<[f64; 8]>,
}

#[derive(Debug, Clone)]
pub struct DeformField {
    pub config: HashGridConfig,
    pub aabb: Aabb,
    /// L·T·F features, level-major.
    pub tables: Vec<f64>,
    mlp: Mlp,
    resolutions: Vec<u32>,
}

/// Cached intermediate state for one deformed point, consumed by backward.
#[derive(Debug, Clone)]
pub struct DeformCache {
    encode: EncodeCache,
    features: Vec<f64>,
    acts: Vec<Vec<f64>>,
    sigma_raw: [f64; 4],
    sigma_norm: f64,
    q_unit: Quat,
}

impl DeformField {
    pub fn new(config: HashGridConfig, aabb: Aabb, seed: u64) -> Result<DeformField> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = config.levels as usize;
        let growth = if levels > 1 {
            ((config.finest_resolution as f64 / config.base_resolution as f64).ln() / (levels as f64 - 1.0)).exp()
        } else {
            1.0
        };
        let resolutions: Vec<u32> =
            (0..levels).map(|l| (config.base_resolution as f64 * growth.powi(l as i32)).floor() as u32).collect();
        let mut tables = vec![0.0; config.table_param_count()];
        for v in tables.iter_mut() {
            *v = rng.gen_range(-1e-4..1e-4);
        }
        let mlp = Mlp::new(config.feature_dim(), config.mlp_hidden as usize, config.mlp_layers as usize, &mut rng);
        Ok(DeformField { config, aabb, tables, mlp, resolutions })
    }

    pub fn table_param_count(&self) -> usize {
        self.tables.len()
    }

    pub fn mlp_params(&self) -> &[f64] {
        &self.mlp.params
    }

    pub fn mlp_params_mut(&mut self) -> &mut [f64] {
        &mut self.mlp.params
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    /// Round all parameters through f32 (checkpoint precision).
    pub fn quantize_to_f32(&mut self) {
        for v in self.tables.iter_mut() {
            *v = *v as f32 as f64;
        }
        for v in self.mlp.params.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    fn corner_index(&self, level: usize, v: [u32; 3]) -> u32 {
        let res = self.resolutions[level];
        let side = res as u64 + 1;
        let t = self.config.table_size as u64;
        if side * side * side <= t {
            (v[0] as u64 + v[1] as u64 * side + v[2] as u64 * side * side) as u32
        } else {
            let h = (v[0] as u64).wrapping_mul(HASH_PRIMES[0])
                ^ (v[1] as u64).wrapping_mul(HASH_PRIMES[1])
                ^ (v[2] as u64).wrapping_mul(HASH_PRIMES[2]);
            (h & (t - 1)) as u32
        }
    }

    fn encode_cached(&self, p: Vector3<f64>) -> (Vec<f64>, EncodeCache) {
        let p01 = self.aabb.normalize_clamped(p);
        let levels = self.config.levels as usize;
        let f = self.config.features_per_entry as usize;
        let t = self.config.table_size as usize;
        let mut features = vec![0.0; levels * f];
        let mut cache = EncodeCache { corners: Vec::with_capacity(levels), weights: Vec::with_capacity(levels) };
        for l in 0..levels {
            let res = self.resolutions[l] as f64;
            let g = p01 * res;
            let mut i0 = [0u32; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let cell = g[k].floor().min(res - 1.0).max(0.0);
                i0[k] = cell as u32;
                frac[k] = g[k] - cell;
            }
            let mut corners = [0u32; 8];
            let mut weights = [0.0; 8];
            for (c, (corner, weight)) in corners.iter_mut().zip(weights.iter_mut()).enumerate() {
                let d = [(c & 1) as u32, ((c >> 1) & 1) as u32, ((c >> 2) & 1) as u32];
                let v = [i0[0] + d[0], i0[1] + d[1], i0[2] + d[2]];
                let mut wgt = 1.0;
                for k in 0..3 {
                    wgt *= if d[k] == 1 { frac[k] } else { 1.0 - frac[k] };
                }
                *corner = self.corner_index(l, v);
                *weight = wgt;
                let base = (l * t + *corner as usize) * f;
                for fi in 0..f {
                    features[l * f + fi] += wgt * self.tables[base + fi];
                }
            }
            cache.corners.push(corners);
            cache.weights.push(weights);
        }
        (features, cache)
    }

    /// Concatenated per-level trilinear features for a query point.
    pub fn encode(&self, p: Vector3<f64>) -> Vec<f64> {
        self.encode_cached(p).0
    }

    /// Deform one point: p' = p + μ, q' = norm(q) ⊗ norm(σ).
    /// A degenerate ‖σ‖ < 1e-8 is treated as the identity rotation offset.
    pub fn deform(&self, p: Vector3<f64>, q: Quat) -> Result<(Vector3<f64>, Quat, DeformCache)> {
        let (features, encode) = self.encode_cached(p);
        let (out, acts) = self.mlp.forward(&features);
        let mu = Vector3::new(out[0], out[1], out[2]);
        let sigma_raw = [out[3], out[4], out[5], out[6]];
        let sigma_norm = (sigma_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let q_unit = q.normalized()?;
        let sigma_unit = if sigma_norm < 1e-8 {
            Quat::IDENTITY
        } else {
            Quat::new(
                sigma_raw[0] / sigma_norm,
                sigma_raw[1] / sigma_norm,
                sigma_raw[2] / sigma_norm,
                sigma_raw[3] / sigma_norm,
            )
        };
        let q_new = quat_mul(q_unit, sigma_unit);
        Ok((p + mu, q_new, DeformCache { encode, features, acts, sigma_raw, sigma_norm, q_unit }))
    }
}

/// Gradients of a scalar loss w.r.t. one field's parameters.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub tables: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros_like(field: &DeformField) -> FieldGrads {
        FieldGrads { tables: vec![0.0; field.tables.len()], mlp: vec![0.0; field.mlp.params.len()] }
    }

    pub fn reset(&mut self) {
        self.tables.iter_mut().for_each(|v| *v = 0.0);
        self.mlp.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Backpropagate dL/dp' and dL/dq' through the field for a batch of cached
/// deformations, accumulating into `grads`. No gradients are produced for
/// the inputs (p, q); the shift stage freezes both.
pub fn backward_batch(
    field: &DeformField,
    caches: &[DeformCache],
    d_pos: &[Vector3<f64>],
    d_rot: &[[f64; 4]],
    grads: &mut FieldGrads,
) -> Result<()> {
    if caches.len() != d_pos.len() || caches.len() != d_rot.len() {
        return Err(CoreError::ShapeMismatch("deform backward batch lengths".into()));
    }
    let f = field.config.features_per_entry as usize;
    let t = field.config.table_size as usize;

    struct ChunkGrads {
        mlp: Vec<f64>,
        // (flat table index, gradient) pairs in query order
        table: Vec<(u32, f64)>,
    }

    let chunks: Vec<ChunkGrads> = par::map_chunks(caches.len(), 256, |range| {
        let mut local = ChunkGrads {
            mlp: vec![0.0; field.mlp.params.len()],
            table: Vec::with_capacity(range.len() * field.config.levels as usize * 8 * f),
        };
        for i in range {
            let cache = &caches[i];
            let mut d_out = [0.0; 7];
            d_out[0] = d_pos[i].x;
            d_out[1] = d_pos[i].y;
            d_out[2] = d_pos[i].z;
            if cache.sigma_norm >= 1e-8 {
                // q' = L(q̂)·σ̂ ⇒ dσ̂ = L(q̂)ᵀ dq', then through normalization
                let l = quat_left_matrix(cache.q_unit);
                let dq = nalgebra::Vector4::new(d_rot[i][0], d_rot[i][1], d_rot[i][2], d_rot[i][3]);
                let d_sig_unit = l.transpose() * dq;
                let n = cache.sigma_norm;
                let unit = nalgebra::Vector4::new(
                    cache.sigma_raw[0] / n,
                    cache.sigma_raw[1] / n,
                    cache.sigma_raw[2] / n,
                    cache.sigma_raw[3] / n,
                );
                let d_sig = (d_sig_unit - unit * unit.dot(&d_sig_unit)) / n;
                d_out[3] = d_sig.x;
                d_out[4] = d_sig.y;
                d_out[5] = d_sig.z;
                d_out[6] = d_sig.w;
            }
            let d_features = field.mlp.backward(&cache.features, &cache.acts, &d_out, &mut local.mlp);
            for (l, (corners, weights)) in cache.encode.corners.iter().zip(&cache.encode.weights).enumerate() {
                for c in 0..8 {
                    let base = (l * t + corners[c] as usize) * f;
                    for fi in 0..f {
                        let g = weights[c] * d_features[l * f + fi];
                        if g != 0.0 {
                            local.table.push(((base + fi) as u32, g));
                        }
                    }
                }
            }
        }
        local
    });

    // merge in chunk order: per-slot addition order equals query order
    for c in chunks {
        for (a, b) in grads.mlp.iter_mut().zip(&c.mlp) {
            *a += b;
        }
        for (idx, g) in c.table {
            grads.tables[idx as usize] += g;
        }
    }
    Ok(())
}

/// Construct the dual-capacity field pair (dynamic, static) for a profile.
pub fn make_dual(scene_aabb: Aabb, profile: HashProfile, seed: u64) -> Result<(DeformField, DeformField)> {
    let ((t_dyn, f_dyn), (t_st, f_st)) = profile.table_sizes();
    let shared = |t: u32, f: u32| HashGridConfig {
        levels: 8,
        table_size: t,
        features_per_entry: f,
        base_resolution: 16,
        finest_resolution: 256,
        mlp_hidden: 64,
        mlp_layers: 2,
    };
    let dyn_field = DeformField::new(shared(t_dyn, f_dyn), scene_aabb, seed ^ 0xD1)?;
    let st_field = DeformField::new(shared(t_st, f_st), scene_aabb, seed ^ 0x57)?;
    Ok((dyn_field, st_field))
}

// ---------------------------------------------------------------------------
// Checkpoint section codec
// ---------------------------------------------------------------------------

/// Field blob: config ints, AABB, then all parameters as f32.
pub fn encode_field(field: &DeformField) -> Vec<u8> {
    let mut buf = Vec::new();
    let c = &field.config;
    for v in
        [c.levels, c.table_size, c.features_per_entry, c.base_resolution, c.finest_resolution, c.mlp_hidden, c.mlp_layers]
    {
        push_u32(&mut buf, v);
    }
    for v in [field.aabb.min, field.aabb.max] {
        push_f32(&mut buf, v.x);
        push_f32(&mut buf, v.y);
        push_f32(&mut buf, v.z);
    }
    push_u32(&mut buf, field.tables.len() as u32);
    for &v in &field.tables {
        push_f32(&mut buf, v);
    }
    push_u32(&mut buf, field.mlp.params.len() as u32);
    for &v in &field.mlp.params {
        push_f32(&mut buf, v);
    }
    buf
}

pub fn decode_field(bytes: &[u8]) -> Result<DeformField> {
    let mut r = Reader::new(bytes);
    let config = HashGridConfig {
        levels: r.u32()?,
        table_size: r.u32()?,
        features_per_entry: r.u32()?,
        base_resolution: r.u32()?,
        finest_resolution: r.u32()?,
        mlp_hidden: r.u32()?,
        mlp_layers: r.u32()?,
    };
    let aabb = Aabb {
        min: Vector3::new(r.f32()?, r.f32()?, r.f32()?),
        max: Vector3::new(r.f32()?, r.f32()?, r.f32()?),
    };
    let mut field = DeformField::new(config, aabb, 0)?;
    let nt = r.u32()? as usize;
    if nt != field.tables.len() {
        return Err(CoreError::CorruptState(format!("table size {nt} != {}", field.tables.len())));
    }
    for v in field.tables.iter_mut() {
        *v = r.f32()?;
    }
    let nm = r.u32()? as usize;
    if nm != field.mlp.params.len() {
        return Err(CoreError::CorruptState(format!("mlp size {nm} != {}", field.mlp.params.len())));
    }
    for v in field.mlp.params.iter_mut() {
        *v = r.f32()?;
    }
    Ok(field)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn unit_aabb() -> Aabb {
        Aabb { min: Vector3::new(-1.0, -1.0, -1.0), max: Vector3::new(1.0, 1.0, 1.0) }
    }

    pub(crate) fn small_config() -> HashGridConfig {
        HashGridConfig {
            levels: 4,
            table_size: 1 << 10,
            features_per_entry: 2,
            base_resolution: 4,
            finest_resolution: 32,
            mlp_hidden: 16,
            mlp_layers: 2,
        }
    }

    fn random_quat(rng: &mut impl Rng) -> Quat {
        Quat::new(
            rng.gen_range(0.3..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        )
    }

    #[test]
    fn profile_table_sizes_match_contract() {
        assert_eq!(HashProfile::N3dv.table_sizes(), ((65536, 4), (16384, 2)));
        assert_eq!(HashProfile::MeetRoom.table_sizes(), ((32768, 4), (8192, 2)));
    }

    #[test]
    fn dual_field_parameter_counts() {
        let (dyn_f, st_f) = make_dual(unit_aabb(), HashProfile::N3dv, 1).unwrap();
        assert_eq!(dyn_f.table_param_count(), 8 * 65536 * 4);
        assert_eq!(st_f.table_param_count(), 8 * (1 << 14) * 2);
        assert_eq!(dyn_f.config.levels, st_f.config.levels);
        assert_eq!(dyn_f.config.mlp_hidden, st_f.config.mlp_hidden);
    }

    #[test]
    fn fresh_field_is_identity_on_random_probes() {
        let field = DeformField::new(small_config(), unit_aabb(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let q = random_quat(&mut rng);
            let (p2, q2, _) = field.deform(p, q).unwrap();
            assert_eq!(p2, p);
            let qn = q.normalized().unwrap();
            assert_eq!(q2.to_array(), qn.to_array());
        }
    }

    #[test]
    fn degenerate_sigma_acts_as_identity_rotation() {
        let mut field = DeformField::new(small_config(), unit_aabb(), 9).unwrap();
        let layers = field.config.mlp_layers as usize;
        let (_, b_off) = field.mlp.layer_offsets(layers);
        field.mlp.params[b_off + 3] = 0.0; // zero the σ bias entirely
        let q = Quat::new(0.2, 0.4, -0.1, 0.8);
        let (_, q2, cache) = field.deform(Vector3::zeros(), q).unwrap();
        assert!(cache.sigma_norm < 1e-8);
        assert_eq!(q2.to_array(), q.normalized().unwrap().to_array());
    }

    #[test]
    fn encode_exact_at_corner_and_center() {
        let mut field = DeformField::new(small_config(), unit_aabb(), 10).unwrap();
        // level 0 resolution 4 is dense (5³ = 125 ≤ 1024); seed vertex (1,2,3)
        let res = field.resolutions()[0] as f64;
        let f = field.config.features_per_entry as usize;
        let side = field.resolutions()[0] as usize + 1;
        let vertex_flat = 1 + 2 * side + 3 * side * side;
        field.tables[vertex_flat * f] = 0.625;
        let to_world = |p01: Vector3<f64>| p01 * 2.0 - Vector3::new(1.0, 1.0, 1.0);
        let feats = field.encode(to_world(Vector3::new(1.0 / res, 2.0 / res, 3.0 / res)));
        assert_eq!(feats[0], 0.625);

        // cell center: average of the 8 corner features
        let mut avg = 0.0;
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let flat = (1 + dx) + (2 + dy) * side + (3 + dz) * side * side;
                    avg += field.tables[flat * f] / 8.0;
                }
            }
        }
        let feats_c = field.encode(to_world(Vector3::new(1.5 / res, 2.5 / res, 3.5 / res)));
        assert_relative_eq!(feats_c[0], avg, epsilon = 1e-12);
    }

    #[test]
    fn encode_matches_scalar_trilinear_oracle() {
        let field = {
            let mut f = DeformField::new(small_config(), unit_aabb(), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for v in f.tables.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            f
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fpe = field.config.features_per_entry as usize;
        let t = field.config.table_size as usize;
        for _ in 0..50 {
            let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let feats = field.encode(p);
            // scalar reference: loop the 8 corners explicitly per level
            let p01 = unit_aabb().normalize_clamped(p);
            for (l, &res) in field.resolutions().iter().enumerate() {
                let g = p01 * res as f64;
                let i0: Vec<f64> = (0..3).map(|k| g[k].floor().min(res as f64 - 1.0).max(0.0)).collect();
                for fi in 0..fpe {
                    let mut acc = 0.0;
                    for dz in 0..2u32 {
                        for dy in 0..2u32 {
                            for dx in 0..2u32 {
                                let v = [i0[0] as u32 + dx, i0[1] as u32 + dy, i0[2] as u32 + dz];
                                let w = (if dx == 1 { g[0] - i0[0] } else { 1.0 - (g[0] - i0[0]) })
                                    * (if dy == 1 { g[1] - i0[1] } else { 1.0 - (g[1] - i0[1]) })
                                    * (if dz == 1 { g[2] - i0[2] } else { 1.0 - (g[2] - i0[2]) });
                                let side = res as u64 + 1;
                                let idx = if side * side * side <= t as u64 {
                                    v[0] as u64 + v[1] as u64 * side + v[2] as u64 * side * side
                                } else {
                                    ((v[0] as u64)
                                        ^ (v[1] as u64).wrapping_mul(2654435761)
                                        ^ (v[2] as u64).wrapping_mul(805459861))
                                        & (t as u64 - 1)
                                };
                                acc += w * field.tables[(l * t + idx as usize) * fpe + fi];
                            }
                        }
                    }
                    assert!((feats[l * fpe + fi] - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn encode_is_locally_continuous() {
        let field = {
            let mut f = DeformField::new(small_config(), unit_aabb(), 14).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            for v in f.tables.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            f
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..200 {
            let p = Vector3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
            let delta = 1e-5;
            let p2 = p + Vector3::new(delta, -delta, delta * 0.5);
            let f1 = field.encode(p);
            let f2 = field.encode(p2);
            let df: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // features change O(δ): per-level slope bounded by res × max|feature|
            let bound = 2.0 * *field.resolutions().last().unwrap() as f64 * delta * 4.0;
            assert!(df < bound, "feature jump {df} over {delta}");
        }
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        let mut field = DeformField::new(small_config(), unit_aabb(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for v in field.tables.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        // randomize the whole MLP so σ is non-degenerate and ReLUs mix
        let n_mlp = field.mlp.params.len();
        for v in field.mlp_params_mut().iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }

        // 4-point toy loss: Σ dot(p'_i, a_i) + dot(q'_i, b_i)
        let points: Vec<(Vector3<f64>, Quat)> = (0..4)
            .map(|_| {
                (
                    Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
                    random_quat(&mut rng),
                )
            })
            .collect();
        let a: Vec<Vector3<f64>> = (0..4)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<[f64; 4]> = (0..4)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();

        let loss = |f: &DeformField| -> f64 {
            let mut l = 0.0;
            for (i, &(p, q)) in points.iter().enumerate() {
                let (p2, q2, _) = f.deform(p, q).unwrap();
                l += p2.dot(&a[i]);
                let qa = q2.to_array();
                l += (0..4).map(|k| qa[k] * b[i][k]).sum::<f64>();
            }
            l
        };

        let mut grads = FieldGrads::zeros_like(&field);
        let mut caches = Vec::new();
        for &(p, q) in &points {
            let (_, _, c) = field.deform(p, q).unwrap();
            caches.push(c);
        }
        backward_batch(&field, &caches, &a, &b, &mut grads).unwrap();

        let h = 1e-5;
        let check = |name: String, analytic: f64, fd: f64| {
            let err = (analytic - fd).abs();
            let scale = analytic.abs().max(fd.abs());
            assert!(err < 1e-7 || err / scale < 1e-3, "{name}: {analytic:.4e} vs fd {fd:.4e}");
        };

        // touched table entries
        let mut touched: Vec<usize> = Vec::new();
        let fpe = field.config.features_per_entry as usize;
        let tsz = field.config.table_size as usize;
        for c in &caches {
            for (l, corners) in c.encode.corners.iter().enumerate() {
                for &ci in corners {
                    touched.push((l * tsz + ci as usize) * fpe);
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for &ti in touched.iter().step_by(3) {
            let orig = field.tables[ti];
            field.tables[ti] = orig + h;
            let lh = loss(&field);
            field.tables[ti] = orig - h;
            let ll = loss(&field);
            field.tables[ti] = orig;
            check(format!("table[{ti}]"), grads.tables[ti], (lh - ll) / (2.0 * h));
        }
        // sampled MLP params across all layers
        for k in (0..n_mlp).step_by(37) {
            let orig = field.mlp.params[k];
            field.mlp.params[k] = orig + h;
            let lh = loss(&field);
            field.mlp.params[k] = orig - h;
            let ll = loss(&field);
            field.mlp.params[k] = orig;
            check(format!("mlp[{k}]"), grads.mlp[k], (lh - ll) / (2.0 * h));
        }
    }

    #[test]
    fn field_checkpoint_roundtrip() {
        let mut field = DeformField::new(small_config(), unit_aabb(), 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for v in field.tables.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        field.quantize_to_f32();
        let bytes = encode_field(&field);
        let back = decode_field(&bytes).unwrap();
        assert_eq!(back.config, field.config);
        assert_eq!(back.tables, field.tables);
        assert_eq!(back.mlp.params, field.mlp.params);
        assert!(decode_field(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config();
        c.table_size = 1000; // not a power of two
        assert!(DeformField::new(c, unit_aabb(), 0).is_err());
        let mut c2 = small_config();
        c2.finest_resolution = 2;
        assert!(DeformField::new(c2, unit_aabb(), 0).is_err());
    }
}
