//! On-disk formats: PPM/PGM images, raw float images, flow fields, camera
//! JSON, and the Gaussian checkpoint container.
//!
//! All binary formats are little-endian. Float payloads are f32 on disk and
//! f64 in memory.

use crate::error::CoreError;
use crate::gaussians::{sh_coeffs_per_channel, GaussianPrimitive, GaussianSet};
use crate::geometry::{Camera, Quat};
use crate::Result;
use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// In-memory image
// ---------------------------------------------------------------------------

/// Row-major, channel-innermost float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Image {
        Image { h, w, c, data: vec![0.0; h * w * c] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }
}

// ---------------------------------------------------------------------------
// Little-endian helpers
// ---------------------------------------------------------------------------

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, off: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.off
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CoreError::CorruptState(format!("truncated: wanted {n} bytes, have {}", self.remaining())));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as f64)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
}

pub(crate) fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

pub mod checkpoint {
    //! Gaussian checkpoint: header {magic "DASS", version, N_base, N_var,
    //! K_id, sh_degree}, then per-primitive f32 records (base first, field
    //! order: position, rotation, log_scale, logit_opacity, sh, identity,
    //! u8 dynamic flag), then tagged sections (4-byte tag, u32 length,
    //! payload). The "TIME" section carries the timestep; the pipeline adds
    //! "HFLD" (deformation fields) and "META" (streaming state) sections.

    use super::*;

    pub const MAGIC: &[u8; 4] = b"DASS";
    pub const VERSION: u32 = 1;

    #[derive(Debug, Default, Clone)]
    pub struct Sections {
        pub entries: Vec<([u8; 4], Vec<u8>)>,
    }

    impl Sections {
        pub fn get(&self, tag: &[u8; 4]) -> Option<&[u8]> {
            self.entries.iter().find(|(t, _)| t == tag).map(|(_, p)| p.as_slice())
        }

        pub fn push(&mut self, tag: [u8; 4], payload: Vec<u8>) {
            self.entries.push((tag, payload));
        }
    }

    fn encode_primitive(buf: &mut Vec<u8>, g: &GaussianPrimitive) {
        for v in [g.position.x, g.position.y, g.position.z] {
            push_f32(buf, v);
        }
        for v in g.rotation.to_array() {
            push_f32(buf, v);
        }
        for v in [g.log_scale.x, g.log_scale.y, g.log_scale.z] {
            push_f32(buf, v);
        }
        push_f32(buf, g.logit_opacity);
        for &v in &g.sh {
            push_f32(buf, v);
        }
        for &v in &g.identity {
            push_f32(buf, v);
        }
        buf.push(g.dynamic_flag as u8);
    }

    fn decode_primitive(r: &mut Reader, sh_len: usize, k_id: usize) -> Result<GaussianPrimitive> {
        let position = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
        let rotation = Quat::new(r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        let log_scale = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
        let logit_opacity = r.f32()?;
        let mut sh = Vec::with_capacity(sh_len);
        for _ in 0..sh_len {
            sh.push(r.f32()?);
        }
        let mut identity = Vec::with_capacity(k_id);
        for _ in 0..k_id {
            identity.push(r.f32()?);
        }
        let dynamic_flag = r.u8()? != 0;
        Ok(GaussianPrimitive { position, rotation, log_scale, logit_opacity, sh, identity, dynamic_flag })
    }

    /// Header + records only (no sections).
    pub fn encode_records(set: &GaussianSet) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u32(&mut buf, VERSION);
        push_u32(&mut buf, set.base.len() as u32);
        push_u32(&mut buf, set.var.len() as u32);
        push_u32(&mut buf, set.k_id);
        push_u32(&mut buf, set.sh_degree);
        for g in set.iter_all() {
            encode_primitive(&mut buf, g);
        }
        buf
    }

    pub fn append_section(buf: &mut Vec<u8>, tag: [u8; 4], payload: &[u8]) {
        buf.extend_from_slice(&tag);
        push_u32(buf, payload.len() as u32);
        buf.extend_from_slice(payload);
    }

    /// Records plus the TIME section. This is the `GaussianSet::snapshot`
    /// byte layout.
    pub fn encode_set(set: &GaussianSet) -> Vec<u8> {
        let mut buf = encode_records(set);
        append_section(&mut buf, *b"TIME", &set.timestep.to_le_bytes());
        buf
    }

    /// Parse records and every trailing section.
    pub fn decode(bytes: &[u8]) -> Result<(GaussianSet, Sections)> {
        let mut r = Reader::new(bytes);
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(CoreError::CorruptState("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::CorruptState(format!("unsupported version {version}")));
        }
        let n_base = r.u32()? as usize;
        let n_var = r.u32()? as usize;
        let k_id = r.u32()?;
        let sh_degree = r.u32()?;
        if sh_degree > 1 {
            return Err(CoreError::CorruptState(format!("sh_degree {sh_degree} out of range")));
        }
        let sh_len = 3 * sh_coeffs_per_channel(sh_degree);
        let mut set = GaussianSet::new(sh_degree, k_id);
        for _ in 0..n_base {
            set.base.push(decode_primitive(&mut r, sh_len, k_id as usize)?);
        }
        for _ in 0..n_var {
            set.var.push(decode_primitive(&mut r, sh_len, k_id as usize)?);
        }
        let mut sections = Sections::default();
        while r.remaining() > 0 {
            let tag: [u8; 4] = r.bytes(4)?.try_into().unwrap();
            let len = r.u32()? as usize;
            sections.push(tag, r.bytes(len)?.to_vec());
        }
        if let Some(t) = sections.get(b"TIME") {
            if t.len() != 4 {
                return Err(CoreError::CorruptState("bad TIME section".into()));
            }
            set.timestep = u32::from_le_bytes(t.try_into().unwrap());
        }
        Ok((set, sections))
    }

    /// Decode and discard sections (snapshot restore path).
    pub fn decode_set_strict(bytes: &[u8]) -> Result<GaussianSet> {
        Ok(decode(bytes)?.0)
    }
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, 8-bit) from an RGB image with values in [0, 1].
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.c != 3 {
        return Err(CoreError::ShapeMismatch(format!("ppm wants 3 channels, got {}", img.c)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, usize)> {
    // magic, then three whitespace-separated ints (w, h, maxval); '#' comments allowed
    let mut fields = Vec::new();
    let mut i = magic.len();
    if &bytes[..magic.len().min(bytes.len())] != magic.as_bytes() {
        return Err(CoreError::Data(format!("not a {magic} file")));
    }
    while fields.len() < 3 && i < bytes.len() {
        match bytes[i] {
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let s = std::str::from_utf8(&bytes[start..i]).unwrap();
                fields.push(s.parse::<usize>().map_err(|_| CoreError::Data("bad pnm header".into()))?);
            }
        }
    }
    if fields.len() != 3 || i >= bytes.len() {
        return Err(CoreError::Data("truncated pnm header".into()));
    }
    // single whitespace after maxval
    Ok((fields[0], fields[1], i + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, off) = parse_pnm_header(bytes, "P6")?;
    let need = w * h * 3;
    if bytes.len() < off + need {
        return Err(CoreError::Data("truncated ppm payload".into()));
    }
    let data = bytes[off..off + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { h, w, c: 3, data })
}

/// 8-bit PGM (P5) from a label map.
pub fn encode_pgm(labels: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if labels.len() != h * w {
        return Err(CoreError::ShapeMismatch("pgm payload size".into()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (w, h, off) = parse_pnm_header(bytes, "P5")?;
    if bytes.len() < off + w * h {
        return Err(CoreError::Data("truncated pgm payload".into()));
    }
    Ok((bytes[off..off + w * h].to_vec(), h, w))
}

// ---------------------------------------------------------------------------
// Raw float images ("DIMG") and flow fields ("FLOW")
// ---------------------------------------------------------------------------

/// Raw float image: {magic "DIMG", H u32, W u32, C u32}, then H·W·C f32.
pub fn encode_dimg(img: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + img.data.len() * 4);
    buf.extend_from_slice(b"DIMG");
    push_u32(&mut buf, img.h as u32);
    push_u32(&mut buf, img.w as u32);
    push_u32(&mut buf, img.c as u32);
    for &v in &img.data {
        push_f32(&mut buf, v);
    }
    buf
}

pub fn decode_dimg(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != b"DIMG" {
        return Err(CoreError::Data("not a DIMG file".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w * c {
        data.push(r.f32()?);
    }
    Ok(Image { h, w, c, data })
}

/// Flow file: {magic "FLOW", H u32, W u32}, then the u plane (H·W f32)
/// followed by the v plane. In memory flow is a 2-channel image (u, v).
pub fn encode_flow(flow: &Image) -> Result<Vec<u8>> {
    if flow.c != 2 {
        return Err(CoreError::ShapeMismatch("flow wants 2 channels".into()));
    }
    let mut buf = Vec::with_capacity(12 + flow.data.len() * 4);
    buf.extend_from_slice(b"FLOW");
    push_u32(&mut buf, flow.h as u32);
    push_u32(&mut buf, flow.w as u32);
    for ch in 0..2 {
        for y in 0..flow.h {
            for x in 0..flow.w {
                push_f32(&mut buf, flow.at(y, x, ch));
            }
        }
    }
    Ok(buf)
}

pub fn decode_flow(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != b"FLOW" {
        return Err(CoreError::Data("not a FLOW file".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut img = Image::zeros(h, w, 2);
    for ch in 0..2 {
        for y in 0..h {
            for x in 0..w {
                *img.at_mut(y, x, ch) = r.f32()?;
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Camera JSON
// ---------------------------------------------------------------------------

/// One camera per file: `cam_<view>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// 16 row-major floats.
    pub world_to_camera: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl CameraJson {
    pub fn from_camera(cam: &Camera) -> CameraJson {
        let mut m = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                m.push(cam.world_to_camera[(r, c)]);
            }
        }
        CameraJson {
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            world_to_camera: m,
            near: cam.near,
            far: cam.far,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        if self.world_to_camera.len() != 16 {
            return Err(CoreError::Data("world_to_camera must hold 16 floats".into()));
        }
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = self.world_to_camera[r * 4 + c];
            }
        }
        Camera::new(self.width, self.height, self.fx, self.fy, self.cx, self.cy, m, self.near, self.far)
    }
}

pub fn write_camera_json(path: &Path, cam: &Camera) -> Result<()> {
    let json = serde_json::to_string_pretty(&CameraJson::from_camera(cam))
        .map_err(|e| CoreError::Data(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_camera_json(path: &Path) -> Result<Camera> {
    let raw = std::fs::read_to_string(path)?;
    let parsed: CameraJson =
        serde_json::from_str(&raw).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    parsed.to_camera()
}

// ---------------------------------------------------------------------------
// Dataset path layout
// ---------------------------------------------------------------------------

/// File name conventions shared by the generator and the pipeline.
pub mod paths {
    use super::*;

    pub fn cam_json(dir: &Path, view: usize) -> PathBuf {
        dir.join(format!("cam_{view}.json"))
    }
    pub fn rgb(dir: &Path, view: usize, t: u32) -> PathBuf {
        dir.join(format!("rgb_{view}_{t}.ppm"))
    }
    pub fn flow(dir: &Path, view: usize, t: u32) -> PathBuf {
        dir.join(format!("flow_{view}_{t}.bin"))
    }
    pub fn label(dir: &Path, view: usize, t: u32) -> PathBuf {
        dir.join(format!("label_{view}_{t}.pgm"))
    }
    pub fn oracle(dir: &Path, t: u32) -> PathBuf {
        dir.join(format!("oracle_{t}.bin"))
    }
    pub fn script(dir: &Path) -> PathBuf {
        dir.join("script.json")
    }
    pub fn gauss(dir: &Path, t: u32) -> PathBuf {
        dir.join(format!("gauss_{t}.bin"))
    }
    pub fn metrics_t(dir: &Path, t: u32) -> PathBuf {
        dir.join(format!("metrics_{t}.csv"))
    }
    pub fn densify_subset(dir: &Path, t: u32) -> PathBuf {
        dir.join(format!("densify_S_{t}.txt"))
    }
    pub fn deform_hist(dir: &Path, t: u32) -> PathBuf {
        dir.join(format!("deform_hist_{t}.csv"))
    }
}
