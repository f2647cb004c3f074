//! Voxel grids, text embeddings and their on-disk formats.
//!
//! Flat voxel index is `x·(Y·Z) + y·Z + z` everywhere. Bit-packed masks are
//! most-significant-bit first: voxel `i` is bit `7 − i mod 8` of byte `i / 8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Extents of the official benchmark grid.
pub const SEMKITTI_DIMS: [usize; 3] = [256, 256, 32];
pub const SEMKITTI_VOXELS: usize = 256 * 256 * 32;

const GRID_MAGIC: &[u8; 8] = b"ESSCGRID";
const TEXT_MAGIC: &[u8; 8] = b"ESSCTEXT";
const FORMAT_VERSION: u32 = 1;

/// A dense labeled voxel volume with a known-space mask.
///
/// Labels range over `0..=num_classes`, where `0` is empty space and
/// `num_classes` is the number of semantic classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemGrid {
    dims: [usize; 3],
    num_classes: u16,
    labels: Vec<u16>,
    valid: Vec<bool>,
}

impl SemGrid {
    pub fn new(dims: [usize; 3], num_classes: u16, labels: Vec<u16>, valid: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            shape_err!("grid dims {dims:?} contain a zero extent");
        }
        let n = dims.iter().product::<usize>();
        if labels.len() != n || valid.len() != n {
            shape_err!(
                "grid {dims:?} needs {n} voxels, got {} labels and {} validity flags",
                labels.len(),
                valid.len()
            );
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > num_classes) {
            invalid!("label {bad} exceeds class count {num_classes}");
        }
        Ok(Self {
            dims,
            num_classes,
            labels,
            valid,
        })
    }

    /// Every voxel set to `label`, all valid.
    pub fn filled(dims: [usize; 3], num_classes: u16, label: u16) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, num_classes, vec![label; n], vec![true; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [_, ny, nz] = self.dims;
        (x * ny + y) * nz + z
    }

    pub fn label_at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, i: usize, label: u16) {
        assert!(label <= self.num_classes, "label {label} > {}", self.num_classes);
        self.labels[i] = label;
    }

    pub fn set_valid(&mut self, i: usize, valid: bool) {
        self.valid[i] = valid;
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Same labels, validity taken from `other`.
    pub fn with_validity_of(&self, other: &SemGrid) -> Result<Self> {
        if other.dims != self.dims {
            shape_err!("validity source {:?} vs grid {:?}", other.dims, self.dims);
        }
        let mut g = self.clone();
        g.valid.clone_from(&other.valid);
        Ok(g)
    }

    /// Re-declares the semantic class count; labels must still fit.
    pub fn with_num_classes(mut self, num_classes: u16) -> Result<Self> {
        if self.max_label() > num_classes {
            invalid!("label {} exceeds class count {num_classes}", self.max_label());
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Pads every axis at the high end up to a multiple of `multiple`. Padded
    /// voxels are empty and invalid.
    pub fn pad_to_multiple(&self, multiple: usize) -> SemGrid {
        let padded = self.dims.map(|d| d.div_ceil(multiple) * multiple);
        if padded == self.dims {
            return self.clone();
        }
        let n = padded.iter().product();
        let mut labels = vec![0; n];
        let mut valid = vec![false; n];
        let [nx, ny, nz] = self.dims;
        let [_, py, pz] = padded;
        for x in 0..nx {
            for y in 0..ny {
                let src = (x * ny + y) * nz;
                let dst = (x * py + y) * pz;
                labels[dst..dst + nz].copy_from_slice(&self.labels[src..src + nz]);
                valid[dst..dst + nz].copy_from_slice(&self.valid[src..src + nz]);
            }
        }
        SemGrid {
            dims: padded,
            num_classes: self.num_classes,
            labels,
            valid,
        }
    }
}

/// Precomputed text features of one scene: a global vector and a token
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub global: Vec<f64>,
    /// `[L, D_t]`
    pub tokens: Tensor,
}

impl TextEmbedding {
    pub fn new(global: Vec<f64>, tokens: Tensor) -> Result<Self> {
        if global.is_empty() {
            invalid!("text embedding: empty global vector");
        }
        if tokens.rank() != 2 {
            shape_err!("text tokens: expected [L, D_t], got {:?}", tokens.shape());
        }
        if !global.iter().all(|v| v.is_finite()) || !tokens.all_finite() {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(Self { global, tokens })
    }

    pub fn global_dim(&self) -> usize {
        self.global.len()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Raw benchmark label → training class mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelRemap(pub BTreeMap<u16, u16>);

impl LabelRemap {
    /// `i → i` for `i ∈ 0..=max`.
    pub fn identity(max: u16) -> Self {
        Self((0..=max).map(|i| (i, i)).collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn max_class(&self) -> u16 {
        self.0.values().copied().max().unwrap_or(0)
    }

    pub fn map(&self, raw: u16) -> Result<u16> {
        self.0
            .get(&raw)
            .copied()
            .ok_or_else(|| Error::Format(format!("raw label {raw} has no remap entry")))
    }
}

pub fn unpack_bits(bytes: &[u8], voxel_count: usize) -> Result<Vec<bool>> {
    let need = voxel_count.div_ceil(8);
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "bit mask for {voxel_count} voxels needs {need} bytes, got {}",
            bytes.len()
        )));
    }
    Ok((0..voxel_count).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

pub fn pack_bits(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

/// Decodes an official-size `.label` / `.invalid` pair.
pub fn read_semkitti_voxels(label_bytes: &[u8], invalid_bytes: &[u8], remap: &LabelRemap) -> Result<SemGrid> {
    if label_bytes.len() != SEMKITTI_VOXELS * 2 {
        return Err(Error::Format(format!(
            "label file must hold {} bytes, got {}",
            SEMKITTI_VOXELS * 2,
            label_bytes.len()
        )));
    }
    let invalid = unpack_bits(invalid_bytes, SEMKITTI_VOXELS)?;
    let labels = label_bytes
        .chunks_exact(2)
        .map(|b| remap.map(u16::from_le_bytes([b[0], b[1]])))
        .collect::<Result<Vec<_>>>()?;
    let valid = invalid.into_iter().map(|f| !f).collect();
    SemGrid::new(SEMKITTI_DIMS, remap.max_class(), labels, valid)
}

/// Encodes a grid as `(label bytes, invalid bytes)`.
pub fn write_semkitti_voxels(grid: &SemGrid) -> Result<(Vec<u8>, Vec<u8>)> {
    if grid.dims != SEMKITTI_DIMS {
        shape_err!("benchmark voxel files need dims {SEMKITTI_DIMS:?}, got {:?}", grid.dims);
    }
    let labels = grid.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    let invalid: Vec<bool> = grid.valid.iter().map(|v| !v).collect();
    Ok((labels, pack_bits(&invalid)))
}

pub fn read_semkitti_files(label_path: &Path, invalid_path: &Path, remap: &LabelRemap) -> Result<SemGrid> {
    read_semkitti_voxels(&fs::read(label_path)?, &fs::read(invalid_path)?, remap)
}

/// Majority-vote downsampling by `factor` per axis.
///
/// A parent voxel takes the most frequent class among its valid non-empty
/// children (smallest index on ties), `0` if its valid children are all
/// empty, and is invalid when no child is valid.
pub fn downsample_labels_majority(grid: &SemGrid, factor: usize) -> Result<SemGrid> {
    if !matches!(factor, 1 | 2 | 4 | 8) {
        invalid!("downsample factor {factor} not in {{1, 2, 4, 8}}");
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    for (axis, &d) in ["X", "Y", "Z"].iter().zip(&grid.dims) {
        if d % factor != 0 {
            shape_err!("axis {axis} extent {d} not divisible by {factor}");
        }
    }
    let out_dims = grid.dims.map(|d| d / factor);
    let n = out_dims.iter().product();
    let mut labels = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut tally = vec![0u32; grid.num_classes as usize + 1];
    for px in 0..out_dims[0] {
        for py in 0..out_dims[1] {
            for pz in 0..out_dims[2] {
                tally.fill(0);
                let mut any_valid = false;
                for x in px * factor..(px + 1) * factor {
                    for y in py * factor..(py + 1) * factor {
                        for z in pz * factor..(pz + 1) * factor {
                            let i = grid.index(x, y, z);
                            if grid.valid[i] {
                                any_valid = true;
                                tally[grid.labels[i] as usize] += 1;
                            }
                        }
                    }
                }
                let mut best = 0u16;
                let mut best_count = 0;
                for (c, &count) in tally.iter().enumerate().skip(1) {
                    if count > best_count {
                        best = c as u16;
                        best_count = count;
                    }
                }
                labels.push(best);
                valid.push(any_valid);
            }
        }
    }
    SemGrid::new(out_dims, grid.num_classes, labels, valid)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated payload (need {n} bytes at offset {}, file has {})",
                self.what,
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }

    fn magic(&mut self, magic: &[u8], version: u32) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Format(format!("{}: bad magic {:?}", self.what, String::from_utf8_lossy(got))));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_grid_simple(bytes: &[u8]) -> Result<SemGrid> {
    let mut r = Reader::new(bytes, "grid file");
    r.magic(GRID_MAGIC, FORMAT_VERSION)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let c = r.u32()?;
    let num_classes = u16::try_from(c).map_err(|_| Error::Format(format!("grid file: class count {c} exceeds 16 bits")))?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("grid file: dims overflow".into()))?;
    let labels = r
        .take(n * 2)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect::<Vec<_>>();
    let valid = unpack_bits(r.take(n.div_ceil(8))?, n)?;
    r.finish()?;
    if let Some(&bad) = labels.iter().find(|&&l| l > num_classes) {
        return Err(Error::Format(format!("grid file: label {bad} exceeds declared class count {num_classes}")));
    }
    SemGrid::new(dims, num_classes, labels, valid).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_grid_simple(grid: &SemGrid) -> Vec<u8> {
    let n = grid.len();
    let mut out = Vec::with_capacity(28 + 2 * n + n.div_ceil(8));
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&u32::from(grid.num_classes).to_le_bytes());
    for l in &grid.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&pack_bits(&grid.valid));
    out
}

pub fn read_text_embedding(bytes: &[u8]) -> Result<TextEmbedding> {
    let mut r = Reader::new(bytes, "text embedding file");
    r.magic(TEXT_MAGIC, FORMAT_VERSION)?;
    let (dg, l, dt) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if dg == 0 || l == 0 || dt == 0 {
        return Err(Error::Format(format!("text embedding file: zero dimension (D_g={dg}, L={l}, D_t={dt})")));
    }
    let global = r.f64s(dg)?;
    let tokens = r.f64s(l.checked_mul(dt).ok_or_else(|| Error::Format("text embedding: size overflow".into()))?)?;
    r.finish()?;
    TextEmbedding::new(global, Tensor::new([l, dt], tokens)?)
}

pub fn write_text_embedding(text: &TextEmbedding) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * (text.global.len() + text.tokens.numel()));
    out.extend_from_slice(TEXT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [text.global_dim(), text.token_count(), text.token_dim()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in text.global.iter().chain(text.tokens.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_grid(path: &Path) -> Result<SemGrid> {
    read_grid_simple(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_grid(path: &Path, grid: &SemGrid) -> Result<()> {
    Ok(fs::write(path, write_grid_simple(grid))?)
}

pub fn load_text(path: &Path) -> Result<TextEmbedding> {
    read_text_embedding(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_text(path: &Path, text: &TextEmbedding) -> Result<()> {
    Ok(fs::write(path, write_text_embedding(text))?)
}
