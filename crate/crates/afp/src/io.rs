//! Volume files: NIfTI-1 (`.nii`, `.nii.gz`) and a raw little-endian
//! float32 blob with a JSON sidecar (`.json` + `.raw`).
//!
//! Arrays are stored x-fastest in both formats, which is exactly the
//! in-memory `(z, y, x)` layout, so NIfTI `dim[1..=3]` hold `(w, h, d)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use afp_core::{Geometry, LabelVolume, Modality, Shape3, Volume};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Format {
    #[default]
    Nifti1,
    RawJson,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(Format::Nifti1)
        } else if name.ends_with(".json") || name.ends_with(".raw") {
            Some(Format::RawJson)
        } else {
            None
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Nifti1 => "nii.gz",
            Format::RawJson => "json",
        }
    }
}

/// Run identity stamped into every written volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Decoded file contents before they become a typed volume.
struct Grid {
    data: Vec<f64>,
    shape: Shape3,
    geometry: Geometry,
    modality: Modality,
    label_names: Option<BTreeMap<u32, String>>,
}

fn format_of(path: &Path) -> Result<Format> {
    Format::from_path(path).ok_or_else(|| {
        AppError::read(
            path,
            "unknown extension (expected .nii, .nii.gz, .json or .raw)",
        )
    })
}

fn read_grid(path: &Path) -> Result<Grid> {
    match format_of(path)? {
        Format::Nifti1 => nifti::read(path),
        Format::RawJson => raw::read(path),
    }
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let g = read_grid(path)?;
    let bad = g
        .data
        .iter()
        .filter(|v| !(v.is_finite() && v.abs() <= f32::MAX as f64))
        .count();
    if bad > 0 {
        return Err(AppError::NonFiniteValues {
            path: path.into(),
            count: bad,
        });
    }
    let data = g.data.iter().map(|&v| v as f32).collect();
    Ok(Volume::new(data, g.shape, g.geometry, g.modality)?)
}

/// Labels are stored as float32 voxel values; anything that is not a
/// non-negative integer is rejected. Names come from the sidecar when the
/// format has one, otherwise every present label is named `label{k}`.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let g = read_grid(path)?;
    let mut labels = Vec::with_capacity(g.data.len());
    for &v in &g.data {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
            return Err(AppError::read(
                path,
                format!("label value {v} is not a non-negative integer"),
            ));
        }
        labels.push(v as u32);
    }
    let names = g.label_names.unwrap_or_else(|| {
        let mut present: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
        present.sort_unstable();
        present.dedup();
        present
            .into_iter()
            .map(|l| (l, format!("label{l}")))
            .collect()
    });
    Ok(LabelVolume::new(labels, g.shape, g.geometry, names)?)
}

pub fn save_volume(v: &Volume, path: &Path, prov: Option<&Provenance>) -> Result<()> {
    let grid = Grid {
        data: Vec::new(),
        shape: v.shape(),
        geometry: *v.geometry(),
        modality: v.modality(),
        label_names: None,
    };
    write_grid(path, &grid, v.data(), prov)
}

pub fn save_labels(l: &LabelVolume, path: &Path, prov: Option<&Provenance>) -> Result<()> {
    let grid = Grid {
        data: Vec::new(),
        shape: l.shape(),
        geometry: *l.geometry(),
        modality: Modality::Other,
        label_names: Some(l.label_names().clone()),
    };
    let values: Vec<f32> = l.labels().iter().map(|&k| k as f32).collect();
    if l.labels().iter().any(|&k| k > 1 << 24) {
        return Err(AppError::write(
            path,
            "label ids above 2^24 do not survive float32 storage",
        ));
    }
    write_grid(path, &grid, &values, prov)
}

fn write_grid(path: &Path, grid: &Grid, values: &[f32], prov: Option<&Provenance>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::write(dir, e))?;
    }
    match format_of(path).map_err(|_| AppError::write(path, "unknown extension"))? {
        Format::Nifti1 => nifti::write(path, grid, values, prov),
        Format::RawJson => raw::write(path, grid, values, prov),
    }
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::write(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::write(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::read(path, e))
}

mod raw {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Sidecar {
        shape: Shape3,
        spacing: [f64; 3],
        #[serde(default)]
        origin: [f64; 3],
        #[serde(default)]
        modality: Modality,
        #[serde(default)]
        dtype: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_names: Option<BTreeMap<u32, String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provenance: Option<Provenance>,
    }

    /// The sidecar and the blob share a stem: `a.json` pairs with `a.raw`.
    fn paths(path: &Path) -> (PathBuf, PathBuf) {
        (path.with_extension("json"), path.with_extension("raw"))
    }

    pub(super) fn read(path: &Path) -> Result<Grid> {
        let (json, blob) = paths(path);
        let text = fs::read(&json).map_err(|e| AppError::read(&json, e))?;
        let meta: Sidecar = serde_json::from_slice(&text).map_err(|e| AppError::read(&json, e))?;
        if let Some(dt) = meta.dtype.as_deref().filter(|d| *d != "float32") {
            return Err(AppError::read(&json, format!("unsupported dtype {dt}")));
        }
        let bytes = fs::read(&blob).map_err(|e| AppError::read(&blob, e))?;
        let n: usize = meta.shape.iter().product();
        if meta.shape.contains(&0) || bytes.len() != 4 * n {
            return Err(AppError::read(
                &blob,
                format!(
                    "expected {} bytes for shape {:?}, found {}",
                    4 * n,
                    meta.shape,
                    bytes.len()
                ),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let geometry =
            Geometry::new(meta.spacing, meta.origin).map_err(|e| AppError::read(&json, e))?;
        Ok(Grid {
            data,
            shape: meta.shape,
            geometry,
            modality: meta.modality,
            label_names: meta.label_names,
        })
    }

    pub(super) fn write(
        path: &Path,
        grid: &Grid,
        values: &[f32],
        prov: Option<&Provenance>,
    ) -> Result<()> {
        let (json, blob) = paths(path);
        let meta = Sidecar {
            shape: grid.shape,
            spacing: grid.geometry.spacing,
            origin: grid.geometry.origin,
            modality: grid.modality,
            dtype: Some("float32".into()),
            label_names: grid.label_names.clone(),
            provenance: prov.cloned(),
        };
        let mut bytes = Vec::with_capacity(4 * values.len());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&blob, bytes).map_err(|e| AppError::write(&blob, e))?;
        let text = serde_json::to_vec_pretty(&meta).expect("sidecar serializes");
        fs::write(&json, text).map_err(|e| AppError::write(&json, e))
    }
}

mod nifti {
    use super::*;

    const HEADER: usize = 348;
    const VOX_OFFSET: usize = 352;
    const DT_FLOAT32: i16 = 16;

    struct Reader<'a> {
        b: &'a [u8],
        big: bool,
    }

    impl Reader<'_> {
        fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
            let mut a = [0u8; N];
            a.copy_from_slice(&self.b[at..at + N]);
            if self.big {
                a.reverse();
            }
            a
        }
        fn i16(&self, at: usize) -> i16 {
            i16::from_le_bytes(self.bytes(at))
        }
        fn f32(&self, at: usize) -> f32 {
            f32::from_le_bytes(self.bytes(at))
        }
    }

    fn decompress(path: &Path, raw: Vec<u8>) -> Result<Vec<u8>> {
        if raw.starts_with(&[0x1f, 0x8b]) {
            let mut out = Vec::new();
            GzDecoder::new(&raw[..])
                .read_to_end(&mut out)
                .map_err(|e| AppError::read(path, format!("gzip: {e}")))?;
            Ok(out)
        } else {
            Ok(raw)
        }
    }

    pub(super) fn read(path: &Path) -> Result<Grid> {
        let raw = fs::read(path).map_err(|e| AppError::read(path, e))?;
        let b = decompress(path, raw)?;
        if b.len() < HEADER {
            return Err(AppError::read(path, "file shorter than a NIfTI-1 header"));
        }
        let size = [b[0], b[1], b[2], b[3]];
        let big = match (i32::from_le_bytes(size), i32::from_be_bytes(size)) {
            (348, _) => false,
            (_, 348) => true,
            _ => {
                return Err(AppError::read(
                    path,
                    "not a NIfTI-1 header (sizeof_hdr != 348)",
                ))
            }
        };
        let r = Reader { b: &b, big };
        if &b[344..347] != b"n+1" && &b[344..347] != b"ni1" {
            return Err(AppError::read(path, "missing NIfTI-1 magic"));
        }
        let dims: Vec<i64> = (0..8).map(|i| r.i16(40 + 2 * i) as i64).collect();
        let rank = dims[0];
        if !(3..=7).contains(&rank)
            || dims[1..=3].iter().any(|&d| d < 1)
            || dims[4..=rank as usize].iter().any(|&d| d != 1)
        {
            return Err(AppError::Non3dData {
                path: path.into(),
                dims: dims[..=(rank.clamp(0, 7) as usize)].to_vec(),
            });
        }
        let shape = [dims[3] as usize, dims[2] as usize, dims[1] as usize];
        let datatype = r.i16(70);
        let width = match datatype {
            2 | 256 => 1,
            4 | 512 => 2,
            8 | 16 | 768 => 4,
            64 => 8,
            other => {
                return Err(AppError::read(
                    path,
                    format!("unsupported NIfTI datatype {other}"),
                ))
            }
        };
        let offset = (r.f32(108) as usize).max(HEADER);
        let n: usize = shape.iter().product();
        let body = b.get(offset..offset + n * width).ok_or_else(|| {
            AppError::read(path, format!("data section holds fewer than {n} voxels"))
        })?;
        let mut data: Vec<f64> = body
            .chunks_exact(width)
            .map(|c| {
                let rc = Reader { b: c, big };
                match datatype {
                    2 => c[0] as f64,
                    256 => c[0] as i8 as f64,
                    4 => rc.i16(0) as f64,
                    512 => u16::from_le_bytes(rc.bytes(0)) as f64,
                    8 => i32::from_le_bytes(rc.bytes(0)) as f64,
                    768 => u32::from_le_bytes(rc.bytes(0)) as f64,
                    16 => rc.f32(0) as f64,
                    _ => f64::from_le_bytes(rc.bytes(0)),
                }
            })
            .collect();
        let (slope, inter) = (r.f32(112) as f64, r.f32(116) as f64);
        if slope.is_finite() && slope != 0.0 && (slope, inter) != (1.0, 0.0) {
            for v in &mut data {
                *v = *v * slope + inter;
            }
        }
        let pix = [r.f32(88), r.f32(84), r.f32(80)].map(|p| p.abs() as f64);
        let spacing = pix.map(|p| if p > 0.0 { p } else { 1.0 });
        let origin = if r.i16(252) > 0 {
            [r.f32(276), r.f32(272), r.f32(268)].map(|v| v as f64)
        } else if r.i16(254) > 0 {
            [r.f32(324), r.f32(308), r.f32(292)].map(|v| v as f64)
        } else {
            [0.0; 3]
        };
        let geometry = Geometry::new(spacing, origin).map_err(|e| AppError::read(path, e))?;
        let descrip = String::from_utf8_lossy(&b[148..228]);
        let modality = descrip
            .split_whitespace()
            .find_map(|t| t.strip_prefix("modality="))
            .and_then(|m| Modality::parse(m.trim_end_matches('\0')))
            .unwrap_or_default();
        Ok(Grid {
            data,
            shape,
            geometry,
            modality,
            label_names: None,
        })
    }

    pub(super) fn write(
        path: &Path,
        grid: &Grid,
        values: &[f32],
        prov: Option<&Provenance>,
    ) -> Result<()> {
        let mut h = vec![0u8; VOX_OFFSET];
        let put = |h: &mut Vec<u8>, at: usize, bytes: &[u8]| {
            h[at..at + bytes.len()].copy_from_slice(bytes)
        };
        put(&mut h, 0, &348i32.to_le_bytes());
        h[38] = b'r';
        let [d, hh, w] = grid.shape;
        for (i, v) in [3, w, hh, d, 1, 1, 1, 1].into_iter().enumerate() {
            put(&mut h, 40 + 2 * i, &(v as i16).to_le_bytes());
        }
        put(&mut h, 70, &DT_FLOAT32.to_le_bytes());
        put(&mut h, 72, &32i16.to_le_bytes());
        let [sz, sy, sx] = grid.geometry.spacing.map(|s| s as f32);
        for (i, v) in [1.0f32, sx, sy, sz, 1.0, 1.0, 1.0, 1.0]
            .into_iter()
            .enumerate()
        {
            put(&mut h, 76 + 4 * i, &v.to_le_bytes());
        }
        put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
        put(&mut h, 112, &1.0f32.to_le_bytes());
        h[123] = 2; // millimetres
        let mut descrip = format!("modality={}", grid.modality.as_str());
        if let Some(p) = prov {
            descrip = format!("cfg={} seed={} {descrip}", p.config_hash, p.seed);
        }
        let descrip = descrip.as_bytes();
        put(&mut h, 148, &descrip[..descrip.len().min(79)]);
        let [oz, oy, ox] = grid.geometry.origin.map(|o| o as f32);
        put(&mut h, 252, &1i16.to_le_bytes());
        put(&mut h, 254, &1i16.to_le_bytes());
        put(&mut h, 268, &ox.to_le_bytes());
        put(&mut h, 272, &oy.to_le_bytes());
        put(&mut h, 276, &oz.to_le_bytes());
        let srow = [[sx, 0.0, 0.0, ox], [0.0, sy, 0.0, oy], [0.0, 0.0, sz, oz]];
        for (r, row) in srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                put(&mut h, 280 + 16 * r + 4 * c, &v.to_le_bytes());
            }
        }
        put(&mut h, 344, b"n+1\0");
        let mut bytes = h;
        bytes.reserve(4 * values.len());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let gz = path.to_string_lossy().to_ascii_lowercase().ends_with(".gz");
        let out = if gz {
            let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
            enc.write_all(&bytes)
                .and_then(|_| enc.finish())
                .map_err(|e| AppError::write(path, e))?
        } else {
            bytes
        };
        fs::write(path, out).map_err(|e| AppError::write(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_detection() {
        assert_eq!(
            Format::from_path(Path::new("a/b.nii.gz")),
            Some(Format::Nifti1)
        );
        assert_eq!(Format::from_path(Path::new("b.NII")), Some(Format::Nifti1));
        assert_eq!(Format::from_path(Path::new("b.raw")), Some(Format::RawJson));
        assert_eq!(Format::from_path(Path::new("b.mha")), None);
    }

    #[test]
    fn header_carries_spacing_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let v = Volume::filled([2, 3, 4], 1.5, Geometry::isotropic(0.6), Modality::Ct).unwrap();
        let prov = Provenance {
            config_hash: "abcd".into(),
            seed: 7,
        };
        save_volume(&v, &path, Some(&prov)).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), VOX_OFFSET_FOR_TEST + 4 * 24);
        let pixdim: Vec<f32> = (1..4)
            .map(|i| f32::from_le_bytes(bytes[76 + 4 * i..80 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(pixdim, vec![0.6f32; 3]);
        let descrip = String::from_utf8_lossy(&bytes[148..228]);
        assert!(descrip.starts_with("cfg=abcd seed=7 modality=CT"));
        let back = load_volume(&path).unwrap();
        assert_eq!(back.modality(), Modality::Ct);
        assert_eq!(back.shape(), [2, 3, 4]);
    }

    const VOX_OFFSET_FOR_TEST: usize = 352;
}
