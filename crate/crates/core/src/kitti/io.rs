use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GridError, Point, PointCloud, SceneLabelGrid, EMPTY, INVALID};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated record at byte offset {offset} (file is {len} bytes, records are {record} bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        len: usize,
        record: usize,
    },
    #[error("{path}: expected {expected} bytes for extents {extents:?}, found {found}")]
    Size {
        path: PathBuf,
        extents: [usize; 3],
        expected: usize,
        found: usize,
    },
    #[error("label map: {0}")]
    LabelMap(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud, IoError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() / 16 * 16,
            len: bytes.len(),
            record: 16,
        });
    }
    let f = |b: &[u8]| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let points = bytes
        .chunks_exact(16)
        .map(|c| Point::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16])))
        .collect();
    Ok(PointCloud::new(points))
}

/// Narrows to `f32`; values representable in `f32` round-trip exactly.
pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write(path.as_ref(), &bytes)
}

/// Raw dataset ids to contiguous train ids. Raw ids absent from the table
/// read as [`INVALID`]; raw 0 reads as empty unless the table says otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u8>", into = "BTreeMap<String, u8>")]
pub struct LabelMap {
    forward: BTreeMap<u16, u8>,
}

impl LabelMap {
    pub fn new(pairs: impl IntoIterator<Item = (u16, u8)>) -> Self {
        let mut forward: BTreeMap<u16, u8> = pairs.into_iter().collect();
        forward.entry(0).or_insert(EMPTY);
        Self { forward }
    }

    /// Train id `k` stored as raw id `k`.
    pub fn identity(class_count: usize) -> Self {
        Self::new((0..=class_count as u16).map(|k| (k, k as u8)))
    }

    pub fn to_train(&self, raw: u16) -> u8 {
        self.forward.get(&raw).copied().unwrap_or(INVALID)
    }

    /// Smallest raw id mapping to `train`; [`INVALID`] and train ids without
    /// a preimage become `u16::MAX`, which must stay unmapped.
    pub fn to_raw(&self, train: u8) -> u16 {
        self.forward
            .iter()
            .find(|(_, &t)| t == train && t != INVALID)
            .map(|(&r, _)| r)
            .unwrap_or(u16::MAX)
    }

    pub fn max_train_id(&self) -> u8 {
        self.forward.values().copied().filter(|&t| t != INVALID).max().unwrap_or(0)
    }
}

impl TryFrom<BTreeMap<String, u8>> for LabelMap {
    type Error = String;

    fn try_from(table: BTreeMap<String, u8>) -> Result<Self, String> {
        let mut pairs = Vec::with_capacity(table.len());
        for (k, v) in table {
            let raw: u16 = k.parse().map_err(|_| format!("raw id {k:?} is not a u16"))?;
            if raw == u16::MAX {
                return Err(format!("raw id {raw} is reserved for invalid voxels"));
            }
            pairs.push((raw, v));
        }
        Ok(Self::new(pairs))
    }
}

impl From<LabelMap> for BTreeMap<String, u8> {
    fn from(map: LabelMap) -> Self {
        map.forward.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

fn expect_size(path: &Path, extents: [usize; 3], expected: usize, found: usize) -> Result<(), IoError> {
    if expected != found {
        return Err(IoError::Size {
            path: path.to_path_buf(),
            extents,
            expected,
            found,
        });
    }
    Ok(())
}

pub fn read_voxel_labels(
    path: impl AsRef<Path>,
    extents: [usize; 3],
    map: &LabelMap,
) -> Result<SceneLabelGrid, IoError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let n: usize = extents.iter().product();
    expect_size(path, extents, 2 * n, bytes.len())?;
    let labels = bytes
        .chunks_exact(2)
        .map(|b| map.to_train(u16::from_le_bytes([b[0], b[1]])))
        .collect();
    Ok(SceneLabelGrid::new(extents, labels, map.max_train_id() as usize)?)
}

pub fn write_voxel_labels(path: impl AsRef<Path>, grid: &SceneLabelGrid, map: &LabelMap) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(grid.len() * 2);
    for &l in grid.labels() {
        let raw = map.to_raw(l);
        if l != INVALID && map.to_train(raw) != l {
            return Err(IoError::LabelMap(format!("train id {l} has no raw id")));
        }
        bytes.extend_from_slice(&raw.to_le_bytes());
    }
    write(path.as_ref(), &bytes)
}

/// Per-point labels: one little-endian `u32` per point, semantic id in the
/// low 16 bits (the high bits carry an instance id and are dropped).
pub fn read_point_labels(path: impl AsRef<Path>, map: &LabelMap) -> Result<Vec<u8>, IoError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() / 4 * 4,
            len: bytes.len(),
            record: 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| map.to_train(u16::from_le_bytes([b[0], b[1]])))
        .collect())
}

pub fn write_point_labels(path: impl AsRef<Path>, labels: &[u8], map: &LabelMap) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        bytes.extend_from_slice(&u32::from(map.to_raw(l)).to_le_bytes());
    }
    write(path.as_ref(), &bytes)
}

pub fn read_invalid_mask(path: impl AsRef<Path>, extents: [usize; 3]) -> Result<Vec<bool>, IoError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let n: usize = extents.iter().product();
    expect_size(path, extents, n.div_ceil(8), bytes.len())?;
    Ok((0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

pub fn write_invalid_mask(path: impl AsRef<Path>, mask: &[bool]) -> Result<(), IoError> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        bytes[i / 8] |= 0x80 >> (i % 8);
    }
    write(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn scan_sizes() {
        let dir = tmp();
        let p = dir.path().join("a.bin");
        fs::write(&p, [0u8; 32]).unwrap();
        assert_eq!(read_scan(&p).unwrap().len(), 2);
        fs::write(&p, []).unwrap();
        assert_eq!(read_scan(&p).unwrap().len(), 0);
        fs::write(&p, [0u8; 20]).unwrap();
        match read_scan(&p) {
            Err(IoError::Truncated { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scan_values_are_little_endian_f32() {
        let dir = tmp();
        let p = dir.path().join("a.bin");
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.25, 0.125, 0.75] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        assert_eq!(read_scan(&p).unwrap().points, vec![Point::new(1.5, -2.25, 0.125, 0.75)]);
    }

    #[test]
    fn labels_map_raw_ids() {
        let dir = tmp();
        let p = dir.path().join("a.label");
        let map = LabelMap::new([(10, 1), (40, 9), (52, 0)]);
        let ext = [2, 2, 2];
        fs::write(&p, [0u8; 16]).unwrap();
        assert!(read_voxel_labels(&p, ext, &map).unwrap().labels().iter().all(|&l| l == EMPTY));

        let mut bytes = vec![0u8; 16];
        bytes[6..8].copy_from_slice(&40u16.to_le_bytes());
        bytes[10..12].copy_from_slice(&52u16.to_le_bytes());
        bytes[12..14].copy_from_slice(&99u16.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        let g = read_voxel_labels(&p, ext, &map).unwrap();
        assert_eq!(g.labels(), &[0, 0, 0, 9, 0, 0, INVALID, 0]);

        fs::write(&p, [0u8; 15]).unwrap();
        assert!(matches!(read_voxel_labels(&p, ext, &map), Err(IoError::Size { .. })));
    }

    #[test]
    fn mask_bits_msb_first() {
        let dir = tmp();
        let p = dir.path().join("a.invalid");
        let ext = [2, 2, 4];
        fs::write(&p, [0xFF, 0xFF]).unwrap();
        assert!(read_invalid_mask(&p, ext).unwrap().iter().all(|&b| b));
        fs::write(&p, [0x00, 0x00]).unwrap();
        assert!(read_invalid_mask(&p, ext).unwrap().iter().all(|&b| !b));
        fs::write(&p, [0x80, 0x00]).unwrap();
        let m = read_invalid_mask(&p, ext).unwrap();
        assert_eq!(m.iter().positions_true(), vec![0]);
        fs::write(&p, [0x80]).unwrap();
        assert!(read_invalid_mask(&p, ext).is_err());
    }

    trait PositionsTrue {
        fn positions_true(self) -> Vec<usize>;
    }

    impl<'a, I: Iterator<Item = &'a bool>> PositionsTrue for I {
        fn positions_true(self) -> Vec<usize> {
            self.enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
        }
    }

    #[test]
    fn label_map_from_toml() {
        #[derive(Deserialize)]
        struct Wrapper {
            map: LabelMap,
        }
        let w: Wrapper = toml::from_str("[map]\n0 = 0\n10 = 1\n44 = 2\n").unwrap();
        assert_eq!(w.map.to_train(44), 2);
        assert_eq!(w.map.to_raw(1), 10);
        assert!(toml::from_str::<Wrapper>("[map]\nx = 1\n").is_err());
    }
}
