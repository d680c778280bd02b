//! Clip files (`"VFCL"`, u32 version, u32 T, C, H, W, then f32 scalars, all
//! little-endian) and the tab-separated manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Clip, ClipGeometry, DataError, Result, Split};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"VFCL";
pub const CLIP_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";

const HEADER_LEN: usize = 4 + 4 + 16;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    let g = clip.geometry();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * g.numel());
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in g.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in clip.frames().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads and validates a clip file. Values are returned exactly as stored.
pub fn read_clip(path: &Path, label: u8, source: &str) -> Result<Clip> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let corrupt = |detail: String| DataError::CorruptHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(corrupt("missing VFCL magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != CLIP_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CLIP_VERSION,
        });
    }
    let g = ClipGeometry::new(word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if g.shape().contains(&0) {
        return Err(corrupt(format!("degenerate geometry {g}")));
    }
    let expected = HEADER_LEN + 4 * g.numel();
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "geometry {g} implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let frames = Tensor::new(g.shape(), data).expect("extents checked");
    Clip::new(frames, label, source).map_err(|detail| DataError::Value {
        path: path.to_path_buf(),
        detail,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: u8,
    pub split: Split,
}

/// Dataset index. Clips are loaded on demand with [`Manifest::load_clip`].
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub geometry: ClipGeometry,
    pub entries: Vec<ManifestEntry>,
    root: PathBuf,
}

impl Manifest {
    pub fn new(geometry: ClipGeometry, entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            geometry,
            entries,
            root: root.into(),
        };
        m.check_unique(&m.root.join(MANIFEST_FILE))?;
        Ok(m)
    }

    fn check_unique(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.path.as_str()) {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    line: i + 3,
                    detail: format!("duplicate entry `{}`", e.path),
                });
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Accepts the manifest file itself or the directory holding it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(DataError::MissingFile(file)),
            Err(e) => return Err(io_err(&file)(e)),
        };
        let bad = |line: usize, detail: String| DataError::Manifest {
            path: file.clone(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, header) = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))?;
        let version = header
            .strip_prefix("#VFMANIFEST\t")
            .ok_or_else(|| bad(n, "missing #VFMANIFEST header".into()))?
            .trim()
            .parse::<u32>()
            .map_err(|_| bad(n, "unreadable format version".into()))?;
        if version != MANIFEST_VERSION {
            return Err(DataError::Version {
                path: file.clone(),
                found: version,
                expected: MANIFEST_VERSION,
            });
        }
        let (n, geo) = lines.next().ok_or_else(|| bad(2, "missing #geometry line".into()))?;
        let dims: Vec<usize> = geo
            .strip_prefix("#geometry\t")
            .ok_or_else(|| bad(n, "missing #geometry line".into()))?
            .split('\t')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(n, "geometry must be four integers".into()))?;
        if dims.len() != 4 || dims.contains(&0) {
            return Err(bad(n, format!("geometry must be four positive extents, got {dims:?}")));
        }
        let geometry = ClipGeometry::new(dims[0], dims[1], dims[2], dims[3]);
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [p, label, split] = fields[..] else {
                return Err(bad(n, format!("expected path<TAB>label<TAB>split, got {} fields", fields.len())));
            };
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(n, format!("label `{other}` is not 0 or 1"))),
            };
            let split = split.parse::<Split>().map_err(|e| bad(n, e))?;
            entries.push(ManifestEntry {
                path: p.to_string(),
                label,
                split,
            });
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self {
            geometry,
            entries,
            root,
        };
        m.check_unique(&file)?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let g = self.geometry;
        let mut out = format!(
            "#VFMANIFEST\t{MANIFEST_VERSION}\n#geometry\t{}\t{}\t{}\t{}\n",
            g.frames, g.channels, g.height, g.width
        );
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path, e.label, e.split));
        }
        out
    }

    /// Writes `manifest.tsv` into the manifest's root directory.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Loads entry `i`, checking it against the manifest geometry.
    pub fn load_clip(&self, i: usize) -> Result<Clip> {
        let e = &self.entries[i];
        let path = self.root.join(&e.path);
        let clip = read_clip(&path, e.label, &e.path)?;
        if clip.geometry() != self.geometry {
            return Err(DataError::Geometry {
                path,
                expected: self.geometry,
                found: clip.geometry(),
            });
        }
        Ok(clip)
    }

    /// Fails on the first entry whose file is missing or invalid.
    pub fn verify(&self) -> Result<()> {
        (0..self.entries.len()).try_for_each(|i| self.load_clip(i).map(drop))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(t: usize) -> Clip {
        Clip::new(Tensor::from_fn([t, 1, 2, 3], |i| (i % 7) as f64 / 7.0), 1, "c").unwrap()
    }

    #[test]
    fn clip_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vfcl");
        let c = Clip::new(clip(3).frames().rounded(crate::tensor::Precision::Single), 1, "c").unwrap();
        write_clip(&p, &c).unwrap();
        assert_eq!(read_clip(&p, 1, "c").unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vfcl");
        write_clip(&p, &clip(3)).unwrap();
        let bytes = fs::read(&p).unwrap();

        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(read_clip(&p, 0, "c"), Err(DataError::CorruptHeader { .. })));
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_clip(&p, 0, "c"), Err(DataError::CorruptHeader { .. })));

        let mut v = bytes.clone();
        v[4] = 9;
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_clip(&p, 0, "c"), Err(DataError::Version { found: 9, .. })));

        let mut v = bytes.clone();
        v[0] = b'X';
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_clip(&p, 0, "c"), Err(DataError::CorruptHeader { .. })));

        let mut v = bytes.clone();
        let n = v.len();
        v[n - 4..].copy_from_slice(&2.0f32.to_le_bytes());
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_clip(&p, 0, "c"), Err(DataError::Value { .. })));

        let missing = dir.path().join("nope.vfcl");
        let err = read_clip(&missing, 0, "c").unwrap_err();
        assert!(err.to_string().contains("nope.vfcl"));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let geometry = ClipGeometry::new(3, 1, 2, 3);
        write_clip(&dir.path().join("a.vfcl"), &clip(3)).unwrap();
        write_clip(&dir.path().join("b.vfcl"), &clip(4)).unwrap();
        let entry = |p: &str, split| ManifestEntry {
            path: p.into(),
            label: 1,
            split,
        };
        let m = Manifest::new(geometry, vec![entry("a.vfcl", Split::Train), entry("b.vfcl", Split::Test)], dir.path()).unwrap();
        m.save().unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.indices(Split::Test), [1]);
        assert!(back.load_clip(0).is_ok());
        assert!(matches!(back.load_clip(1), Err(DataError::Geometry { .. })));
        assert!(Manifest::new(geometry, vec![entry("a.vfcl", Split::Train), entry("a.vfcl", Split::Val)], dir.path()).is_err());

        let file = dir.path().join(MANIFEST_FILE);
        fs::write(&file, "#VFMANIFEST\t2\n#geometry\t3\t1\t2\t3\n").unwrap();
        assert!(matches!(Manifest::load(&file), Err(DataError::Version { found: 2, .. })));
        fs::write(&file, "#VFMANIFEST\t1\n#geometry\t3\t1\t2\t3\na.vfcl\t2\ttrain\n").unwrap();
        assert!(matches!(Manifest::load(&file), Err(DataError::Manifest { line: 3, .. })));
        fs::write(&file, "#VFMANIFEST\t1\n#geometry\t3\t1\t2\t3\nmissing.vfcl\t0\ttrain\n").unwrap();
        let m = Manifest::load(&file).unwrap();
        let err = m.verify().unwrap_err();
        assert!(matches!(err, DataError::MissingFile(ref p) if p.ends_with("missing.vfcl")));
    }
}
