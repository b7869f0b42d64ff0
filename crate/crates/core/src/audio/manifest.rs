use std::io::Write;
use std::path::{Path, PathBuf};

use super::AudioError;

/// One utterance: audio plus phoneme and word alignment files.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub phn: PathBuf,
    pub wrd: PathBuf,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        self.wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Tab-separated corpus listing, one `wav<TAB>phn<TAB>wrd` line per utterance.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AudioError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(AudioError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            entries.push(ManifestEntry { wav: resolve(cols[0]), phn: resolve(cols[1]), wrd: resolve(cols[2]) });
        }
        Ok(Self { entries })
    }

    /// Writes the manifest, storing paths relative to its directory where possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AudioError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let io = |source| AudioError::Io { path: path.to_path_buf(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        for e in &self.entries {
            writeln!(f, "{}\t{}\t{}", rel(&e.wav), rel(&e.phn), rel(&e.wrd)).map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            entries: vec![ManifestEntry {
                wav: dir.path().join("a.wav"),
                phn: dir.path().join("a.phn"),
                wrd: dir.path().join("a.wrd"),
            }],
        };
        let p = dir.path().join("manifest.tsv");
        m.save(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a.wav\ta.phn\ta.wrd\n");
        assert_eq!(Manifest::load(&p).unwrap(), m);
        assert_eq!(m.entries[0].id(), "a");
    }

    #[test]
    fn bad_column_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a.wav\ta.phn\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(AudioError::Parse { line: 1, .. })));
    }
}
