use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{read_wav, Utterance, Waveform};
use crate::error::{Error, Result};

/// One CSV row: `path,speaker,keyword,start,end`, boundaries in samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub speaker: String,
    pub keyword: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

/// Read a manifest; relative audio paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
        let mut row = rec.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if row.speaker.is_empty() || row.keyword.is_empty() {
            return Err(Error::Data(format!("{} row {}: empty speaker or keyword", path.display(), i + 1)));
        }
        if row.start >= row.end {
            return Err(Error::Data(format!("{} row {}: start {} >= end {}", path.display(), i + 1, row.start, row.end)));
        }
        if row.path.is_relative() {
            row.path = base.join(&row.path);
        }
        rows.push(row);
    }
    Ok(Manifest { rows })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in &manifest.rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Segments that were cut, plus per-row failures.
#[derive(Debug, Default)]
pub struct SegmentOutcome {
    pub utterances: Vec<Utterance>,
    pub errors: Vec<(usize, String)>,
}

/// Cut every manifest row out of its file, in manifest order. Bad rows are
/// collected and skipped.
pub fn segment_by_manifest(manifest: &Manifest) -> SegmentOutcome {
    let mut out = SegmentOutcome::default();
    let mut cache: Option<(PathBuf, Waveform)> = None;
    for (i, row) in manifest.rows.iter().enumerate() {
        if cache.as_ref().is_none_or(|(p, _)| p != &row.path) {
            match read_wav(&row.path) {
                Ok(w) => cache = Some((row.path.clone(), w)),
                Err(e) => {
                    out.errors.push((i, e.to_string()));
                    cache = None;
                    continue;
                }
            }
        }
        let (_, wav) = cache.as_ref().expect("cached");
        if row.end > wav.len() {
            out.errors.push((i, format!("end {} beyond file length {}", row.end, wav.len())));
            continue;
        }
        out.utterances.push(Utterance {
            id: format!("{}:{}-{}", row.path.display(), row.start, row.end),
            speaker: row.speaker.clone(),
            keyword: Some(row.keyword.clone()),
            wav: Waveform {
                samples: wav.samples[row.start..row.end].to_vec(),
                sample_rate: wav.sample_rate,
                source: format!("{}:{}", row.path.display(), row.start),
            },
        });
    }
    if !out.errors.is_empty() {
        warn!("{} of {} manifest rows failed", out.errors.len(), manifest.rows.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_wav;

    #[test]
    fn rows_cut_in_order_and_bad_rows_collected() {
        let dir = tempfile::tempdir().unwrap();
        let wav = Waveform::new((0..100).map(|i| i as f64 / 200.0).collect(), 16_000, "f").unwrap();
        write_wav(&dir.path().join("f.wav"), &wav).unwrap();
        let csv = "path,speaker,keyword,start,end\nf.wav,s1,bin-red,0,10\nf.wav,s1,set-blue,10,30\nf.wav,s2,bin-red,90,120\n";
        let mp = dir.path().join("m.csv");
        std::fs::write(&mp, csv).unwrap();
        let m = read_manifest(&mp).unwrap();
        assert_eq!(m.rows.len(), 3);
        let out = segment_by_manifest(&m);
        assert_eq!(out.utterances.len(), 2);
        assert_eq!(out.utterances[1].wav.len(), 20);
        assert_eq!(out.utterances[1].keyword.as_deref(), Some("set-blue"));
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].0, 2);
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.csv");
        std::fs::write(&mp, "path,speaker,keyword,start,end\n").unwrap();
        let out = segment_by_manifest(&read_manifest(&mp).unwrap());
        assert!(out.utterances.is_empty() && out.errors.is_empty());
    }

    #[test]
    fn inverted_bounds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.csv");
        std::fs::write(&mp, "path,speaker,keyword,start,end\nf.wav,s,k,5,5\n").unwrap();
        assert!(matches!(read_manifest(&mp), Err(Error::Data(_))));
    }
}
