//! Dataset manifests: a `path,label` CSV plus a labels file with one class
//! name per line (line index = class id).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::extractors::feat::read_feat;
use crate::tensor::Tensor;
use crate::videoio::read_fseq;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<Vec<String>> {
    let classes: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if classes.is_empty() {
        return Err(Error::Dataset("labels file lists no classes".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        if classes[..i].contains(c) {
            return Err(Error::Dataset(format!("class `{c}` listed twice")));
        }
    }
    Ok(classes)
}

pub fn write_labels(classes: &[String], path: &Path) -> Result<()> {
    let mut text = classes.join("\n");
    text.push('\n');
    crate::write_atomic(path, text.as_bytes())
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Parses manifest CSV text. Relative paths resolve against `base`.
    pub fn parse(csv_text: &str, classes: Vec<String>, base: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
            return Err(Error::Dataset(format!("manifest header must be `path,label`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let mut entries = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let (path, name) = (&record[0], &record[1]);
            let label = classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Dataset(format!("manifest row {}: unknown label `{name}`", row + 1)))?;
            let path = PathBuf::from(path);
            let path = if path.is_relative() { base.join(path) } else { path };
            entries.push(ManifestEntry { path, label });
        }
        if entries.is_empty() {
            return Err(Error::Dataset("manifest has no samples".into()));
        }
        Ok(Self { classes, entries })
    }

    /// Reads `manifest` with class names from `labels`, or from
    /// `labels.txt` next to the manifest when `labels` is `None`.
    pub fn load(manifest: &Path, labels: Option<&Path>) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let labels_path = labels.map(Path::to_path_buf).unwrap_or_else(|| base.join("labels.txt"));
        let classes = read_labels(&labels_path)?;
        let text = std::fs::read_to_string(manifest)?;
        Self::parse(&text, classes, base)
    }

    /// Every referenced sample must exist.
    pub fn check_paths(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.path.exists()) {
            Some(e) => Err(Error::Dataset(format!("missing sample {}", e.path.display()))),
            None => Ok(()),
        }
    }

    /// Manifest CSV with paths written relative to `base` where possible.
    pub fn to_csv(&self, base: &Path) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["path", "label"]).map_err(csv_err)?;
        for e in &self.entries {
            let path = e.path.strip_prefix(base).unwrap_or(&e.path);
            let path = path.to_str().ok_or_else(|| Error::Dataset(format!("non UTF-8 path {}", path.display())))?;
            writer.write_record([path, &self.classes[e.label]]).map_err(csv_err)?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Dataset(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(format!("manifest: {e}"))
}

/// One labelled model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<F = f32> {
    pub input: Tensor<F>,
    pub label: usize,
}

/// Loads a sample from an FSEQ (`(T, H, W, C)`) or FEAT (`(T, D)`) file,
/// chosen by extension.
pub fn load_sample(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("feat") => Ok(read_feat(path)?.data),
        Some("fseq") => Ok(read_fseq(path)?.into_tensor()),
        _ => Err(Error::Dataset(format!("{}: expected a .fseq or .feat file", path.display()))),
    }
}

pub fn load_examples(manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<Example>> {
    indices
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            Ok(Example { input: load_sample(&e.path)?, label: e.label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_manifest_rows() {
        let classes = parse_labels("up\ndown\n\n").unwrap();
        let m = DatasetManifest::parse("path,label\na.fseq,down\n/abs/b.fseq, up\n", classes, Path::new("/data")).unwrap();
        assert_eq!(m.labels(), vec![1, 0]);
        assert_eq!(m.entries[0].path, PathBuf::from("/data/a.fseq"));
        assert_eq!(m.entries[1].path, PathBuf::from("/abs/b.fseq"));
        let csv = m.to_csv(Path::new("/data")).unwrap();
        assert_eq!(csv, "path,label\na.fseq,down\n/abs/b.fseq,up\n");
    }

    #[test]
    fn rejects_unknown_label_and_bad_header() {
        let classes = vec!["a".to_string()];
        assert!(DatasetManifest::parse("path,label\nx,b\n", classes.clone(), Path::new(".")).is_err());
        assert!(DatasetManifest::parse("file,class\nx,a\n", classes.clone(), Path::new(".")).is_err());
        assert!(DatasetManifest::parse("path,label\n", classes, Path::new(".")).is_err());
        assert!(parse_labels("a\na\n").is_err());
    }
}
