//! Frame manifests: one `image_path[,mask_path]` record per line.

use std::path::{Path, PathBuf};

use crate::raster::RasterError;

/// Environment variable naming the dataset root used to resolve relative manifest paths.
pub const DATA_DIR_ENV: &str = "BLAVESS_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Parse manifest text. Relative paths are joined onto `root`. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Vec<ManifestEntry>, RasterError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            root.join(p)
        }
    };
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| RasterError::Invalid(format!("manifest record {}: {e}", line + 1)))?;
        let fields: Vec<&str> = rec.iter().filter(|f| !f.is_empty()).collect();
        match fields.as_slice() {
            [] => continue,
            [img] => out.push(ManifestEntry {
                image: resolve(img),
                mask: None,
            }),
            [img, mask] => out.push(ManifestEntry {
                image: resolve(img),
                mask: Some(resolve(mask)),
            }),
            _ => {
                return Err(RasterError::Invalid(format!(
                    "manifest record {}: expected 1 or 2 fields, found {}",
                    line + 1,
                    fields.len()
                )))
            }
        }
    }
    Ok(out)
}

/// Read a manifest file. Relative paths resolve against `root` when given, otherwise against
/// the manifest's own directory.
pub fn read_manifest(path: &Path, root: Option<&Path>) -> Result<Vec<ManifestEntry>, RasterError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            RasterError::Missing(path.display().to_string())
        } else {
            RasterError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            }
        }
    })?;
    let base = match root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    parse_manifest(&text, &base)
}
