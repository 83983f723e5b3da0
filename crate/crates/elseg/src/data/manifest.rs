//! Line-oriented manifest files.
//!
//! One record per line, tab-separated:
//!
//! ```text
//! labeled<TAB>images/img_0000.png<TAB>masks/img_0000.png
//! unlabeled<TAB>images/img_0001.png<TAB>-
//! ```
//!
//! Lines starting with `#` are comments. `#@ key value` comment lines carry
//! split metadata (`split_seed`, `labeled_fraction`). Relative paths are
//! resolved against the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Parse and validate a manifest file; every referenced path must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut manifest = DatasetManifest {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        split_seed: 0,
        labeled_fraction: 1.0,
    };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix("#@") {
            let mut parts = directive.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("split_seed"), Some(v)) => {
                    manifest.split_seed = v
                        .parse()
                        .map_err(|_| err(lineno, format!("invalid split_seed `{v}`")))?;
                }
                (Some("labeled_fraction"), Some(v)) => {
                    manifest.labeled_fraction = v
                        .parse()
                        .map_err(|_| err(lineno, format!("invalid labeled_fraction `{v}`")))?;
                }
                _ => return Err(err(lineno, format!("unknown directive `{directive}`"))),
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }

        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let resolve = |field: &str| -> PathBuf {
            let p = Path::new(field);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let image = resolve(fields[1]);
        if !image.is_file() {
            return Err(err(lineno, format!("image `{}` does not exist", image.display())));
        }
        match fields[0] {
            "labeled" => {
                if fields[2] == "-" {
                    return Err(err(lineno, "labeled record is missing a mask path".into()));
                }
                let mask = resolve(fields[2]);
                if !mask.is_file() {
                    return Err(err(lineno, format!("mask `{}` does not exist", mask.display())));
                }
                manifest.labeled.push((image, mask));
            }
            "unlabeled" => {
                if fields[2] != "-" {
                    return Err(err(
                        lineno,
                        "unlabeled record must use `-` in the mask column".into(),
                    ));
                }
                manifest.unlabeled.push(image);
            }
            other => {
                return Err(err(
                    lineno,
                    format!("unknown split `{other}` (expected labeled|unlabeled)"),
                ))
            }
        }
    }

    manifest.check_disjoint()?;
    Ok(manifest)
}

/// Write a manifest; paths are stored relative to the manifest directory when
/// possible.
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    out.push_str(&format!("#@ split_seed {}\n", manifest.split_seed));
    out.push_str(&format!("#@ labeled_fraction {}\n", manifest.labeled_fraction));
    for (img, mask) in &manifest.labeled {
        out.push_str(&format!("labeled\t{}\t{}\n", rel(img), rel(mask)));
    }
    for img in &manifest.unlabeled {
        out.push_str(&format!("unlabeled\t{}\t-\n", rel(img)));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch(path: &Path) {
        fs::write(path, b"x").unwrap();
    }

    fn corpus(dir: &Path, labeled: usize, unlabeled: usize) -> PathBuf {
        let mut body = String::new();
        for i in 0..labeled {
            let img = dir.join(format!("l{i}.png"));
            let mask = dir.join(format!("l{i}_m.png"));
            touch(&img);
            touch(&mask);
            body.push_str(&format!("labeled\tl{i}.png\tl{i}_m.png\n"));
        }
        for i in 0..unlabeled {
            let img = dir.join(format!("u{i}.png"));
            touch(&img);
            body.push_str(&format!("unlabeled\tu{i}.png\t-\n"));
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn counts_match_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = corpus(dir.path(), 10, 40);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.num_labeled(), 10);
        assert_eq!(m.num_unlabeled(), 40);
    }

    #[test]
    fn empty_unlabeled_section_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = corpus(dir.path(), 3, 0);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.num_unlabeled(), 0);
    }

    #[test]
    fn dangling_mask_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        touch(&img);
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "labeled\ta.png\tmissing_mask.png\n").unwrap();
        let e = load_manifest(&path).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(e.contains("missing_mask.png"), "{e}");
    }

    #[test]
    fn malformed_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "labeled only-two-fields\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn roundtrip_preserves_records_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = corpus(dir.path(), 4, 2);
        let mut m = load_manifest(&path).unwrap();
        m.split_seed = 7;
        m.labeled_fraction = 0.25;
        let path2 = dir.path().join("copy.tsv");
        save_manifest(&path2, &m).unwrap();
        let back = load_manifest(&path2).unwrap();
        assert_eq!(back, m);
    }
}
