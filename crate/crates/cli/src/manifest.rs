//! `MANIFEST.sha256`: every file under the output directory with its
//! SHA-256, in `sha256sum` format, sorted by relative path.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "MANIFEST.sha256";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path != root.join(MANIFEST_NAME) {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// `(relative path, hex digest)` for every file except the root manifest.
pub fn entries(root: &Path) -> io::Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    let mut rows: Vec<(String, String)> = files
        .into_iter()
        .map(|rel| {
            let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            let digest = sha256_hex(&fs::read(root.join(&rel))?);
            Ok((name, digest))
        })
        .collect::<io::Result<_>>()?;
    rows.sort();
    Ok(rows)
}

pub fn write_manifest(root: &Path) -> io::Result<()> {
    let text: String = entries(root)?
        .into_iter()
        .map(|(name, digest)| format!("{digest}  {name}\n"))
        .collect();
    fs::write(root.join(MANIFEST_NAME), text)
}

/// Parse a manifest back into `(path, digest)` rows.
pub fn read_manifest(root: &Path) -> io::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(root.join(MANIFEST_NAME))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(d, p)| (p.to_string(), d.to_string()))
        .collect())
}
