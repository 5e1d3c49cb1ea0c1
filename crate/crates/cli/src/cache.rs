//! Preprocessed tensor cache and its manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lesion_core::imageproc::{PreprocessProfile, ProfileName};
use lesion_core::models::{decode_params, encode_params};
use lesion_core::nn::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_HEADER: &str = "image_id,profile,size,source_sha256,cache_path,checksum";
pub const ERRORS_HEADER: &str = "image_id,path,error";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image_id: String,
    pub profile: String,
    pub size: usize,
    pub source_sha256: String,
    /// Relative to the work directory.
    pub cache_path: String,
    pub checksum: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn cache_dir(work_dir: &Path) -> PathBuf {
    work_dir.join("cache")
}

pub fn manifest_path(work_dir: &Path) -> PathBuf {
    cache_dir(work_dir).join("manifest.csv")
}

pub fn errors_path(work_dir: &Path) -> PathBuf {
    cache_dir(work_dir).join("errors.csv")
}

pub fn relative_cache_path(profile: &PreprocessProfile, image_id: &str) -> String {
    format!("cache/{}-{}/{image_id}.lfwt", profile.name.as_str(), profile.target_size)
}

/// Cached tensors are single-entry `LFWT` files.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>, CliError> {
    let mut store = ParamStore::new();
    store.insert("image", t.clone());
    Ok(encode_params(&store)?)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor, CliError> {
    let mut store = decode_params(bytes)?;
    store
        .remove("image")
        .ok_or_else(|| CliError::Data(format!("{} has no `image` entry", path.display())))
}

/// Manifest keyed by `(image_id, profile)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: BTreeMap<(String, String), ManifestRow>,
}

impl Manifest {
    pub fn load(work_dir: &Path) -> Result<Manifest, CliError> {
        let path = manifest_path(work_dir);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(CliError::Data(format!("{}: unexpected header", path.display())));
        }
        let mut m = Manifest::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let [id, profile, size, src, cache, sum] = f[..] else {
                return Err(CliError::Data(format!("{}:{}: expected 6 fields", path.display(), i + 2)));
            };
            let size = size
                .parse()
                .map_err(|_| CliError::Data(format!("{}:{}: bad size", path.display(), i + 2)))?;
            m.insert(ManifestRow {
                image_id: id.into(),
                profile: profile.into(),
                size,
                source_sha256: src.into(),
                cache_path: cache.into(),
                checksum: sum.into(),
            });
        }
        Ok(m)
    }

    pub fn insert(&mut self, row: ManifestRow) {
        self.rows.insert((row.image_id.clone(), row.profile.clone()), row);
    }

    pub fn get(&self, image_id: &str, profile: ProfileName) -> Option<&ManifestRow> {
        self.rows.get(&(image_id.to_string(), profile.as_str().to_string()))
    }

    pub fn save(&self, work_dir: &Path) -> Result<(), CliError> {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in self.rows.values() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_id, r.profile, r.size, r.source_sha256, r.cache_path, r.checksum
            );
        }
        let path = manifest_path(work_dir);
        std::fs::write(&path, out).map_err(|e| io(&path, e))
    }

    /// Loads the cached tensor, verifying its checksum.
    pub fn load_tensor(&self, work_dir: &Path, image_id: &str, profile: &PreprocessProfile) -> Result<Tensor, CliError> {
        let row = self
            .get(image_id, profile.name)
            .filter(|r| r.size == profile.target_size)
            .ok_or_else(|| {
                CliError::Missing(format!(
                    "cached `{}` tensor for {image_id} (size {}); run `lesion prepare` first ({})",
                    profile.name.as_str(),
                    profile.target_size,
                    manifest_path(work_dir).display()
                ))
            })?;
        let path = work_dir.join(&row.cache_path);
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        if sha256_hex(&bytes) != row.checksum {
            return Err(CliError::Data(format!(
                "checksum mismatch for {}; rerun `lesion prepare`",
                path.display()
            )));
        }
        decode_tensor(&bytes, &path)
    }
}

pub fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(lesion_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
