//! App-package archives — the container models ship inside.
//!
//! A package is a standard zip (store or deflate) holding a `manifest.json`
//! plus arbitrary entries. The manifest binds everything together:
//!
//! ```json
//! {
//!   "app_id": "com.example.vision",
//!   "models": [{"entry": "assets/cls.sdlm", "labels": "assets/labels.txt"}],
//!   "encrypted_models": [{"entry": "assets/cls.sdlm", "key_id": "k0"}],
//!   "keys": {"k0": "<hex>"},
//!   "sealed": false
//! }
//! ```
//!
//! Model entries are recognized by extension (`.tflite`, `.lite`, `.sdlm`,
//! case-insensitive). Entries under `encrypted_models` are stored XORed with a
//! keystream of SHA-256(key ‖ block counter as little-endian u64) blocks; the
//! same XOR decrypts, and a magic check on the result catches wrong keys.
//! `sealed: true` marks a package that refuses repacking.
//!
//! Packages are immutable once opened; [`repack_package`] returns a new value
//! with exactly one entry's bytes replaced and everything else bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::format::MAGIC;

pub const MANIFEST_ENTRY: &str = "manifest.json";
const MODEL_EXTENSIONS: [&str; 3] = [".tflite", ".lite", ".sdlm"];

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("not a zip archive: {detail}")]
    NotAnArchive { detail: String },
    #[error("package has no manifest.json entry")]
    MissingManifest,
    #[error("manifest.json is invalid: {detail}")]
    BadManifest { detail: String },
    #[error("entry {entry} is corrupt: {detail}")]
    CorruptEntry { entry: String, detail: String },
    #[error("entry name {entry} appears more than once")]
    DuplicateEntry { entry: String },
    #[error("entry {entry} not present in the package")]
    EntryMissing { entry: String },
    #[error("key {key_id:?} is not in the manifest key table")]
    UnknownKey { key_id: String },
    #[error("decrypting {entry} fails the model magic check — wrong key or corrupt ciphertext")]
    DecryptionFailed { entry: String },
    #[error("package is sealed against repacking")]
    SealedPackage,
    #[error("label file is invalid: {detail}")]
    BadLabelFile { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ─── manifest ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRef {
    pub entry: String,
    /// Entry name of this model's label file, when the app ships one.
    #[serde(default)]
    pub labels: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncryptedRef {
    pub entry: String,
    pub key_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub app_id: String,
    pub models: Vec<ModelRef>,
    #[serde(default)]
    pub encrypted_models: Vec<EncryptedRef>,
    /// key id → hex-encoded key bytes.
    #[serde(default)]
    pub keys: BTreeMap<String, String>,
    #[serde(default)]
    pub sealed: bool,
}

impl Manifest {
    pub fn new(app_id: &str) -> Manifest {
        Manifest {
            app_id: app_id.to_string(),
            models: Vec::new(),
            encrypted_models: Vec::new(),
            keys: BTreeMap::new(),
            sealed: false,
        }
    }

    /// The key id encrypting `entry`, if the manifest marks it encrypted.
    pub fn encryption_for(&self, entry: &str) -> Option<&str> {
        self.encrypted_models.iter().find(|e| e.entry == entry).map(|e| e.key_id.as_str())
    }

    /// The label-file entry bound to a model entry.
    pub fn labels_for(&self, model_entry: &str) -> Option<&str> {
        self.models
            .iter()
            .find(|m| m.entry == model_entry)
            .and_then(|m| m.labels.as_deref())
    }

    fn key_bytes(&self, key_id: &str) -> Result<Vec<u8>, PackageError> {
        let hex_key = self
            .keys
            .get(key_id)
            .ok_or_else(|| PackageError::UnknownKey { key_id: key_id.to_string() })?;
        hex::decode(hex_key).map_err(|e| PackageError::BadManifest {
            detail: format!("key {key_id:?} is not valid hex: {e}"),
        })
    }
}

// ─── package ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AppPackage {
    /// Archive this package was opened from; empty for in-memory builds.
    pub path: PathBuf,
    /// `(entry_name, bytes)` in archive order. Names are unique.
    entries: Vec<(String, Vec<u8>)>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLocator {
    pub entry_name: String,
    pub encrypted: bool,
    pub key_id: Option<String>,
}

impl AppPackage {
    /// Assembles a package from a manifest and plaintext entries, adding the
    /// `manifest.json` entry first and encrypting every entry the manifest
    /// lists under `encrypted_models`.
    pub fn build(manifest: Manifest, entries: Vec<(String, Vec<u8>)>) -> Result<AppPackage, PackageError> {
        let manifest_bytes = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| PackageError::BadManifest { detail: e.to_string() })?;
        let mut all = Vec::with_capacity(entries.len() + 1);
        all.push((MANIFEST_ENTRY.to_string(), manifest_bytes));
        all.extend(entries);
        check_unique(&all)?;

        for enc in &manifest.encrypted_models {
            let key = manifest.key_bytes(&enc.key_id)?;
            let slot = all
                .iter_mut()
                .find(|(name, _)| *name == enc.entry)
                .ok_or_else(|| PackageError::EntryMissing { entry: enc.entry.clone() })?;
            keystream_xor(&key, &mut slot.1);
        }
        Ok(AppPackage { path: PathBuf::new(), entries: all, manifest })
    }

    pub fn entries(&self) -> &[(String, Vec<u8>)] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&[u8]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Writes the package as a zip archive. Entries are stored uncompressed
    /// with a fixed timestamp, so equal packages produce equal files.
    pub fn save(&self, path: &Path) -> Result<(), PackageError> {
        let file = File::create(path)?;
        let mut zip = ZipWriter::new(BufWriter::new(file));
        let options = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(zip::DateTime::default());
        for (name, bytes) in &self.entries {
            zip.start_file(name.as_str(), options).map_err(zip_io)?;
            zip.write_all(bytes)?;
        }
        zip.finish().map_err(zip_io)?;
        Ok(())
    }
}

fn zip_io(e: zip::result::ZipError) -> PackageError {
    PackageError::Io(std::io::Error::other(e))
}

// Walks the end-of-central-directory record and the central headers for entry
// names, returning the first name that repeats. Gives up (None) on anything
// malformed — the zip reader will report those on its own terms.
fn duplicate_entry_name(bytes: &[u8]) -> Option<String> {
    let le16 = |o: usize| Some(u16::from_le_bytes(bytes.get(o..o + 2)?.try_into().ok()?) as usize);
    let le32 = |o: usize| Some(u32::from_le_bytes(bytes.get(o..o + 4)?.try_into().ok()?) as usize);

    let eocd = (0..bytes.len().checked_sub(3)?)
        .rev()
        .find(|&o| bytes[o..o + 4] == [0x50, 0x4b, 0x05, 0x06])?;
    let count = le16(eocd + 10)?;
    let mut offset = le32(eocd + 16)?;

    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        if bytes.get(offset..offset + 4)? != [0x50, 0x4b, 0x01, 0x02] {
            return None;
        }
        let name_len = le16(offset + 28)?;
        let extra_len = le16(offset + 30)?;
        let comment_len = le16(offset + 32)?;
        let name = std::str::from_utf8(bytes.get(offset + 46..offset + 46 + name_len)?).ok()?;
        if !seen.insert(name.to_string()) {
            return Some(name.to_string());
        }
        offset += 46 + name_len + extra_len + comment_len;
    }
    None
}

fn check_unique(entries: &[(String, Vec<u8>)]) -> Result<(), PackageError> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(PackageError::DuplicateEntry { entry: name.clone() });
        }
    }
    Ok(())
}

// ─── operations ──────────────────────────────────────────────────────────────

pub fn open_package(path: &Path) -> Result<AppPackage, PackageError> {
    let bytes = std::fs::read(path)?;
    let duplicate = duplicate_entry_name(&bytes);
    let mut archive = ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| PackageError::NotAnArchive { detail: e.to_string() })?;

    // The zip reader indexes entries by name, so same-named entries in a
    // forged archive would silently shadow each other — the classic packaging
    // confusion trick. Catch them in the central directory instead.
    if let Some(entry) = duplicate {
        return Err(PackageError::DuplicateEntry { entry });
    }

    let mut entries = Vec::with_capacity(archive.len());
    for i in 0..archive.len() {
        let mut file = archive
            .by_index(i)
            .map_err(|e| PackageError::NotAnArchive { detail: e.to_string() })?;
        if file.is_dir() {
            continue;
        }
        let name = file.name().to_string();
        let mut data = Vec::with_capacity(file.size() as usize);
        // Reading to the end checks the stored CRC.
        file.read_to_end(&mut data)
            .map_err(|e| PackageError::CorruptEntry { entry: name.clone(), detail: e.to_string() })?;
        entries.push((name, data));
    }
    check_unique(&entries)?;

    let manifest_bytes = entries
        .iter()
        .find(|(n, _)| n == MANIFEST_ENTRY)
        .map(|(_, b)| b.as_slice())
        .ok_or(PackageError::MissingManifest)?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| PackageError::BadManifest { detail: e.to_string() })?;

    Ok(AppPackage { path: path.to_path_buf(), entries, manifest })
}

/// Locators for every entry matching the model naming schemes, in archive
/// order, with encryption status echoed from the manifest.
pub fn scan_models(pkg: &AppPackage) -> Vec<ModelLocator> {
    pkg.entries
        .iter()
        .filter(|(name, _)| {
            let lower = name.to_ascii_lowercase();
            MODEL_EXTENSIONS.iter().any(|ext| lower.ends_with(ext))
        })
        .map(|(name, _)| {
            let key_id = pkg.manifest.encryption_for(name).map(str::to_string);
            ModelLocator { entry_name: name.clone(), encrypted: key_id.is_some(), key_id }
        })
        .collect()
}

/// Plaintext model bytes for a located entry, decrypting when the locator is
/// marked encrypted. A decrypt that fails the model magic check means the key
/// material does not match the ciphertext.
pub fn extract_model(pkg: &AppPackage, loc: &ModelLocator) -> Result<Vec<u8>, PackageError> {
    let stored = pkg
        .entry(&loc.entry_name)
        .ok_or_else(|| PackageError::EntryMissing { entry: loc.entry_name.clone() })?;
    if !loc.encrypted {
        return Ok(stored.to_vec());
    }
    let key_id = loc.key_id.clone().unwrap_or_default();
    let key = pkg.manifest.key_bytes(&key_id)?;
    let mut data = stored.to_vec();
    keystream_xor(&key, &mut data);
    if data.len() < MAGIC.len() || data[..MAGIC.len()] != MAGIC {
        return Err(PackageError::DecryptionFailed { entry: loc.entry_name.clone() });
    }
    Ok(data)
}

/// A copy of `pkg` whose located entry stores `new_model` (re-encrypted under
/// the same key when the slot is encrypted); every other entry bit-identical.
pub fn repack_package(
    pkg: &AppPackage,
    loc: &ModelLocator,
    new_model: &[u8],
) -> Result<AppPackage, PackageError> {
    if pkg.manifest.sealed {
        return Err(PackageError::SealedPackage);
    }
    let index = pkg
        .entries
        .iter()
        .position(|(n, _)| *n == loc.entry_name)
        .ok_or_else(|| PackageError::EntryMissing { entry: loc.entry_name.clone() })?;

    let mut stored = new_model.to_vec();
    if loc.encrypted {
        let key_id = loc.key_id.clone().unwrap_or_default();
        let key = pkg.manifest.key_bytes(&key_id)?;
        keystream_xor(&key, &mut stored);
    }
    let mut out = pkg.clone();
    out.entries[index].1 = stored;
    Ok(out)
}

/// A label file: UTF-8 text, one class name per line, line index = class id.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<String>, PackageError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| PackageError::BadLabelFile { detail: e.to_string() })?;
    let labels: Vec<String> = text.lines().map(str::to_string).collect();
    if labels.is_empty() {
        return Err(PackageError::BadLabelFile { detail: "no labels".to_string() });
    }
    if let Some(i) = labels.iter().position(String::is_empty) {
        return Err(PackageError::BadLabelFile { detail: format!("empty label at line {i}") });
    }
    Ok(labels)
}

// ─── simulated cipher ────────────────────────────────────────────────────────

// Counter-mode stream: block i of the keystream is SHA-256(key ‖ i as LE u64),
// XORed over the data. Self-inverse, so one function covers both directions.
fn keystream_xor(key: &[u8], data: &mut [u8]) {
    for (i, chunk) in data.chunks_mut(32).enumerate() {
        let mut hasher = Sha256::new();
        hasher.update(key);
        hasher.update((i as u64).to_le_bytes());
        let block = hasher.finalize();
        for (byte, pad) in chunk.iter_mut().zip(block.iter()) {
            *byte ^= pad;
        }
    }
}
