//! Download, verify and unpack the CIFAR binary archives.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use vitrm::data::{Archive, CifarVariant};

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Size first (cheap, and the clearest message), then digest.
pub fn verify_archive(path: &Path, archive: &Archive) -> Result<()> {
    let size = fs::metadata(path)
        .with_context(|| format!("reading {}", path.display()))?
        .len();
    if size != archive.size {
        bail!(
            "{}: expected {} bytes, found {size}; refusing to use it",
            path.display(),
            archive.size
        );
    }
    let digest = sha256_file(path)?;
    if digest != archive.sha256 {
        bail!(
            "{}: sha256 {digest} does not match the published {}; refusing to use it",
            path.display(),
            archive.sha256
        );
    }
    Ok(())
}

/// Checks that every expected `.bin` file exists with the exact size.
pub fn verify_layout(root: &Path, variant: CifarVariant) -> Result<PathBuf> {
    let dir = vitrm::data::resolve_dir(root, variant);
    for (name, records) in variant.train_files().into_iter().chain(variant.test_files()) {
        let p = dir.join(&name);
        let expected = (records * variant.record_len()) as u64;
        let actual = fs::metadata(&p)
            .with_context(|| format!("missing {}", p.display()))?
            .len();
        if actual != expected {
            bail!("{}: expected {expected} bytes, found {actual}", p.display());
        }
    }
    Ok(dir)
}

fn download(url: &str, dest: &Path) -> Result<()> {
    eprintln!("downloading {url}");
    let resp = ureq::get(url).call().with_context(|| format!("GET {url}"))?;
    let tmp = dest.with_extension("partial");
    let mut out = File::create(&tmp)?;
    io::copy(&mut resp.into_body().into_reader(), &mut out)?;
    out.flush()?;
    fs::rename(&tmp, dest)?;
    Ok(())
}

fn unpack(archive: &Path, into: &Path) -> Result<()> {
    let mut tar = tar::Archive::new(GzDecoder::new(File::open(archive)?));
    tar.unpack(into)
        .with_context(|| format!("extracting {}", archive.display()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    /// The extracted files were already present and the right size.
    AlreadyPresent(PathBuf),
    Extracted(PathBuf),
}

/// Idempotent: verified extracted files are left alone; a pre-placed archive
/// is verified and unpacked without touching the network.
pub fn fetch(root: &Path, variant: CifarVariant, url: Option<&str>) -> Result<FetchOutcome> {
    let archive = variant.archive();
    fetch_archive(root, variant, &archive, url.unwrap_or(archive.url))
}

/// [`fetch`] against an explicit archive description.
pub fn fetch_archive(root: &Path, variant: CifarVariant, archive: &Archive, url: &str) -> Result<FetchOutcome> {
    if let Ok(dir) = verify_layout(root, variant) {
        return Ok(FetchOutcome::AlreadyPresent(dir));
    }
    fs::create_dir_all(root)?;
    let path = root.join(archive.file_name);
    if !path.exists() {
        download(url, &path)?;
    }
    verify_archive(&path, archive)?;
    unpack(&path, root)?;
    let dir = verify_layout(root, variant)?;
    Ok(FetchOutcome::Extracted(dir))
}
