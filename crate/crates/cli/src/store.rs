//! File layouts shared by the subcommands and the pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use petdiff_core::io::{load_volume, save_volume, write_atomic};
use petdiff_core::phantom::PhantomPair;
use petdiff_core::{Error, Volume};
use petdiff_dpm::train::EpochStats;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// `labels.vol`, `mri.vol`, `pet.vol`, `vois/<name>.vol` and a `phantom.txt`
/// listing the VOIs.
pub fn write_phantom(dir: &Path, ph: &PhantomPair, seed: u64) -> CliResult<()> {
    create_dir(&dir.join("vois"))?;
    save_volume(&ph.labels, dir.join("labels.vol"))?;
    save_volume(&ph.mri, dir.join("mri.vol"))?;
    save_volume(&ph.pet, dir.join("pet.vol"))?;
    let mut text = format!("seed = {seed}\n# voi, voxels, volume_ml\n");
    for (name, mask) in &ph.vois {
        save_volume(mask, dir.join("vois").join(format!("{name}.vol")))?;
        let n = mask.count_nonzero();
        let _ = writeln!(text, "{name}, {n}, {}", n as f64 * mask.voxel_volume_ml());
    }
    write_text(&dir.join("phantom.txt"), &text)
}

/// Every `*.vol` in `dir` as a named mask, sorted by file name.
pub fn load_vois(dir: &Path) -> CliResult<Vec<(String, Volume)>> {
    let mut out = Vec::new();
    for path in sorted_entries(dir)? {
        if path.extension().is_some_and(|e| e == "vol") {
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((name, load_volume(&path)?));
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("no .vol masks in {}", dir.display())).into());
    }
    Ok(out)
}

pub fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut v = Vec::new();
    for entry in rd {
        v.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    v.sort();
    Ok(v)
}

/// Subdirectories of `dir` that hold both `osem.vol` and `mri.vol`, as
/// (condition PET, MRI) pairs.
pub fn load_pairs(dir: &Path) -> CliResult<Vec<(Volume, Volume)>> {
    let mut out = Vec::new();
    for sub in sorted_entries(dir)? {
        if sub.join("osem.vol").is_file() && sub.join("mri.vol").is_file() {
            out.push((load_volume(sub.join("osem.vol"))?, load_volume(sub.join("mri.vol"))?));
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{}: no subject directories with osem.vol and mri.vol", dir.display())).into());
    }
    Ok(out)
}

pub fn write_pair(dir: &Path, pet: &Volume, mri: &Volume) -> CliResult<()> {
    create_dir(dir)?;
    save_volume(pet, dir.join("osem.vol"))?;
    save_volume(mri, dir.join("mri.vol"))?;
    Ok(())
}

pub fn write_loss_csv(history: &[EpochStats], path: &Path) -> CliResult<()> {
    let mut text = String::from("epoch,loss,eps_loss\n");
    for h in history {
        let _ = writeln!(text, "{},{},{}", h.epoch, h.loss, h.eps_loss);
    }
    write_text(path, &text)
}

/// Relative paths and sha256 digests of every file under `root`, sorted.
pub fn digest_tree(root: &Path, skip: &[&str]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for path in sorted_entries(&dir)? {
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if skip.contains(&rel.as_str()) {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            out.push((rel, hex));
        }
    }
    out.sort();
    Ok(out)
}
