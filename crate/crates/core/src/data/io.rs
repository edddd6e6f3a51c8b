//! Dataset directories: `<root>/yes/*.pgm`, `<root>/no/*.pgm` and an optional
//! `manifest.csv` with columns `filename,label,provenance`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::dataset::{
    preprocess_image, to_gray, ImageDataset, Provenance, NEGATIVE, POSITIVE,
};
use crate::data::pgm::{load_image, save_image, GrayImage};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Path relative to the dataset root, e.g. `yes/img_00000.pgm`.
    pub filename: String,
    pub label: u8,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEntry {
    pub filename: String,
    pub image: GrayImage,
    pub label: u8,
    pub provenance: Provenance,
}

fn class_dir(label: u8) -> &'static str {
    if label == POSITIVE {
        "yes"
    } else {
        "no"
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row.map_err(|e| csv_error(path, e))?;
        if row.label > 1 {
            return Err(Error::format(
                path,
                format!("label {} is not binary", row.label),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    // An empty manifest still carries its header.
    if rows.is_empty() {
        writer
            .write_record(["filename", "label", "provenance"])
            .map_err(|e| csv_error(path, e))?;
    }
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

fn scan_class(root: &Path, label: u8) -> Result<Vec<ManifestRow>> {
    let sub = class_dir(label);
    let dir = root.join(sub);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            rows.push(ManifestRow {
                filename: format!("{sub}/{name}"),
                label,
                provenance: Provenance::Real.to_string(),
            });
        }
    }
    Ok(rows)
}

/// Reads every image under `root`, sorted by filename. Uses the manifest when
/// present, otherwise scans `yes/` and `no/` and marks everything real.
pub fn read_dir(root: &Path) -> Result<Vec<RawEntry>> {
    let manifest = root.join(MANIFEST);
    let mut rows = if manifest.is_file() {
        read_manifest(&manifest)?
    } else {
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory {} not found",
                root.display()
            )));
        }
        let mut rows = scan_class(root, POSITIVE)?;
        rows.extend(scan_class(root, NEGATIVE)?);
        rows
    };
    rows.sort_by(|a, b| a.filename.cmp(&b.filename));
    rows.into_iter()
        .map(|row| {
            Ok(RawEntry {
                image: load_image(&root.join(&row.filename))?,
                provenance: row.provenance.parse()?,
                label: row.label,
                filename: row.filename,
            })
        })
        .collect()
}

/// [`read_dir`] followed by resizing and normalization to `size x size`.
pub fn load_dataset(root: &Path, size: usize) -> Result<ImageDataset> {
    let mut ds = ImageDataset::new(root.display().to_string());
    for entry in read_dir(root)? {
        ds.push(
            preprocess_image(&entry.image, size)?,
            entry.label,
            entry.provenance,
        )?;
    }
    Ok(ds)
}

/// Writes `dataset` as PGM files plus a manifest. Files are named
/// `<prefix>_<index>.pgm`; rows already in an existing manifest are kept, so
/// several sets can share one root as long as their prefixes differ.
pub fn write_dataset(root: &Path, dataset: &ImageDataset, prefix: &str) -> Result<Vec<PathBuf>> {
    for sub in ["yes", "no"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = root.join(MANIFEST);
    let mut rows = if manifest.is_file() {
        read_manifest(&manifest)?
    } else {
        Vec::new()
    };
    let mut written = Vec::with_capacity(dataset.len());
    for (i, image) in dataset.images().iter().enumerate() {
        let label = dataset.labels()[i];
        let filename = format!("{}/{prefix}_{i:05}.pgm", class_dir(label));
        let path = root.join(&filename);
        save_image(&path, &to_gray(image)?)?;
        rows.retain(|r| r.filename != filename);
        rows.push(ManifestRow {
            filename,
            label,
            provenance: dataset.provenance()[i].to_string(),
        });
        written.push(path);
    }
    rows.sort_by(|a, b| a.filename.cmp(&b.filename));
    write_manifest(&manifest, &rows)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{make_phantom_dataset, PhantomSpec};

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            image_size: 8,
            ..PhantomSpec::default()
        };
        let ds = make_phantom_dataset(&spec, 3, 2).unwrap();
        let files = write_dataset(dir.path(), &ds, "img").unwrap();
        assert_eq!(files.len(), 5);
        let back = load_dataset(dir.path(), 8).unwrap();
        assert_eq!(back.count(POSITIVE), 3);
        assert_eq!(back.count(NEGATIVE), 2);
        // 8-bit quantization is the only loss.
        let orig = ds.image(3).data();
        let got = back.image(0).data();
        assert!(orig
            .iter()
            .zip(got)
            .all(|(a, b)| (a - b).abs() <= 1.0 / 255.0 + 1e-12));
    }

    #[test]
    fn scans_without_manifest_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("yes")).unwrap();
        fs::create_dir_all(dir.path().join("no")).unwrap();
        let img = GrayImage::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        for name in ["yes/b.pgm", "yes/a.pgm", "no/z.pgm"] {
            save_image(&dir.path().join(name), &img).unwrap();
        }
        let names: Vec<String> = read_dir(dir.path())
            .unwrap()
            .into_iter()
            .map(|e| e.filename)
            .collect();
        assert_eq!(names, ["no/z.pgm", "yes/a.pgm", "yes/b.pgm"]);
    }

    #[test]
    fn empty_dataset_writes_header_only_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ImageDataset::new("e"), "img").unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text, "filename,label,provenance\n");
        assert!(read_dir(dir.path()).unwrap().is_empty());
    }
}
