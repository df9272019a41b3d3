//! On-disk formats: run manifests, `PCL1` point-cloud records and PNG images.
//!
//! A run manifest is a CSV file with `#`-prefixed metadata lines
//! (`# run_id: ...`, `# condition: ...`) followed by a header row
//! `sample_id,timestamp,x,y,z,yaw,pitch,roll,image,submap[,place_label]`.
//! Media paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{validate_regions, Image, PointCloud, Pose, Region, Run, Sample};
use crate::error::{Error, Result};

pub const PCL_MAGIC: &[u8; 4] = b"PCL1";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Encodes a cloud as `PCL1`, little-endian u32 count, then `count * 3` f32.
pub fn encode_pcl(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(PCL_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pcl(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != PCL_MAGIC {
        return Err(Error::format(path, "not a PCL1 point cloud (bad magic)"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != count * 12 {
        return Err(Error::format(
            path,
            format!(
                "PCL1 declares {count} points but holds {} bytes",
                body.len()
            ),
        ));
    }
    let points = body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pcl(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_pcl(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_pcl(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pcl(&bytes, path)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_rgb8(w as usize, h as usize, img.as_raw())
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: u64,
    pub timestamp: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub image: String,
    pub submap: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place_label: Option<u32>,
}

/// Writes `run` into `dir`: the manifest plus one PNG and one PCL1 file per
/// sample (only for media the sample carries).
pub fn write_run(dir: &Path, run: &Run) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(run.len());
    for s in &run.samples {
        let image = match &s.image {
            Some(img) => {
                let name = format!("{:06}.png", s.sample_id);
                write_png(&dir.join(&name), img)?;
                name
            }
            None => String::new(),
        };
        let submap = match &s.submap {
            Some(pc) => {
                let name = format!("{:06}.pcl", s.sample_id);
                write_pcl(&dir.join(&name), pc)?;
                name
            }
            None => String::new(),
        };
        rows.push(ManifestRow {
            sample_id: s.sample_id,
            timestamp: s.pose.timestamp,
            x: s.pose.x,
            y: s.pose.y,
            z: s.pose.z,
            yaw: s.pose.yaw,
            pitch: s.pose.pitch,
            roll: s.pose.roll,
            image,
            submap,
            place_label: s.place_label,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &run.run_id, &run.condition, &rows)
}

pub fn write_manifest(
    path: &Path,
    run_id: &str,
    condition: &str,
    rows: &[ManifestRow],
) -> Result<()> {
    let mut out = format!("# run_id: {run_id}\n# condition: {condition}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a manifest; returns `(run_id, condition, rows)`.
pub fn read_manifest(path: &Path) -> Result<(String, String, Vec<ManifestRow>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut run_id = None;
    let mut condition = String::new();
    let mut body = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once(':') {
                match k.trim() {
                    "run_id" => run_id = Some(v.trim().to_string()),
                    "condition" => condition = v.trim().to_string(),
                    _ => {}
                }
            }
        } else {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let run_id = run_id.unwrap_or_else(|| {
        path.parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok((run_id, condition, rows))
}

/// Loads a run directory (manifest plus referenced media).
pub fn read_run(dir: &Path) -> Result<Run> {
    let manifest = dir.join(MANIFEST_FILE);
    let (run_id, condition, rows) = read_manifest(&manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    for r in rows {
        let media = |name: &str| -> Option<PathBuf> { (!name.is_empty()).then(|| dir.join(name)) };
        let image = media(&r.image)
            .map(|p| read_image(&p))
            .transpose()?
            .map(Arc::new);
        let submap = media(&r.submap)
            .map(|p| read_pcl(&p))
            .transpose()?
            .map(Arc::new);
        samples.push(Sample {
            sample_id: r.sample_id,
            run_id: run_id.clone(),
            pose: Pose::new(r.x, r.y, r.z, r.yaw, r.pitch, r.roll, r.timestamp),
            image,
            submap,
            place_label: r.place_label,
        });
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.sample_id)) {
        return Err(Error::format(
            &manifest,
            format!("duplicate sample_id {}", dup.sample_id),
        ));
    }
    Ok(Run::new(run_id, condition, samples))
}

/// Every sub-directory of `root` holding a manifest, sorted by name.
pub fn read_runs_dir(root: &Path) -> Result<Vec<Run>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_run(d)).collect()
}

/// Writes regions as CSV (`region_id,x_min,x_max,y_min,y_max,split`).
pub fn write_regions(path: &Path, regions: &[Region]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in regions {
        w.serialize(r)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a region file.
pub fn read_regions(path: &Path) -> Result<Vec<Region>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    let regions = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<Region>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    validate_regions(&regions).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcl_layout_is_bit_exact() {
        let pc = PointCloud::new(vec![[1.0, -2.5, 0.125]]).unwrap();
        let bytes = encode_pcl(&pc);
        let mut expect = b"PCL1".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.0f32, -2.5, 0.125] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
        assert_eq!(decode_pcl(&bytes, Path::new("x")).unwrap(), pc);
    }

    #[test]
    fn pcl_rejects_corruption() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]).unwrap();
        let mut bytes = encode_pcl(&pc);
        assert!(decode_pcl(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        let err = decode_pcl(&bytes, Path::new("cloud.pcl"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("cloud.pcl") && err.contains("magic"), "{err}");
    }

    #[test]
    fn run_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img =
            Image::from_rgb8(2, 2, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255]).unwrap();
        let pc = PointCloud::new(vec![[0.5, 1.5, -2.0], [3.0, 4.0, 5.0]]).unwrap();
        let samples = (0..3)
            .map(|i| Sample {
                sample_id: 10 + i,
                run_id: "run_a".into(),
                pose: Pose::new(i as f64 * 5.0, 1.0, 0.0, 0.25, 0.0, 0.0, i * 100),
                image: Some(Arc::new(img.clone())),
                submap: Some(Arc::new(pc.clone())),
                place_label: Some(i as u32),
            })
            .collect();
        let run = Run::new("run_a", "night", samples);
        write_run(dir.path(), &run).unwrap();
        let back = read_run(dir.path()).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn regions_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regions.csv");
        let regions = vec![
            Region {
                region_id: "all".into(),
                x_min: -10.0,
                x_max: 10.0,
                y_min: -10.0,
                y_max: 10.0,
                split: crate::datamodel::Split::Train,
            },
            Region {
                region_id: "v0".into(),
                x_min: 0.0,
                x_max: 5.0,
                y_min: 0.0,
                y_max: 5.0,
                split: crate::datamodel::Split::Validation,
            },
        ];
        write_regions(&path, &regions).unwrap();
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("region_id,x_min"));
        assert_eq!(read_regions(&path).unwrap(), regions);

        let mut bad = regions.clone();
        bad[1].split = crate::datamodel::Split::Train;
        write_regions(&path, &bad).unwrap();
        assert!(read_regions(&path)
            .unwrap_err()
            .to_string()
            .contains("regions.csv"));
        assert!(matches!(
            read_regions(&dir.path().join("nope.csv")),
            Err(Error::Io { .. })
        ));
    }
}
