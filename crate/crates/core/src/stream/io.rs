//! Sequence directories in the KITTI layout: `NNNNNN.bin` point records,
//! `NNNNNN.label` label records and a `poses.txt` with one 3×4 row-major
//! pose per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::domain::{remap_labels, validate_frame, ClassMap, Frame, LabelField, Point, Pose};
use crate::error::{Error, Result};

const POINT_RECORD: usize = 16;
const LABEL_RECORD: usize = 4;
pub const POSES_FILE: &str = "poses.txt";

fn frame_stem(frame_id: u32) -> String {
    format!("{frame_id:06}")
}

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_RECORD);
    for p in points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(POINT_RECORD) {
        return Err(Error::malformed(
            path,
            format!("{} bytes is not a multiple of {POINT_RECORD}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(POINT_RECORD)
        .map(|r| {
            let f = |k: usize| f32::from_le_bytes(r[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// Raw ids are written in the low 16 bits; the upper half is zero.
pub fn encode_labels(labels: &LabelField, map: &ClassMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * LABEL_RECORD);
    let ignore_raw = map
        .raw_ids()
        .find(|&raw| matches!(map.lookup(raw), Ok(None)));
    for l in labels.iter() {
        let raw = match l {
            Some(c) => map
                .raw_id_of(c)
                .ok_or_else(|| Error::ClassMap(format!("class {c} has no raw id")))?,
            None => {
                ignore_raw.ok_or_else(|| Error::ClassMap("map has no raw id for IGNORE".into()))?
            }
        };
        if raw > u16::MAX as u32 {
            return Err(Error::ClassMap(format!(
                "raw id {raw} does not fit in 16 bits"
            )));
        }
        out.extend_from_slice(&raw.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(LABEL_RECORD) {
        return Err(Error::malformed(
            path,
            format!("{} bytes is not a multiple of {LABEL_RECORD}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD)
        .map(|r| u32::from_le_bytes(r.try_into().unwrap()) & 0xFFFF)
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_rows_3x4().iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(path, format!("line {}: {e}", lineno + 1)))?;
        let values: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
            Error::malformed(
                path,
                format!("line {}: {} values, expected 12", lineno + 1, v.len()),
            )
        })?;
        let pose = Pose::from_rows_3x4(&values);
        pose.validate()?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Writes frames with raw ids from `map`. Frames without ground truth get no
/// `.label` file.
pub fn write_sequence_with_map(frames: &[Frame], dir: &Path, map: &ClassMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in frames {
        let stem = frame_stem(f.frame_id);
        write_file(&dir.join(format!("{stem}.bin")), &encode_points(&f.points))?;
        if let Some(gt) = &f.gt_labels {
            write_file(&dir.join(format!("{stem}.label")), &encode_labels(gt, map)?)?;
        }
    }
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    write_file(&dir.join(POSES_FILE), format_poses(&poses).as_bytes())
}

/// Writes frames whose raw ids equal the canonical class ids.
pub fn write_sequence(frames: &[Frame], dir: &Path) -> Result<()> {
    write_sequence_with_map(frames, dir, &ClassMap::canonical_identity())
}

/// Writes one `.label` file per entry, for external scoring.
pub fn write_label_files(labels: &[(u32, LabelField)], dir: &Path, map: &ClassMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (frame_id, l) in labels {
        write_file(
            &dir.join(format!("{}.label", frame_stem(*frame_id))),
            &encode_labels(l, map)?,
        )?;
    }
    Ok(())
}

/// Sorted `(frame_id, path)` pairs of files with `extension` in `dir`.
pub fn list_records(dir: &Path, extension: &str) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(extension) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::malformed(&path, "file name is not a frame number"))?;
        out.push((id, path));
    }
    out.sort();
    Ok(out)
}

pub fn read_label_file(path: &Path, map: &ClassMap) -> Result<LabelField> {
    let raw = decode_raw_labels(&read_file(path)?, path)?;
    remap_labels(&raw, map)
}

/// Reads a sequence directory. Accepts both the flat layout written by
/// [`write_sequence`] and the `velodyne/` + `labels/` layout.
pub fn read_sequence_with_map(dir: &Path, map: &ClassMap) -> Result<Vec<Frame>> {
    let (point_dir, label_dir) = if dir.join("velodyne").is_dir() {
        (dir.join("velodyne"), dir.join("labels"))
    } else {
        (dir.to_path_buf(), dir.to_path_buf())
    };
    let records = list_records(&point_dir, "bin")?;
    let poses_path = dir.join(POSES_FILE);
    let poses = parse_poses(
        &String::from_utf8_lossy(&read_file(&poses_path)?),
        &poses_path,
    )?;
    if poses.len() != records.len() {
        return Err(Error::PoseCountMismatch {
            poses: poses.len(),
            frames: records.len(),
        });
    }
    let mut frames = Vec::with_capacity(records.len());
    for ((frame_id, bin), pose) in records.into_iter().zip(poses) {
        let points = decode_points(&read_file(&bin)?, &bin)?;
        let mut frame = Frame::new(frame_id, points, pose);
        let label_path = label_dir.join(format!("{}.label", frame_stem(frame_id)));
        if label_path.is_file() {
            let labels = read_label_file(&label_path, map)?;
            if labels.len() != frame.len() {
                return Err(Error::malformed(
                    &label_path,
                    format!("{} labels for {} points", labels.len(), frame.len()),
                ));
            }
            frame = frame.with_labels(labels);
        }
        validate_frame(&frame).map_err(|e| Error::Frame {
            frame_id,
            source: Box::new(e),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn read_sequence(dir: &Path) -> Result<Vec<Frame>> {
    read_sequence_with_map(dir, &ClassMap::canonical_identity())
}
