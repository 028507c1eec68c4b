//! Sequence loading and saving under the OTB directory convention:
//! `<seq>/img/%04d.jpg|png` frames plus `<seq>/groundtruth_rect.txt` with
//! one `x,y,w,h` line per frame (1-based coordinates on disk, converted to
//! 0-based in memory). An optional `attributes.txt` carries one tag per
//! line.

use std::fs;
use std::path::{Path, PathBuf};

use mbcf_core::{BoundingBox, Frame};

use crate::{BenchError, Result};

/// Frames either referenced on disk or held in memory.
#[derive(Debug, Clone)]
pub enum FrameStore {
    Paths(Vec<PathBuf>),
    Memory(Vec<Frame>),
}

/// One annotated sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: FrameStore,
    pub truth: Vec<BoundingBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        match &self.frames {
            FrameStore::Paths(p) => p.len(),
            FrameStore::Memory(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads (or clones) frame `index` as a grayscale map in `[0, 1]`.
    pub fn frame(&self, index: usize) -> Result<Frame> {
        match &self.frames {
            FrameStore::Memory(frames) => frames
                .get(index)
                .cloned()
                .ok_or_else(|| BenchError::Input(format!("frame index {index} out of range"))),
            FrameStore::Paths(paths) => {
                let path = paths
                    .get(index)
                    .ok_or_else(|| BenchError::Input(format!("frame index {index} out of range")))?;
                load_frame(path)
            }
        }
    }

    /// All frames, loaded eagerly.
    pub fn all_frames(&self) -> Result<Vec<Frame>> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }

    /// Materializes the sequence to `dir` in the loadable layout. Frames are
    /// quantized to 8-bit PNG.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir)?;
        for i in 0..self.len() {
            let frame = self.frame(i)?;
            let mut buf = image::GrayImage::new(frame.width() as u32, frame.height() as u32);
            for (x, y, pixel) in buf.enumerate_pixels_mut() {
                let v = frame.pixel(x as usize, y as usize).clamp(0.0, 1.0);
                *pixel = image::Luma([(v * 255.0).round() as u8]);
            }
            buf.save(img_dir.join(format!("{:04}.png", i + 1)))?;
        }
        let mut gt = String::new();
        for b in &self.truth {
            // 1-based on disk.
            gt.push_str(&format!("{:.4},{:.4},{:.4},{:.4}\n", b.x + 1.0, b.y + 1.0, b.w, b.h));
        }
        fs::write(dir.join("groundtruth_rect.txt"), gt)?;
        if !self.attributes.is_empty() {
            fs::write(dir.join("attributes.txt"), self.attributes.join("\n") + "\n")?;
        }
        Ok(())
    }
}

fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Frame::new(w as usize, h as usize, data).map_err(BenchError::from)
}

/// Parses one ground-truth line: comma-, tab-, or whitespace-separated
/// `x,y,w,h`, converting the 1-based corner to 0-based.
fn parse_truth_line(line: &str, number: usize) -> Result<BoundingBox> {
    let fields: Vec<&str> = line
        .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(BenchError::Input(format!(
            "ground-truth line {number}: expected 4 fields, got {}",
            fields.len()
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| BenchError::Input(format!("ground-truth line {number}: bad number {s:?}")))?;
        if !v.is_finite() {
            return Err(BenchError::Input(format!(
                "ground-truth line {number}: non-finite value"
            )));
        }
        Ok(v)
    };
    Ok(BoundingBox::new(
        parse(fields[0])? - 1.0,
        parse(fields[1])? - 1.0,
        parse(fields[2])?,
        parse(fields[3])?,
    ))
}

/// Loads a sequence directory: frames sorted by numeric filename, ground
/// truth validated against the frame count.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let img_dir = dir.join("img");
    if !img_dir.is_dir() {
        return Err(BenchError::Input(format!(
            "{} has no img/ subdirectory",
            dir.display()
        )));
    }
    let mut frames: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&img_dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("jpg" | "jpeg" | "png")) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        let index: u64 = digits
            .parse()
            .map_err(|_| BenchError::Input(format!("frame {} has no numeric index", path.display())))?;
        frames.push((index, path));
    }
    if frames.is_empty() {
        return Err(BenchError::Input(format!("{} contains no frames", img_dir.display())));
    }
    frames.sort_by_key(|(i, _)| *i);
    let frames: Vec<PathBuf> = frames.into_iter().map(|(_, p)| p).collect();

    let gt_path = dir.join("groundtruth_rect.txt");
    let gt_text = fs::read_to_string(&gt_path)
        .map_err(|e| BenchError::Input(format!("cannot read {}: {e}", gt_path.display())))?;
    let truth: Vec<BoundingBox> = gt_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_truth_line(l, i + 1))
        .collect::<Result<_>>()?;
    if truth.len() != frames.len() {
        return Err(BenchError::Input(format!(
            "{}: {} frames but {} ground-truth boxes",
            dir.display(),
            frames.len(),
            truth.len()
        )));
    }

    let attributes = fs::read_to_string(dir.join("attributes.txt"))
        .map(|s| {
            s.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        })
        .unwrap_or_default();

    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(Sequence { name, frames: FrameStore::Paths(frames), truth, attributes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mbcf-seq-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(dir.join("img")).unwrap();
        dir
    }

    fn write_dummy_frames(dir: &Path, count: usize) {
        for i in 0..count {
            let img = image::GrayImage::from_pixel(8, 8, image::Luma([100]));
            img.save(dir.join("img").join(format!("{:04}.png", i + 1))).unwrap();
        }
    }

    #[test]
    fn three_frames_and_boxes_load() {
        let dir = scratch_dir("ok");
        write_dummy_frames(&dir, 3);
        fs::write(dir.join("groundtruth_rect.txt"), "1,2,3,4\n5,6,7,8\n9,10,11,12\n").unwrap();
        let seq = load_sequence(&dir).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.truth.len(), 3);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn one_based_coordinates_become_zero_based() {
        let dir = scratch_dir("base");
        write_dummy_frames(&dir, 1);
        fs::write(dir.join("groundtruth_rect.txt"), "10,20,30,40\n").unwrap();
        let seq = load_sequence(&dir).unwrap();
        let b = seq.truth[0];
        assert_eq!((b.x, b.y, b.w, b.h), (9.0, 19.0, 30.0, 40.0));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = scratch_dir("mismatch");
        write_dummy_frames(&dir, 3);
        fs::write(dir.join("groundtruth_rect.txt"), "1,2,3,4\n5,6,7,8\n").unwrap();
        match load_sequence(&dir) {
            Err(BenchError::Input(msg)) => assert!(msg.contains("3 frames but 2")),
            other => panic!("expected input error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unparsable_line_reports_its_number() {
        let dir = scratch_dir("badline");
        write_dummy_frames(&dir, 2);
        fs::write(dir.join("groundtruth_rect.txt"), "1,2,3,4\n5,abc,7,8\n").unwrap();
        match load_sequence(&dir) {
            Err(BenchError::Input(msg)) => assert!(msg.contains("line 2"), "message: {msg}"),
            other => panic!("expected input error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tab_separated_truth_parses() {
        let b = parse_truth_line("1\t2\t3\t4", 1).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (0.0, 1.0, 3.0, 4.0));
    }

    #[test]
    fn save_and_load_round_trip_truth() {
        let dir = scratch_dir("roundtrip");
        fs::remove_dir_all(&dir).ok();
        let frames = vec![Frame::filled(16, 12, 0.5); 2];
        let seq = Sequence {
            name: "t".into(),
            frames: FrameStore::Memory(frames),
            truth: vec![
                BoundingBox::new(1.0, 2.0, 5.0, 6.0),
                BoundingBox::new(2.0, 3.0, 5.0, 6.0),
            ],
            attributes: vec!["motion".into()],
        };
        seq.save(&dir).unwrap();
        let back = load_sequence(&dir).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back.truth[0].x - 1.0).abs() < 1e-9);
        assert!((back.truth[1].y - 3.0).abs() < 1e-9);
        assert_eq!(back.attributes, vec!["motion".to_string()]);
        fs::remove_dir_all(&dir).ok();
    }
}
