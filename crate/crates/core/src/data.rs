//! RGB-T sequence directories: `visible/`, `infrared/`, one annotation file
//! per modality and an optional `tags.txt`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;

use crate::bbox::BBox;
use crate::error::{CfbtError, Result};
use crate::tracking::FramePair;

pub const RGB_DIR: &str = "visible";
pub const TIR_DIR: &str = "infrared";
pub const RGB_GT: &str = "visible.txt";
pub const TIR_GT: &str = "infrared.txt";
/// Single shared annotation used when per-modality files are absent.
pub const SHARED_GT: &str = "init.txt";
pub const TAGS_FILE: &str = "tags.txt";

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "PNG"];

#[derive(Debug, Clone, PartialEq)]
pub struct RgbtSequence {
    pub name: String,
    pub dir: PathBuf,
    pub rgb_frames: Vec<PathBuf>,
    pub tir_frames: Vec<PathBuf>,
    pub gt_rgb: Vec<BBox>,
    pub gt_tir: Vec<BBox>,
    /// Per-frame membership for each attribute tag.
    pub tags: BTreeMap<String, Vec<bool>>,
}

impl RgbtSequence {
    pub fn len(&self) -> usize {
        self.gt_rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_rgb.is_empty()
    }

    /// Ground truth used for cropping; the RGB annotation unless it marks
    /// the target absent.
    pub fn gt(&self, i: usize) -> BBox {
        let b = self.gt_rgb[i];
        if b.is_valid() {
            b
        } else {
            self.gt_tir[i]
        }
    }

    pub fn load_frame(&self, i: usize) -> Result<FramePair> {
        Ok(FramePair {
            rgb: load_image(&self.rgb_frames[i])?,
            tir: load_image(&self.tir_frames[i])?,
        })
    }

    /// Lazily loads frames in order.
    pub fn frames(&self) -> impl Iterator<Item = Result<FramePair>> + '_ {
        (0..self.len()).map(move |i| self.load_frame(i))
    }

    /// Checks the frame/annotation count invariant.
    pub fn validate(&self) -> Result<()> {
        let counts = [self.rgb_frames.len(), self.tir_frames.len(), self.gt_rgb.len(), self.gt_tir.len()];
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(CfbtError::Data(format!(
                "{}: count mismatch (rgb frames {}, tir frames {}, rgb boxes {}, tir boxes {})",
                self.name, counts[0], counts[1], counts[2], counts[3]
            )));
        }
        if let Some((tag, mask)) = self.tags.iter().find(|(_, m)| m.len() != counts[0]) {
            return Err(CfbtError::Data(format!("{}: tag {tag} covers {} frames", self.name, mask.len())));
        }
        Ok(())
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CfbtError::io(path, io),
        other => CfbtError::Data(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

/// A sequence that could not be loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceError {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub sequences: Vec<RgbtSequence>,
    pub errors: Vec<SequenceError>,
}

/// Parses `x,y,w,h` lines. Blank lines are skipped; anything else that is
/// not four finite values with `w, h >= 0` is an error.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| CfbtError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let b: BBox = line.parse().map_err(err)?;
        if b.w < 0.0 || b.h < 0.0 {
            return Err(err(format!("negative size in `{line}`")));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| CfbtError::io(path, e))?;
    parse_annotations(&text, path)
}

/// `TAG` (whole sequence) or `TAG first last` (1-based, inclusive).
pub fn parse_tags(text: &str, path: &Path, frames: usize) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut tags: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| CfbtError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("{msg}: `{line}`"),
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let mask = tags.entry(parts[0].to_string()).or_insert_with(|| vec![false; frames]);
        match parts.len() {
            1 => mask.iter_mut().for_each(|m| *m = true),
            3 => {
                let lo: usize = parts[1].parse().map_err(|_| err("bad frame index"))?;
                let hi: usize = parts[2].parse().map_err(|_| err("bad frame index"))?;
                if lo == 0 || lo > hi || hi > frames {
                    return Err(err("frame range outside sequence"));
                }
                mask[lo - 1..hi].iter_mut().for_each(|m| *m = true);
            }
            _ => return Err(err("expected `TAG` or `TAG first last`")),
        }
    }
    Ok(tags)
}

/// Writes tags as `TAG first last` runs.
pub fn format_tags(tags: &BTreeMap<String, Vec<bool>>) -> String {
    let mut out = String::new();
    for (tag, mask) in tags {
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                out.push_str(&format!("{tag} {} {}\n", start + 1, i));
            } else {
                i += 1;
            }
        }
    }
    out
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CfbtError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

/// Loads one sequence directory. Structural problems come back as
/// `Data` errors; malformed annotation lines as `Parse` errors.
pub fn load_sequence(dir: &Path) -> Result<RgbtSequence> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    for sub in [RGB_DIR, TIR_DIR] {
        if !dir.join(sub).is_dir() {
            return Err(CfbtError::Data(format!("{name}: missing `{sub}/` folder")));
        }
    }
    let rgb_frames = list_frames(&dir.join(RGB_DIR))?;
    let tir_frames = list_frames(&dir.join(TIR_DIR))?;
    let (rgb_gt, tir_gt, shared) = (dir.join(RGB_GT), dir.join(TIR_GT), dir.join(SHARED_GT));
    let (gt_rgb, gt_tir) = match (rgb_gt.is_file(), tir_gt.is_file()) {
        (true, true) => (read_annotations(&rgb_gt)?, read_annotations(&tir_gt)?),
        (true, false) => {
            let g = read_annotations(&rgb_gt)?;
            (g.clone(), g)
        }
        (false, true) => {
            let g = read_annotations(&tir_gt)?;
            (g.clone(), g)
        }
        (false, false) if shared.is_file() => {
            let g = read_annotations(&shared)?;
            (g.clone(), g)
        }
        _ => return Err(CfbtError::Data(format!("{name}: no annotation file"))),
    };
    let tags_path = dir.join(TAGS_FILE);
    let tags = if tags_path.is_file() {
        let text = fs::read_to_string(&tags_path).map_err(|e| CfbtError::io(&tags_path, e))?;
        parse_tags(&text, &tags_path, gt_rgb.len())?
    } else {
        BTreeMap::new()
    };
    let seq = RgbtSequence {
        name,
        dir: dir.to_path_buf(),
        rgb_frames,
        tir_frames,
        gt_rgb,
        gt_tir,
        tags,
    };
    seq.validate()?;
    if seq.is_empty() {
        return Err(CfbtError::Data(format!("{}: no frames", seq.name)));
    }
    Ok(seq)
}

/// Loads every sequence directory under `root`, in name order. Sequences
/// with structural problems are skipped and reported; parse errors abort.
pub fn load_dataset(root: &Path) -> Result<LoadReport> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CfbtError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut report = LoadReport::default();
    for dir in dirs {
        match load_sequence(&dir) {
            Ok(seq) => report.sequences.push(seq),
            Err(CfbtError::Data(reason)) => {
                log::warn!("skipping {}: {reason}", dir.display());
                report.errors.push(SequenceError {
                    name: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    reason,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Bounded FIFO cache of decoded frames, shared across training steps.
#[derive(Debug)]
pub struct FrameCache {
    capacity: usize,
    map: HashMap<PathBuf, Arc<RgbImage>>,
    order: VecDeque<PathBuf>,
}

impl FrameCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            map: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn get(&mut self, path: &Path) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.map.get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(load_image(path)?);
        if self.capacity > 0 {
            while self.map.len() >= self.capacity {
                match self.order.pop_front() {
                    Some(old) => {
                        self.map.remove(&old);
                    }
                    None => break,
                }
            }
            self.map.insert(path.to_path_buf(), img.clone());
            self.order.push_back(path.to_path_buf());
        }
        Ok(img)
    }
}
