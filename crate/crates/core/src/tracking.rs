//! Sequence-level inference with online template management.

use std::io::Write as _;
use std::path::Path;

use image::RgbImage;

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::crop::{crop_around, crops_to_tensor, Crop, CropRecord};
use crate::error::{CfbtError, Result};
use crate::head::ScoreMaps;
use crate::model::{CfbtModel, SearchInputs, TemplateInputs};
use crate::nn::ForwardCtx;

/// One RGB frame and its registered thermal frame (loaded as three channels).
#[derive(Debug, Clone)]
pub struct FramePair {
    pub rgb: RgbImage,
    pub tir: RgbImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerSettings {
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub update_interval: usize,
    pub cosine_window: bool,
}

impl From<&ModelConfig> for TrackerSettings {
    fn from(c: &ModelConfig) -> Self {
        Self {
            template_size: c.template_size,
            search_size: c.search_size,
            template_factor: c.template_factor,
            search_factor: c.search_factor,
            update_interval: c.update_interval,
            cosine_window: c.cosine_window,
        }
    }
}

/// RGB and TIR crops taken at the same square.
#[derive(Debug, Clone, PartialEq)]
pub struct CropPair {
    pub rgb: Crop,
    pub tir: Crop,
}

impl CropPair {
    fn take(frame: &FramePair, bbox: &BBox, factor: f64, size: usize) -> Result<Self> {
        Ok(Self {
            rgb: crop_around(&frame.rgb, bbox, factor, size)?,
            tir: crop_around(&frame.tir, bbox, factor, size)?,
        })
    }

    pub fn record(&self) -> CropRecord {
        self.rgb.record
    }
}

/// Anything that maps templates and a search region to score maps.
pub trait ResponseModel {
    fn settings(&self) -> TrackerSettings;
    fn respond(&self, initial: &CropPair, online: &CropPair, search: &CropPair) -> Result<ScoreMaps>;
}

impl ResponseModel for CfbtModel {
    fn settings(&self) -> TrackerSettings {
        self.config().into()
    }

    fn respond(&self, initial: &CropPair, online: &CropPair, search: &CropPair) -> Result<ScoreMaps> {
        let (dt, dev) = (self.dtype(), self.device());
        let t = |c: &Crop| crops_to_tensor(&[c], dt, dev);
        let templates = TemplateInputs {
            initial_rgb: t(&initial.rgb)?,
            initial_tir: t(&initial.tir)?,
            online_rgb: t(&online.rgb)?,
            online_tir: t(&online.tir)?,
        };
        let search = SearchInputs {
            rgb: t(&search.rgb)?,
            tir: t(&search.tir)?,
        };
        self.forward(&templates, &search, &mut ForwardCtx::eval())?.sample(0)
    }
}

/// Best frame seen since the last template replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBest {
    pub score: f64,
    pub frame_index: usize,
    pub crops: CropPair,
}

#[derive(Debug, Clone)]
pub struct TrackState {
    pub initial_template: CropPair,
    pub online_template: CropPair,
    pub last_box: BBox,
    /// 1-based index of the last processed frame.
    pub frame_index: usize,
    pub interval_best: Option<IntervalBest>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateEvent {
    /// Replacement happened after this frame.
    pub after_frame: usize,
    /// Frame the new online template was cropped from.
    pub source_frame: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackOutput {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Frames whose score map was unusable; their box is carried over.
    pub flagged: Vec<usize>,
    pub updates: Vec<UpdateEvent>,
}

fn hann(n: usize, i: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos()
}

/// Peak cell plus offset and size at that cell, mapped to frame pixels.
/// Ties go to the lowest flat index. With `cosine_window` the peak is
/// chosen on the windowed map but the raw score is reported.
pub fn decode_box(maps: &ScoreMaps, record: &CropRecord, cosine_window: bool) -> Result<(BBox, f64)> {
    let n = maps.grid;
    let mut best: Option<(usize, f64)> = None;
    for (k, &s) in maps.cls.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        let key = if cosine_window { s * hann(n, k / n) * hann(n, k % n) } else { s };
        if best.is_none_or(|(_, b)| key > b) {
            best = Some((k, key));
        }
    }
    let Some((k, _)) = best else {
        return Err(CfbtError::Numeric("score map has no finite cell".into()));
    };
    let (row, col) = ((k / n) as f64, (k % n) as f64);
    let cx = (col + maps.offset_x[k]) / n as f64;
    let cy = (row + maps.offset_y[k]) / n as f64;
    let norm = BBox::from_center(cx, cy, maps.size_w[k], maps.size_h[k]);
    Ok((record.crop_to_frame(&norm), maps.cls[k]))
}

impl TrackState {
    pub fn new(first: &FramePair, init: &BBox, s: &TrackerSettings) -> Result<Self> {
        if !init.is_valid() {
            return Err(CfbtError::Input(format!("initial box {init} is degenerate")));
        }
        let t = CropPair::take(first, init, s.template_factor, s.template_size)?;
        Ok(Self {
            initial_template: t.clone(),
            online_template: t,
            last_box: *init,
            frame_index: 0,
            interval_best: None,
        })
    }

    /// Processes the next frame and returns its box, score and whether it
    /// was flagged. A replacement, if due, is returned as well.
    pub fn step<M: ResponseModel + ?Sized>(
        &mut self,
        model: &M,
        frame: &FramePair,
    ) -> Result<(BBox, f64, bool, Option<UpdateEvent>)> {
        let s = model.settings();
        self.frame_index += 1;
        let search = CropPair::take(frame, &self.last_box, s.search_factor, s.search_size)?;
        let maps = model.respond(&self.initial_template, &self.online_template, &search)?;
        let (w, h) = (frame.rgb.width() as f64, frame.rgb.height() as f64);
        let finite = maps.cls.iter().all(|v| v.is_finite());
        let decoded = decode_box(&maps, &search.record(), s.cosine_window)
            .ok()
            .filter(|_| finite)
            .map(|(b, score)| (b.clip(w, h), score))
            .filter(|(b, score)| b.is_valid() && score.is_finite());
        let (bbox, score, flagged) = match decoded {
            Some((b, score)) => (b, score, false),
            None => {
                log::warn!("frame {}: unusable score map, keeping previous box", self.frame_index);
                (self.last_box, f64::NAN, true)
            }
        };
        if !flagged && self.interval_best.as_ref().is_none_or(|b| score > b.score) {
            self.interval_best = Some(IntervalBest {
                score,
                frame_index: self.frame_index,
                crops: CropPair::take(frame, &bbox, s.template_factor, s.template_size)?,
            });
        }
        self.last_box = bbox;
        let mut event = None;
        if s.update_interval > 0 && self.frame_index.is_multiple_of(s.update_interval) {
            if let Some(best) = self.interval_best.take() {
                event = Some(UpdateEvent {
                    after_frame: self.frame_index,
                    source_frame: best.frame_index,
                    score: best.score,
                });
                self.online_template = best.crops;
            }
        }
        Ok((bbox, score, flagged, event))
    }
}

/// Tracks one sequence. Frame 1 seeds both templates from `init` and is
/// itself decoded; later frames search around the previous box.
pub fn track_sequence<M, I>(model: &M, frames: I, init: &BBox) -> Result<TrackOutput>
where
    M: ResponseModel + ?Sized,
    I: IntoIterator<Item = Result<FramePair>>,
{
    let mut frames = frames.into_iter();
    let first = frames
        .next()
        .ok_or_else(|| CfbtError::Input("empty sequence".into()))??;
    let mut state = TrackState::new(&first, init, &model.settings())?;
    let mut out = TrackOutput::default();
    let record = |state: &mut TrackState, frame: &FramePair, out: &mut TrackOutput| -> Result<()> {
        let (b, score, flagged, event) = state.step(model, frame)?;
        out.boxes.push(b);
        out.scores.push(score);
        if flagged {
            out.flagged.push(state.frame_index);
        }
        out.updates.extend(event);
        Ok(())
    };
    record(&mut state, &first, &mut out)?;
    drop(first);
    for frame in frames {
        record(&mut state, &frame?, &mut out)?;
    }
    Ok(out)
}

/// One `x,y,w,h` line per frame.
pub fn write_results(path: &Path, boxes: &[BBox]) -> Result<()> {
    let io = |e| CfbtError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for b in boxes {
        writeln!(f, "{},{},{},{}", b.x, b.y, b.w, b.h).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn maps_for(grid: usize, peak: usize, off: (f64, f64), size: (f64, f64)) -> ScoreMaps {
        let mut m = ScoreMaps::uniform(grid, 0.1, 0.2);
        m.cls[peak] = 0.9;
        m.offset_x[peak] = off.0;
        m.offset_y[peak] = off.1;
        m.size_w[peak] = size.0;
        m.size_h[peak] = size.1;
        m
    }

    fn unit_record() -> CropRecord {
        CropRecord {
            x0: 0.0,
            y0: 0.0,
            side: 1.0,
            out_size: 16,
            out_of_frame: false,
        }
    }

    #[test]
    fn decode_formula() {
        let m = maps_for(16, 8 * 16 + 8, (0.5, 0.5), (0.25, 0.25));
        let (b, s) = decode_box(&m, &unit_record(), false).unwrap();
        assert_eq!(s, 0.9);
        assert!((b.center().0 - 8.5 / 16.0).abs() < 1e-12);
        assert!((b.center().1 - 8.5 / 16.0).abs() < 1e-12);
        assert!((b.w - 0.25).abs() < 1e-12 && (b.h - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ties_take_lowest_index() {
        let mut m = ScoreMaps::uniform(4, 0.5, 0.2);
        m.offset_x[3] = 0.7;
        m.cls[3] = 0.8;
        m.cls[9] = 0.8;
        let (b, _) = decode_box(&m, &unit_record(), false).unwrap();
        assert!((b.center().0 - 3.7 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn all_nan_map_is_numeric_error() {
        let mut m = ScoreMaps::uniform(4, f64::NAN, 0.2);
        m.cls.iter_mut().for_each(|v| *v = f64::NAN);
        assert!(matches!(decode_box(&m, &unit_record(), false), Err(CfbtError::Numeric(_))));
    }

    #[test]
    fn cosine_window_prefers_centre_on_flat_map() {
        let m = ScoreMaps::uniform(8, 0.5, 0.2);
        let (plain, _) = decode_box(&m, &unit_record(), false).unwrap();
        let (windowed, s) = decode_box(&m, &unit_record(), true).unwrap();
        assert!(plain.center().0 < 0.1);
        assert!((windowed.center().0 - 0.5).abs() < 0.15);
        assert_eq!(s, 0.5);
    }

    /// Returns scripted peak scores and records which online template it saw.
    struct Scripted {
        settings: TrackerSettings,
        scores: Vec<f64>,
        calls: RefCell<usize>,
        online_means: RefCell<Vec<f32>>,
    }

    impl ResponseModel for Scripted {
        fn settings(&self) -> TrackerSettings {
            self.settings
        }

        fn respond(&self, _i: &CropPair, online: &CropPair, _s: &CropPair) -> Result<ScoreMaps> {
            let k = *self.calls.borrow();
            *self.calls.borrow_mut() += 1;
            self.online_means.borrow_mut().push(online.rgb.pixels[0]);
            let g = 4;
            let mut m = ScoreMaps::uniform(g, 0.0, 0.25);
            m.cls[5] = self.scores[k % self.scores.len()];
            m.offset_x[5] = 0.5;
            m.offset_y[5] = 0.5;
            Ok(m)
        }
    }

    fn settings(interval: usize) -> TrackerSettings {
        TrackerSettings {
            template_size: 8,
            search_size: 16,
            template_factor: 2.0,
            search_factor: 4.0,
            update_interval: interval,
            cosine_window: false,
        }
    }

    /// Frame `t` is uniformly filled with value `t`, so crop pixels identify the frame.
    fn frames(n: usize) -> impl Iterator<Item = Result<FramePair>> {
        (1..=n).map(|t| {
            let img = RgbImage::from_pixel(64, 64, image::Rgb([t as u8, 0, 0]));
            Ok(FramePair { rgb: img.clone(), tir: img })
        })
    }

    #[test]
    fn single_frame_has_no_update() {
        let m = Scripted {
            settings: settings(50),
            scores: vec![0.5],
            calls: RefCell::new(0),
            online_means: RefCell::new(vec![]),
        };
        let out = track_sequence(&m, frames(1), &BBox::new(20.0, 20.0, 10.0, 10.0)).unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert!(out.updates.is_empty());
        assert_eq!(out.scores, vec![0.5]);
    }

    #[test]
    fn updates_after_interval_boundaries() {
        let m = Scripted {
            settings: settings(50),
            scores: vec![0.3],
            calls: RefCell::new(0),
            online_means: RefCell::new(vec![]),
        };
        let out = track_sequence(&m, frames(120), &BBox::new(20.0, 20.0, 10.0, 10.0)).unwrap();
        let after: Vec<usize> = out.updates.iter().map(|u| u.after_frame).collect();
        assert_eq!(after, vec![50, 100]);
        assert_eq!(out.boxes.len(), 120);
        // equal scores: first frame of each interval wins
        assert_eq!(out.updates[0].source_frame, 1);
        assert_eq!(out.updates[1].source_frame, 51);
        // online template equals the initial one until the first boundary
        let seen = m.online_means.borrow();
        assert!(seen[..50].iter().all(|&v| v == 1.0));
        assert!(seen[50..100].iter().all(|&v| v == 1.0));
        assert!(seen[100..].iter().all(|&v| v == 51.0));
    }

    #[test]
    fn replacement_comes_from_best_frame() {
        let mut scores = vec![0.1, 0.9, 0.2];
        scores.resize(10, 0.05);
        let m = Scripted {
            settings: settings(10),
            scores,
            calls: RefCell::new(0),
            online_means: RefCell::new(vec![]),
        };
        let out = track_sequence(&m, frames(11), &BBox::new(20.0, 20.0, 10.0, 10.0)).unwrap();
        assert_eq!(out.updates.len(), 1);
        assert_eq!(out.updates[0].source_frame, 2);
        assert_eq!(out.updates[0].score, 0.9);
        assert_eq!(m.online_means.borrow()[10], 2.0);
    }

    #[test]
    fn non_finite_score_carries_box() {
        let m = Scripted {
            settings: settings(50),
            scores: vec![0.4, f64::NAN],
            calls: RefCell::new(0),
            online_means: RefCell::new(vec![]),
        };
        let out = track_sequence(&m, frames(3), &BBox::new(20.0, 20.0, 10.0, 10.0)).unwrap();
        assert_eq!(out.flagged, vec![2]);
        assert_eq!(out.boxes[1], out.boxes[0]);
    }

    #[test]
    fn empty_sequence_is_input_error() {
        let m = Scripted {
            settings: settings(50),
            scores: vec![0.4],
            calls: RefCell::new(0),
            online_means: RefCell::new(vec![]),
        };
        assert!(matches!(
            track_sequence(&m, frames(0), &BBox::new(1.0, 1.0, 2.0, 2.0)),
            Err(CfbtError::Input(_))
        ));
    }
}
