//! Synthetic RGB-T sequences: a moving target with look-alike distractors
//! over a textured background, plus a thermal rendering that emphasizes the
//! target.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::data::{self, RgbtSequence};
use crate::error::{CfbtError, Result};
use crate::kv::{self, KvConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub target_w: f64,
    pub target_h: f64,
    pub shape: Shape,
    /// Initial target centre; `None` draws it from the seed.
    pub start: Option<(f64, f64)>,
    /// Pixels per frame; `None` draws it from the seed within `max_speed`.
    pub velocity: Option<(f64, f64)>,
    pub max_speed: f64,
    /// Relative size change per frame.
    pub scale_drift: f64,
    pub bounce: bool,
    pub distractors: usize,
    /// 1-based inclusive frame range hidden behind an occluder.
    pub occlusion: Option<(usize, usize)>,
    pub tir_offset: f64,
    pub tir_blur: usize,
    pub tir_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 60,
            target_w: 24.0,
            target_h: 20.0,
            shape: Shape::Rect,
            start: None,
            velocity: None,
            max_speed: 2.0,
            scale_drift: 0.0,
            bounce: true,
            distractors: 1,
            occlusion: None,
            tir_offset: 110.0,
            tir_blur: 1,
            tir_noise: 4.0,
            seed: 0,
        }
    }
}

fn pair(key: &str, v: &str) -> Result<Option<(f64, f64)>> {
    if v == "random" {
        return Ok(None);
    }
    let p: Vec<f64> = kv::list(key, v)?;
    match p.as_slice() {
        [a, b] => Ok(Some((*a, *b))),
        _ => Err(CfbtError::Config(format!("expected `a,b` or `random`, got `{v}`"))),
    }
}

fn format_pair(p: Option<(f64, f64)>) -> String {
    p.map(|(a, b)| format!("{a},{b}")).unwrap_or_else(|| "random".into())
}

impl KvConfig for SynthConfig {
    fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "width" => self.width = kv::value(key, v)?,
            "height" => self.height = kv::value(key, v)?,
            "frames" => self.frames = kv::value(key, v)?,
            "target_w" => self.target_w = kv::value(key, v)?,
            "target_h" => self.target_h = kv::value(key, v)?,
            "shape" => {
                self.shape = match v {
                    "rect" => Shape::Rect,
                    "ellipse" => Shape::Ellipse,
                    _ => return Err(CfbtError::Config(format!("unknown shape `{v}`"))),
                }
            }
            "start" => self.start = pair(key, v)?,
            "velocity" => self.velocity = pair(key, v)?,
            "max_speed" => self.max_speed = kv::value(key, v)?,
            "scale_drift" => self.scale_drift = kv::value(key, v)?,
            "bounce" => self.bounce = kv::boolean(key, v)?,
            "distractors" => self.distractors = kv::value(key, v)?,
            "occlusion" => {
                self.occlusion = match v {
                    "none" => None,
                    _ => {
                        let p: Vec<usize> = kv::list(key, v)?;
                        match p.as_slice() {
                            [a, b] => Some((*a, *b)),
                            _ => return Err(CfbtError::Config(format!("occlusion expects `first,last`, got `{v}`"))),
                        }
                    }
                }
            }
            "tir_offset" => self.tir_offset = kv::value(key, v)?,
            "tir_blur" => self.tir_blur = kv::value(key, v)?,
            "tir_noise" => self.tir_noise = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("frames", self.frames.to_string()),
            ("target_w", self.target_w.to_string()),
            ("target_h", self.target_h.to_string()),
            ("shape", if self.shape == Shape::Rect { "rect" } else { "ellipse" }.into()),
            ("start", format_pair(self.start)),
            ("velocity", format_pair(self.velocity)),
            ("max_speed", self.max_speed.to_string()),
            ("scale_drift", self.scale_drift.to_string()),
            ("bounce", self.bounce.to_string()),
            ("distractors", self.distractors.to_string()),
            (
                "occlusion",
                self.occlusion.map(|(a, b)| format!("{a},{b}")).unwrap_or_else(|| "none".into()),
            ),
            ("tir_offset", self.tir_offset.to_string()),
            ("tir_blur", self.tir_blur.to_string()),
            ("tir_noise", self.tir_noise.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CfbtError::Config(m.to_string()));
        if self.width < 8 || self.height < 8 || self.frames == 0 {
            return bad("frame size must be at least 8x8 and frames >= 1");
        }
        if !(self.target_w >= 2.0 && self.target_h >= 2.0) {
            return bad("target must be at least 2x2 pixels");
        }
        if self.target_w >= self.width as f64 || self.target_h >= self.height as f64 {
            return bad("target does not fit in the frame");
        }
        if self.scale_drift <= -0.5 || !self.scale_drift.is_finite() {
            return bad("scale_drift must be finite and > -0.5");
        }
        if let Some((a, b)) = self.occlusion {
            if a == 0 || a > b {
                return bad("occlusion range must be 1-based and ordered");
            }
        }
        if self.max_speed < 0.0 || self.tir_noise < 0.0 {
            return bad("max_speed and tir_noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn advance(&mut self, w: f64, h: f64, fw: f64, fh: f64, bounce: bool) {
        self.cx += self.vx;
        self.cy += self.vy;
        if bounce {
            let reflect = |c: &mut f64, v: &mut f64, half: f64, limit: f64| {
                if *c - half < 0.0 {
                    *c = half + (half - *c);
                    *v = v.abs();
                } else if *c + half > limit {
                    *c = limit - half - (*c + half - limit);
                    *v = -v.abs();
                }
                *c = c.clamp(half, limit - half);
            };
            reflect(&mut self.cx, &mut self.vx, w / 2.0, fw);
            reflect(&mut self.cy, &mut self.vy, h / 2.0, fh);
        }
    }
}

fn inside_shape(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    match shape {
        Shape::Rect => px >= b.x && px < b.x2() && py >= b.y && py < b.y2(),
        Shape::Ellipse => {
            let (cx, cy) = b.center();
            let dx = (px - cx) / (b.w / 2.0);
            let dy = (py - cy) / (b.h / 2.0);
            dx * dx + dy * dy <= 1.0
        }
    }
}

/// Paints a shape; pixel `(i, j)` is covered if its centre is inside.
fn paint(img: &mut [[f64; 3]], width: u32, shape: Shape, b: &BBox, color: impl Fn(f64, f64) -> [f64; 3]) {
    let height = img.len() as u32 / width;
    let x0 = b.x.floor().max(0.0) as u32;
    let y0 = b.y.floor().max(0.0) as u32;
    let x1 = (b.x2().ceil().max(0.0) as u32).min(width);
    let y1 = (b.y2().ceil().max(0.0) as u32).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside_shape(shape, b, px, py) {
                img[(y * width + x) as usize] = color((px - b.x) / b.w, (py - b.y) / b.h);
            }
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn box_blur(gray: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return gray.to_vec();
    }
    let r = radius as i64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut sum = 0.0;
                let mut n = 0.0;
                for d in -r..=r {
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                        sum += src[(sy * w as i64 + sx) as usize];
                        n += 1.0;
                    }
                }
                out[(y * w as i64 + x) as usize] = sum / n;
            }
        }
        out
    };
    pass(&pass(gray, true), false)
}

/// Renders `cfg` into `dir` in the layout [`data::load_sequence`] reads.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<RgbtSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let (w, h) = (cfg.width as usize, cfg.height as usize);

    // static textured background
    let phases: Vec<[f64; 4]> = (0..3)
        .map(|_| [rng.random_range(0.03..0.12), rng.random_range(0.03..0.12), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(60.0..140.0)])
        .collect();
    let grain: Vec<f64> = (0..w * h).map(|_| rng.random_range(-12.0..12.0)).collect();
    let mut background = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let px = &mut background[y * w + x];
            for (c, p) in phases.iter().enumerate() {
                px[c] = p[3] + 35.0 * (p[0] * x as f64 + p[1] * y as f64 + p[2]).sin() + grain[y * w + x];
            }
        }
    }

    let random_mover = |rng: &mut ChaCha8Rng, bw: f64, bh: f64| Mover {
        cx: rng.random_range(bw / 2.0..fw - bw / 2.0),
        cy: rng.random_range(bh / 2.0..fh - bh / 2.0),
        vx: rng.random_range(-1.0..=1.0) * cfg.max_speed,
        vy: rng.random_range(-1.0..=1.0) * cfg.max_speed,
    };
    let mut target = random_mover(&mut rng, cfg.target_w, cfg.target_h);
    if let Some((x, y)) = cfg.start {
        target.cx = x;
        target.cy = y;
    }
    if let Some((vx, vy)) = cfg.velocity {
        target.vx = vx;
        target.vy = vy;
    }
    let target_color = [rng.random_range(180.0..240.0), rng.random_range(30.0..80.0), rng.random_range(30.0..80.0)];
    let mut distractors: Vec<(Mover, [f64; 3])> = (0..cfg.distractors)
        .map(|_| {
            let m = random_mover(&mut rng, cfg.target_w, cfg.target_h);
            let col = target_color.map(|c| (c + rng.random_range(-25.0f64..25.0)).clamp(0.0, 255.0));
            (m, col)
        })
        .collect();
    let occluder_color = [90.0, 90.0, 95.0];
    let noise = Normal::new(0.0, cfg.tir_noise.max(1e-12)).map_err(|e| CfbtError::Config(e.to_string()))?;

    let rgb_dir = dir.join(data::RGB_DIR);
    let tir_dir = dir.join(data::TIR_DIR);
    for d in [&rgb_dir, &tir_dir] {
        fs::create_dir_all(d).map_err(|e| CfbtError::io(d, e))?;
    }
    let mut gts = Vec::with_capacity(cfg.frames);
    let mut occluded = vec![false; cfg.frames];
    let mut out_of_view = vec![false; cfg.frames];
    for t in 0..cfg.frames {
        let scale = (1.0 + cfg.scale_drift).powi(t as i32);
        let (bw, bh) = ((cfg.target_w * scale).min(fw - 1.0), (cfg.target_h * scale).min(fh - 1.0));
        if t > 0 {
            target.advance(bw, bh, fw, fh, cfg.bounce);
            for (m, _) in distractors.iter_mut() {
                m.advance(cfg.target_w, cfg.target_h, fw, fh, true);
            }
        }
        let tb = BBox::from_center(target.cx, target.cy, bw, bh);
        let visible = tb.clip(fw, fh);
        if !visible.is_valid() {
            return Err(CfbtError::Config(format!("target leaves the frame entirely at frame {}", t + 1)));
        }
        let eps = 1e-6;
        out_of_view[t] = tb.x < -eps || tb.y < -eps || tb.x2() > fw + eps || tb.y2() > fh + eps;

        let mut rgb = background.clone();
        let mut heat: Vec<f64> = background.iter().map(|p| 0.25 * (p[0] + p[1] + p[2]) / 3.0 + 20.0).collect();
        for (m, col) in &distractors {
            let db = BBox::from_center(m.cx, m.cy, cfg.target_w, cfg.target_h);
            paint(&mut rgb, cfg.width, cfg.shape, &db, |_, _| *col);
            let mut layer = vec![[f64::NAN; 3]; w * h];
            paint(&mut layer, cfg.width, cfg.shape, &db, |_, _| [0.0; 3]);
            for (k, l) in layer.iter().enumerate() {
                if !l[0].is_nan() {
                    heat[k] = 70.0;
                }
            }
        }
        paint(&mut rgb, cfg.width, cfg.shape, &tb, |u, _| {
            // a vertical stripe keeps the target distinguishable from distractors
            if (0.4..0.6).contains(&u) {
                [240.0, 240.0, 240.0]
            } else {
                target_color
            }
        });
        let mut layer = vec![[f64::NAN; 3]; w * h];
        paint(&mut layer, cfg.width, cfg.shape, &tb, |_, _| [0.0; 3]);
        for (k, l) in layer.iter().enumerate() {
            if !l[0].is_nan() {
                heat[k] = 40.0 + cfg.tir_offset;
            }
        }
        if let Some((a, b)) = cfg.occlusion {
            if (a..=b).contains(&(t + 1)) {
                occluded[t] = true;
                let ob = BBox::new(tb.x - 2.0, tb.y - 2.0, tb.w + 4.0, tb.h + 4.0);
                paint(&mut rgb, cfg.width, Shape::Rect, &ob, |_, _| occluder_color);
                let mut layer = vec![[f64::NAN; 3]; w * h];
                paint(&mut layer, cfg.width, Shape::Rect, &ob, |_, _| [0.0; 3]);
                for (k, l) in layer.iter().enumerate() {
                    if !l[0].is_nan() {
                        heat[k] = 55.0;
                    }
                }
            }
        }
        let heat = box_blur(&heat, w, h, cfg.tir_blur);

        let rgb_img = RgbImage::from_fn(cfg.width, cfg.height, |x, y| {
            let p = rgb[(y as usize) * w + x as usize];
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        });
        let mut tir_img = RgbImage::new(cfg.width, cfg.height);
        for (k, px) in tir_img.pixels_mut().enumerate() {
            let n = if cfg.tir_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let v = to_u8(heat[k] + n);
            *px = Rgb([v, v, v]);
        }
        let file = format!("{:06}.png", t + 1);
        for (img, d) in [(&rgb_img, &rgb_dir), (&tir_img, &tir_dir)] {
            let p = d.join(&file);
            img.save(&p).map_err(|e| CfbtError::Data(format!("{}: {e}", p.display())))?;
        }
        gts.push(visible);
    }

    let ann: String = gts.iter().map(|b| format!("{b}\n")).collect();
    for name in [data::RGB_GT, data::TIR_GT] {
        let p = dir.join(name);
        fs::write(&p, &ann).map_err(|e| CfbtError::io(&p, e))?;
    }
    let mut tags = BTreeMap::new();
    if occluded.iter().any(|&o| o) {
        tags.insert("HO".to_string(), occluded);
    }
    if out_of_view.iter().any(|&o| o) {
        tags.insert("OV".to_string(), out_of_view);
    }
    if cfg.distractors > 0 {
        tags.insert("SA".to_string(), vec![true; cfg.frames]);
    }
    if cfg.scale_drift != 0.0 {
        tags.insert("SV".to_string(), vec![true; cfg.frames]);
    }
    if !tags.is_empty() {
        let p = dir.join(data::TAGS_FILE);
        fs::write(&p, data::format_tags(&tags)).map_err(|e| CfbtError::io(&p, e))?;
    }
    data::load_sequence(dir)
}

/// `count` sequences named `seq_000`, `seq_001`, ... with seeds
/// `base.seed + k`.
pub fn generate_dataset(base: &SynthConfig, root: &Path, count: usize) -> Result<Vec<RgbtSequence>> {
    (0..count)
        .map(|k| {
            let cfg = SynthConfig {
                seed: base.seed.wrapping_add(k as u64),
                ..base.clone()
            };
            generate_synthetic(&cfg, &root.join(format!("seq_{k:03}")))
        })
        .collect()
}
