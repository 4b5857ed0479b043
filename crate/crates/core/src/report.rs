//! Rendering of label maps and error heatmaps, ROC plots and the HTML run summary.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, RasterPatch, IGNORE};
use crate::evaluation::{RocCurve, SuiteReport};
use crate::fsutil::atomic_write;
use crate::openset::{OpenSetPrediction, ScoreMap};
use crate::{CoreSegError, Result};

pub type Color = [u8; 3];

/// Colors for known classes `0..K` plus the UNKNOWN and IGNORE sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub known: Vec<Color>,
    pub unknown: Color,
    pub ignore: Color,
}

const WHITE: Color = [255, 255, 255];
const BLUE: Color = [0, 0, 255];
const CYAN: Color = [0, 255, 255];
const GREEN: Color = [0, 255, 0];
const YELLOW: Color = [255, 255, 0];
const RED: Color = [255, 0, 0];
const BLACK: Color = [0, 0, 0];

/// Used for classes without a conventional color, in order.
const FALLBACK: [Color; 10] = [
    [255, 0, 255],
    [255, 128, 0],
    [128, 0, 255],
    [0, 128, 128],
    [128, 128, 0],
    [128, 64, 0],
    [0, 0, 128],
    [128, 128, 128],
    [0, 128, 0],
    [255, 128, 192],
];

impl Palette {
    pub fn new(known: Vec<Color>, unknown: Color, ignore: Color) -> Result<Self> {
        let mut all = known.clone();
        all.push(unknown);
        all.push(ignore);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(CoreSegError::invalid("palette colors must be distinct"));
        }
        Ok(Palette {
            known,
            unknown,
            ignore,
        })
    }

    /// ISPRS conventions by class name, fallback colors for anything else;
    /// UNKNOWN is red and IGNORE black.
    pub fn isprs(class_names: &[String]) -> Result<Self> {
        let mut used = vec![RED, BLACK];
        let mut known: Vec<Option<Color>> = class_names
            .iter()
            .map(|n| {
                let n = n.to_lowercase();
                let c = if n.contains("impervious") || n.contains("road") {
                    WHITE
                } else if n.contains("build") {
                    BLUE
                } else if n.contains("low") {
                    CYAN
                } else if n.contains("tree") || n.contains("high") {
                    GREEN
                } else if n.contains("car") {
                    YELLOW
                } else {
                    return None;
                };
                Some(c)
            })
            .collect();
        for c in known.iter_mut() {
            if let Some(col) = *c {
                if used.contains(&col) {
                    *c = None;
                } else {
                    used.push(col);
                }
            }
        }
        let mut spare = FALLBACK
            .iter()
            .chain(&[WHITE, BLUE, CYAN, GREEN, YELLOW])
            .filter(|c| !used.contains(c))
            .copied()
            .collect::<Vec<_>>()
            .into_iter();
        let known = known
            .into_iter()
            .map(|c| {
                c.or_else(|| spare.next())
                    .ok_or_else(|| CoreSegError::invalid("too many classes for the default palette"))
            })
            .collect::<Result<Vec<_>>>()?;
        Palette::new(known, RED, BLACK)
    }

    pub fn color(&self, label: i32) -> Result<Color> {
        let k = self.known.len() as i32;
        match label {
            IGNORE => Ok(self.ignore),
            l if l == k => Ok(self.unknown),
            l if (0..k).contains(&l) => Ok(self.known[l as usize]),
            l => Err(CoreSegError::invalid(format!("no palette entry for label {l}"))),
        }
    }

    /// Inverse mapping; `None` for colors outside the palette.
    pub fn label_of(&self, color: Color) -> Option<i32> {
        if color == self.unknown {
            return Some(self.known.len() as i32);
        }
        if color == self.ignore {
            return Some(IGNORE);
        }
        self.known.iter().position(|&c| c == color).map(|i| i as i32)
    }
}

/// Pointwise color mapping of a label mask.
pub fn render_labels(mask: &LabelMask, palette: &Palette) -> Result<RgbImage> {
    if mask.num_known != palette.known.len() {
        return Err(CoreSegError::invalid(format!(
            "palette has {} known classes, mask {}",
            palette.known.len(),
            mask.num_known
        )));
    }
    let (h, w) = mask.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &l) in mask.labels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, Rgb(palette.color(l)?));
    }
    Ok(img)
}

/// Open-set labels, UNKNOWN in the palette's unknown color.
pub fn render_prediction(pred: &OpenSetPrediction, palette: &Palette) -> Result<RgbImage> {
    render_labels(&pred.labels, palette)
}

/// Recovers labels from a rendered image.
pub fn decode_labels(img: &RgbImage, palette: &Palette) -> Result<LabelMask> {
    let labels = ndarray::Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        palette.label_of(img.get_pixel(x as u32, y as u32).0)
    });
    if labels.iter().any(Option::is_none) {
        return Err(CoreSegError::invalid("image contains colors outside the palette"));
    }
    LabelMask::new(labels.mapv(|l| l.unwrap()), palette.known.len())
}

/// How error values are mapped onto the color ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RangePolicy {
    /// Per-image minimum and maximum.
    MinMax,
    /// Shared bounds, so images are comparable.
    Fixed { lo: f64, hi: f64 },
}

/// Black to red to yellow to white; every channel is non-decreasing in `t`.
pub fn ramp(t: f64) -> Color {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) } * 3.0;
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(t), c(t - 1.0), c(t - 2.0)]
}

pub fn render_error_heatmap(score: &ScoreMap, policy: RangePolicy) -> Result<RgbImage> {
    let m = &score.min_error;
    if m.is_empty() {
        return Err(CoreSegError::invalid("empty score map"));
    }
    let (lo, hi) = match policy {
        RangePolicy::MinMax => m
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
        RangePolicy::Fixed { lo, hi } => (lo, hi),
    };
    let span = hi - lo;
    let (h, w) = m.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in m.indexed_iter() {
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        img.put_pixel(x as u32, y as u32, Rgb(ramp(t)));
    }
    Ok(img)
}

/// First three channels as RGB (a single channel is shown as grey).
pub fn render_raster(patch: &RasterPatch) -> RgbImage {
    let (c, h, w) = patch.pixels.dim();
    let px = |ch: usize, y: usize, x: usize| (patch.pixels[[ch.min(c - 1), y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
    })
}

/// Side-by-side panels separated by a 2-pixel white gutter.
pub fn hstack(panels: &[RgbImage]) -> RgbImage {
    let gap = 2;
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb(WHITE));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gap;
    }
    out
}

/// Input, ground truth, closed-set map, open-set map and error heatmap.
pub fn render_panel(
    image: &RasterPatch,
    truth: &LabelMask,
    pred: &OpenSetPrediction,
    palette: &Palette,
    policy: RangePolicy,
) -> Result<RgbImage> {
    Ok(hstack(&[
        render_raster(image),
        render_labels(truth, palette)?,
        render_labels(&pred.closed_labels, palette)?,
        render_prediction(pred, palette)?,
        render_error_heatmap(&pred.score_map, policy)?,
    ]))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Color) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// ROC curve on a white square with axes and the chance diagonal.
pub fn render_roc(curve: &RocCurve, size: u32) -> RgbImage {
    let size = size.max(32);
    let margin = 8i64;
    let span = size as i64 - 2 * margin;
    let mut img = RgbImage::from_pixel(size, size, Rgb(WHITE));
    let map = |f: f64, t: f64| {
        (
            margin + (f * span as f64).round() as i64,
            margin + span - (t * span as f64).round() as i64,
        )
    };
    let grey = [170, 170, 170];
    draw_line(&mut img, map(0.0, 0.0), map(1.0, 1.0), grey);
    draw_line(&mut img, map(0.0, 0.0), map(1.0, 0.0), BLACK);
    draw_line(&mut img, map(0.0, 0.0), map(0.0, 1.0), BLACK);
    for (f, t) in curve.fpr.windows(2).zip(curve.tpr.windows(2)) {
        draw_line(&mut img, map(f[0], t[0]), map(f[1], t[1]), [200, 0, 0]);
    }
    img
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    atomic_write(path, &png_bytes(img)?)?;
    Ok(())
}

/// An image to embed in the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRef {
    pub scenario: String,
    pub caption: String,
    pub path: PathBuf,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Writes one self-contained HTML page with the scenario table and embedded
/// renders. Missing renders are listed rather than failing; they are returned.
pub fn emit_summary(suite: &SuiteReport, renders: &[RenderRef], out: &Path) -> Result<Vec<PathBuf>> {
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Open-set segmentation summary</title>\n\
         <style>body{font-family:sans-serif}table{border-collapse:collapse}td,th{border:1px solid #999;padding:3px 8px;text-align:right}img{image-rendering:pixelated;margin:4px}</style>\n\
         </head><body>\n<h1>LOCO summary</h1>\n<table>\n\
         <tr><th>Scenario</th><th>Unknown class</th><th>AUROC</th><th>Closed acc.</th><th>Open known acc.</th><th>Unknown recall</th><th>q</th><th>&tau;</th></tr>\n",
    );
    for r in &suite.scenarios {
        html.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{:.2}</td><td>{:.5}</td></tr>\n",
            escape(&r.scenario),
            escape(&r.held_out.join(", ")),
            fmt3(r.auroc_unknown),
            fmt3(r.closed_accuracy),
            fmt3(r.open_known_accuracy),
            fmt3(r.unknown_recall),
            r.threshold.q,
            r.threshold.tau
        ));
    }
    let avg = suite.aggregate.map_or_else(|| "n/a".to_string(), |a| a.display());
    html.push_str(&format!("<tr><th>Avg.</th><td></td><th>{avg}</th><td colspan=\"5\"></td></tr>\n</table>\n"));
    if !suite.failures.is_empty() {
        html.push_str("<h2>Failed scenarios</h2>\n<ul>\n");
        for (name, err) in &suite.failures {
            html.push_str(&format!("<li>{}: {}</li>\n", escape(name), escape(err)));
        }
        html.push_str("</ul>\n");
    }
    let mut missing = Vec::new();
    let mut current: Option<&str> = None;
    for r in renders {
        if current != Some(r.scenario.as_str()) {
            html.push_str(&format!("<h2>{}</h2>\n", escape(&r.scenario)));
            current = Some(&r.scenario);
        }
        match std::fs::read(&r.path) {
            Ok(bytes) => html.push_str(&format!(
                "<figure><img alt=\"{0}\" src=\"data:image/png;base64,{1}\"><figcaption>{0}</figcaption></figure>\n",
                escape(&r.caption),
                base64::engine::general_purpose::STANDARD.encode(bytes)
            )),
            Err(_) => missing.push(r.path.clone()),
        }
    }
    if !missing.is_empty() {
        html.push_str("<h2>Missing artifacts</h2>\n<ul>\n");
        for p in &missing {
            html.push_str(&format!("<li>{}</li>\n", escape(&p.display().to_string())));
        }
        html.push_str("</ul>\n");
    }
    html.push_str("</body></html>\n");
    atomic_write(out, html.as_bytes())?;
    Ok(missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;
    use crate::openset::ThresholdSpec;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn pred(labels: Array2<i32>, k: usize) -> OpenSetPrediction {
        let dim = labels.dim();
        let mask = LabelMask::new(labels, k).unwrap();
        OpenSetPrediction {
            labels: mask.clone(),
            closed_labels: mask,
            score_map: ScoreMap {
                min_error: Array2::zeros(dim),
                argmin: Array2::zeros(dim),
                origin: Origin::default(),
            },
            spec: ThresholdSpec { q: 0.5, tau: 0.0 },
        }
    }

    #[test]
    fn isprs_defaults() {
        let p = Palette::isprs(&names(&["impervious", "building", "low_veg", "tree", "car", "clutter"])).unwrap();
        assert_eq!(&p.known[..5], &[WHITE, BLUE, CYAN, GREEN, YELLOW]);
        assert_eq!(p.unknown, RED);
        assert_eq!(p.ignore, BLACK);
        assert!(!p.known[5..].contains(&RED));
    }

    #[test]
    fn all_unknown_is_uniform() {
        let p = Palette::isprs(&names(&["a", "b"])).unwrap();
        let img = render_prediction(&pred(Array2::from_elem((3, 4), 2), 2), &p).unwrap();
        assert!(img.pixels().all(|px| px.0 == RED));
    }

    #[test]
    fn one_pixel_difference() {
        let p = Palette::isprs(&names(&["a", "b"])).unwrap();
        let a = render_prediction(&pred(array![[0, 1], [1, 0]], 2), &p).unwrap();
        let b = render_prediction(&pred(array![[0, 1], [2, 0]], 2), &p).unwrap();
        let diff: Vec<_> = a.enumerate_pixels().filter(|(x, y, px)| b.get_pixel(*x, *y) != *px).collect();
        assert_eq!(diff.len(), 1);
        assert_eq!((diff[0].0, diff[0].1), (0, 1));
    }

    #[test]
    fn missing_entry_and_duplicates_rejected() {
        let p = Palette::new(vec![BLUE], RED, BLACK).unwrap();
        assert!(p.color(5).is_err());
        assert!(Palette::new(vec![BLUE, BLUE], RED, BLACK).is_err());
    }

    #[test]
    fn heatmap_policies() {
        let constant = ScoreMap {
            min_error: Array2::from_elem((2, 2), 0.3),
            argmin: Array2::zeros((2, 2)),
            origin: Origin::default(),
        };
        let img = render_error_heatmap(&constant, RangePolicy::MinMax).unwrap();
        assert!(img.pixels().all(|p| *p == *img.get_pixel(0, 0)));
        let a = ScoreMap {
            min_error: array![[0.1, 0.5]],
            ..constant.clone()
        };
        let b = ScoreMap {
            min_error: array![[0.5, 0.9]],
            ..constant
        };
        let fixed = RangePolicy::Fixed { lo: 0.0, hi: 1.0 };
        let ia = render_error_heatmap(&a, fixed).unwrap();
        let ib = render_error_heatmap(&b, fixed).unwrap();
        assert_eq!(ia.get_pixel(1, 0), ib.get_pixel(0, 0));
    }

    #[test]
    fn roc_plot_draws_curve() {
        let curve = crate::evaluation::roc_curve(&[0.1, 0.9], &[false, true], None).unwrap();
        let img = render_roc(&curve, 64);
        assert!(img.pixels().any(|p| p.0 == [200, 0, 0]));
    }

    #[test]
    fn summary_idempotent_and_notes_missing() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("a.png");
        save_png(&RgbImage::from_pixel(2, 2, Rgb(BLUE)), &img_path).unwrap();
        let suite = SuiteReport::new(vec![], vec![("x".into(), "boom".into())]);
        let renders = vec![
            RenderRef {
                scenario: "s".into(),
                caption: "present".into(),
                path: img_path,
            },
            RenderRef {
                scenario: "s".into(),
                caption: "gone".into(),
                path: dir.path().join("gone.png"),
            },
        ];
        let out = dir.path().join("summary.html");
        let missing = emit_summary(&suite, &renders, &out).unwrap();
        assert_eq!(missing.len(), 1);
        let first = std::fs::read(&out).unwrap();
        emit_summary(&suite, &renders, &out).unwrap();
        assert_eq!(first, std::fs::read(&out).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert!(text.contains("Missing artifacts") && text.contains("gone.png"));
    }

    proptest! {
        #[test]
        fn ramp_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (cl, ch) = (ramp(lo), ramp(hi));
            prop_assert!(cl.iter().zip(&ch).all(|(l, h)| l <= h));
        }

        #[test]
        fn render_round_trips(
            k in 1usize..6,
            raw in proptest::collection::vec(0u32..1000, 1..64),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut colors: Vec<Color> = (0..64u8).map(|i| [i * 4, 255 - i * 3, i.wrapping_mul(37)]).collect();
            colors.shuffle(&mut rng);
            let palette = Palette::new(colors[..k].to_vec(), colors[k], colors[k + 1]).unwrap();
            let labels = Array2::from_shape_fn((1, raw.len()), |(_, x)| (raw[x] % (k as u32 + 2)) as i32 - 1);
            let mask = LabelMask::new(labels, k).unwrap();
            let img = render_labels(&mask, &palette).unwrap();
            prop_assert_eq!(decode_labels(&img, &palette).unwrap(), mask);
        }
    }
}
