//! Tables, curves and qualitative images.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::train::{MetricsRow, RunRecord};

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// `| Dataset | mDice | mIoU | Params(M) | FLOPs(G) |`, two decimals.
pub fn metrics_markdown(rows: &[MetricsRow]) -> String {
    let mut s = String::from("| Dataset | mDice | mIoU | Params(M) | FLOPs(G) |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            r.dataset, r.mdice, r.miou, r.params_m, r.gflops
        ));
    }
    s
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit mask PNG with foreground 255.
pub fn mask_image(mask: &[u8], height: usize, width: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] > 0 { 255 } else { 0 }])
    })
}

pub fn write_mask_png(mask: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    save_png(&mask_image(mask, height, width), path)
}

/// Binary values back from a mask PNG (foreground > 127).
pub fn read_mask_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let g = crate::data::read_gray(path)?;
    let (w, h) = g.dimensions();
    Ok((crate::data::prepare_mask(&g, h as usize, w as usize), h as usize, w as usize))
}

/// Side-by-side panel: input | ground truth (if any) | prediction.
pub fn overlay_image(input: &RgbImage, gt: Option<&GrayImage>, pred: &GrayImage) -> RgbImage {
    let (w, h) = input.dimensions();
    let panels = if gt.is_some() { 3 } else { 2 };
    let mut out = RgbImage::new(w * panels, h);
    image::imageops::replace(&mut out, input, 0, 0);
    let mut col = 1;
    let paint = |out: &mut RgbImage, mask: &GrayImage, col: u32, tint: [u8; 3]| {
        let mask = if mask.dimensions() == (w, h) {
            mask.clone()
        } else {
            image::imageops::resize(mask, w, h, image::imageops::FilterType::Nearest)
        };
        for y in 0..h {
            for x in 0..w {
                let p = input.get_pixel(x, y).0;
                let px = if mask.get_pixel(x, y).0[0] > 127 {
                    [
                        ((p[0] as u16 + tint[0] as u16) / 2) as u8,
                        ((p[1] as u16 + tint[1] as u16) / 2) as u8,
                        ((p[2] as u16 + tint[2] as u16) / 2) as u8,
                    ]
                } else {
                    p
                };
                out.put_pixel(col * w + x, y, Rgb(px));
            }
        }
    };
    if let Some(g) = gt {
        paint(&mut out, g, col, [0, 255, 0]);
        col += 1;
    }
    paint(&mut out, pred, col, [255, 0, 0]);
    out
}

pub fn write_overlay_png(input: &RgbImage, gt: Option<&GrayImage>, pred: &GrayImage, path: &Path) -> Result<()> {
    save_png(&overlay_image(input, gt, pred), path)
}

const CURVE_W: u32 = 640;
const CURVE_H: u32 = 400;
const MARGIN: u32 = 40;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    // Bresenham
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
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

/// Per-epoch total (black), seg (blue) and guide (red) losses on shared
/// linear axes starting at zero.
pub fn loss_curve_image(record: &RunRecord) -> RgbImage {
    let mut img = RgbImage::from_pixel(CURVE_W, CURVE_H, Rgb([255, 255, 255]));
    let axis = Rgb([120, 120, 120]);
    let (left, right, top, bottom) = (MARGIN as i64, (CURVE_W - MARGIN) as i64, MARGIN as i64, (CURVE_H - MARGIN) as i64);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    let rows = &record.epochs;
    let ymax = rows.iter().map(|r| r.total.max(r.seg).max(r.guide)).fold(0.0f64, f64::max);
    if rows.is_empty() || !ymax.is_finite() || ymax <= 0.0 {
        return img;
    }
    let px = |i: usize| {
        if rows.len() == 1 {
            left
        } else {
            left + ((right - left) as f64 * i as f64 / (rows.len() - 1) as f64).round() as i64
        }
    };
    let py = |v: f64| bottom - ((bottom - top) as f64 * (v / ymax)).round() as i64;
    let series: [(fn(&crate::train::EpochRecord) -> f64, Rgb<u8>); 3] = [
        (|r| r.guide, Rgb([200, 30, 30])),
        (|r| r.seg, Rgb([30, 60, 200])),
        (|r| r.total, Rgb([0, 0, 0])),
    ];
    for (get, color) in series {
        for i in 1..rows.len() {
            draw_line(&mut img, (px(i - 1), py(get(&rows[i - 1]))), (px(i), py(get(&rows[i]))), color);
        }
        if rows.len() == 1 {
            img.put_pixel(px(0) as u32, py(get(&rows[0])) as u32, color);
        }
    }
    img
}

pub fn write_loss_curve(record: &RunRecord, path: &Path) -> Result<()> {
    save_png(&loss_curve_image(record), path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRecord;

    fn row(name: &str) -> MetricsRow {
        MetricsRow {
            dataset: name.into(),
            mdice: 0.91549,
            miou: 0.862,
            params_m: 3.7,
            gflops: 2.1234,
        }
    }

    #[test]
    fn markdown_has_two_decimals() {
        let md = metrics_markdown(&[row("Kvasir")]);
        assert!(md.contains("| Kvasir | 0.92 | 0.86 | 3.70 | 2.12 |"), "{md}");
    }

    #[test]
    fn csv_columns() {
        let csv = metrics_csv(&[row("a"), row("b")]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "dataset,mdice,miou,params_m,gflops");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = [0u8, 1, 1, 0, 1, 0];
        write_mask_png(&mask, 2, 3, &path).unwrap();
        let (back, h, w) = read_mask_png(&path).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, mask);
    }

    #[test]
    fn overlay_width_depends_on_gt() {
        let input = RgbImage::new(4, 3);
        let pred = GrayImage::new(4, 3);
        assert_eq!(overlay_image(&input, None, &pred).dimensions(), (8, 3));
        assert_eq!(overlay_image(&input, Some(&pred), &pred).dimensions(), (12, 3));
    }

    #[test]
    fn curve_draws_something() {
        let record = RunRecord {
            epochs: (1..=5)
                .map(|e| EpochRecord {
                    epoch: e,
                    guide: 0.1,
                    seg: 1.0 / e as f64,
                    total: 0.1 + 1.0 / e as f64,
                    val_mdice: None,
                    val_miou: None,
                    wall_time: 0.0,
                })
                .collect(),
            steps: vec![],
        };
        let img = loss_curve_image(&record);
        assert!(img.pixels().any(|p| p.0 == [0, 0, 0]));
    }
}
