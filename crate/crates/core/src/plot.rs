//! PNG charts for CMC curves, occlusion sweeps and k-fold box plots.
//!
//! Plots carry axes and 10% gridlines only; values are in the CSV reports.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::evaluation::{KfoldResult, SweepReport};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 32;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([40, 90, 200]);
const RED: Rgb<u8> = Rgb([200, 50, 40]);

/// Plot area with a y range of 0..=100 and `slots` evenly spaced x positions.
struct Canvas {
    img: RgbImage,
    slots: usize,
}

impl Canvas {
    fn new(slots: usize) -> Self {
        let mut img = RgbImage::from_pixel(W, H, WHITE);
        for i in 0..=10 {
            let y = Self::y_of(i as f64 * 10.0);
            for x in MARGIN..W - MARGIN / 2 {
                img.put_pixel(x, y, GRID);
            }
        }
        let mut c = Self { img, slots: slots.max(1) };
        c.line((MARGIN, MARGIN / 2), (MARGIN, H - MARGIN), AXIS);
        c.line((MARGIN, H - MARGIN), (W - MARGIN / 2, H - MARGIN), AXIS);
        c
    }

    fn y_of(v: f64) -> u32 {
        let span = (H - MARGIN - MARGIN / 2) as f64;
        (H - MARGIN) - (v.clamp(0.0, 100.0) / 100.0 * span).round() as u32
    }

    fn slot_width(&self) -> f64 {
        (W - MARGIN - MARGIN / 2) as f64 / self.slots as f64
    }

    /// Centre x of slot `i`.
    fn x_of(&self, i: usize) -> u32 {
        MARGIN + ((i as f64 + 0.5) * self.slot_width()).round() as u32
    }

    fn line(&mut self, a: (u32, u32), b: (u32, u32), color: Rgb<u8>) {
        let (mut x, mut y) = (a.0 as i64, a.1 as i64);
        let (x1, y1) = (b.0 as i64, b.1 as i64);
        let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
        let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
                self.img.put_pixel(x as u32, y as u32, color);
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

    fn rect(&mut self, x0: u32, x1: u32, y0: u32, y1: u32, color: Rgb<u8>) {
        for x in x0.min(x1)..=x0.max(x1) {
            for y in y0.min(y1)..=y0.max(y1) {
                self.img.put_pixel(x, y, color);
            }
        }
    }

    fn dot(&mut self, x: u32, y: u32, color: Rgb<u8>) {
        self.rect(x.saturating_sub(2), x + 2, y.saturating_sub(2), y + 2, color);
    }

    fn save(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        self.img
            .save(path)
            .map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))
    }
}

/// Accuracy (%) against rank as a polyline.
pub fn plot_cmc(curve: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut c = Canvas::new(curve.len());
    let pts: Vec<(u32, u32)> = curve
        .iter()
        .enumerate()
        .map(|(i, (_, acc))| (c.x_of(i), Canvas::y_of(*acc)))
        .collect();
    for w in pts.windows(2) {
        c.line(w[0], w[1], BLUE);
    }
    for p in pts {
        c.dot(p.0, p.1, BLUE);
    }
    c.save(path)
}

/// One bar per occlusion bucket; the unoccluded baseline is a red line.
pub fn plot_sweep(report: &SweepReport, path: &Path) -> Result<()> {
    let mut c = Canvas::new(report.rows.len());
    let half = (c.slot_width() * 0.35).max(1.0) as u32;
    for (i, row) in report.rows.iter().enumerate() {
        if let Some(acc) = row.accuracy {
            let x = c.x_of(i);
            c.rect(x - half, x + half, Canvas::y_of(acc), H - MARGIN - 1, BLUE);
        }
    }
    if let Some(b) = report.baseline {
        let y = Canvas::y_of(b);
        c.line((MARGIN + 1, y), (W - MARGIN / 2, y), RED);
    }
    c.save(path)
}

/// Box (quartiles) and whiskers (min/max) of fold accuracies per k.
pub fn plot_kfold(results: &[KfoldResult], path: &Path) -> Result<()> {
    let mut c = Canvas::new(results.len());
    let half = (c.slot_width() * 0.25).max(1.0) as u32;
    for (i, r) in results.iter().enumerate() {
        let q = &r.quartiles;
        let x = c.x_of(i);
        c.line((x, Canvas::y_of(q.min)), (x, Canvas::y_of(q.max)), AXIS);
        c.rect(x - half, x + half, Canvas::y_of(q.q1), Canvas::y_of(q.q3), BLUE);
        let m = Canvas::y_of(q.median);
        c.line((x - half, m), (x + half, m), RED);
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{Buckets, Quartiles, SweepRow};

    #[test]
    fn plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        plot_cmc(&[(1, 50.0), (2, 75.0), (3, 100.0)], &dir.path().join("cmc.png")).unwrap();
        let report = SweepReport {
            buckets: Buckets::tenths(),
            rows: vec![
                SweepRow {
                    lo: 0.0,
                    hi: 0.1,
                    count: 3,
                    accuracy: Some(90.0),
                },
                SweepRow {
                    lo: 0.1,
                    hi: 0.2,
                    count: 0,
                    accuracy: None,
                },
            ],
            baseline: Some(95.0),
        };
        plot_sweep(&report, &dir.path().join("sweep.png")).unwrap();
        let accs = vec![80.0, 90.0, 100.0];
        let kf = KfoldResult {
            k: 3,
            train_fraction: 2.0 / 3.0,
            quartiles: Quartiles::of(&accs),
            accuracies: accs,
        };
        plot_kfold(&[kf], &dir.path().join("kfold.png")).unwrap();
        let img = image::open(dir.path().join("sweep.png")).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|p| *p == BLUE));
        assert!(img.pixels().any(|p| *p == RED));
    }
}
