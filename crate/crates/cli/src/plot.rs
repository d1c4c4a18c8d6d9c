//! Raster figures: matrix heatmaps and training curves.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};
use crate::stages::{read_diagnostics, Workspace};

const CELL: u32 = 24;
const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 32;

/// One written figure and the number of data points it shows.
#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub path: PathBuf,
    pub points: usize,
}

/// Five-stop perceptual ramp from dark purple to yellow.
fn ramp(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| tgr_core::Error::Image {
            path: path.display().to_string(),
            source,
        })?;
    tgr_core::io::write_atomic(path, &bytes)?;
    Ok(())
}

/// `n × n` heatmap on a fixed [0, 1] scale.
pub fn heatmap(values: &[f64], n: usize, path: &Path) -> CliResult<Figure> {
    if n == 0 || values.len() != n * n {
        return Err(CliError::Config(format!("heatmap needs {n}×{n} values, got {}", values.len())));
    }
    let mut img = RgbImage::new(n as u32 * CELL, n as u32 * CELL);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = ramp(values[(y / CELL) as usize * n + (x / CELL) as usize]);
    }
    save(&img, path)?;
    Ok(Figure {
        path: path.to_path_buf(),
        points: n * n,
    })
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
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

/// Polyline with square markers over auto-scaled axes.
pub fn line_chart(points: &[(f64, f64)], path: &Path) -> CliResult<Figure> {
    if points.is_empty() {
        return Err(CliError::Config(format!("no points for {}", path.display())));
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([40, 40, 40]);
    let (l, r, t, b) = (MARGIN as i64, (WIDTH - MARGIN) as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64);
    draw_line(&mut img, (l, b), (r, b), axis);
    draw_line(&mut img, (l, t), (l, b), axis);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = span(finite.iter().map(|p| p.0).collect());
    let (y0, y1) = span(finite.iter().map(|p| p.1).collect());
    let to_px = |(x, y): (f64, f64)| {
        (
            l + ((x - x0) / (x1 - x0) * (r - l) as f64).round() as i64,
            b - ((y - y0) / (y1 - y0) * (b - t) as f64).round() as i64,
        )
    };
    let color = Rgb([31, 119, 180]);
    let px: Vec<(i64, i64)> = finite.iter().map(|&p| to_px(p)).collect();
    for pair in px.windows(2) {
        draw_line(&mut img, pair[0], pair[1], color);
    }
    for &(x, y) in &px {
        for dx in -1..=1 {
            for dy in -1..=1 {
                draw_line(&mut img, (x + dx, y + dy), (x + dx, y + dy), color);
            }
        }
    }
    save(&img, path)?;
    Ok(Figure {
        path: path.to_path_buf(),
        points: finite.len(),
    })
}

fn read_matrix(path: &Path) -> CliResult<(usize, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| tgr_core::Error::io(path.display().to_string(), e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        for cell in line.split(',') {
            values.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{}: bad entry {cell:?}", path.display())))?,
            );
        }
        rows += 1;
    }
    if values.len() != rows * rows {
        return Err(CliError::Config(format!("{} is not square", path.display())));
    }
    Ok((rows, values))
}

/// Every figure whose inputs exist; diagnostics are required.
pub fn plot(ws: &Workspace) -> CliResult<Vec<Figure>> {
    let diag = read_diagnostics(ws)?;
    if diag.rows.is_empty() {
        return Err(CliError::Config("diagnostics.csv has no rows".into()));
    }
    let mut figures = vec![
        line_chart(
            &diag.rows.iter().map(|r| (r.epoch as f64, r.regularizer)).collect::<Vec<_>>(),
            &ws.path("regularizer.png"),
        )?,
        line_chart(
            &diag.rows.iter().map(|r| (r.epoch as f64, r.mean_cosine)).collect::<Vec<_>>(),
            &ws.path("cosine.png"),
        )?,
    ];
    for (csv, png) in [("W.csv", "W.png"), ("cka.csv", "cka.png")] {
        let path = ws.path(csv);
        if path.exists() {
            let (n, values) = read_matrix(&path)?;
            figures.push(heatmap(&values, n, &ws.path(png))?);
        }
    }
    let sweep = ws.path("sweep.csv");
    if sweep.exists() {
        let text = std::fs::read_to_string(&sweep).map_err(|e| tgr_core::Error::io(sweep.display().to_string(), e))?;
        let points = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split(',').map(|c| c.trim().parse::<f64>());
                match (it.next(), it.next()) {
                    (Some(Ok(x)), Some(Ok(y))) => Ok((x, y)),
                    _ => Err(CliError::Config(format!("sweep.csv: bad row {l:?}"))),
                }
            })
            .collect::<CliResult<Vec<_>>>()?;
        figures.push(line_chart(&points, &ws.path("accuracy_vs_models.png"))?);
    }
    Ok(figures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), Rgb([68, 1, 84]));
        assert_eq!(ramp(1.0), Rgb([253, 231, 37]));
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }

    #[test]
    fn heatmap_size_matches_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        heatmap(&[0.0, 0.5, 0.5, 0.0], 2, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2 * CELL, 2 * CELL));
        assert!(heatmap(&[0.0; 3], 2, &path).is_err());
    }
}
