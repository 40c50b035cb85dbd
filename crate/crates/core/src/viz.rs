//! Decision-region rasters for 2-D inputs and binary PPM output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::tensor::Tensor;
use crate::Combo;

pub type Rgb = [u8; 3];

pub const ORANGE: Rgb = [255, 165, 0];
pub const WHITE: Rgb = [255, 255, 255];
pub const BLUE: Rgb = [0, 0, 255];
pub const BLACK: Rgb = [0, 0, 0];

/// Factor panels color label `c` with `PALETTE[c % 10]`.
pub const PALETTE: [Rgb; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let ok = [xmin, xmax, ymin, ymax].iter().all(|v| v.is_finite()) && xmin < xmax && ymin < ymax;
        if !ok {
            return Err(Error::Validation(format!(
                "degenerate bounds x [{xmin}, {xmax}] y [{ymin}, {ymax}]"
            )));
        }
        Ok(Self { xmin, xmax, ymin, ymax })
    }

    /// Bounding box of 2-D points grown by `margin` of its extent per side.
    pub fn around(points: &[f64], margin: f64) -> Result<Self> {
        if points.len() < 2 || !points.len().is_multiple_of(2) {
            return Err(Error::Validation("bounds need at least one 2-D point".into()));
        }
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points.chunks_exact(2) {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        let (dx, dy) = ((xmax - xmin) * margin, (ymax - ymin) * margin);
        Self::new(xmin - dx, xmax + dx, ymin - dy, ymax + dy)
    }

    /// Center of cell `(col, row)`; row 0 is the top edge.
    pub fn cell_center(&self, col: usize, row: usize, width: usize, height: usize) -> (f64, f64) {
        let x = self.xmin + (col as f64 + 0.5) * (self.xmax - self.xmin) / width as f64;
        let y = self.ymax - (row as f64 + 0.5) * (self.ymax - self.ymin) / height as f64;
        (x, y)
    }

    /// Cell containing `(x, y)`, if inside.
    pub fn cell_of(&self, x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize)> {
        if !(self.xmin..self.xmax).contains(&x) || !(self.ymin..self.ymax).contains(&y) {
            return None;
        }
        let col = ((x - self.xmin) / (self.xmax - self.xmin) * width as f64) as usize;
        let row = ((self.ymax - y) / (self.ymax - self.ymin) * height as f64) as usize;
        Some((col.min(width - 1), row.min(height - 1)))
    }
}

/// Predicted label tuple at every cell center, row-major from the top.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRaster {
    pub width: usize,
    pub height: usize,
    pub bounds: Bounds,
    pub cells: Vec<Combo>,
}

impl LabelRaster {
    pub fn cell(&self, col: usize, row: usize) -> &Combo {
        &self.cells[row * self.width + col]
    }
}

pub fn rasterize(
    clf: &dyn Classifier,
    bounds: Bounds,
    width: usize,
    height: usize,
) -> Result<LabelRaster> {
    if width < 2 || height < 2 {
        return Err(Error::Validation(format!(
            "raster resolution must be at least 2x2, got {width}x{height}"
        )));
    }
    let bounds = Bounds::new(bounds.xmin, bounds.xmax, bounds.ymin, bounds.ymax)?;
    let mut centers = Vec::with_capacity(2 * width * height);
    for row in 0..height {
        for col in 0..width {
            let (x, y) = bounds.cell_center(col, row, width, height);
            centers.extend([x, y]);
        }
    }
    let cells = clf.predict(&Tensor::new(vec![width * height, 2], centers)?)?;
    Ok(LabelRaster {
        width,
        height,
        bounds,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl ColorRaster {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn count(&self, color: Rgb) -> usize {
        self.pixels.iter().filter(|&&p| p == color).count()
    }
}

fn matches(cell: &[usize], new_combo: &[usize]) -> usize {
    cell.iter().zip(new_combo).filter(|(a, b)| a == b).count()
}

fn check_arity(raster: &LabelRaster, new_combo: &[usize]) -> Result<()> {
    if let Some(c) = raster.cells.iter().find(|c| c.len() != new_combo.len()) {
        return Err(Error::Validation(format!(
            "raster tuple {c:?} and combination {new_combo:?} differ in arity"
        )));
    }
    Ok(())
}

/// Orange where no output equals the new combination's value, blue where all
/// do, white in between.
pub fn result_panel(raster: &LabelRaster, new_combo: &[usize]) -> Result<ColorRaster> {
    check_arity(raster, new_combo)?;
    let pixels = raster
        .cells
        .iter()
        .map(|c| match matches(c, new_combo) {
            0 => ORANGE,
            k if k == new_combo.len() => BLUE,
            _ => WHITE,
        })
        .collect();
    Ok(ColorRaster {
        width: raster.width,
        height: raster.height,
        pixels,
    })
}

/// Fraction of cells predicting `new_combo` in every output.
pub fn blue_area_fraction(raster: &LabelRaster, new_combo: &[usize]) -> Result<f64> {
    check_arity(raster, new_combo)?;
    let blue = raster.cells.iter().filter(|c| c.as_slice() == new_combo).count();
    Ok(blue as f64 / raster.cells.len() as f64)
}

/// One output of the raster in palette colors.
pub fn factor_panel(raster: &LabelRaster, factor: usize) -> Result<ColorRaster> {
    let pixels = raster
        .cells
        .iter()
        .map(|c| {
            c.get(factor)
                .map(|&v| PALETTE[v % PALETTE.len()])
                .ok_or_else(|| Error::Validation(format!("no output {factor} in tuple {c:?}")))
        })
        .collect::<Result<_>>()?;
    Ok(ColorRaster {
        width: raster.width,
        height: raster.height,
        pixels,
    })
}

/// Marks each 2-D point with a single pixel.
pub fn mark_points(panel: &mut ColorRaster, bounds: &Bounds, points: &[f64], color: Rgb) {
    for p in points.chunks_exact(2) {
        if let Some((col, row)) = bounds.cell_of(p[0], p[1], panel.width, panel.height) {
            panel.pixels[row * panel.width + col] = color;
        }
    }
}

pub fn encode_ppm(raster: &ColorRaster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.reserve(3 * raster.pixels.len());
    for p in &raster.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn write_ppm(raster: &ColorRaster, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(raster)).map_err(|e| Error::io(path, e))
}

/// Parses the header layout [`encode_ppm`] emits: three whitespace-separated
/// fields after the magic, maxval 255, then a single whitespace byte.
pub fn decode_ppm(bytes: &[u8]) -> Result<ColorRaster> {
    let mut pos = 0;
    let field = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse {
                offset: start,
                message: "truncated PPM header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = field(&mut pos)?;
    if magic != "P6" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected P6 magic, found {magic:?}"),
        });
    }
    let mut nums = [0usize; 3];
    for n in &mut nums {
        let at = pos;
        *n = field(&mut pos)?.parse().map_err(|_| Error::Parse {
            offset: at,
            message: "bad PPM header number".into(),
        })?;
    }
    let [width, height, maxval] = nums;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: pos,
            message: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("pixel data needs {need} bytes"),
        });
    }
    let pixels = bytes[pos..pos + need]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(ColorRaster {
        width,
        height,
        pixels,
    })
}

pub fn read_ppm(path: &Path) -> Result<ColorRaster> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ClassifierHandle;

    fn unit() -> Bounds {
        Bounds::new(-1.0, 1.0, -1.0, 1.0).unwrap()
    }

    #[test]
    fn constant_predictor_uniform_raster() {
        let c = ClassifierHandle::from_fn("c", |_| vec![1, 0]);
        let r = rasterize(&c, unit(), 7, 5).unwrap();
        assert_eq!(r.cells.len(), 35);
        assert!(r.cells.iter().all(|x| x == &vec![1, 0]));
    }

    #[test]
    fn sign_predictor_splits_halves() {
        let c = ClassifierHandle::from_fn("sign", |x| vec![usize::from(x[0] > 0.0)]);
        let r = rasterize(&c, unit(), 4, 2).unwrap();
        assert_eq!(r.cell(0, 0), &vec![0]);
        assert_eq!(r.cell(1, 1), &vec![0]);
        assert_eq!(r.cell(2, 0), &vec![1]);
        assert_eq!(r.cell(3, 1), &vec![1]);
    }

    #[test]
    fn cell_centers_and_top_row() {
        let b = unit();
        assert_eq!(b.cell_center(0, 0, 2, 2), (-0.5, 0.5));
        assert_eq!(b.cell_center(1, 1, 2, 2), (0.5, -0.5));
        assert_eq!(b.cell_of(-0.5, 0.5, 2, 2), Some((0, 0)));
    }

    #[test]
    fn bad_bounds_and_resolution() {
        assert!(Bounds::new(1.0, 1.0, 0.0, 1.0).is_err());
        let c = ClassifierHandle::from_fn("c", |_| vec![0]);
        assert!(rasterize(&c, unit(), 1, 5).is_err());
    }

    #[test]
    fn result_panel_colors() {
        let c = ClassifierHandle::from_fn("c", |x| vec![usize::from(x[0] > 0.0), usize::from(x[1] < 0.0)]);
        let r = rasterize(&c, unit(), 2, 2).unwrap();
        let p = result_panel(&r, &[1, 1]).unwrap();
        // Top-left (0,0) orange, top-right (1,0) white, bottom-left (0,1) white, bottom-right (1,1) blue.
        assert_eq!(p.pixels, vec![ORANGE, WHITE, WHITE, BLUE]);
        assert_eq!(blue_area_fraction(&r, &[1, 1]).unwrap(), 0.25);
        assert!(result_panel(&r, &[1]).is_err());
    }

    #[test]
    fn all_blue_and_all_orange() {
        let c = ClassifierHandle::from_fn("c", |_| vec![1, 1]);
        let r = rasterize(&c, unit(), 3, 3).unwrap();
        assert_eq!(result_panel(&r, &[1, 1]).unwrap().count(BLUE), 9);
        assert_eq!(blue_area_fraction(&r, &[1, 1]).unwrap(), 1.0);
        assert_eq!(result_panel(&r, &[0, 0]).unwrap().count(ORANGE), 9);
        assert_eq!(blue_area_fraction(&r, &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn ppm_bytes_exact() {
        let bytes = encode_ppm(&ColorRaster::filled(2, 1, WHITE));
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0xFF));
        assert_eq!(bytes.len(), 11 + 6);
    }

    #[test]
    fn ppm_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ppm");
        let mut r = ColorRaster::filled(200, 200, ORANGE);
        r.pixels[12345] = BLUE;
        write_ppm(&r, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 15 + 120_000);
        assert_eq!(read_ppm(&path).unwrap(), r);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn factor_panel_palette() {
        let c = ClassifierHandle::from_fn("c", |x| vec![usize::from(x[0] > 0.0) * 11]);
        let r = rasterize(&c, unit(), 2, 2).unwrap();
        let p = factor_panel(&r, 0).unwrap();
        assert_eq!(p.pixels[0], PALETTE[0]);
        assert_eq!(p.pixels[1], PALETTE[1]);
        assert!(factor_panel(&r, 1).is_err());
    }
}
