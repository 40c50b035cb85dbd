use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceOrigin {
    IdxFile,
    CifarBinary,
    SyntheticGenerator,
}

/// Procedural class families for [`synth_patterns`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternStyle {
    /// Sinusoidal gratings; the class sets the orientation.
    Stripes,
    /// Checkerboards; the class sets the spatial frequency.
    Checker,
}

/// Labelled single-factor image collection, pixels scaled to `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSource {
    pub name: String,
    pub origin: SourceOrigin,
    item_shape: Vec<usize>,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    class_index: Vec<Vec<usize>>,
}

impl FactorSource {
    /// Validates that every class in `0..classes` has at least one item.
    pub fn new(
        name: impl Into<String>,
        origin: SourceOrigin,
        item_shape: Vec<usize>,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        let item_len: usize = item_shape.iter().product();
        if item_len == 0 || pixels.len() != item_len * labels.len() {
            return Err(Error::Data(format!(
                "{name}: {} pixels do not form {} items of shape {item_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        let mut class_index = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Data(format!(
                    "{name}: label {y} at item {i} out of range for {classes} classes"
                )));
            }
            class_index[y].push(i);
        }
        if let Some(empty) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("{name}: class {empty} has no items")));
        }
        Ok(Self {
            name,
            origin,
            item_shape,
            pixels,
            labels,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let w = self.item_len();
        &self.pixels[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_items(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    /// Hex SHA-256 over the item shape, labels and pixel values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.item_shape {
            h.update((*d as u64).to_le_bytes());
        }
        for y in &self.labels {
            h.update((*y as u64).to_le_bytes());
        }
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Nearest-neighbour spatial rescale to `target = [H, W]` or `[H, W, C]`,
    /// broadcasting single-channel images across colour channels.
    pub fn conformed(&self, target: &[usize]) -> Result<FactorSource> {
        if self.item_shape == target {
            return Ok(self.clone());
        }
        let (sh, sw, sc) = hwc(&self.item_shape)?;
        let (th, tw, tc) = hwc(target)?;
        if sc != tc && sc != 1 {
            return Err(Error::Data(format!(
                "{}: cannot map {sc} channels onto {tc}",
                self.name
            )));
        }
        let out_len = th * tw * tc;
        let mut pixels = Vec::with_capacity(out_len * self.len());
        for i in 0..self.len() {
            let src = self.item(i);
            for y in 0..th {
                let sy = y * sh / th;
                for x in 0..tw {
                    let sx = x * sw / tw;
                    for c in 0..tc {
                        let c_src = if sc == 1 { 0 } else { c };
                        pixels.push(src[(sy * sw + sx) * sc + c_src]);
                    }
                }
            }
        }
        FactorSource::new(
            self.name.clone(),
            self.origin,
            target.to_vec(),
            pixels,
            self.labels.clone(),
            self.classes(),
        )
    }
}

fn hwc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Validation(format!(
            "expected an [H, W] or [H, W, C] image shape, got {shape:?}"
        ))),
    }
}

fn scale_byte(b: u8) -> f64 {
    b as f64 / 255.0 - 0.5
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated header, needed 4 bytes at {offset}"),
        })
}

/// Parsed IDX payload (unsigned-byte element type only).
struct IdxArray {
    dims: Vec<usize>,
    data_offset: usize,
}

fn parse_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    let found = read_u32_be(bytes, 0)?;
    if found != magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32_be(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let data_offset = 4 + 4 * rank;
    let needed: usize = dims.iter().product();
    if bytes.len() != data_offset + needed {
        return Err(Error::Parse {
            offset: bytes.len().min(data_offset + needed),
            message: format!(
                "payload is {} bytes, header dims {dims:?} need {needed}",
                bytes.len().saturating_sub(data_offset)
            ),
        });
    }
    Ok(IdxArray { dims, data_offset })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file (magic `0x00000803`) with its label file
/// (magic `0x00000801`). Any malformation fails the whole load.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<FactorSource> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let img = parse_idx(&img_bytes, IDX_IMAGES_MAGIC)?;
    let lbl = parse_idx(&lbl_bytes, IDX_LABELS_MAGIC)?;
    if img.dims[0] != lbl.dims[0] {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{} images but {} labels", img.dims[0], lbl.dims[0]),
        });
    }
    let pixels = img_bytes[img.data_offset..].iter().map(|&b| scale_byte(b)).collect();
    let ys = lbl_bytes[lbl.data_offset..].iter().map(|&b| b as usize).collect();
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FactorSource::new(
        name,
        SourceOrigin::IdxFile,
        img.dims[1..].to_vec(),
        pixels,
        ys,
        classes,
    )
}

/// Loads one or more CIFAR-10 binary batches (3073-byte records: label,
/// then 1024 red, 1024 green and 1024 blue bytes) as `32×32×3` items.
pub fn load_cifar_binary(paths: &[&Path]) -> Result<FactorSource> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Parse {
                offset: bytes.len() - bytes.len() % CIFAR_RECORD,
                message: format!(
                    "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                    path.display(),
                    bytes.len()
                ),
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Parse {
                    offset: r * CIFAR_RECORD,
                    message: format!("label byte {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            let planes = &rec[1..];
            for p in 0..plane {
                for c in 0..3 {
                    pixels.push(scale_byte(planes[c * plane + p]));
                }
            }
        }
    }
    let name = paths
        .first()
        .and_then(|p| p.parent())
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar".into());
    FactorSource::new(
        name,
        SourceOrigin::CifarBinary,
        vec![CIFAR_SIDE, CIFAR_SIDE, 3],
        pixels,
        labels,
        10,
    )
}

/// Generates `classes` procedural classes with `per_class` items each.
/// Every item has a random phase and additive noise, so a class is a
/// distribution rather than a template. Colour shapes (`[H, W, 3]`) get a
/// random per-item tint that carries no class information.
pub fn synth_patterns<R: Rng + ?Sized>(
    style: PatternStyle,
    classes: usize,
    per_class: usize,
    shape: &[usize],
    rng: &mut R,
) -> Result<FactorSource> {
    let (h, w, c) = hwc(shape)?;
    if classes == 0 || per_class == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Validation(format!(
            "synth_patterns needs positive sizes, got {classes} classes x {per_class} of {shape:?}"
        )));
    }
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut pixels = Vec::with_capacity(classes * per_class * h * w * c);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut gray = vec![0.0; h * w];
    for class in 0..classes {
        for _ in 0..per_class {
            let phase_a = rng.random_range(0.0..2.0 * PI);
            let phase_b = rng.random_range(0.0..2.0 * PI);
            for y in 0..h {
                let fy = y as f64 / h as f64;
                for x in 0..w {
                    let fx = x as f64 / w as f64;
                    gray[y * w + x] = match style {
                        PatternStyle::Stripes => {
                            let theta = PI * class as f64 / classes as f64;
                            let u = theta.cos() * fx + theta.sin() * fy;
                            (2.0 * PI * 3.0 * u + phase_a).sin()
                        }
                        PatternStyle::Checker => {
                            let f = 1.0 + 6.0 * class as f64 / classes as f64;
                            let s = (2.0 * PI * f * fx + phase_a).sin()
                                * (2.0 * PI * f * fy + phase_b).sin();
                            if s >= 0.0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    };
                }
            }
            let tint: Vec<f64> = if c == 1 {
                vec![1.0]
            } else {
                (0..c).map(|_| rng.random_range(0.5..=1.0)).collect()
            };
            for &g in &gray {
                for t in &tint {
                    let v = 0.4 * g * t + noise.sample(rng);
                    pixels.push(0.5 * v.clamp(-1.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let name = match style {
        PatternStyle::Stripes => "synthetic-stripes",
        PatternStyle::Checker => "synthetic-checker",
    };
    FactorSource::new(
        name,
        SourceOrigin::SyntheticGenerator,
        shape.to_vec(),
        pixels,
        labels,
        classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_bytes(0x803, &[2, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 0])).unwrap();
        fs::write(&lbl, idx_bytes(0x801, &[2], &[1, 0])).unwrap();
        let s = load_idx(&img, &lbl, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.item_shape(), &[2, 2]);
        assert_eq!(s.item(0)[0], -0.5);
        assert_eq!(s.item(0)[1], 0.5);
        assert_eq!(s.label(0), 1);
        assert_eq!(s.origin, SourceOrigin::IdxFile);
    }

    #[test]
    fn idx_truncated_and_bad_magic_fail() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_bytes(0x803, &[2, 2, 2], &[0; 7])).unwrap();
        fs::write(&lbl, idx_bytes(0x801, &[2], &[1, 0])).unwrap();
        match load_idx(&img, &lbl, 2) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&img, idx_bytes(0x801, &[2], &[0; 2])).unwrap();
        assert!(matches!(load_idx(&img, &lbl, 2), Err(Error::Parse { offset: 0, .. })));
        fs::write(&img, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&img, &lbl, 2), Err(Error::Parse { .. })));
    }

    #[test]
    fn cifar_records_become_hwc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 1024));
        let mut all = Vec::new();
        for y in 0..10u8 {
            rec[0] = y;
            all.extend_from_slice(&rec);
        }
        fs::write(&path, &all).unwrap();
        let s = load_cifar_binary(&[&path]).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.item_shape(), &[32, 32, 3]);
        assert_eq!(&s.item(3)[..3], &[0.5, -0.5, -0.5]);

        fs::write(&path, &all[..all.len() - 1]).unwrap();
        assert!(matches!(load_cifar_binary(&[&path]), Err(Error::Parse { .. })));
    }

    #[test]
    fn synth_patterns_counts_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = synth_patterns(PatternStyle::Stripes, 10, 50, &[28, 28], &mut rng).unwrap();
        for c in 0..10 {
            assert_eq!(s.class_items(c).len(), 50);
        }
        assert!(s.pixels.iter().all(|v| (-0.5..=0.5).contains(v)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = synth_patterns(PatternStyle::Stripes, 10, 50, &[28, 28], &mut rng).unwrap();
        assert_eq!(s.checksum(), t.checksum());
    }

    #[test]
    fn empty_class_is_rejected() {
        let e = FactorSource::new("x", SourceOrigin::IdxFile, vec![1], vec![0.0, 0.0], vec![0, 0], 2);
        assert!(matches!(e, Err(Error::Data(m)) if m.contains("class 1")));
    }

    #[test]
    fn conform_broadcasts_gray_and_rescales() {
        let s = FactorSource::new(
            "g",
            SourceOrigin::SyntheticGenerator,
            vec![2, 2],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0],
            1,
        )
        .unwrap();
        let c = s.conformed(&[4, 4, 3]).unwrap();
        assert_eq!(c.item_shape(), &[4, 4, 3]);
        assert_eq!(&c.item(0)[..6], &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(&c.item(0)[6..9], &[0.2, 0.2, 0.2]);
        assert_eq!(&c.item(0)[45..48], &[0.4, 0.4, 0.4]);
    }
}
