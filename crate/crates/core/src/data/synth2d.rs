//! Two-factor toy data in the plane.
//!
//! Both factors are binary and the held-out combination is always `[1, 1]`,
//! so the tile split over 2×2 classes describes every case. For the blob
//! cases factor 1 is `x > 0` and factor 2 is `y < 0`: the unseen quadrant is
//! the lower right one. For `spiral-xor` factor 1 is the spiral arm and
//! factor 2 the quadrant rule.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelSplit, MergeMode, PairDataset, Role, SplitScheme};
use crate::error::{Error, Result};
use crate::Combo;

/// Factor-2 class of points whose coordinates share a sign (`x·y ≥ 0`).
pub const SAME_SIGN: usize = 0;
pub const OPPOSITE_SIGN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synth2dCase {
    BlobsA,
    BlobsB,
    BlobsC,
    BlobsD,
    SpiralXor,
}

impl Synth2dCase {
    pub const ALL: [Synth2dCase; 5] = [
        Synth2dCase::BlobsA,
        Synth2dCase::BlobsB,
        Synth2dCase::BlobsC,
        Synth2dCase::BlobsD,
        Synth2dCase::SpiralXor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Synth2dCase::BlobsA => "blobs-a",
            Synth2dCase::BlobsB => "blobs-b",
            Synth2dCase::BlobsC => "blobs-c",
            Synth2dCase::BlobsD => "blobs-d",
            Synth2dCase::SpiralXor => "spiral-xor",
        }
    }

    /// Cluster centers in the upper-right quadrant with their spread; the
    /// other quadrants are mirror images.
    fn clusters(self) -> &'static [((f64, f64), f64)] {
        match self {
            Synth2dCase::BlobsA => &[((0.5, 0.5), 0.2)],
            Synth2dCase::BlobsB => &[((0.3, 0.7), 0.12), ((0.7, 0.3), 0.12)],
            Synth2dCase::BlobsC => &[((0.15, 0.5), 0.1), ((0.5, 0.15), 0.1)],
            Synth2dCase::BlobsD => &[((0.75, 0.75), 0.1)],
            Synth2dCase::SpiralXor => &[],
        }
    }
}

impl fmt::Display for Synth2dCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Synth2dCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Synth2dCase::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown 2-D case '{s}'")))
    }
}

/// The label split shared by every 2-D case: `[1, 1]` is held out.
pub fn synth2d_split() -> LabelSplit {
    LabelSplit::new(SplitScheme::Tile, 2, 2).expect("2x2 tile split is valid")
}

/// Quadrant labelling of the blob cases.
pub fn blob_labels(x: f64, y: f64) -> Combo {
    vec![usize::from(x > 0.0), usize::from(y < 0.0)]
}

pub fn quadrant_class(x: f64, y: f64) -> usize {
    if x * y >= 0.0 {
        SAME_SIGN
    } else {
        OPPOSITE_SIGN
    }
}

/// `n` points of `case` whose labels lie in the role's combination set.
pub fn synth2d<R: Rng + ?Sized>(
    case: Synth2dCase,
    role: Role,
    n: usize,
    rng: &mut R,
) -> Result<PairDataset> {
    if n == 0 {
        return Err(Error::Validation("synth2d needs n >= 1".into()));
    }
    let split = synth2d_split();
    let allowed = split.combos(role).clone();
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    match case {
        Synth2dCase::SpiralXor => {
            let noise = Normal::new(0.0, 0.02).expect("valid sd");
            while labels.len() < n {
                let arm = rng.random_range(0..2usize);
                let theta = rng.random_range(0.0..=3.0 * std::f64::consts::PI);
                let r = theta / (3.0 * std::f64::consts::PI);
                let phase = theta + arm as f64 * std::f64::consts::PI;
                let x = (r * phase.cos() + noise.sample(rng)).clamp(-1.0, 1.0);
                let y = (r * phase.sin() + noise.sample(rng)).clamp(-1.0, 1.0);
                let combo = vec![arm, quadrant_class(x, y)];
                if allowed.contains(&combo) {
                    inputs.extend([x, y]);
                    labels.push(combo);
                }
            }
        }
        _ => {
            let combos: Vec<&Combo> = allowed.iter().collect();
            let clusters = case.clusters();
            while labels.len() < n {
                let combo = combos[rng.random_range(0..combos.len())];
                let (sx, sy) = (
                    if combo[0] == 1 { 1.0 } else { -1.0 },
                    if combo[1] == 1 { -1.0 } else { 1.0 },
                );
                let ((cx, cy), sd) = clusters[rng.random_range(0..clusters.len())];
                let normal = Normal::new(0.0, sd).expect("valid sd");
                // Rejection keeps each cluster inside its quadrant.
                loop {
                    let x = sx * cx + normal.sample(rng);
                    let y = sy * cy + normal.sample(rng);
                    if x.abs() <= 1.0 && y.abs() <= 1.0 && blob_labels(x, y) == *combo {
                        inputs.extend([x, y]);
                        labels.push(combo.clone());
                        break;
                    }
                }
            }
        }
    }
    PairDataset::new(split, MergeMode::Coords, role, vec![2], inputs, labels)
}
