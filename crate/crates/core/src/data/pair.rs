use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FactorSource, LabelSplit, SplitScheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Combo;

/// How the two factor inputs are combined into one network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// Elementwise mean of equally shaped inputs.
    Average,
    /// Stack along the channel axis: `H×W×Ca` and `H×W×Cb` give `H×W×(Ca+Cb)`.
    ChannelConcat,
    /// The input already is a point in the plane (2-D toy data).
    Coords,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Test,
}

/// Merged inputs with their label tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub split: LabelSplit,
    pub merge_mode: MergeMode,
    pub role: Role,
    input_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<Combo>,
}

impl PairDataset {
    pub fn new(
        split: LabelSplit,
        merge_mode: MergeMode,
        role: Role,
        input_shape: Vec<usize>,
        inputs: Vec<f64>,
        labels: Vec<Combo>,
    ) -> Result<Self> {
        let w: usize = input_shape.iter().product();
        if w == 0 || inputs.len() != w * labels.len() {
            return Err(Error::Data(format!(
                "{} values do not form {} inputs of shape {input_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        let allowed = split.combos(role);
        if let Some(bad) = labels.iter().find(|c| !allowed.contains(*c)) {
            return Err(Error::Contract(format!(
                "{role:?} dataset holds label {bad:?} outside its combination set"
            )));
        }
        Ok(Self {
            split,
            merge_mode,
            role,
            input_shape,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.input_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn labels(&self) -> &[Combo] {
        &self.labels
    }

    /// Stacks the selected inputs into a `batch × input_shape` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let w = self.input_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, data)
    }

    /// All inputs as one tensor; `None` when empty.
    pub fn inputs(&self) -> Option<Tensor> {
        if self.is_empty() {
            return None;
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.input_shape);
        Some(Tensor::from_parts(shape, self.inputs.clone()))
    }

    /// First `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> PairDataset {
        let n = n.min(self.len());
        PairDataset {
            split: self.split.clone(),
            merge_mode: self.merge_mode,
            role: self.role,
            input_shape: self.input_shape.clone(),
            inputs: self.inputs[..n * self.input_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn merged_shape(a: &[usize], b: &[usize], mode: MergeMode) -> Result<Vec<usize>> {
    match mode {
        MergeMode::Average => {
            if a != b {
                return Err(Error::dim("average merge", a, b));
            }
            Ok(a.to_vec())
        }
        MergeMode::ChannelConcat => {
            let channels = |s: &[usize]| match *s {
                [h, w] => Ok((h, w, 1)),
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::dim("channel-concat merge", a, b)),
            };
            let (ha, wa, ca) = channels(a)?;
            let (hb, wb, cb) = channels(b)?;
            if (ha, wa) != (hb, wb) {
                return Err(Error::dim("channel-concat merge", a, b));
            }
            Ok(vec![ha, wa, ca + cb])
        }
        MergeMode::Coords => Err(Error::Validation(
            "coords merge applies to 2-D toy data, not image sources".into(),
        )),
    }
}

fn merge_into(out: &mut Vec<f64>, a: &[f64], b: &[f64], shape: &[usize], mode: MergeMode, ca: usize) {
    match mode {
        MergeMode::Average => out.extend(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y))),
        MergeMode::ChannelConcat => {
            let c = shape[2];
            let cb = c - ca;
            for p in 0..shape[0] * shape[1] {
                out.extend_from_slice(&a[p * ca..(p + 1) * ca]);
                out.extend_from_slice(&b[p * cb..(p + 1) * cb]);
            }
        }
        MergeMode::Coords => unreachable!("rejected by merged_shape"),
    }
}

fn pick<R: Rng + ?Sized>(source: &FactorSource, class: usize, rng: &mut R) -> Result<usize> {
    if class >= source.classes() || source.class_items(class).is_empty() {
        return Err(Error::Data(format!(
            "{}: no items for class {class}",
            source.name
        )));
    }
    let items = source.class_items(class);
    Ok(items[rng.random_range(0..items.len())])
}

/// Draws `n` labelled inputs for `role`, with replacement.
///
/// The first label is uniform over the values that have at least one
/// combination in the role's set, the second uniform over the values allowed
/// with it, and each input uniform over the matching source items. The
/// single-factor [`SplitScheme::NewClasses`] split uses `source_a` only.
pub fn sample_pair<R: Rng + ?Sized>(
    split: &LabelSplit,
    source_a: &FactorSource,
    source_b: Option<&FactorSource>,
    merge_mode: MergeMode,
    role: Role,
    n: usize,
    rng: &mut R,
) -> Result<PairDataset> {
    let combos: Vec<&Combo> = split.combos(role).iter().collect();
    if split.scheme == SplitScheme::NewClasses {
        let shape = source_a.item_shape().to_vec();
        let mut inputs = Vec::with_capacity(n * source_a.item_len());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = combos[rng.random_range(0..combos.len())][0];
            let i = pick(source_a, y, rng)?;
            inputs.extend_from_slice(source_a.item(i));
            labels.push(vec![y]);
        }
        return PairDataset::new(split.clone(), merge_mode, role, shape, inputs, labels);
    }

    let source_b = source_b
        .ok_or_else(|| Error::Validation(format!("{} split needs two sources", split.scheme)))?;
    let shape = merged_shape(source_a.item_shape(), source_b.item_shape(), merge_mode)?;
    let ca = source_a.item_shape().get(2).copied().unwrap_or(1);

    let mut allowed: Vec<Vec<usize>> = vec![Vec::new(); split.classes[0]];
    for c in &combos {
        allowed[c[0]].push(c[1]);
    }
    let first: Vec<usize> = (0..split.classes[0]).filter(|&y| !allowed[y].is_empty()).collect();
    for y1 in &first {
        if *y1 >= source_a.classes() {
            return Err(Error::Data(format!("{}: no items for class {y1}", source_a.name)));
        }
    }

    let w: usize = shape.iter().product();
    let mut inputs = Vec::with_capacity(n * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y1 = first[rng.random_range(0..first.len())];
        let y2 = allowed[y1][rng.random_range(0..allowed[y1].len())];
        let i1 = pick(source_a, y1, rng)?;
        let i2 = pick(source_b, y2, rng)?;
        merge_into(
            &mut inputs,
            source_a.item(i1),
            source_b.item(i2),
            &shape,
            merge_mode,
            ca,
        );
        labels.push(vec![y1, y2]);
    }
    PairDataset::new(split.clone(), merge_mode, role, shape, inputs, labels)
}

/// One input with i.i.d. uniform `[-0.5, 0.5]` elements.
pub fn random_input<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Validation(format!("invalid input shape {shape:?}")));
    }
    Ok(Tensor::uniform(shape, -0.5, 0.5, rng))
}
