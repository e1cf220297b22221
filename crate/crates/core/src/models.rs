//! Small classifiers standing in for a full steganalysis CNN, their
//! initialization, accuracy evaluation and checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward, Network};
use crate::error::{Error, Result};
use crate::params::{LambdaGroup, ParamVector, Segment};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Fully connected ReLU network; `layer_sizes` lists hidden widths.
    Mlp,
    /// Two 3x3 conv+ReLU+2x2-mean-pool stages followed by two dense layers;
    /// `layer_sizes` is `[conv1_channels, conv2_channels, dense_hidden]`.
    MiniCnn,
    /// A single dense layer with any number of outputs. Used for analytic
    /// probes; not a cover/stego classifier.
    Linear,
}

/// Fixed (non-trainable) high-pass filter applied to the input image before
/// the first trainable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFilter {
    #[default]
    None,
    /// 3x3 Laplacian residual `4x - (up + down + left + right)`, zero padded.
    Laplacian,
}

fn default_classes() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub input_filter: InputFilter,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Layer name to lambda group. Layers left out take the default split:
    /// conv layers (and all but the last dense layer of an MLP) are `feature`,
    /// the rest `head`.
    #[serde(default)]
    pub lambda_group_map: BTreeMap<String, LambdaGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv {
        in_ch: usize,
        out_ch: usize,
        height: usize,
        width: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerShape {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Conv { in_ch, .. } => in_ch * 9,
            LayerShape::Dense { inputs, .. } => inputs,
        }
    }

    pub fn weight_count(&self) -> usize {
        match *self {
            LayerShape::Conv { in_ch, out_ch, .. } => in_ch * out_ch * 9,
            LayerShape::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LayerShape::Conv { out_ch, .. } => out_ch,
            LayerShape::Dense { outputs, .. } => outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub shape: LayerShape,
    pub group: LambdaGroup,
}

impl ModelSpec {
    /// MLP with the given hidden widths over an `h x w` input.
    pub fn mlp(input_shape: [usize; 2], hidden: &[usize]) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape: input_shape.to_vec(),
            layer_sizes: hidden.to_vec(),
            num_classes: 2,
            input_filter: InputFilter::None,
            bias: true,
            lambda_group_map: BTreeMap::new(),
        }
    }

    /// The default MLP: 8x8 input, 64 -> 32 -> 2.
    pub fn default_mlp() -> Self {
        Self::mlp([8, 8], &[32])
    }

    pub fn mini_cnn(input_shape: [usize; 2], conv: [usize; 2], hidden: usize) -> Self {
        Self {
            kind: ModelKind::MiniCnn,
            input_shape: input_shape.to_vec(),
            layer_sizes: vec![conv[0], conv[1], hidden],
            num_classes: 2,
            input_filter: InputFilter::Laplacian,
            bias: true,
            lambda_group_map: BTreeMap::new(),
        }
    }

    /// The default mini-CNN: 16x16 input, conv 8 and 16 channels, dense 16.
    pub fn default_mini_cnn() -> Self {
        Self::mini_cnn([16, 16], [8, 16], 16)
    }

    pub fn linear(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self {
            kind: ModelKind::Linear,
            input_shape: vec![inputs],
            layer_sizes: Vec::new(),
            num_classes: outputs,
            input_filter: InputFilter::None,
            bias,
            lambda_group_map: BTreeMap::new(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn default_group(&self, name: &str, is_last: bool) -> LambdaGroup {
        match self.kind {
            ModelKind::MiniCnn if name.starts_with("conv") => LambdaGroup::Feature,
            ModelKind::Mlp if !is_last => LambdaGroup::Feature,
            _ => LambdaGroup::Head,
        }
    }

    /// Trainable layers in evaluation order.
    pub fn layers(&self) -> Result<Vec<LayerDesc>> {
        self.validate()?;
        let mut shapes: Vec<(String, LayerShape)> = Vec::new();
        match self.kind {
            ModelKind::Linear => shapes.push((
                "dense1".into(),
                LayerShape::Dense {
                    inputs: self.input_len(),
                    outputs: self.num_classes,
                },
            )),
            ModelKind::Mlp => {
                let mut inputs = self.input_len();
                let widths = self.layer_sizes.iter().copied().chain([self.num_classes]);
                for (i, outputs) in widths.enumerate() {
                    shapes.push((format!("dense{}", i + 1), LayerShape::Dense { inputs, outputs }));
                    inputs = outputs;
                }
            }
            ModelKind::MiniCnn => {
                let (h, w) = (self.input_shape[0], self.input_shape[1]);
                let (c1, c2, hidden) = (self.layer_sizes[0], self.layer_sizes[1], self.layer_sizes[2]);
                shapes.push((
                    "conv1".into(),
                    LayerShape::Conv { in_ch: 1, out_ch: c1, height: h, width: w },
                ));
                shapes.push((
                    "conv2".into(),
                    LayerShape::Conv { in_ch: c1, out_ch: c2, height: h / 2, width: w / 2 },
                ));
                shapes.push((
                    "dense1".into(),
                    LayerShape::Dense { inputs: c2 * (h / 4) * (w / 4), outputs: hidden },
                ));
                shapes.push((
                    "dense2".into(),
                    LayerShape::Dense { inputs: hidden, outputs: self.num_classes },
                ));
            }
        }
        let n = shapes.len();
        Ok(shapes
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let group = self
                    .lambda_group_map
                    .get(&name)
                    .copied()
                    .unwrap_or_else(|| self.default_group(&name, i + 1 == n));
                LayerDesc { name, shape, group }
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?} must be non-empty and positive", self.input_shape));
        }
        if self.layer_sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if self.input_filter != InputFilter::None && self.input_shape.len() != 2 {
            return bad("an input filter needs a 2-D (height, width) input".into());
        }
        let layer_names: Vec<String> = match self.kind {
            ModelKind::Linear => {
                if self.num_classes == 0 {
                    return bad("linear model needs at least one output".into());
                }
                if !self.layer_sizes.is_empty() {
                    return bad("linear model takes no layer_sizes".into());
                }
                vec!["dense1".into()]
            }
            ModelKind::Mlp => {
                if self.num_classes != 2 {
                    return bad(format!("classifier must have 2 classes, got {}", self.num_classes));
                }
                (1..=self.layer_sizes.len() + 1).map(|i| format!("dense{i}")).collect()
            }
            ModelKind::MiniCnn => {
                if self.num_classes != 2 {
                    return bad(format!("classifier must have 2 classes, got {}", self.num_classes));
                }
                if self.layer_sizes.len() != 3 {
                    return bad("mini-cnn layer_sizes must be [conv1, conv2, dense_hidden]".into());
                }
                if self.input_shape.len() != 2
                    || !self.input_shape[0].is_multiple_of(4)
                    || !self.input_shape[1].is_multiple_of(4)
                {
                    return bad(format!(
                        "mini-cnn input must be 2-D with sides divisible by 4, got {:?}",
                        self.input_shape
                    ));
                }
                for (name, g) in &self.lambda_group_map {
                    let want = if name.starts_with("conv") {
                        LambdaGroup::Feature
                    } else {
                        LambdaGroup::Head
                    };
                    if *g != want {
                        return bad(format!("mini-cnn layer `{name}` must be in the {want} group"));
                    }
                }
                ["conv1", "conv2", "dense1", "dense2"].map(String::from).to_vec()
            }
        };
        if let Some(unknown) = self.lambda_group_map.keys().find(|k| !layer_names.contains(k)) {
            return bad(format!("lambda_group_map names unknown layer `{unknown}`"));
        }
        Ok(())
    }

    /// Segment table of the flat parameter vector: per layer, weights then bias.
    pub fn segments(&self) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for layer in self.layers()? {
            let mut push = |suffix: &str, len: usize| {
                out.push(Segment {
                    name: format!("{}.{suffix}", layer.name),
                    offset,
                    len,
                    group: layer.group,
                });
                offset += len;
            };
            push("weight", layer.shape.weight_count());
            if self.bias {
                push("bias", layer.shape.bias_count());
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.segments()?.iter().map(|s| s.len).sum())
    }
}

/// Class labels: 0 = cover, 1 = stego.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabelVector {
        LabelVector(idx.iter().map(|&i| self.0[i]).collect())
    }
}

/// Weights uniform in `±sqrt(2 / fan_in) * sqrt(3)` (unit-variance-scaled He
/// initialization), biases zero. Pure function of `(spec, seed)`.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamVector<T>> {
    let mut rng = rng_for(seed, &[stream::INIT]);
    let mut values = Vec::new();
    for layer in spec.layers()? {
        let bound = (2.0 / layer.shape.fan_in() as f64).sqrt() * 3f64.sqrt();
        values.extend((0..layer.shape.weight_count()).map(|_| T::of(rng.gen_range(-bound..=bound))));
        if spec.bias {
            values.extend(std::iter::repeat_n(T::zero(), layer.shape.bias_count()));
        }
    }
    ParamVector::new(values, spec.segments()?)
}

/// Index of the largest logit; ties go to the lower class index.
pub fn predict_class<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    inputs: &Tensor<T>,
    labels: &LabelVector,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::Shape {
            context: "accuracy labels".into(),
            dim: 0,
            expected: inputs.rows(),
            actual: labels.len(),
        });
    }
    let logits = forward(params, spec, inputs)?;
    let correct = labels
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(i, &l)| predict_class(logits.row(*i)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Model spec plus parameters, written as JSON. Floats are printed in
/// shortest round-trip form so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub params: ParamVector<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(spec: ModelSpec, params: ParamVector<T>) -> Result<Self> {
        if params.segments() != spec.segments()?.as_slice() {
            return Err(Error::Layout("checkpoint parameters do not match the model spec".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = crate::io::read_json(path)?;
        Checkpoint::new(ckpt.spec, ckpt.params).map_err(|e| Error::format(path, e))
    }
}

/// Compiles the spec once; handy when evaluating many batches.
pub fn network(spec: &ModelSpec) -> Result<Network> {
    Network::new(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_counts() {
        assert_eq!(ModelSpec::default_mlp().param_count().unwrap(), 64 * 32 + 32 + 32 * 2 + 2);
        let cnn = ModelSpec::default_mini_cnn();
        let expected = (9 * 8 + 8) + (8 * 16 * 9 + 16) + (16 * 4 * 4 * 16 + 16) + (16 * 2 + 2);
        assert_eq!(cnn.param_count().unwrap(), expected);
    }

    #[test]
    fn mini_cnn_groups_follow_layer_type() {
        let segs = ModelSpec::default_mini_cnn().segments().unwrap();
        for s in segs {
            let want = if s.name.starts_with("conv") {
                LambdaGroup::Feature
            } else {
                LambdaGroup::Head
            };
            assert_eq!(s.group, want, "{}", s.name);
        }
        let mut bad = ModelSpec::default_mini_cnn();
        bad.lambda_group_map.insert("dense1".into(), LambdaGroup::Feature);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn classifier_must_be_binary() {
        let mut spec = ModelSpec::default_mlp();
        spec.num_classes = 3;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::default_mini_cnn();
        spec.input_shape = vec![10, 10];
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::default_mlp();
        spec.lambda_group_map.insert("conv9".into(), LambdaGroup::Head);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::default_mini_cnn();
        let a: ParamVector<f64> = init_params(&spec, 3).unwrap();
        let b: ParamVector<f64> = init_params(&spec, 3).unwrap();
        let c: ParamVector<f64> = init_params(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn init_bound_for_fan_in_eight() {
        let spec = ModelSpec::mlp([2, 4], &[5]);
        let p: ParamVector<f64> = init_params(&spec, 11).unwrap();
        let bound = (2.0f64 / 8.0).sqrt() * 3f64.sqrt();
        let w = p.segment_values("dense1.weight").unwrap();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > 0.5 * bound));
        assert!(p.segment_values("dense1.bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_ties_go_to_cover() {
        assert_eq!(predict_class(&[0.3f64, 0.3]), 0);
        assert_eq!(predict_class(&[0.2f64, 0.3]), 1);
    }

    fn constant_head(spec: &ModelSpec, class: usize) -> ParamVector<f64> {
        let mut p: ParamVector<f64> = init_params(spec, 0).unwrap();
        let n = p.len();
        for v in p.values_mut() {
            *v = 0.0;
        }
        // last two values are the output bias
        p.values_mut()[n - 2 + class] = 1.0;
        p
    }

    #[test]
    fn constant_predictor_scores_half_on_balanced_split() {
        let spec = ModelSpec::mlp([2, 2], &[3]);
        let x = Tensor::new(vec![4, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = LabelVector::new(vec![0, 1, 0, 1], 2).unwrap();
        for class in 0..2 {
            let acc = accuracy(&constant_head(&spec, class), &spec, &x, &y).unwrap();
            assert_eq!(acc, 0.5);
        }
    }

    #[test]
    fn hand_built_three_of_four() {
        // identity 2 -> 2 linear probe: prediction is the larger input coordinate
        let spec = ModelSpec::linear(2, 2, false);
        let p = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0], spec.segments().unwrap()).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.5, 0.7]).unwrap();
        let y = LabelVector::new(vec![0, 1, 0, 0], 2).unwrap();
        assert_eq!(accuracy(&p, &spec, &x, &y).unwrap(), 0.75);
    }

    #[test]
    fn empty_split_is_an_error() {
        let spec = ModelSpec::linear(2, 2, false);
        let p: ParamVector<f64> = init_params(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = LabelVector::new(vec![], 2).unwrap();
        assert!(matches!(accuracy(&p, &spec, &x, &y), Err(Error::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::default_mini_cnn();
        let mut p: ParamVector<f64> = init_params(&spec, 5).unwrap();
        p.values_mut()[0] = 0.1 + 0.2;
        p.values_mut()[1] = -1.0e-300;
        p.values_mut()[2] = std::f64::consts::PI;
        let ckpt = Checkpoint::new(spec, p).unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        let bits = |c: &Checkpoint<f64>| c.params.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ckpt), bits(&back));
        assert_eq!(ckpt.spec, back.spec);
    }
}
