//! Attention-based MIL network.
//!
//! A convolutional extractor maps every instance to a feature vector, a gated
//! attention module turns the bag of features into one weighted average, and
//! a single linear layer produces two logits. The same network serves as
//! teacher and student, and a single instance is just a bag of size one.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{select_rows, Act, Conv2d, Layer, LayerCache, Linear, MaxPool};
use crate::rng::Rng;
use crate::types::{AttentionParams, BagView, FeatureBag, Instance, InstanceShape, PredictionOutput};
use rand::Rng as _;

pub const DEFAULT_ATTENTION_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
}

/// Convolution blocks (conv, ReLU, max pool) followed by fully connected
/// layers with ReLU. The last fully connected width is the feature size `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub name: String,
    pub input: InstanceShape,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub fc_widths: Vec<usize>,
}

impl FeatureExtractorSpec {
    /// LeNet-5 layout: 6 and 16 channel conv blocks, then 120 and 84 wide
    /// fully connected layers and the feature layer. Inputs smaller than
    /// 28x28 use 3x3 kernels with padding so the two pooling stages fit.
    pub fn lenet5(input: InstanceShape, feature_dim: usize) -> Self {
        let (k1, p1, k2, p2) = if input.height >= 28 && input.width >= 28 {
            (5, 2, 5, 0)
        } else {
            (3, 1, 3, 1)
        };
        Self {
            name: "lenet5".into(),
            input,
            conv_blocks: vec![
                ConvBlockSpec { out_channels: 6, kernel: k1, padding: p1, pool: 2 },
                ConvBlockSpec { out_channels: 16, kernel: k2, padding: p2, pool: 2 },
            ],
            fc_widths: vec![120, 84, feature_dim],
        }
    }

    /// Two conv blocks over 27x27 RGB patches.
    pub fn colon() -> Self {
        Self {
            name: "colon".into(),
            input: InstanceShape::new(3, 27, 27),
            conv_blocks: vec![
                ConvBlockSpec { out_channels: 16, kernel: 3, padding: 1, pool: 2 },
                ConvBlockSpec { out_channels: 32, kernel: 3, padding: 1, pool: 2 },
            ],
            fc_widths: vec![256, 128, 64],
        }
    }

    /// Five conv blocks over 32x32 RGB patches.
    pub fn breast() -> Self {
        let block = |c| ConvBlockSpec { out_channels: c, kernel: 3, padding: 1, pool: 2 };
        Self {
            name: "breast".into(),
            input: InstanceShape::new(3, 32, 32),
            conv_blocks: vec![block(16), block(32), block(32), block(64), block(64)],
            fc_widths: vec![128, 128, 64],
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.fc_widths.last().unwrap_or(&0)
    }

    /// Flattened size entering the first fully connected layer.
    pub fn flattened_dim(&self) -> Result<usize> {
        let (mut h, mut w, mut c) = (self.input.height, self.input.width, self.input.channels);
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel == 0 || b.pool == 0 || b.out_channels == 0 {
                return Err(Error::config(format!("conv block {i} has a zero-sized field")));
            }
            let oh = (h + 2 * b.padding).checked_sub(b.kernel).map(|v| v + 1);
            let ow = (w + 2 * b.padding).checked_sub(b.kernel).map(|v| v + 1);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::config(format!("conv block {i}: {h}x{w} input smaller than kernel {}", b.kernel)));
            };
            h = oh / b.pool;
            w = ow / b.pool;
            c = b.out_channels;
            if h == 0 || w == 0 {
                return Err(Error::config(format!("conv block {i} pools the map down to nothing")));
            }
        }
        Ok(h * w * c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::config("extractor input shape is empty"));
        }
        if self.fc_widths.is_empty() || self.fc_widths.contains(&0) {
            return Err(Error::config("fully connected widths must be non-empty and positive"));
        }
        self.flattened_dim().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub extractor: FeatureExtractorSpec,
    /// Hidden width `L` of the gated attention module.
    pub attention_hidden: usize,
}

impl ModelSpec {
    pub fn new(extractor: FeatureExtractorSpec) -> Self {
        Self {
            extractor,
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    spec: ModelSpec,
    extractor: Vec<Layer>,
    attention: AttentionParams,
    classifier: Linear,
}

/// Intermediate values kept by a batched extractor pass.
#[derive(Debug)]
pub struct ExtractorCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug)]
enum HeadInner {
    /// One instance: the attention weight is exactly one and `z = h`.
    Single(usize),
    Gated {
        rows: Vec<usize>,
        h: Array2<f64>,
        tanh_v: Array2<f64>,
        sigm_u: Array2<f64>,
        weights: Array1<f64>,
    },
}

/// Cached forward state for one bag passed through attention and classifier.
#[derive(Debug)]
pub struct HeadCache {
    inner: HeadInner,
    pooled: Array1<f64>,
}

impl HeadCache {
    pub fn attention_weights(&self) -> Vec<f64> {
        match &self.inner {
            HeadInner::Single(_) => vec![1.0],
            HeadInner::Gated { weights, .. } => weights.to_vec(),
        }
    }
}

impl MilModel {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.extractor.validate()?;
        if spec.attention_hidden == 0 {
            return Err(Error::config("attention hidden width must be positive"));
        }
        let ex = &spec.extractor;
        let mut layers = Vec::new();
        let mut channels = ex.input.channels;
        for b in &ex.conv_blocks {
            layers.push(Layer::Conv(Conv2d::new(channels, b.out_channels, b.kernel, b.padding, rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool(MaxPool { size: b.pool }));
            channels = b.out_channels;
        }
        let mut width = ex.flattened_dim()?;
        for &out in &ex.fc_widths {
            layers.push(Layer::Linear(Linear::new_relu(width, out, rng)));
            layers.push(Layer::Relu);
            width = out;
        }
        let d = width;
        let l = spec.attention_hidden;
        let bound_d = 1.0 / (d as f64).sqrt();
        let bound_l = 1.0 / (l as f64).sqrt();
        let attention = AttentionParams {
            w: Array1::from_shape_simple_fn(l, || rng.random_range(-bound_l..=bound_l)),
            u: Array2::from_shape_simple_fn((l, d), || rng.random_range(-bound_d..=bound_d)),
            v: Array2::from_shape_simple_fn((l, d), || rng.random_range(-bound_d..=bound_d)),
        };
        let classifier = Linear::new(d, 2, rng);
        Ok(Self {
            spec,
            extractor: layers,
            attention,
            classifier,
        })
    }

    /// Same architecture with every parameter set to zero; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            extractor: self.extractor.iter().map(Layer::zeros_like).collect(),
            attention: AttentionParams::zeros(self.attention.hidden(), self.attention.feature_dim()),
            classifier: Linear::zeros(self.classifier.in_features(), 2),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_features()
    }

    pub fn attention(&self) -> &AttentionParams {
        &self.attention
    }

    pub fn attention_mut(&mut self) -> &mut AttentionParams {
        &mut self.attention
    }

    pub fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.classifier
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.extractor
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.extractor.iter().flat_map(Layer::tensors).collect();
        out.push(self.attention.w.as_slice().unwrap());
        out.push(self.attention.u.as_slice().unwrap());
        out.push(self.attention.v.as_slice().unwrap());
        out.push(self.classifier.weight.as_slice().unwrap());
        out.push(self.classifier.bias.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.extractor.iter_mut().flat_map(Layer::tensors_mut).collect();
        out.push(self.attention.w.as_slice_mut().unwrap());
        out.push(self.attention.u.as_slice_mut().unwrap());
        out.push(self.attention.v.as_slice_mut().unwrap());
        out.push(self.classifier.weight.as_slice_mut().unwrap());
        out.push(self.classifier.bias.as_slice_mut().unwrap());
        out
    }

    /// Canonical name and shape of every tensor, in [`Self::tensors`] order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.extractor.iter().enumerate() {
            let (kind, w, b) = match layer {
                Layer::Conv(c) => ("conv", c.weight.shape().to_vec(), c.bias.shape().to_vec()),
                Layer::Linear(l) => ("fc", l.weight.shape().to_vec(), l.bias.shape().to_vec()),
                _ => continue,
            };
            out.push((format!("extractor.{i}.{kind}.weight"), w));
            out.push((format!("extractor.{i}.{kind}.bias"), b));
        }
        out.push(("attention.w".into(), self.attention.w.shape().to_vec()));
        out.push(("attention.u".into(), self.attention.u.shape().to_vec()));
        out.push(("attention.v".into(), self.attention.v.shape().to_vec()));
        out.push(("classifier.weight".into(), self.classifier.weight.shape().to_vec()));
        out.push(("classifier.bias".into(), self.classifier.bias.shape().to_vec()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &MilModel, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn input_batch(&self, instances: &[Instance]) -> Result<Act> {
        let shape = self.spec.extractor.input;
        if instances.is_empty() {
            return Err(Error::Empty("no instances to extract"));
        }
        let mut data = Array2::<f64>::zeros((instances.len(), shape.len()));
        for (i, x) in instances.iter().enumerate() {
            if x.shape() != shape {
                return Err(Error::config(format!(
                    "instance shape {} does not match model input {}",
                    x.shape(),
                    shape
                )));
            }
            data.row_mut(i).assign(&Array1::from(x.to_hwc()));
        }
        Ok(Act::new(data, shape.height, shape.width, shape.channels))
    }

    /// Features for a batch of instances, keeping what backward needs.
    pub fn extract_batch(&self, instances: &[Instance]) -> Result<(Array2<f64>, ExtractorCache)> {
        let mut act = self.input_batch(instances)?;
        let mut caches = Vec::with_capacity(self.extractor.len());
        for layer in &self.extractor {
            let (next, cache) = layer.forward(act);
            caches.push(cache);
            act = next;
        }
        Ok((act.data, ExtractorCache { layers: caches }))
    }

    /// Features for a batch of instances (evaluation mode).
    pub fn infer_batch(&self, instances: &[Instance]) -> Result<Array2<f64>> {
        let mut act = self.input_batch(instances)?;
        for layer in &self.extractor {
            act = layer.infer(act);
        }
        Ok(act.data)
    }

    /// Accumulates extractor gradients given the gradient w.r.t. the features.
    pub fn extractor_backward(&self, cache: &ExtractorCache, dfeatures: Array2<f64>, grads: &mut MilModel) {
        let mut d = dfeatures;
        let n = self.extractor.len();
        for i in (0..n).rev() {
            let want_input = i > 0;
            match self.extractor[i].backward(&cache.layers[i], d, &mut grads.extractor[i], want_input) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    pub fn extract_features(&self, bag: BagView<'_>) -> Result<FeatureBag> {
        FeatureBag::new(self.infer_batch(bag.instances)?)
    }

    /// Attention + classifier on the feature rows `rows` of `features`.
    pub fn head_forward(&self, features: &Array2<f64>, rows: &[usize]) -> Result<([f64; 2], HeadCache)> {
        if rows.is_empty() {
            return Err(Error::Empty("bag head needs at least one instance"));
        }
        let (pooled, inner) = if rows.len() == 1 {
            (features.row(rows[0]).to_owned(), HeadInner::Single(rows[0]))
        } else {
            let h = select_rows(features, rows);
            let (scores, tanh_v, sigm_u) = gated_scores(&self.attention, h.view());
            let weights = Array1::from(softmax(scores.as_slice().unwrap()));
            let pooled = weights.dot(&h);
            (
                pooled,
                HeadInner::Gated {
                    rows: rows.to_vec(),
                    h,
                    tanh_v,
                    sigm_u,
                    weights,
                },
            )
        };
        let logits = self.classifier.forward_vec(&pooled);
        Ok(([logits[0], logits[1]], HeadCache { inner, pooled }))
    }

    /// Backward through classifier and attention for one bag head.
    /// Feature gradients are scattered into `dfeatures`.
    pub fn head_backward(&self, cache: &HeadCache, dlogits: [f64; 2], dfeatures: &mut Array2<f64>, grads: &mut MilModel) {
        let dl = Array1::from(dlogits.to_vec());
        for (o, &g) in dlogits.iter().enumerate() {
            grads.classifier.bias[o] += g;
            grads
                .classifier
                .weight
                .row_mut(o)
                .scaled_add(g, &cache.pooled);
        }
        let dpooled = self.classifier.weight.t().dot(&dl);
        match &cache.inner {
            HeadInner::Single(r) => {
                dfeatures.row_mut(*r).scaled_add(1.0, &dpooled);
            }
            HeadInner::Gated {
                rows,
                h,
                tanh_v,
                sigm_u,
                weights,
            } => {
                let attn = &self.attention;
                // pooled = sum_k a_k h_k
                let da = h.dot(&dpooled);
                let mean = weights.dot(&da);
                let ds = weights * &(da - mean);
                let gate = tanh_v * sigm_u;
                grads.attention.w += &gate.t().dot(&ds);
                let dgate = ds.view().insert_axis(Axis(1)).dot(&attn.w.view().insert_axis(Axis(0)));
                let dpre_v = &dgate * sigm_u * &tanh_v.mapv(|t| 1.0 - t * t);
                let dpre_u = &dgate * tanh_v * &sigm_u.mapv(|s| s * (1.0 - s));
                grads.attention.v += &dpre_v.t().dot(h);
                grads.attention.u += &dpre_u.t().dot(h);
                let mut dh = dpre_v.dot(&attn.v) + dpre_u.dot(&attn.u);
                for (k, mut row) in dh.rows_mut().into_iter().enumerate() {
                    row.scaled_add(weights[k], &dpooled);
                }
                for (k, &r) in rows.iter().enumerate() {
                    dfeatures.row_mut(r).scaled_add(1.0, &dh.row(k));
                }
            }
        }
    }

    /// Logits of each selected feature row treated as a bag of size one.
    pub fn instance_logits(&self, features: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        self.classifier.forward(&select_rows(features, rows))
    }

    pub fn instance_backward(
        &self,
        features: &Array2<f64>,
        rows: &[usize],
        dlogits: &Array2<f64>,
        dfeatures: &mut Array2<f64>,
        grads: &mut MilModel,
    ) {
        let h = select_rows(features, rows);
        let dh = self
            .classifier
            .backward(&h, dlogits, &mut grads.classifier, true)
            .expect("input gradient requested");
        for (k, &r) in rows.iter().enumerate() {
            dfeatures.row_mut(r).scaled_add(1.0, &dh.row(k));
        }
    }

    pub fn predict_bag(&self, bag: BagView<'_>) -> Result<PredictionOutput> {
        let feats = self.infer_batch(bag.instances)?;
        let rows: Vec<usize> = (0..feats.nrows()).collect();
        let (logits, cache) = self.head_forward(&feats, &rows)?;
        Ok(PredictionOutput {
            bag_logits: logits,
            bag_probs: softmax2(logits),
            attention_weights: cache.attention_weights(),
            instance_probs: None,
        })
    }

    /// Bag prediction plus every instance evaluated as a bag of size one.
    pub fn predict_bag_and_instances(&self, bag: BagView<'_>) -> Result<PredictionOutput> {
        let feats = self.infer_batch(bag.instances)?;
        let rows: Vec<usize> = (0..feats.nrows()).collect();
        let (logits, cache) = self.head_forward(&feats, &rows)?;
        let inst = self.instance_logits(&feats, &rows);
        let instance_probs = inst.rows().into_iter().map(|r| softmax2([r[0], r[1]])).collect();
        Ok(PredictionOutput {
            bag_logits: logits,
            bag_probs: softmax2(logits),
            attention_weights: cache.attention_weights(),
            instance_probs: Some(instance_probs),
        })
    }

    pub fn predict_instance(&self, instance: &Instance) -> Result<[f64; 2]> {
        let out = self.predict_bag(BagView {
            id: "",
            instances: std::slice::from_ref(instance),
            label: false,
        })?;
        Ok(out.bag_probs)
    }
}

/// Pre-softmax gated scores `w^T (tanh(V h) * sigm(U h))` for every row of `h`,
/// plus the two gate activations.
fn gated_scores(attn: &AttentionParams, h: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let tanh_v = h.dot(&attn.v.t()).mapv(f64::tanh);
    let sigm_u = h.dot(&attn.u.t()).mapv(sigmoid);
    let scores = (&tanh_v * &sigm_u).dot(&attn.w);
    (scores, tanh_v, sigm_u)
}

/// Gated attention weights over the instances of a feature bag.
pub fn attention_weights(attn: &AttentionParams, feats: &FeatureBag) -> Result<Vec<f64>> {
    attn.validate()?;
    if feats.dim() != attn.feature_dim() {
        return Err(Error::config(format!(
            "feature dimension {} does not match attention dimension {}",
            feats.dim(),
            attn.feature_dim()
        )));
    }
    let (scores, _, _) = gated_scores(attn, feats.features().view());
    Ok(softmax(scores.as_slice().unwrap()))
}

/// Weighted sum of feature vectors.
pub fn aggregate(feats: &FeatureBag, weights: &[f64]) -> Result<Array1<f64>> {
    if weights.len() != feats.len() {
        return Err(Error::shape(format!("{} weights", feats.len()), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > crate::types::PROB_SUM_TOL || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid(format!("weights must be nonnegative and sum to 1, got sum {total}")));
    }
    Ok(Array1::from(weights.to_vec()).dot(feats.features()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax. The normaliser is summed in sorted order, so
/// permuting the input permutes the output bit for bit.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let p = softmax(&logits);
    [p[0], p[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use crate::types::Bag;
    use ndarray::{array, Array3};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            extractor: FeatureExtractorSpec {
                name: "tiny".into(),
                input: InstanceShape::new(1, 6, 6),
                conv_blocks: vec![ConvBlockSpec { out_channels: 3, kernel: 3, padding: 1, pool: 2 }],
                fc_widths: vec![8, 6, 5],
            },
            attention_hidden: 4,
        }
    }

    fn random_bag(k: usize, seed: u64) -> Bag {
        let mut rng = substream(seed, Stream::Data);
        let instances = (0..k)
            .map(|_| Instance::new(Array3::from_shape_simple_fn((1, 6, 6), || rng.random::<f64>())).unwrap())
            .collect();
        Bag::new("b", instances, true, None).unwrap()
    }

    #[test]
    fn extract_features_shape() {
        let model = MilModel::new(tiny_spec(), &mut substream(1, Stream::Init)).unwrap();
        let bag = random_bag(3, 5);
        let f = model.extract_features(bag.view()).unwrap();
        assert_eq!((f.len(), f.dim()), (3, 5));
    }

    #[test]
    fn extract_features_rejects_wrong_shape() {
        let model = MilModel::new(tiny_spec(), &mut substream(1, Stream::Init)).unwrap();
        let x = Instance::new(Array3::zeros((1, 5, 5))).unwrap();
        let bag = Bag::new("b", vec![x], false, None).unwrap();
        assert!(matches!(model.extract_features(bag.view()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_extractor_maps_zero_instance_to_zero() {
        let model = MilModel::new(tiny_spec(), &mut substream(1, Stream::Init)).unwrap();
        let mut zeroed = model.zeros_like();
        *zeroed.attention_mut() = model.attention().clone();
        let x = Instance::new(Array3::zeros((1, 6, 6))).unwrap();
        let feats = zeroed.infer_batch(&[x]).unwrap();
        assert!(feats.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuted_bag_gives_permuted_features() {
        let model = MilModel::new(tiny_spec(), &mut substream(1, Stream::Init)).unwrap();
        let bag = random_bag(4, 9);
        let perm = bag.permuted(&[3, 1, 0, 2]).unwrap();
        let f = model.infer_batch(bag.instances()).unwrap();
        let g = model.infer_batch(perm.instances()).unwrap();
        for (i, &src) in [3, 1, 0, 2].iter().enumerate() {
            assert_eq!(g.row(i), f.row(src));
        }
    }

    #[test]
    fn attention_singleton_and_symmetric() {
        let attn = AttentionParams::new(array![0.3, -1.0], array![[1.0, 2.0], [0.5, -0.5]], array![[0.1, 0.2], [-1.0, 1.0]]).unwrap();
        let one = FeatureBag::new(array![[0.7, -2.0]]).unwrap();
        assert_eq!(attention_weights(&attn, &one).unwrap(), vec![1.0]);
        let same = FeatureBag::new(Array2::from_shape_fn((4, 2), |(_, j)| j as f64 + 0.5)).unwrap();
        for w in attention_weights(&attn, &same).unwrap() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let wrong = FeatureBag::new(array![[1.0, 2.0, 3.0]]).unwrap();
        assert!(attention_weights(&attn, &wrong).is_err());
    }

    #[test]
    fn attention_two_instance_scalar_case() {
        // d = L = 1, w = U = V = 1, h = +-1: s_k = tanh(h_k) * sigm(h_k).
        let attn = AttentionParams::new(array![1.0], array![[1.0]], array![[1.0]]).unwrap();
        let feats = FeatureBag::new(array![[1.0], [-1.0]]).unwrap();
        let w = attention_weights(&attn, &feats).unwrap();
        // 50-digit mpmath evaluation:
        // s1 = tanh(1) sigm(1) = 0.5567699411459397, s2 = tanh(-1) sigm(-1) = -0.2048242148098251
        assert!((w[0] - 0.681_699_742_194_526_2).abs() < 1e-12, "{}", w[0]);
        assert!((w[1] - 0.318_300_257_805_473_8).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let f = FeatureBag::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(aggregate(&f, &[0.5, 0.5]).unwrap(), array![0.5, 0.5]);
        let f1 = FeatureBag::new(array![[3.0, -7.5]]).unwrap();
        assert_eq!(aggregate(&f1, &[1.0]).unwrap(), array![3.0, -7.5]);
        let f3 = FeatureBag::new(array![[1.0, 1.0], [2.0, 0.0], [0.0, 2.0]]).unwrap();
        let z = aggregate(&f3, &[0.2, 0.3, 0.5]).unwrap();
        assert!((z[0] - 0.8).abs() < 1e-12 && (z[1] - 1.2).abs() < 1e-12);
        assert!(aggregate(&f3, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn zero_classifier_gives_uniform_probs() {
        let mut model = MilModel::new(tiny_spec(), &mut substream(1, Stream::Init)).unwrap();
        *model.classifier_mut() = Linear::zeros(5, 2);
        let out = model.predict_bag(random_bag(5, 2).view()).unwrap();
        assert_eq!(out.bag_probs, [0.5, 0.5]);
    }

    #[test]
    fn instance_prediction_matches_singleton_bag() {
        let model = MilModel::new(tiny_spec(), &mut substream(3, Stream::Init)).unwrap();
        let bag = random_bag(5, 4);
        let full = model.predict_bag_and_instances(bag.view()).unwrap();
        let sum: f64 = full.attention_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (x, p) in bag.instances().iter().zip(full.instance_probs.unwrap()) {
            let single = model.predict_instance(x).unwrap();
            assert!((single[1] - p[1]).abs() < 1e-12);
            assert!((single[0] + single[1] - 1.0).abs() < 1e-12);
            let dup = Bag::new("d", vec![x.clone(); 4], false, None).unwrap();
            let pd = model.predict_bag(dup.view()).unwrap();
            assert!((pd.bag_probs[1] - single[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn lenet_layouts_validate() {
        let small = FeatureExtractorSpec::lenet5(InstanceShape::new(1, 8, 8), 64);
        assert_eq!(small.flattened_dim().unwrap(), 2 * 2 * 16);
        let mnist = FeatureExtractorSpec::lenet5(InstanceShape::new(1, 28, 28), 64);
        assert_eq!(mnist.flattened_dim().unwrap(), 5 * 5 * 16);
        assert_eq!(FeatureExtractorSpec::colon().flattened_dim().unwrap(), 6 * 6 * 32);
        assert_eq!(FeatureExtractorSpec::breast().flattened_dim().unwrap(), 64);
    }
}
