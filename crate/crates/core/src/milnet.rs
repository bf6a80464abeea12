//! Attention-based deep MIL: a LeNet-style instance encoder, attention
//! pooling over instance embeddings, and a sigmoid bag classifier.
//!
//! For a bag with instance embeddings `h_1..h_K` the attention weights are
//! `a_k = softmax_k(wᵀ tanh(V h_k))` and the bag embedding is
//! `z = Σ_k a_k h_k`. The classifier maps `z` to `P(Y = 1)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{Bag, PATCH_PIXELS, PATCH_SIZE};
use crate::numcore::tape::{sigmoid, softmax_f64, LOG_CLAMP};
use crate::numcore::{forward_layer, init, Activation, BoundLayer, LayerKind, LayerParams, Real, Tape, Tensor, Var};
use crate::ssl::{SslHead, SslTask};
use crate::{Error, Result};

/// Architecture hyperparameters.
///
/// The encoder is three `conv(k, 1, 0) + ReLU + maxpool(2, 2)` blocks followed
/// by `fc-M + ReLU`. With 60×60 patches and `k = 5` the spatial extent traces
/// 60 → 56 → 28 → 24 → 12 → 8 → 4, so the flattened conv output is
/// `channels[2] · 4 · 4` (768 at the default widths). Flattening is
/// channel-major, then row, then column.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MilConfig {
    pub channels: [usize; 3],
    pub kernel: usize,
    /// Instance embedding size `M`.
    pub feature_dim: usize,
    /// Attention hidden size `L`.
    pub attention_dim: usize,
    pub threshold: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            channels: [36, 36, 48],
            kernel: 5,
            feature_dim: 512,
            attention_dim: 128,
            threshold: 0.5,
        }
    }
}

impl MilConfig {
    /// Small widths (M = 8, L = 4) for fast gradient checks.
    pub fn reduced() -> Self {
        Self {
            channels: [2, 2, 3],
            kernel: 5,
            feature_dim: 8,
            attention_dim: 4,
            threshold: 0.5,
        }
    }

    /// Shape of the final conv block's output for one patch: `(C, H, W)`.
    pub fn conv_output(&self) -> Result<(usize, usize, usize)> {
        let mut side = PATCH_SIZE;
        for _ in 0..3 {
            side = side.checked_sub(self.kernel - 1).filter(|s| *s >= 2).ok_or_else(|| {
                Error::contract(format!(
                    "kernel {} too large for {PATCH_SIZE}×{PATCH_SIZE} patches",
                    self.kernel
                ))
            })? / 2;
        }
        Ok((self.channels[2], side, side))
    }

    pub fn flattened_features(&self) -> Result<usize> {
        let (c, h, w) = self.conv_output()?;
        Ok(c * h * w)
    }

    fn encoder_kinds(&self) -> Result<Vec<LayerKind>> {
        let mut kinds = Vec::new();
        let mut in_channels = 1;
        for &out_channels in &self.channels {
            kinds.push(LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel: self.kernel,
                stride: 1,
                padding: 0,
            });
            kinds.push(LayerKind::Activation(Activation::Relu));
            kinds.push(LayerKind::MaxPool2d { kernel: 2, stride: 2 });
            in_channels = out_channels;
        }
        kinds.push(LayerKind::FullyConnected {
            in_features: self.flattened_features()?,
            out_features: self.feature_dim,
        });
        kinds.push(LayerKind::Activation(Activation::Relu));
        Ok(kinds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel<T> {
    pub config: MilConfig,
    pub extractor: Vec<LayerParams<T>>,
    /// `V ∈ R^{L×M}`.
    pub attention_v: Tensor<T>,
    /// `w ∈ R^L`, stored as a `1 × L` matrix.
    pub attention_w: Tensor<T>,
    /// Fully connected `M → 1`; the sigmoid is applied on top.
    pub classifier: LayerParams<T>,
    pub ssl_head: Option<SslHead<T>>,
}

/// Tape handles for every parameter of a [`MilModel`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub extractor: Vec<BoundLayer>,
    pub attention_v: Var,
    pub attention_w: Var,
    pub classifier: BoundLayer,
    pub ssl_head: Option<crate::ssl::BoundHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    /// `P(Y = 1)`.
    pub probability: f64,
    pub label: u8,
    pub attention: Vec<f64>,
    pub bag_embedding: Vec<f64>,
}

/// Result of attention pooling over a `K × M` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub bag_embedding: Vec<f64>,
    pub attention: Vec<f64>,
}

impl<T: Real> MilModel<T> {
    pub fn new<R: Rng + ?Sized>(config: MilConfig, ssl_task: SslTask, ssl_hidden: usize, rng: &mut R) -> Result<Self> {
        let extractor = config
            .encoder_kinds()?
            .into_iter()
            .map(|kind| LayerParams::init(kind, rng))
            .collect();
        let (m, l) = (config.feature_dim, config.attention_dim);
        let attention_v = init::glorot_uniform(&[l, m], m, l, rng);
        let attention_w = init::glorot_uniform(&[1, l], l, 1, rng);
        let classifier = LayerParams::init(
            LayerKind::FullyConnected {
                in_features: m,
                out_features: 1,
            },
            rng,
        );
        let ssl_head = match ssl_task {
            SslTask::None => None,
            task => Some(SslHead::new(task, m, ssl_hidden, rng)),
        };
        Ok(Self {
            config,
            extractor,
            attention_v,
            attention_w,
            classifier,
            ssl_head,
        })
    }

    /// All trainable tensors in a fixed order: encoder layers, `V`, `w`,
    /// classifier, then the pretext head.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.extractor.iter().flat_map(|l| l.params()).collect();
        out.push(&self.attention_v);
        out.push(&self.attention_w);
        out.extend(self.classifier.params());
        if let Some(head) = &self.ssl_head {
            out.extend(head.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.extractor.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.push(&mut self.attention_v);
        out.push(&mut self.attention_w);
        out.extend(self.classifier.params_mut());
        if let Some(head) = &mut self.ssl_head {
            out.extend(head.params_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            extractor: self.extractor.iter().map(|l| l.bind(tape)).collect(),
            attention_v: tape.param(&self.attention_v),
            attention_w: tape.param(&self.attention_w),
            classifier: self.classifier.bind(tape),
            ssl_head: self.ssl_head.as_ref().map(|h| h.bind(tape)),
        }
    }

    /// Adds the gradients recorded on `tape` into the model's accumulators.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &BoundModel) {
        for (layer, b) in self.extractor.iter_mut().zip(&bound.extractor) {
            layer.absorb_grads(tape, b);
        }
        for (tensor, var) in [
            (&mut self.attention_v, bound.attention_v),
            (&mut self.attention_w, bound.attention_w),
        ] {
            if let Some(g) = tape.grad(var) {
                tensor.accumulate_grad(g);
            }
        }
        self.classifier.absorb_grads(tape, &bound.classifier);
        if let (Some(head), Some(b)) = (self.ssl_head.as_mut(), bound.ssl_head.as_ref()) {
            head.absorb_grads(tape, b);
        }
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> MilModel<U> {
        let layer = |l: &LayerParams<T>| LayerParams {
            kind: l.kind,
            weight: l.weight.as_ref().map(|w| w.cast::<U>().with_grad()),
            bias: l.bias.as_ref().map(|b| b.cast::<U>().with_grad()),
        };
        MilModel {
            config: self.config,
            extractor: self.extractor.iter().map(layer).collect(),
            attention_v: self.attention_v.cast::<U>().with_grad(),
            attention_w: self.attention_w.cast::<U>().with_grad(),
            classifier: layer(&self.classifier),
            ssl_head: self.ssl_head.as_ref().map(|h| h.cast::<U>()),
        }
    }
}

/// Stacks a bag's patches into a `K × 1 × 60 × 60` tensor.
pub fn bag_tensor<T: Real>(bag: &Bag) -> Result<Tensor<T>> {
    if bag.instances.is_empty() {
        return Err(Error::EmptyBag);
    }
    let mut data = Vec::with_capacity(bag.instances.len() * PATCH_PIXELS);
    for inst in &bag.instances {
        if inst.pixels.len() != PATCH_PIXELS {
            return Err(Error::dimension(
                "extractor",
                format!("{PATCH_SIZE}×{PATCH_SIZE} patch"),
                format!("{} pixels", inst.pixels.len()),
            ));
        }
        data.extend(inst.pixels.iter().map(|&p| T::from_f64(f64::from(p))));
    }
    Tensor::new(&[bag.instances.len(), 1, PATCH_SIZE, PATCH_SIZE], data)
}

/// Runs the encoder on a `K × 1 × 60 × 60` input, returning `K × M`.
pub fn encode_on_tape<T: Real>(tape: &mut Tape<T>, model: &BoundModel, input: Var) -> Result<Var> {
    let mut x = input;
    for layer in &model.extractor {
        if matches!(layer.kind, LayerKind::FullyConnected { .. }) && tape.shape(x).len() == 4 {
            let s = tape.shape(x).to_vec();
            x = tape.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
        }
        x = forward_layer(tape, x, layer)?;
    }
    Ok(x)
}

/// Pre-softmax attention scores `wᵀ tanh(V h_k)` as a `K × 1` column.
pub fn attention_scores_on_tape<T: Real>(tape: &mut Tape<T>, model: &BoundModel, features: Var) -> Result<Var> {
    let hidden = tape.linear(features, model.attention_v, None)?;
    let hidden = tape.tanh(hidden);
    tape.linear(hidden, model.attention_w, None)
}

/// Attention pooling on the tape. Returns `(z: 1 × M, a: 1 × K)`.
pub fn attention_pool_on_tape<T: Real>(tape: &mut Tape<T>, model: &BoundModel, features: Var) -> Result<(Var, Var)> {
    let k = tape.shape(features)[0];
    if k == 0 {
        return Err(Error::EmptyBag);
    }
    let scores = attention_scores_on_tape(tape, model, features)?;
    let scores = tape.reshape(scores, &[1, k])?;
    let weights = tape.softmax_rows(scores)?;
    let pooled = tape.matmul(weights, features)?;
    Ok((pooled, weights))
}

/// Graph of one bag through encoder, pooling and classifier.
#[derive(Debug, Clone, Copy)]
pub struct BagGraph {
    pub features: Var,
    pub attention: Var,
    pub bag_embedding: Var,
    /// Classifier output before the sigmoid, `1 × 1`.
    pub logit: Var,
}

pub fn bag_forward_on_tape<T: Real>(tape: &mut Tape<T>, model: &BoundModel, bag: &Bag) -> Result<BagGraph> {
    let input = tape.constant(bag_tensor::<T>(bag)?);
    let features = encode_on_tape(tape, model, input)?;
    let (bag_embedding, attention) = attention_pool_on_tape(tape, model, features)?;
    let logit = crate::numcore::forward_layer(tape, bag_embedding, &model.classifier)?;
    Ok(BagGraph {
        features,
        attention,
        bag_embedding,
        logit,
    })
}

fn as_f64<T: Real>(values: &[T]) -> Vec<f64> {
    values.iter().map(|v| v.as_f64()).collect()
}

/// Instance embeddings `h_k` as a `K × M` tensor.
pub fn extract_features<T: Real>(bag: &Bag, model: &MilModel<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let input = tape.constant(bag_tensor::<T>(bag)?);
    let features = encode_on_tape(&mut tape, &bound, input)?;
    Ok(tape.value(features).clone())
}

/// `wᵀ tanh(V h_k)` for every row of a `K × M` feature matrix.
pub fn attention_scores<T: Real>(features: &Tensor<T>, model: &MilModel<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let h = tape.constant(features.clone());
    let scores = attention_scores_on_tape(&mut tape, &bound, h)?;
    Ok(as_f64(tape.value(scores).data()))
}

pub fn attention_pool<T: Real>(features: &Tensor<T>, model: &MilModel<T>) -> Result<Pooled> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != model.config.feature_dim {
        return Err(Error::dimension(
            "attention",
            format!("K×{}", model.config.feature_dim),
            format!("{shape:?}"),
        ));
    }
    if shape[0] == 0 {
        return Err(Error::EmptyBag);
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let h = tape.constant(features.clone());
    let (z, a) = attention_pool_on_tape(&mut tape, &bound, h)?;
    Ok(Pooled {
        bag_embedding: as_f64(tape.value(z).data()),
        attention: as_f64(tape.value(a).data()),
    })
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    softmax_f64(scores)
}

pub fn predict<T: Real>(bag: &Bag, model: &MilModel<T>) -> Result<BagPrediction> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let graph = bag_forward_on_tape(&mut tape, &bound, bag)?;
    Ok(prediction_from_graph(&tape, &graph, model.config.threshold))
}

pub fn prediction_from_graph<T: Real>(tape: &Tape<T>, graph: &BagGraph, threshold: f64) -> BagPrediction {
    let probability = sigmoid(tape.scalar(graph.logit).as_f64());
    BagPrediction {
        probability,
        label: classify(probability, threshold),
        attention: as_f64(tape.value(graph.attention).data()),
        bag_embedding: as_f64(tape.value(graph.bag_embedding).data()),
    }
}

/// Positive iff `probability ≥ threshold`.
pub fn classify(probability: f64, threshold: f64) -> u8 {
    u8::from(probability >= threshold)
}

/// Mean binary cross-entropy over bags, logarithm arguments clamped to
/// `[1e-12, 1]`.
pub fn mil_loss(predictions: &[BagPrediction], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "mil_loss: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let q = if y == 1 { p.probability } else { 1.0 - p.probability };
            -num_traits::Float::ln(q.clamp(LOG_CLAMP, 1.0))
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Renormalises attention so that the weights within each slice sum to one.
pub fn rescale_attention_by_slice(attention: &[f64], slice_of: &[u32]) -> Result<Vec<f64>> {
    if attention.len() != slice_of.len() {
        return Err(Error::contract(format!(
            "{} attention weights for {} slice indices",
            attention.len(),
            slice_of.len()
        )));
    }
    let mut mass: BTreeMap<u32, f64> = BTreeMap::new();
    for (&a, &s) in attention.iter().zip(slice_of) {
        *mass.entry(s).or_default() += a;
    }
    Ok(attention.iter().zip(slice_of).map(|(&a, s)| a / mass[s]).collect())
}

/// Index of the highest attention weight; the lowest index wins ties.
pub fn key_instance(attention: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in attention.iter().enumerate() {
        if best.is_none_or(|b| a > attention[b]) {
            best = Some(i);
        }
    }
    best
}

/// Prediction plus slice-rescaled attention, as used by the attention export.
pub fn attention_by_slice<T: Real>(bag: &Bag, model: &MilModel<T>) -> Result<(BagPrediction, Vec<f64>)> {
    let prediction = predict(bag, model)?;
    let slices: Vec<u32> = bag.instances.iter().map(|i| i.slice_index).collect();
    let rescaled = rescale_attention_by_slice(&prediction.attention, &slices)?;
    Ok((prediction, rescaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use alloc::string::ToString;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_bag(k: usize, seed: u64) -> Bag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances = (0..k)
            .map(|i| Instance {
                pixels: (0..PATCH_PIXELS).map(|_| rng.random::<f32>()).collect(),
                slice_index: (i / 12) as u32,
                grid_position: (i % 12) as u8,
                metadata_valid: true,
            })
            .collect();
        Bag {
            id: "b".to_string(),
            label: 1,
            instances,
            is_virtual: false,
        }
    }

    fn reduced_model(seed: u64) -> MilModel<f64> {
        MilModel::new(
            MilConfig::reduced(),
            SslTask::None,
            4,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn default_flatten_size_is_768() {
        assert_eq!(MilConfig::default().conv_output().unwrap(), (48, 4, 4));
        assert_eq!(MilConfig::default().flattened_features().unwrap(), 768);
    }

    #[test]
    fn features_are_k_by_m() {
        let model = reduced_model(1);
        let bag = random_bag(5, 2);
        let h = extract_features(&bag, &model).unwrap();
        assert_eq!(h.shape(), &[5, 8]);
    }

    #[test]
    fn single_instance_gets_all_attention() {
        let model = reduced_model(3);
        let h = Tensor::from_slice(&[1, 8], &[0.3, -0.1, 0.2, 0.0, 0.5, 0.9, -0.4, 0.1]).unwrap();
        let pooled = attention_pool(&h, &model).unwrap();
        assert_eq!(pooled.attention, vec![1.0]);
        for (z, h) in pooled.bag_embedding.iter().zip(h.data()) {
            assert!((z - h).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_instances_share_attention() {
        let model = reduced_model(4);
        let row = [0.3, -0.1, 0.2, 0.0, 0.5, 0.9, -0.4, 0.1];
        let h = Tensor::from_slice(&[2, 8], &[row, row].concat()).unwrap();
        let pooled = attention_pool(&h, &model).unwrap();
        assert_eq!(pooled.attention, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_feature_matrix_is_an_error() {
        let model = reduced_model(5);
        let h = Tensor::<f64>::zeros(&[0, 8]);
        assert_eq!(attention_pool(&h, &model), Err(Error::EmptyBag));
    }

    #[test]
    fn zero_classifier_predicts_one_half_and_positive() {
        let mut model = reduced_model(6);
        for p in model.classifier.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let pred = predict(&random_bag(3, 7), &model).unwrap();
        assert_eq!(pred.probability, 0.5);
        assert_eq!(pred.label, 1);
    }

    #[test]
    fn mil_loss_values() {
        let p = |probability: f64| BagPrediction {
            probability,
            label: classify(probability, 0.5),
            attention: vec![],
            bag_embedding: vec![],
        };
        let ln2 = core::f64::consts::LN_2;
        assert!((mil_loss(&[p(0.5)], &[1]).unwrap() - ln2).abs() < 1e-15);
        assert!((mil_loss(&[p(0.5)], &[0]).unwrap() - ln2).abs() < 1e-15);
        assert!(mil_loss(&[p(1.0 - 1e-12)], &[1]).unwrap() <= 1e-7);
        let batch = mil_loss(&[p(0.9), p(0.2)], &[1, 0]).unwrap();
        let oracle = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0;
        assert!((batch - oracle).abs() < 1e-15);
        assert!((batch - 0.16425).abs() < 1e-5);
        assert!(mil_loss(&[p(0.0)], &[1]).unwrap().is_finite());
    }

    #[test]
    fn slice_rescaling() {
        let a = [0.1, 0.3, 0.2, 0.4];
        let single = rescale_attention_by_slice(&a, &[0, 0, 0, 0]).unwrap();
        for (x, y) in single.iter().zip(a) {
            assert!((x - y).abs() < 1e-15);
        }
        let two = rescale_attention_by_slice(&a, &[0, 0, 1, 1]).unwrap();
        assert!((two[0] + two[1] - 1.0).abs() < 1e-15);
        assert!((two[2] + two[3] - 1.0).abs() < 1e-15);
        assert!((two[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn wrong_patch_size_is_a_dimension_error() {
        let mut bag = random_bag(2, 8);
        bag.instances[1].pixels.truncate(100);
        let model = reduced_model(9);
        assert!(matches!(extract_features(&bag, &model), Err(Error::Dimension { .. })));
    }

    #[test]
    fn key_instance_prefers_lowest_index_on_ties() {
        assert_eq!(key_instance(&[0.2, 0.4, 0.4]), Some(1));
        assert_eq!(key_instance(&[]), None);
    }
}
