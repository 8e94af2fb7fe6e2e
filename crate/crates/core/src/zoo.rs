//! Heterogeneous client models: each is a feature extractor stacked with a
//! classifier. All architectures share the feature width and class count,
//! which is what lets clients with different backbones exchange per-class
//! features and logits.

use std::fmt;

use crate::error::{FeloError, Result};
use crate::nn::{softmax, LayerSpec, Sequential, Tensor};
use crate::rng::seeded;

/// Hidden-layer recipe per architecture: (depth, width).
const DEFAULT_ZOO: [(usize, usize); 5] = [(1, 32), (1, 64), (2, 128), (2, 192), (3, 256)];

pub const DEFAULT_D_FEATURE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArchitectureId(pub usize);

impl ArchitectureId {
    pub const fn count() -> usize {
        DEFAULT_ZOO.len()
    }

    pub fn all() -> impl Iterator<Item = ArchitectureId> {
        (0..Self::count()).map(ArchitectureId)
    }

    fn recipe(self) -> Result<(usize, usize)> {
        DEFAULT_ZOO.get(self.0).copied().ok_or_else(|| {
            FeloError::config(format!(
                "unknown architecture id {} (zoo has {})",
                self.0,
                DEFAULT_ZOO.len()
            ))
        })
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Layer recipe for one architecture: extractor ends with dense → relu →
/// flatten at `d_feature`; the classifier is a single dense layer to logits.
pub fn layer_recipe(
    arch: ArchitectureId,
    d_in: usize,
    d_feature: usize,
    n_classes: usize,
) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
    if d_in == 0 || d_feature == 0 || n_classes == 0 {
        return Err(FeloError::config(format!(
            "model dims must be positive (d_in={d_in}, d_feature={d_feature}, n_classes={n_classes})"
        )));
    }
    let (depth, width) = arch.recipe()?;
    let mut extractor = Vec::new();
    let mut prev = d_in;
    for _ in 0..depth {
        extractor.push(LayerSpec::dense(prev, width));
        extractor.push(LayerSpec::relu(width));
        prev = width;
    }
    extractor.push(LayerSpec::dense(prev, d_feature));
    extractor.push(LayerSpec::relu(d_feature));
    extractor.push(LayerSpec::flatten(d_feature));
    let classifier = vec![LayerSpec::dense(d_feature, n_classes)];
    Ok((extractor, classifier))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchitectureId,
    extractor: Sequential,
    classifier: Sequential,
    d_in: usize,
    d_feature: usize,
    n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub logits: Tensor,
    pub predictions: Vec<usize>,
}

pub fn build_model(
    arch: ArchitectureId,
    d_in: usize,
    d_feature: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Model> {
    let (ext_specs, cls_specs) = layer_recipe(arch, d_in, d_feature, n_classes)?;
    let mut rng = seeded(seed);
    let extractor = Sequential::from_specs(&ext_specs, &mut rng)?;
    let classifier = Sequential::from_specs(&cls_specs, &mut rng)?;
    Model::from_parts(arch, extractor, classifier)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn from_parts(
        arch: ArchitectureId,
        extractor: Sequential,
        classifier: Sequential,
    ) -> Result<Self> {
        if extractor.out_dim() != classifier.in_dim() {
            return Err(FeloError::config(format!(
                "extractor emits {} features but classifier expects {}",
                extractor.out_dim(),
                classifier.in_dim()
            )));
        }
        Ok(Model {
            arch,
            d_in: extractor.in_dim(),
            d_feature: extractor.out_dim(),
            n_classes: classifier.out_dim(),
            extractor,
            classifier,
        })
    }

    pub fn arch(&self) -> ArchitectureId {
        self.arch
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_feature(&self) -> usize {
        self.d_feature
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn extractor(&self) -> &Sequential {
        &self.extractor
    }

    pub fn classifier(&self) -> &Sequential {
        &self.classifier
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.d_in {
            return Err(FeloError::config(format!(
                "model expects [batch, {}] input, got {:?}",
                self.d_in,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.extractor.forward(x)
    }

    /// Inference pass returning features at the tap, logits and predictions.
    pub fn forward_full(&self, x: &Tensor) -> Result<ForwardOutput> {
        let features = self.extract(x)?;
        let logits = self.classifier.forward(&features)?;
        let probs = softmax(&logits);
        let predictions = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
        Ok(ForwardOutput {
            features,
            logits,
            predictions,
        })
    }

    /// Training pass: records activations for `backward`.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let features = self.extractor.forward_train(x)?;
        let logits = self.classifier.forward_train(&features)?;
        Ok((features, logits))
    }

    /// Backpropagate loss gradients injected at the logits and, optionally,
    /// at the feature tap. Gradients are returned in `params()` order.
    pub fn backward(
        &self,
        feature_grad: Option<&Tensor>,
        logit_grad: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let (mut g_feat, cls_grads) = self.classifier.backward(logit_grad)?;
        if let Some(fg) = feature_grad {
            g_feat.add_assign(fg)?;
        }
        let (_, mut grads) = self.extractor.backward(&g_feat)?;
        grads.extend(cls_grads);
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.extractor.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.extractor.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .extractor
            .param_names()
            .into_iter()
            .map(|n| format!("extractor.{n}"))
            .collect();
        names.extend(
            self.classifier
                .param_names()
                .into_iter()
                .map(|n| format!("classifier.{n}")),
        );
        names
    }

    /// Number of parameter tensors belonging to the extractor.
    pub fn extractor_param_tensors(&self) -> usize {
        self.extractor.params().len()
    }

    pub fn param_count(&self) -> usize {
        self.extractor.param_count() + self.classifier.param_count()
    }

    pub fn cloned_params(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(FeloError::protocol(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        if let Some((s, v)) = slots.iter().zip(values).find(|(s, v)| !s.same_shape(v)) {
            return Err(FeloError::protocol(format!(
                "parameter shape mismatch {:?} vs {:?}",
                s.shape(),
                v.shape()
            )));
        }
        for (s, v) in slots.iter_mut().zip(values) {
            **s = v.clone();
        }
        Ok(())
    }

    pub fn clear_trace(&mut self) {
        self.extractor.clear_trace();
        self.classifier.clear_trace();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_are_deterministic() {
        let a = build_model(ArchitectureId(3), 12, 16, 10, 99).unwrap();
        let b = build_model(ArchitectureId(3), 12, 16, 10, 99).unwrap();
        assert_eq!(a, b);
        let c = build_model(ArchitectureId(3), 12, 16, 10, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_arch_shares_interface() {
        let x = Tensor::filled(&[3, 20], 0.1);
        for arch in ArchitectureId::all() {
            let m = build_model(arch, 20, 16, 10, 1).unwrap();
            assert_eq!(m.extractor().out_dim(), 16);
            assert_eq!(m.classifier().out_dim(), 10);
            let out = m.forward_full(&x).unwrap();
            assert_eq!(out.features.shape(), &[3, 16]);
            assert_eq!(out.logits.shape(), &[3, 10]);
        }
    }

    #[test]
    fn param_counts_increase_with_arch() {
        // Counted from the recipe: Σ over dense layers of in·out + out.
        fn count(arch: ArchitectureId, d_in: usize, d_f: usize, c: usize) -> usize {
            let (e, k) = layer_recipe(arch, d_in, d_f, c).unwrap();
            e.iter()
                .chain(&k)
                .filter(|s| s.kind == crate::nn::LayerKind::Dense)
                .map(|s| s.in_dim * s.out_dim + s.out_dim)
                .sum()
        }
        for (d_in, d_f, c) in [(32, 32, 10), (1, 1, 2), (784, 16, 10)] {
            let counts: Vec<usize> = ArchitectureId::all()
                .map(|a| {
                    let m = build_model(a, d_in, d_f, c, 0).unwrap();
                    assert_eq!(m.param_count(), count(a, d_in, d_f, c));
                    m.param_count()
                })
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        }
        assert_eq!(
            count(ArchitectureId(0), 32, 32, 10),
            32 * 32 + 32 + 32 * 32 + 32 + 32 * 10 + 10
        );
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!(matches!(
            build_model(ArchitectureId(5), 4, 4, 2, 0),
            Err(FeloError::Config(_))
        ));
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.0; 10]), 0);
        let mut row = vec![0.0; 10];
        row[7] = 1.0;
        assert_eq!(argmax(&row), 7);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn features_match_extractor_alone() {
        let m = build_model(ArchitectureId(2), 8, 6, 4, 5).unwrap();
        let x = Tensor::from_rows(&[vec![0.3; 8], vec![-0.2; 8]]).unwrap();
        assert_eq!(m.forward_full(&x).unwrap().features, m.extract(&x).unwrap());
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = build_model(ArchitectureId(0), 8, 6, 4, 5).unwrap();
        assert!(m.forward_full(&Tensor::zeros(&[1, 7])).is_err());
    }

    #[test]
    fn set_params_round_trips() {
        let a = build_model(ArchitectureId(1), 5, 4, 3, 1).unwrap();
        let mut b = build_model(ArchitectureId(1), 5, 4, 3, 2).unwrap();
        b.set_params(&a.cloned_params()).unwrap();
        assert_eq!(a, b);
        let other = build_model(ArchitectureId(2), 5, 4, 3, 1).unwrap();
        assert!(b.set_params(&other.cloned_params()).is_err());
    }
}
