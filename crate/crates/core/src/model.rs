use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMode, Graph, Var};
use crate::backbone::{split, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{
    apply_bn_updates, gelt_rows, per_image_logits, train_loss, vote, BatchNormUpdate, HeadConfig,
    LaHead, LocalVectors, Mode,
};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.backbone.problems();
        out.extend(self.head.problems());
        if let Ok((rows, cols)) = self.backbone.grid() {
            let n = rows * cols;
            let root = (n as f64).sqrt().round() as usize;
            if root * root != n {
                out.push(format!("patch count {n} is not a perfect square"));
            }
            if self.head.grid_rows * self.head.grid_cols != n {
                out.push(format!(
                    "head grid {}×{} does not cover {n} patches",
                    self.head.grid_rows, self.head.grid_cols
                ));
            } else if (self.head.grid_rows, self.head.grid_cols) != (rows, cols) {
                out.push(format!(
                    "head grid {}×{} does not match patch grid {rows}×{cols}",
                    self.head.grid_rows, self.head.grid_cols
                ));
            }
        }
        if self.head.embed_dim != self.backbone.embed_dim {
            out.push(format!(
                "head.embed_dim {} differs from backbone.embed_dim {}",
                self.head.embed_dim, self.backbone.embed_dim
            ));
        }
        out
    }
}

/// Graph handles produced by a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward<T> {
    pub locals: Vec<LocalVectors>,
    pub logits: Vec<Var>,
    pub bn_updates: Vec<BatchNormUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct LaTransformer<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: LaHead,
}

impl<T: Real> LaTransformer<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng)?;
        let head = LaHead::new(&config.head, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
        })
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> LaTransformer<U> {
        LaTransformer {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.head.embedding_dim()
    }

    /// Local vectors of one image.
    pub fn local_vectors(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<LocalVectors> {
        let f = self.backbone.forward(g, store, image)?;
        let (global, local) = split(g, &f)?;
        gelt_rows(g, local, global, &self.config.head)
    }

    /// Forward pass of a batch through backbone and head, parameterized by `store`
    /// so gradient checks can substitute perturbed copies.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[Tensor<T>],
        mode: Mode,
    ) -> Result<BatchForward<T>> {
        let locals = images
            .iter()
            .map(|img| {
                let v = g.input(img.clone());
                self.local_vectors(g, store, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.head.forward(g, store, &locals, mode)?;
        Ok(BatchForward {
            locals,
            logits: out.logits,
            bn_updates: out.bn_updates,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, images: &[Tensor<T>], mode: Mode) -> Result<BatchForward<T>> {
        self.forward_with(g, &self.store, images, mode)
    }

    /// Mean per-classifier cross-entropy of a batch.
    pub fn loss_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[Tensor<T>],
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Var, BatchForward<T>)> {
        let fwd = self.forward_with(g, store, images, mode)?;
        let loss = train_loss(g, &fwd.logits, labels)?;
        Ok((loss, fwd))
    }

    /// One optimization-ready pass: forward in train mode, backward, gradients written into
    /// the store, running statistics updated. Returns the batch loss.
    pub fn train_batch(&mut self, images: &[Tensor<T>], labels: &[usize]) -> Result<T> {
        let mut g = Graph::new(GradMode::Trainable);
        let (loss, fwd) = self.loss_with(&mut g, &self.store, images, labels, Mode::Train)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = g.backward(loss)?;
        self.store.zero_grads();
        grads.write_param_grads(&g, &mut self.store);
        apply_bn_updates(&mut self.store, &fwd.bn_updates);
        Ok(value)
    }

    /// Retrieval embedding of one image: the concatenated local vectors.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new(GradMode::None);
        let v = g.input(image.clone());
        let l = self.local_vectors(&mut g, &self.store, v)?;
        Ok(crate::head::embedding(g.value(l.0)))
    }

    /// Eval-mode vote of the classifier ensemble: `(score, predicted class)`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(Vec<T>, usize)> {
        let mut g = Graph::new(GradMode::None);
        let fwd = self.forward(&mut g, std::slice::from_ref(image), Mode::Eval)?;
        let y = per_image_logits(&g, &fwd.logits)?.remove(0);
        vote(&y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::TokenMode;

    pub(crate) fn toy_config(num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            head: HeadConfig {
                grid_rows: 4,
                grid_cols: 4,
                lambda: 0.8,
                embed_dim: 16,
                num_classes,
                fc_hidden_dim: 32,
                token_mode: TokenMode::Gelt,
            },
        }
    }

    #[test]
    fn config_cross_checks() {
        let mut c = toy_config(4);
        assert!(c.problems().is_empty());
        c.head.grid_rows = 2;
        c.head.grid_cols = 8;
        assert_eq!(c.problems().len(), 1);
        c.head.grid_rows = 3;
        assert!(!c.problems().is_empty());
        let mut c = toy_config(4);
        c.backbone.image_width = 40;
        assert!(c.problems().iter().any(|p| p.contains("perfect square")));
    }

    #[test]
    fn embedding_matches_local_vectors() {
        let model = LaTransformer::<f32>::new(&toy_config(4), 1).unwrap();
        let img = Tensor::full(&[3, 32, 32], 0.25f32);
        let e = model.embed(&img).unwrap();
        assert_eq!(e.len(), 64);
        let mut g = Graph::new(GradMode::None);
        let v = g.input(img);
        let l = model.local_vectors(&mut g, &model.store, v).unwrap();
        let l = g.value(l.0);
        for i in 0..4 {
            assert_eq!(&e[i * 16..(i + 1) * 16], l.row(i));
        }
    }

    #[test]
    fn one_adam_step_reduces_loss() {
        use crate::optim::{AdamConfig, AdamState};
        let mut model = LaTransformer::<f64>::new(&toy_config(3), 2).unwrap();
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(3);
        let images: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[3, 32, 32], 1.0, &mut rng)).collect();
        let labels = [0, 1, 2, 0];
        let mut adam = AdamState::new(AdamConfig::default(), 1e-3);
        let before = model.train_batch(&images, &labels).unwrap();
        adam.step(&mut model.store).unwrap();
        let mut g = Graph::new(GradMode::None);
        let (loss, _) = model
            .loss_with(&mut g, &model.store, &images, &labels, Mode::Train)
            .unwrap();
        assert!(g.value(loss).data()[0] < before);
    }
}
