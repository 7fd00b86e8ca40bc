//! Locally aware classification head.
//!
//! The local tokens of the encoder are laid out on the `N_C × N_R` patch grid
//! (row-major, as produced by the patch embedding). Each token is blended with
//! the global token, `(Q_j + λG) / (1 + λ)`, and every grid row is averaged into
//! one local vector `L_i`. Grid row `i` then feeds its own classifier `FC_i`;
//! at prediction time the classifiers vote by summing their softmax scores.
//! At test time the concatenation of all `L_i` is the retrieval embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::backbone::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{cst, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Every classifier consumes the global token.
    GlobalOnly,
    /// Row averages of local tokens only (λ = 0).
    LocalOnly,
    /// Globally enhanced local tokens.
    Gelt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// `N_C`: number of grid rows, one classifier each.
    pub grid_rows: usize,
    /// `N_R`: patches per grid row.
    pub grid_cols: usize,
    pub lambda: f64,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub fc_hidden_dim: usize,
    pub token_mode: TokenMode,
}

impl HeadConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Length of the concatenated retrieval embedding.
    pub fn embedding_dim(&self) -> usize {
        self.grid_rows * self.embed_dim
    }

    /// λ actually applied for the configured token mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.token_mode {
            TokenMode::LocalOnly => 0.0,
            _ => self.lambda,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("head.lambda must be a finite value >= 0, got {}", self.lambda));
        }
        for (name, v) in [
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("fc_hidden_dim", self.fc_hidden_dim),
        ] {
            if v == 0 {
                out.push(format!("head.{name} must be positive"));
            }
        }
        out
    }
}

/// Row-averaged globally enhanced local tokens, `N_C × D`.
#[derive(Clone, Copy, Debug)]
pub struct LocalVectors(pub Var);

/// Computes `L_i = (mean_{j in row i} Q_j + λG) / (1 + λ)` for every grid row.
///
/// `local` is `N×D` in row-major grid order, `global` is `1×D`.
pub fn gelt_rows<T: Real>(
    g: &mut Graph<T>,
    local: Var,
    global: Var,
    config: &HeadConfig,
) -> Result<LocalVectors> {
    let (n, d) = g.value(local).dims2()?;
    if n != config.num_patches() {
        return Err(Error::Geometry(format!(
            "{n} local tokens do not fill a {}×{} grid",
            config.grid_rows, config.grid_cols
        )));
    }
    if g.value(global).shape() != [1, d] {
        return Err(Error::dim(format!(
            "global token shape {:?}, expected [1, {d}]",
            g.value(global).shape()
        )));
    }
    let rows: Vec<Var> = match config.token_mode {
        TokenMode::GlobalOnly => vec![global; config.grid_rows],
        TokenMode::LocalOnly | TokenMode::Gelt => {
            let lambda = config.effective_lambda();
            let weighted_global = g.scale(global, cst(lambda));
            let norm = cst::<T>(1.0 / (1.0 + lambda));
            let mut rows = Vec::with_capacity(config.grid_rows);
            for i in 0..config.grid_rows {
                let row = g.slice_rows(local, i * config.grid_cols, config.grid_cols)?;
                let mean = g.mean_rows(row)?;
                let blended = g.add(mean, weighted_global)?;
                rows.push(g.scale(blended, norm));
            }
            rows
        }
    };
    Ok(LocalVectors(g.concat_rows(&rows)?))
}

/// `affine → batch norm → ReLU → affine`, one per grid row.
#[derive(Clone, Debug)]
pub struct FcClassifier {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: BufferId,
    pub bn_var: BufferId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Pending running-statistics update for one classifier's batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

#[derive(Clone, Debug)]
pub struct HeadOutput<T> {
    /// Per classifier `i`: logits `batch × num_classes`.
    pub logits: Vec<Var>,
    pub bn_updates: Vec<BatchNormUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct LaHead {
    pub config: HeadConfig,
    pub classifiers: Vec<FcClassifier>,
}

impl LaHead {
    /// Registers `grid_rows` independent classifiers under `head.fc.{i}`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &HeadConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (d, h, c) = (config.embed_dim, config.fc_hidden_dim, config.num_classes);
        let mut classifiers = Vec::with_capacity(config.grid_rows);
        for i in 0..config.grid_rows {
            let p = format!("head.fc.{i}");
            classifiers.push(FcClassifier {
                fc1_w: store.add_param(format!("{p}.fc1.weight"), Tensor::randn(&[d, h], INIT_STD, rng))?,
                fc1_b: store.add_param(format!("{p}.fc1.bias"), Tensor::zeros(&[h]))?,
                bn_gamma: store.add_param(format!("{p}.bn.gamma"), Tensor::full(&[h], T::one()))?,
                bn_beta: store.add_param(format!("{p}.bn.beta"), Tensor::zeros(&[h]))?,
                bn_mean: store.add_buffer(format!("{p}.bn.running_mean"), Tensor::zeros(&[h]))?,
                bn_var: store.add_buffer(format!("{p}.bn.running_var"), Tensor::full(&[h], T::one()))?,
                fc2_w: store.add_param(format!("{p}.fc2.weight"), Tensor::randn(&[h, c], INIT_STD, rng))?,
                fc2_b: store.add_param(format!("{p}.fc2.bias"), Tensor::zeros(&[c]))?,
            });
        }
        Ok(Self {
            config: config.clone(),
            classifiers,
        })
    }

    /// `y_i = FC_i(L_i)` for a batch of images.
    ///
    /// Row `i` of every image's local vectors is stacked into a `batch × D`
    /// matrix and passed through classifier `i` only.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        locals: &[LocalVectors],
        mode: Mode,
    ) -> Result<HeadOutput<T>> {
        let nc = self.config.grid_rows;
        if self.classifiers.len() != nc {
            return Err(Error::Config(vec![format!(
                "{} classifiers for {nc} grid rows",
                self.classifiers.len()
            )]));
        }
        for l in locals {
            let (rows, _) = g.value(l.0).dims2()?;
            if rows != nc {
                return Err(Error::Config(vec![format!(
                    "local vectors have {rows} rows, head has {nc} classifiers"
                )]));
            }
        }
        let mut logits = Vec::with_capacity(nc);
        let mut bn_updates = Vec::new();
        for (i, fc) in self.classifiers.iter().enumerate() {
            let rows = locals
                .iter()
                .map(|l| g.slice_rows(l.0, i, 1))
                .collect::<Result<Vec<_>>>()?;
            let x = g.concat_rows(&rows)?;
            let w1 = g.param(store, fc.fc1_w);
            let b1 = g.param(store, fc.fc1_b);
            let gamma = g.param(store, fc.bn_gamma);
            let beta = g.param(store, fc.bn_beta);
            let w2 = g.param(store, fc.fc2_w);
            let b2 = g.param(store, fc.fc2_b);
            let h = g.matmul(x, w1)?;
            let h = g.add_row(h, b1)?;
            let h = match mode {
                Mode::Train => {
                    let (h, stats) = g.batch_norm_train(h, gamma, beta, BN_EPS)?;
                    bn_updates.push(BatchNormUpdate {
                        mean: fc.bn_mean,
                        var: fc.bn_var,
                        stats,
                    });
                    h
                }
                Mode::Eval => g.batch_norm_eval(
                    h,
                    gamma,
                    beta,
                    store.buffer(fc.bn_mean).data(),
                    store.buffer(fc.bn_var).data(),
                    BN_EPS,
                )?,
            };
            let h = g.relu(h);
            let y = g.matmul(h, w2)?;
            logits.push(g.add_row(y, b2)?);
        }
        Ok(HeadOutput { logits, bn_updates })
    }
}

/// Folds batch statistics into the running averages:
/// `running = (1 - momentum)·running + momentum·batch`.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BatchNormUpdate<T>]) {
    let m = cst::<T>(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (buf, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, &b) in store.buffer_mut(buf).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// Regroups per-classifier logits (`N_C` matrices of `batch × C`) into per-image `N_C × C`.
pub fn per_image_logits<T: Real>(g: &Graph<T>, logits: &[Var]) -> Result<Vec<Tensor<T>>> {
    let Some(&first) = logits.first() else {
        return Ok(Vec::new());
    };
    let (batch, c) = g.value(first).dims2()?;
    (0..batch)
        .map(|b| {
            let rows: Vec<Vec<T>> = logits.iter().map(|&y| g.value(y).row(b).to_vec()).collect();
            let t = Tensor::from_rows(&rows)?;
            debug_assert_eq!(t.shape(), &[logits.len(), c]);
            Ok(t)
        })
        .collect()
}

/// `score = Σ_i softmax(y_i)`, `prediction = argmax(score)` (lowest index on ties).
pub fn vote<T: Real>(y: &Tensor<T>) -> Result<(Vec<T>, usize)> {
    let (nc, c) = y.dims2()?;
    let mut score = vec![T::zero(); c];
    for i in 0..nc {
        let mut row = y.row(i).to_vec();
        crate::autodiff::softmax_in_place(&mut row);
        for (s, p) in score.iter_mut().zip(row) {
            *s = *s + p;
        }
    }
    let mut best = 0;
    for (k, &s) in score.iter().enumerate() {
        if s > score[best] {
            best = k;
        }
    }
    Ok((score, best))
}

/// Unweighted mean over classifiers of each classifier's cross-entropy on the identity labels.
pub fn train_loss<T: Real>(g: &mut Graph<T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Config(vec!["no classifiers".into()]));
    }
    let losses = logits
        .iter()
        .map(|&y| g.cross_entropy(y, labels))
        .collect::<Result<Vec<_>>>()?;
    let rows = losses
        .iter()
        .map(|&l| g.reshape(l, &[1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&rows)?;
    Ok(g.mean(stacked))
}

/// Concatenates `L_0 .. L_{N_C-1}` in row order.
pub fn embedding<T: Real>(l: &Tensor<T>) -> Vec<T> {
    l.data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradMode;
    use crate::gradcheck::{gradcheck_params, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(rows: usize, cols: usize, d: usize, lambda: f64, mode: TokenMode) -> HeadConfig {
        HeadConfig {
            grid_rows: rows,
            grid_cols: cols,
            lambda,
            embed_dim: d,
            num_classes: 5,
            fc_hidden_dim: 6,
            token_mode: mode,
        }
    }

    fn gelt(q: &Tensor<f64>, gl: &Tensor<f64>, c: &HeadConfig) -> Tensor<f64> {
        let mut g = Graph::new(GradMode::None);
        let qv = g.input(q.clone());
        let gv = g.input(gl.clone());
        let l = gelt_rows(&mut g, qv, gv, c).unwrap();
        g.value(l.0).clone()
    }

    #[test]
    fn hand_example() {
        let q = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let gl = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let l = gelt(&q, &gl, &cfg(1, 2, 2, 1.0, TokenMode::Gelt));
        assert_eq!(l.data(), &[1.0, 1.0]);
    }

    #[test]
    fn lambda_zero_is_row_mean() {
        let q = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![10.0, 20.0],
            vec![30.0, 40.0],
        ])
        .unwrap();
        let gl = Tensor::from_rows(&[vec![100.0, 100.0]]).unwrap();
        let l = gelt(&q, &gl, &cfg(2, 2, 2, 0.0, TokenMode::Gelt));
        assert_eq!(l.data(), &[2.0, 3.0, 20.0, 30.0]);
        let l = gelt(&q, &gl, &cfg(2, 2, 2, 0.8, TokenMode::LocalOnly));
        assert_eq!(l.data(), &[2.0, 3.0, 20.0, 30.0]);
    }

    #[test]
    fn global_only_repeats_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let gl = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let l = gelt(&q, &gl, &cfg(3, 2, 3, 0.8, TokenMode::GlobalOnly));
        for i in 0..3 {
            assert_eq!(l.row(i), gl.row(0));
        }
    }

    #[test]
    fn grid_mismatch_is_geometry_error() {
        let mut g = Graph::<f64>::new(GradMode::None);
        let q = g.input(Tensor::zeros(&[5, 2]));
        let gl = g.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            gelt_rows(&mut g, q, gl, &cfg(2, 2, 2, 1.0, TokenMode::Gelt)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn vote_hand_example() {
        let ln2 = 2f64.ln();
        let y = Tensor::from_rows(&[vec![ln2, 0.0], vec![0.0, ln2], vec![ln2, 0.0]]).unwrap();
        let (score, pred) = vote(&y).unwrap();
        assert!((score[0] - 5.0 / 3.0).abs() < 1e-12);
        assert!((score[1] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(pred, 0);
    }

    #[test]
    fn zero_weights_give_zero_logits_and_rows_are_independent() {
        let c = cfg(3, 2, 4, 0.8, TokenMode::Gelt);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = LaHead::new(&c, &mut store, &mut rng).unwrap();
        let l = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let run = |store: &ParamStore<f64>, l: &Tensor<f64>| {
            let mut g = Graph::new(GradMode::None);
            let lv = LocalVectors(g.input(l.clone()));
            let out = head.forward(&mut g, store, &[lv], Mode::Eval).unwrap();
            per_image_logits(&g, &out.logits).unwrap().remove(0)
        };
        let y0 = run(&store, &l);
        let mut l2 = l.clone();
        l2.data_mut()[4] += 0.5; // row 1
        let y1 = run(&store, &l2);
        assert_eq!(y0.row(0), y1.row(0));
        assert_eq!(y0.row(2), y1.row(2));
        assert_ne!(y0.row(1), y1.row(1));

        let mut zero = store.clone();
        for p in zero.params_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        assert!(run(&zero, &l).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_count_mismatch() {
        let c = cfg(3, 2, 4, 0.8, TokenMode::Gelt);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = LaHead::new(&c, &mut store, &mut rng).unwrap();
        head.classifiers.pop();
        let mut g = Graph::new(GradMode::None);
        let lv = LocalVectors(g.input(Tensor::zeros(&[3, 4])));
        assert!(matches!(
            head.forward(&mut g, &store, &[lv], Mode::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let mut g = Graph::<f64>::new(GradMode::None);
        let ys: Vec<Var> = (0..3).map(|_| g.input(Tensor::zeros(&[2, 4]))).collect();
        let loss = train_loss(&mut g, &ys, &[1, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn head_gradcheck_train_mode() {
        let c = cfg(2, 3, 4, 0.8, TokenMode::Gelt);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = LaHead::new(&c, &mut store, &mut rng).unwrap();
        for p in store.params_mut() {
            let scaled: Vec<f64> = p.tensor.data().iter().map(|v| v * 20.0).collect();
            p.tensor.data_mut().copy_from_slice(&scaled);
        }
        let batch: Vec<(Tensor<f64>, Tensor<f64>)> = (0..3)
            .map(|_| (Tensor::randn(&[6, 4], 1.0, &mut rng), Tensor::randn(&[1, 4], 1.0, &mut rng)))
            .collect();
        let labels = [0usize, 4, 2];
        let report = gradcheck_params(
            &store,
            |g, s| {
                let locals = batch
                    .iter()
                    .map(|(q, gl)| {
                        let qv = g.input(q.clone());
                        let gv = g.input(gl.clone());
                        gelt_rows(g, qv, gv, &c)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let out = head.forward(g, s, &locals, Mode::Train)?;
                train_loss(g, &out.logits, &labels)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn embedding_layout() {
        let l = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let e = embedding(&l);
        assert_eq!(&e[0..2], l.row(0));
        assert_eq!(&e[2..4], l.row(1));
        assert_eq!(cfg(14, 14, 768, 0.8, TokenMode::Gelt).embedding_dim(), 10752);
    }
}
