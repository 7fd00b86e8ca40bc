//! Named finite-difference gradient checks: one per differentiable operation,
//! plus encoder block, head and the full model loss, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{split, Backbone, BackboneConfig};
use crate::error::Result;
use crate::gradcheck::{gradcheck_params, gradcheck_with, GradcheckOptions, GradcheckReport};
use crate::head::{gelt_rows, train_loss, HeadConfig, LaHead, Mode, TokenMode};
use crate::model::{LaTransformer, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Difference step of the whole-model check; the loss curvature there makes
/// the truncation error of the default step exceed the tolerance.
pub const END_TO_END_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
    /// `parameter[index]: analytic vs numeric` of the worst coordinate.
    pub worst: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub gradcheck: GradcheckOptions,
    pub end_to_end_step: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            gradcheck: GradcheckOptions::default(),
            end_to_end_step: END_TO_END_STEP,
        }
    }
}

fn result(name: &str, report: GradcheckReport, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        passed: report.max_rel_error < tolerance && report.max_rel_error.is_finite(),
        worst: report
            .worst
            .map(|m| format!("{}[{}]: analytic {:e} vs numeric {:e}", m.name, m.index, m.analytic, m.numeric)),
    }
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output coordinate gets a distinct weight.
fn probe(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.input(w.clone());
    let prod = g.mul(y, wv)?;
    Ok(g.sum(prod))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal values pushed at least `margin` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + margin);
    }
    t
}

type Unary = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// Checks for every differentiable tensor operation.
pub fn op_checks(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;
    let mut cases: Vec<(&str, Tensor<f64>, Unary)> = Vec::new();

    let b = randn(r, &[4, 3]);
    let w = randn(r, &[5, 3]);
    cases.push(("matmul.lhs", randn(r, &[5, 4]), Box::new(move |g, x| {
        let bv = g.input(b.clone());
        let y = g.matmul(x, bv)?;
        probe(g, y, &w)
    })));
    let a = randn(r, &[5, 4]);
    let w = randn(r, &[5, 3]);
    cases.push(("matmul.rhs", randn(r, &[4, 3]), Box::new(move |g, x| {
        let av = g.input(a.clone());
        let y = g.matmul(av, x)?;
        probe(g, y, &w)
    })));
    let w = randn(r, &[4, 3]);
    cases.push(("transpose", randn(r, &[3, 4]), Box::new(move |g, x| {
        let y = g.transpose(x)?;
        probe(g, y, &w)
    })));
    let c = randn(r, &[3, 4]);
    let w = randn(r, &[3, 4]);
    cases.push(("add", randn(r, &[3, 4]), Box::new(move |g, x| {
        let cv = g.input(c.clone());
        let y = g.add(x, cv)?;
        let y = g.mul(y, y)?;
        probe(g, y, &w)
    })));
    let m = randn(r, &[3, 4]);
    let w = randn(r, &[3, 4]);
    cases.push(("add_row.bias", randn(r, &[1, 4]), Box::new(move |g, x| {
        let mv = g.input(m.clone());
        let y = g.add_row(mv, x)?;
        let y = g.mul(y, y)?;
        probe(g, y, &w)
    })));
    let c = randn(r, &[3, 4]);
    let w = randn(r, &[3, 4]);
    cases.push(("mul", randn(r, &[3, 4]), Box::new(move |g, x| {
        let cv = g.input(c.clone());
        let y = g.mul(x, cv)?;
        let y = g.mul(y, x)?;
        probe(g, y, &w)
    })));
    let w = randn(r, &[3, 4]);
    cases.push(("scale", randn(r, &[3, 4]), Box::new(move |g, x| {
        let y = g.scale(x, -2.5);
        probe(g, y, &w)
    })));
    let w = randn(r, &[4, 5]);
    cases.push(("relu", away_from_zero(r, &[4, 5], 0.05), Box::new(move |g, x| {
        let y = g.relu(x);
        probe(g, y, &w)
    })));
    let w = randn(r, &[4, 5]);
    cases.push(("gelu", randn(r, &[4, 5]), Box::new(move |g, x| {
        let y = g.gelu(x);
        probe(g, y, &w)
    })));
    let w = randn(r, &[4, 6]);
    cases.push(("softmax", randn(r, &[4, 6]), Box::new(move |g, x| {
        let y = g.softmax(x);
        probe(g, y, &w)
    })));
    let (gamma, beta) = (randn(r, &[8]), randn(r, &[8]));
    let w = randn(r, &[4, 8]);
    cases.push(("layer_norm.input", randn(r, &[4, 8]), Box::new(move |g, x| {
        let (gv, bv) = (g.input(gamma.clone()), g.input(beta.clone()));
        let y = g.layer_norm(x, gv, bv, 1e-6)?;
        probe(g, y, &w)
    })));
    let (xin, beta) = (randn(r, &[4, 8]), randn(r, &[8]));
    let w = randn(r, &[4, 8]);
    cases.push(("layer_norm.gamma", randn(r, &[8]), Box::new(move |g, x| {
        let (xv, bv) = (g.input(xin.clone()), g.input(beta.clone()));
        let y = g.layer_norm(xv, x, bv, 1e-6)?;
        probe(g, y, &w)
    })));
    let (gamma, beta) = (randn(r, &[4]), randn(r, &[4]));
    let w = randn(r, &[8, 4]);
    cases.push(("batch_norm_train.input", randn(r, &[8, 4]), Box::new(move |g, x| {
        let (gv, bv) = (g.input(gamma.clone()), g.input(beta.clone()));
        let (y, _) = g.batch_norm_train(x, gv, bv, 1e-5)?;
        probe(g, y, &w)
    })));
    let (xin, beta) = (randn(r, &[8, 4]), randn(r, &[4]));
    let w = randn(r, &[8, 4]);
    cases.push(("batch_norm_train.gamma", randn(r, &[4]), Box::new(move |g, x| {
        let (xv, bv) = (g.input(xin.clone()), g.input(beta.clone()));
        let (y, _) = g.batch_norm_train(xv, x, bv, 1e-5)?;
        probe(g, y, &w)
    })));
    let (gamma, beta) = (randn(r, &[4]), randn(r, &[4]));
    let mean: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
    let w = randn(r, &[3, 4]);
    cases.push(("batch_norm_eval.input", randn(r, &[3, 4]), Box::new(move |g, x| {
        let (gv, bv) = (g.input(gamma.clone()), g.input(beta.clone()));
        let y = g.batch_norm_eval(x, gv, bv, &mean, &var, 1e-5)?;
        probe(g, y, &w)
    })));
    let kernel = randn(r, &[3, 2, 2, 2]);
    let w = randn(r, &[3, 3, 3]);
    cases.push(("conv2d.input", randn(r, &[2, 6, 6]), Box::new(move |g, x| {
        let kv = g.input(kernel.clone());
        let y = g.conv2d(x, kv, 2, 0)?;
        probe(g, y, &w)
    })));
    let img = randn(r, &[2, 6, 6]);
    let w = randn(r, &[3, 4, 4]);
    cases.push(("conv2d.kernel.padded", randn(r, &[3, 2, 2, 2]), Box::new(move |g, x| {
        let iv = g.input(img.clone());
        let y = g.conv2d(iv, x, 2, 1)?;
        probe(g, y, &w)
    })));
    let w = randn(r, &[3, 8]);
    cases.push(("reshape", randn(r, &[4, 6]), Box::new(move |g, x| {
        let y = g.reshape(x, &[3, 8])?;
        let y = g.mul(y, y)?;
        probe(g, y, &w)
    })));
    let w = randn(r, &[2, 3]);
    cases.push(("slice", randn(r, &[5, 6]), Box::new(move |g, x| {
        let y = g.slice_rows(x, 1, 2)?;
        let y = g.slice_cols(y, 2, 3)?;
        let y = g.mul(y, y)?;
        probe(g, y, &w)
    })));
    let other = randn(r, &[2, 3]);
    let w = randn(r, &[4, 6]);
    cases.push(("concat", randn(r, &[2, 3]), Box::new(move |g, x| {
        let o = g.input(other.clone());
        let rows = g.concat_rows(&[x, o])?;
        let sq = g.mul(rows, rows)?;
        let y = g.concat_cols(&[rows, sq])?;
        probe(g, y, &w)
    })));
    let w = randn(r, &[1, 4]);
    cases.push(("mean_rows", randn(r, &[5, 4]), Box::new(move |g, x| {
        let sq = g.mul(x, x)?;
        let y = g.mean_rows(sq)?;
        probe(g, y, &w)
    })));
    cases.push(("sum_mean", randn(r, &[3, 4]), Box::new(|g, x| {
        let sq = g.mul(x, x)?;
        let s = g.sum(sq);
        let m = g.mean(x);
        let m2 = g.mul(m, m)?;
        g.add(s, m2)
    })));
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    cases.push(("cross_entropy", randn(r, &[4, 5]), Box::new(move |g, x| g.cross_entropy(x, &labels))));

    cases
        .into_iter()
        .map(|(name, x, f)| Ok(result(name, gradcheck_with(f, &x, &opts.gradcheck)?, opts.tolerance)))
        .collect()
}

fn scale_params(store: &mut ParamStore<f64>, factor: f64) {
    for p in store.params_mut() {
        for v in p.tensor.data_mut() {
            *v *= factor;
        }
    }
}

/// Encoder block with respect to its input, and the head with respect to its parameters.
pub fn component_checks(backbone: &BackboneConfig, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(backbone, &mut store, &mut rng)?;
    let backbone_report = {
        let w = randn(&mut rng, &[bb.config.patch_count()? + 1, backbone.embed_dim]);
        let img = randn(&mut rng, &[backbone.channels_in, backbone.image_height, backbone.image_width]);
        gradcheck_params(
            &store,
            |g, s| {
                let iv = g.input(img.clone());
                let f = bb.forward(g, s, iv)?;
                let (global, local) = split(g, &f)?;
                let both = g.concat_rows(&[global, local])?;
                probe(g, both, &w)
            },
            &opts.gradcheck,
        )?
    };
    // Larger weights keep attention away from uniform.
    scale_params(&mut store, 10.0);
    let z = randn(&mut rng, &[bb.config.patch_count()? + 1, backbone.embed_dim]);
    let w = randn(&mut rng, z.shape());
    let blk = bb.blocks[0].clone();
    let block = gradcheck_with(
        |g, z| {
            let out = bb.encoder_block(g, &store, &blk, z)?;
            probe(g, out, &w)
        },
        &z,
        &opts.gradcheck,
    )?;

    let (rows, cols) = backbone.grid()?;
    let hc = HeadConfig {
        grid_rows: rows,
        grid_cols: cols,
        lambda: 0.8,
        embed_dim: backbone.embed_dim,
        num_classes: 5,
        fc_hidden_dim: 6,
        token_mode: TokenMode::Gelt,
    };
    let mut hstore = ParamStore::<f64>::new();
    let head = LaHead::new(&hc, &mut hstore, &mut rng)?;
    scale_params(&mut hstore, 20.0);
    let batch: Vec<(Tensor<f64>, Tensor<f64>)> = (0..3)
        .map(|_| {
            (
                randn(&mut rng, &[rows * cols, backbone.embed_dim]),
                randn(&mut rng, &[1, backbone.embed_dim]),
            )
        })
        .collect();
    let labels = [0usize, 4, 2];
    let head_report = gradcheck_params(
        &hstore,
        |g, s| {
            let locals = batch
                .iter()
                .map(|(q, gl)| {
                    let (qv, gv) = (g.input(q.clone()), g.input(gl.clone()));
                    gelt_rows(g, qv, gv, &hc)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = head.forward(g, s, &locals, Mode::Train)?;
            train_loss(g, &out.logits, &labels)
        },
        &opts.gradcheck,
    )?;
    Ok(vec![
        result("encoder_block.input", block, opts.tolerance),
        result("backbone.params", backbone_report, opts.tolerance),
        result("head.params", head_report, opts.tolerance),
    ])
}

/// Mean classifier cross-entropy of the whole model on a small random batch,
/// with respect to every parameter, in train mode.
pub fn end_to_end_check(model: &ModelConfig, opts: &CheckOptions) -> Result<CheckResult> {
    let m = LaTransformer::<f64>::new(model, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let b = &model.backbone;
    let images: Vec<Tensor<f64>> = (0..3)
        .map(|_| randn(&mut rng, &[b.channels_in, b.image_height, b.image_width]))
        .collect();
    let labels: Vec<usize> = (0..3).map(|i| i % model.head.num_classes).collect();
    let gc = GradcheckOptions {
        step: opts.end_to_end_step,
        ..opts.gradcheck.clone()
    };
    let report = gradcheck_params(
        &m.store,
        |g, s| Ok(m.loss_with(g, s, &images, &labels, Mode::Train)?.0),
        &gc,
    )?;
    Ok(result("end_to_end.loss", report, opts.tolerance))
}

/// Operation, component and end-to-end checks.
pub fn run_suite(model: &ModelConfig, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(opts)?;
    out.extend(component_checks(&model.backbone, opts)?);
    out.push(end_to_end_check(model, opts)?);
    Ok(out)
}
