//! Central finite differences (step 1e-5, f64) against the tape's gradients
//! for every differentiable op and for the whole classifier.

use formed_core::backbone::{Backbone, BackboneConfig};
use formed_core::classifier::{logits_from_features, logits_from_input, SharedDecoder, TaskParams};
use formed_core::nn::TaskKind;
use formed_core::rng::{gaussian, rng};
use formed_core::tape::LossKind;
use formed_core::{AttnMask, Gradients, Graph, Module, Parameter, Result, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

struct Leaves(Vec<Parameter<f64>>);

impl Module<f64> for Leaves {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        self.0.iter().for_each(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        self.0.iter_mut().for_each(f);
    }
}

fn leaf(name: &str, shape: &[usize], seed: u64) -> Parameter<f64> {
    Parameter::new(name, gaussian(&mut rng(seed), shape, 1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares every scalar of every trainable parameter.
fn gradcheck<M: Module<f64>>(m: &mut M, loss: impl Fn(&M) -> (f64, Gradients<f64>)) {
    let (_, grads) = loss(m);
    let mut names = vec![];
    m.visit(&mut |p| {
        if p.trainable {
            names.push((p.name().to_string(), p.numel()))
        }
    });
    assert!(!names.is_empty());
    let mut worst = 0.0f64;
    for (name, n) in names {
        let analytic = grads.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let mut f = |delta: f64| {
                m.visit_mut(&mut |p| {
                    if p.name() == name {
                        let mut v = p.value().clone();
                        v.data_mut()[i] += delta;
                        p.set_value(v).unwrap();
                    }
                });
                loss(m).0
            };
            let plus = f(STEP);
            let minus = f(-2.0 * STEP);
            f(STEP);
            let numeric = (plus - minus) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            worst = worst.max(e);
            assert!(e < TOL, "{name}[{i}]: analytic {} vs numeric {numeric} (rel {e:e})", analytic[i]);
        }
    }
    assert!(worst < TOL);
}

/// Projects any output onto a fixed random direction to get a scalar.
fn project<'a>(g: &mut Graph<'a, f64>, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).len();
    let w = g.constant(gaussian(&mut rng(seed ^ 0xabc), &[n, 1], 1.0))?;
    let flat = g.reshape(out, &[1, n])?;
    let y = g.matmul(flat, w)?;
    g.sum(y)
}

/// Runs `build` on the leaves and projects its output.
fn check_op(shapes: &[&[usize]], build: impl for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>) {
    let mut m = Leaves(shapes.iter().enumerate().map(|(i, s)| leaf(&format!("x{i}"), s, 17 + i as u64)).collect());
    gradcheck(&mut m, |m| {
        let mut g = Graph::new();
        let vars: Vec<Var> = m.0.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = if g.value(out).len() == 1 && g.value(out).rank() <= 1 { out } else { project(&mut g, out, 5).unwrap() };
        (g.value(loss).item(), g.backward(loss).unwrap())
    });
}

#[test]
fn matmul() {
    check_op(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn add_bias_add_and_add_all() {
    check_op(&[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op(&[&[2, 2], &[2, 2], &[2, 2]], |g, v| g.add_all(v));
}

#[test]
fn add_with_shared_input() {
    check_op(&[&[3, 2]], |g, v| g.add(v[0], v[0]));
}

#[test]
fn scale_and_swish() {
    check_op(&[&[5]], |g, v| g.scale(v[0], -0.7));
    check_op(&[&[3, 4]], |g, v| g.swish(v[0]));
}

#[test]
fn layer_norm() {
    check_op(&[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn attention_multi_head_with_mask() {
    let keys = [true, false, true, true];
    check_op(&[&[3, 4], &[4, 4], &[4, 4]], |g, v| g.attention(v[0], v[1], v[2], AttnMask::from_keys(3, &keys), 2));
}

#[test]
fn attention_causal_grouped() {
    let valid = [false, true, false, true, true, true];
    check_op(&[&[6, 4], &[6, 4], &[6, 4]], |g, v| {
        g.attention(v[0], v[1], v[2], AttnMask::causal_grouped(2, &valid), 1)
    });
}

#[test]
fn row_ops() {
    check_op(&[&[2, 3]], |g, v| g.repeat_rows(v[0], 3));
    check_op(&[&[4, 3]], |g, v| g.select_row(v[0], 2));
    check_op(&[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]]));
    check_op(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
}

#[test]
fn softmax_each_axis() {
    check_op(&[&[3, 4]], |g, v| g.softmax(v[0], 0));
    check_op(&[&[3, 4]], |g, v| g.softmax(v[0], 1));
    check_op(&[&[2, 3, 2]], |g, v| g.softmax(v[0], 1));
}

#[test]
fn losses() {
    check_op(&[&[4]], |g, v| g.cross_entropy(v[0], 2, LossKind::Softmax));
    check_op(&[&[3]], |g, v| g.cross_entropy(v[0], 0, LossKind::Sigmoid));
    check_op(&[&[2, 3]], |g, v| g.mse(v[0], &[0.5, -1.0, 2.0, 0.0, 0.1, 3.0]));
    check_op(&[&[2, 3]], |g, v| g.sum(v[0]));
}

struct Full {
    backbone: Backbone<f64>,
    sda: SharedDecoder<f64>,
    task: TaskParams<f64>,
}

impl Module<f64> for Full {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        self.backbone.visit(f);
        self.sda.visit(f);
        self.task.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        self.backbone.visit_mut(f);
        self.sda.visit_mut(f);
        self.task.visit_mut(f);
    }
}

fn small_full(kind: TaskKind) -> Full {
    let cfg = BackboneConfig { patch_size: 4, model_dim: 4, layers: 1, heads: 2, max_patches: 4, horizon: 2 };
    let mut backbone = Backbone::new(cfg, 1).unwrap();
    backbone.set_trainable(true);
    Full { backbone, sda: SharedDecoder::new(4, 2, 2).unwrap(), task: TaskParams::new("T", 2, 3, 4, kind, 3).unwrap() }
}

fn input() -> (Vec<f64>, Vec<bool>) {
    let values: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.7).sin()).collect();
    let mut missing = vec![false; 24];
    missing[3] = true;
    missing[13] = true;
    (values, missing)
}

#[test]
fn full_classifier_end_to_end() {
    for kind in [TaskKind::Multiclass, TaskKind::Binary] {
        let mut m = small_full(kind);
        let (values, missing) = input();
        gradcheck(&mut m, |m| {
            let mut g = Graph::new();
            let logits = logits_from_input(&mut g, &m.backbone, &m.sda, &m.task, &values, &missing).unwrap();
            let loss = g.cross_entropy(logits, 1, kind.loss_kind()).unwrap();
            (g.value(loss).item(), g.backward(loss).unwrap())
        });
    }
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let mut m = small_full(TaskKind::Multiclass);
    m.backbone.set_trainable(false);
    let (values, missing) = input();
    let features = m.backbone.extract_features(&values, &missing, 2).unwrap();
    let mut g = Graph::new();
    let logits = logits_from_features(&mut g, &m.sda, &m.task, &features).unwrap();
    let loss = g.cross_entropy(logits, 0, LossKind::Softmax).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.iter().all(|(n, _)| !n.starts_with("backbone.")));
    assert!(grads.get("task.T.E").is_some() && grads.get("task.T.Q").is_some());

    // The same loss through cached features, checked numerically.
    gradcheck(&mut m, |m| {
        let mut g = Graph::new();
        let logits = logits_from_features(&mut g, &m.sda, &m.task, &features).unwrap();
        let loss = g.cross_entropy(logits, 0, LossKind::Softmax).unwrap();
        (g.value(loss).item(), g.backward(loss).unwrap())
    });
}
