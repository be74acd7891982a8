//! Central finite-difference gradient checks in float64.
//!
//! Relative error is `|a − n| / max(|a|, |n|, 1e-3)`. A coordinate whose
//! one-sided differences disagree sharply sits on a ReLU kink; such
//! coordinates are skipped, but only up to `MAX_KINK_FRACTION` of a check.

#![allow(dead_code)]

use pel_core::classifier::{ClassifierParams, HeadKind};
use pel_core::losses::{ce_loss, la_loss, ClassPrior};
use pel_core::peft::{PeftConfig, PeftVariant};
use pel_core::rng::RngStream;
use pel_core::session::{Owner, Session};
use pel_core::tensor::{Tape, Tensor, Var};
use pel_core::train::Model;
use pel_core::vit::{BackboneMode, BackboneParams, ViTConfig};
use pel_core::Result;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const MAX_KINK_FRACTION: f64 = 0.05;
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl Report {
    pub fn merge(&mut self, o: Report) {
        self.checked += o.checked;
        self.kinks += o.kinks;
        if o.max_rel > self.max_rel {
            self.max_rel = o.max_rel;
            self.worst = o.worst;
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < TOL && (self.kinks as f64) <= MAX_KINK_FRACTION * self.checked as f64
    }

    pub fn assert_ok(&self, what: &str) {
        assert!(self.passed(), "{what}: {self:?}");
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares `analytic` with the numeric derivative of `f` at offset 0.
pub fn probe(report: &mut Report, label: &str, analytic: f64, mut f: impl FnMut(f64) -> f64) {
    let (fp, f0, fm) = (f(H), f(0.0), f(-H));
    let numeric = (fp - fm) / (2.0 * H);
    let err = rel_err(analytic, numeric);
    report.checked += 1;
    if err >= TOL {
        let (fwd, bwd) = ((fp - f0) / H, (f0 - fm) / H);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
            report.kinks += 1;
            return;
        }
    }
    if err > report.max_rel {
        report.max_rel = err;
        report.worst = format!("{label}: analytic {analytic:e} numeric {numeric:e}");
    }
}

/// Reduces any output to a scalar through fixed random weights.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(weights.clone());
    let y = tape.matmul(flat, w)?;
    Ok(tape.sum(y))
}

/// Checks d(Σ R ⊙ build(inputs)) / d(inputs) for every input coordinate.
pub fn check_tape(
    rng: &mut RngStream,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Report {
    let mut probe_tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe_tape.constant(t.clone())).collect();
    let probe_out = build(&mut probe_tape, &vars).expect("forward");
    let n = probe_tape.value(probe_out).numel();
    let weights: Tensor<f64> = rng.normal_tensor(&[n, 1], 1.0);

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vs).expect("forward");
        let l = project(&mut t, out, &weights).expect("projection");
        t.value(l).data()[0]
    };

    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = build(&mut t, &vs).expect("forward");
    let l = project(&mut t, out, &weights).expect("projection");
    t.backward(l).expect("backward");

    let mut report = Report::default();
    for (i, v) in vs.iter().enumerate() {
        let g = t.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            probe(&mut report, &format!("input {i}[{j}]"), g.data()[j], |d| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += d;
                eval(&xs)
            });
        }
    }
    report
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

fn positive(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let mut t = rng.uniform_tensor::<f64>(shape, 1.0);
    for v in t.data_mut() {
        *v = v.abs() + 0.5;
    }
    t
}

/// Every differentiable tape operation on random inputs.
pub fn op_suite(seed: u64) -> Vec<(&'static str, Report)> {
    let rng = RngStream::new(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, label: u64, shapes: &[&[usize]], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        let mut r = rng.split(label);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut r, s)).collect();
        out.push((name, check_tape(&mut r, &inputs, build)));
    };
    run("matmul", 1, &[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]));
    run("add", 2, &[&[3, 4], &[3, 4]], &|t, v| t.add(v[0], v[1]));
    run("add_broadcast", 3, &[&[3, 4], &[4]], &|t, v| t.add(v[0], v[1]));
    run("scale", 4, &[&[3, 4]], &|t, v| Ok(t.scale(v[0], 1.7)));
    run("mul_scalar", 5, &[&[3, 4], &[1]], &|t, v| t.mul_scalar(v[0], v[1]));
    run("relu", 6, &[&[3, 4]], &|t, v| Ok(t.relu(v[0])));
    run("softmax_rows", 7, &[&[3, 4]], &|t, v| t.softmax(v[0], 1));
    run("softmax_cols", 8, &[&[3, 4]], &|t, v| t.softmax(v[0], 0));
    run("log_softmax", 9, &[&[3, 4]], &|t, v| t.log_softmax(v[0]));
    run("layer_norm", 10, &[&[3, 5], &[5], &[5]], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    run("concat_rows", 11, &[&[2, 3], &[1, 3]], &|t, v| t.concat(&[v[0], v[1]], 0));
    run("concat_cols", 12, &[&[2, 3], &[2, 2]], &|t, v| t.concat(&[v[0], v[1]], 1));
    run("slice_rows", 13, &[&[4, 3]], &|t, v| t.slice(v[0], 0, 1..3));
    run("slice_cols", 14, &[&[4, 3]], &|t, v| t.slice(v[0], 1, 1..3));
    run("transpose", 15, &[&[3, 4]], &|t, v| t.transpose(v[0]));
    run("reshape", 16, &[&[3, 4]], &|t, v| t.reshape(v[0], &[2, 6]));
    run("l2_norm_rows", 17, &[&[3, 4]], &|t, v| t.l2_norm(v[0], 1));
    run("l2_norm_cols", 18, &[&[3, 4]], &|t, v| t.l2_norm(v[0], 0));
    run("pick", 19, &[&[5]], &|t, v| t.pick(v[0], 3));
    run("sum", 20, &[&[3, 4]], &|t, v| Ok(t.sum(v[0])));
    run("mean", 21, &[&[3, 4]], &|t, v| Ok(t.mean(v[0])));
    // The denominator must stay away from zero.
    let mut r = rng.split(22);
    let inputs = vec![randn(&mut r, &[3, 4]), positive(&mut r, &[3])];
    out.push(("div_along", check_tape(&mut r, &inputs, |t, v| t.div_along(v[0], v[1], 1))));
    out
}

/// Checks a scalar objective of a model against every trainable parameter,
/// sampling at most `per_tensor` coordinates of each tensor.
pub fn check_model(
    model: &Model<f64>,
    rng: &mut RngStream,
    per_tensor: usize,
    objective: &dyn Fn(&Model<f64>, &mut Session<f64>) -> Result<Var>,
) -> Report {
    let mut s = Session::training();
    let l = objective(model, &mut s).expect("forward");
    let grads = s.backward(l).expect("backward");
    let value = |m: &Model<f64>| {
        let mut s = Session::inference();
        let l = objective(m, &mut s).expect("forward");
        s.value(l).data()[0]
    };
    let mut report = Report::default();
    for owner in [Owner::Backbone, Owner::Peft, Owner::Head] {
        let store = match owner {
            Owner::Backbone => &model.backbone.store,
            Owner::Peft => &model.peft.store,
            Owner::Head => &model.head.store,
        };
        for idx in 0..store.len() {
            let p = store.get(idx);
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let zero = vec![0.0; n];
            let g = grads.get(owner, idx).unwrap_or(&zero);
            let mut coords = rng.permutation(n);
            coords.truncate(per_tensor);
            for j in coords {
                probe(&mut report, &format!("{}[{j}]", p.name), g[j], |d| {
                    let mut m = model.clone();
                    let st = match owner {
                        Owner::Backbone => &mut m.backbone.store,
                        Owner::Peft => &mut m.peft.store,
                        Owner::Head => &mut m.head.store,
                    };
                    st.get_mut(idx).value.data_mut()[j] += d;
                    value(&m)
                });
            }
        }
    }
    report
}

/// Tiny encoder used by the composite checks.
pub fn tiny_vit() -> ViTConfig {
    ViTConfig::tiny(8, 4, 2, 8, 2)
}

/// A fully trainable tiny model with `variant` attached and every PEFT tensor randomized.
pub fn composite_model(variant: PeftVariant, kind: HeadKind, classes: usize, rng: &RngStream) -> Model<f64> {
    let cfg = tiny_vit();
    let mut backbone = BackboneParams::<f64>::init_random(&cfg, &mut rng.split(1)).expect("backbone");
    backbone.set_trainable(BackboneMode::Full).expect("mode");
    let mut pc = PeftConfig::new(variant);
    if variant.uses_prompts() {
        pc.p = Some(2);
    }
    let pc = pc.resolve(classes, cfg.layers).expect("peft config").with_r(3);
    let pc = if variant.uses_bottleneck() { pc } else { PeftConfig { r: None, ..pc } };
    let mut peft = pel_core::peft::PeftState::attach(&pc, &mut backbone, &mut rng.split(2)).expect("attach");
    let mut r = rng.split(3);
    for p in peft.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = r.normal_tensor(&shape, 0.5);
    }
    let mut head = ClassifierParams::init_random(kind, 5.0, classes, cfg.feature_dim(), &mut rng.split(4));
    for p in head.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = r.normal_tensor(&shape, 0.5);
    }
    Model { backbone, peft, head }
}

fn prior(classes: usize, rng: &mut RngStream) -> ClassPrior {
    ClassPrior::from_counts((0..classes).map(|_| 1 + rng.below(50)).collect()).expect("counts")
}

/// Full encoder with each PEFT variant, each head kind, and both losses.
pub fn composite_suite(seed: u64) -> Vec<(String, Report)> {
    let rng = RngStream::new(seed);
    let classes = 4;
    let mut out = Vec::new();
    let image: Tensor<f64> = rng.split(10).normal_tensor(&[3, 8, 8], 1.0);
    let pr = prior(classes, &mut rng.split(11));
    let y = rng.split(12).below(classes);

    for (vi, variant) in PeftVariant::ALL.into_iter().enumerate() {
        let m = composite_model(variant, HeadKind::Cosine, classes, &rng.split(100 + vi as u64));
        let obj = |m: &Model<f64>, s: &mut Session<f64>| {
            let z = m.logits(s, &image)?;
            la_loss(&mut s.tape, z, y, &pr)
        };
        let r = check_model(&m, &mut rng.split(200 + vi as u64), 6, &obj);
        out.push((format!("encoder+{variant}"), r));
    }

    for (hi, kind) in [HeadKind::Linear, HeadKind::L2Normalized, HeadKind::Cosine].into_iter().enumerate() {
        let mut r = rng.split(300 + hi as u64);
        let head = composite_model(PeftVariant::None, kind, classes, &r.split(0)).head;
        let f: Tensor<f64> = r.normal_tensor(&[head.feature_dim()], 1.0);
        let rep = check_head(&head, &f, &mut r);
        out.push((format!("head_{kind:?}"), rep));
    }

    let mut r = rng.split(400);
    let z = randn(&mut r, &[classes]);
    out.push(("ce_loss".into(), check_tape(&mut r, &[z.clone()], |t, v| ce_loss(t, v[0], y))));
    out.push(("la_loss".into(), check_tape(&mut r, &[z], |t, v| la_loss(t, v[0], y, &pr))));
    out
}

/// Checks projected head logits against the head tensors and the input feature.
pub fn check_head(head: &ClassifierParams<f64>, f: &Tensor<f64>, rng: &mut RngStream) -> Report {
    let weights: Tensor<f64> = rng.normal_tensor(&[head.classes(), 1], 1.0);
    let objective = |h: &ClassifierParams<f64>, s: &mut Session<f64>, fv: Var| -> Result<Var> {
        let z = h.logits(s, fv)?;
        project(&mut s.tape, z, &weights)
    };
    let value = |h: &ClassifierParams<f64>, x: &Tensor<f64>| {
        let mut s = Session::inference();
        let fv = s.tape.constant(x.clone());
        let l = objective(h, &mut s, fv).expect("forward");
        s.value(l).data()[0]
    };
    let mut s = Session::training();
    let fv = s.tape.leaf(f.clone(), true);
    let l = objective(head, &mut s, fv).expect("forward");
    let grads = s.backward(l).expect("backward");
    let gf = s.tape.grad(fv).expect("feature gradient");

    let mut report = Report::default();
    for j in 0..f.numel() {
        probe(&mut report, &format!("feature[{j}]"), gf.data()[j], |d| {
            let mut x = f.clone();
            x.data_mut()[j] += d;
            value(head, &x)
        });
    }
    for idx in 0..head.store.len() {
        let p = head.store.get(idx);
        if !p.trainable {
            continue;
        }
        let g = grads.get(Owner::Head, idx).expect("head gradient");
        for j in 0..p.value.numel() {
            probe(&mut report, &format!("{}[{j}]", p.name), g[j], |d| {
                let mut h = head.clone();
                h.store.get_mut(idx).value.data_mut()[j] += d;
                value(&h, f)
            });
        }
    }
    report
}
