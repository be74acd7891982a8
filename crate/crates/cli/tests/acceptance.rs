//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p pel-cli --test acceptance -- 7 9`.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use pel_core::archive::Archive;
use pel_core::classifier::{ClassifierConfig, ClassifierParams, HeadKind, InitStrategy};
use pel_core::data::{generate_synthetic_lt, preprocess_eval, DatasetBundle, SyntheticLtSpec};
use pel_core::losses::{argmax, ce_loss, la_loss, source_posterior, zero_shot_predict, ClassPrior};
use pel_core::metrics::{accuracy_by_split, ShotSplits, Split};
use pel_core::peft::{default_bottleneck_dim, PeftConfig, PeftState, PeftVariant};
use pel_core::rng::RngStream;
use pel_core::tensor::{AnyTensor, Tape, Tensor};
use pel_core::train::{predict, train, Checkpoint, Model, TrainConfig};
use pel_core::tte::{crop_offsets, ensemble_logits, five_crops, validate_expand, TteConfig};
use pel_core::vit::{extract_feature, BackboneParams, NoHooks, ViTConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Turns any library error into a failure message.
macro_rules! tr {
    ($e:expr) => {
        $e.map_err(|e| format!("{}: {e}", stringify!($e)))?
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("parameter census", census),
        ("bottleneck rule", bottleneck),
        ("gradient suite", gradients),
        ("identity at init", identity_at_init),
        ("freeze invariant", freeze),
        ("LA properties", la_properties),
        ("test-time ensembling", tte),
        ("zero-shot equivalence", zero_shot),
        ("desk-scale learning signal", desk_scale),
        ("shot-split protocol", shot_splits),
        ("determinism and round-trips", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn pel_raw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pel")).args(args).output().expect("spawning pel")
}

/// Runs `pel` and parses its stdout as JSON; a non-zero exit is a failure.
fn pel(args: &[&str]) -> Result<Value, String> {
    let out = pel_raw(args);
    if !out.status.success() {
        return Err(format!("pel {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("pel {}: bad JSON: {e}", args.join(" ")))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    ensure!(e < limit, "{what} took {:.2}s, limit {:.0}s", e.as_secs_f64(), limit.as_secs_f64());
    Ok(())
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn census() -> Outcome {
    let expected = [
        ("imagenet-lt", 617_868u64, "0.62M"),
        ("places-lt", 175_212, "0.18M"),
        ("inat18", 4_749_324, "4.75M"),
        ("cifar100-lt", 101_436, "0.10M"),
    ];
    // Hand count of ViT-B/16: bias-free patch projection, class token,
    // 197 positions, pre and post norms, twelve pre-norm blocks.
    let d = 768u64;
    let block = 4 * (d * d + d) + 2 * 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let backbone = d * 16 * 16 * 3 + d + 197 * d + 2 * d + 12 * block + 2 * d;
    ensure!(backbone == 85_799_424, "hand count gives {backbone}");
    let mut slowest = 0.0f64;
    for (preset, peft, millions) in expected {
        let t = Instant::now();
        let v = pel(&["audit-params", "--preset", preset])?;
        within(t, Duration::from_secs(1), preset)?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        for key in ["peft_closed_form", "peft_enumerated"] {
            ensure!(v[key] == json!(peft), "{preset}: {key} = {}, expected {peft}", v[key]);
        }
        for key in ["backbone_closed_form", "backbone_enumerated"] {
            ensure!(v[key] == json!(backbone), "{preset}: {key} = {}, expected {backbone}", v[key]);
        }
        ensure!(v["peft_millions"] == json!(millions), "{preset}: {} vs {millions}", v["peft_millions"]);
    }
    Ok(format!("4 presets exact, backbone {backbone}, slowest call {:.0} ms", slowest * 1e3))
}

fn brute_bottleneck(k: usize, l: usize) -> usize {
    let q = (k as f64 / (2.0 * l as f64)).floor();
    if q < 1.0 {
        1
    } else {
        2f64.powf(q.log2().floor()) as usize
    }
}

fn bottleneck() -> Outcome {
    let t = Instant::now();
    for (k, r) in [(1000, 32), (365, 8), (8142, 256), (100, 4)] {
        let got = default_bottleneck_dim(k, 12);
        ensure!(got == r, "K={k}: got {got}, expected {r}");
        ensure!(brute_bottleneck(k, 12) == r, "brute force disagrees at K={k}");
    }
    for k in 1..=20_000 {
        for l in [1, 2, 6, 12, 24] {
            let (a, b) = (default_bottleneck_dim(k, l), brute_bottleneck(k, l));
            ensure!(a == b, "K={k} L={l}: {a} vs brute force {b}");
        }
    }
    within(t, Duration::from_secs(1), "bottleneck checks")?;
    Ok("32/8/256/4 and 100,000 (K, L) pairs agree with log/floor".into())
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut total = gradcheck::Report::default();
    let mut checks = 0;
    let mut names = std::collections::BTreeSet::new();
    for seed in 0..20 {
        let ops = gradcheck::op_suite(seed).into_iter().map(|(n, r)| (n.to_string(), r));
        for (name, r) in ops.chain(gradcheck::composite_suite(seed)) {
            ensure!(r.passed(), "seed {seed} {name}: {r:?}");
            names.insert(name);
            checks += 1;
            total.merge(r);
        }
    }
    within(t, Duration::from_secs(120), "gradient suite")?;
    Ok(format!(
        "{} checks over 20 seeds ({} ops and composites), {} coordinates, max rel err {:.2e}, {} kinks skipped",
        checks,
        names.len(),
        total.checked,
        total.max_rel,
        total.kinks
    ))
}

fn tiny_vit() -> ViTConfig {
    ViTConfig::tiny(16, 4, 2, 32, 4)
}

fn identity_at_init() -> Outcome {
    let cfg = tiny_vit();
    let base = tr!(BackboneParams::<f32>::init_random(&cfg, &mut RngStream::new(5)));
    let mut rng = RngStream::new(6);
    let images: Vec<Tensor<f32>> = (0..100).map(|_| rng.normal_tensor(&[3, 16, 16], 1.0)).collect();
    let plain: Vec<Tensor<f32>> = images.iter().map(|x| extract_feature(x, &base, &NoHooks)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for variant in [PeftVariant::Adapter, PeftVariant::Lora, PeftVariant::Adaptformer] {
        let mut backbone = base.clone();
        let pc = tr!(PeftConfig::new(variant).resolve(10, cfg.layers));
        let peft = tr!(PeftState::attach(&pc, &mut backbone, &mut RngStream::new(7)));
        let ups: Vec<_> = peft.store.iter().filter(|p| p.name.ends_with("w_up")).collect();
        ensure!(!ups.is_empty(), "{variant}: no up-projection found");
        ensure!(ups.iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)), "{variant}: up-projection not zero");
        for (i, img) in images.iter().enumerate() {
            let hooked = tr!(extract_feature(img, &backbone, &peft));
            ensure!(bits_equal(plain[i].data(), hooked.data()), "{variant}: input {i} differs");
        }
    }
    Ok("adapter, lora, adaptformer bit-identical on 100 inputs".into())
}

fn freeze() -> Outcome {
    let data = tr!(generate_synthetic_lt(&SyntheticLtSpec { test_per_class: 2, ..SyntheticLtSpec::new(4, 10, 1.0, 16, 3) }));
    let base = tr!(BackboneParams::<f32>::init_random(&tiny_vit(), &mut RngStream::new(4)));
    // 40 samples, batch 4, one epoch: ten optimizer steps.
    ensure!(data.train.len() == 40, "expected 40 samples");
    let mut frozen_checked = 0;
    for variant in PeftVariant::ALL {
        let peft = if variant.uses_prompts() { PeftConfig::new(variant).with_p(3) } else { PeftConfig::new(variant) };
        let config = TrainConfig { epochs: 1, batch_size: 4, lr: 0.05, peft, tte: TteConfig::off(), ..TrainConfig::default() };
        let out = tr!(train(&config, &data, base.clone(), None));
        let unfrozen = &out.model.peft.unfrozen;
        for (p0, p1) in base.store.iter().zip(out.model.backbone.store.iter()) {
            ensure!(p0.name == p1.name, "{variant}: tensor order changed");
            if !unfrozen.contains(&p0.name) {
                ensure!(bits_equal(p0.value.data(), p1.value.data()), "{variant}: frozen {} moved", p0.name);
                frozen_checked += 1;
            }
        }
    }
    Ok(format!("8 variants x 10 steps, {frozen_checked} frozen tensors bit-identical"))
}

fn loss_of(build: impl FnOnce(&mut Tape<f64>) -> pel_core::Result<pel_core::tensor::Var>) -> f64 {
    let mut t = Tape::new();
    let v = build(&mut t).expect("loss builds");
    t.value(v).data()[0]
}

fn la_properties() -> Outcome {
    let mut rng = RngStream::new(21);
    for trial in 0..500 {
        let k = 2 + rng.below(30);
        let z: Vec<f64> = (0..k).map(|_| 10.0 * rng.normal()).collect();
        let y = rng.below(k);
        let n = 1 + rng.below(1000);
        for prior in [ClassPrior::uniform(k), tr!(ClassPrior::from_counts(vec![n; k]))] {
            let la = loss_of(|t| {
                let v = t.constant(Tensor::from_vec(z.clone()));
                la_loss(t, v, y, &prior)
            });
            let ce = loss_of(|t| {
                let v = t.constant(Tensor::from_vec(z.clone()));
                ce_loss(t, v, y)
            });
            ensure!(la.to_bits() == ce.to_bits(), "trial {trial}: LA {la} vs CE {ce}");
        }
    }

    let prior = tr!(ClassPrior::from_counts(vec![9, 1]));
    let worked = loss_of(|t| {
        let v = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
        la_loss(t, v, 1, &prior)
    });
    let worked_err = (worked + 0.1f64.ln()).abs();
    ensure!(worked_err < 1e-9, "two-class example gave {worked}");

    // Enumerable task: x in 0..7, five classes with shared likelihoods, a
    // long-tailed source prior and a uniform target prior. Logits carrying the
    // target posterior must recover the Bayes source posterior and be a
    // stationary point of the expected LA loss.
    let (k, xs) = (5, 7);
    let lik: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..xs).map(|_| 0.05 + rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        })
        .collect();
    let prior = tr!(ClassPrior::from_counts(vec![400, 120, 40, 12, 3]));
    let mut worst: f64 = 0.0;
    for x in 0..xs {
        let z: Vec<f64> = (0..k).map(|y| lik[y][x].ln()).collect();
        let joint: Vec<f64> = (0..k).map(|y| lik[y][x] * prior.probs[y]).collect();
        let evidence: f64 = joint.iter().sum();
        let bayes: Vec<f64> = joint.iter().map(|j| j / evidence).collect();
        for (a, b) in source_posterior(&z, &prior).iter().zip(&bayes) {
            worst = worst.max((a - b).abs());
        }
        let mut t = Tape::new();
        let zv = t.leaf(Tensor::from_vec(z), true);
        let mut rows = Vec::new();
        for (y, &w) in bayes.iter().enumerate() {
            let l = tr!(la_loss(&mut t, zv, y, &prior));
            let l = t.scale(l, w);
            rows.push(tr!(t.reshape(l, &[1])));
        }
        let stacked = tr!(t.concat(&rows, 0));
        let total = t.sum(stacked);
        tr!(t.backward(total));
        for g in tr!(t.grad(zv).ok_or("no gradient")).data() {
            worst = worst.max(g.abs());
        }
    }
    ensure!(worst < 1e-6, "Bayes check deviates by {worst:.2e}");
    Ok(format!(
        "uniform prior bit-equal on 500 cases, worked example err {worked_err:.1e}, Bayes check max dev {worst:.1e}"
    ))
}

/// A tiny model with a nonzero AdaptFormer branch and a random cosine head.
fn random_model(classes: usize, seed: u64) -> Result<Model<f64>, String> {
    let mut backbone = tr!(BackboneParams::<f64>::init_random(&tiny_vit(), &mut RngStream::new(seed)));
    let pc = tr!(PeftConfig::new(PeftVariant::Adaptformer).resolve(classes, 2));
    let mut peft = tr!(PeftState::attach(&pc, &mut backbone, &mut RngStream::new(seed + 1)));
    let mut r = RngStream::new(seed + 2);
    for p in peft.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = r.normal_tensor(&shape, 0.2);
    }
    let head = ClassifierParams::init_random(HeadKind::Cosine, 25.0, classes, 32, &mut r);
    Ok(Model { backbone, peft, head })
}

fn tte() -> Outcome {
    // Offsets, read back from a 248x248 image whose pixels encode their position.
    let expected = [(12, 12), (0, 0), (0, 24), (24, 0), (24, 24)];
    ensure!(crop_offsets(24) == expected, "offsets {:?}", crop_offsets(24));
    let coded: Vec<f64> = (0..3 * 248 * 248).map(|i| (i % (248 * 248)) as f64).collect();
    let image = tr!(Tensor::new(vec![3, 248, 248], coded));
    let crops = tr!(five_crops(&image, 224, 24));
    for (c, &(y, x)) in crops.iter().zip(&expected) {
        ensure!(c.shape() == [3, 224, 224], "crop shape {:?}", c.shape());
        let corner = c.data()[0] as usize;
        ensure!((corner / 248, corner % 248) == (y, x), "crop starts at {:?}, expected {:?}", (corner / 248, corner % 248), (y, x));
    }

    let data = tr!(generate_synthetic_lt(&SyntheticLtSpec { test_per_class: 3, ..SyntheticLtSpec::new(5, 10, 1.0, 16, 7) }));
    let test = data.eval_split();
    let model = random_model(5, 30)?;
    let plain = tr!(predict(&model, test, &TteConfig::off()));
    let zero = tr!(predict(&model, test, &TteConfig::with_expand(0)));
    ensure!(plain.len() == zero.len(), "sample counts differ");
    for (i, (a, b)) in plain.iter().zip(&zero).enumerate() {
        let same = a.0 == b.0 && a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same, "e=0 differs from plain evaluation at sample {i}");
    }

    let tte = TteConfig::with_expand(6);
    let ensembled = tr!(predict(&model, test, &tte));
    let mut agree = 0;
    for i in 0..test.len() {
        let views = tr!(preprocess_eval::<f64>(test, i, 16, &tte));
        ensure!(views.len() == 5, "{} views", views.len());
        let logits: Vec<Tensor<f64>> = views.iter().map(|v| model.infer(v).map(|(z, _)| z)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let k = logits[0].numel();
        let mean: Vec<f64> = (0..k).map(|j| logits.iter().map(|z| z.data()[j]).sum::<f64>() / 5.0).collect();
        let lib = tr!(ensemble_logits(&logits));
        for (a, b) in lib.data().iter().zip(&mean) {
            ensure!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "sample {i}: ensemble {a} vs mean {b}");
        }
        ensure!(ensembled[i].0 == argmax(&mean), "sample {i}: prediction is not the argmax of the mean");
        agree += 1;
    }

    ensure!(validate_expand(32, 16).is_some_and(|w| w.contains("multiple of the patch size")), "no warning for e=32, patch 16");
    ensure!(validate_expand(24, 16).is_none(), "spurious warning for e=24");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ckpt, data_path) = cli_run(dir.path(), 1, json!({ "epochs": 1, "tte": { "enabled": false } }))?;
    let out = pel_raw(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data_path), "--tte-expand", "8"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure!(out.status.success(), "pel eval failed: {stderr}");
    ensure!(stderr.contains("multiple of the patch size"), "pel eval printed no warning: {stderr:?}");
    Ok(format!("offsets exact, e=0 bit-exact, {agree} ensembles equal the crop mean, warning emitted"))
}

/// Synthesizes a small dataset and backbone with the CLI and trains on them.
/// Returns the checkpoint and data paths.
fn cli_run(dir: &Path, seed: u64, config: Value) -> Result<(PathBuf, PathBuf), String> {
    let data = dir.join("data.pelt");
    let backbone = dir.join("backbone.pelt");
    let cfg = dir.join("config.json");
    let seed = seed.to_string();
    pel(&["synth-data", "--classes", "5", "--n-max", "30", "--ratio", "10", "--image-size", "16", "--test-per-class", "4", "--seed", &seed, "--out", s(&data)])?;
    pel(&["init-backbone", "--seed", &seed, "--out", s(&backbone)])?;
    std::fs::write(&cfg, config.to_string()).map_err(|e| e.to_string())?;
    let out = dir.join("run");
    pel(&["train", "--config", s(&cfg), "--data", s(&data), "--backbone", s(&backbone), "--out", s(&out)])?;
    Ok((out.join("checkpoint.pelt"), data))
}

fn zero_shot() -> Outcome {
    let mut compared = 0;
    for seed in 0..3 {
        let data = tr!(generate_synthetic_lt(&SyntheticLtSpec { test_per_class: 10, ..SyntheticLtSpec::new(8, 20, 10.0, 16, seed) }));
        let mut rng = RngStream::new(50 + seed);
        let mut text = Archive::new();
        let mut rows = Vec::new();
        for c in 0..8 {
            let t: Tensor<f32> = rng.normal_tensor(&[32], 1.0);
            rows.push(t.cast::<f64>());
            text.insert(format!("text_emb.{c}"), AnyTensor::F32(t));
        }
        text.insert_scalar_i64("meta.class_count", 8);
        let config = TrainConfig {
            epochs: 0,
            classifier: ClassifierConfig { kind: HeadKind::Cosine, init: InitStrategy::Semantic, ..ClassifierConfig::default() },
            tte: TteConfig::off(),
            ..TrainConfig::default()
        };
        let backbone = tr!(BackboneParams::<f64>::init_random(&tiny_vit(), &mut RngStream::new(60 + seed)));
        let out = tr!(train(&config, &data, backbone, Some(&text)));
        for (i, (p, f)) in tr!(predict(&out.model, data.eval_split(), &TteConfig::off())).iter().enumerate() {
            let direct = tr!(zero_shot_predict(f.data(), &rows));
            ensure!(*p == direct, "seed {seed} input {i}: model {p}, direct {direct}");
            compared += 1;
        }
    }
    let a = Tensor::from_vec(vec![1.0, 0.0]);
    let tie = tr!(zero_shot_predict(&[1.0f64, 0.0], &[Tensor::from_vec(vec![0.0, 1.0]), a.clone(), a]));
    ensure!(tie == 1, "tie resolved to {tie}, expected the lower index");
    Ok(format!("{compared} test inputs agree exactly, ties take the lower index"))
}

fn desk_scale() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut min_overall = f64::INFINITY;
    let mut few = Vec::new();
    for seed in 0..10u64 {
        let data = dir.path().join(format!("data{seed}.pelt"));
        let backbone = dir.path().join(format!("backbone{seed}.pelt"));
        pel(&["synth-data", "--classes", "20", "--n-max", "200", "--ratio", "100", "--image-size", "16", "--seed", &seed.to_string(), "--out", s(&data)])?;
        pel(&["init-backbone", "--image-size", "16", "--patch-size", "4", "--layers", "2", "--dim", "32", "--heads", "4", "--seed", &(1000 + seed).to_string(), "--out", s(&backbone)])?;
        let mut acc = Vec::new();
        for loss in ["la", "ce"] {
            let cfg = dir.path().join(format!("{loss}{seed}.json"));
            let config = json!({
                "epochs": 10,
                "seed": seed,
                "loss": loss,
                "peft": { "variant": "adaptformer" },
                "classifier": { "kind": "cosine" },
                "tte": { "enabled": false },
            });
            std::fs::write(&cfg, config.to_string()).map_err(|e| e.to_string())?;
            let out = dir.path().join(format!("{loss}{seed}"));
            pel(&["train", "--config", s(&cfg), "--data", s(&data), "--backbone", s(&backbone), "--out", s(&out)])?;
            let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let test = &report["test"];
            acc.push((test["overall"].as_f64().unwrap_or(0.0), test["few"].as_f64().unwrap_or(0.0)));
        }
        let ((la_all, la_few), (_, ce_few)) = (acc[0], acc[1]);
        ensure!(la_all > 3.0 / 20.0, "seed {seed}: LA overall accuracy {la_all:.3} is not above 3x chance");
        min_overall = min_overall.min(la_all);
        wins += usize::from(la_few > ce_few);
        few.push(format!("{la_few:.2}/{ce_few:.2}"));
    }
    within(t, Duration::from_secs(300), "desk-scale runs")?;
    ensure!(wins >= 8, "LA beat CE on few-shot classes in only {wins}/10 seeds ({})", few.join(" "));
    Ok(format!("min LA overall {min_overall:.3} (chance 0.05), few-shot LA/CE wins {wins}/10 [{}]", few.join(" ")))
}

fn recount(preds: &[usize], labels: &[usize], counts: &[usize]) -> [Option<f64>; 4] {
    let split = |n: usize| if n > 100 { 1 } else if n >= 20 { 2 } else { 3 };
    let mut hit = [0usize; 4];
    let mut tot = [0usize; 4];
    for (&p, &y) in preds.iter().zip(labels) {
        for slot in [0, split(counts[y])] {
            tot[slot] += 1;
            hit[slot] += usize::from(p == y);
        }
    }
    std::array::from_fn(|i| (tot[i] > 0).then(|| hit[i] as f64 / tot[i] as f64))
}

fn shot_splits() -> Outcome {
    let boundary = [(19, Split::Few), (20, Split::Medium), (21, Split::Medium), (99, Split::Medium), (100, Split::Medium), (101, Split::Many), (0, Split::Few), (5000, Split::Many)];
    for (n, want) in boundary {
        ensure!(Split::of_count(n) == want, "count {n} classified as {:?}", Split::of_count(n));
    }
    let counts = [0, 1, 19, 20, 21, 99, 100, 101, 150, 5000];
    let s = ShotSplits::from_counts(&counts);
    ensure!(s.few == [0, 1, 2] && s.medium == [3, 4, 5, 6] && s.many == [7, 8, 9], "{s:?}");

    let mut rng = RngStream::new(77);
    let pool = [0, 1, 5, 19, 20, 21, 60, 99, 100, 101, 250, 5000];
    for trial in 0..500 {
        let k = 1 + rng.below(12);
        let counts: Vec<usize> = (0..k).map(|_| pool[rng.below(pool.len())]).collect();
        let n = rng.below(60);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let preds: Vec<usize> = labels.iter().map(|&y| if rng.bernoulli(0.6) { y } else { rng.below(k) }).collect();
        let got = tr!(accuracy_by_split(&preds, &labels, &ShotSplits::from_counts(&counts)));
        ensure!(got.as_array() == recount(&preds, &labels, &counts), "trial {trial}: {got:?} for counts {counts:?}");
    }
    Ok("boundaries 19/20/100/101 and 500 random recounts agree".into())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = json!({ "epochs": 2, "batch_size": 16, "peft": { "variant": "adaptformer" }, "tte": { "expand": 6 } });
    let (ckpt_a, data_a) = cli_run(a.path(), 4, config.clone())?;
    let (ckpt_b, data_b) = cli_run(b.path(), 4, config)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    for (x, y) in [
        (a.path().join("run/report.json"), b.path().join("run/report.json")),
        (ckpt_a.clone(), ckpt_b.clone()),
        (data_a.clone(), data_b),
        (a.path().join("backbone.pelt"), b.path().join("backbone.pelt")),
    ] {
        ensure!(read(&x)? == read(&y)?, "{} differs between identical runs", x.file_name().unwrap_or_default().to_string_lossy());
    }

    // Archive level: parse and re-serialize every file byte for byte.
    let mut files = 0;
    for p in [&data_a, &ckpt_a, &a.path().join("backbone.pelt")] {
        let bytes = read(p)?;
        ensure!(tr!(tr!(Archive::from_bytes(&bytes)).to_bytes()) == bytes, "{} archive round-trip differs", p.display());
        files += 1;
    }
    let mut mixed = Archive::new();
    let mut rng = RngStream::new(3);
    mixed.insert("f32", AnyTensor::F32(rng.normal_tensor(&[3, 4], 1.0)));
    mixed.insert("f64", AnyTensor::F64(Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, f64::MAX, 1.0 / 3.0])));
    mixed.insert_bytes("text", "ünïcode".as_bytes());
    mixed.insert_scalar_i64("n", -7);
    let bytes = tr!(mixed.to_bytes());
    let back = tr!(Archive::from_bytes(&bytes));
    ensure!(back == mixed && tr!(back.to_bytes()) == bytes, "mixed archive round-trip differs");

    // Typed level: dataset and checkpoint reload to equal values and re-save identically.
    let bundle = tr!(DatasetBundle::load(&data_a));
    ensure!(tr!(bundle.to_archive().to_bytes()) == read(&data_a)?, "dataset re-save differs");
    let ckpt = tr!(Checkpoint::load(&ckpt_a));
    ensure!(tr!(tr!(ckpt.model.to_checkpoint(&ckpt.config, &ckpt.train_counts)).to_bytes()) == read(&ckpt_a)?, "checkpoint re-save differs");
    let (bb, _) = tr!(BackboneParams::<f32>::load_archive(a.path().join("backbone.pelt"), None));
    let mut again = Archive::new();
    tr!(bb.write_into(&mut again));
    ensure!(tr!(again.to_bytes()) == read(&a.path().join("backbone.pelt"))?, "backbone re-save differs");

    // The reloaded checkpoint reproduces the reported accuracies.
    let report: Value = serde_json::from_slice(&read(&a.path().join("run/report.json"))?).map_err(|e| e.to_string())?;
    let plain = pel(&["eval", "--checkpoint", s(&ckpt_a), "--data", s(&data_a), "--tte", "off"])?;
    ensure!(plain["accuracy"] == report["test"], "eval {} vs report {}", plain["accuracy"], report["test"]);
    let ens = pel(&["eval", "--checkpoint", s(&ckpt_a), "--data", s(&data_a)])?;
    ensure!(ens["accuracy"] == report["test_tte"], "TTE eval {} vs report {}", ens["accuracy"], report["test_tte"]);

    let c = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_run(c.path(), 4, json!({ "epochs": 2, "batch_size": 16, "seed": 1, "peft": { "variant": "adaptformer" }, "tte": { "expand": 6 } }))?;
    ensure!(read(&c.path().join("run/report.json"))? != read(&a.path().join("run/report.json"))?, "a different seed gave the same report");
    Ok(format!("report.json, checkpoint, dataset and backbone bit-identical across runs; {files} files and a mixed archive round-trip exactly; reloaded checkpoint reproduces both accuracies"))
}
