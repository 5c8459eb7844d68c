//! The acceptance gate. Each test prints one `criterion N: PASS|FAIL` line.
//! Runs of the closed-loop protocol are shared between criteria 7 and 8.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use a3gan_core::config::{RunConfig, Variant};
use a3gan_core::data::{synth_generate, AgeGroup, PairSampler, SynthSpec};
use a3gan_core::discriminator::{Discriminator, DiscriminatorConfig};
use a3gan_core::embedder::{make_fixed_embedder, EmbedderConfig};
use a3gan_core::generator::{Generator, GeneratorConfig, Profile};
use a3gan_core::losses::{
    gradient_penalty_at, loss_d_total, loss_g_total, loss_id, loss_pix, wasserstein_gap, Critic, LossWeights,
};
use a3gan_core::nn::ShapeTrace;
use a3gan_core::run::{synthetic_experiment, ExperimentReport};
use a3gan_core::tensor::{ParamStore, Tensor};
use a3gan_core::training::{d_objective, draw_batch, g_objective, read_metrics, train, DBatch, Trainer};
use a3gan_core::wpt::{level_shape, wpt_decompose, wpt_reconstruct, FilterPair};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let verdict = if ok && elapsed <= limit { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} ({:.1}s of {:.0}s) {detail}", elapsed.as_secs_f64(), limit.as_secs_f64());
}

fn gate(n: u32, ok: bool, elapsed: Duration, limit: Duration, detail: String) {
    report(n, ok, elapsed, limit, &detail);
    assert!(ok, "criterion {n}: {detail}");
    assert!(elapsed <= limit, "criterion {n} took {elapsed:?}, limit {limit:?}");
}

#[test]
fn criterion_1_wpt_correctness() {
    let t0 = Instant::now();
    let f = FilterPair::haar();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rec, mut worst_energy) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(-1.0..1.0));
        let e0: f64 = x.iter().map(|v| v * v).sum();
        for levels in 1..=3 {
            let p = wpt_decompose(&x, levels, &f).unwrap();
            for (k, l) in p.levels.iter().enumerate() {
                assert_eq!(l.dim(), level_shape((64, 64, 3), k));
            }
            let back = wpt_reconstruct(&p, &f).unwrap();
            worst_rec = worst_rec.max((&back - &x).iter().fold(0.0, |m, v| m.max(v.abs())));
            let e: f64 = p.deepest().iter().map(|v| v * v).sum();
            worst_energy = worst_energy.max((e - e0).abs() / e0);
        }
    }
    let paper = wpt_decompose(&Array3::zeros((256, 256, 3)), 2, &f).unwrap();
    let shapes: Vec<_> = paper.levels.iter().map(|l| l.dim()).collect();
    let ok = worst_rec <= 1e-5 && worst_energy <= 1e-6 && shapes == [(256, 256, 3), (128, 128, 12), (64, 64, 48)];
    gate(
        1,
        ok,
        t0.elapsed(),
        Duration::from_secs(30),
        format!("reconstruction {worst_rec:.2e}, parseval {worst_energy:.2e}, paper levels {shapes:?}"),
    );
}

#[test]
fn criterion_2_architecture_shape_walk() {
    let t0 = Instant::now();
    let g = Generator::<f32>::new(GeneratorConfig::paper(2), 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 256, 256]);
    let a = Tensor::<f32>::from_f64(&[1.0, 0.0], &[1, 2]).unwrap();
    let mut tr = ShapeTrace::default();
    a3gan_core::tensor::no_grad(|| g.forward_traced(&x, &a, Some(&mut tr))).unwrap();
    let mut expected = vec![
        ("conv1", (256, 256, 64)),
        ("conv2", (128, 128, 128)),
        ("conv3", (64, 64, 256)),
    ];
    let res: Vec<String> = (1..=6).map(|i| format!("res{i}")).collect();
    for r in &res {
        expected.push((r.as_str(), (64, 64, 256)));
    }
    expected.extend([
        ("embed", (64, 64, 258)),
        ("up1", (128, 128, 128)),
        ("up2", (256, 256, 64)),
        ("mask", (256, 256, 1)),
        ("image_map", (256, 256, 3)),
        ("output", (256, 256, 3)),
    ]);
    let mut bad: Vec<String> = expected
        .iter()
        .filter(|(name, shape)| tr.hwc(name) != Some(*shape))
        .map(|(name, shape)| format!("G {name}: {:?} != {shape:?}", tr.hwc(name)))
        .collect();

    let d = Discriminator::<f32>::new(DiscriminatorConfig::paper(2), 0).unwrap();
    let mut tr = ShapeTrace::default();
    a3gan_core::tensor::no_grad(|| d.discriminate_traced(&x, &a, Some(&mut tr))).unwrap();
    for (k, input) in [(256, 256, 3), (128, 128, 12), (64, 64, 48)].into_iter().enumerate() {
        for (name, want) in [("input", input), ("out", (4, 4, 1))] {
            let key = format!("pathway{}/{name}", k + 1);
            if tr.hwc(&key) != Some(want) {
                bad.push(format!("D {key}: {:?} != {want:?}", tr.hwc(&key)));
            }
        }
    }
    if tr.hwc("fused") != Some((4, 4, 3)) {
        bad.push(format!("D fused: {:?}", tr.hwc("fused")));
    }
    let detail = if bad.is_empty() { "all generator and critic shapes match".to_string() } else { bad.join("; ") };
    gate(2, bad.is_empty(), t0.elapsed(), Duration::from_secs(10), detail);
}

/// D(x) = ⟨w, x⟩ per sample.
struct Linear(Vec<f64>);

impl Critic<f64> for Linear {
    fn score(&self, images: &Tensor<f64>, _: &Tensor<f64>) -> a3gan_core::Result<Tensor<f64>> {
        let n = images.dim(0);
        let w: Vec<f64> = (0..n).flat_map(|_| self.0.iter().copied()).collect();
        images.mul(&Tensor::from_vec(w, images.shape())?)?.sum_per_sample()
    }
}

#[test]
fn criterion_3_loss_unit_tests() {
    let t0 = Instant::now();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let t = |v: &[f64]| Tensor::<f64>::from_vec(v.to_vec(), &[v.len()]).unwrap();
    let s = |v: f64| Tensor::<f64>::scalar(v);
    let val = |x: Tensor<f64>| x.item().unwrap();

    let (p, q) = (t(&[0.3, -1.2, 2.0, 0.7]), t(&[1.5, 0.1, -0.4, 0.9]));
    let ab = val(wasserstein_gap(&p, &q).unwrap());
    let ba = val(wasserstein_gap(&q, &p).unwrap());
    checks.push(("antisymmetry", ab == -ba && ab != 0.0));

    checks.push(("D total, λ_att 0", val(loss_d_total(&s(1.0), &s(2.0), &s(3.0), 0.0).unwrap()) == 5.0));
    checks.push(("D total, λ_att 0.75", val(loss_d_total(&s(1.0), &s(2.0), &s(3.0), 0.75).unwrap()) == 5.75));
    let w = LossWeights::default();
    let g_with = val(loss_g_total(&s(-1.0), &s(10.0), Some(&s(0.5)), &w).unwrap());
    let g_without = val(loss_g_total(&s(-1.0), &s(10.0), None, &w).unwrap());
    checks.push(("G total", (g_with - (-1.0 + 0.2 + 4.0)).abs() < 1e-12 && (g_without + 0.8).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut img = |n: usize| {
        Tensor::<f64>::from_vec((0..n * 3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(), &[n, 3, 16, 16])
            .unwrap()
    };
    let (real, fake) = (img(4), img(4));
    let attrs = Tensor::<f64>::zeros(&[4, 2]);
    let dims = 3 * 16 * 16;
    let unit: Vec<f64> = (0..dims).map(|i| if i == 5 { 1.0 } else { 0.0 }).collect();
    let two: Vec<f64> = (0..dims).map(|i| if i % 4 == 0 { 2.0 / (dims as f64 / 4.0).sqrt() } else { 0.0 }).collect();
    let eps = [0.1, 0.5, 0.9, 0.3];
    let gp1 = val(gradient_penalty_at(&Linear(unit), &real, &fake, &attrs, 10.0, &eps).unwrap());
    let gp2 = val(gradient_penalty_at(&Linear(two), &real, &fake, &attrs, 10.0, &eps).unwrap());
    checks.push(("gp unit norm = 0", gp1.abs() <= 1e-5));
    checks.push(("gp norm 2 = 10", (gp2 - 10.0).abs() <= 1e-5));

    let emb = make_fixed_embedder::<f64>(0, EmbedderConfig::default());
    checks.push(("L_id(x, x) = 0", val(loss_id(&emb, &real, &real).unwrap()) == 0.0));
    checks.push(("L_pix(x, x) = 0", val(loss_pix(&real, &real).unwrap()) == 0.0));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!("{}/{} checks; gp {gp1:.2e} and {gp2:.6}; failed {failed:?}", checks.len() - failed.len(), checks.len());
    gate(3, failed.is_empty(), t0.elapsed(), Duration::from_secs(30), detail);
}

fn grad_configs() -> (GeneratorConfig, DiscriminatorConfig, EmbedderConfig) {
    let g = GeneratorConfig {
        image_size: 16,
        base_channels: 4,
        n_resblocks: 1,
        ..GeneratorConfig::desk(2)
    };
    let d = DiscriminatorConfig {
        image_size: 16,
        base_channels: 4,
        ..DiscriminatorConfig::desk(2)
    };
    let e = EmbedderConfig {
        widths: [4, 8, 8],
        fc_dim: 16,
        ..EmbedderConfig::default()
    };
    (g, d, e)
}

/// Uniformly drawn scalar coordinates `(name, index)`.
fn sample_coords(params: &ParamStore<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let sizes: Vec<(String, usize)> = params.iter().map(|(k, t)| (k.clone(), t.numel())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    (0..n)
        .map(|_| {
            let mut r = rng.random_range(0..total);
            for (name, size) in &sizes {
                if r < *size {
                    return (name.clone(), r);
                }
                r -= size;
            }
            unreachable!()
        })
        .collect()
}

fn perturbed(params: &ParamStore<f64>, name: &str, idx: usize, delta: f64) -> ParamStore<f64> {
    let mut p = params.frozen();
    let mut data = p.get(name).unwrap().to_vec();
    data[idx] += delta;
    p.set_data(name, data).unwrap();
    p
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[test]
fn criterion_4_gradient_validation() {
    let t0 = Instant::now();
    let (gcfg, dcfg, ecfg) = grad_configs();
    let (data, _) = synth_generate(&SynthSpec {
        seed: 4,
        n_identities: 6,
        image_size: 16,
        ..SynthSpec::default()
    })
    .unwrap();
    let gen = Generator::<f64>::new(gcfg.clone(), 1).unwrap();
    let critic = Discriminator::<f64>::new(dcfg.clone(), 2).unwrap();
    let emb = make_fixed_embedder::<f64>(3, ecfg);
    let sampler = PairSampler::new(&data, AgeGroup::G51Plus, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, batch): (_, DBatch<f64>) = draw_batch(&data, &sampler, 2, &mut rng).unwrap();
    let weights = LossWeights::default();
    let fake = a3gan_core::tensor::no_grad(|| gen.forward(&batch.young, &batch.young_attrs)).unwrap().output;

    let l_d = |params: ParamStore<f64>| {
        let d = Discriminator::from_params(dcfg.clone(), params).unwrap();
        let (att, auth, gp) = d_objective(&d, &batch, &fake, &weights).unwrap();
        (loss_d_total(&att, &auth, &gp, 0.75).unwrap(), d)
    };
    let l_g = |params: ParamStore<f64>| {
        let g = Generator::from_params(gcfg.clone(), params).unwrap();
        let out = g.forward(&batch.young, &batch.young_attrs).unwrap().output;
        let (adv, id, pix) = g_objective(&out, &critic.frozen(), &emb, &batch.young, &batch.young_attrs, true, true).unwrap();
        (loss_g_total(&adv, id.as_ref().unwrap(), pix.as_ref(), &weights).unwrap(), g)
    };

    let h = 1e-5;
    let mut errs = Vec::new();
    let (loss, d) = l_d(critic.params.trainable());
    let grads = loss.backward().unwrap();
    for (name, idx) in sample_coords(&critic.params, 100, &mut rng) {
        let an = grads.get(d.params.get(&name).unwrap()).map_or(0.0, |g| g.data()[idx]);
        let up = l_d(perturbed(&critic.params, &name, idx, h)).0.item().unwrap();
        let down = l_d(perturbed(&critic.params, &name, idx, -h)).0.item().unwrap();
        errs.push(rel_err(an, (up - down) / (2.0 * h)));
    }
    let (loss, g) = l_g(gen.params.trainable());
    let grads = loss.backward().unwrap();
    for (name, idx) in sample_coords(&gen.params, 100, &mut rng) {
        let an = grads.get(g.params.get(&name).unwrap()).map_or(0.0, |g| g.data()[idx]);
        let up = l_g(perturbed(&gen.params, &name, idx, h)).0.item().unwrap();
        let down = l_g(perturbed(&gen.params, &name, idx, -h)).0.item().unwrap();
        errs.push(rel_err(an, (up - down) / (2.0 * h)));
    }
    let good = errs.iter().filter(|&&e| e <= 1e-3).count();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let ok = good * 100 >= 99 * errs.len();
    gate(
        4,
        ok,
        t0.elapsed(),
        Duration::from_secs(300),
        format!("{good}/{} coordinates within 1e-3 (worst {worst:.2e})", errs.len()),
    );
}

fn smoke_config(iterations: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_profile(Profile::Desk64, 2).with_seed(seed);
    cfg.synth.image_size = 32;
    cfg.synth.n_identities = 10;
    cfg.generator.image_size = 32;
    cfg.discriminator.image_size = 32;
    cfg.train.iterations = Some(iterations);
    cfg.deterministic = true;
    cfg
}

#[test]
fn criterion_5_schedule_conformance() {
    let t0 = Instant::now();
    let cfg = smoke_config(200, 11);
    let (data, _) = synth_generate(&cfg.synth).unwrap();
    let mut trainer = a3gan_core::run::build_trainer::<f32>(&cfg, &data).unwrap();
    let before = trainer.state.embedder.params().clone();
    let recs = train(&mut trainer, &data, None, &serde_json::Value::Null).unwrap();
    let lam: Vec<f64> = recs.iter().map(|r| r.lambda_att).collect();
    let monotone = lam.windows(2).all(|w| w[0] <= w[1]);
    let pix_pattern = recs.iter().all(|r| (r.pix == 0.0) == ((r.step + 1) % 5 != 0));
    let zero_share = recs.iter().filter(|r| r.pix == 0.0).count();
    let frozen = trainer.state.embedder.params().bit_identical(&before);
    let finite = recs.iter().all(|r| r.check_finite().is_ok());
    let ok = recs.len() == 200 && lam[0] == 0.0 && monotone && lam[199] == 0.75 && pix_pattern && frozen && finite;
    gate(
        5,
        ok,
        t0.elapsed(),
        Duration::from_secs(300),
        format!(
            "λ_att {} → {}, monotone {monotone}, pixel term zero on {zero_share}/200 steps, embedder frozen {frozen}",
            lam[0], lam[199]
        ),
    );
}

#[test]
fn criterion_6_determinism_and_resume() {
    let t0 = Instant::now();
    let mut cfg = smoke_config(20, 12);
    cfg.train.checkpoint_every = 10;
    let (data, _) = synth_generate(&cfg.synth).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut finals = Vec::new();
    for dir in &dirs {
        let mut t = a3gan_core::run::build_trainer::<f32>(&cfg, &data).unwrap();
        train(&mut t, &data, Some(dir.path()), &serde_json::Value::Null).unwrap();
        finals.push(t);
    }
    let csv = |i: usize| std::fs::read(dirs[i].path().join("logs/metrics.csv")).unwrap();
    let identical = csv(0) == csv(1);

    let ck = a3gan_core::checkpoint::Checkpoint::load(&dirs[0].path().join("ckpt/step-10.ckpt")).unwrap();
    let mut resumed = Trainer::<f32>::from_checkpoint(&ck, &data).unwrap();
    let tail = train(&mut resumed, &data, None, &serde_json::Value::Null).unwrap();
    let full = read_metrics(&dirs[0].path().join("logs/metrics.csv")).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in tail.iter().zip(&full[10..]) {
        for (x, y) in [
            (a.adv_att, b.adv_att),
            (a.adv_auth, b.adv_auth),
            (a.gp, b.gp),
            (a.adv_g, b.adv_g),
            (a.id, b.id),
            (a.pix, b.pix),
            (a.lambda_att, b.lambda_att),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    let params = resumed.state.generator.params.max_abs_diff(&finals[0].state.generator.params);
    let ok = identical && tail.len() == 10 && worst <= 1e-6 && params <= 1e-6;
    gate(
        6,
        ok,
        t0.elapsed(),
        Duration::from_secs(600),
        format!("CSVs bit-identical {identical}; resumed 10 steps, max deviation {worst:.1e}, generator {params:.1e}"),
    );
}

/// The closed-loop protocol: seed, 50 identities, 64px, 2000 G-iterations, target 51+.
fn closed_loop_config(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_profile(Profile::Desk64, 2)
        .with_variant(variant)
        .with_target(AgeGroup::G51Plus);
    cfg.synth = SynthSpec {
        seed: 7,
        n_identities: 50,
        image_size: 64,
        ..SynthSpec::default()
    };
    cfg.train.seed = seed;
    cfg.train.iterations = Some(2000);
    cfg.deterministic = true;
    cfg
}

type Slot = Arc<OnceLock<ExperimentReport>>;

/// Each (variant, seed) trains once per test binary.
fn closed_loop(variant: Variant, seed: u64) -> ExperimentReport {
    static RUNS: OnceLock<Mutex<BTreeMap<(String, u64), Slot>>> = OnceLock::new();
    let slot = RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((variant.to_string(), seed))
        .or_default()
        .clone();
    slot.get_or_init(|| {
        let r = synthetic_experiment(&closed_loop_config(variant, seed), None).unwrap().0;
        println!("  run {variant} seed {seed}: {}", summary(&r));
        r
    })
    .clone()
}

fn summary(r: &ExperimentReport) -> String {
    let g = &r.report;
    format!(
        "{:.0}s, gain {:.3}, attributes {:?}, verification {:.1}%, leakage {:.4}",
        r.seconds,
        g.age.as_ref().and_then(|a| a.gain_fraction()).unwrap_or(f64::NAN),
        g.attributes.as_ref().map(|a| a.preservation.clone()).unwrap_or_default(),
        g.verification.as_ref().map_or(f64::NAN, |v| v.rate),
        g.leakage.unwrap_or(f64::NAN)
    )
}

fn mean_attr(r: &ExperimentReport) -> f64 {
    let p = &r.report.attributes.as_ref().expect("attributes evaluated").preservation;
    p.iter().sum::<f64>() / p.len() as f64
}

#[test]
fn criterion_7_closed_loop() {
    let r = closed_loop(Variant::Full, 7);
    let g = &r.report;
    let gain = g.age.as_ref().and_then(|a| a.gain_fraction()).unwrap_or(f64::NAN);
    let attrs = &g.attributes.as_ref().unwrap().preservation;
    let rate = g.verification.as_ref().unwrap().rate;
    let ok = gain >= 0.25 && attrs.iter().all(|&p| p >= 95.0) && rate >= 90.0;
    gate(7, ok, Duration::from_secs_f64(r.seconds), Duration::from_secs(1800), summary(&r));
}

#[test]
fn criterion_8_ablation_directions() {
    let t0 = Instant::now();
    let seeds = [7, 8, 9];
    let avg = |v: Variant, f: &dyn Fn(&ExperimentReport) -> f64| {
        seeds.iter().map(|&s| f(&closed_loop(v, s))).sum::<f64>() / seeds.len() as f64
    };
    let leak = |r: &ExperimentReport| r.report.leakage.unwrap();
    let (full_attr, nofae_attr) = (avg(Variant::Full, &mean_attr), avg(Variant::NoFae, &mean_attr));
    let (full_leak, noam_leak) = (avg(Variant::Full, &leak), avg(Variant::NoAm, &leak));
    let fae_ok = nofae_attr < full_attr;
    let am_ok = noam_leak > full_leak;
    gate(
        8,
        fae_ok && am_ok,
        t0.elapsed(),
        Duration::from_secs(9 * 1800),
        format!(
            "attribute preservation no-fae {nofae_attr:.2}% vs full {full_attr:.2}% ({}); leakage no-am {noam_leak:.4} vs full {full_leak:.4} ({})",
            if fae_ok { "lower" } else { "NOT lower" },
            if am_ok { "higher" } else { "NOT higher" }
        ),
    );
}
