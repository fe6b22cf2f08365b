//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::time::{Duration, Instant};

use common::*;
use pldr::autograd::Graph;
use pldr::cache::{CacheMode, CacheSet, LayerPrime};
use pldr::checkpoint::{load, save};
use pldr::config::{PredefinedGKind, Variant};
use pldr::diagnostics::{
    compare_cached_uncached, head_determinants, rmse_between_heads, time_inference, HeadDeterminant,
};
use pldr::generation::{generate, GenerateOptions, SamplerSpec};
use pldr::gradcheck::{grad_check, GradCheckConfig};
use pldr::model::GOverride;
use pldr::nn::{
    iswiglu, layer_norm, linear, lu, rope_apply, silu, softmax_lastdim, swiglu, LayerNormParams, Linear, LuUnit,
    RotaryTable, SwigluUnit,
};
use pldr::plga::{
    density_operator, plga_attention, plga_full, DeductiveKind, DeductiveOutputs, LayerDeductive, PlgaHeadParams,
    ResidualGluNet,
};
use pldr::{ModelConfig, PldrModel, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_prompt(rng: &mut StdRng, max_len: usize) -> String {
    const WORDS: [&str; 12] = [
        "the", "cat", "a", "small", "dog", "sat", "on", "red", "house", "and", "ran", "big",
    ];
    let mut p = String::new();
    loop {
        let w = WORDS[rng.gen_range(0..WORDS.len())];
        if p.len() + w.len() + 1 > max_len {
            return p;
        }
        if !p.is_empty() {
            p.push(' ');
        }
        p.push_str(w);
    }
}

fn greedy(model: &PldrModel, prompt: &str, n: usize, cache: CacheMode, ov: Option<GOverride>) -> Result<Vec<usize>, String> {
    generate(
        model,
        prompt,
        &GenerateOptions {
            max_length: n,
            sampler: SamplerSpec::greedy(),
            cache,
            g_override: ov,
            capture_deductive: false,
        },
    )
    .map(|r| r.token_ids)
    .map_err(err)
}

fn c1_param_arithmetic() -> Outcome {
    for (a_dff, want) in [(170, 129.33), (180, 136.91), (181, 137.66), (196, 149.03)] {
        let r = ModelConfig::table_110m(a_dff).plga_param_count();
        ensure((r.resl_over_a_ratio - want).abs() <= 0.005, || {
            format!("a_dff={a_dff}: ratio {} vs {want}", r.resl_over_a_ratio)
        })?;
    }
    let total = ModelConfig::table_110m(170).plga_param_count().total_plga_params;
    ensure(total == 4_082_880, || format!("total PLGA params {total}"))?;
    Ok(format!("4 ratios within 0.005, total {total}"))
}

fn c2_sdpa_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let m = PldrModel::new(desk(Variant::PredefinedG, Some(PredefinedGKind::Identity), 21)).map_err(err)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = rng.gen_range(1..=32);
        let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..258)).collect();
        let (logits, _) = m.forward_full(&[toks.clone()], false).map_err(err)?;
        let reference = sdpa_reference(&m, &toks);
        for (r, &x) in reference.iter().flatten().zip(logits.data()) {
            worst = worst.max((r - x as f64).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("20 inputs, max abs error {worst:.2e}"))
}

fn c3_constant_g_cache_exactness() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let trainable = PldrModel::new(desk(Variant::Trainable, None, 31)).map_err(err)?;
    let models = [
        ("PredefinedG", PldrModel::new(desk(Variant::PredefinedG, Some(PredefinedGKind::RandomNormal), 32)).map_err(err)?),
        ("TransferredG", trainable.transfer_g().map_err(err)?),
    ];
    for (name, m) in &models {
        for i in 0..10 {
            let p = random_prompt(&mut rng, 28);
            let r = compare_cached_uncached(m, &p, 100).map_err(err)?;
            ensure(r.tokens_cached == r.tokens_uncached, || format!("{name} prompt {i}: tokens differ"))?;
            ensure(r.tokens_cached.len() == 100 || r.tokens_cached.last() == Some(&pldr::generation::EOS), || {
                format!("{name} prompt {i}: stopped early without EOS")
            })?;
            let g = r.kinds.iter().find(|k| k.kind == DeductiveKind::GLm).ok_or("no G_LM row")?;
            ensure(g.drift == 0.0, || format!("{name} prompt {i}: G_LM drift {}", g.drift))?;
        }
    }
    Ok("2 variants x 10 prompts x 100 tokens identical, G_LM drift 0".into())
}

fn c4_incremental_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let b = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=3);
        let dk = 2 * rng.gen_range(1..=8);
        let s = rng.gen_range(1..=16);
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: h,
            dk,
            d_model: h * dk,
            context_length: 16,
            variant: Variant::PredefinedG,
            predefined_g_kind: Some(PredefinedGKind::Identity),
            ..ModelConfig::default()
        };
        let q = Tensor::<f32>::randn(&[b, h, s, dk], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[b, h, s, dk], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[b, h, s, dk], 1.0, &mut rng);
        let g = Tensor::<f32>::randn(&[b, h, dk, dk], 0.5, &mut rng);

        let mut graph = Graph::new();
        let vars = [q.clone(), k.clone(), v.clone(), g.clone()].map(|t| graph.input(t, false));
        let (out, _) = plga_attention(&mut graph, vars[0], vars[1], vars[2], vars[3], true).map_err(err)?;
        let full = graph.value(out);

        let mut caches = CacheSet::new(&cfg, b, s, CacheMode::KV_G).map_err(err)?;
        caches
            .prime(vec![LayerPrime {
                k,
                v,
                g_lm: g.clone(),
                a: None,
                a_lm: None,
                a_p: None,
                density_sum: None,
            }])
            .map_err(err)?;
        let last_q = Tensor::from_fn(&[b, h, 1, dk], |i| q.data()[((i / dk) * s + s - 1) * dk + i % dk]);
        let inc = caches.attend_incremental(0, &last_q, &g).map_err(err)?;
        for bh in 0..b * h {
            for j in 0..dk {
                worst = worst.max((full.data()[(bh * s + s - 1) * dk + j] - inc.data()[bh * dk + j]).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max abs error {worst:e}"))?;
    Ok(format!("50 cases, max abs error {worst:.2e}"))
}

fn c5_gradient_fidelity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let cfg = GradCheckConfig::default();
    let table = RotaryTable::<f64>::new(4, 8, 10_000.0).map_err(err)?;
    let mut checks = 0usize;
    let mut worst = 0.0f64;
    let mut record = |r: pldr::Result<pldr::gradcheck::GradCheckReport>, what: &str| -> Result<(), String> {
        let r = r.map_err(|e| format!("{what}: {e}"))?;
        worst = worst.max(r.max_rel_err);
        checks += 1;
        Ok(())
    };
    for _ in 0..5 {
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        record(
            grad_check(|g, v| linear(g, v[0], &Linear { w: v[1], b: v[2] }), &[x.clone(), w, b], &cfg, &mut rng),
            "linear",
        )?;
        let gain = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        record(
            grad_check(
                |g, v| layer_norm(g, v[0], &LayerNormParams { gain: v[1], bias: v[2] }),
                &[x.clone(), gain, bias],
                &cfg,
                &mut rng,
            ),
            "layer_norm",
        )?;
        let unit = SwigluUnit::<Tensor<f64>>::init(4, 5, 0.7, &mut rng);
        let mut leaves = vec![x.clone()];
        unit.visit("u", &mut |_, t| leaves.push(t.clone()));
        record(
            grad_check(
                |g, v| {
                    let u = SwigluUnit {
                        value: Linear { w: v[1], b: v[2] },
                        gate: Linear { w: v[3], b: v[4] },
                    };
                    swiglu(g, v[0], &u)
                },
                &leaves,
                &cfg,
                &mut rng,
            ),
            "swiglu",
        )?;
        let lu_unit = LuUnit::<Tensor<f64>>::init(4, 3, 0.7, &mut rng);
        let mut leaves = vec![x.clone()];
        lu_unit.visit("l", &mut |_, t| leaves.push(t.clone()));
        record(
            grad_check(
                |g, v| lu(g, v[0], &LuUnit { out: Linear { w: v[1], b: v[2] } }),
                &leaves,
                &cfg,
                &mut rng,
            ),
            "lu",
        )?;

        let z = Tensor::<f64>::randn(&[3, 4], 2.0, &mut rng).map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v });
        record(grad_check(|g, v| Ok(iswiglu(g, v[0])), &[z.clone()], &cfg, &mut rng), "iswiglu")?;
        record(grad_check(|g, v| Ok(silu(g, v[0])), &[z.clone()], &cfg, &mut rng), "silu")?;
        record(grad_check(|g, v| Ok(softmax_lastdim(g, v[0])), &[z], &cfg, &mut rng), "softmax")?;
        let scores = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        record(grad_check(|g, v| Ok(g.softmax(v[0], true)), &[scores], &cfg, &mut rng), "causal softmax")?;

        let r = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let t = &table;
        record(grad_check(|g, v| rope_apply(g, v[0], 2, t), &[r], &cfg, &mut rng), "rope")?;

        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = Tensor::<f64>::randn(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 1.0, &mut rng);
            let b = Tensor::<f64>::randn(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 1.0, &mut rng);
            record(grad_check(|g, v| g.matmul(v[0], v[1], ta, tb), &[a, b], &cfg, &mut rng), "matmul")?;
        }
        let base = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng).map(|x| x.abs() + 0.1);
        let exp = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        record(grad_check(|g, v| g.pow(v[0], v[1]), &[base, exp], &cfg, &mut rng), "pow")?;
        let emb = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        record(grad_check(|g, v| g.embedding(v[0], &[4, 0, 4], &[1, 3]), &[emb], &cfg, &mut rng), "embedding")?;
        let logits = Tensor::<f64>::randn(&[2, 3, 7], 1.0, &mut rng);
        record(
            grad_check(|g, v| g.cross_entropy(v[0], &[1, 0, 6, 3, 3, 2]), &[logits], &cfg, &mut rng),
            "cross_entropy",
        )?;
        let wd = Tensor::<f64>::randn(&[3, 4, 4], 0.5, &mut rng);
        record(grad_check(|g, v| g.dag_loss(v[0]), &[wd], &cfg, &mut rng), "dag_loss")?;
        let q = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        record(grad_check(|g, v| density_operator(g, v[0]), &[q], &cfg, &mut rng), "density")?;

        let net = ResidualGluNet::<Tensor<f64>>::init(4, 3, 2, 2, &mut rng);
        let mut heads = PlgaHeadParams::<Tensor<f64>>::init(2, 4, &mut rng);
        heads.b_a = Tensor::full(&[2, 4, 4], 0.3);
        heads.p = Tensor::<f64>::randn(&[2, 4, 4], 0.3, &mut rng).map(|x| 1.0 + x);
        let mut leaves: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng)).collect();
        heads.visit("h", &mut |_, t| leaves.push(t.clone()));
        net.visit("n", &mut |_, t| leaves.push(t.clone()));
        let net_ref = &net;
        let full_cfg = GradCheckConfig {
            max_coords: Some(24),
            ..GradCheckConfig::default()
        };
        record(
            grad_check(
                |g, v| {
                    let hp = PlgaHeadParams {
                        w_a: v[3],
                        b_a: v[4],
                        p: v[5],
                        w_g: v[6],
                        b_g: v[7],
                    };
                    let mut idx = 8;
                    let nv = net_ref
                        .map(&mut |_| {
                            idx += 1;
                            Ok::<_, pldr::Error>(v[idx - 1])
                        })
                        .unwrap();
                    Ok(plga_full(g, v[0], v[1], v[2], &hp, &nv, 1e-6, true)?.0)
                },
                &leaves,
                &full_cfg,
                &mut rng,
            ),
            "plga_full",
        )?;
    }
    Ok(format!("{checks} checks at 5 points each, worst relative error {worst:.2e}"))
}

fn random_outputs(rng: &mut StdRng) -> DeductiveOutputs {
    let (layers, h, dk) = (rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(1..=6));
    let mut t = || Tensor::<f64>::randn(&[h, dk, dk], rng.gen_range(0.1..3.0), rng);
    DeductiveOutputs {
        layers: (0..layers)
            .map(|_| LayerDeductive {
                a: Some(t()),
                a_lm: Some(t()),
                a_p: Some(t()),
                g_lm: t(),
            })
            .collect(),
    }
}

fn c6_diagnostics_oracles() -> Outcome {
    let mut rng = StdRng::seed_from_u64(6);
    let mut worst_rmse = 0.0f64;
    for _ in 0..20 {
        let d = random_outputs(&mut rng);
        for (kind, v) in rmse_between_heads(&d).map_err(err)? {
            let ts: Vec<Tensor<f64>> = d.kind(kind).unwrap().into_iter().cloned().collect();
            let v = v.ok_or("missing kind")?;
            worst_rmse = worst_rmse.max((v - pairwise_rmse(&ts)).abs());
        }
    }
    ensure(worst_rmse <= 1e-12, || format!("rmse error {worst_rmse:e}"))?;

    let mut worst_det = 0.0f64;
    for n in 1..=5 {
        for _ in 0..20 {
            let t = Tensor::<f64>::randn(&[3, n, n], 1.0, &mut rng);
            for (hd, det) in head_determinants(&t).map_err(err)?.iter().enumerate() {
                let want = cofactor_det(&t.data()[hd * n * n..(hd + 1) * n * n], n);
                worst_det = worst_det.max((det.value() - want).abs() / want.abs());
            }
        }
    }
    ensure(worst_det <= 1e-9, || format!("determinant relative error {worst_det:e}"))?;
    ensure(
        !HeadDeterminant::from_log(1, 88.0).overflow && HeadDeterminant::from_log(1, 89.0).overflow,
        || "overflow boundary".into(),
    )?;
    Ok(format!(
        "rmse error {worst_rmse:.1e}, det relative error {worst_det:.1e}, overflow at 89 not 88"
    ))
}

fn c7_speedup() -> Outcome {
    let m = PldrModel::new(desk(Variant::Trainable, None, 71)).map_err(err)?;
    ensure(m.config().num_residual_layers == 8, || "desk model is not 8 residual layers".into())?;
    let spec = SamplerSpec::greedy();
    let prompt = "the cat sat on the red mat";
    // greedy generation on an untrained model may stop at EOS; check it does not
    let n = greedy(&m, prompt, 100, CacheMode::KV_G, None)?.len();
    ensure(n == 100, || format!("only {n} tokens generated"))?;
    let cached = time_inference(&m, prompt, &spec, 100, 5, 10, CacheMode::KV_G).map_err(err)?;
    let uncached = time_inference(&m, prompt, &spec, 100, 5, 10, CacheMode::NONE).map_err(err)?;
    let speedup = uncached.mean_ms / cached.mean_ms;
    let detail = format!(
        "5 runs x 10 loops x 100 tokens: kv+g {:.1}±{:.1} ms, none {:.1}±{:.1} ms, speedup {speedup:.2}x",
        cached.mean_ms, cached.std_ms, uncached.mean_ms, uncached.std_ms
    );
    ensure(speedup >= 1.5, || detail.clone())?;
    Ok(detail)
}

struct Trained {
    dag_model: PldrModel,
}

fn c8_training(out: &mut Option<Trained>) -> Outcome {
    let size = std::fs::metadata(corpus_path()).map_err(err)?.len();
    ensure(size <= 100 * 1024, || format!("corpus is {size} bytes"))?;
    let (_, ce_run) = train_desk(500, [0.0; 3], 81);
    let (first, last) = (ce_run[0].cross_entropy, ce_run[499].cross_entropy);
    ensure((first - 258f64.ln()).abs() <= 0.1, || format!("step-1 CE {first} vs ln 258"))?;
    ensure(last < first, || format!("CE {first} -> {last}"))?;

    let (dag_model, dag_run) = train_desk(500, [0.05; 3], 82);
    let sum = |r: &pldr::training::LossReport| r.dag_losses.iter().sum::<f64>();
    let (d1, d500) = (sum(&dag_run[0]), sum(&dag_run[499]));
    ensure(d500 < d1, || format!("summed DAG {d1:e} -> {d500:e}"))?;
    *out = Some(Trained { dag_model });
    Ok(format!(
        "CE {first:.3} -> {last:.3}; with DAG 0.05x3: summed DAG {d1:.3e} -> {d500:.3e}, CE {:.3} -> {:.3}",
        dag_run[0].cross_entropy, dag_run[499].cross_entropy
    ))
}

fn c9_mismatched_g(trained: Option<&Trained>) -> Outcome {
    let m = &trained.ok_or("no trained model")?.dag_model;
    let before = m.weight_checksum();
    let mut rng = StdRng::seed_from_u64(9);
    let prompts: Vec<String> = (0..10).map(|_| random_prompt(&mut rng, 24)).collect();
    let mut changed = [0usize; 2];
    for p in &prompts {
        let base = greedy(m, p, 50, CacheMode::KV_G, None)?;
        for (i, ov) in [GOverride::Identity, GOverride::RandomNormal { seed: 99 }].into_iter().enumerate() {
            if greedy(m, p, 50, CacheMode::KV_G, Some(ov))? != base {
                changed[i] += 1;
            }
        }
    }
    ensure(m.weight_checksum() == before, || "weights changed".into())?;
    ensure(changed.iter().all(|&c| c >= 9), || format!("changed {changed:?} of 10"))?;
    Ok(format!("identity changed {}/10, random changed {}/10, checksum unchanged", changed[0], changed[1]))
}

fn c10_invariance(trained: Option<&Trained>) -> Outcome {
    let m = &trained.ok_or("no trained model")?.dag_model;
    let prompt = "the small dog";
    let r = compare_cached_uncached(m, prompt, 50).map_err(err)?;
    ensure(r.kinds.len() == 4, || format!("{} kinds reported", r.kinds.len()))?;
    ensure((0.0..=1.0).contains(&r.token_agreement), || "agreement out of range".into())?;

    // recompute the final-step metrics from an independent cached run
    let snap = generate(
        m,
        prompt,
        &GenerateOptions {
            max_length: 50,
            sampler: SamplerSpec::greedy(),
            cache: CacheMode::KV_G,
            g_override: None,
            capture_deductive: true,
        },
    )
    .map_err(err)?
    .deductive_snapshots
    .and_then(|s| s.last().cloned())
    .ok_or("no snapshot")?;
    for k in &r.kinds {
        let ts: Vec<Tensor<f64>> = snap.kind(k.kind).ok_or("kind missing")?.into_iter().cloned().collect();
        let oracle = pairwise_rmse(&ts);
        ensure((k.rmse_cached - oracle).abs() <= 1e-12 * oracle.max(1.0), || {
            format!("{}: rmse {} vs oracle {oracle}", k.kind.label(), k.rmse_cached)
        })?;
        ensure(k.drift.is_finite(), || format!("{} drift not finite", k.kind.label()))?;
    }
    let table = r.to_table();
    ensure(
        ["A ", "A_LM", "A_P", "G_LM", "token agreement"].iter().all(|s| table.contains(s)),
        || "table layout".into(),
    )?;
    println!("{table}");
    let drifts: Vec<String> = r.kinds.iter().map(|k| format!("{}={:.2e}", k.kind.label(), k.drift)).collect();
    Ok(format!("agreement {:.2}, drift {}", r.token_agreement, drifts.join(" ")))
}

fn c11_checkpoints() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let trainable = PldrModel::new(desk(Variant::Trainable, None, 111)).map_err(err)?;
    let transferred = trainable.transfer_g().map_err(err)?;
    let predefined = PldrModel::new(desk(Variant::PredefinedG, Some(PredefinedGKind::RandomNormal), 112)).map_err(err)?;
    for (i, m) in [&trainable, &transferred, &predefined].into_iter().enumerate() {
        let path = dir.path().join(format!("{i}.pldr"));
        save(m, &path).map_err(err)?;
        let back = load(&path).map_err(err)?;
        let mut a = Vec::new();
        let mut b = Vec::new();
        m.weights.visit(&mut |n, t| a.push((n, t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())));
        back.weights.visit(&mut |n, t| b.push((n, t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())));
        ensure(a == b && back.config() == m.config(), || format!("{:?} differs after reload", m.variant()))?;
    }
    let plga = trainable.config().plga_param_count().total_plga_params;
    let (before, after) = (trainable.trainable_param_count(), transferred.trainable_param_count());
    ensure(after == before - plga, || format!("{after} != {before} - {plga}"))?;
    Ok(format!("3 variants bitwise identical; params {before} -> {after} (-{plga})"))
}

fn main() {
    let mut trained = None;
    let mut failures = 0;
    let mut run = |n: usize, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if took <= budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {took:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(d) => println!("PASS criterion {n}: {d} [{took:.2?}]"),
            Err(e) => {
                failures += 1;
                println!("FAIL criterion {n}: {e} [{took:.2?}]")
            }
        }
    };
    let s = Duration::from_secs;
    run(1, s(1), &mut c1_param_arithmetic);
    run(2, s(30), &mut c2_sdpa_equivalence);
    run(3, s(120), &mut c3_constant_g_cache_exactness);
    run(4, s(10), &mut c4_incremental_oracle);
    run(5, s(120), &mut c5_gradient_fidelity);
    run(6, s(30), &mut c6_diagnostics_oracles);
    run(7, s(600), &mut c7_speedup);
    run(8, s(900), &mut || c8_training(&mut trained));
    run(9, s(120), &mut || c9_mismatched_g(trained.as_ref()));
    run(10, s(120), &mut || c10_invariance(trained.as_ref()));
    run(11, s(30), &mut c11_checkpoints);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
