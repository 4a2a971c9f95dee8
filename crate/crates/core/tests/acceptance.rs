//! One line per acceptance criterion. Run with
//! `cargo test -p causalcap --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use causalcap::captioner::{
    beam_search, decode, Checkpoint, CounterfactualSample, DecodeStrategy, HashNoiseModel, ModelConfig,
    OracleCopyModel, SceneImage,
};
use causalcap::causal::{
    estimate_effects, nde_loss, nde_loss_with_grad, nll_loss, nll_loss_with_grad, te_loss, te_loss_with_grad,
    PositionPolicy, RegularizationConfig, Variant, DEFAULT_LOG_PROB_FLOOR,
};
use causalcap::explain::interpretability_accuracy;
use causalcap::experiment::{prepare, run_pipeline, run_variant, sweep_alpha, ExperimentConfig, ExperimentDir, Summary};
use causalcap::metrics::{bleu4, chair_s, ndcg_at_k, precision_at_k, spearman, ErrorRate, RankingJudgment};
use causalcap::scenegen::{build_dataset, World, WorldConfig};
use causalcap::trainer::{continue_nll, train_stage1, TrainConfig};
use causalcap::vocab::TokenId;
use common::*;

const FLOOR: f64 = DEFAULT_LOG_PROB_FLOOR;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c1_loss_oracle() -> Outcome {
    let start = Instant::now();
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for f in 0..100 {
        let m = tiny_model(f);
        let s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
        let batch = [(&s.factual_image, s.factual_caption.tokens.as_slice()), (&s.cf_image, s.cf_caption.as_slice())];
        let nll = nll_loss(&m, &batch).unwrap();
        let want = naive_nll(&m, &s.factual_image, &s.factual_caption.tokens) + naive_nll(&m, &s.cf_image, &s.cf_caption);
        worst = worst
            .max((nll - want).abs())
            .max((te_loss(&m, &s, FLOOR).unwrap() - naive_te(&m, &s, FLOOR)).abs())
            .max((nde_loss(&m, &s, FLOOR).unwrap() - naive_nde(&m, &s, FLOOR)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && secs < 10.0,
        format!("max abs diff {worst:.2e} over 100 fixtures (tol 1e-6), {secs:.2}s (limit 10s)"),
    )
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(14);
    let mut worst = [0.0f64; 3];
    for f in 0..10 {
        let m = tiny_model(100 + f);
        let s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
        let (image, tokens) = (s.factual_image.clone(), s.factual_caption.tokens.clone());
        let (_, g) = nll_loss_with_grad(&m, &[(&image, tokens.as_slice())]).unwrap();
        worst[0] = worst[0].max(max_rel_err(&m, &g, |p| nll_loss(p, &[(&image, tokens.as_slice())]).unwrap()));
        let (_, g) = te_loss_with_grad(&m, &s, FLOOR).unwrap();
        worst[1] = worst[1].max(max_rel_err(&m, &g, |p| te_loss(p, &s, FLOOR).unwrap()));
        let (_, g) = nde_loss_with_grad(&m, &s, FLOOR).unwrap();
        worst[2] = worst[2].max(max_rel_err(&m, &g, |p| nde_loss(p, &s, FLOOR).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.iter().all(|&w| w < 1e-4) && secs < 60.0,
        format!(
            "max rel err nll {:.1e}, te {:.1e}, nde {:.1e} (tol 1e-4, step 1e-4), {secs:.1}s (limit 60s)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c3_alpha_one() -> Outcome {
    let mut wc = WorldConfig::shortcut(0.9, 20, 1);
    wc.splits.valid = 1;
    wc.splits.test = 1;
    let world = World::new(wc).unwrap();
    let data = build_dataset(&world).unwrap();
    let mc = ModelConfig {
        embed_dim: 12,
        attention_dim: 12,
        hidden_dim: 12,
        ..ModelConfig::new(world.vocab.size(), world.vocab.num_objects(), 4, 4)
    };
    let items: Vec<_> = data.train.iter().map(|e| (&e.image, e.caption.tokens.as_slice())).collect();
    let s1cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 2,
        ..TrainConfig::stage1()
    };
    let s1: Checkpoint = train_stage1(&mc, &items, &s1cfg).unwrap().checkpoint;
    let samples: Vec<CounterfactualSample> = data
        .train
        .iter()
        .map(|e| e.with_cf_caption(decode(&s1.params, &e.cf_image, DecodeStrategy::Greedy, 0).unwrap()))
        .collect();
    let c = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 3,
        seed: 9,
        ..TrainConfig::stage2()
    };
    let factual: Vec<_> = samples
        .iter()
        .map(|s| (&s.factual_image, s.factual_caption.tokens.as_slice()))
        .collect();
    let (vanilla, vtrace, _) = continue_nll(&s1.params, &factual, &c).unwrap();
    let mut same = vtrace.len() >= 10;
    for variant in [Variant::Te, Variant::Nde] {
        let out = causalcap::trainer::train_stage2(&s1, &samples, &c, &RegularizationConfig::new(1.0, variant)).unwrap();
        same &= out.checkpoint.params.to_flat().iter().map(|v| v.to_bits()).eq(vanilla.to_flat().iter().map(|v| v.to_bits()));
        same &= out.trace.len() == vtrace.len()
            && out
                .trace
                .iter()
                .zip(&vtrace)
                .all(|(a, b)| a.aggregate.to_bits() == b.nll.to_bits() && a.grad_norm.to_bits() == b.grad_norm.to_bits());
    }
    check(
        same,
        format!("TE and NDE at alpha 1 vs NLL continuation over {} steps: bit-identical = {same}", vtrace.len()),
    )
}

fn c4_null_intervention() -> Outcome {
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    let mut effects_zero = true;
    for f in 0..50 {
        let m = tiny_model(f);
        let mut s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
        s.cf_image = s.factual_image.clone();
        worst = worst.max(nde_loss(&m, &s, FLOOR).unwrap().abs());
        s.cf_caption = s.factual_caption.tokens.clone();
        for &tok in s.target_tokens() {
            let e = estimate_effects(&m, &s, tok, PositionPolicy::AverageOverPrefixes).unwrap();
            effects_zero &= (e.te, e.nde, e.tie) == (0.0, 0.0, 0.0);
        }
    }
    check(
        worst < 1e-9 && effects_zero,
        format!("max |nde| {worst:.1e} (tol 1e-9) over 50 fixtures, identity effects all (0,0,0) = {effects_zero}"),
    )
}

/// Outcomes of the shortcut runs that later criteria reuse.
struct Shortcut {
    chair: [Vec<f64>; 3],
    bleu: [Vec<f64>; 3],
    interp: [Vec<f64>; 3],
    seed0_dir: tempfile::TempDir,
    seed0_nde: Summary,
    secs: f64,
}

fn run_shortcut() -> Shortcut {
    let start = Instant::now();
    let mut chair: [Vec<f64>; 3] = Default::default();
    let mut bleu: [Vec<f64>; 3] = Default::default();
    let mut interp: [Vec<f64>; 3] = Default::default();
    let mut keep = None;
    for seed in SEEDS {
        let tmp = tempfile::tempdir().unwrap();
        let dir = ExperimentDir::new(tmp.path());
        let cfg = ExperimentConfig::shortcut(seed);
        let prep = prepare(&dir, &cfg).unwrap();
        let mut nde = None;
        for (k, variant) in [None, Some(Variant::Te), Some(Variant::Nde)].into_iter().enumerate() {
            let s = run_variant(&dir, &cfg, &prep, variant, causalcap::experiment::run_name(variant), cfg.regularization.alpha)
                .unwrap();
            chair[k].push(s.metrics.chair_s);
            bleu[k].push(s.metrics.bleu4);
            interp[k].push(s.metrics.interpretability.unwrap_or(f64::NAN));
            if variant == Some(Variant::Nde) {
                nde = Some(s);
            }
        }
        eprintln!(
            "  shortcut seed {seed}: CHAIR_s baseline {:.3} TE {:.3} NDE {:.3}",
            chair[0][seed as usize], chair[1][seed as usize], chair[2][seed as usize]
        );
        if seed == 0 {
            keep = Some((tmp, nde.unwrap()));
        }
    }
    let (seed0_dir, seed0_nde) = keep.unwrap();
    Shortcut {
        chair,
        bleu,
        interp,
        seed0_dir,
        seed0_nde,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn c5_chair(s: &Shortcut) -> Outcome {
    let [b, te, nde] = [mean(&s.chair[0]), mean(&s.chair[1]), mean(&s.chair[2])];
    if nde > te {
        eprintln!("  warning: mean NDE CHAIR_s {nde:.4} above mean TE {te:.4}");
    }
    check(
        nde < b && te < b && s.secs < 600.0,
        format!(
            "mean CHAIR_s baseline {b:.4}, TE {te:.4}, NDE {nde:.4}; per seed baseline {} TE {} NDE {}; NDE <= TE: {}; {:.0}s (limit 600s)",
            fmt(&s.chair[0]),
            fmt(&s.chair[1]),
            fmt(&s.chair[2]),
            nde <= te,
            s.secs
        ),
    )
}

fn c6_bleu(s: &Shortcut) -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..SEEDS.len() {
        let base = s.bleu[0][k];
        for v in [1, 2] {
            worst = worst.max((s.bleu[v][k] - base).abs() / base);
        }
    }
    check(
        worst < 0.05,
        format!(
            "max relative BLEU-4 gap {:.2}% (limit 5%); baseline {} TE {} NDE {}",
            100.0 * worst,
            fmt(&s.bleu[0]),
            fmt(&s.bleu[1]),
            fmt(&s.bleu[2])
        ),
    )
}

fn c7_metrics() -> Outcome {
    let phrase: &[TokenId] = &[5, 6];
    let caps: [&[TokenId]; 4] = [&[1, 5, 6, 0], &[5, 6], &[1, 5, 2, 6, 0], &[1, 3, 0]];
    let items: Vec<_> = caps.iter().map(|c| (*c, phrase)).collect();
    let chair = chair_s(&items).unwrap();
    let j = RankingJudgment::new(vec![1, 0, 1, 1, 0]).unwrap();
    let p5 = precision_at_k(&j, 5).unwrap();
    let ndcg = ndcg_at_k(&j, 5).unwrap();
    let bleu = bleu4(&[1, 2, 3, 4, 5], &[&[1, 2, 3, 4, 6]]).unwrap();
    let err = ErrorRate::from_counts(283, 2034).unwrap().to_string();
    check(
        chair == 0.5
            && (p5 - 0.6).abs() < 1e-12
            && (ndcg - 0.9060).abs() < 1e-4
            && (bleu - 0.6687).abs() < 1e-4
            && err == "13.91% (283)",
        format!("CHAIR_s {chair}, P@5 {p5}, nDCG@5 {ndcg:.6}, BLEU-4 {bleu:.6}, error rate {err}"),
    )
}

fn c8_decoding() -> Outcome {
    let cfg = tiny_config();
    let mut r = rng(21);
    let mut greedy_ok = 0;
    for f in 0..50 {
        let m = tiny_model(f);
        let image = random_image(&mut r, 3, 3, cfg.num_objects);
        let beam = decode(&m, &image, DecodeStrategy::Beam { width: 1 }, 0).unwrap();
        greedy_ok += (beam == decode(&m, &image, DecodeStrategy::Greedy, 0).unwrap()) as usize;
    }
    let blank = SceneImage::blank(2, 2);
    let mut enum_ok = 0;
    for salt in 0..50 {
        let m = HashNoiseModel::new(3, 3, salt);
        let best = &scored(&m, &blank, enumerate(3, 3))[0];
        let got = beam_search(&m, &blank, 5).unwrap();
        enum_ok += (got[0].tokens == best.1 && (got[0].log_prob - best.0).abs() < 1e-12) as usize;
    }
    let mut nucleus_ok = 0;
    let mut r = rng(22);
    for f in 0..20 {
        let m = tiny_model(f);
        let image = random_image(&mut r, 3, 3, cfg.num_objects);
        let seed = f;
        let anc = decode(&m, &image, DecodeStrategy::Ancestral, seed).unwrap();
        let nuc = decode(&m, &image, DecodeStrategy::Nucleus { p: 1.0 }, seed).unwrap();
        let topk = decode(&m, &image, DecodeStrategy::TopK { k: cfg.vocab_size }, seed).unwrap();
        nucleus_ok += (anc == nuc && anc == topk) as usize;
    }
    check(
        greedy_ok == 50 && enum_ok == 50 && nucleus_ok == 20,
        format!(
            "beam 1 == greedy {greedy_ok}/50, beam 5 == enumeration optimum {enum_ok}/50 (V=3, L=3), nucleus p=1 == top-k V == ancestral {nucleus_ok}/20"
        ),
    )
}

fn shortcut_train(n: usize) -> (World, Vec<(SceneImage, causalcap::captioner::CaptionSample)>) {
    let mut cfg = WorldConfig::shortcut(0.9, n, 8);
    cfg.splits.valid = 1;
    cfg.splits.test = 1;
    let world = World::new(cfg).unwrap();
    let data = build_dataset(&world).unwrap();
    let s = data.train.into_iter().map(|e| (e.image, e.caption)).collect();
    (world, s)
}

fn c9_interpretability(s: &Shortcut) -> Outcome {
    let (world, samples) = shortcut_train(100);
    let refs: Vec<_> = samples.iter().map(|(i, c)| (i, c)).collect();
    let oracle = interpretability_accuracy(&OracleCopyModel::new(world.vocab.clone(), 20), &refs, 1, 0).unwrap();
    let (world, samples) = shortcut_train(500);
    let refs: Vec<_> = samples.iter().map(|(i, c)| (i, c)).collect();
    let noise = HashNoiseModel::new(world.vocab.size(), 20, 17);
    let uniform = interpretability_accuracy(&noise, &refs, 1, 0).unwrap();
    let (base, nde) = (s.interp[0][0], s.interp[2][0]);
    check(
        oracle.accuracy == 1.0 && oracle.probes.len() == 100 && nde >= base && (uniform.accuracy - 0.2).abs() <= 0.06,
        format!(
            "oracle {:.3} over {} probes; seed 0 NDE {nde:.3} vs baseline {base:.3}; uniform {:.3} over {} probes (0.20 +/- 0.06); all seeds baseline {} NDE {}",
            oracle.accuracy,
            oracle.probes.len(),
            uniform.accuracy,
            uniform.probes.len(),
            fmt(&s.interp[0]),
            fmt(&s.interp[2])
        ),
    )
}

fn c10_biased() -> Outcome {
    let mut base = Vec::new();
    let mut nde = Vec::new();
    for seed in SEEDS {
        let tmp = tempfile::tempdir().unwrap();
        let dir = ExperimentDir::new(tmp.path());
        let cfg = ExperimentConfig::biased(seed);
        let prep = prepare(&dir, &cfg).unwrap();
        for (variant, out) in [(None, &mut base), (Some(Variant::Nde), &mut nde)] {
            let s = run_variant(&dir, &cfg, &prep, variant, causalcap::experiment::run_name(variant), cfg.regularization.alpha)
                .unwrap();
            out.push(s.metrics.biased_error_rate.expect("biased config reports an error rate"));
        }
    }
    let rates = |v: &[ErrorRate]| v.iter().map(|e| e.rate).collect::<Vec<_>>();
    let (b, n) = (mean(&rates(&base)), mean(&rates(&nde)));
    let shown = |v: &[ErrorRate]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
    check(
        n < b,
        format!(
            "mean error rate NDE {:.2}% vs baseline {:.2}%; per seed baseline [{}] NDE [{}]",
            100.0 * n,
            100.0 * b,
            shown(&base),
            shown(&nde)
        ),
    )
}

fn c11_sweep(s: &Shortcut) -> Outcome {
    let dir = ExperimentDir::new(s.seed0_dir.path());
    let mut cfg = ExperimentConfig::shortcut(0);
    cfg.eval.interp_samples = 0;
    let alphas = [0.9, 0.99, 0.999, 0.9999, 1.0];
    let report = sweep_alpha(&dir, &cfg, &alphas).unwrap();
    let mut ok = report.alpha_one_matches_vanilla;
    let mut detail = Vec::new();
    for v in [Variant::Te, Variant::Nde] {
        let (a, chair, bleu) = report.series(v);
        let rho = spearman(&a, &chair).unwrap();
        let hi = bleu.iter().cloned().fold(f64::MIN, f64::max);
        let lo = bleu.iter().cloned().fold(f64::MAX, f64::min);
        let spread = (hi - lo) / hi;
        ok &= rho > 0.0 && spread < 0.05;
        detail.push(format!(
            "{} spearman {rho:.3}, CHAIR_s {}, BLEU-4 spread {:.2}%",
            v.name(),
            fmt(&chair),
            100.0 * spread
        ));
    }
    check(
        ok,
        format!("{}; alpha 1 == vanilla: {}", detail.join("; "), report.alpha_one_matches_vanilla),
    )
}

fn c12_determinism(s: &Shortcut) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let again = run_pipeline(&ExperimentDir::new(tmp.path()), &ExperimentConfig::shortcut(0), Some(Variant::Nde)).unwrap();
    let a = serde_json::to_string(&s.seed0_nde).unwrap();
    let b = serde_json::to_string(&again).unwrap();
    check(
        a == b,
        format!("seed 0 NDE summary rerun in a fresh directory: identical = {} (checkpoint {})", a == b, &again.checkpoint_sha256[..12]),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match out {
            Ok(d) => println!("[PASS] {n}. {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {n}. {name}: {d}");
            }
        }
    };
    report(1, "loss oracle equivalence", &mut c1_loss_oracle);
    report(2, "gradient fidelity", &mut c2_gradients);
    report(3, "alpha 1 degenerates to NLL", &mut c3_alpha_one);
    report(4, "null intervention", &mut c4_null_intervention);
    report(7, "metric fixtures", &mut c7_metrics);
    report(8, "decoding invariants", &mut c8_decoding);
    let shortcut = catch_unwind(run_shortcut);
    match &shortcut {
        Ok(s) => {
            report(5, "shortcut world CHAIR_s", &mut || c5_chair(s));
            report(6, "shortcut world BLEU-4", &mut || c6_bleu(s));
            report(9, "interpretability", &mut || c9_interpretability(s));
        }
        Err(_) => {
            for (n, name) in [(5, "shortcut world CHAIR_s"), (6, "shortcut world BLEU-4"), (9, "interpretability")] {
                report(n, name, &mut || Err("shortcut runs panicked".to_string()));
            }
        }
    }
    report(10, "biased world error rate", &mut c10_biased);
    match &shortcut {
        Ok(s) => {
            report(11, "alpha sweep", &mut || c11_sweep(s));
            report(12, "end-to-end determinism", &mut || c12_determinism(s));
        }
        Err(_) => {
            for (n, name) in [(11, "alpha sweep"), (12, "end-to-end determinism")] {
                report(n, name, &mut || Err("shortcut runs panicked".to_string()));
            }
        }
    }
    if failed == 0 {
        println!("all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
