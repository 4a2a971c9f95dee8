mod common;

use causalcap::captioner::sequence_log_prob;
use causalcap::causal::{
    aggregate_loss, estimate_effects, nde_loss, nde_loss_with_grad, nll_loss, nll_loss_with_grad, te_loss,
    te_loss_with_grad, PositionPolicy, RegularizationConfig, Variant, DEFAULT_LOG_PROB_FLOOR,
};
use common::*;

const FLOOR: f64 = DEFAULT_LOG_PROB_FLOOR;

#[test]
fn losses_match_per_token_loops() {
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(11);
    for f in 0..100 {
        let m = tiny_model(f);
        let s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
        let batch = [(&s.factual_image, s.factual_caption.tokens.as_slice()), (&s.cf_image, s.cf_caption.as_slice())];
        let nll = nll_loss(&m, &batch).unwrap();
        let want = naive_nll(&m, &s.factual_image, &s.factual_caption.tokens) + naive_nll(&m, &s.cf_image, &s.cf_caption);
        assert!((nll - want).abs() < 1e-6, "nll fixture {f}: {nll} vs {want}");
        let te = te_loss(&m, &s, FLOOR).unwrap();
        assert!((te - naive_te(&m, &s, FLOOR)).abs() < 1e-6, "te fixture {f}");
        let nde = nde_loss(&m, &s, FLOOR).unwrap();
        assert!((nde - naive_nde(&m, &s, FLOOR)).abs() < 1e-6, "nde fixture {f}");
    }
}

#[test]
fn floor_clamps_counterfactual_terms() {
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(12);
    let m = tiny_model(3);
    let s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
    // A floor above every log-probability turns each counterfactual term into
    // the floor constant.
    let high = -1e-12;
    let te = te_loss(&m, &s, high).unwrap();
    let span = s.target();
    let factual: f64 = (0..span.len)
        .map(|j| {
            let tok = s.factual_caption.tokens[span.start + j];
            lp(&m, &s.factual_image, &s.factual_caption.tokens[..span.start + j], tok)
        })
        .sum();
    let want = -(factual - span.len as f64 * high);
    assert!((te - want).abs() < 1e-9);
    assert!((te - naive_te(&m, &s, high)).abs() < 1e-9);
}

#[test]
fn null_intervention_gives_zero_nde_and_effects() {
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(13);
    for f in 0..20 {
        let m = tiny_model(f);
        let mut s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
        s.cf_image = s.factual_image.clone();
        let nde = nde_loss(&m, &s, FLOOR).unwrap();
        assert!(nde.abs() < 1e-9, "{nde}");
        // Identity intervention with the factual caption as mediator.
        s.cf_caption = s.factual_caption.tokens.clone();
        let tok = s.target_tokens()[0];
        let e = estimate_effects(&m, &s, tok, PositionPolicy::AverageOverPrefixes).unwrap();
        assert_eq!((e.te, e.nde, e.tie), (0.0, 0.0, 0.0));
    }
}

#[test]
fn aggregate_is_exact_at_alpha_one() {
    let cfg = RegularizationConfig::new(1.0, Variant::Nde);
    for (nll, reg) in [(1.5, 7.25), (0.1, -3.0), (123.456, 1e9)] {
        assert_eq!(aggregate_loss(nll, reg, &cfg).unwrap(), nll);
    }
    let cfg = RegularizationConfig::new(0.9, Variant::Te);
    let v = aggregate_loss(2.0, 4.0, &cfg).unwrap();
    assert!((v - (0.9 * 2.0 + 0.1 * 4.0)).abs() < 1e-12);
    assert!(aggregate_loss(1.0, 1.0, &RegularizationConfig::new(1.5, Variant::Te)).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let vocab = small_vocab();
    let cfg = tiny_config();
    let mut r = rng(14);
    let mut worst = [0.0f64; 4];
    for f in 0..10 {
        let m = tiny_model(100 + f);
        let s = random_cf_sample(&mut r, &vocab, 3, 3, cfg.max_len);
        let tokens = s.factual_caption.tokens.clone();
        let image = s.factual_image.clone();

        let batch = [(&image, tokens.as_slice())];
        let (_, g) = nll_loss_with_grad(&m, &batch).unwrap();
        worst[0] = worst[0].max(max_rel_err(&m, &g, |p| nll_loss(p, &[(&image, tokens.as_slice())]).unwrap()));

        let (_, g) = te_loss_with_grad(&m, &s, FLOOR).unwrap();
        worst[1] = worst[1].max(max_rel_err(&m, &g, |p| te_loss(p, &s, FLOOR).unwrap()));

        let (_, g) = nde_loss_with_grad(&m, &s, FLOOR).unwrap();
        worst[2] = worst[2].max(max_rel_err(&m, &g, |p| nde_loss(p, &s, FLOOR).unwrap()));

        // The sequence log-probability is the negated NLL.
        let (_, mut g) = nll_loss_with_grad(&m, &batch).unwrap();
        g.scale(-1.0);
        worst[3] = worst[3].max(max_rel_err(&m, &g, |p| sequence_log_prob(p, &image, &tokens).unwrap()));
    }
    for (name, w) in ["nll", "te", "nde", "sequence_log_prob"].iter().zip(worst) {
        assert!(w < 1e-4, "{name}: max relative error {w:e}");
    }
}
