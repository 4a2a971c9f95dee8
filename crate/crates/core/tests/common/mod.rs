#![allow(dead_code)]

use causalcap::captioner::{
    CaptionModel, CaptionSample, CounterfactualSample, EntitySpan, ModelConfig, ModelParams, SceneImage,
};
use causalcap::vocab::{object_cell, TokenId, Vocabulary, ARTICLE, CONJUNCTION, EOS, MASK};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_vocab() -> Vocabulary {
    Vocabulary::from_objects([
        ("dog", vec!["dog"]),
        ("poodle", vec!["black", "poodle"]),
        ("tree", vec!["tree"]),
        ("river", vec!["river"]),
    ])
    .unwrap()
}

/// Small model sizes so finite differences over every coordinate stay cheap.
pub fn tiny_config() -> ModelConfig {
    let v = small_vocab();
    ModelConfig {
        embed_dim: 6,
        num_heads: 2,
        attention_dim: 5,
        hidden_dim: 7,
        max_len: 10,
        ..ModelConfig::new(v.size(), v.num_objects(), 3, 3)
    }
}

pub fn tiny_model(seed: u64) -> ModelParams {
    ModelParams::init(&tiny_config(), seed).unwrap()
}

pub fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize, num_objects: usize) -> SceneImage {
    let cells = (0..h * w)
        .map(|_| r.random_range(0..(num_objects as u32 + 2)))
        .collect();
    SceneImage::new(h, w, cells).unwrap()
}

pub fn random_tokens(r: &mut ChaCha8Rng, vocab_size: usize, len: usize) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = (0..len - 1).map(|_| r.random_range(1..vocab_size as u32)).collect();
    t.push(EOS);
    t
}

/// A random but valid counterfactual sample. The factual caption is
/// `a X and a Y .` over two distinct objects placed in the image; the target
/// span's cells are masked in the counterfactual image and the counterfactual
/// caption is arbitrary tokens ending in EOS.
pub fn random_cf_sample(r: &mut ChaCha8Rng, vocab: &Vocabulary, h: usize, w: usize, max_len: usize) -> CounterfactualSample {
    let mut objects: Vec<usize> = (0..vocab.num_objects()).collect();
    objects.shuffle(r);
    let (o1, o2) = (objects[0], objects[1]);
    let mut cells: Vec<usize> = (0..h * w).collect();
    cells.shuffle(r);
    let c1 = vec![cells[0]];
    let c2 = vec![cells[1], cells[2]];
    let mut grid = vec![0u32; h * w];
    grid[c1[0]] = object_cell(o1);
    for &c in &c2 {
        grid[c] = object_cell(o2);
    }
    let image = SceneImage::new(h, w, grid).unwrap();
    let mut tokens = vec![ARTICLE];
    let s1 = tokens.len();
    tokens.extend_from_slice(vocab.phrase(o1));
    let l1 = tokens.len() - s1;
    tokens.extend([CONJUNCTION, ARTICLE]);
    let s2 = tokens.len();
    tokens.extend_from_slice(vocab.phrase(o2));
    let l2 = tokens.len() - s2;
    tokens.push(EOS);
    let spans = vec![
        EntitySpan { start: s1, len: l1, cells: c1 },
        EntitySpan { start: s2, len: l2, cells: c2 },
    ];
    let target = r.random_range(0..2);
    let cf_image = image.masked(&spans[target].cells).unwrap();
    let cf_len = r.random_range(2..=max_len);
    let cf_caption = random_tokens(r, vocab.size(), cf_len);
    CounterfactualSample {
        factual_image: image,
        factual_caption: CaptionSample { tokens, spans },
        target_span: target,
        cf_image,
        cf_caption,
    }
}

pub fn is_masked(image: &SceneImage, cell: usize) -> bool {
    image.cells()[cell] == MASK
}

/// Log-probability of `token` after `prefix`, one forward call per query.
pub fn lp(m: &ModelParams, image: &SceneImage, prefix: &[TokenId], token: TokenId) -> f64 {
    m.next_token(image, prefix).unwrap().log_probs()[token as usize]
}

pub fn naive_nll(m: &ModelParams, image: &SceneImage, tokens: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for t in 0..tokens.len() {
        total -= lp(m, image, &tokens[..t], tokens[t]);
    }
    total
}

pub fn naive_te(m: &ModelParams, s: &CounterfactualSample, floor: f64) -> f64 {
    let span = s.target();
    let caption = &s.factual_caption.tokens;
    let l_star = s.cf_caption.len() as f64;
    let mut total = 0.0;
    for j in 0..span.len {
        let tok = caption[span.start + j];
        let factual = lp(m, &s.factual_image, &caption[..span.start + j], tok);
        let mut cf = 0.0;
        for i in 0..s.cf_caption.len() {
            cf += lp(m, &s.cf_image, &s.cf_caption[..i], tok).max(floor);
        }
        total += factual - cf / l_star;
    }
    -total
}

pub fn naive_nde(m: &ModelParams, s: &CounterfactualSample, floor: f64) -> f64 {
    let l_star = s.cf_caption.len() as f64;
    let mut total = 0.0;
    for &tok in s.target_tokens() {
        let mut inner = 0.0;
        for i in 0..s.cf_caption.len() {
            let mixed = lp(m, &s.factual_image, &s.cf_caption[..i], tok);
            let cf = lp(m, &s.cf_image, &s.cf_caption[..i], tok).max(floor);
            inner += mixed - cf;
        }
        total += inner / l_star;
    }
    -total
}

/// Largest coordinate-wise relative error between an analytic gradient and
/// central differences of `f`.
pub fn max_rel_err(params: &ModelParams, analytic: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> f64 {
    let h = 1e-4;
    let base = params.to_flat();
    let grad = analytic.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut x = base.clone();
        x[k] = base[k] + h;
        probe.set_flat(&x).unwrap();
        let up = f(&probe);
        x[k] = base[k] - h;
        probe.set_flat(&x).unwrap();
        let down = f(&probe);
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[k].abs().max(numeric.abs());
        // Coordinates the loss does not touch have both sides at zero up to
        // rounding; relative error is undefined there.
        if denom < 1e-8 {
            continue;
        }
        worst = worst.max((grad[k] - numeric).abs() / denom);
    }
    worst
}

/// Every complete sequence: EOS-terminated, or `max_len` long without EOS.
pub fn enumerate(v: u32, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in 0..v {
                let mut s = p.clone();
                s.push(t);
                if t == EOS || len == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

pub fn scored<M: CaptionModel>(m: &M, image: &SceneImage, seqs: Vec<Vec<TokenId>>) -> Vec<(f64, Vec<TokenId>)> {
    let mut s: Vec<_> = seqs
        .into_iter()
        .map(|t| (m.sequence_log_prob(image, &t).unwrap(), t))
        .collect();
    s.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    s
}

