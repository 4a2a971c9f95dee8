//! Region-contribution scores by masking ablation, and the accuracy with
//! which the true region of a phrase outranks four decoy regions.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{CaptionModel, CaptionSample, SceneImage};
use crate::error::{Error, Result};

pub const NUM_NEGATIVES: usize = 4;

/// Loss of the span's tokens at their caption positions.
pub fn phrase_loss<M: CaptionModel + ?Sized>(
    model: &M,
    image: &SceneImage,
    caption: &CaptionSample,
    span: usize,
) -> Result<f64> {
    let s = caption
        .spans
        .get(span)
        .ok_or_else(|| Error::input(format!("span {span} out of range")))?;
    let end = s.start + s.len;
    let rows = model.teacher_forced(image, &caption.tokens[..end])?;
    Ok(-s.range().map(|p| rows[p].log_prob(caption.tokens[p])).sum::<f64>())
}

/// Increase in the phrase loss when `region` is masked.
pub fn region_contribution<M: CaptionModel + ?Sized>(
    model: &M,
    image: &SceneImage,
    caption: &CaptionSample,
    span: usize,
    region: &[usize],
) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::input("region is empty"));
    }
    let masked = image.masked(region)?;
    Ok(phrase_loss(model, &masked, caption, span)? - phrase_loss(model, image, caption, span)?)
}

/// One positive region (the phrase's own cells) against four same-size
/// negatives that avoid it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProbe {
    pub span: usize,
    pub positive: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    pub seed: u64,
}

impl RegionProbe {
    /// Draws negatives: distinct contiguous rectangles of the positive's
    /// cell count when enough fit, topped up with arbitrary cell sets.
    pub fn sample(image: &SceneImage, caption: &CaptionSample, span: usize, seed: u64) -> Result<Self> {
        let s = caption
            .spans
            .get(span)
            .ok_or_else(|| Error::input(format!("span {span} out of range")))?;
        let positive = s.cells.clone();
        let k = positive.len();
        let (h, w) = (image.height(), image.width());
        let outside: Vec<usize> = (0..h * w).filter(|c| !positive.contains(c)).collect();
        if outside.len() < k {
            return Err(Error::input("grid too small for a disjoint negative region"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rects = Vec::new();
        for rh in (1..=h).filter(|rh| k % rh == 0) {
            let rw = k / rh;
            if rw > w {
                continue;
            }
            for r in 0..=h - rh {
                for c in 0..=w - rw {
                    let cells: Vec<usize> = (0..rh)
                        .flat_map(|i| (0..rw).map(move |j| (r + i) * w + c + j))
                        .collect();
                    if cells.iter().all(|c| !positive.contains(c)) {
                        rects.push(cells);
                    }
                }
            }
        }
        rects.shuffle(&mut rng);
        let mut negatives: Vec<Vec<usize>> = rects.into_iter().take(NUM_NEGATIVES).collect();
        let mut attempts = 0;
        while negatives.len() < NUM_NEGATIVES {
            let mut cells: Vec<usize> = outside.choose_multiple(&mut rng, k).copied().collect();
            cells.sort_unstable();
            attempts += 1;
            // Small grids may not hold four distinct sets; accept repeats then.
            if !negatives.contains(&cells) || attempts > 64 {
                negatives.push(cells);
            }
        }
        Ok(RegionProbe {
            span,
            positive,
            negatives,
            seed,
        })
    }

    /// Region 0 is the positive, 1..=4 the negatives.
    pub fn regions(&self) -> impl Iterator<Item = &Vec<usize>> {
        std::iter::once(&self.positive).chain(&self.negatives)
    }

    pub fn validate(&self, image: &SceneImage) -> Result<()> {
        if self.negatives.len() != NUM_NEGATIVES {
            return Err(Error::input(format!("probe needs {NUM_NEGATIVES} negatives")));
        }
        for n in &self.negatives {
            if n.len() != self.positive.len() || n.iter().any(|c| self.positive.contains(c)) {
                return Err(Error::input("negative region must match the positive's size and avoid it"));
            }
            if n.iter().any(|&c| c >= image.num_cells()) {
                return Err(Error::input("negative region outside the grid"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedRegion {
    pub region: usize,
    pub contribution: f64,
}

/// Regions by contribution, highest first; ties keep region order.
pub fn rank_regions<M: CaptionModel + ?Sized>(
    model: &M,
    probe: &RegionProbe,
    image: &SceneImage,
    caption: &CaptionSample,
) -> Result<Vec<RankedRegion>> {
    probe.validate(image)?;
    let mut ranked = probe
        .regions()
        .enumerate()
        .map(|(i, r)| {
            Ok(RankedRegion {
                region: i,
                contribution: region_contribution(model, image, caption, probe.span, r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.contribution.total_cmp(&a.contribution).then(a.region.cmp(&b.region)));
    Ok(ranked)
}

/// The positive counts as top only when it strictly beats every negative.
pub fn positive_strictly_top(ranking: &[RankedRegion]) -> bool {
    ranking[0].region == 0 && ranking.get(1).is_none_or(|r| ranking[0].contribution > r.contribution)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub sample: usize,
    pub span: usize,
    /// Contributions of the positive then the four negatives.
    pub contributions: Vec<f64>,
    /// 1-based rank of the positive; ties count against it.
    pub positive_rank: usize,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub probes: Vec<ProbeRecord>,
}

/// Runs `probes_per_sample` probes on every sample, each on a uniformly
/// chosen span with freshly drawn negatives.
pub fn interpretability_accuracy<M: CaptionModel + ?Sized>(
    model: &M,
    samples: &[(&SceneImage, &CaptionSample)],
    probes_per_sample: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if samples.is_empty() || probes_per_sample == 0 {
        return Err(Error::input("interpretability needs samples and at least one probe each"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for (i, (image, caption)) in samples.iter().enumerate() {
        if caption.spans.is_empty() {
            return Err(Error::input(format!("sample {i} has no entity spans")));
        }
        for _ in 0..probes_per_sample {
            let span = rng.random_range(0..caption.spans.len());
            let probe = RegionProbe::sample(image, caption, span, rng.random())?;
            let ranking = rank_regions(model, &probe, image, caption)?;
            let mut contributions = vec![0.0; ranking.len()];
            for r in &ranking {
                contributions[r.region] = r.contribution;
            }
            let pos = contributions[0];
            let positive_rank = 1 + contributions[1..].iter().filter(|&&c| c >= pos).count();
            probes.push(ProbeRecord {
                sample: i,
                span,
                contributions,
                positive_rank,
                hit: positive_strictly_top(&ranking),
            });
        }
    }
    let hits = probes.iter().filter(|p| p.hit).count();
    Ok(ProbeReport {
        accuracy: hits as f64 / probes.len() as f64,
        probes,
    })
}
