use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::biased::BiasSpec;
use super::world::{SceneConstraint, World, WorldConfig};
use crate::captioner::{
    decode, CaptionModel, CaptionSample, Checkpoint, CounterfactualSample, DecodeStrategy, EntitySpan, SceneImage,
    Stage,
};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const MANIFEST_VERSION: u32 = 1;

/// One scene with its chosen entity and masked image. The counterfactual
/// caption is attached after stage 1 exists.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneExample {
    pub scene_seed: u64,
    pub image: SceneImage,
    pub caption: CaptionSample,
    pub target_span: usize,
    pub cf_image: SceneImage,
    pub cf_caption: Option<Vec<TokenId>>,
}

impl SceneExample {
    /// Pairs the example with `cf_caption`.
    pub fn with_cf_caption(&self, cf_caption: Vec<TokenId>) -> CounterfactualSample {
        CounterfactualSample {
            factual_image: self.image.clone(),
            factual_caption: self.caption.clone(),
            target_span: self.target_span,
            cf_image: self.cf_image.clone(),
            cf_caption,
        }
    }

    pub fn counterfactual(&self) -> Result<CounterfactualSample> {
        match &self.cf_caption {
            Some(c) => Ok(self.with_cf_caption(c.clone())),
            None => Err(Error::input(format!(
                "scene {} has no counterfactual caption yet",
                self.scene_seed
            ))),
        }
    }

    pub fn target_tokens(&self) -> &[TokenId] {
        self.caption.span_tokens(self.target_span)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<SceneExample>,
    pub valid: Vec<SceneExample>,
    pub test: Vec<SceneExample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[SceneExample]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }
}

/// Copy of `image` with every cell of span `span_index` set to MASK.
pub fn build_counterfactual(image: &SceneImage, caption: &CaptionSample, span_index: usize) -> Result<SceneImage> {
    let span = caption
        .spans
        .get(span_index)
        .ok_or_else(|| Error::input(format!("span index {span_index} out of range ({} spans)", caption.spans.len())))?;
    image.masked(&span.cells)
}

/// Decodes `S*` for a counterfactual image with a stage-1 checkpoint.
pub fn generate_cf_caption(
    stage1: &Checkpoint,
    cf_image: &SceneImage,
    strategy: &DecodeStrategy,
) -> Result<Vec<TokenId>> {
    if stage1.stage != Stage::Stage1 {
        return Err(Error::input("counterfactual captions must come from a stage-1 checkpoint"));
    }
    generate_cf_caption_with(&stage1.params, cf_image, strategy)
}

/// As [`generate_cf_caption`] for any caption model.
pub fn generate_cf_caption_with<M: CaptionModel + ?Sized>(
    model: &M,
    cf_image: &SceneImage,
    strategy: &DecodeStrategy,
) -> Result<Vec<TokenId>> {
    decode(model, cf_image, *strategy, 0)
}

/// Fills in `cf_caption` for every example.
pub fn attach_cf_captions<M: CaptionModel + ?Sized>(
    model: &M,
    examples: &mut [SceneExample],
    strategy: &DecodeStrategy,
) -> Result<()> {
    for ex in examples {
        ex.cf_caption = Some(generate_cf_caption_with(model, &ex.cf_image, strategy)?);
    }
    Ok(())
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Scene seeds are consecutive from a base derived from the world seed, so
/// splits drawn from disjoint index ranges never share a seed.
pub(crate) fn scene_seed(world_seed: u64, index: u64) -> u64 {
    splitmix(world_seed).wrapping_add(index)
}

/// Generates the example for one scene seed. The target span is drawn
/// uniformly unless `target` picks it from the generated objects.
pub(crate) fn make_example(
    world: &World,
    seed: u64,
    constraint: &SceneConstraint,
    target: Option<&dyn Fn(&[usize]) -> Option<usize>>,
) -> Result<SceneExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = world.generate_scene(&mut rng, constraint)?;
    let drawn = rng.random_range(0..scene.caption.spans.len());
    let target_span = target.and_then(|f| f(&scene.objects)).unwrap_or(drawn);
    let cf_image = build_counterfactual(&scene.image, &scene.caption, target_span)?;
    Ok(SceneExample {
        scene_seed: seed,
        image: scene.image,
        caption: scene.caption,
        target_span,
        cf_image,
        cf_caption: None,
    })
}

/// Generates train/valid/test splits of the configured sizes.
pub fn build_dataset(world: &World) -> Result<Dataset> {
    let s = world.config.splits;
    let mut next = 0u64;
    let mut split = |n: usize| -> Result<Vec<SceneExample>> {
        let out = (0..n)
            .map(|i| make_example(world, scene_seed(world.config.seed, next + i as u64), &SceneConstraint::default(), None))
            .collect();
        next += n as u64;
        out
    };
    Ok(Dataset {
        train: split(s.train)?,
        valid: split(s.valid)?,
        test: split(s.test)?,
    })
}

/// One line of a split file. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub scene_seed: u64,
    pub grid: Vec<u32>,
    pub caption: Vec<TokenId>,
    pub spans: Vec<(usize, usize, Vec<usize>)>,
    pub target_span: usize,
    pub cf_grid: Vec<u32>,
    pub cf_caption: Option<Vec<TokenId>>,
}

impl SampleRecord {
    pub fn from_example(ex: &SceneExample) -> Self {
        SampleRecord {
            scene_seed: ex.scene_seed,
            grid: ex.image.cells().to_vec(),
            caption: ex.caption.tokens.clone(),
            spans: ex
                .caption
                .spans
                .iter()
                .map(|s| (s.start, s.len, s.cells.clone()))
                .collect(),
            target_span: ex.target_span,
            cf_grid: ex.cf_image.cells().to_vec(),
            cf_caption: ex.cf_caption.clone(),
        }
    }

    pub fn into_example(self, height: usize, width: usize, num_objects: usize) -> Result<SceneExample> {
        let image = SceneImage::new(height, width, self.grid)?;
        let cf_image = SceneImage::new(height, width, self.cf_grid)?;
        image.validate_ids(num_objects)?;
        cf_image.validate_ids(num_objects)?;
        let caption = CaptionSample {
            tokens: self.caption,
            spans: self
                .spans
                .into_iter()
                .map(|(start, len, cells)| EntitySpan { start, len, cells })
                .collect(),
        };
        caption.validate(&image)?;
        if self.target_span >= caption.spans.len() {
            return Err(Error::input(format!("target span {} out of range", self.target_span)));
        }
        Ok(SceneExample {
            scene_seed: self.scene_seed,
            image,
            caption,
            target_span: self.target_span,
            cf_image,
            cf_caption: self.cf_caption,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
    pub scene_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub grid_height: usize,
    pub grid_width: usize,
    pub vocabulary: Vocabulary,
    /// Present for biased worlds.
    #[serde(default)]
    pub bias: Option<BiasSpec>,
    pub train: SplitEntry,
    pub valid: SplitEntry,
    pub test: SplitEntry,
}

impl Manifest {
    pub fn for_dataset(config: &WorldConfig, bias: Option<&BiasSpec>, vocab: &Vocabulary, data: &Dataset) -> Self {
        let entry = |name: &str, xs: &[SceneExample]| SplitEntry {
            file: format!("{name}.jsonl"),
            count: xs.len(),
            scene_seeds: xs.iter().map(|e| e.scene_seed).collect(),
        };
        Manifest {
            version: MANIFEST_VERSION,
            config_hash: config.hash(),
            grid_height: config.grid_height,
            grid_width: config.grid_width,
            vocabulary: vocab.clone(),
            bias: bias.cloned(),
            train: entry("train", &data.train),
            valid: entry("valid", &data.valid),
            test: entry("test", &data.test),
        }
    }
}

pub fn write_split(path: &Path, examples: &[SceneExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, &SampleRecord::from_example(ex)).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path, manifest: &Manifest) -> Result<Vec<SceneExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: SampleRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), e))?;
            rec.into_example(manifest.grid_height, manifest.grid_width, manifest.vocabulary.num_objects())
        })
        .collect()
}

/// Writes `<dir>/{train,valid,test}.jsonl` and `<dir>/manifest.json`.
pub fn write_dataset(dir: &Path, manifest: &Manifest, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((_, xs), entry) in data.splits().iter().zip([&manifest.train, &manifest.valid, &manifest.test]) {
        write_split(&dir.join(&entry.file), xs)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format("manifest", format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let mut data = Dataset::default();
    for (slot, entry) in [
        (&mut data.train, &manifest.train),
        (&mut data.valid, &manifest.valid),
        (&mut data.test, &manifest.test),
    ] {
        *slot = read_split(&dir.join(&entry.file), &manifest)?;
        if slot.len() != entry.count {
            return Err(Error::format(
                "dataset",
                format!("{} holds {} records, manifest says {}", entry.file, slot.len(), entry.count),
            ));
        }
    }
    Ok((manifest, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::OracleCopyModel;
    use crate::vocab::MASK;

    fn small_world() -> World {
        let mut cfg = WorldConfig::shortcut(0.9, 40, 3);
        cfg.splits.valid = 10;
        cfg.splits.test = 12;
        World::new(cfg).unwrap()
    }

    #[test]
    fn split_sizes_and_seed_disjointness() {
        let data = build_dataset(&small_world()).unwrap();
        assert_eq!((data.train.len(), data.valid.len(), data.test.len()), (40, 10, 12));
        let mut seeds: Vec<u64> = data.splits().iter().flat_map(|(_, xs)| xs.iter().map(|e| e.scene_seed)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 62);
    }

    #[test]
    fn masks_exactly_the_target_cells() {
        let data = build_dataset(&small_world()).unwrap();
        for ex in &data.train {
            let cf = ex.with_cf_caption(vec![0]);
            assert!(cf.is_masked_on_target());
            let n = ex.cf_image.cells().iter().filter(|&&c| c == MASK).count();
            assert_eq!(n, ex.caption.spans[ex.target_span].cells.len());
        }
    }

    #[test]
    fn invalid_span_index_is_rejected() {
        let data = build_dataset(&small_world()).unwrap();
        let ex = &data.train[0];
        assert!(build_counterfactual(&ex.image, &ex.caption, 9).is_err());
    }

    #[test]
    fn oracle_cf_captions_omit_masked_object() {
        let world = small_world();
        let mut data = build_dataset(&world).unwrap();
        let model = OracleCopyModel::new(world.vocab.clone(), 20);
        attach_cf_captions(&model, &mut data.train, &DecodeStrategy::default()).unwrap();
        for ex in &data.train {
            let cf = ex.cf_caption.as_ref().unwrap();
            let target = ex.target_tokens();
            assert!(!cf.windows(target.len()).any(|w| w == target));
            assert_eq!(cf.last(), Some(&crate::vocab::EOS));
        }
    }

    #[test]
    fn generate_cf_caption_requires_stage1() {
        let world = small_world();
        let cfg = crate::captioner::ModelConfig::new(world.vocab.size(), 10, 4, 4);
        let mut ck = Checkpoint::stage1(crate::captioner::ModelParams::init(&cfg, 0).unwrap());
        let img = SceneImage::blank(4, 4);
        assert!(generate_cf_caption(&ck, &img, &DecodeStrategy::Greedy).is_ok());
        ck.stage = Stage::Stage2;
        assert!(generate_cf_caption(&ck, &img, &DecodeStrategy::Greedy).is_err());
    }

    #[test]
    fn records_round_trip() {
        let world = small_world();
        let mut data = build_dataset(&world).unwrap();
        data.test[0].cf_caption = Some(vec![1, 3, 0]);
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest::for_dataset(&world.config, None, &world.vocab, &data);
        write_dataset(dir.path(), &manifest, &data).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, data);
    }
}
