use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{CaptionSample, EntitySpan, SceneImage};
use crate::error::{Error, Result};
use crate::vocab::{object_cell, Vocabulary, ARTICLE, CONJUNCTION, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub words: Vec<String>,
    /// Number of grid cells the object covers.
    #[serde(default = "one")]
    pub cells: usize,
}

fn one() -> usize {
    1
}

/// A planted shortcut: whenever `trigger` is in a scene, `companion` is
/// present with probability `probability` and absent otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoOccurrence {
    pub trigger: String,
    pub companion: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub co_occurrence: Vec<CoOccurrence>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub splits: SplitSizes,
    pub seed: u64,
}

fn obj(name: &str, words: &[&str], cells: usize) -> ObjectSpec {
    ObjectSpec {
        name: name.to_string(),
        words: words.iter().map(|w| w.to_string()).collect(),
        cells,
    }
}

impl WorldConfig {
    /// The standard shortcut world: a 4x4 grid, ten objects, and `man`
    /// accompanying `river` with probability `rho`.
    pub fn shortcut(rho: f64, train: usize, seed: u64) -> Self {
        WorldConfig {
            grid_height: 4,
            grid_width: 4,
            objects: vec![
                obj("river", &["river"], 3),
                obj("man", &["man"], 1),
                obj("woman", &["woman"], 1),
                obj("dog", &["dog"], 1),
                obj("tree", &["tree"], 1),
                obj("boat", &["boat"], 2),
                obj("ball", &["red", "ball"], 1),
                obj("people", &["group", "of", "people"], 3),
                obj("horse", &["horse"], 2),
                obj("poodle", &["black", "poodle"], 1),
            ],
            co_occurrence: vec![CoOccurrence {
                trigger: "river".into(),
                companion: "man".into(),
                probability: rho,
            }],
            min_objects: 2,
            max_objects: 3,
            splits: SplitSizes {
                train,
                valid: 100,
                test: 200,
            },
            seed,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("world config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::config("world.grid_height", "grid dimensions must be positive"));
        }
        if self.objects.is_empty() {
            return Err(Error::config("world.objects", "needs at least one object"));
        }
        for o in &self.objects {
            if o.cells == 0 {
                return Err(Error::config("world.objects", format!("object `{}` covers no cells", o.name)));
            }
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(
                "world.min_objects",
                format!("need 1 <= min_objects <= max_objects, got {}..{}", self.min_objects, self.max_objects),
            ));
        }
        if self.max_objects > self.objects.len() {
            return Err(Error::config(
                "world.max_objects",
                format!("only {} distinct objects exist", self.objects.len()),
            ));
        }
        let mut footprints: Vec<usize> = self.objects.iter().map(|o| o.cells).collect();
        footprints.sort_unstable_by(|a, b| b.cmp(a));
        let worst: usize = footprints.iter().take(self.max_objects).sum();
        if worst > self.grid_height * self.grid_width {
            return Err(Error::config(
                "world.grid_height",
                format!(
                    "grid {}x{} is too small for {} objects covering up to {worst} cells",
                    self.grid_height, self.grid_width, self.max_objects
                ),
            ));
        }
        for (field, n) in [
            ("world.splits.train", self.splits.train),
            ("world.splits.valid", self.splits.valid),
            ("world.splits.test", self.splits.test),
        ] {
            if n == 0 {
                return Err(Error::config(field, "split sizes must be positive"));
            }
        }
        for rule in &self.co_occurrence {
            if !(0.0..=1.0).contains(&rule.probability) {
                return Err(Error::config(
                    "world.co_occurrence.probability",
                    format!("must lie in [0, 1], got {}", rule.probability),
                ));
            }
            for name in [&rule.trigger, &rule.companion] {
                if !self.objects.iter().any(|o| &o.name == name) {
                    return Err(Error::config(
                        "world.co_occurrence",
                        format!("unknown object `{name}`"),
                    ));
                }
            }
            if rule.trigger == rule.companion {
                return Err(Error::config("world.co_occurrence", "trigger and companion must differ"));
            }
        }
        Ok(())
    }
}

/// A validated world: config plus resolved vocabulary and rule indices.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    rules: Vec<(usize, usize, f64)>,
}

/// Restricts which objects a generated scene may contain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneConstraint {
    pub require: Option<usize>,
    pub forbid: Vec<usize>,
}

/// A generated scene: grid, caption, and the objects in caption order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: SceneImage,
    pub caption: CaptionSample,
    pub objects: Vec<usize>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::from_objects(
            config
                .objects
                .iter()
                .map(|o| (o.name.as_str(), o.words.iter().map(String::as_str))),
        )?;
        let rules = config
            .co_occurrence
            .iter()
            .map(|r| {
                (
                    vocab.object_index(&r.trigger).expect("validated"),
                    vocab.object_index(&r.companion).expect("validated"),
                    r.probability,
                )
            })
            .collect();
        Ok(World { config, vocab, rules })
    }

    pub fn num_cells(&self) -> usize {
        self.config.grid_height * self.config.grid_width
    }

    fn choose_objects<R: Rng>(&self, rng: &mut R, constraint: &SceneConstraint) -> Result<Vec<usize>> {
        let n = rng.random_range(self.config.min_objects..=self.config.max_objects);
        let allowed: Vec<usize> = (0..self.vocab.num_objects())
            .filter(|o| !constraint.forbid.contains(o))
            .collect();
        let mut set: Vec<usize> = constraint.require.into_iter().collect();
        while set.len() < n {
            let pool: Vec<usize> = allowed.iter().copied().filter(|o| !set.contains(o)).collect();
            match pool.choose(rng) {
                Some(&o) => set.push(o),
                None => {
                    return Err(Error::config(
                        "world.objects",
                        "not enough allowed objects for the requested scene size",
                    ))
                }
            }
        }
        for &(trigger, companion, rho) in &self.rules {
            if !set.contains(&trigger) {
                continue;
            }
            let keep = rng.random::<f64>() < rho;
            let present = set.contains(&companion);
            if keep && !present && !constraint.forbid.contains(&companion) {
                let replaceable: Vec<usize> = (0..set.len())
                    .filter(|&i| set[i] != trigger && Some(set[i]) != constraint.require)
                    .collect();
                match replaceable.choose(rng) {
                    Some(&i) => set[i] = companion,
                    None => set.push(companion),
                }
            } else if !keep && present && Some(companion) != constraint.require {
                let pool: Vec<usize> = allowed
                    .iter()
                    .copied()
                    .filter(|o| !set.contains(o) && *o != companion)
                    .collect();
                let i = set.iter().position(|&o| o == companion).expect("present");
                match pool.choose(rng) {
                    Some(&o) => set[i] = o,
                    None => {
                        set.remove(i);
                    }
                }
            }
        }
        Ok(set)
    }

    fn place<R: Rng>(&self, rng: &mut R, occupied: &mut [bool], size: usize) -> Result<Vec<usize>> {
        let (h, w) = (self.config.grid_height, self.config.grid_width);
        let free = |cells: &[usize], occ: &[bool]| cells.iter().all(|&c| !occ[c]);
        // Horizontal runs first, then vertical, then any free cells.
        for _ in 0..64 {
            if size > w {
                break;
            }
            let r = rng.random_range(0..h);
            let c = rng.random_range(0..=w - size);
            let cells: Vec<usize> = (0..size).map(|k| r * w + c + k).collect();
            if free(&cells, occupied) {
                return Ok(claim(occupied, cells));
            }
        }
        for _ in 0..64 {
            if size > h {
                break;
            }
            let r = rng.random_range(0..=h - size);
            let c = rng.random_range(0..w);
            let cells: Vec<usize> = (0..size).map(|k| (r + k) * w + c).collect();
            if free(&cells, occupied) {
                return Ok(claim(occupied, cells));
            }
        }
        let open: Vec<usize> = (0..h * w).filter(|&c| !occupied[c]).collect();
        if open.len() < size {
            return Err(Error::config("world.grid_height", "grid too small for requested objects"));
        }
        let mut cells: Vec<usize> = open.choose_multiple(rng, size).copied().collect();
        cells.sort_unstable();
        Ok(claim(occupied, cells))
    }

    /// Generates one scene and its templated caption
    /// `a <obj> and a <obj> ... .`, objects in row-major order.
    pub fn generate_scene<R: Rng>(&self, rng: &mut R, constraint: &SceneConstraint) -> Result<Scene> {
        let chosen = self.choose_objects(rng, constraint)?;
        let mut occupied = vec![false; self.num_cells()];
        let mut image = SceneImage::blank(self.config.grid_height, self.config.grid_width);
        let mut placed: Vec<(usize, Vec<usize>)> = Vec::with_capacity(chosen.len());
        for &o in &chosen {
            let cells = self.place(rng, &mut occupied, self.config.objects[o].cells)?;
            for &c in &cells {
                image.set(c, object_cell(o));
            }
            placed.push((o, cells));
        }
        placed.sort_by_key(|(_, cells)| cells[0]);

        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for (i, (o, cells)) in placed.iter().enumerate() {
            if i > 0 {
                tokens.push(CONJUNCTION);
            }
            tokens.push(ARTICLE);
            let phrase = self.vocab.phrase(*o);
            spans.push(EntitySpan {
                start: tokens.len(),
                len: phrase.len(),
                cells: cells.clone(),
            });
            tokens.extend_from_slice(phrase);
        }
        tokens.push(EOS);
        Ok(Scene {
            image,
            caption: CaptionSample { tokens, spans },
            objects: placed.into_iter().map(|(o, _)| o).collect(),
        })
    }
}

fn claim(occupied: &mut [bool], cells: Vec<usize>) -> Vec<usize> {
    for &c in &cells {
        occupied[c] = true;
    }
    cells
}
