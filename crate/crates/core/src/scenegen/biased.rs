use serde::{Deserialize, Serialize};

use super::dataset::{make_example, scene_seed, Dataset, SceneExample};
use super::world::{SceneConstraint, World};
use crate::error::{Error, Result};

/// Two interchangeable categories drawn at a skewed ratio in training and
/// at the reversed ratio for validation and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub class_a: String,
    pub class_b: String,
    /// A:B in the training split.
    pub train_ratio: [u32; 2],
    /// A:B at evaluation; must be the reverse of `train_ratio` when given.
    #[serde(default)]
    pub eval_ratio: Option<[u32; 2]>,
    /// Training scenes containing A or B.
    pub train_biased: usize,
    /// Training scenes containing neither.
    #[serde(default)]
    pub train_other: usize,
    /// Validation and test scenes containing A or B, per split.
    pub eval_biased: usize,
    #[serde(default)]
    pub eval_other: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasClass {
    A,
    B,
    Other,
}

impl BiasSpec {
    pub fn new(class_a: &str, class_b: &str, train_ratio: [u32; 2], train_biased: usize, eval_biased: usize) -> Self {
        BiasSpec {
            class_a: class_a.into(),
            class_b: class_b.into(),
            train_ratio,
            eval_ratio: None,
            train_biased,
            train_other: 0,
            eval_biased,
            eval_other: 0,
        }
    }

    pub fn eval_ratio(&self) -> [u32; 2] {
        self.eval_ratio.unwrap_or([self.train_ratio[1], self.train_ratio[0]])
    }

    fn split_counts(total: usize, ratio: [u32; 2], field: &str) -> Result<(usize, usize)> {
        let (a, b) = (ratio[0] as usize, ratio[1] as usize);
        if !(total * a).is_multiple_of(a + b) {
            return Err(Error::config(
                field,
                format!("{total} scenes cannot be split exactly at {a}:{b}"),
            ));
        }
        let na = total * a / (a + b);
        Ok((na, total - na))
    }

    /// (A, B) counts for the training split.
    pub fn train_counts(&self) -> Result<(usize, usize)> {
        Self::split_counts(self.train_biased, self.train_ratio, "bias.train_biased")
    }

    /// (A, B) counts for each evaluation split.
    pub fn eval_counts(&self) -> Result<(usize, usize)> {
        Self::split_counts(self.eval_biased, self.eval_ratio(), "bias.eval_biased")
    }

    pub fn validate(&self, world: &World) -> Result<(usize, usize)> {
        if self.train_ratio.contains(&0) {
            return Err(Error::config("bias.train_ratio", "ratios must be positive"));
        }
        if let Some(r) = self.eval_ratio {
            if r != [self.train_ratio[1], self.train_ratio[0]] {
                return Err(Error::config("bias.eval_ratio", "must reverse the training ratio"));
            }
        }
        let a = world
            .vocab
            .object_index(&self.class_a)
            .ok_or_else(|| Error::config("bias.class_a", format!("unknown object `{}`", self.class_a)))?;
        let b = world
            .vocab
            .object_index(&self.class_b)
            .ok_or_else(|| Error::config("bias.class_b", format!("unknown object `{}`", self.class_b)))?;
        if a == b {
            return Err(Error::config("bias.class_b", "classes must differ"));
        }
        self.train_counts()?;
        self.eval_counts()?;
        Ok((a, b))
    }

    /// Class of a scene, read off its caption.
    pub fn class_of(&self, world: &World, example: &SceneExample) -> BiasClass {
        let has = |name: &str| {
            let phrase = world.vocab.phrase(world.vocab.object_index(name).expect("validated"));
            example.caption.spans.iter().any(|s| &example.caption.tokens[s.range()] == phrase)
        };
        if has(&self.class_a) {
            BiasClass::A
        } else if has(&self.class_b) {
            BiasClass::B
        } else {
            BiasClass::Other
        }
    }
}

/// Builds the biased splits. Training targets are drawn uniformly; in the
/// evaluation splits the masked entity is the A or B object when present.
pub fn build_biased_split(world: &World, bias: &BiasSpec) -> Result<Dataset> {
    let (a, b) = bias.validate(world)?;
    let mut next = 0u64;
    let pick_class = move |objects: &[usize]| objects.iter().position(|&o| o == a || o == b);
    let mut split = |na: usize, nb: usize, other: usize, eval: bool| -> Result<Vec<SceneExample>> {
        let plan = [
            (na, SceneConstraint { require: Some(a), forbid: vec![b] }),
            (nb, SceneConstraint { require: Some(b), forbid: vec![a] }),
            (other, SceneConstraint { require: None, forbid: vec![a, b] }),
        ];
        let mut out = Vec::new();
        for (n, constraint) in plan {
            for _ in 0..n {
                let seed = scene_seed(world.config.seed, next);
                next += 1;
                let target: Option<&dyn Fn(&[usize]) -> Option<usize>> = if eval { Some(&pick_class) } else { None };
                out.push(make_example(world, seed, &constraint, target)?);
            }
        }
        Ok(out)
    };
    let (ta, tb) = bias.train_counts()?;
    let (ea, eb) = bias.eval_counts()?;
    Ok(Dataset {
        train: split(ta, tb, bias.train_other, false)?,
        valid: split(ea, eb, bias.eval_other, true)?,
        test: split(ea, eb, bias.eval_other, true)?,
    })
}
