use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{CellId, TokenId, EOS, MASK};

/// A scene grid standing in for an image. Cells hold background, mask, or
/// object ids; learned features are derived from it by the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneImage {
    height: usize,
    width: usize,
    cells: Vec<CellId>,
}

impl SceneImage {
    pub fn new(height: usize, width: usize, cells: Vec<CellId>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::input("scene grid must have positive dimensions"));
        }
        if cells.len() != height * width {
            return Err(Error::input(format!(
                "scene grid {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(SceneImage {
            height,
            width,
            cells,
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        SceneImage {
            height,
            width,
            cells: vec![crate::vocab::BACKGROUND; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Row-major cell ids.
    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> CellId {
        self.cells[row * self.width + col]
    }

    pub(crate) fn set(&mut self, index: usize, id: CellId) {
        self.cells[index] = id;
    }

    /// Checks every cell is background, mask, or one of `num_objects` objects.
    pub fn validate_ids(&self, num_objects: usize) -> Result<()> {
        let limit = crate::vocab::object_cell(num_objects);
        match self.cells.iter().find(|&&c| c >= limit) {
            Some(bad) => Err(Error::input(format!(
                "cell id {bad} outside object vocabulary of {num_objects}"
            ))),
            None => Ok(()),
        }
    }

    /// Copy with `region` (row-major indices) replaced by the mask id.
    pub fn masked(&self, region: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for &i in region {
            if i >= out.cells.len() {
                return Err(Error::input(format!(
                    "region cell {i} outside grid of {} cells",
                    out.cells.len()
                )));
            }
            out.cells[i] = MASK;
        }
        Ok(out)
    }
}

/// A phrase in a caption tied to the grid cells it describes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub len: usize,
    pub cells: Vec<usize>,
}

impl EntitySpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub tokens: Vec<TokenId>,
    pub spans: Vec<EntitySpan>,
}

impl CaptionSample {
    pub fn span_tokens(&self, span: usize) -> &[TokenId] {
        &self.tokens[self.spans[span].range()]
    }

    pub fn validate(&self, image: &SceneImage) -> Result<()> {
        let mut covered = vec![false; self.tokens.len()];
        let mut forms: HashSet<&[TokenId]> = HashSet::new();
        for (i, span) in self.spans.iter().enumerate() {
            if span.len == 0 || span.start + span.len > self.tokens.len() {
                return Err(Error::input(format!(
                    "span {i} ({}, {}) outside caption of length {}",
                    span.start,
                    span.len,
                    self.tokens.len()
                )));
            }
            if span.cells.is_empty() {
                return Err(Error::input(format!("span {i} has no cells")));
            }
            if let Some(c) = span.cells.iter().find(|&&c| c >= image.num_cells()) {
                return Err(Error::input(format!("span {i} cell {c} outside grid")));
            }
            for p in span.range() {
                if covered[p] {
                    return Err(Error::input(format!("span {i} overlaps another span")));
                }
                covered[p] = true;
            }
            if !forms.insert(&self.tokens[span.range()]) {
                return Err(Error::input(format!("span {i} duplicates another entity")));
            }
        }
        Ok(())
    }
}

/// The tuple of factual image and caption, chosen entity, masked image, and
/// the caption the stage-1 model produced for the masked image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    pub factual_image: SceneImage,
    pub factual_caption: CaptionSample,
    pub target_span: usize,
    pub cf_image: SceneImage,
    pub cf_caption: Vec<TokenId>,
}

impl CounterfactualSample {
    pub fn target(&self) -> &EntitySpan {
        &self.factual_caption.spans[self.target_span]
    }

    pub fn target_tokens(&self) -> &[TokenId] {
        self.factual_caption.span_tokens(self.target_span)
    }

    /// Checks the span index and the `S*` contract. The mask-locality check is
    /// skipped when `cf_image == factual_image` (the null intervention).
    pub fn validate(&self) -> Result<()> {
        let span = self
            .factual_caption
            .spans
            .get(self.target_span)
            .ok_or_else(|| Error::input(format!("target span {} out of range", self.target_span)))?;
        if span.len == 0 {
            return Err(Error::input("target span has zero length"));
        }
        if self.cf_caption.is_empty() {
            return Err(Error::input("counterfactual caption is empty"));
        }
        if self.cf_image.num_cells() != self.factual_image.num_cells() {
            return Err(Error::input("counterfactual image has a different grid size"));
        }
        Ok(())
    }

    /// True when `cf_image` differs from the factual image exactly on the
    /// target cells, all masked.
    pub fn is_masked_on_target(&self) -> bool {
        let target: HashSet<usize> = self.target().cells.iter().copied().collect();
        self.factual_image
            .cells()
            .iter()
            .zip(self.cf_image.cells())
            .enumerate()
            .all(|(i, (&f, &c))| if target.contains(&i) { c == MASK } else { c == f })
    }

    pub fn cf_caption_terminated(&self, max_len: usize) -> bool {
        self.cf_caption.last() == Some(&EOS) || self.cf_caption.len() == max_len
    }
}
