//! Per-pixel class id maps with reserved sentinels.

use crate::error::{Error, Result};

/// Pixel drawn from outside the training label space (pasted or held-out content).
pub const OUTLIER_ID: u8 = 254;
/// Pixel excluded from every loss and metric.
pub const IGNORE_ID: u8 = 255;

/// Row-major map of class ids. Inlier ids are `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

/// Which population a pixel belongs to for loss and metric purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Population {
    Inlier(usize),
    Outlier,
    Ignored,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("label map must be non-empty".into()));
        }
        if ids.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, id: u8) {
        self.ids[row * self.width + col] = id;
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Classify every id against `num_classes` inlier classes. Ids that are
    /// neither inlier nor a sentinel are treated as ignored.
    #[inline]
    pub fn population(id: u8, num_classes: usize) -> Population {
        match id {
            OUTLIER_ID => Population::Outlier,
            IGNORE_ID => Population::Ignored,
            c if (c as usize) < num_classes => Population::Inlier(c as usize),
            _ => Population::Ignored,
        }
    }

    /// Check that every id is an inlier class or a sentinel.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some((i, &id)) = self
            .ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id != OUTLIER_ID && id != IGNORE_ID && id as usize >= num_classes)
        {
            return Err(Error::InvalidParameter(format!(
                "label id {id} at (row {}, col {}) is outside {num_classes} inlier classes",
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    /// (inlier, outlier, ignored) pixel counts.
    pub fn counts(&self, num_classes: usize) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for &id in &self.ids {
            match Self::population(id, num_classes) {
                Population::Inlier(_) => c.0 += 1,
                Population::Outlier => c.1 += 1,
                Population::Ignored => c.2 += 1,
            }
        }
        c
    }
}
