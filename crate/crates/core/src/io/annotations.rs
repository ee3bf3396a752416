//! Line-delimited JSON annotation records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::RegionMask;
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Roi};
use crate::metrics::TripleSet;

use super::fgrd::read_grid;

/// Run-length-encoded binary mask: runs alternate starting with a run of
/// zeros (which may be empty), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

impl RleMask {
    pub fn decode(&self) -> Result<RegionMask> {
        let total: usize = self.runs.iter().sum();
        if total != self.height * self.width {
            return Err(Error::InvalidArgument(format!(
                "RLE runs sum to {total}, mask is {}x{} = {}",
                self.height,
                self.width,
                self.height * self.width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &run) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run));
        }
        RegionMask::new(self.height, self.width, bits)
    }

    pub fn encode(mask: &RegionMask) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in mask.membership() {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Self {
            height: mask.height(),
            width: mask.width(),
            runs,
        }
    }
}

/// One image's externally supplied annotations.
///
/// `gt_boxes`, when present, pairs each detector box with its ground truth
/// for IoU weighting; otherwise each box is its own ground truth.
/// `candidate`, `references` and `candidate_triples` feed caption scoring;
/// `references` defaults to the single `caption`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub caption: String,
    #[serde(default)]
    pub boxes: Vec<[usize; 4]>,
    #[serde(default)]
    pub box_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<[usize; 4]>>,
    #[serde(default)]
    pub region_masks: Vec<RleMask>,
    #[serde(default)]
    pub phrases: Vec<String>,
    #[serde(default)]
    pub phrase_positive: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triples: Option<Vec<[String; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_triples: Option<Vec<[String; 3]>>,
}

fn to_roi(b: &[usize; 4]) -> Result<Roi> {
    Roi::new(b[0], b[1], b[2], b[3])
}

fn triple_set(t: &[[String; 3]]) -> TripleSet {
    TripleSet::new(
        t.iter()
            .map(|[s, r, o]| (s.as_str(), r.as_str(), o.as_str())),
    )
}

impl AnnotationRecord {
    /// Checks parallel-list lengths, box validity and mask encodings.
    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.box_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} boxes but {} box labels",
                self.boxes.len(),
                self.box_labels.len()
            )));
        }
        if let Some(gt) = &self.gt_boxes {
            if gt.len() != self.boxes.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} ground-truth boxes for {} boxes",
                    gt.len(),
                    self.boxes.len()
                )));
            }
            for b in gt {
                to_roi(b)?;
            }
        }
        for b in &self.boxes {
            to_roi(b)?;
        }
        if self.phrase_positive.len() != self.region_masks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positive indices for {} region masks",
                self.phrase_positive.len(),
                self.region_masks.len()
            )));
        }
        if let Some(bad) = self
            .phrase_positive
            .iter()
            .find(|&&j| j >= self.phrases.len())
        {
            return Err(Error::InvalidArgument(format!(
                "positive phrase index {bad} but only {} phrases",
                self.phrases.len()
            )));
        }
        for m in &self.region_masks {
            m.decode()?;
        }
        if self.retrieval_rank == Some(0) {
            return Err(Error::InvalidArgument("retrieval_rank is 1-based".into()));
        }
        Ok(())
    }

    pub fn rois(&self) -> Result<Vec<Roi>> {
        self.boxes.iter().map(to_roi).collect()
    }

    pub fn gt_rois(&self) -> Result<Vec<Roi>> {
        match &self.gt_boxes {
            Some(gt) => gt.iter().map(to_roi).collect(),
            None => self.rois(),
        }
    }

    pub fn masks(&self) -> Result<Vec<RegionMask>> {
        self.region_masks.iter().map(RleMask::decode).collect()
    }

    pub fn reference_texts(&self) -> Vec<String> {
        self.references
            .clone()
            .unwrap_or_else(|| vec![self.caption.clone()])
    }

    pub fn triple_set(&self) -> Option<TripleSet> {
        self.triples.as_deref().map(triple_set)
    }

    pub fn candidate_triple_set(&self) -> Option<TripleSet> {
        self.candidate_triples.as_deref().map(triple_set)
    }
}

/// Parses JSONL text. Blank lines are skipped; a malformed line fails with
/// its 1-based line number and a record that breaks an invariant fails with
/// its 0-based record index.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Record {
            index: out.len(),
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_annotations(&text)
}

/// Loads every record with its grid, resolving `image_path` against
/// `grids_dir`. Boxes and masks are checked against the grid extent.
pub fn ingest(
    annotations: &Path,
    grids_dir: &Path,
) -> Result<Vec<(FeatureGrid, AnnotationRecord)>> {
    load_annotations(annotations)?
        .into_iter()
        .enumerate()
        .map(|(index, rec)| {
            let record_err = |e: Error| Error::Record {
                index,
                detail: e.to_string(),
            };
            let grid = read_grid(&grids_dir.join(&rec.image_path)).map_err(record_err)?;
            check_extent(&rec, &grid).map_err(record_err)?;
            Ok((grid, rec))
        })
        .collect()
}

fn check_extent(rec: &AnnotationRecord, grid: &FeatureGrid) -> Result<()> {
    for roi in rec.rois()?.iter().chain(rec.gt_rois()?.iter()) {
        if !roi.fits_in(grid.height(), grid.width()) {
            return Err(Error::Bounds(format!(
                "box {roi:?} outside {}x{} grid",
                grid.height(),
                grid.width()
            )));
        }
    }
    for m in &rec.region_masks {
        if m.height != grid.height() || m.width != grid.width() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs grid {}x{}",
                m.height,
                m.width,
                grid.height(),
                grid.width()
            )));
        }
    }
    Ok(())
}
