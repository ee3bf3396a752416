//! Implementations behind the command-line verbs. Each returns a
//! serializable report; the binary decides how to print it and which exit
//! code to use.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::align::{
    align_loss, greedy_assignment, object_features, region_features, spp, AlignBatch, AlignWeights,
    BoxPair, ObjectPair, Projector, RegionItem, LAYER_NORM_EPS,
};
use crate::dris::{channel_mean_saliency, run_pipeline, CostReport, DrisConfig, Resolution};
use crate::error::{Error, Result};
use crate::grid::{l2_normalize, layer_norm, EmbedVec, FeatureGrid};
use crate::io::annotations::{load_annotations, AnnotationRecord};
use crate::io::config::RunConfig;
use crate::io::fgrd::read_grid;
use crate::metrics::{bleu, meteor, recall_at_k, rouge_l, spice_f1, Caption, CiderCorpus, RefSet};
use crate::toyvlm::{save_params, synthetic_dataset, train, ToyVlmParams, TrainReport};

/// Pyramid levels for the global vector of ingested grids.
pub const CLI_SPP_LEVELS: [usize; 2] = [1, 2];

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

/// Deterministic bag-of-words embedding: each token seeds a ChaCha8 stream
/// from the first 8 bytes of its SHA-256 digest and contributes `dim`
/// uniform(-1, 1) values; contributions are summed.
pub fn text_embedding(text: &str, dim: usize) -> Result<EmbedVec> {
    let tokens = crate::metrics::tokenize(text);
    if tokens.is_empty() {
        return Err(Error::DegenerateVector(format!("no tokens in {text:?}")));
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        let digest = Sha256::digest(t.as_bytes());
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed));
        for a in &mut acc {
            *a += rng.gen_range(-1.0..1.0);
        }
    }
    EmbedVec::new(acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskSummary {
    pub height: usize,
    pub width: usize,
    pub high: usize,
    pub low: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DrisReport {
    pub image: String,
    pub config: DrisConfig,
    pub grid: [usize; 3],
    pub coarse: [usize; 2],
    pub mask: MaskSummary,
    /// `[row0, col0, row1, col1]` in coarse cells, best first.
    pub rois: Vec<[usize; 4]>,
    pub cost: CostReport,
    pub savings_ratio: f64,
}

/// Runs the coarse-to-fine pass on one FGRD grid with channel-mean
/// saliency. Writes `dris_report.json` and `saliency.csv` when `out` is set.
pub fn cmd_dris(cfg: &RunConfig, image: &Path, out: Option<&Path>) -> Result<DrisReport> {
    let grid = read_grid(image)?;
    let result = run_pipeline(&grid, channel_mean_saliency, &cfg.dris)?;
    let report = DrisReport {
        image: image.display().to_string(),
        config: cfg.dris.clone(),
        grid: [grid.height(), grid.width(), grid.channels()],
        coarse: [result.coarse.height(), result.coarse.width()],
        mask: MaskSummary {
            height: result.mask.height,
            width: result.mask.width,
            high: result.mask.high_count(),
            low: result.mask.cells.len() - result.mask.high_count(),
        },
        rois: result
            .rois
            .iter()
            .map(|r| [r.row0, r.col0, r.row1, r.col1])
            .collect(),
        savings_ratio: result.cost.savings_ratio,
        cost: result.cost,
    };
    if let Some(dir) = out {
        let mut csv = String::from("row,col,saliency,resolution\n");
        let s = &result.saliency;
        for r in 0..s.height() {
            for c in 0..s.width() {
                let res = match result.mask.get(r, c) {
                    Resolution::High => "high",
                    Resolution::Low => "low",
                };
                csv.push_str(&format!("{r},{c},{},{res}\n", s.get(r, c, 0)));
            }
        }
        write_file(&dir.join("saliency.csv"), csv.as_bytes())?;
        write_file(&dir.join("dris_report.json"), to_json(&report).as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignItemReport {
    pub index: usize,
    pub image_path: String,
    pub l_obj: f64,
    pub l_reg_hard: f64,
    pub l_reg_nce: f64,
    pub l_reg: f64,
    pub l_glob: f64,
    pub l_align: f64,
    pub iou_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordError {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignReport {
    pub weights: AlignWeights,
    pub text_dim: usize,
    pub items: Vec<AlignItemReport>,
    pub errors: Vec<RecordError>,
    /// Means over successfully scored items.
    pub mean: BTreeMap<String, f64>,
}

/// Builds the alignment payload for one ingested record.
///
/// Visual side: per-box mean features, per-mask mean features and a
/// pyramid-pooled global vector (block-mean projection, LayerNorm, L2).
/// Text side: hashed embeddings of box labels and phrases; the caption
/// embedding goes through the same LayerNorm and L2 steps.
pub fn build_align_batch(
    grid: &FeatureGrid,
    rec: &AnnotationRecord,
    text_dim: usize,
) -> Result<AlignBatch> {
    if grid.channels() != text_dim {
        return Err(Error::Shape(format!(
            "grid has {} channels but text embeddings have {text_dim}",
            grid.channels()
        )));
    }
    let id = Projector::identity(text_dim);
    let boxes = rec.rois()?;
    let gts = rec.gt_rois()?;
    let visual = object_features(grid, &boxes, (1, 1), &id)?;
    let object_pairs = visual
        .into_iter()
        .zip(&rec.box_labels)
        .zip(boxes.iter().zip(&gts))
        .map(|((v, label), (b, g))| {
            Ok(ObjectPair {
                boxes: BoxPair {
                    predicted: *b,
                    ground_truth: *g,
                },
                visual: v,
                text: text_embedding(label, text_dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = rec.masks()?;
    let region_visual = region_features(grid, &masks, &id)?;
    let phrases = rec
        .phrases
        .iter()
        .map(|p| text_embedding(p, text_dim))
        .collect::<Result<Vec<_>>>()?;
    let hard_assignment = if region_visual.is_empty() || phrases.is_empty() {
        Vec::new()
    } else {
        greedy_assignment(&region_visual, &phrases)?
    };
    let groups = CLI_SPP_LEVELS.iter().map(|l| l * l).sum();
    let global_visual = spp(
        grid,
        &CLI_SPP_LEVELS,
        &Projector::block_mean(text_dim, groups),
    )?;
    let global_text = l2_normalize(&layer_norm(
        &text_embedding(&rec.caption, text_dim)?,
        LAYER_NORM_EPS,
    )?)?;
    Ok(AlignBatch {
        visual_grid: grid.clone(),
        object_pairs,
        region_items: masks
            .into_iter()
            .zip(region_visual)
            .map(|(mask, visual)| RegionItem { mask, visual })
            .collect(),
        phrases,
        positive_index: rec.phrase_positive.clone(),
        hard_assignment,
        global_visual,
        global_text,
    })
}

/// Scores every record; a failing record is listed in `errors` and
/// excluded from the means. Writes `align_report.json` when `out` is set.
pub fn cmd_align(
    cfg: &RunConfig,
    annotations: &Path,
    grids_dir: &Path,
    out: Option<&Path>,
) -> Result<AlignReport> {
    let records = load_annotations(annotations)?;
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        let scored = read_grid(&grids_dir.join(&rec.image_path))
            .and_then(|grid| build_align_batch(&grid, rec, cfg.text_dim))
            .and_then(|batch| align_loss(&batch, &cfg.align));
        match scored {
            Ok(b) => items.push(AlignItemReport {
                index,
                image_path: rec.image_path.clone(),
                l_obj: b.l_obj,
                l_reg_hard: b.l_reg_hard,
                l_reg_nce: b.l_reg_nce,
                l_reg: b.l_reg,
                l_glob: b.l_glob,
                l_align: b.l_align,
                iou_weights: b.iou_weights,
            }),
            Err(e) => errors.push(RecordError {
                index,
                error: e.to_string(),
            }),
        }
    }
    let mut mean = BTreeMap::new();
    if !items.is_empty() {
        let n = items.len() as f64;
        let fields: [(&str, fn(&AlignItemReport) -> f64); 6] = [
            ("l_obj", |i| i.l_obj),
            ("l_reg_hard", |i| i.l_reg_hard),
            ("l_reg_nce", |i| i.l_reg_nce),
            ("l_reg", |i| i.l_reg),
            ("l_glob", |i| i.l_glob),
            ("l_align", |i| i.l_align),
        ];
        for (name, f) in fields {
            mean.insert(name.to_string(), items.iter().map(f).sum::<f64>() / n);
        }
    }
    let report = AlignReport {
        weights: cfg.align,
        text_dim: cfg.text_dim,
        items,
        errors,
        mean,
    };
    if let Some(dir) = out {
        write_file(&dir.join("align_report.json"), to_json(&report).as_bytes())?;
    }
    Ok(report)
}

/// Per-record caption scores. `spice_f1` is present only when both triple
/// sets were supplied.
#[derive(Debug, Clone, Serialize)]
pub struct MetricScores {
    pub index: usize,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub spice_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub items: Vec<MetricScores>,
    pub errors: Vec<RecordError>,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub cider_x10: f64,
    pub spice_f1: Option<f64>,
    /// R@1, R@5, R@10 over records carrying a retrieval rank.
    pub recall: Option<[f64; 3]>,
}

impl MetricsReport {
    /// Fixed-width table, three decimals.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let recall = self.recall.map(|r| r.map(|x| format!("{x:.3}")));
        let r = |i: usize| recall.as_ref().map_or("-".to_string(), |r| r[i].clone());
        let header = [
            "BLEU-1",
            "BLEU-2",
            "BLEU-3",
            "BLEU-4",
            "METEOR",
            "ROUGE-L",
            "CIDEr",
            "CIDEr×10",
            "SPICE",
            "R@1",
            "R@5",
            "R@10",
        ];
        let values = [
            format!("{:.3}", self.bleu[0]),
            format!("{:.3}", self.bleu[1]),
            format!("{:.3}", self.bleu[2]),
            format!("{:.3}", self.bleu[3]),
            format!("{:.3}", self.meteor),
            format!("{:.3}", self.rouge_l),
            format!("{:.3}", self.cider),
            format!("{:.3}", self.cider_x10),
            opt(self.spice_f1),
            r(0),
            r(1),
            r(2),
        ];
        let mut out = String::new();
        for h in header {
            out.push_str(&format!("{h:>9}"));
        }
        out.push('\n');
        for v in values {
            out.push_str(&format!("{v:>9}"));
        }
        out.push('\n');
        out
    }
}

/// Scores `candidate` captions against `references` (or the caption).
/// Records without a usable candidate are listed as errors and excluded.
pub fn metrics_for_records(records: &[AnnotationRecord]) -> Result<MetricsReport> {
    let mut usable = Vec::new();
    let mut errors = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        let cand = Caption::new(rec.candidate.as_deref().unwrap_or(""));
        if cand.is_empty() {
            errors.push(RecordError {
                index,
                error: "empty or missing candidate".into(),
            });
            continue;
        }
        match RefSet::new(
            rec.reference_texts()
                .iter()
                .map(|s| Caption::new(s))
                .collect(),
        ) {
            Ok(refs) => usable.push((index, cand, refs, rec)),
            Err(e) => errors.push(RecordError {
                index,
                error: e.to_string(),
            }),
        }
    }

    let mut items = Vec::new();
    if !usable.is_empty() {
        let corpus: Vec<RefSet> = usable.iter().map(|(_, _, r, _)| r.clone()).collect();
        let cider_table = CiderCorpus::new(&corpus, 4)?;
        for (index, cand, refs, rec) in &usable {
            let mut b = [0.0; 4];
            for (n, slot) in b.iter_mut().enumerate() {
                *slot = bleu(cand, refs, n + 1, None)?;
            }
            let best =
                |f: &dyn Fn(&Caption) -> f64| refs.references().iter().map(f).fold(0.0, f64::max);
            items.push(MetricScores {
                index: *index,
                bleu: b,
                meteor: best(&|r| meteor(cand, r)),
                rouge_l: best(&|r| rouge_l(cand, r, 1.0)),
                cider: cider_table.score(cand, refs)?,
                spice_f1: match (rec.candidate_triple_set(), rec.triple_set()) {
                    (Some(c), Some(r)) => Some(spice_f1(&c, &r)),
                    _ => None,
                },
            });
        }
    }

    let mean = |f: &dyn Fn(&MetricScores) -> f64| {
        if items.is_empty() {
            0.0
        } else {
            items.iter().map(f).sum::<f64>() / items.len() as f64
        }
    };
    let spice: Vec<f64> = items.iter().filter_map(|i| i.spice_f1).collect();
    let ranks: Vec<usize> = records.iter().filter_map(|r| r.retrieval_rank).collect();
    let recall = if ranks.is_empty() {
        None
    } else {
        Some([
            recall_at_k(&ranks, 1)?,
            recall_at_k(&ranks, 5)?,
            recall_at_k(&ranks, 10)?,
        ])
    };
    let cider = mean(&|i| i.cider);
    Ok(MetricsReport {
        bleu: [
            mean(&|i| i.bleu[0]),
            mean(&|i| i.bleu[1]),
            mean(&|i| i.bleu[2]),
            mean(&|i| i.bleu[3]),
        ],
        meteor: mean(&|i| i.meteor),
        rouge_l: mean(&|i| i.rouge_l),
        cider,
        cider_x10: 10.0 * cider,
        spice_f1: (!spice.is_empty()).then(|| spice.iter().sum::<f64>() / spice.len() as f64),
        recall,
        items,
        errors,
    })
}

pub fn cmd_metrics(annotations: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    let report = metrics_for_records(&load_annotations(annotations)?)?;
    if let Some(dir) = out {
        write_file(&dir.join("metrics.json"), to_json(&report).as_bytes())?;
        write_file(&dir.join("metrics.txt"), report.table().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub config: BTreeMap<String, String>,
    pub pairs: usize,
    pub early_mean: Option<f64>,
    pub late_mean: Option<f64>,
    pub frozen_unchanged: bool,
    pub report: TrainReport,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

/// Trains on the synthetic dataset. With `out` set, writes
/// `loss_curve.csv`, `train_report.json` and `model.tvlm`.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = synthetic_dataset(&cfg.model, cfg.pairs, cfg.train.seed)?;
    let mut params = ToyVlmParams::init(&cfg.model, cfg.train.seed.wrapping_add(1))?;
    let report = train(&data, &mut params, &cfg.train, &cfg.align)?;
    let n = report.steps.len();
    let mut summary = TrainSummary {
        config: cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        pairs: cfg.pairs,
        early_mean: report.window_mean(10, 20),
        late_mean: report.window_mean(n.saturating_sub(10), n),
        frozen_unchanged: report.frozen_unchanged(),
        report,
        checkpoint: None,
        loss_csv: None,
    };
    if let Some(dir) = out {
        let csv = dir.join("loss_curve.csv");
        write_file(&csv, summary.report.loss_csv().as_bytes())?;
        let ckpt = dir.join("model.tvlm");
        let mut buf = Vec::new();
        save_params(&mut buf, &params)?;
        write_file(&ckpt, &buf)?;
        summary.checkpoint = Some(ckpt);
        summary.loss_csv = Some(csv);
        write_file(&dir.join("train_report.json"), to_json(&summary).as_bytes())?;
    }
    Ok(summary)
}
