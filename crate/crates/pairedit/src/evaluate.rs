//! Evaluation protocol: sample every held-out instance of a split at a
//! per-instance derived seed, score predictions with pixel MSE and the
//! frozen-encoder similarity, and aggregate into a report. Instances are
//! seeded by query index alone, so two tasks probed with the same query
//! slot see identical starting noise and paired comparisons are exact.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::config::SampleConfig;
use crate::dataset::{InstanceRecord, LoadedDataset, TaskRecord};
use crate::editor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{clip_i, mse, InstanceEntry, MetricColumn, MetricReport};
use crate::model::prompt::PromptEncoder;
use crate::model::Model;
use crate::rng::{derive_seed, tag, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected seen or unseen)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        })
    }
}

/// The image encoder used for similarity scoring: the model's own prompt
/// encoder when it has one, otherwise a fixed fresh encoder so plain
/// models are scored with the same kind of measuring stick. Either way
/// the encoder is read-only here.
pub fn scoring_encoder<F: Scalar>(model: &Model<F>, seed: u64) -> PromptEncoder<F> {
    match &model.prompt {
        Some(enc) => enc.clone(),
        None => {
            let cfg = &model.cfg;
            let mut rng = Rng::seed(derive_seed(seed, &[tag::INIT_PROMPT]));
            PromptEncoder::new(&mut rng, cfg.d_model, cfg.patch, cfg.resolution, cfg.n_adapter)
        }
    }
}

/// Deterministic seed for one eval instance. Keyed by query index only,
/// never by task, so paired tasks sharing base images also share noise.
pub fn instance_seed(base: u64, rec: &InstanceRecord) -> u64 {
    derive_seed(base, &[tag::EVAL, rec.query_index as u64])
}

pub fn score_instance<F: Scalar>(
    pred: &Image,
    gt: &Image,
    encoder: &PromptEncoder<F>,
) -> Result<(f64, f64)> {
    Ok((mse(pred, gt)?, clip_i(pred, gt, encoder)?))
}

fn split_instances<'a>(
    data: &'a LoadedDataset,
    split: Split,
) -> Result<Vec<(&'a InstanceRecord, &'a TaskRecord)>> {
    let mut out = Vec::new();
    for rec in &data.manifest.eval_instances {
        let task = data
            .manifest
            .tasks
            .iter()
            .find(|t| t.task_id == rec.task_id)
            .ok_or_else(|| Error::Config(format!("instance references unknown task {}", rec.task_id)))?;
        if task.seen == (split == Split::Seen) {
            out.push((rec, task));
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no eval instances in the {split} split")));
    }
    Ok(out)
}

/// One sampled prediction with its identifying record.
pub struct Prediction<'a> {
    pub rec: &'a InstanceRecord,
    pub task: &'a TaskRecord,
    pub image: Image,
}

/// Sample every instance of the split. Exposed separately from scoring so
/// ablations can reuse the predictions.
pub fn sample_split<'a, F: Scalar>(
    model: &Model<F>,
    data: &'a LoadedDataset,
    split: Split,
    sample: &SampleConfig,
    seed: u64,
) -> Result<Vec<Prediction<'a>>> {
    let mut out = Vec::new();
    for (rec, task) in split_instances(data, split)? {
        let (p_src, p_tar) = data.prompt_pair(rec);
        let (q_src, _) = data.query_pair(rec);
        let image = editor::edit(
            model,
            p_src,
            p_tar,
            q_src,
            rec.instruction_id,
            sample.steps,
            sample.guidance,
            instance_seed(seed, rec),
        )?;
        out.push(Prediction { rec, task, image });
    }
    Ok(out)
}

pub fn report_columns() -> Vec<MetricColumn> {
    vec![MetricColumn::new("mse", false), MetricColumn::new("clip_i", true)]
}

/// Full protocol: sample, score, aggregate.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    data: &LoadedDataset,
    split: Split,
    sample: &SampleConfig,
    seed: u64,
) -> Result<MetricReport> {
    let encoder = scoring_encoder(model, seed);
    let mut entries = Vec::new();
    for pred in sample_split(model, data, split, sample, seed)? {
        let (_, q_tar) = data.query_pair(pred.rec);
        let (m, c) = score_instance(&pred.image, q_tar, &encoder)?;
        entries.push(InstanceEntry {
            task_id: pred.task.task_id,
            task: pred.task.name.clone(),
            category: pred.task.category,
            query_index: pred.rec.query_index,
            values: vec![m, c],
        });
    }
    MetricReport::build(&split.to_string(), report_columns(), entries)
}

/// Write `eval_<split>.json` and `eval_<split>.txt` under `out_dir`.
pub fn write_report(report: &MetricReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join(format!("eval_{}.json", report.split));
    fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    let text_path = out_dir.join(format!("eval_{}.txt", report.split));
    fs::write(&text_path, report.render_text()).map_err(|e| Error::io(&text_path, e))?;
    Ok(())
}
