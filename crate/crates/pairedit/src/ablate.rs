//! Ablations. Two procedures: a side-by-side adapter vs concat comparison
//! trained under matched budgets on the configured dataset, and a
//! two-task disambiguation benchmark (identity vs invert) where the
//! exemplar pair is the only signal separating the tasks. The benchmark
//! shares base images and per-query noise across tasks, so a model blind
//! to the prompt provably cannot beat the analytic bound derived from the
//! bimodal target distribution.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{build_dataset, empty_instruction_id, LoadedDataset};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, Split};
use crate::metrics::{MetricReport, Stat};
use crate::model::Variant;
use crate::train::Session;
use crate::scalar::Scalar;

/// Train a fresh session for `cfg.train.steps` without touching the
/// filesystem; ablations care about end states, not logs.
fn train_in_memory<F: Scalar>(cfg: &Config, data: &LoadedDataset) -> Result<Session<F>> {
    let mut session = Session::fresh(cfg)?;
    while session.step < cfg.train.steps as u64 {
        session.step_once(data)?;
    }
    Ok(session)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub split: String,
    pub count: usize,
    pub mse: Stat,
    pub clip_i: Stat,
}

fn overall_row(variant: Variant, split: Split, report: &MetricReport) -> VariantRow {
    VariantRow {
        variant: variant.to_string(),
        split: split.to_string(),
        count: report.overall.count,
        mse: report.overall.stats[0],
        clip_i: report.overall.stats[1],
    }
}

/// Adapter vs concat under matched budgets: same seed, same data order,
/// same step count; the wiring of the prompt tokens is the only
/// difference. Rows come out {adapter, concat} x {seen, unseen}.
pub fn compare_variants<F: Scalar>(cfg: &Config, data: &LoadedDataset) -> Result<Vec<VariantRow>> {
    let mut rows = Vec::with_capacity(4);
    for variant in [Variant::Adapter, Variant::Concat] {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let session: Session<F> = train_in_memory(&vcfg, data)?;
        for split in [Split::Seen, Split::Unseen] {
            let report = evaluate(&session.model, data, split, &vcfg.sample, vcfg.train.seed)?;
            rows.push(overall_row(variant, split, &report));
        }
    }
    Ok(rows)
}

/// Settings for the two-task disambiguation benchmark. The dataset is
/// regenerated under `root` with shared base images, so the identity and
/// invert tasks see pixel-identical sources and (via query-indexed eval
/// seeds) identical starting noise.
pub struct BenchmarkSpec {
    pub seed: u64,
    pub steps: usize,
    pub pairs_per_task: usize,
    pub holdout: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec { seed: 1000, steps: 900, pairs_per_task: 6, holdout: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disambiguation {
    /// Mean over paired eval pixels of (v - 1/2)^2: the best mean MSE any
    /// predictor blind to the task identity can score on the pair.
    pub bound: f64,
    /// Plain-variant control, instruction blanked: blind to both signals.
    pub control_mse: f64,
    /// Adapter variant, instruction blanked: the prompt pair is its only
    /// way to tell the tasks apart.
    pub adapter_mse: f64,
    /// Concat baseline, instruction blanked.
    pub concat_mse: f64,
    /// Adapter variant trained and evaluated with real instructions, for
    /// the question of whether text shortcuts the prompt.
    pub adapter_text_mse: f64,
}

fn benchmark_config(base: &Config, root: &Path, spec: &BenchmarkSpec) -> Config {
    let mut cfg = base.clone();
    cfg.train.seed = spec.seed;
    cfg.train.steps = spec.steps;
    cfg.data.ops = vec!["identity".into(), "invert".into()];
    cfg.data.unseen = Vec::new();
    cfg.data.pairs_per_task = spec.pairs_per_task;
    cfg.data.holdout = spec.holdout;
    cfg.data.cap = spec.pairs_per_task * (spec.pairs_per_task - 1);
    cfg.data.shared_base_images = true;
    cfg.paths.data_dir = root.to_path_buf();
    cfg
}

/// Replace every instruction in the manifest with the empty id, making
/// the text channel uninformative for training and evaluation alike.
fn blank_instructions(data: &mut LoadedDataset) {
    let empty = empty_instruction_id();
    for rec in data
        .manifest
        .train_instances
        .iter_mut()
        .chain(data.manifest.eval_instances.iter_mut())
    {
        rec.instruction_id = empty;
    }
}

/// Mean over identity-task eval targets of (v - 1/2)^2. The identity
/// target equals the shared source, and the invert target is its mirror
/// around 1/2, so this is the per-pixel variance of the two-point target
/// mixture either task presents to a blind predictor.
pub fn analytic_blind_bound(data: &LoadedDataset) -> Result<f64> {
    let identity = data
        .manifest
        .tasks
        .iter()
        .find(|t| t.name == "identity")
        .ok_or_else(|| Error::Config("benchmark dataset lacks the identity task".into()))?;
    let recs: Vec<_> = data
        .manifest
        .eval_instances
        .iter()
        .filter(|r| r.task_id == identity.task_id)
        .collect();
    if recs.is_empty() {
        return Err(Error::Config("identity task has no eval instances".into()));
    }
    let mut acc = 0.0;
    for rec in &recs {
        let (_, tar) = data.query_pair(rec);
        let per_pixel: f64 = tar
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - 0.5;
                d * d
            })
            .sum::<f64>()
            / tar.data.len() as f64;
        acc += per_pixel;
    }
    Ok(acc / recs.len() as f64)
}

fn mean_mse<F: Scalar>(cfg: &Config, data: &LoadedDataset) -> Result<f64> {
    let session: Session<F> = train_in_memory(cfg, data)?;
    let report = evaluate(&session.model, data, Split::Seen, &cfg.sample, cfg.train.seed)?;
    Ok(report.overall.stats[0].mean)
}

/// Build the benchmark dataset and run all four models under the same
/// seed and budget.
pub fn disambiguation_benchmark<F: Scalar>(
    base: &Config,
    root: &Path,
    spec: &BenchmarkSpec,
) -> Result<Disambiguation> {
    let cfg = benchmark_config(base, root, spec);
    build_dataset(&cfg.dataset_config())?;
    let with_text = LoadedDataset::open(&cfg.paths.data_dir)?;
    let mut blanked = LoadedDataset::open(&cfg.paths.data_dir)?;
    blank_instructions(&mut blanked);

    let bound = analytic_blind_bound(&blanked)?;

    let variant_cfg = |variant: Variant| {
        let mut c = cfg.clone();
        c.variant = variant;
        c
    };
    let control_mse = mean_mse::<F>(&variant_cfg(Variant::Plain), &blanked)?;
    let adapter_mse = mean_mse::<F>(&variant_cfg(Variant::Adapter), &blanked)?;
    let concat_mse = mean_mse::<F>(&variant_cfg(Variant::Concat), &blanked)?;
    let adapter_text_mse = mean_mse::<F>(&variant_cfg(Variant::Adapter), &with_text)?;

    Ok(Disambiguation { bound, control_mse, adapter_mse, concat_mse, adapter_text_mse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<VariantRow>,
    pub disambiguation: Disambiguation,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<8} {:>6}  {:>22}  {:>22}\n",
            "variant", "split", "n", "mse \u{2193}", "clip_i \u{2191}"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<8} {:>6}  {:>22}  {:>22}\n",
                r.variant,
                r.split,
                r.count,
                format!("{:.6} \u{00b1} {:.6}", r.mse.mean, r.mse.std),
                format!("{:.6} \u{00b1} {:.6}", r.clip_i.mean, r.clip_i.std),
            ));
        }
        let d = &self.disambiguation;
        out.push_str("\ndisambiguation benchmark (identity vs invert, prompt-only):\n");
        out.push_str(&format!("{:<28} {:.6}\n", "analytic blind bound", d.bound));
        out.push_str(&format!("{:<28} {:.6}\n", "control (blind) mse", d.control_mse));
        out.push_str(&format!("{:<28} {:.6}\n", "adapter mse", d.adapter_mse));
        out.push_str(&format!("{:<28} {:.6}\n", "concat mse", d.concat_mse));
        out.push_str(&format!("{:<28} {:.6}\n", "adapter mse (with text)", d.adapter_text_mse));
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let json_path = out_dir.join("ablation.json");
        fs::write(&json_path, self.to_json()).map_err(|e| Error::io(&json_path, e))?;
        let text_path = out_dir.join("ablation.txt");
        fs::write(&text_path, self.render_text()).map_err(|e| Error::io(&text_path, e))?;
        Ok(())
    }
}

/// Everything `ablate` produces: the matched-budget variant table on the
/// configured dataset plus the disambiguation benchmark, whose dataset
/// lives under `<data_dir>_bench`.
pub fn run_ablation<F: Scalar>(cfg: &Config, spec: &BenchmarkSpec) -> Result<AblationReport> {
    let data = LoadedDataset::open(&cfg.paths.data_dir)?;
    let rows = compare_variants::<F>(cfg, &data)?;
    let bench_root = {
        let mut os = cfg.paths.data_dir.as_os_str().to_os_string();
        os.push("_bench");
        std::path::PathBuf::from(os)
    };
    let disambiguation = disambiguation_benchmark::<F>(cfg, &bench_root, spec)?;
    Ok(AblationReport { rows, disambiguation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PermutationMode;

    fn tiny_config(root: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.model.resolution = 8;
        cfg.model.d_model = 16;
        cfg.model.blocks = 1;
        cfg.model.heads = 2;
        cfg.model.n_adapter = 2;
        cfg.train.steps = 4;
        cfg.train.batch = 2;
        cfg.train.seed = 31;
        cfg.sample.steps = 3;
        cfg.data.ops = vec!["invert".into(), "grayscale".into(), "hflip".into()];
        cfg.data.unseen = vec!["hflip".into()];
        cfg.data.pairs_per_task = 4;
        cfg.data.cap = 6;
        cfg.data.holdout = 1;
        cfg.data.mode = PermutationMode::Full;
        cfg.paths.data_dir = root.join("data");
        cfg.paths.out_dir = root.join("out");
        cfg
    }

    #[test]
    fn variant_table_has_four_rows_in_fixed_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        build_dataset(&cfg.dataset_config()).unwrap();
        let data = LoadedDataset::open(&cfg.paths.data_dir).unwrap();
        let rows = compare_variants::<f32>(&cfg, &data).unwrap();
        let labels: Vec<(String, String)> =
            rows.iter().map(|r| (r.variant.clone(), r.split.clone())).collect();
        assert_eq!(
            labels,
            [
                ("adapter".to_string(), "seen".to_string()),
                ("adapter".to_string(), "unseen".to_string()),
                ("concat".to_string(), "seen".to_string()),
                ("concat".to_string(), "unseen".to_string()),
            ]
        );
        for r in &rows {
            assert!(r.mse.mean.is_finite());
            assert!(r.count > 0);
        }
    }

    #[test]
    fn benchmark_dataset_pairs_tasks_pixel_for_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let spec = BenchmarkSpec { seed: 5, steps: 1, pairs_per_task: 4, holdout: 1 };
        let bench_cfg = benchmark_config(&cfg, &dir.path().join("bench"), &spec);
        build_dataset(&bench_cfg.dataset_config()).unwrap();
        let data = LoadedDataset::open(&bench_cfg.paths.data_dir).unwrap();

        assert_eq!(data.manifest.tasks.len(), 2);
        let eval = &data.manifest.eval_instances;
        let ident: Vec<_> = eval.iter().filter(|r| r.task_id == 0).collect();
        let inv: Vec<_> = eval.iter().filter(|r| r.task_id == 1).collect();
        assert_eq!(ident.len(), inv.len());
        for (a, b) in ident.iter().zip(&inv) {
            assert_eq!(a.query_index, b.query_index, "eval queries align across tasks");
            let (src_a, tar_a) = data.query_pair(a);
            let (src_b, tar_b) = data.query_pair(b);
            assert_eq!(src_a.data, src_b.data, "shared base images");
            assert_eq!(tar_a.data, src_a.data, "identity target is the source");
            for (x, y) in tar_a.data.iter().zip(&tar_b.data) {
                assert!((x + y - 1.0).abs() < 1e-6, "invert target mirrors identity");
            }
        }
    }

    #[test]
    fn blind_bound_matches_direct_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let spec = BenchmarkSpec { seed: 5, steps: 1, pairs_per_task: 4, holdout: 1 };
        let bench_cfg = benchmark_config(&cfg, &dir.path().join("bench"), &spec);
        build_dataset(&bench_cfg.dataset_config()).unwrap();
        let data = LoadedDataset::open(&bench_cfg.paths.data_dir).unwrap();
        let bound = analytic_blind_bound(&data).unwrap();
        assert!(bound > 0.0 && bound < 0.25, "bound {bound} outside plausible range");

        // recompute from the invert side; mirrored targets agree up to the
        // f32 quantization of k/255 vs (255-k)/255, about 1e-8 per pixel
        let invert = data.manifest.tasks.iter().find(|t| t.name == "invert").unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for rec in data.manifest.eval_instances.iter().filter(|r| r.task_id == invert.task_id) {
            let (_, tar) = data.query_pair(rec);
            acc += tar.data.iter().map(|&v| (v as f64 - 0.5).powi(2)).sum::<f64>()
                / tar.data.len() as f64;
            n += 1;
        }
        assert!((bound - acc / n as f64).abs() < 1e-6);
    }

    #[test]
    fn blanking_strips_every_instruction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        build_dataset(&cfg.dataset_config()).unwrap();
        let mut data = LoadedDataset::open(&cfg.paths.data_dir).unwrap();
        blank_instructions(&mut data);
        let empty = empty_instruction_id();
        assert!(data
            .manifest
            .train_instances
            .iter()
            .chain(&data.manifest.eval_instances)
            .all(|r| r.instruction_id == empty));
    }

    #[test]
    fn report_renders_rows_and_benchmark_lines() {
        let report = AblationReport {
            rows: vec![VariantRow {
                variant: "adapter".into(),
                split: "seen".into(),
                count: 4,
                mse: Stat { mean: 0.01, std: 0.001 },
                clip_i: Stat { mean: 0.95, std: 0.01 },
            }],
            disambiguation: Disambiguation {
                bound: 0.08,
                control_mse: 0.09,
                adapter_mse: 0.012,
                concat_mse: 0.02,
                adapter_text_mse: 0.011,
            },
        };
        let text = report.render_text();
        assert!(text.contains("adapter"));
        assert!(text.contains("analytic blind bound"));
        assert!(text.contains("mse \u{2193}"));
        let back: AblationReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);

        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        assert!(dir.path().join("ablation.json").exists());
        assert!(dir.path().join("ablation.txt").exists());
    }

    #[test]
    fn benchmark_control_cannot_beat_the_bound_even_untrained() {
        // one-step budget: the point here is the inequality wiring, not
        // learning; the full-budget run lives in the acceptance suite
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.sample.steps = 4;
        let spec = BenchmarkSpec { seed: 5, steps: 1, pairs_per_task: 4, holdout: 1 };
        let d = disambiguation_benchmark::<f32>(&cfg, &dir.path().join("bench"), &spec).unwrap();
        assert!(d.control_mse >= d.bound - 1e-9, "control {} vs bound {}", d.control_mse, d.bound);
        assert!(d.bound > 0.0);
        assert!(d.adapter_mse.is_finite());
        assert!(d.concat_mse.is_finite());
        assert!(d.adapter_text_mse.is_finite());
    }
}
