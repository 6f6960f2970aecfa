//! The release gate. Every check here is a hard contract of the artifact:
//! exact degeneracies of the attention paths, determinism of everything
//! that touches an RNG or the filesystem, brute-force oracles for metrics
//! and dataset combinatorics, and end-to-end learning/ordering thresholds
//! frozen from calibration runs.
//!
//! Each test prints one summary line; run with `--nocapture` to see the
//! measured values alongside the pass/fail verdicts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use pairedit::ablate::{self, BenchmarkSpec};
use pairedit::checkpoint::Snapshot;
use pairedit::config::{Config, SampleConfig};
use pairedit::dataset::{build_dataset, DatasetConfig, LoadedDataset, PermutationMode};
use pairedit::editor::{self, SampleRequest, SampleTrace};
use pairedit::evaluate::{self, Split};
use pairedit::gradcheck;
use pairedit::image::Image;
use pairedit::metrics;
use pairedit::model::attention::{adapter_attention, attention_core, redux_concat_attention};
use pairedit::model::block::Block;
use pairedit::model::patch::{grid_positional, patch_coords};
use pairedit::model::{Model, ModelConfig, Variant};
use pairedit::rng::Rng;
use pairedit::tensor::Tensor;
use pairedit::train::{self, Session};

/// Step budget for the learning checks; frozen from a calibration run of
/// the default configuration (see `docs/calibration` notes in the README).
const LEARNING_STEPS: usize = 16000;
/// Wall-clock ceiling for the learning-check training run.
const LEARNING_TIME_BUDGET_S: f64 = 1800.0;
const SEEN_MSE_THRESHOLD: f64 = 0.02;
const SEEN_CLIP_THRESHOLD: f64 = 0.90;

fn default_config(root: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.train.steps = LEARNING_STEPS;
    cfg.train.checkpoint_every = LEARNING_STEPS;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.out_dir = root.join("out");
    cfg
}

static GATE: Mutex<()> = Mutex::new(());

/// The harness runs tests on parallel threads; checks that train models or
/// assert wall-clock budgets must not time-slice against each other.
fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

struct Trained {
    _dir: tempfile::TempDir,
    cfg: Config,
    ckpt: PathBuf,
    train_seconds: f64,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

/// One full training run of the default configuration, shared by the
/// learning and generalization checks.
fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = default_config(dir.path());
        build_dataset(&cfg.dataset_config()).unwrap();
        let data = LoadedDataset::open(&cfg.paths.data_dir).unwrap();
        let started = Instant::now();
        let (_, report) = train::train::<f32>(&cfg, &data, &cfg.paths.out_dir, None).unwrap();
        let train_seconds = started.elapsed().as_secs_f64();
        Trained { _dir: dir, cfg, ckpt: report.final_checkpoint, train_seconds }
    })
}

fn load_model(ckpt: &Path) -> Model<f32> {
    let session: Session<f32> = Session::resume(&Snapshot::load(ckpt).unwrap()).unwrap();
    session.model
}

fn random_payload(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.normal() as f32).collect();
    Tensor::new(data, &[rows, cols])
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|f| f.to_bits()).collect()
}

#[test]
fn gradient_suite_passes_across_seeds() {
    let _gate = gate();
    let started = Instant::now();
    let mut checked = 0usize;
    let mut max_err = 0.0f64;
    for seed in 0..10u64 {
        for outcome in gradcheck::run_full_suite(1000 + seed).unwrap() {
            assert!(
                outcome.max_rel_err <= gradcheck::DEFAULT_TOL,
                "{} exceeded tolerance on seed {seed}: {}",
                outcome.primitive,
                outcome.max_rel_err
            );
            max_err = max_err.max(outcome.max_rel_err);
            checked += 1;
        }
    }
    let micro = gradcheck::check_micro_model(1000).unwrap();
    assert!(micro.max_rel_err <= gradcheck::DEFAULT_TOL);
    max_err = max_err.max(micro.max_rel_err);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s, budget is 60s");
    println!(
        "gradients: {checked} primitive checks over 10 seeds + micro model, \
         max rel err {max_err:.2e}, {elapsed:.1}s"
    );
}

#[test]
fn alpha_zero_output_is_bitwise_plain() {
    let _gate = gate();
    let cfg = ModelConfig::default();
    let mut adapter: Model<f32> = Model::new(cfg.clone(), Variant::Adapter, 400).unwrap();
    adapter.alpha = 0.0;
    let plain: Model<f32> = Model::new(cfg.clone(), Variant::Plain, 400).unwrap();

    let n = cfg.n_patches();
    let pd = cfg.patch_dim();
    let mut rng = Rng::seed(77);
    for case in 0..100 {
        let noisy = random_payload(&mut rng, n, pd);
        let source = random_payload(&mut rng, n, pd);
        let c_v = random_payload(&mut rng, 2 * cfg.n_adapter, cfg.d_model);
        let instruction = rng.below(cfg.text_vocab + 1);
        let t = rng.uniform();
        let with_adapter = adapter.forward_sequence(&noisy, &source, instruction, Some(&c_v), t);
        let without = plain.forward_sequence(&noisy, &source, instruction, None, t);
        assert_eq!(
            bits(&with_adapter),
            bits(&without),
            "alpha=0 output diverged from the plain backbone on case {case}"
        );
    }
    println!("alpha=0 degeneracy: 100/100 random inputs bitwise identical to plain backbone");
}

#[test]
fn fresh_adapter_and_fresh_lora_are_inert() {
    let _gate = gate();
    let cfg = ModelConfig::default();
    // fresh adapter: value projections start at zero, so the decoupled
    // branch contributes nothing even at alpha=1
    let adapter: Model<f32> = Model::new(cfg.clone(), Variant::Adapter, 500).unwrap();
    assert_eq!(adapter.alpha, 1.0);
    let plain: Model<f32> = Model::new(cfg.clone(), Variant::Plain, 500).unwrap();

    let n = cfg.n_patches();
    let pd = cfg.patch_dim();
    let mut rng = Rng::seed(78);
    for case in 0..25 {
        let noisy = random_payload(&mut rng, n, pd);
        let source = random_payload(&mut rng, n, pd);
        let c_v = random_payload(&mut rng, 2 * cfg.n_adapter, cfg.d_model);
        let a = adapter.forward_sequence(&noisy, &source, 0, Some(&c_v), 0.4);
        let p = plain.forward_sequence(&noisy, &source, 0, None, 0.4);
        assert_eq!(bits(&a), bits(&p), "fresh adapter changed outputs on case {case}");
    }

    // fresh LoRA: up-factors start at zero, so wrapping changes nothing
    let mut lora_cfg = cfg.clone();
    lora_cfg.lora_rank = 8;
    let wrapped: Model<f32> = Model::new(lora_cfg, Variant::Plain, 500).unwrap();
    for case in 0..25 {
        let noisy = random_payload(&mut rng, n, pd);
        let source = random_payload(&mut rng, n, pd);
        let w = wrapped.forward_sequence(&noisy, &source, 3, None, 0.7);
        let p = plain.forward_sequence(&noisy, &source, 3, None, 0.7);
        assert_eq!(bits(&w), bits(&p), "fresh LoRA changed outputs on case {case}");
    }
    println!("safe start: zero value-projections and zero LoRA up-factors leave outputs unchanged");
}

#[test]
fn spatial_positions_are_cloned_across_segments() {
    let _gate = gate();
    let resolutions = [8usize, 12, 16, 20, 24];
    let patches = [2usize, 4];
    let widths = [8usize, 16, 32, 64];
    let mut swept = 0usize;
    for i in 0..1000u64 {
        let resolution = resolutions[(i as usize) % resolutions.len()];
        let patch = patches[(i as usize / 5) % patches.len()];
        let d_model = widths[(i as usize / 10) % widths.len()];
        let cfg = ModelConfig {
            d_model,
            blocks: 1,
            heads: 2,
            patch,
            resolution,
            n_adapter: 2,
            text_vocab: 3,
            lora_rank: 0,
        };
        let model: Model<f32> = Model::new(cfg, Variant::Plain, i).unwrap();

        // both spatial segments receive these rows; rebuild them from the
        // public grid API as an independent reconstruction
        let rows = model.grid_positions();
        let rebuilt: Vec<f32> = grid_positional(&patch_coords(resolution, patch), d_model);
        assert_eq!(
            bits(rows),
            rebuilt.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            "grid rows diverged from the canonical encodings at instance {i}"
        );

        // the text position must not collide with any spatial row
        let sentinel = model.pos_sentinel.data().clone();
        let grid = rows.data().clone();
        let n = rows.rows();
        for r in 0..n {
            assert!(
                sentinel.iter().zip(&grid[r * d_model..(r + 1) * d_model]).any(|(a, b)| a != b),
                "text position equals spatial row {r} at instance {i}"
            );
        }
        swept += 1;
    }

    // behavioral spot-check: the condition embedding applies exactly the
    // shared grid rows (bitwise replay through public parts)
    let cfg = ModelConfig::default();
    let model: Model<f32> = Model::new(cfg.clone(), Variant::Plain, 3).unwrap();
    let mut rng = Rng::seed(9);
    let source = random_payload(&mut rng, cfg.n_patches(), cfg.patch_dim());
    let replay = model
        .patch_embed
        .forward(&source)
        .add(model.grid_positions())
        .add_row(&model.segment_table.slice(0, 1, 1));
    assert_eq!(bits(&model.embed_condition(&source)), bits(&replay));
    println!("position cloning: {swept} instances, spatial rows shared and text row distinct");
}

#[test]
fn condition_tokens_are_constant_along_trajectories() {
    let _gate = gate();
    let cfg = ModelConfig::default();
    let model: Model<f32> = Model::new(cfg.clone(), Variant::Adapter, 600).unwrap();
    let mut rng = Rng::seed(80);
    for case in 0..3u64 {
        let src = random_image(&mut rng, cfg.resolution);
        let prm = random_image(&mut rng, cfg.resolution);
        let reference = random_image(&mut rng, cfg.resolution);
        let mut trace = SampleTrace::default();
        editor::sample_traced(
            &model,
            &SampleRequest {
                prompt: Some((&prm, &reference)),
                src: &src,
                instruction_id: 2,
                steps: 24,
                guidance: 0.0,
                seed: 9000 + case,
            },
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(trace.cond_tokens.len(), 24);
        let first_tokens: Vec<u32> = trace.cond_tokens[0].iter().map(|f| f.to_bits()).collect();
        let first_payload: Vec<u32> = trace.cond_payloads[0].iter().map(|f| f.to_bits()).collect();
        for step in 0..24 {
            let tok: Vec<u32> = trace.cond_tokens[step].iter().map(|f| f.to_bits()).collect();
            let pay: Vec<u32> = trace.cond_payloads[step].iter().map(|f| f.to_bits()).collect();
            assert_eq!(tok, first_tokens, "condition tokens moved at step {step}, case {case}");
            assert_eq!(pay, first_payload, "condition payload moved at step {step}, case {case}");
        }
    }
    println!("noise-free conditioning: condition tokens bitwise constant over 3 full 24-step trajectories");
}

fn random_image(rng: &mut Rng, resolution: usize) -> Image {
    let mut img = Image::new(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            img.set_pixel(x, y, [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]);
        }
    }
    img.snap();
    img
}

/// Direct softmax(q kᵀ / sqrt(dh)) v evaluation with plain loops.
fn oracle_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| {
                    let dot: f64 = cols.clone().map(|c| qi[c] * kj[c]).sum();
                    dot / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += exps[j] / sum * vj[c];
                }
            }
        }
    }
    out
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let cols = rows[0].len();
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(data, &[rows.len(), cols])
}

fn assert_close(got: &Tensor<f64>, want: &[Vec<f64>], what: &str) {
    let data = got.data().clone();
    let cols = want[0].len();
    for (r, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            let g = data[r * cols + c];
            assert!((g - w).abs() <= 1e-6, "{what}[{r},{c}] = {g}, oracle {w}");
        }
    }
}

#[test]
fn attention_paths_match_hand_oracle() {
    let _gate = gate();
    // three tokens, width 4, hand-set values
    let q = vec![
        vec![0.5, -1.0, 0.25, 2.0],
        vec![1.5, 0.0, -0.75, 0.5],
        vec![-0.25, 0.8, 1.2, -1.6],
    ];
    let k = vec![
        vec![1.0, 0.5, -0.5, 0.0],
        vec![-0.3, 1.1, 0.7, 0.9],
        vec![0.2, -0.6, 1.3, -1.0],
    ];
    let v = vec![
        vec![2.0, -1.0, 0.5, 0.25],
        vec![0.0, 1.5, -0.5, 1.0],
        vec![-2.0, 0.75, 1.25, -0.5],
    ];
    for heads in [1usize, 2] {
        let got = attention_core(&rows_to_tensor(&q), &rows_to_tensor(&k), &rows_to_tensor(&v), heads);
        assert_close(&got, &oracle_attention(&q, &k, &v, heads), "attention_core");
    }

    // decoupled path: prompt tokens through hand-set extra projections,
    // queries reused as-is
    let c_v = vec![vec![1.0, -0.5, 0.25, 0.75], vec![-1.25, 0.5, 1.5, -0.25]];
    let k_prime = vec![
        vec![0.5, 0.0, -0.25, 1.0],
        vec![1.0, -0.5, 0.0, 0.25],
        vec![-0.75, 0.25, 1.0, 0.5],
        vec![0.0, 1.0, -0.5, -1.0],
    ];
    let v_prime = vec![
        vec![1.0, 0.5, 0.0, -0.5],
        vec![0.25, -1.0, 0.75, 0.0],
        vec![-0.5, 0.0, 1.25, 1.0],
        vec![0.75, 0.25, -0.25, 0.5],
    ];
    let matmul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                    .collect()
            })
            .collect()
    };
    let got = adapter_attention(
        &rows_to_tensor(&q),
        &rows_to_tensor(&c_v),
        &rows_to_tensor(&k_prime),
        &rows_to_tensor(&v_prime),
        2,
    );
    let want = oracle_attention(&q, &matmul(&c_v, &k_prime), &matmul(&c_v, &v_prime), 2);
    assert_close(&got, &want, "adapter_attention");

    // concatenation baseline: joint self-attention over [c_b; c_v] with
    // the block's own projections, hand-set to known matrices
    let mut rng = Rng::seed(1);
    let block: Block<f64> = Block::new(&mut rng, 4, 2);
    let wq = vec![
        vec![1.0, 0.0, 0.5, -0.5],
        vec![0.0, 1.0, -0.25, 0.25],
        vec![0.5, -0.5, 1.0, 0.0],
        vec![-0.25, 0.25, 0.0, 1.0],
    ];
    let wk = vec![
        vec![0.8, 0.1, -0.3, 0.2],
        vec![-0.2, 0.9, 0.4, -0.1],
        vec![0.3, -0.4, 0.7, 0.5],
        vec![0.1, 0.2, -0.5, 0.6],
    ];
    let wv = vec![
        vec![0.6, -0.2, 0.1, 0.4],
        vec![0.2, 0.7, -0.3, 0.1],
        vec![-0.1, 0.3, 0.8, -0.2],
        vec![0.4, 0.1, 0.2, 0.9],
    ];
    let assign = |lin: &Tensor<f64>, rows: &[Vec<f64>]| {
        let mut dst = lin.data_mut();
        for (i, row) in rows.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                dst[i * row.len() + j] = *x;
            }
        }
    };
    assign(&block.q.weight, &wq);
    assign(&block.k.weight, &wk);
    assign(&block.v.weight, &wv);
    for lin in [&block.q, &block.k, &block.v] {
        for b in lin.bias.data_mut().iter_mut() {
            *b = 0.0;
        }
    }
    let c_b = vec![vec![0.5, 1.0, -0.5, 0.25]];
    let joint = [c_b.clone(), c_v.clone()].concat();
    let got = redux_concat_attention(&rows_to_tensor(&c_b), Some(&rows_to_tensor(&c_v)), &block);
    let want = oracle_attention(&matmul(&joint, &wq), &matmul(&joint, &wk), &matmul(&joint, &wv), 2);
    assert_close(&got, &want, "redux_concat_attention");
    println!("attention oracles: core, decoupled, and concat paths all within 1e-6 of direct evaluation");
}

#[test]
fn seen_tasks_learn_to_threshold() {
    let _gate = gate();
    let fx = trained();
    assert!(
        fx.train_seconds < LEARNING_TIME_BUDGET_S,
        "training took {:.0}s, budget {LEARNING_TIME_BUDGET_S}s",
        fx.train_seconds
    );
    let model = load_model(&fx.ckpt);
    let data = LoadedDataset::open(&fx.cfg.paths.data_dir).unwrap();
    let report =
        evaluate::evaluate(&model, &data, Split::Seen, &fx.cfg.sample, fx.cfg.train.seed).unwrap();
    let mse = report.overall.stats[0].mean;
    let clip = report.overall.stats[1].mean;
    println!(
        "learning check: seen mse {mse:.4} (<= {SEEN_MSE_THRESHOLD}), \
         clip_i {clip:.4} (>= {SEEN_CLIP_THRESHOLD}), trained {} steps in {:.0}s",
        LEARNING_STEPS, fx.train_seconds
    );
    assert!(mse <= SEEN_MSE_THRESHOLD, "seen mse {mse:.4} above {SEEN_MSE_THRESHOLD}");
    assert!(clip >= SEEN_CLIP_THRESHOLD, "clip_i {clip:.4} below {SEEN_CLIP_THRESHOLD}");
}

#[test]
fn pair_disambiguation_orders_variants() {
    let _gate = gate();
    let dir = tempfile::tempdir().unwrap();
    let mut base = Config::default();
    base.paths.data_dir = dir.path().join("data");
    base.paths.out_dir = dir.path().join("out");
    let spec = BenchmarkSpec::default();
    let d = ablate::disambiguation_benchmark::<f32>(&base, &dir.path().join("bench"), &spec).unwrap();
    println!(
        "disambiguation: bound {:.4}, control {:.4}, adapter {:.4}, concat {:.4}",
        d.bound, d.control_mse, d.adapter_mse, d.concat_mse
    );
    assert!(
        d.control_mse >= d.bound - 1e-9,
        "blind control {:.4} beat the analytic bound {:.4}",
        d.control_mse,
        d.bound
    );
    assert!(
        d.adapter_mse <= d.bound / 5.0,
        "adapter {:.4} misses bound/5 = {:.4}",
        d.adapter_mse,
        d.bound / 5.0
    );
    assert!(
        d.adapter_mse <= d.concat_mse,
        "adapter {:.4} worse than concat {:.4} on the seen split",
        d.adapter_mse,
        d.concat_mse
    );
}

#[test]
fn trained_model_generalizes_to_unseen_tasks() {
    let _gate = gate();
    let fx = trained();
    let model = load_model(&fx.ckpt);
    let data = LoadedDataset::open(&fx.cfg.paths.data_dir).unwrap();
    let trained_report =
        evaluate::evaluate(&model, &data, Split::Unseen, &fx.cfg.sample, fx.cfg.train.seed).unwrap();

    let fresh: Session<f32> = Session::fresh(&fx.cfg).unwrap();
    let fresh_report =
        evaluate::evaluate(&fresh.model, &data, Split::Unseen, &fx.cfg.sample, fx.cfg.train.seed)
            .unwrap();

    let trained_mse = trained_report.overall.stats[0].mean;
    let fresh_mse = fresh_report.overall.stats[0].mean;
    println!(
        "generalization: unseen mse trained {trained_mse:.4} vs untrained {fresh_mse:.4} \
         ({:.1}x better)",
        fresh_mse / trained_mse
    );
    assert!(
        trained_mse * 3.0 <= fresh_mse,
        "trained unseen mse {trained_mse:.4} not 3x better than untrained {fresh_mse:.4}"
    );
}

#[test]
fn full_mode_counts_match_brute_force() {
    let _gate = gate();
    let cap = 2000usize;
    for n in 2usize..=20 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatasetConfig::toy_default(dir.path(), 12345 + n as u64);
        cfg.ops = vec!["identity".into()];
        cfg.unseen = vec![];
        cfg.pairs_per_task = n;
        cfg.holdout = 0;
        cfg.cap = cap;
        cfg.mode = PermutationMode::Full;
        cfg.resolution = 8;
        let manifest = build_dataset(&cfg).unwrap();

        // brute-force enumeration of ordered pairs with distinct indices
        let mut brute = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    brute += 1;
                }
            }
        }
        let expected = brute.min(cap);
        assert_eq!(manifest.train_instances.len(), expected, "count mismatch at n={n}");
        assert_eq!(expected, (n * (n - 1)).min(cap));
    }

    // byte determinism: serial and parallel generation, two runs each
    let trees: Vec<tempfile::TempDir> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut snapshots: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for (i, dir) in trees.iter().enumerate() {
        let mut cfg = DatasetConfig::toy_default(dir.path(), 999);
        cfg.ops = vec!["invert".into(), "hflip".into()];
        cfg.unseen = vec!["hflip".into()];
        cfg.pairs_per_task = 4;
        cfg.holdout = 1;
        cfg.cap = 8;
        cfg.resolution = 8;
        cfg.parallel = i >= 2;
        build_dataset(&cfg).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        collect_tree(dir.path(), dir.path(), &mut files);
        files.sort();
        snapshots.push(files);
    }
    for s in &snapshots[1..] {
        assert_eq!(&snapshots[0], s, "generation is not byte-deterministic");
    }
    println!(
        "combinatorics: counts match brute force for n in 2..=20, trees byte-identical \
         across reruns and serial/parallel"
    );
}

fn collect_tree(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_tree(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}

#[test]
fn metric_oracles_match_brute_force() {
    let _gate = gate();
    let mut rng = Rng::seed(321);
    for case in 0..1000 {
        let len = 16usize; // 4x4 maps

        // edges: exact precision/recall/f1 by counting
        let pred: Vec<u8> = (0..len).map(|_| rng.bernoulli(0.35) as u8).collect();
        let gt: Vec<u8> = (0..len).map(|_| rng.bernoulli(0.35) as u8).collect();
        let (p, r, f) = metrics::edge_prf(&pred, &gt).unwrap();
        let tp = pred.iter().zip(&gt).filter(|(a, b)| **a == 1 && **b == 1).count() as f64;
        let pp = pred.iter().filter(|a| **a == 1).count() as f64;
        let gp = gt.iter().filter(|b| **b == 1).count() as f64;
        let op = if pp == 0.0 { if gp == 0.0 { 1.0 } else { 0.0 } } else { tp / pp };
        let orc = if gp == 0.0 { if pp == 0.0 { 1.0 } else { 0.0 } } else { tp / gp };
        let of = if op + orc == 0.0 { 0.0 } else { 2.0 * op * orc / (op + orc) };
        assert_eq!((p, r, f), (op, orc, of), "edge_prf diverged on case {case}");

        // segmentation: confusion-matrix oracle
        let classes = 3usize;
        let pred_s: Vec<usize> = (0..len).map(|_| rng.below(classes)).collect();
        let gt_s: Vec<usize> = (0..len).map(|_| rng.below(classes)).collect();
        let (pix, mean_acc, miou) = metrics::seg_scores(&pred_s, &gt_s, classes).unwrap();
        let mut conf = vec![vec![0usize; classes]; classes];
        for (pc, gc) in pred_s.iter().zip(&gt_s) {
            conf[*gc][*pc] += 1;
        }
        let diag: usize = (0..classes).map(|c| conf[c][c]).sum();
        let opix = diag as f64 / len as f64;
        let mut accs = Vec::new();
        let mut ious = Vec::new();
        for c in 0..classes {
            let gt_count: usize = conf[c].iter().sum();
            let pred_count: usize = (0..classes).map(|g| conf[g][c]).sum();
            if gt_count > 0 {
                accs.push(conf[c][c] as f64 / gt_count as f64);
            }
            let union = gt_count + pred_count - conf[c][c];
            if union > 0 {
                ious.push(conf[c][c] as f64 / union as f64);
            }
        }
        let omean = accs.iter().sum::<f64>() / accs.len() as f64;
        let oiou = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!((pix, mean_acc, miou), (opix, omean, oiou), "seg_scores diverged on case {case}");

        // depth: strict-threshold counting
        let pd: Vec<f64> = (0..len).map(|_| rng.uniform() * 2.0 + 0.05).collect();
        let gd: Vec<f64> = (0..len).map(|_| rng.uniform() * 2.0 + 0.05).collect();
        let d1 = metrics::depth_delta1(&pd, &gd, metrics::DEPTH_DELTA).unwrap();
        let hits = pd
            .iter()
            .zip(&gd)
            .filter(|(a, b)| (*a / *b).max(*b / *a) < metrics::DEPTH_DELTA)
            .count();
        assert_eq!(d1, hits as f64 / len as f64, "depth_delta1 diverged on case {case}");

        // normals: angle statistics and threshold accuracies; replay the
        // documented renormalization so angles are bitwise comparable
        let mut unit = || loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        };
        let pn: Vec<[f64; 3]> = (0..len).map(|_| unit()).collect();
        let gn: Vec<[f64; 3]> = (0..len).map(|_| unit()).collect();
        let stats = metrics::normal_angular(&pn, &gn).unwrap();
        let renorm = |v: &[f64; 3]| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let mut angles: Vec<f64> = pn
            .iter()
            .zip(&gn)
            .map(|(a, b)| {
                let (a, b) = (renorm(a), renorm(b));
                let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                dot.clamp(-1.0, 1.0).acos().to_degrees()
            })
            .collect();
        let omean = angles.iter().sum::<f64>() / angles.len() as f64;
        assert!((stats.mean_deg - omean).abs() <= 1e-12, "normal mean diverged on case {case}");
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let omedian = if angles.len() % 2 == 1 {
            angles[angles.len() / 2]
        } else {
            (angles[angles.len() / 2 - 1] + angles[angles.len() / 2]) / 2.0
        };
        assert!(
            (stats.median_deg - omedian).abs() <= 1e-12,
            "normal median diverged on case {case}"
        );
        for (ti, thr) in metrics::NORMAL_THRESHOLDS.iter().enumerate() {
            let oacc = angles.iter().filter(|a| **a < *thr).count() as f64 / angles.len() as f64;
            assert_eq!(stats.acc[ti], oacc, "normal acc@{thr} diverged on case {case}");
        }
    }

    // hand examples
    let mut a = Image::new(2, 1);
    a.set_pixel(0, 0, [0.1, 0.1, 0.1]);
    a.set_pixel(1, 0, [0.5, 0.5, 0.5]);
    let mut b = Image::new(2, 1);
    b.set_pixel(0, 0, [0.2, 0.2, 0.2]);
    b.set_pixel(1, 0, [0.2, 0.2, 0.2]);
    let got = metrics::mse(&a, &b).unwrap();
    assert!((got - 0.045).abs() < 1e-12, "gray-pair mse example: {got}");

    let (p, r, f) = metrics::edge_prf(&[1u8, 1, 0, 0], &[1u8, 0, 1, 0]).unwrap();
    assert_eq!((p, r, f), (0.5, 0.5, 0.5));
    let (p, _, _) = metrics::edge_prf(&[0u8, 0], &[0u8, 0]).unwrap();
    assert_eq!(p, 1.0);

    let (pix, _, miou) = metrics::seg_scores(&[0usize, 0, 1, 1], &[0usize, 1, 1, 1], 2).unwrap();
    assert_eq!(pix, 0.75);
    assert!((miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

    let d1 = metrics::depth_delta1(&[1.0, 2.0, 4.0], &[1.1, 2.0, 1.0], 1.25).unwrap();
    assert!((d1 - 2.0 / 3.0).abs() < 1e-12);

    println!("metric oracles: 1000 random 4x4 instances exact, hand examples reproduce");
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let _gate = gate();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.model.resolution = 8;
    cfg.model.d_model = 16;
    cfg.model.blocks = 1;
    cfg.model.heads = 2;
    cfg.model.n_adapter = 2;
    cfg.train.steps = 20;
    cfg.train.batch = 2;
    cfg.train.checkpoint_every = 10;
    cfg.train.seed = 77;
    cfg.sample.steps = 6;
    cfg.data.ops = vec!["invert".into(), "grayscale".into(), "vflip".into()];
    cfg.data.unseen = vec!["vflip".into()];
    cfg.data.pairs_per_task = 4;
    cfg.data.cap = 6;
    cfg.data.holdout = 1;
    cfg.paths.data_dir = dir.path().join("data");
    cfg.paths.out_dir = dir.path().join("unused");
    build_dataset(&cfg.dataset_config()).unwrap();
    let data = LoadedDataset::open(&cfg.paths.data_dir).unwrap();

    // two identical full runs into different directories
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let (sess_a, rep_a) = train::train::<f32>(&cfg, &data, &out_a, None).unwrap();
    let (sess_b, rep_b) = train::train::<f32>(&cfg, &data, &out_b, None).unwrap();
    assert_eq!(
        fs::read(out_a.join("loss.csv")).unwrap(),
        fs::read(out_b.join("loss.csv")).unwrap(),
        "loss logs differ between identical runs"
    );
    assert_eq!(
        fs::read(&rep_a.final_checkpoint).unwrap(),
        fs::read(&rep_b.final_checkpoint).unwrap(),
        "final checkpoints differ between identical runs"
    );

    // identical sampled images, byte-for-byte on disk
    let rec = &data.manifest.eval_instances[0];
    let (p_src, p_tar) = data.prompt_pair(rec);
    let (q_src, _) = data.query_pair(rec);
    let img_a = editor::edit(&sess_a.model, p_src, p_tar, q_src, rec.instruction_id, 6, 0.0, 42)
        .unwrap();
    let img_b = editor::edit(&sess_b.model, p_src, p_tar, q_src, rec.instruction_id, 6, 0.0, 42)
        .unwrap();
    let ppm_a = dir.path().join("a.ppm");
    let ppm_b = dir.path().join("b.ppm");
    img_a.write_ppm(&ppm_a).unwrap();
    img_b.write_ppm(&ppm_b).unwrap();
    assert_eq!(fs::read(&ppm_a).unwrap(), fs::read(&ppm_b).unwrap(), "sampled images differ");

    // identical reports
    let sample_cfg = SampleConfig { steps: 6, guidance: 0.0 };
    let report_a = evaluate::evaluate(&sess_a.model, &data, Split::Seen, &sample_cfg, 7).unwrap();
    let report_b = evaluate::evaluate(&sess_b.model, &data, Split::Seen, &sample_cfg, 7).unwrap();
    assert_eq!(report_a.to_json(), report_b.to_json(), "reports differ");
    assert_eq!(report_a.render_text(), report_b.render_text());

    // save -> load -> save is byte-identical
    let reloaded = Snapshot::load(&rep_a.final_checkpoint).unwrap();
    let resaved = dir.path().join("resaved.bin");
    reloaded.save(&resaved).unwrap();
    assert_eq!(
        fs::read(&rep_a.final_checkpoint).unwrap(),
        fs::read(&resaved).unwrap(),
        "save/load/save changed bytes"
    );

    // picking up run A's mid-run checkpoint must finish with the bytes A
    // produced uninterrupted
    let out_c = dir.path().join("c");
    let snap = Snapshot::load(&out_a.join("ckpt_000010.bin")).unwrap();
    let resumed: Session<f32> = Session::resume(&snap).unwrap();
    let (_, rep_c) = train::run(resumed, &data, &out_c).unwrap();
    assert_eq!(
        fs::read(&rep_a.final_checkpoint).unwrap(),
        fs::read(&rep_c.final_checkpoint).unwrap(),
        "resumed run diverged from the uninterrupted one"
    );
    let a_csv = fs::read_to_string(out_a.join("loss.csv")).unwrap();
    let a_lines: Vec<&str> = a_csv.lines().collect();
    let want: String = std::iter::once(a_lines[0])
        .chain(a_lines[11..=20].iter().copied())
        .map(|l| format!("{l}\n"))
        .collect();
    let c_csv = fs::read_to_string(out_c.join("loss.csv")).unwrap();
    assert_eq!(c_csv, want, "resumed loss rows diverge from the uninterrupted run");
    println!("determinism: logs, checkpoints, images, and reports identical; resume matches uninterrupted");
}
