//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 4 8`.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, IndexOp, Tensor};
use rand::Rng;
use report_grounding::box_math::{ap_at, giou_loss, smooth_l1};
use report_grounding::checkpoint;
use report_grounding::domain::{
    load_dataset, load_predictions, save_dataset, save_predictions, split_by_patient,
};
use report_grounding::grounding::{box_from_raw, raw_gradient};
use report_grounding::phrase_model::{teacher_forced, PhraseModel, PhraseModelConfig};
use report_grounding::report::{evaluate, Evaluation};
use report_grounding::synth::{generate_corpus, generate_samples, CorpusConfig};
use report_grounding::text_metrics::{bleu_n, cider, rouge_l};
use report_grounding::trainer::{encode_samples, fit, predict, FitOutputs, TrainConfig};
use report_grounding::vocab::{build_vocab, Vocabulary};
use report_grounding::{box_loss, giou, iou, BoundingBox, GroundingModel, ModelConfig, Prediction};

use common::fd::{away_from_kinks, central_diff, from_array, sample_pairs, vec_rel_err, POINTS};
use common::raster::raster_areas;
use common::text_oracle::{corpus, oracle_bleu, oracle_cider, oracle_rouge};
use common::{random_box, rng};

// Criterion 1
const RASTER_PAIRS: usize = 200;
const RASTER_TOL: f64 = 2e-3;
const HAND_TOL: f64 = 1e-9;
const GEOMETRY_BUDGET: Duration = Duration::from_secs(30);
// Criterion 2
const FD_TOL: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
// Criterion 3
const TEXT_TOL: f64 = 1e-9;
const TEXT_BUDGET: Duration = Duration::from_secs(10);
// Criterion 4
const AP_SETS: usize = 1000;
// Criterion 6
const OVERFIT_SEEDS: [u64; 3] = [0, 1, 2];
const OVERFIT_STEPS: usize = 500;
const OVERFIT_MIOU: f64 = 0.75;
const OVERFIT_AP50: f64 = 0.6;
const OVERFIT_BLEU1: f64 = 0.9;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const REQUIRED_SEEDS: usize = 2;
// Criterion 7
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
// Criterion 8
const SPLIT_PATIENTS: usize = 867;
const SPLIT_COUNTS: [usize; 3] = [607, 86, 174];

/// The 16-sample benchmark corpus is generated from this seed regardless of
/// the training seed.
const CORPUS_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn geometry() -> Outcome {
    let t = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..RASTER_PAIRS {
        let a = random_box(&mut r, 0.05);
        let b = random_box(&mut r, 0.05);
        let (i, u, c) = raster_areas(&a, &b);
        let oracle_iou = i / u;
        let oracle_giou = oracle_iou - (c - u) / c;
        worst = worst
            .max((iou(&a, &b).unwrap() - oracle_iou).abs())
            .max((giou(&a, &b).unwrap() - oracle_giou).abs());
    }
    let px = |x, y, w, h| BoundingBox::pixel(x, y, w, h).unwrap();
    let hand = [
        (
            iou(&px(0.0, 0.0, 2.0, 2.0), &px(1.0, 1.0, 2.0, 2.0)).unwrap(),
            1.0 / 7.0,
        ),
        (
            giou(&px(0.0, 0.0, 2.0, 2.0), &px(1.0, 1.0, 2.0, 2.0)).unwrap(),
            -5.0 / 63.0,
        ),
        (
            giou(&px(0.0, 0.0, 1.0, 1.0), &px(2.0, 2.0, 1.0, 1.0)).unwrap(),
            -7.0 / 9.0,
        ),
    ];
    let hand_err = hand.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    Outcome::new(
        worst < RASTER_TOL && hand_err < HAND_TOL && elapsed < GEOMETRY_BUDGET,
        format!(
            "raster max err {worst:.2e} (< {RASTER_TOL:e}), hand-value err {hand_err:.1e}, {}",
            secs(elapsed)
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = [0.0f64; 4];
    let mut r = rng(202);
    let mut n = 0;
    while n < POINTS {
        let pred: [f64; 4] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let target: [f64; 4] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let beta = r.random_range(0.2..1.5);
        let kink = (0..4).any(|i| {
            let d = (pred[i] - target[i]).abs();
            (d - beta).abs() < 1e-3 || d < 1e-3
        });
        if kink {
            continue;
        }
        let (_, g) = smooth_l1(&pred, &target, beta);
        let fd = central_diff(|p| smooth_l1(p, &target, beta).0, &pred);
        worst[0] = worst[0].max(vec_rel_err(&g, &fd));
        n += 1;
    }
    for (pred, target) in sample_pairs(203) {
        let (_, g) = giou_loss(&pred, &target).unwrap();
        let fd = central_diff(
            |p| giou_loss(&from_array(p), &target).unwrap().0,
            &pred.to_array(),
        );
        worst[1] = worst[1].max(vec_rel_err(&g, &fd));
    }
    for (pred, target) in sample_pairs(204) {
        let v = box_loss(&pred, &target).unwrap();
        let fd = central_diff(
            |p| box_loss(&from_array(p), &target).unwrap().total,
            &pred.to_array(),
        );
        worst[2] = worst[2].max(vec_rel_err(&v.gradient, &fd));
    }
    let mut n = 0;
    while n < POINTS {
        let raw: [f64; 4] = std::array::from_fn(|_| r.random_range(-3.0..3.0));
        let target = random_box(&mut r, 0.05);
        let pred = box_from_raw(&raw).unwrap();
        if !away_from_kinks(&pred, &target, 1e-3) {
            continue;
        }
        let g = raw_gradient(&raw, &box_loss(&pred, &target).unwrap().gradient);
        let fd = central_diff(
            |q| box_loss(&box_from_raw(q).unwrap(), &target).unwrap().total,
            &raw,
        );
        worst[3] = worst[3].max(vec_rel_err(&g, &fd));
        n += 1;
    }
    let elapsed = t.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        max < FD_TOL && elapsed < GRADIENT_BUDGET,
        format!(
            "max rel err smooth_l1 {:.1e}, giou {:.1e}, box_loss {:.1e}, through box head {:.1e} (< {FD_TOL:e}), {}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            secs(elapsed)
        ),
    )
}

fn text_metrics() -> Outcome {
    let t = Instant::now();
    let (cands, refs) = corpus();
    let mut worst = 0.0f64;
    for (c, r) in cands.iter().zip(&refs) {
        let (c, r) = (std::slice::from_ref(c), std::slice::from_ref(r));
        for (got, want) in [
            (bleu_n(c, r, 1).unwrap(), oracle_bleu(c, r, 1)),
            (bleu_n(c, r, 2).unwrap(), oracle_bleu(c, r, 2)),
            (rouge_l(c, r).unwrap(), oracle_rouge(c, r)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    for (got, want) in [
        (
            bleu_n(&cands, &refs, 1).unwrap(),
            oracle_bleu(&cands, &refs, 1),
        ),
        (
            bleu_n(&cands, &refs, 2).unwrap(),
            oracle_bleu(&cands, &refs, 2),
        ),
        (rouge_l(&cands, &refs).unwrap(), oracle_rouge(&cands, &refs)),
        (cider(&cands, &refs).unwrap(), oracle_cider(&cands, &refs)),
    ] {
        worst = worst.max((got - want).abs());
    }
    let identity = [
        bleu_n(&refs, &refs, 1).unwrap(),
        bleu_n(&refs, &refs, 2).unwrap(),
        rouge_l(&refs, &refs).unwrap(),
    ];
    let self_sim = oracle_cider(&refs, &refs);
    let cider_id = cider(&refs, &refs).unwrap();
    let elapsed = t.elapsed();
    Outcome::new(
        worst < TEXT_TOL && identity == [1.0; 3] && (cider_id - self_sim).abs() < TEXT_TOL && elapsed < TEXT_BUDGET,
        format!(
            "max oracle err {worst:.1e} (< {TEXT_TOL:e}), identity BLEU1/BLEU2/ROUGE_L {identity:?}, CIDEr {cider_id:.6} vs self-similarity {self_sim:.6}, {}",
            secs(elapsed)
        ),
    )
}

fn ap_semantics() -> Outcome {
    let target = BoundingBox::pixel(0.0, 0.0, 10.0, 10.0).unwrap();
    let pred = BoundingBox::pixel(0.0, 0.0, 10.0, 3.0).unwrap();
    let exact = iou(&pred, &target).unwrap();
    let at_30 = ap_at(&[(Some(pred), target)], 0.3).unwrap();
    let mut r = rng(404);
    let mut violations = 0;
    for _ in 0..AP_SETS {
        let n = r.random_range(1..20);
        let pairs: Vec<_> = (0..n)
            .map(|_| {
                let t = random_box(&mut r, 0.05);
                let p = r.random_bool(0.9).then(|| random_box(&mut r, 0.05));
                (p, t)
            })
            .collect();
        let [a10, a30, a50] = [0.1, 0.3, 0.5].map(|th| ap_at(&pairs, th).unwrap());
        if !(a50 <= a30 && a30 <= a10) {
            violations += 1;
        }
    }
    Outcome::new(
        exact == 0.3 && at_30 == 0.0 && violations == 0,
        format!("IoU {exact} scores {at_30} at AP30; nesting violations {violations}/{AP_SETS}"),
    )
}

fn box_token() -> Outcome {
    let texts = [
        "There is evidence of small left pleural effusion.",
        "The heart size is normal.",
    ];
    let cfg = PhraseModelConfig::default();
    let mut m = PhraseModel::new(cfg, Vocabulary::base(texts), 0, DType::F32).unwrap();
    let mut r = rng(505);
    let prefix = {
        let v: Vec<f32> = (0..cfg.prefix_len * cfg.hidden)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(v, (cfg.prefix_len, cfg.hidden), &candle_core::Device::Cpu).unwrap()
    };
    let bits = |t: &Tensor| -> Vec<u32> {
        t.flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    let v = m.vocab().len() as u32;
    let inputs: Vec<Vec<u32>> = (0..10)
        .map(|_| (0..20).map(|_| r.random_range(1..v)).collect())
        .collect();
    let before: Vec<Vec<u32>> = inputs
        .iter()
        .map(|ids| bits(&m.forward(&prefix, ids).unwrap().0))
        .collect();
    m.extend_vocab("<BOX>").unwrap();
    let logits_kept = inputs.iter().zip(&before).all(|(ids, old)| {
        let (after, _) = m.forward(&prefix, ids).unwrap();
        bits(&after.narrow(1, 0, v as usize).unwrap()) == *old
    });

    let mut causal = true;
    let mut dims_ok = true;
    for _ in 0..10 {
        let report: Vec<u32> = (0..15).map(|_| r.random_range(4..v)).collect();
        let phrase: Vec<u32> = (0..4).map(|_| r.random_range(4..v)).collect();
        let tf = teacher_forced(m.vocab(), &report, &phrase).unwrap();
        let (_, hidden) = m.forward(&prefix, &tf.input_ids).unwrap();
        let e_box = hidden.i(tf.box_position).unwrap();
        dims_ok &= e_box.dims() == [cfg.hidden];
        let mut longer = tf.input_ids.clone();
        longer.extend((0..8).map(|_| r.random_range(0..v + 1)));
        let (_, h2) = m.forward(&prefix, &longer).unwrap();
        causal &= bits(&e_box) == bits(&h2.i(tf.box_position).unwrap());
    }
    Outcome::new(
        logits_kept && causal && dims_ok,
        format!("logits preserved bit-exactly: {logits_kept}; e_box independent of suffix: {causal}; e_box dim = {}: {dims_ok}", cfg.hidden),
    )
}

struct RunResult {
    eval: Evaluation,
    elapsed: Duration,
}

fn benchmark_corpus(dir: &Path) -> Vec<report_grounding::GroundingSample> {
    let config = CorpusConfig {
        seed: CORPUS_SEED,
        ..Default::default()
    };
    generate_corpus(&config, dir).unwrap()
}

/// Trains a default-size model on the 16-sample corpus and scores it on
/// the same samples with the final parameters.
fn overfit_run(seed: u64, config: &TrainConfig, direct: bool) -> RunResult {
    let dir = tempfile::tempdir().unwrap();
    let samples = benchmark_corpus(dir.path());
    let vocab = build_vocab(samples.iter().map(|s| s.report.as_str()));
    let mut model_cfg = ModelConfig {
        seed,
        ..Default::default()
    };
    model_cfg.vision.direct_from_embedding = direct;
    let model = GroundingModel::new(model_cfg, vocab).unwrap();
    let encoded = encode_samples(&model, &samples, dir.path()).unwrap();
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let t = Instant::now();
    fit(&model, &encoded, &[], &config, &FitOutputs::default()).unwrap();
    let preds = predict(&model, &encoded).unwrap();
    let elapsed = t.elapsed();
    RunResult {
        eval: evaluate(&preds, &samples).unwrap(),
        elapsed,
    }
}

fn overfit() -> Outcome {
    let config = TrainConfig {
        total_steps: OVERFIT_STEPS,
        ..Default::default()
    };
    assert_eq!(
        (
            config.lr,
            config.warmup_steps,
            config.accumulation_steps,
            config.micro_batch_size
        ),
        (5e-5, 100, 10, 2)
    );
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in OVERFIT_SEEDS {
        let r = overfit_run(seed, &config, false);
        let (d, p) = (r.eval.detection, r.eval.phrase);
        let ok = d.miou > OVERFIT_MIOU
            && d.ap50 > OVERFIT_AP50
            && p.bleu1 > OVERFIT_BLEU1
            && r.elapsed < OVERFIT_BUDGET;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: mIoU {:.3} AP50 {:.3} BLEU1 {:.3} in {} {}",
            d.miou,
            d.ap50,
            p.bleu1,
            secs(r.elapsed),
            if ok { "ok" } else { "miss" }
        ));
    }
    Outcome::new(
        passed >= REQUIRED_SEEDS,
        format!(
            "{passed}/{} seeds reach mIoU > {OVERFIT_MIOU}, AP50 > {OVERFIT_AP50}, BLEU1 > {OVERFIT_BLEU1} in {OVERFIT_STEPS} steps [{}]",
            OVERFIT_SEEDS.len(),
            lines.join("; ")
        ),
    )
}

/// Settings under which both grounding paths converge on the 16-sample
/// corpus.
fn convergence_config() -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        warmup_steps: 50,
        total_steps: 3000,
        accumulation_steps: 1,
        micro_batch_size: 2,
        ..Default::default()
    }
}

fn ablation() -> Outcome {
    let config = convergence_config();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in ABLATION_SEEDS {
        let full = overfit_run(seed, &config, false).eval.detection.miou;
        let direct = overfit_run(seed, &config, true).eval.detection.miou;
        wins += (full > direct) as usize;
        lines.push(format!("seed {seed}: full {full:.3} vs direct {direct:.3}"));
    }
    Outcome::new(
        wins >= REQUIRED_SEEDS,
        format!(
            "full path ahead on {wins}/{} seeds after {} steps [{}]",
            ABLATION_SEEDS.len(),
            config.total_steps,
            lines.join("; ")
        ),
    )
}

fn split_integrity() -> Outcome {
    let config = CorpusConfig {
        n_patients: SPLIT_PATIENTS,
        ..Default::default()
    };
    let samples: Vec<_> = generate_samples(&config)
        .unwrap()
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let split = split_by_patient(&samples, (7, 1, 2), 0).unwrap();
    let sets: Vec<BTreeSet<&str>> = [&split.train, &split.validation, &split.test]
        .iter()
        .map(|v| v.iter().map(|s| s.patient_id.as_str()).collect())
        .collect();
    let disjoint = sets[0].is_disjoint(&sets[1])
        && sets[0].is_disjoint(&sets[2])
        && sets[1].is_disjoint(&sets[2]);
    let counts = [sets[0].len(), sets[1].len(), sets[2].len()];
    let mut ids: Vec<&str> = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .map(|s| s.id.as_str())
        .collect();
    ids.sort_unstable();
    let mut want: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    want.sort_unstable();
    Outcome::new(
        disjoint && counts == SPLIT_COUNTS && ids == want,
        format!("patients {counts:?} (want {SPLIT_COUNTS:?}), pairwise disjoint: {disjoint}, union preserved: {}", ids == want),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        lr: 1e-3,
        warmup_steps: 2,
        total_steps: 20,
        accumulation_steps: 2,
        eval_every: 5,
        seed: 9,
        ..Default::default()
    };
    let mut logs = Vec::new();
    let mut ckpt_preds_equal = true;
    for run in 0..2 {
        let (model, enc) = common::tiny_setup(6, 9, DType::F32, dir.path());
        let log = dir.path().join(format!("log{run}.jsonl"));
        let ckpt = dir.path().join(format!("m{run}.safetensors"));
        let outputs = FitOutputs {
            checkpoint: Some(ckpt.clone()),
            log: Some(log.clone()),
        };
        fit(&model, &enc, &enc[4..], &config, &outputs).unwrap();
        logs.push(std::fs::read(&log).unwrap());
        let loaded = checkpoint::load(&ckpt).unwrap();
        ckpt_preds_equal &= predict(&model, &enc).unwrap() == predict(&loaded, &enc).unwrap();
    }
    let logs_equal = logs[0] == logs[1] && !logs[0].is_empty();

    let samples = load_dataset(dir.path().join("dataset.jsonl")).unwrap();
    let path = dir.path().join("copy.jsonl");
    save_dataset(&samples, &path).unwrap();
    let dataset_rt = load_dataset(&path).unwrap() == samples;
    let mut r = rng(909);
    let preds: Vec<Prediction> = (0..100)
        .map(|i| Prediction {
            sample_id: format!("s{i}"),
            phrase: format!("p {i}"),
            bbox: (i % 5 != 0).then(|| random_box(&mut r, 1e-3)),
        })
        .collect();
    save_predictions(&preds, &path).unwrap();
    let preds_rt = load_predictions(&path).unwrap() == preds;
    Outcome::new(
        logs_equal && ckpt_preds_equal && dataset_rt && preds_rt,
        format!(
            "loss log identical: {logs_equal}; checkpoint predictions identical: {ckpt_preds_equal}; dataset round-trip: {dataset_rt}; predictions round-trip: {preds_rt}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "geometry oracle suite", geometry),
        (2, "gradient suite", gradients),
        (3, "text-metric oracle suite", text_metrics),
        (4, "AP semantics", ap_semantics),
        (5, "<BOX> mechanism invariants", box_token),
        (6, "end-to-end overfit benchmark", overfit),
        (7, "ablation structure", ablation),
        (8, "split integrity", split_integrity),
        (9, "determinism and round-trips", determinism),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        failed += !outcome.pass as usize;
        println!(
            "{} {n}. {name}: {} ({})",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            secs(t.elapsed())
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
