//! Train on a 16-sample synthetic corpus and score the training set.
//!
//! `cargo run --release --example overfit -- [steps] [lr] [seed] [full|direct] [accumulation] [warmup]`

use std::time::Instant;

use report_grounding::report::evaluate;
use report_grounding::synth::{generate_corpus, CorpusConfig};
use report_grounding::trainer::{encode_samples, fit, predict, FitOutputs, TrainConfig};
use report_grounding::vocab::build_vocab;
use report_grounding::{GroundingModel, ModelConfig};

fn main() -> report_grounding::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(500, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(5e-5, |s| s.parse().unwrap());
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().unwrap());
    let direct = args.get(4).is_some_and(|s| s == "direct");
    let accum: usize = args.get(5).map_or(10, |s| s.parse().unwrap());
    let warm: usize = args.get(6).map_or(100, |s| s.parse().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_corpus(
        &CorpusConfig {
            seed,
            ..Default::default()
        },
        dir.path(),
    )?;
    let vocab = build_vocab(samples.iter().map(|s| s.report.as_str()));
    let mut cfg = ModelConfig {
        seed,
        ..Default::default()
    };
    cfg.vision.direct_from_embedding = direct;
    let model = GroundingModel::new(cfg, vocab)?;
    println!("params {}", model.num_params());
    let enc = encode_samples(&model, &samples, dir.path())?;
    let tc = TrainConfig {
        total_steps: steps,
        lr,
        seed,
        eval_every: 50,
        warmup_steps: warm.min(steps),
        accumulation_steps: accum,
        ..Default::default()
    };
    let t = Instant::now();
    let state = fit(&model, &enc, &enc, &tc, &FitOutputs::default())?;
    for e in state.history.iter().step_by(25) {
        println!(
            "{} lp {:.3} l1 {:.3} giou {:.3} lr {:.2e}",
            e.step, e.l_p, e.l_l1, e.l_giou, e.lr
        );
    }
    println!("evals {:?}", state.evaluations);
    let preds = predict(&model, &enc)?;
    let ev = evaluate(&preds, &samples)?;
    println!("{}", ev.report().table());
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
