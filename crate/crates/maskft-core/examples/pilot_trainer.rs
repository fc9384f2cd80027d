// pilot: dynamics checks for trainer thresholds
use maskft_core::corpus::{generate, DomainName, DomainSpec};
use maskft_core::model::{ModelParams, TransformerConfig};
use maskft_core::trainer::{run_continued_fft, run_fft, Stage, TrainPlan};
use std::time::Instant;

fn tiny() -> TransformerConfig {
    TransformerConfig { n_layers: 2, d_model: 32, n_heads: 2, d_ff: 128, vocab_size: 256, max_seq_len: 32 }
}

fn main() {
    // 1) moving-average monotonicity over >= 50 steps on a 64-seq corpus
    let spec = DomainSpec { n_train: 64, n_val: 32, n_test: 32, ..DomainSpec::new(DomainName::Arith, 7) };
    let data = generate(&spec).unwrap();
    let params = ModelParams::init(&tiny(), 1).unwrap();
    let plan = TrainPlan { epochs: 20, eval_every: 1000, ..TrainPlan::fft(20, 1e-3, 0) };
    let t0 = Instant::now();
    let out = run_fft(&params, &data.train, &data.val, &plan).unwrap();
    let tl = &out.record.train_loss;
    println!("MA check: {} steps in {:.1}s", tl.len(), t0.elapsed().as_secs_f64());
    let ma: Vec<f64> = tl.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let violations = ma.windows(2).filter(|p| p[1] >= p[0]).count();
    println!("  MA points {}, violations {}", ma.len(), violations);
    println!("  first {:.4} last {:.4}", ma.first().unwrap(), ma.last().unwrap());

    // 2) 30% improvement on arith with a short run
    let spec = DomainSpec { n_train: 256, n_val: 128, n_test: 128, ..DomainSpec::new(DomainName::Arith, 9) };
    let data = generate(&spec).unwrap();
    let params = ModelParams::init(&tiny(), 2).unwrap();
    let base = maskft_core::trainer::eval_loss(&params, &data.val, 33, None).unwrap();
    let plan = TrainPlan { epochs: 6, eval_every: 10, ..TrainPlan::fft(6, 1e-3, 0) };
    let t0 = Instant::now();
    let out = run_fft(&params, &data.train, &data.val, &plan).unwrap();
    println!(
        "30% check: base {:.3} best {:.3} (ratio {:.3}) steps {} in {:.1}s",
        base,
        out.record.best_val_loss,
        out.record.best_val_loss / base,
        out.record.train_loss.len(),
        t0.elapsed().as_secs_f64()
    );

    // 3) overfit-prone split: continued FFT should not improve val
    let plan = TrainPlan { epochs: 30, eval_every: 5, ..TrainPlan::fft(30, 1e-3, 0) };
    let t0 = Instant::now();
    let fft = run_fft(&params, &data.train, &data.val, &plan).unwrap();
    let cplan = TrainPlan { stage: Stage::ContinuedFft, epochs: 30, eval_every: 5, ..TrainPlan::fft(30, 1e-3, 1) };
    let cont = run_continued_fft(&fft.best_params, &data.train, &data.val, &cplan).unwrap();
    println!(
        "overfit check in {:.1}s: fft best {:.4} (step {}), fft final {:.4}; cont final {:.4} best {:.4}",
        t0.elapsed().as_secs_f64(),
        fft.record.best_val_loss,
        fft.record.best_step,
        fft.record.final_val_loss,
        cont.record.final_val_loss,
        cont.record.best_val_loss
    );
}
