// pilot: locate the overfitting regime on the train=256 arith split
use maskft_core::corpus::{generate, DomainName, DomainSpec};
use maskft_core::model::{ModelParams, TransformerConfig};
use maskft_core::trainer::{run_fft, TrainPlan};
use std::time::Instant;

fn main() {
    let spec = DomainSpec { n_train: 256, n_val: 256, n_test: 512, ..DomainSpec::new(DomainName::Arith, 9) };
    let data = generate(&spec).unwrap();

    let configs = [
        ("tiny2L/d32 lr1e-3 e120", TransformerConfig { n_layers: 2, d_model: 32, n_heads: 2, d_ff: 128, vocab_size: 256, max_seq_len: 32 }, 1e-3, 120),
        ("tiny2L/d32 lr3e-3 e60", TransformerConfig { n_layers: 2, d_model: 32, n_heads: 2, d_ff: 128, vocab_size: 256, max_seq_len: 32 }, 3e-3, 60),
        ("small4L/d64 lr1e-3 e40", TransformerConfig { n_layers: 4, d_model: 64, n_heads: 4, d_ff: 256, vocab_size: 256, max_seq_len: 64 }, 1e-3, 40),
    ];
    for (tag, cfg, lr, epochs) in configs {
        let params = ModelParams::init(&cfg, 2).unwrap();
        let plan = TrainPlan { epochs, eval_every: 20, ..TrainPlan::fft(epochs, lr, 0) };
        let t0 = Instant::now();
        let out = run_fft(&params, &data.train, &data.val, &plan).unwrap();
        let r = &out.record;
        let n = r.train_loss.len();
        println!(
            "{tag}: {} steps {:.0}s | best val {:.4} @ {} | final val {:.4} | final train {:.4}",
            n,
            t0.elapsed().as_secs_f64(),
            r.best_val_loss,
            r.best_step,
            r.final_val_loss,
            r.train_loss[n.saturating_sub(5)..].iter().sum::<f64>() / 5.0,
        );
        let pts: Vec<String> = r.evals.iter().step_by(3).map(|e| format!("{}:{:.3}", e.step, e.val_loss)).collect();
        println!("   curve: {}", pts.join(" "));
    }
}
