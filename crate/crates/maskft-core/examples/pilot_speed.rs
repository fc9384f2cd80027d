// pilot: step timing for default and small configs
use maskft_core::corpus::{generate, DomainName, DomainSpec};
use maskft_core::model::{ModelParams, TransformerConfig};
use maskft_core::trainer::{run_fft, TrainPlan};
use std::time::Instant;

fn main() {
    let spec = DomainSpec { n_train: 64, n_val: 32, n_test: 32, ..DomainSpec::new(DomainName::Arith, 7) };
    let data = generate(&spec).unwrap();

    for (tag, cfg) in [
        ("default 8L/d128/ff512", TransformerConfig::default()),
        ("small 4L/d64/ff256", TransformerConfig { n_layers: 4, d_model: 64, n_heads: 4, d_ff: 256, vocab_size: 256, max_seq_len: 64 }),
        ("tiny 2L/d32/ff128", TransformerConfig { n_layers: 2, d_model: 32, n_heads: 2, d_ff: 128, vocab_size: 256, max_seq_len: 32 }),
    ] {
        let params = ModelParams::init(&cfg, 1).unwrap();
        let plan = TrainPlan { epochs: 1, eval_every: 1000, ..TrainPlan::fft(1, 1e-3, 0) };
        let t0 = Instant::now();
        let out = run_fft(&params, &data.train, &data.val, &plan).unwrap();
        let steps = out.record.train_loss.len();
        println!("{tag}: {} steps in {:.2}s ({:.3}s/step), loss {:.3} -> {:.3}",
            steps, t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64()/steps as f64,
            out.record.train_loss.first().unwrap(), out.record.train_loss.last().unwrap());
    }
}
