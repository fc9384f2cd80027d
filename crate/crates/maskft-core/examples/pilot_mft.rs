// pilot: MFT vs FFT upper bound on the overfit-prone arith split
use maskft_core::corpus::{generate, DomainName, DomainSpec};
use maskft_core::mask::IndicatorSpec;
use maskft_core::model::{MaskOverlay, ModelParams, TransformerConfig};
use maskft_core::trainer::{eval_loss, run_continued_fft, run_fft, run_mft, LayerRange, Stage, TrainPlan};
use std::time::Instant;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0u64);
    let cfg = TransformerConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        vocab_size: 256,
        max_seq_len: 32,
    };
    let spec = DomainSpec {
        n_train: 256,
        n_val: 256,
        n_test: 512,
        ..DomainSpec::new(DomainName::Arith, 1000 + seed)
    };
    let data = generate(&spec).unwrap();
    let window = 33;

    let t0 = Instant::now();
    let theta_p = ModelParams::init(&cfg, seed).unwrap();
    let fft_plan = TrainPlan { epochs: 60, eval_every: 10, ..TrainPlan::fft(60, 1e-3, seed) };
    let fft = run_fft(&theta_p, &data.train, &data.val, &fft_plan).unwrap();
    let upper = fft.best_params;

    let cont_plan = TrainPlan {
        stage: Stage::ContinuedFft,
        epochs: 40,
        eval_every: 10,
        ..TrainPlan::fft(40, 1e-3, seed + 1)
    };
    let cont = run_continued_fft(&upper, &data.train, &data.val, &cont_plan).unwrap();

    let fft_test = eval_loss(&upper, &data.test, window, None).unwrap();
    let cont_test = eval_loss(&cont.final_params, &data.test, window, None).unwrap();
    println!(
        "seed {seed}: fft best val {:.4} | test: fft {:.4} cont {:.4} | setup {:.0}s",
        fft.record.best_val_loss,
        fft_test,
        cont_test,
        t0.elapsed().as_secs_f64()
    );

    for (layers, k, lr, epochs) in [
        (LayerRange { start: 0, end: 1 }, 0.05, 1e-2, 20),
        (LayerRange { start: 0, end: 1 }, 0.1, 1e-2, 20),
        (LayerRange { start: 1, end: 2 }, 0.1, 1e-2, 20),
        (LayerRange { start: 0, end: 2 }, 0.1, 1e-2, 20),
        (LayerRange { start: 0, end: 1 }, 0.1, 3e-2, 20),
        (LayerRange { start: 0, end: 2 }, 0.05, 1e-2, 40),
    ] {
        let t1 = Instant::now();
        let plan = TrainPlan {
            eval_every: 5,
            ..TrainPlan::mft(epochs, lr, seed, layers, IndicatorSpec::Ratio { k })
        };
        let mft = run_mft(&upper, &data.train, &data.val, &plan).unwrap();
        let mft_test = eval_loss(&upper, &data.test, window, Some(MaskOverlay::Fixed(&mft.best_mask))).unwrap();
        println!(
            "  mft layers {}..{} k {:.2} lr {:.0e} e{epochs}: best val {:.4} @ {} | test {:.4} ({}) {:.0}s",
            layers.start,
            layers.end,
            k,
            lr,
            mft.record.best_val_loss,
            mft.record.best_step,
            mft_test,
            if mft_test < fft_test { "BEATS fft" } else { "worse" },
            t1.elapsed().as_secs_f64()
        );
    }
}
