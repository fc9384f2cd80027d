// pilot: find K / targets where vanilla masks hurt but learned masks recover
use maskft_core::baselines::{l1_mask, random_mask, BaselineKind, BaselineSpec};
use maskft_core::corpus::{generate, DomainName, DomainSpec};
use maskft_core::mask::{IndicatorSpec, ScoreInit};
use maskft_core::model::{MaskOverlay, ModelParams, TransformerConfig};
use maskft_core::trainer::{eval_loss, run_fft, run_mft, LayerRange, TrainPlan};

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

    let theta_p = ModelParams::init(&cfg, seed).unwrap();
    let fft_plan = TrainPlan { epochs: 60, eval_every: 10, ..TrainPlan::fft(60, 1e-3, seed) };
    let fft = run_fft(&theta_p, &data.train, &data.val, &fft_plan).unwrap();
    let upper = fft.best_params;
    let fft_test = eval_loss(&upper, &data.test, window, None).unwrap();
    println!("seed {seed}: fft test {fft_test:.4}");

    for (tag, layers, k) in [
        ("L0-1 k0.1", LayerRange { start: 0, end: 2 }, 0.1),
        ("L0-1 k0.2", LayerRange { start: 0, end: 2 }, 0.2),
        ("L0-1 k0.3", LayerRange { start: 0, end: 2 }, 0.3),
        ("L0 k0.2", LayerRange { start: 0, end: 1 }, 0.2),
    ] {
        let targets = upper.maskable_paths(layers.as_range()).unwrap();
        let l1 = l1_mask(&upper, &BaselineSpec { kind: BaselineKind::L1, k, targets: targets.clone(), seed: 0 }).unwrap();
        let rnd = random_mask(&upper, &BaselineSpec { kind: BaselineKind::Random, k, targets: targets.clone(), seed }).unwrap();
        let l1_test = eval_loss(&upper, &data.test, window, Some(MaskOverlay::Fixed(&l1))).unwrap();
        let rnd_test = eval_loss(&upper, &data.test, window, Some(MaskOverlay::Fixed(&rnd))).unwrap();
        println!("  {tag}: l1 {l1_test:.4} ({:+.4}) random {rnd_test:.4} ({:+.4})", l1_test - fft_test, rnd_test - fft_test);

        for (init, lr, epochs) in [
            (ScoreInit::WeightMagnitude, 1e-2, 40),
            (ScoreInit::WeightMagnitude, 3e-2, 40),
            (ScoreInit::UniformRandom, 1e-2, 40),
        ] {
            let plan = TrainPlan {
                eval_every: 5,
                score_init: Some(init),
                ..TrainPlan::mft(epochs, lr, seed, layers, IndicatorSpec::Ratio { k })
            };
            let mft = run_mft(&upper, &data.train, &data.val, &plan).unwrap();
            let mft_test = eval_loss(&upper, &data.test, window, Some(MaskOverlay::Fixed(&mft.best_mask))).unwrap();
            // how far did the best mask move from the initial one?
            let init_mask = maskft_core::mask::init_scores(&upper, &targets, IndicatorSpec::Ratio { k }, init, seed)
                .unwrap()
                .apply_indicator()
                .unwrap();
            let mut flips = 0usize;
            let mut total = 0usize;
            for t in &targets {
                let a = init_mask.bits(t).unwrap();
                let b = mft.best_mask.bits(t).unwrap();
                total += a.len();
                flips += a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
            }
            println!(
                "    mft {init:?} lr {lr:.0e} e{epochs}: test {mft_test:.4} ({:+.4}) best@{} flips {:.1}%",
                mft_test - fft_test,
                mft.record.best_step,
                100.0 * flips as f64 / total as f64
            );
        }
    }
}
