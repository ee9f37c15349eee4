//! The project's exit gate. Each test is one acceptance criterion and
//! prints a PASS line with the measured numbers (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use manetl_core::config::parse_config;
use manetl_core::image::dataset::LoadedDataset;
use manetl_core::image::ops::{invert_colors, rotate_with_fill, to_grayscale};
use manetl_core::image::pipeline::{self, Preprocess};
use manetl_core::image::{GrayImage, RgbImage};
use manetl_core::model::cost::{format_millions, reference_reduction};
use manetl_core::model::{composed_gradient_check, AttentionParams, ModelConfig, Variant};
use manetl_core::params::ParamStore;
use manetl_core::tensor::gradcheck::check_primitives;
use manetl_core::tensor::{ConvSpec, Mode, Tape, Tensor};
use manetl_core::train::{run_ablation, to_csv, TrainConfig, Trainer};

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSED_TOL: f64 = 1e-3;
const CONV_TOL: f64 = 1e-6;
const GRADIENT_SEEDS: u64 = 10;
const GATE_TRIALS: u64 = 10_000;

#[test]
fn mac_counts_match_the_hand_worked_integers() {
    let cmp = reference_reduction().unwrap();
    assert_eq!(cmp.direct, 112_896_000);
    assert_eq!(cmp.reduced, 5_268_480);
    assert_eq!(format_millions(cmp.direct), "112.9M");
    assert_eq!(format_millions(cmp.reduced), "5.3M");

    // The command itself must emit the same numbers.
    let out = Command::new(env!("CARGO_BIN_EXE_manetl")).arg("macs").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for token in ["112896000", "112.9M", "5268480", "5.3M"] {
        assert!(text.contains(token), "macs output missing `{token}`:\n{text}");
    }
    println!(
        "PASS macs: direct {} ({}) vs reduced {} ({})",
        cmp.direct,
        format_millions(cmp.direct),
        cmp.reduced,
        format_millions(cmp.reduced)
    );
}

#[test]
fn every_gradient_matches_finite_differences() {
    let started = Instant::now();

    let mut worst_primitive = 0.0f64;
    for seed in 0..GRADIENT_SEEDS {
        for check in check_primitives(seed).unwrap() {
            assert!(
                check.max_rel_err < PRIMITIVE_TOL,
                "primitive `{}` at seed {seed}: rel err {:.3e}",
                check.name,
                check.max_rel_err
            );
            worst_primitive = worst_primitive.max(check.max_rel_err);
        }
    }

    let config = ModelConfig::tiny();
    let mut worst_composed = 0.0f64;
    for seed in 0..GRADIENT_SEEDS {
        let report = composed_gradient_check(&config, seed, 4).unwrap();
        let worst = report.worst().expect("parameters present");
        assert!(
            report.passes(COMPOSED_TOL),
            "composed check at seed {seed}: `{}` rel err {:.3e}",
            worst.name,
            worst.max_rel_err
        );
        worst_composed = worst_composed.max(report.max_rel_err);
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s, budget is 60s");
    println!(
        "PASS gradients: primitives {worst_primitive:.2e} (< {PRIMITIVE_TOL:.0e}), \
         composed {worst_composed:.2e} (< {COMPOSED_TOL:.0e}), \
         {GRADIENT_SEEDS} seeds in {elapsed:.1}s"
    );
}

/// Plain six-loop convolution, written independently of the tensor code.
fn oracle_conv(
    input: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> Vec<f64> {
    let (oh, ow) = spec.out_hw(h, w).unwrap();
    let cout = spec.out_channels;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..cin {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let x = input
                                    [((b * cin + ic) * h + iy as usize) * w + ix as usize];
                                let k = weight[((oc * cin + ic) * spec.kernel_h + ky)
                                    * spec.kernel_w
                                    + kx];
                                acc += x * k;
                            }
                        }
                    }
                    out[((b * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn optimized_conv_matches_the_nested_loop_oracle() {
    let (n, cin, cout, h, w) = (2, 3, 4, 7, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut combos = 0;
    let mut max_err = 0.0f64;
    for kernel in [1, 3, 5] {
        for stride in [1, 2, 3] {
            for padding in [0, 1, 2] {
                let spec = ConvSpec::new(cin, cout, kernel, stride, padding);
                let x: Vec<f64> =
                    (0..n * cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                let wgt: Vec<f64> = (0..cout * cin * kernel * kernel)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();

                let mut tape: Tape<f64> = Tape::new(Mode::Eval);
                let xv = tape.leaf(Tensor::new(vec![n, cin, h, w], x.clone()).unwrap());
                let wv = tape
                    .leaf(Tensor::new(vec![cout, cin, kernel, kernel], wgt.clone()).unwrap());
                let bv = tape.leaf(Tensor::new(vec![cout], b.clone()).unwrap());
                let out = tape.conv2d(xv, wv, bv, &spec).unwrap();

                let expected = oracle_conv(&x, (n, cin, h, w), &wgt, &b, &spec);
                let got = tape.value(out).data();
                assert_eq!(got.len(), expected.len());
                for (i, (g, e)) in got.iter().zip(&expected).enumerate() {
                    let err = (g - e).abs();
                    assert!(
                        err <= CONV_TOL,
                        "k{kernel} s{stride} p{padding} elem {i}: {g} vs {e}"
                    );
                    max_err = max_err.max(err);
                }
                combos += 1;
            }
        }
    }
    assert_eq!(combos, 27);
    println!("PASS conv oracle: {combos} kernel/stride/padding combos, max abs err {max_err:.2e}");
}

#[test]
fn preprocessing_is_exact_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Color inversion undoes itself bit for bit.
    let rgb: Vec<u8> = (0..9 * 7 * 3).map(|_| rng.random_range(0..=255)).collect();
    let image = RgbImage::new(9, 7, rgb).unwrap();
    assert_eq!(invert_colors(&invert_colors(&image)).data, image.data);

    // A gray pixel stays at its own level through the grayscale transform.
    let levels: Vec<u8> = (0..=255).collect();
    let flat: Vec<u8> = levels.iter().flat_map(|&g| [g, g, g]).collect();
    let gray = to_grayscale(&RgbImage::new(16, 16, flat).unwrap());
    assert_eq!(gray.data, levels);

    // Zero-angle rotation is the identity.
    let pixels: Vec<u8> = (0..13 * 11).map(|_| rng.random_range(0..=255)).collect();
    let plate = GrayImage::new(13, 11, pixels).unwrap();
    assert_eq!(rotate_with_fill(&plate, 0.0, 255).data, plate.data);

    // The full pipeline is a pure function of image and options.
    let opts = Preprocess::standard(Some(4));
    let a = pipeline::run(&image, &opts);
    let b = pipeline::run(&image, &opts);
    assert!(a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())));

    // Dataset materialization is too, including augmentation.
    let load = || {
        LoadedDataset::from_synthetic(2, 6, 9, 0.8, &Preprocess::standard(None), true).unwrap().1
    };
    let (first, second) = (load(), load());
    assert_eq!(first.inputs.len(), second.inputs.len());
    for (x, y) in first.inputs.iter().zip(&second.inputs) {
        assert!(x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())));
    }

    println!("PASS preprocessing: involution, gray identity, zero rotation, determinism");
}

#[test]
fn checkpoints_round_trip_and_resume_reproduces_the_straight_run() {
    let (_, data) =
        LoadedDataset::from_synthetic(3, 10, 3, 0.8, &Preprocess::standard(None), true).unwrap();
    let model = ModelConfig::new(3, Variant::Ensemble);
    let full = TrainConfig { epochs: 4, batch_size: 8, seed: 3, ..TrainConfig::default() };

    let mut straight = Trainer::new(model.clone(), full.clone()).unwrap();
    let straight_records = straight.train(&data, |_| {}).unwrap();

    let mut first = Trainer::new(
        model.clone(),
        TrainConfig { epochs: 2, ..full.clone() },
    )
    .unwrap();
    first.train(&data, |_| {}).unwrap();
    let bytes = first.capture_checkpoint("acceptance").to_bytes();

    // Byte-level round trip.
    let snapshot = manetl_core::train::Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(snapshot.to_bytes(), bytes, "re-serialization must be bit-identical");

    // Resuming finishes the run exactly as the uninterrupted one did; the
    // wrong seed here must be overridden by the one in the snapshot.
    let resumed_config = TrainConfig { seed: 999, ..full.clone() };
    let mut resumed = Trainer::resume(model, resumed_config, &snapshot).unwrap();
    let resumed_records = resumed.train(&data, |_| {}).unwrap();

    assert_eq!(to_csv(&straight_records[2..]), to_csv(&resumed_records));
    for key in straight.store.trainable_keys() {
        let a = straight.store.tensor(key).data();
        let b = resumed.store.tensor(key).data();
        assert!(a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())));
    }
    println!("PASS checkpoint: bit-exact round trip, resume matches the straight run");
}

#[test]
fn desk_scale_ablation_hits_the_accuracy_bar() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.cfg");
    let spec = parse_config(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!(spec.train.epochs <= 30, "budget is 30 epochs, config asks {}", spec.train.epochs);
    assert_eq!(spec.train.seed, TrainConfig::default().seed, "must run on the default seed");
    assert_eq!((spec.synthetic_classes, spec.synthetic_per_class), (10, 100));

    let started = Instant::now();
    let (_, data) = LoadedDataset::from_synthetic(
        spec.synthetic_classes,
        spec.synthetic_per_class,
        spec.train.seed,
        spec.train_fraction,
        &Preprocess::standard(None),
        true,
    )
    .unwrap();
    let rows = run_ablation(&data, &spec.model, &spec.train, |variant, record| {
        println!(
            "{variant:<9} epoch {:>2}: train {:.3} eval {:.3}",
            record.epoch, record.train_accuracy, record.eval_accuracy
        );
    })
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    for row in &rows {
        let peak = row.records.iter().map(|r| r.eval_accuracy).fold(0.0, f64::max);
        assert!(peak >= 0.95, "{} peaked at {peak:.4}, bar is 0.95", row.variant);
        println!(
            "{:<9} peak {peak:.4} final {:.4} ({} trainable scalars)",
            row.variant.to_string(),
            row.final_eval_accuracy(),
            row.trainable_scalars
        );
    }
    let best_single = rows
        .iter()
        .filter(|r| r.variant != Variant::Ensemble)
        .map(|r| r.final_eval_accuracy())
        .fold(0.0, f64::max);
    let ensemble = rows
        .iter()
        .find(|r| r.variant == Variant::Ensemble)
        .unwrap()
        .final_eval_accuracy();
    assert!(
        ensemble >= best_single - 0.02 - 1e-9,
        "ensemble finished at {ensemble:.4}, best single branch at {best_single:.4}"
    );
    assert!(elapsed < 900.0, "ablation took {elapsed:.0}s, budget is 900s");
    println!(
        "PASS ablation: ensemble {ensemble:.4} vs best single {best_single:.4} in {elapsed:.0}s"
    );
}

#[test]
fn attention_gates_are_neutral_zeroing_and_nonnegative() {
    let channels = 16;
    let shape = vec![2, channels, 3, 3];
    let numel = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store: ParamStore<f64> = ParamStore::new();
    let attention = AttentionParams::register(&mut store, "attention", channels, &mut rng).unwrap();
    let x: Vec<f64> = (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect();

    // With the neutral parameterization the block is an exact identity.
    attention.set_neutral(&mut store);
    let mut tape: Tape<f64> = Tape::new(Mode::Eval);
    let xv = tape.leaf(Tensor::new(shape.clone(), x.clone()).unwrap());
    let (out, gates) = attention.forward(&mut tape, &mut store, xv).unwrap();
    assert!(tape.value(out).data().iter().map(|v| v.to_bits()).eq(x.iter().map(|v| v.to_bits())));
    assert!(tape.value(gates).data().iter().all(|&g| g == 1.0));

    // Zeroing one channel's gate kills that channel's value and gradient.
    store.tensor_mut(attention.fc2.bias).data_mut()[0] = 0.0;
    let mut tape: Tape<f64> = Tape::new(Mode::Eval);
    let xv = tape.leaf(Tensor::new(shape.clone(), x.clone()).unwrap());
    let (out, _) = attention.forward(&mut tape, &mut store, xv).unwrap();
    let loss = tape.sum_all(out);
    tape.backward(loss, &mut store).unwrap();
    let per_channel = 9;
    let values = tape.value(out).data().to_vec();
    let grads = tape.grad(xv).unwrap();
    for sample in 0..2 {
        for c in 0..channels {
            let start = (sample * channels + c) * per_channel;
            for i in start..start + per_channel {
                if c == 0 {
                    assert_eq!(values[i], 0.0);
                    assert_eq!(grads[i], 0.0);
                } else {
                    assert_eq!(values[i], x[i]);
                    assert_eq!(grads[i], 1.0);
                }
            }
        }
    }

    // Gates never go negative, whatever the weights and inputs.
    let mut checked = 0usize;
    for trial in 0..GATE_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut store: ParamStore<f64> = ParamStore::new();
        let attention =
            AttentionParams::register(&mut store, "attention", channels, &mut rng).unwrap();
        let x: Vec<f64> =
            (0..2 * channels * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape: Tape<f64> = Tape::new(Mode::Eval);
        let xv = tape.leaf(Tensor::new(vec![2, channels, 2, 2], x).unwrap());
        let (_, gates) = attention.forward(&mut tape, &mut store, xv).unwrap();
        for &g in tape.value(gates).data() {
            assert!(g >= 0.0, "negative gate {g} at trial {trial}");
            checked += 1;
        }
    }
    println!(
        "PASS attention: neutral identity, per-channel zeroing, {checked} gates >= 0 \
         over {GATE_TRIALS} trials"
    );
}

#[test]
fn identical_runs_write_byte_identical_metrics_files() {
    let run = || {
        let (_, data) =
            LoadedDataset::from_synthetic(3, 8, 11, 0.8, &Preprocess::standard(None), true)
                .unwrap();
        let config = TrainConfig { epochs: 2, batch_size: 8, seed: 11, ..TrainConfig::default() };
        let mut trainer = Trainer::new(ModelConfig::new(3, Variant::Ensemble), config).unwrap();
        let records = trainer.train(&data, |_| {}).unwrap();
        (data.fingerprint, to_csv(&records))
    };
    let (fp_a, csv_a) = run();
    let (fp_b, csv_b) = run();
    assert_eq!(fp_a, fp_b, "same generator inputs must fingerprint identically");

    let dir = tempfile::tempdir().unwrap();
    let (path_a, path_b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&path_a, &csv_a).unwrap();
    fs::write(&path_b, &csv_b).unwrap();
    assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
    println!("PASS determinism: identical seed/config/dataset gave byte-identical metrics");
}
