mod common;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use vcnn::arith::ArithMode;
use vcnn::conv::enumerate_valid_g;
use vcnn::modelio::{load_image, parse_model, write_model, write_ppm, RgbImage};
use vcnn::network::{forward, forward_sequential, shape_check, GranularityPlan, NetworkDef};
use vcnn::pool::WorkerPool;
use vcnn::synth::{random_input, random_model};
use vcnn::tuner::{tune_network_cached, TuneTable};

use common::micro_model;

#[test]
fn squeezenet_output_is_a_distribution() {
    let model = random_model(NetworkDef::squeezenet_v1_0(), 11).unwrap();
    let x = random_input(model.def(), 12);
    let pool = WorkerPool::new(2).unwrap();
    let out = forward(&pool, &model, &x, &GranularityPlan::new(), ArithMode::Strict).unwrap();
    let p = out.probabilities.as_ref().unwrap();
    assert_eq!(p.len(), 1000);
    let sum: f64 = p.iter().map(|&v| v as f64).sum();
    assert!((sum - 1.0).abs() < 1e-4, "sum {sum}");
    assert_eq!(out.timings.len(), model.def().nodes.len());
    assert_eq!(out.top_k(5).len(), 5);
}

#[test]
fn vectorized_network_tracks_sequential_oracle() {
    let model = random_model(NetworkDef::squeezenet_v1_0(), 21).unwrap();
    let x = random_input(model.def(), 22);
    let pool = WorkerPool::new(2).unwrap();
    let fast = forward(&pool, &model, &x, &GranularityPlan::new(), ArithMode::Strict).unwrap();
    let slow = forward_sequential(&model.to_sequential(), &x).unwrap();
    let scale = slow.logits.iter().fold(1.0f32, |m, v| m.max(v.abs()));
    let err = fast
        .logits
        .iter()
        .zip(&slow.logits)
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-5 * scale, "err {err}, scale {scale}");
    assert_eq!(fast.argmax(), slow.argmax());
}

#[test]
fn any_two_valid_plans_agree_bitwise() {
    let model = random_model(NetworkDef::squeezenet_v1_0(), 31).unwrap();
    let x = random_input(model.def(), 32);
    let pool = WorkerPool::new(2).unwrap();
    let mut rng = StdRng::seed_from_u64(33);
    let mut reference = None;
    for _ in 0..3 {
        let mut plan = GranularityPlan::new();
        for (id, bank) in model.banks() {
            let gs = enumerate_valid_g(bank.spec().out_layers);
            plan.set(id, gs[rng.random_range(0..gs.len())]);
        }
        plan.validate(model.def()).unwrap();
        let out = forward(&pool, &model, &x, &plan, ArithMode::Strict).unwrap();
        let bits: Vec<u32> = out.logits.iter().map(|v| v.to_bits()).collect();
        match &reference {
            None => reference = Some(bits),
            Some(r) => assert_eq!(r, &bits),
        }
    }
}

#[test]
fn tuning_covers_every_convolution_and_caches() {
    let model = random_model(NetworkDef::squeezenet_v1_0(), 41).unwrap();
    let x = random_input(model.def(), 42);
    let pool = WorkerPool::new(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.txt");
    let (table, measured) = tune_network_cached(&pool, &model, &x, 3, ArithMode::Strict, &path).unwrap();
    assert!(measured);
    assert_eq!(table.rows.len(), 26);
    assert_eq!(table.plan.len(), 26);
    for id in ["conv1", "conv10", "fire2/squeeze1x1", "fire9/expand3x3"] {
        assert!(table.row(id).is_some(), "{id}");
    }
    for row in &table.rows {
        let opt = row.g_opt().unwrap();
        let expected: Vec<usize> = enumerate_valid_g(model.bank(&row.node).unwrap().spec().out_layers)
            .into_iter()
            .map(|g| g.get())
            .collect();
        assert_eq!(row.times.iter().map(|t| t.0.get()).collect::<Vec<_>>(), expected);
        let best = row.time_of(opt.get()).unwrap();
        assert!(row.times.iter().all(|t| t.1 >= best && t.1 > 0.0));
    }
    table.plan.validate(model.def()).unwrap();
    assert_eq!(TuneTable::load(&path).unwrap(), table);

    let (again, measured) = tune_network_cached(&pool, &model, &x, 3, ArithMode::Strict, &path).unwrap();
    assert!(!measured);
    assert_eq!(again, table);
}

#[test]
fn squeezenet_round_trips_through_bytes() {
    let model = random_model(NetworkDef::squeezenet_v1_0(), 51).unwrap();
    let bytes = write_model(&model);
    let back = parse_model(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(shape_check(back.def()).unwrap().len(), 15);
}

#[test]
fn micro_model_runs_from_an_image() {
    let model = micro_model();
    let mean = model.def().mean.clone();
    let pixels: Vec<u8> = (0..16u8).flat_map(|p| [p * 10, 255 - p * 10, p]).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.ppm");
    std::fs::write(
        &path,
        write_ppm(&RgbImage {
            width: 4,
            height: 4,
            pixels: pixels.clone(),
        }),
    )
    .unwrap();
    let x = load_image(&path, &mean, 4, 4).unwrap();
    // Spot check against an independent decode: row 1, column 2, green.
    let p = 4 + 2;
    assert_eq!(x.get(1, 1, 2), pixels[p * 3 + 1] as f32 - mean[1]);
    let pool = WorkerPool::new(2).unwrap();
    let fast = forward(&pool, &model, &x, &GranularityPlan::new(), ArithMode::Strict).unwrap();
    let slow = forward_sequential(&model.to_sequential(), &x).unwrap();
    assert_eq!(fast.logits.len(), 16);
    for (a, b) in fast.logits.iter().zip(&slow.logits) {
        assert!((a - b).abs() <= 1e-4);
    }
}
