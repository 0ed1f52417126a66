mod common;

use common::*;
use projprune::autodiff::{finite_diff, ComputeGraph};
use projprune::data::{synthetic, Split, SyntheticSpec};
use std::collections::BTreeMap;

use projprune::importance::{accumulate_gradients, gradient_pass, ScoreOptions};
use projprune::model::{build_model, Mode};
use projprune::ParamStore;

#[test]
fn every_op_kind_matches_central_differences() {
    let s = op_gradients(2 * OP_KINDS.len(), 3);
    assert_eq!(s.trials, 32);
    assert!(s.max_rel_err < 1e-4, "{s:?}");
}

#[test]
fn injected_diagonals_match_central_differences() {
    let s = d_entry_gradients(5);
    assert!(s.entries > 100, "{s:?}");
    assert!(s.max_rel_err < 1e-4, "{s:?}");
}

#[test]
fn whole_model_weight_gradients_spot_check() {
    for (a, spec) in architectures().iter().enumerate() {
        let model = randomized(spec, 40 + a as u64);
        let mut r = rng(a as u64);
        let x = normal(&mut r, &batch_shape(spec, 4));
        let y = labels(&mut r, 4, model.classes());
        let (_, grads) = loss_and_grads(&model, &x, &y);
        let mut store = model.params().clone();
        let loss_of = |s: &ParamStore| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            let mut g = ComputeGraph::new();
            let (l, _) = m.loss(&mut g, x.clone(), &y, Mode::Train)?;
            g.value(l).item()
        };
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let n = store.get(&name).unwrap().numel();
            for j in [0, n / 2, n - 1] {
                let numeric = finite_diff(&mut store, &name, j, FD_STEP, loss_of).unwrap();
                let analytic = grads[&name].data()[j];
                assert!(
                    rel_err(analytic, numeric) < 1e-4,
                    "{} {name}[{j}]: {analytic} vs {numeric}",
                    spec.name
                );
            }
        }
    }
}

fn tiny_data(per_class: usize) -> projprune::data::Dataset {
    let ds = synthetic(
        &SyntheticSpec {
            classes: 3,
            per_class,
            shape: vec![2, 6, 6],
            noise: 0.3,
            blobs: 2,
            seed: 4,
        },
        Split::Train,
    )
    .unwrap();
    ds.normalize(&ds.channel_stats()).unwrap()
}

#[test]
fn batch_accumulation_is_linear() {
    // Reference: per-batch gradients summed in reverse batch order.
    let model = randomized(&small_residual(), 9);
    let ds = tiny_data(8);
    let accumulated = accumulate_gradients(&model, &ds, 6).unwrap();
    let mut reference: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (s, e) in ds.batch_ranges(6).into_iter().rev() {
        let (x, y) = ds.batch(s, e).unwrap();
        let (_, grads) = loss_and_grads(&model, &x, y);
        for (name, t) in grads {
            let acc = reference.entry(name).or_insert_with(|| vec![0.0; t.numel()]);
            acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
    }
    assert_eq!(accumulated.len(), reference.len());
    for (name, r) in &reference {
        for (a, b) in accumulated[name].data().iter().zip(r) {
            assert!((a - b).abs() < 1e-10, "{name}");
        }
    }
}

#[test]
fn sum_versus_mean_is_absorbed_by_lambda() {
    // 4 batches: dividing by a power of two is exact, so the scores match bit
    // for bit.
    let model = randomized(&small_residual(), 2);
    let ds = tiny_data(8);
    let opts = ScoreOptions {
        batch_size: 6,
        ..ScoreOptions::default()
    };
    let pass = gradient_pass(&model, &ds, &opts, 1.0, 0).unwrap();
    let batches = ds.batch_ranges(6).len() as f64;
    assert_eq!(batches, 4.0);
    let mean = pass.scaled(1.0 / batches);
    for lambda in [1.0, 0.1, 0.01, 0.001] {
        assert_eq!(pass.report(lambda).unwrap().scores(), mean.report(lambda * batches).unwrap().scores());
    }
}

#[test]
fn two_halves_sum_to_the_whole() {
    let model = randomized(&small_residual(), 3);
    let ds = tiny_data(10);
    let opts = ScoreOptions {
        batch_size: 5,
        ..ScoreOptions::default()
    };
    let whole = gradient_pass(&model, &ds, &opts, 1.0, 0).unwrap();
    let n = ds.len();
    let first = ds.select(&(0..n / 2).collect::<Vec<_>>()).unwrap();
    let second = ds.select(&(n / 2..n).collect::<Vec<_>>()).unwrap();
    let halves = gradient_pass(&model, &first, &opts, 1.0, 0)
        .unwrap()
        .combine(&gradient_pass(&model, &second, &opts, 1.0, 0).unwrap())
        .unwrap();
    for lambda in [1.0, 0.01] {
        let (a, b) = (whole.report(lambda).unwrap().scores(), halves.report(lambda).unwrap().scores());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn untouched_model_after_scoring() {
    let model = build_model(&plain_cnn(), 1).unwrap();
    let before = model.clone();
    gradient_pass(&model, &tiny_data(4), &ScoreOptions::default(), 1.0, 0).unwrap();
    assert_eq!(model, before);
}
