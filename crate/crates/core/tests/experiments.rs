mod common;

use std::path::PathBuf;

use projprune::experiments::{
    cmd_correlate, cmd_score, cmd_sweep_lambda, cmd_train, lambda_sweep, Experiment, Outputs, Overrides, RunConfig,
};
use projprune::importance::Criterion;

const TINY: &str = r#"
model = "unused.toml"
[dataset]
kind = "synthetic"
classes = 3
train_per_class = 12
test_per_class = 6
shape = [2, 6, 6]
noise = 0.4
[train]
epochs = 2
batch_size = 8
lr = 0.05
momentum = 0.9
schedule = { kind = "constant" }
[score]
criteria = ["proscore", "l1", "random"]
lambdas = [1.0, 0.01]
batch_size = 16
[sweep]
seeds = [1, 2]
ratios = [0.0, 0.5]
fractions = [1.0, 0.5]
"#;

fn experiment(dir: &std::path::Path, overrides: &Overrides) -> Experiment {
    let config: RunConfig = toml::from_str(TINY).unwrap();
    let o = Overrides {
        out_dir: Some(dir.to_path_buf()),
        ..overrides.clone()
    };
    Experiment::new(config, common::small_residual(), PathBuf::new(), &o).unwrap()
}

#[test]
fn hash_ignores_the_output_directory_only() {
    let a = experiment(std::path::Path::new("/tmp/a"), &Overrides::default());
    let b = experiment(std::path::Path::new("/tmp/b"), &Overrides::default());
    assert_eq!(a.hash(), b.hash());
    let c = experiment(
        std::path::Path::new("/tmp/a"),
        &Overrides {
            lambda: Some(0.1),
            ..Overrides::default()
        },
    );
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn invalid_configs_are_rejected() {
    let config: RunConfig = toml::from_str(TINY).unwrap();
    for o in [
        Overrides {
            ratio: Some(1.0),
            ..Overrides::default()
        },
        Overrides {
            subset: Some(0.0),
            ..Overrides::default()
        },
        Overrides {
            lambda: Some(-1.0),
            ..Overrides::default()
        },
    ] {
        assert!(Experiment::new(config.clone(), common::small_residual(), PathBuf::new(), &o).is_err());
    }
    assert!(toml::from_str::<RunConfig>(&format!("{TINY}\nbogus = 1")).is_err());
}

#[test]
fn commands_are_deterministic_and_stamped() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), &Overrides::default());
    let train = cmd_train(&exp).unwrap();
    assert_eq!(train, cmd_train(&exp).unwrap());
    train.commit(&exp.out_dir()).unwrap();
    for cmd in [cmd_score, cmd_sweep_lambda, cmd_correlate] {
        let a = cmd(&exp).unwrap();
        assert_eq!(a, cmd(&exp).unwrap());
        for name in a.names().filter(|n| n.ends_with(".csv")) {
            let text = std::str::from_utf8(a.get(name).unwrap()).unwrap();
            assert!(text.starts_with(&format!("# run_config_sha256={}", exp.hash())), "{name}");
        }
    }
}

#[test]
fn score_respects_criterion_and_lambda_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let base = experiment(dir.path(), &Overrides::default());
    cmd_train(&base).unwrap().commit(&base.out_dir()).unwrap();
    let narrow = experiment(
        dir.path(),
        &Overrides {
            criterion: Some(Criterion::Proscore),
            lambda: Some(0.5),
            ..Overrides::default()
        },
    );
    let out = cmd_score(&narrow).unwrap();
    let names: Vec<&str> = out.names().collect();
    assert_eq!(names, vec!["scores_proscore_lambda0.5_subset1_seed1.csv"]);
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), &Overrides::default());
    assert!(matches!(cmd_score(&exp), Err(projprune::Error::Config(_))));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn failed_commit_leaves_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = Outputs::default();
    out.add("good.csv", b"a\n".to_vec());
    out.add("sub/nested.csv", b"b\n".to_vec());
    assert!(out.commit(dir.path()).is_err());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn lambda_sweep_reports_match_direct_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), &Overrides::default());
    let (train, test) = exp.data().unwrap();
    let (model, _) = exp.train_model(1, &train, &test).unwrap();
    let s = lambda_sweep(&exp, &model, &train).unwrap();
    assert_eq!(s.pruned.len(), 2);
    for (lambda, r) in s.lambdas.iter().zip(&s.reports) {
        let direct = projprune::importance::score_proscore(&model, &train, *lambda, &exp.config.score.options(), 1.0, 1).unwrap();
        assert_eq!(&direct, r);
    }
}
