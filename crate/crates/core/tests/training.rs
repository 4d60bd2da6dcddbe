mod common;

use std::process::Command;

use common::{rng, tiny_config};
use retloc::fine::{ground_truth, is_matcher_param, matcher_loss, FineConfig, FineInput, FineModel};
use retloc::language::generate_hint;
use retloc::pipeline::checkpoint::Checkpoint;
use retloc::pipeline::eval::{LOCALIZATION_EPS, LOCALIZATION_KS};
use retloc::pipeline::experiments::{evaluate, RELATION_TABLE, RELATION_VARIANTS};
use retloc::pipeline::{train_coarse, train_fine, train_regressor, Adam, Config, Dataset};
use retloc::scene::io::write_json;
use retloc::tensor::Tape;

fn matcher_bytes(m: &FineModel) -> Vec<(String, Vec<u64>)> {
    m.params
        .iter()
        .filter(|p| is_matcher_param(&p.name))
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn regressor_training_leaves_the_matcher_untouched() {
    let mut cfg = tiny_config(1);
    // fast enough for the matcher to emit matches the regressor can train on
    cfg.matcher_train.lr = 5e-3;
    cfg.matcher_train.epochs = 4;
    let ds = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let mut run = train_fine(&ds, &cfg, &mut |_| {}).unwrap();
    let before = matcher_bytes(&run.model);
    let others: Vec<_> = run.model.params.iter().filter(|p| !is_matcher_param(&p.name)).map(|p| p.value.clone()).collect();
    train_regressor(&mut run.model, &ds, &cfg, &mut |_| {}).unwrap();
    assert_eq!(before, matcher_bytes(&run.model));
    let after: Vec<_> = run.model.params.iter().filter(|p| !is_matcher_param(&p.name)).map(|p| p.value.clone()).collect();
    assert_ne!(others, after, "regressor parameters should move");
    let phases: Vec<&str> = run.history.iter().map(|e| e.phase.as_str()).collect();
    assert!(phases.contains(&"matcher") && phases.contains(&"regressor"));
}

#[test]
fn matcher_loss_falls_on_a_toy_cell() {
    let mut g = rng(3);
    let cell = common::toy_cell(0, 5, &mut g);
    let target = [cell.origin[0] + 15.0, cell.origin[1] + 15.0];
    let hints: Vec<_> = cell.instances[..3].iter().map(|i| generate_hint(target, i).unwrap()).collect();
    let gt_ids: Vec<usize> = hints.iter().map(|h| h.referred_instance_id).collect();
    let groups: Vec<_> = hints.iter().map(|h| &h.groups).collect();
    let cfg = FineConfig {
        d: 12,
        d_m: 8,
        ..FineConfig::default()
    };
    let mut model = FineModel::new(cfg, 4).unwrap();
    let slots = model.pad(&cell, 5).unwrap();
    let mut opt = Adam::new(5e-3, 0.0);
    let mut losses = Vec::new();
    for _ in 0..40 {
        let mut tape = Tape::new();
        let p = tape.bind_with(&model.params, is_matcher_param);
        let input = FineInput {
            cell: &cell,
            slots: slots.clone(),
            hints: groups.clone(),
        };
        let f = model.match_forward(&mut tape, &p, std::slice::from_ref(&input)).unwrap()[0];
        let gt = ground_truth(&cell, &slots, &gt_ids);
        let loss = matcher_loss(&mut tape, f.plan, &gt.pairs, &gt.unmatched_instances, &gt.unmatched_hints).unwrap();
        losses.push(tape.value(loss).item());
        tape.backward(loss).unwrap();
        model.params.collect_grads(&tape, &p);
        opt.step(&mut model.params, is_matcher_param).unwrap();
        model.params.zero_grads();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[39] < 0.7 * losses[0], "{losses:?}");
}

fn train_all(cfg: &Config) -> (Vec<u8>, Vec<u8>, String) {
    let ds = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let coarse = train_coarse(&ds, cfg, &mut |_| {}).unwrap();
    let fine = train_fine(&ds, cfg, &mut |_| {}).unwrap();
    let ev = evaluate(&ds, cfg, &coarse.model, &fine.model, &LOCALIZATION_KS, &LOCALIZATION_EPS).unwrap();
    (
        Checkpoint::coarse(cfg, &coarse.model, Some(&coarse.optimizer)).to_bytes(),
        Checkpoint::fine(cfg, &fine.model, Some(&fine.optimizer)).to_bytes(),
        serde_json::to_string(&ev.report).unwrap(),
    )
}

#[test]
fn fixed_seed_reproduces_checkpoints_and_metrics() {
    let cfg = tiny_config(2);
    let a = train_all(&cfg);
    let b = train_all(&cfg);
    assert!(a.0 == b.0, "coarse checkpoints differ");
    assert!(a.1 == b.1, "fine checkpoints differ");
    assert_eq!(a.2, b.2);
    let other = train_all(&tiny_config(3));
    assert!(a.0 != other.0);
}

#[test]
fn trained_checkpoints_round_trip() {
    let cfg = tiny_config(4);
    let ds = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let coarse = train_coarse(&ds, &cfg, &mut |_| {}).unwrap();
    let bytes = Checkpoint::coarse(&cfg, &coarse.model, Some(&coarse.optimizer)).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let restored = ck.coarse_model(&cfg).unwrap();
    for (a, b) in coarse.model.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let cells = ds.all_cells();
    assert_eq!(coarse.model.cell_embeddings(&cells[..5]).unwrap(), restored.cell_embeddings(&cells[..5]).unwrap());
}

#[test]
fn first_coarse_epoch_has_positive_loss() {
    let cfg = tiny_config(5);
    let ds = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let coarse = train_coarse(&ds, &cfg, &mut |_| {}).unwrap();
    assert!(coarse.history[0].train_loss > 0.0);
}

fn cli(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_retloc"))
        .current_dir(dir)
        .env_remove("RETLOC_SEED")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_gen_is_deterministic_and_eval_names_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    write_json(&cfg_path, &tiny_config(0)).unwrap();
    let c = cfg_path.to_str().unwrap();
    for out in ["a", "b"] {
        let o = cli(dir.path(), &["gen", "--config", c, "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["scene.json", "queries.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
    let o = cli(dir.path(), &["eval", "--config", c, "--out", "a"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("coarse_final.ckpt"));
    let o = cli(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cli(dir.path(), &["gen", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cli_pipeline_and_relation_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(6);
    cfg.coarse_train.epochs = 1;
    cfg.matcher_train.epochs = 1;
    cfg.regressor_train.epochs = 1;
    let cfg_path = dir.path().join("tiny.json");
    write_json(&cfg_path, &cfg).unwrap();
    let c = cfg_path.to_str().unwrap();
    for cmd in ["gen", "train-coarse", "train-fine", "dump-embeddings"] {
        let o = cli(dir.path(), &[cmd, "--config", c]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = cli(dir.path(), &["eval", "--config", c, "--k", "1,3", "--eps", "5,20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let preds = std::fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), cfg.data.val_queries);
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("k=3 <20m") && metrics.contains("not reproducible at desk scale"));
    let csv = std::fs::read_to_string(out.join("embeddings.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 3 + cfg.coarse.d);

    let o = cli(dir.path(), &["localize", "--config", c, "--k", "2", "The pose is east of a gray building. The pose is north of a dark-green terrain."]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 2);
    let o = cli(dir.path(), &["localize", "--config", c, "The pose is upward of a red car."]);
    assert_eq!(o.status.code(), Some(2));

    let o = cli(dir.path(), &["ablate", "--config", c, "--skip-fine"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: retloc::pipeline::report::MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let t = report.table(RELATION_TABLE).unwrap();
    let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, RELATION_VARIANTS.map(|v| v.0));
    assert_eq!(t.columns, ["R@1", "R@3", "R@5"]);
}
