use std::path::Path;
use std::process::{Command, Output};

use rils::data::load_corpus;
use rils::eval::EvalReport;
use rils::train::read_metrics;

fn rils(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rils"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[model]
image_size = 16
patch_size = 4
vision_width = 16
vision_depth = 1
vision_heads = 2
decoder_heads = 2
text_width = 16
text_depth = 1
text_heads = 2
embed_dim = 8

[optim]
warmup_steps = 2

[data]
n_pairs = 400
seed = 5

[train]
steps = 6
batch_size = 8
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let mut text = TINY.to_string();
    text.push_str(extra);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = rils(&["train-everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_prints_usage() {
    let o = rils(&["gradcheck", "--fast"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[loss]\nmask_ratio = 1.5\n").unwrap();
    let o = rils(&["pretrain", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.mask_ratio"), "{}", stderr(&o));

    std::fs::write(&bad, "[model]\nvision_widht = 32\n").unwrap();
    let o = rils(&["pretrain", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("vision_widht"), "{}", stderr(&o));
}

#[test]
fn unknown_ablation_axis_fails() {
    let o = rils(&["ablate", "--axis", "width"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("axis"));
}

#[test]
fn paper_scale_config_prints() {
    let o = rils(&["pretrain", "--paper-scale", "--print-config", "--out", "unused"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("vision_width = 768"));
    assert!(text.contains("weight_decay = 0.5"));
}

#[test]
fn gen_data_writes_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = rils(&["gen-data", "--out", out.to_str().unwrap(), "--n", "12", "--seed", "3", "--size", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = load_corpus(&out).unwrap();
    assert_eq!(corpus.len(), 12);
    let img = corpus.get(11).unwrap().image;
    assert_eq!((img.height(), img.width()), (16, 16));
}

#[test]
fn pretrain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let o = rils(&["pretrain", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "metrics.jsonl", "final.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(read_metrics(&run.join("metrics.jsonl")).unwrap().len(), 6);

    let data = dir.path().join("corpus");
    let o = rils(&["gen-data", "--out", data.to_str().unwrap(), "--n", "400", "--seed", "5", "--size", "16"]);
    assert!(o.status.success());
    let ckpt = run.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let o = rils(&["eval-zeroshot", "--ckpt", ckpt, "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = EvalReport::from_json(&std::fs::read_to_string(run.join("zeroshot.json")).unwrap()).unwrap();
    let acc = r.metrics["accuracy"];
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(r.counts["classes"], 16);

    let out = dir.path().join("probe.json");
    let o = rils(&["eval-probe", "--ckpt", ckpt, "--shots", "2", "--seeds", "0,1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = EvalReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.counts["train"], 32);
    assert!(r.metrics.contains_key("accuracy_seed1"));

    let o = rils(&["eval-retrieval", "--ckpt", ckpt, "--k", "1,5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = EvalReport::from_json(&std::fs::read_to_string(run.join("retrieval.json")).unwrap()).unwrap();
    assert!(r.metrics["i2t_r@1"] <= r.metrics["i2t_r@5"]);

    let o = rils(&["eval-retrieval", "--ckpt", ckpt, "--k", "100000"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn contrastive_only_run_logs_zero_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[loss]\nspace = \"none\"\nlambda2 = 0.0\n");
    let run = dir.path().join("run");
    let o = rils(&["pretrain", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 6);
    for r in records {
        assert_eq!(r.l_recon, 0.0);
        assert_eq!(r.l_total, r.l_contra);
    }
}

#[test]
fn ablate_mask_ratio_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("ablate");
    let o = rils(&[
        "ablate", "--axis", "mask-ratio", "--config", &cfg, "--seeds", "0", "--shots", "2", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for label in ["0.60", "0.75", "0.90"] {
        assert!(table.contains(label), "{table}");
        assert!(out.join(format!("{label}_seed0")).join("final.ckpt").exists());
    }
    assert!(out.join("ablation_mask-ratio.json").exists());
}

#[test]
fn gradcheck_passes() {
    let o = rils(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let err: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{line}");
}
