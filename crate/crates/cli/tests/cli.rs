//! End-to-end checks of the `kig` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5
[corpus]
n_cases = 40
[lm]
n_layers = 1
d_model = 16
n_heads = 2
[prompt]
width = 8
[classifier]
width = 8
[training.lm]
epochs = 1
[training.prompt]
epochs = 1
[training.navigator]
epochs = 1
[training.eval_classifier]
epochs = 1
"#;

fn kig(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join(config);
    Command::new(env!("CARGO_BIN_EXE_kig"))
        .arg("--config")
        .arg(&cfg)
        .arg("--run-dir")
        .arg(dir.join("run"))
        .arg("--jobs")
        .arg("1")
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn pipeline_exit_codes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    std::fs::write(d.join("typo.toml"), format!("{SMALL}\n[schedule]\nlamda = 2.0\n")).unwrap();
    std::fs::write(d.join("other.toml"), SMALL.replace("seed = 5", "seed = 6")).unwrap();
    std::fs::write(d.join("nan.toml"), SMALL.replace("[training.lm]\nepochs = 1", "[training.lm]\nepochs = 1\nlr = 1e300")).unwrap();

    // Validation and dependency errors.
    assert_eq!(code(&kig(d, "typo.toml", &["gen-data"])), 2);
    let missing = kig(d, "small.toml", &["pretrain-lm"]);
    assert_eq!(code(&missing), 3);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("kig gen-data"));

    ok(&kig(d, "small.toml", &["gen-data"]));
    let missing = kig(d, "small.toml", &["generate"]);
    assert_eq!(code(&missing), 3);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("kig pretrain-lm"));

    // Numerical failure.
    assert_eq!(code(&kig(d, "nan.toml", &["--force", "pretrain-lm"])), 4);

    for stage in ["pretrain-lm", "train-prompt", "train-navigator", "train-eval-classifier", "generate"] {
        ok(&kig(d, "small.toml", &[stage]));
    }
    let run = d.join("run");
    for sub in ["corpus", "ckpt", "gen", "reports"] {
        assert!(run.join(sub).is_dir(), "{sub}");
    }
    assert!(run.join("config.toml").is_file());
    let stdout = ok(&kig(d, "small.toml", &["evaluate"]));
    assert!(stdout.starts_with("b1,b2,bn,r1,r2,rl,mif,maf,mij,maj,seed,flags\n"));
    let rows = csv_rows(&run.join("reports/kig.csv"));
    assert_eq!(rows[0].join(","), "b1,b2,bn,r1,r2,rl,mif,maf,mij,maj,seed,flags");
    assert_eq!(rows[1].len(), 12);
    assert_eq!(rows[1][10], "5");

    // A different config hash is refused unless forced.
    let mixed = kig(d, "other.toml", &["evaluate"]);
    assert_eq!(code(&mixed), 3);
    assert!(String::from_utf8_lossy(&mixed.stderr).contains("--force"));
    ok(&kig(d, "other.toml", &["--force", "evaluate"]));
    ok(&kig(d, "small.toml", &["evaluate"]));

    // Ablation table and λ sweep; λ = 0 reproduces the no-navigator row.
    ok(&kig(d, "small.toml", &["ablate"]));
    let ablation = csv_rows(&run.join("reports/ablation.csv"));
    assert_eq!(ablation.len(), 5);
    assert!(ablation.iter().all(|r| r.len() == 13));
    let titles: Vec<&str> = ablation[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(titles, ["KIG", "KIG w/o V", "KIG w/o LA", "KIG w/o N"]);
    let table = std::fs::read_to_string(run.join("reports/ablation.md")).unwrap();
    assert_eq!(table.lines().count(), 6);

    ok(&kig(d, "small.toml", &["sweep", "--param", "lambda", "--values", "0,6"]));
    let sweep = csv_rows(&run.join("reports/sweep-lambda.csv"));
    assert_eq!(sweep.len(), 3);
    assert_eq!(sweep[1][0], "0");
    assert_eq!(sweep[1][1..11], ablation[4][1..11], "λ=0 row differs from the w/o-N row");
    let svg = std::fs::read_to_string(run.join("reports/sweep-lambda.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    // Every generation file and report records the config hash.
    let hash = &std::fs::read_to_string(run.join("corpus/manifest.json")).unwrap();
    let hash = hash.split("\"config_hash\": \"").nth(1).unwrap().split('"').next().unwrap().to_string();
    for sub in ["gen", "reports"] {
        for e in std::fs::read_dir(run.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "json" || x == "jsonl") {
                assert!(std::fs::read_to_string(&p).unwrap().contains(&hash), "{}", p.display());
            }
        }
    }
}
