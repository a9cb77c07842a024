use std::path::Path;
use std::process::{Command, Output};

fn zmoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zmoe")).args(args).current_dir(cwd).env_remove("ZMOE_WORKERS").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_raw(dir: &Path) {
    std::fs::create_dir_all(dir.join("raw")).unwrap();
    let mut x: u32 = 7;
    for e in 0..4 {
        for t in 0..2 {
            let bytes: Vec<u8> = (0..512)
                .flat_map(|_| {
                    x = x.wrapping_mul(1664525).wrapping_add(1013904223);
                    let w = ((x >> 16) as u16 & 0x807f) | ((120 + (x >> 28) as u16 % 6) << 7);
                    w.to_le_bytes()
                })
                .collect();
            std::fs::write(dir.join(format!("raw/l0_e{e}_t{t}.bf16")), bytes).unwrap();
        }
    }
    std::fs::write(dir.join("raw/README"), b"ignored").unwrap();
}

const PROFILE: &str = r#"{"u":1e-3,"c":4e-4,"rho":0.35,"k":2,"l":2,"n":2,"p_default":5e-4,"elements_per_tensor":512}"#;

#[test]
fn compress_inspect_and_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_raw(d);
    let summary: serde_json::Value = serde_json::from_str(&ok(&zmoe(
        &["compress", "--input", "raw", "--output", "m.zmoe", "--k", "2", "--codec", "order0"],
        d,
    )))
    .unwrap();
    assert_eq!(summary["experts"], 4);
    assert!(summary["total_ratio"].as_f64().unwrap() < 0.8);

    let info: serde_json::Value = serde_json::from_str(&ok(&zmoe(&["inspect", "m.zmoe", "--verify"], d))).unwrap();
    assert_eq!((info["k"].as_u64(), info["verified"].as_bool()), (Some(2), Some(true)));

    for workers in ["1", "3"] {
        for mode in ["separate", "consolidated"] {
            let r: serde_json::Value = serde_json::from_str(&ok(&zmoe(
                &["pipeline-bench", "m.zmoe", "--workers", workers, "--mode", mode, "--experts", "0:0,0:2"],
                d,
            )))
            .unwrap();
            assert_eq!(r["bit_exact"], true);
            assert_eq!(r["tensors"], 4);
        }
    }
    assert_eq!(zmoe(&["pipeline-bench", "m.zmoe", "--experts", "0:9"], d).status.code(), Some(2));

    let mut bytes = std::fs::read(d.join("m.zmoe")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(d.join("bad.zmoe"), bytes).unwrap();
    assert_eq!(zmoe(&["inspect", "bad.zmoe", "--verify"], d).status.code(), Some(3));
}

#[test]
fn trace_plan_simulate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("p.json"), PROFILE).unwrap();
    let gen = ["gen-trace", "--num-experts", "8", "--k", "2", "--steps", "200", "--skew", "1.1", "--seed", "9"];
    ok(&zmoe(&[&gen[..], &["--output", "a.jsonl"]].concat(), d));
    ok(&zmoe(&[&gen[..], &["--output", "b.jsonl"]].concat(), d));
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());

    ok(&zmoe(
        &[
            "plan",
            "--trace",
            "a.jsonl",
            "--profile",
            "p.json",
            "--budget",
            "2048",
            "--step",
            "0.25",
            "--output",
            "plan.json",
        ],
        d,
    ));
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("plan.json")).unwrap()).unwrap();
    assert!(plan["expected_cost"].as_f64().unwrap() > 0.0);

    let sim = |out: &str| {
        ok(&zmoe(
            &[
                "simulate",
                "--trace",
                "a.jsonl",
                "--plan",
                "plan.json",
                "--profile",
                "p.json",
                "--output",
                out,
                "--dump-timeline",
                "tl.jsonl",
                "--dump-cache",
                "cache.json",
                "--ablation",
                "abl.json",
            ],
            d,
        ))
    };
    sim("r1.json");
    sim("r2.json");
    assert_eq!(std::fs::read(d.join("r1.json")).unwrap(), std::fs::read(d.join("r2.json")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("tl.jsonl")).unwrap().lines().count(), 200);
    let abl: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("abl.json")).unwrap()).unwrap();
    assert_eq!(abl.as_array().unwrap().len(), 8);
    let cache: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cache.json")).unwrap()).unwrap();
    assert!(cache["0"]["pools"].is_object());

    let md = ok(&zmoe(&["report", "r1.json", "--format", "md"], d));
    assert!(md.contains("p99"));
    let csv = ok(&zmoe(&["report", "r1.json", "--format", "csv"], d));
    assert_eq!(csv.lines().count(), 201);
    assert_eq!(zmoe(&["report", "r1.json", "--format", "xml"], d).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = zmoe(&["gen-trace", "--num-experts", "2", "--k", "3", "--steps", "1", "--output", "t"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid argument"));
    assert_eq!(zmoe(&["no-such-command"], d).status.code(), Some(2));

    std::fs::write(d.join("p.json"), PROFILE).unwrap();
    std::fs::write(d.join("t.jsonl"), "{\"layer\":0,\"step\":0,\"experts\":[[0,1],[1,1]]}\n").unwrap();
    let plan = ["plan", "--trace", "t.jsonl", "--profile", "p.json", "--budget", "4096", "--num-experts", "4"];
    assert_eq!(zmoe(&[&plan[..], &["--step", "0.3"]].concat(), d).status.code(), Some(2));
    ok(&zmoe(&[&plan[..], &["--step", "0.5"]].concat(), d));
}

#[test]
fn worker_env_overrides_profile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("p.json"), PROFILE).unwrap();
    ok(&zmoe(&["gen-trace", "--num-experts", "4", "--k", "2", "--steps", "5", "--output", "t.jsonl"], d));
    let out = Command::new(env!("CARGO_BIN_EXE_zmoe"))
        .args(["simulate", "--trace", "t.jsonl", "--profile", "p.json"])
        .current_dir(d)
        .env("ZMOE_WORKERS", "5")
        .output()
        .unwrap();
    let r: serde_json::Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(r["profile"]["l"], 5);
}
