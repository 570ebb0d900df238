use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pointsea::geom::io;
use pointsea::synth::object_surface;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointsea"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("in.pcb");
    io::save(&object_surface(300, 1), &cloud).unwrap();
    (dir, cloud)
}

#[test]
fn project_writes_one_map_per_view() {
    let (dir, cloud) = setup();
    let out = dir.path().join("views");
    let o = run(&["--profile", "tiny-test", "project", s(&cloud), s(&out)]);
    assert!(o.status.success());
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "view_0.dmb",
            "view_0.pgm",
            "view_1.dmb",
            "view_1.pgm",
            "view_2.dmb",
            "view_2.pgm"
        ]
    );
    let pgm = fs::read(out.join("view_0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n65535\n"));
    assert_eq!(pgm.len(), 15 + 64 * 64 * 2);

    let one = dir.path().join("one");
    assert!(
        run(&["--profile", "tiny-test", "project", s(&cloud), s(&one), "--views", "1"])
            .status
            .success()
    );
    assert_eq!(fs::read_dir(&one).unwrap().count(), 2);
    assert_eq!(
        run(&["--profile", "tiny-test", "project", s(&cloud), s(&one), "--views", "7"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unreadable_or_malformed_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xyz");
    fs::write(&bad, "1 2\nnot numbers\n").unwrap();
    let out = dir.path().join("v");
    assert_eq!(run(&["project", s(&bad), s(&out)]).status.code(), Some(2));
    let missing = dir.path().join("nope.xyz");
    assert_eq!(run(&["project", s(&missing), s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn complete_with_trace_and_ablations() {
    let (dir, cloud) = setup();
    let w = dir.path().join("w.psw");
    assert!(run(&["--profile", "tiny-test", "init-weights", "-o", s(&w)])
        .status
        .success());
    let out = dir.path().join("out.xyz");
    let trace = dir.path().join("trace");
    let o = run(&[
        "--profile",
        "tiny-test",
        "complete",
        s(&cloud),
        "--weights",
        s(&w),
        "-o",
        s(&out),
        "--trace",
        s(&trace),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(io::load(&out).unwrap().len(), 256);
    assert_eq!(fs::read_to_string(trace.join("attn_1.meta")).unwrap(), "64 64\n");
    assert_eq!(fs::read(trace.join("alpha_2.f32")).unwrap().len(), 128 * 4);

    for flags in [
        &["--no-projection"][..],
        &["--no-analysis"],
        &["--no-alignment"],
        &["--fixed-alpha", "0.5"],
        &["--no-incompleteness"],
    ] {
        let mut args = vec![
            "--profile",
            "tiny-test",
            "complete",
            s(&cloud),
            "--weights",
            s(&w),
            "-o",
            s(&out),
        ];
        args.extend_from_slice(flags);
        assert!(run(&args).status.success(), "{flags:?}");
        assert_eq!(io::load(&out).unwrap().len(), 256);
    }
    let conflicting = run(&[
        "--profile",
        "tiny-test",
        "complete",
        s(&cloud),
        "--weights",
        s(&w),
        "-o",
        s(&out),
        "--no-analysis",
        "--no-alignment",
    ]);
    assert_eq!(conflicting.status.code(), Some(2));
    let wrong = run(&[
        "--profile",
        "pcn",
        "complete",
        s(&cloud),
        "--weights",
        s(&w),
        "-o",
        s(&out),
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn protocol_sizes_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pcb");
    io::save(&object_surface(8192, 2), &gt).unwrap();
    let (p, m) = (dir.path().join("p.pcb"), dir.path().join("m.pcb"));
    for missing in ["2048", "4096", "6144"] {
        let o = run(&[
            "protocol",
            s(&gt),
            "--viewpoint",
            "3",
            "--missing",
            missing,
            "-o",
            s(&p),
            "--missing-out",
            s(&m),
        ]);
        assert!(o.status.success());
        assert_eq!(io::load(&p).unwrap().len(), 2048);
        assert_eq!(io::load(&m).unwrap().len(), missing.parse::<usize>().unwrap());
    }
    assert_eq!(
        run(&["protocol", s(&gt), "--viewpoint", "8", "--missing", "2048", "-o", s(&p)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["protocol", s(&gt), "--viewpoint", "0", "--missing", "100", "-o", s(&p)])
            .status
            .code(),
        Some(2)
    );
    let small = dir.path().join("small.pcb");
    io::save(&object_surface(5000, 2), &small).unwrap();
    assert_eq!(
        run(&[
            "protocol",
            s(&small),
            "--viewpoint",
            "0",
            "--missing",
            "6144",
            "-o",
            s(&p)
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn eval_identity_filtering_and_batch_csv() {
    let (dir, cloud) = setup();
    let o = run(&["eval", "--pred", s(&cloud), "--gt", s(&cloud)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("cd_l1_sum = 0.00000000e0"));
    assert!(text.contains("f1 = 1.00000000e0"));
    assert!(text.contains("dcd = 0.00000000e0"));
    assert_eq!(text.lines().count(), 7);

    let o = run(&["eval", "--pred", s(&cloud), "--gt", s(&cloud), "--metrics", "f1,cd_l2"]);
    assert_eq!(stdout(&o), "f1 = 1.00000000e0\ncd_l2 = 0.00000000e0\n");
    assert_eq!(
        run(&["eval", "--pred", s(&cloud), "--gt", s(&cloud), "--metrics", "emd"])
            .status
            .code(),
        Some(2)
    );

    let other = dir.path().join("other.xyz");
    io::save(&object_surface(200, 9), &other).unwrap();
    let csv = dir.path().join("r.csv");
    let o = run(&[
        "eval",
        "--pred",
        s(&cloud),
        "--pred",
        s(&other),
        "--pred",
        s(&cloud),
        "--gt",
        s(&cloud),
        "--csv",
        s(&csv),
        "--gallery",
        s(&other),
        "--gallery",
        s(&cloud),
    ]);
    assert!(o.status.success());
    let rows: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("pred,gt,cd_l1_sum"));
    assert!(rows[0].ends_with(",mmd"));
    assert!(rows[1].ends_with(",0.00000000e0"));
    assert!(stdout(&o).contains("# mean over 3 shapes"));
}

#[test]
fn init_weights_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a.psw"),
        dir.path().join("b.psw"),
        dir.path().join("c.psw"),
    );
    for p in [&a, &b] {
        assert!(
            run(&["--profile", "tiny-test", "init-weights", "-o", s(p), "--seed", "3"])
                .status
                .success()
        );
    }
    assert!(
        run(&["--profile", "tiny-test", "init-weights", "-o", s(&c), "--seed", "4"])
            .status
            .success()
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(
        run(&["--profile", "unknown", "init-weights", "-o", s(&c)])
            .status
            .code(),
        Some(2)
    );
    let o = run(&["inspect", s(&a)]);
    assert!(stdout(&o).contains("profile tiny-test, seed 3"));
}

#[test]
fn fit_demo_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    let o = run(&["fit-demo", "-o", s(&csv), "--steps", "20"]);
    assert!(o.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 22);
    assert!(text.starts_with("step,loss\n0,"));
    assert!(stdout(&o).contains("ratio = "));
    assert_eq!(run(&["fit-demo", "-o", s(&csv), "--lr", "0"]).status.code(), Some(2));
}

#[test]
fn config_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.cfg");
    fs::write(&cfg, "# reduced\nprofile = snet55\nchannels = 32\nseed = 9\n").unwrap();
    let o = stdout(&run(&["--config", s(&cfg), "show-profile"]));
    assert!(o.contains("name = snet55\n") && o.contains("channels = 32\n") && o.contains("sdg_dims = 48, 32\n"));
    let o = stdout(&run(&[
        "--config",
        s(&cfg),
        "--profile",
        "pcn",
        "--set",
        "seed=1",
        "show-profile",
    ]));
    assert!(o.contains("name = pcn\n") && o.contains("seed = 1\n") && o.contains("channels = 32\n"));
    fs::write(&cfg, "channels 32\n").unwrap();
    let o = run(&["--config", s(&cfg), "show-profile"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn selfcheck_lists_every_check() {
    let o = run(&["selfcheck"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for (name, _) in pointsea::selfcheck::CHECKS {
        assert!(text.contains(&format!("PASS {name}")), "{name}");
    }
    assert!(text.contains("checks passed"));
}
