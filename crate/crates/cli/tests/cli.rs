//! End-to-end tests of the `chmm` binary, including the determinism
//! acceptance criterion (11): repeated benchmark runs with one thread and a
//! fixed root seed must produce bitwise-identical reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn chmm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chmm"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    fs::remove_dir_all(&dir).ok(); // stale outputs from previous runs
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    chmm().args(args).output().expect("spawn chmm")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
}

fn write_sim_config(dir: &Path, n_individuals: usize, n_loci: usize, seed: u64) -> PathBuf {
    let path = dir.join("sim.cfg");
    fs::write(
        &path,
        format!(
            "format chmm-sim-config\nn_individuals {n_individuals}\nn_loci {n_loci}\n\
             scenario homoscedastic\nsigma 0.5\nlog_omega -0.35\nseed {seed}\n"
        ),
    )
    .unwrap();
    path
}

fn simulate_into(dir: &Path, n_individuals: usize, n_loci: usize, seed: u64) -> PathBuf {
    let config = write_sim_config(dir, n_individuals, n_loci, seed);
    let data = dir.join("data");
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    assert_ok(&out);
    data
}

#[test]
fn criterion_11_bench_determinism() {
    let dir = tmp("bench-determinism");
    let mut reports = Vec::new();
    for run_id in 0..2 {
        let out_dir = dir.join(format!("run{run_id}"));
        let out = run(&[
            "--threads",
            "1",
            "bench",
            "--study",
            "2",
            "--replicates",
            "3",
            "--seed",
            "424242",
            "--n-loci",
            "300",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
        let replicates = fs::read(out_dir.join("replicates.csv")).unwrap();
        let summary = fs::read(out_dir.join("summary.csv")).unwrap();
        reports.push((replicates, summary));
    }
    assert_eq!(
        reports[0].0, reports[1].0,
        "replicates.csv differs between identically-seeded runs"
    );
    assert_eq!(
        reports[0].1, reports[1].1,
        "summary.csv differs between identically-seeded runs"
    );
    println!(
        "ACCEPTANCE criterion 11 (bench-determinism): PASS — two runs, {} bytes identical",
        reports[0].0.len() + reports[0].1.len()
    );
}

#[test]
fn exact_method_respects_the_joint_state_cap() {
    let dir = tmp("capacity");
    let data = simulate_into(&dir, 10, 100, 7);
    let out = run(&[
        "fit",
        "--signal",
        data.join("signal.csv").to_str().unwrap(),
        "--kinship",
        data.join("kinship.csv").to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--method",
        "exact",
        "--out",
        dir.join("model").to_str().unwrap(),
    ]);
    // 3^10 joint states exceed the default cap
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.join("model").exists(), "failed fit must write nothing");

    let data6 = simulate_into(&dir, 6, 100, 8);
    let out = run(&[
        "fit",
        "--signal",
        data6.join("signal.csv").to_str().unwrap(),
        "--kinship",
        data6.join("kinship.csv").to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--method",
        "exact",
        "--max-iter",
        "3",
        "--out",
        dir.join("model6").to_str().unwrap(),
    ]);
    assert_ok(&out); // 3^6 = 729 fits under the cap
}

#[test]
fn fit_decode_roundtrip_is_bitwise_stable() {
    let dir = tmp("roundtrip");
    let data = simulate_into(&dir, 4, 200, 21);
    let signal = data.join("signal.csv");
    let kinship = data.join("kinship.csv");
    let model = dir.join("model.chmm");
    for _ in 0..2 {
        let out = run(&[
            "--threads",
            "1",
            "fit",
            "--signal",
            signal.to_str().unwrap(),
            "--kinship",
            kinship.to_str().unwrap(),
            "--states",
            "3",
            "--log-omega",
            "-0.35",
            "--homoscedastic",
            "--out",
            model.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let archive_text = fs::read_to_string(&model).unwrap();

    // decoding twice is bitwise stable, and both rules produce full call sets
    let calls_a = dir.join("calls_a.csv");
    let calls_b = dir.join("calls_b.csv");
    for calls in [&calls_a, &calls_b] {
        let out = run(&[
            "--threads",
            "1",
            "decode",
            "--model",
            model.to_str().unwrap(),
            "--signal",
            signal.to_str().unwrap(),
            "--rule",
            "viterbi",
            "--out",
            calls.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    assert_eq!(fs::read(&calls_a).unwrap(), fs::read(&calls_b).unwrap());

    // refitting reproduces the identical archive (CLI determinism)
    let model2 = dir.join("model2.chmm");
    let out = run(&[
        "--threads",
        "1",
        "fit",
        "--signal",
        signal.to_str().unwrap(),
        "--kinship",
        kinship.to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.35",
        "--homoscedastic",
        "--out",
        model2.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert_eq!(archive_text, fs::read_to_string(&model2).unwrap());

    let header = fs::read_to_string(&calls_a).unwrap();
    assert!(header.starts_with("individual,locus,state,tau_deletion,tau_normal,tau_amplification"));
}

#[test]
fn decode_warns_when_the_signal_digest_differs() {
    let dir = tmp("digest-warning");
    let data = simulate_into(&dir, 3, 150, 33);
    let signal = data.join("signal.csv");
    let model = dir.join("model.chmm");
    assert_ok(&run(&[
        "fit",
        "--signal",
        signal.to_str().unwrap(),
        "--kinship",
        data.join("kinship.csv").to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--out",
        model.to_str().unwrap(),
    ]));

    // perturb one value, keeping ids intact
    let text = fs::read_to_string(&signal).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    fields[1] = "0.123456".into();
    lines[1] = fields.join(",");
    let altered = dir.join("altered.csv");
    fs::write(&altered, lines.join("\n") + "\n").unwrap();

    let out = run(&[
        "decode",
        "--model",
        model.to_str().unwrap(),
        "--signal",
        altered.to_str().unwrap(),
        "--out",
        dir.join("calls.csv").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("digest") && stderr.contains("differs"),
        "expected a digest warning, got: {stderr}"
    );
}

#[test]
fn grouped_fit_with_one_group_matches_ungrouped() {
    let dir = tmp("groups");
    let data = simulate_into(&dir, 4, 200, 55);
    let signal = data.join("signal.csv");
    let kinship = data.join("kinship.csv");

    let groups = dir.join("groups.csv");
    fs::write(&groups, "ind_1,all\nind_2,all\nind_3,all\nind_4,all\n").unwrap();
    let grouped = dir.join("grouped");
    assert_ok(&run(&[
        "--threads",
        "1",
        "fit",
        "--signal",
        signal.to_str().unwrap(),
        "--kinship",
        kinship.to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--homoscedastic",
        "--groups",
        groups.to_str().unwrap(),
        "--out",
        grouped.to_str().unwrap(),
    ]));
    let plain = dir.join("plain");
    assert_ok(&run(&[
        "--threads",
        "1",
        "fit",
        "--signal",
        signal.to_str().unwrap(),
        "--kinship",
        kinship.to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--homoscedastic",
        "--out",
        plain.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read_to_string(dir.join("grouped.all")).unwrap(),
        fs::read_to_string(&plain).unwrap(),
        "a single all-inclusive group must reproduce the ungrouped fit"
    );
    assert!(dir.join("grouped.calls.csv").exists());

    // singleton groups: coupling is vacuous, fits still run
    fs::write(&groups, "ind_1,a\nind_2,b\nind_3,c\nind_4,d\n").unwrap();
    let singles = dir.join("singles");
    assert_ok(&run(&[
        "fit",
        "--signal",
        signal.to_str().unwrap(),
        "--kinship",
        kinship.to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--homoscedastic",
        "--groups",
        groups.to_str().unwrap(),
        "--out",
        singles.to_str().unwrap(),
    ]));
    for g in ["a", "b", "c", "d"] {
        assert!(dir.join(format!("singles.{g}")).exists());
    }

    // unassigned individual: input error, nothing written
    fs::write(&groups, "ind_1,a\nind_2,b\nind_3,c\n").unwrap();
    let bad = dir.join("bad");
    let out = run(&[
        "fit",
        "--signal",
        signal.to_str().unwrap(),
        "--kinship",
        kinship.to_str().unwrap(),
        "--states",
        "3",
        "--log-omega",
        "-0.2",
        "--groups",
        groups.to_str().unwrap(),
        "--out",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lrr_rejects_nonpositive_intensities() {
    let dir = tmp("lrr");
    fs::write(
        dir.join("observed.csv"),
        "id,l1,l2\na,2.0,1.0\nb,1.0,-3.0\n",
    )
    .unwrap();
    fs::write(dir.join("expected.csv"), "id,l1,l2\nref,2.0,1.0\n").unwrap();
    let out = run(&[
        "lrr",
        "--observed",
        dir.join("observed.csv").to_str().unwrap(),
        "--expected",
        dir.join("expected.csv").to_str().unwrap(),
        "--out",
        dir.join("lrr.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("lrr.csv").exists());

    fs::write(dir.join("observed.csv"), "id,l1,l2\na,2.0,1.0\nb,1.0,0.5\n").unwrap();
    let out = run(&[
        "lrr",
        "--observed",
        dir.join("observed.csv").to_str().unwrap(),
        "--expected",
        dir.join("expected.csv").to_str().unwrap(),
        "--out",
        dir.join("lrr.csv").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = fs::read_to_string(dir.join("lrr.csv")).unwrap();
    assert!(text.contains("a,0,0"));
    assert!(text.contains("b,-1,-1"));
}

#[test]
fn kinship_pipeline_runs_end_to_end() {
    let dir = tmp("kinship-cmd");
    fs::write(
        dir.join("snp.csv"),
        "id,s1,s2,s3,s4\nx,0,1,2,1\ny,0,1,2,2\nz,2,1,0,0\n",
    )
    .unwrap();
    let out = run(&[
        "kinship",
        "--snp",
        dir.join("snp.csv").to_str().unwrap(),
        "--alpha",
        "1",
        "--out",
        dir.join("kin.csv").to_str().unwrap(),
        "--raw-out",
        dir.join("kin_raw.csv").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let clamped = fs::read_to_string(dir.join("kin.csv")).unwrap();
    let raw = fs::read_to_string(dir.join("kin_raw.csv")).unwrap();
    assert!(clamped.lines().count() == 4 && raw.lines().count() == 4);
    // raw estimates can be negative, the model-ready matrix cannot
    assert!(raw.contains('-'));
    assert!(!clamped
        .lines()
        .skip(1)
        .any(|l| l.split(',').skip(1).any(|v| v.starts_with('-'))));
}

#[test]
fn selection_commands_write_reports() {
    let dir = tmp("selection");
    let data = simulate_into(&dir, 4, 200, 77);
    let out = run(&[
        "select-q",
        "--signal",
        data.join("signal.csv").to_str().unwrap(),
        "--kinship",
        data.join("kinship.csv").to_str().unwrap(),
        "--grid",
        "2,3",
        "--log-omega",
        "-0.2",
        "--homoscedastic",
        "--max-iter",
        "30",
        "--out",
        dir.join("selq.csv").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report = fs::read_to_string(dir.join("selq.csv")).unwrap();
    assert!(report.starts_with("n_states,bound,penalty,criterion,chosen,error"));
    assert_eq!(report.lines().count(), 3);

    let out = run(&[
        "select-omega",
        "--signal",
        data.join("signal.csv").to_str().unwrap(),
        "--kinship",
        data.join("kinship.csv").to_str().unwrap(),
        "--states",
        "3",
        "--grid",
        "-0.3,-0.1",
        "--homoscedastic",
        "--max-iter",
        "30",
        "--out",
        dir.join("selw.csv").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report = fs::read_to_string(dir.join("selw.csv")).unwrap();
    assert!(report.starts_with("log_omega,bound,rss,chosen,error"));
    assert!(report.contains("true"));
}
