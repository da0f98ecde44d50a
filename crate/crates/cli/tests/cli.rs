use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfvid::io::{load_lf, load_png, save_lf_grid, save_png};
use lfvid::{center_view, AngularGrid, Image, LightField};

fn lfvid(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfvid"))
        .args(args)
        .env("LFVID_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lfvid")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = lfvid(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn small_conf(dir: &Path) -> PathBuf {
    let path = dir.join("small.conf");
    std::fs::write(&path, "angular_res = 5\niterations = 60\n").unwrap();
    path
}

#[test]
fn generated_scene_fits_to_a_light_field_file() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_conf(tmp.path());
    let conf = conf.to_str().unwrap();
    ok(tmp.path(), &["gen-scene", "--config", conf, "--k", "1", "--disparity", "0", "--frames", "2"]);
    let stdout = ok(tmp.path(), &["fit", "--config", conf, "--lambda-temp", "0", "--lambda-occ", "0"]);
    assert!(stdout.contains("PSNR"));
    let lf = load_lf(&tmp.path().join("fit/lf_0000.png"), AngularGrid::square(5).unwrap()).unwrap();
    assert_eq!((lf.height(), lf.width()), (32, 32));
    assert!(tmp.path().join("fit.conf").exists());
}

#[test]
fn epi_slope_of_a_unit_disparity_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_conf(tmp.path());
    let conf = conf.to_str().unwrap();
    ok(tmp.path(), &["gen-scene", "--config", conf, "--disparity", "1", "--frames", "1"]);
    let lf = tmp.path().join("lf/lf_0000.png");
    let stdout = ok(tmp.path(), &["epi", "--config", conf, "--lf", lf.to_str().unwrap(), "--row", "16"]);
    let slope: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("slope "))
        .expect("slope line")
        .parse()
        .unwrap();
    assert!((slope - 1.0).abs() <= 0.05, "slope {slope}");
    assert!(tmp.path().join("epi_h_0016.png").exists());
}

#[test]
fn refocus_at_zero_of_identical_views_is_the_center_view() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = AngularGrid::square(5).unwrap();
    let img = Image::from_fn(12, 16, 3, |y, x, c| ((y * 16 + x) * 3 + c) as f64 / (12.0 * 16.0 * 3.0));
    let lf = LightField::replicate(grid, &img).unwrap();
    let lf_path = tmp.path().join("flat.png");
    save_lf_grid(&lf, &lf_path).unwrap();
    let conf = small_conf(tmp.path());
    ok(tmp.path(), &["refocus", "--config", conf.to_str().unwrap(), "--lf", lf_path.to_str().unwrap(), "--alpha", "0"]);
    let center = tmp.path().join("center.png");
    save_png(&center_view(&load_lf(&lf_path, grid).unwrap()), &center).unwrap();
    let a = std::fs::read(tmp.path().join("refocus/refocus_000.png")).unwrap();
    let b = std::fs::read(&center).unwrap();
    assert_eq!(a, b);
    assert_eq!(load_png(&tmp.path().join("refocus/refocus_000.png")).unwrap().dims(), (12, 16, 3));
}

#[test]
fn equal_argv_gives_identical_outputs() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let conf = small_conf(tmp.path());
            let conf = conf.to_str().unwrap();
            ok(tmp.path(), &["gen-scene", "--config", conf, "--seed", "7", "--k", "2", "--velocity", "1,0"]);
            ok(tmp.path(), &["fit", "--config", conf, "--seed", "7", "--frame", "1", "--iterations", "20"]);
            tmp
        })
        .collect();
    for file in ["scene.json", "frames/frame_0002.png", "lf/lf_0001.png", "depth/depth_0001.pfm", "fit/lf_0001.png", "fit/fit.json"] {
        let a = std::fs::read(runs[0].path().join(file)).unwrap();
        let b = std::fs::read(runs[1].path().join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
}

#[test]
fn file_provider_reads_what_gen_scene_wrote() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_conf(tmp.path());
    let conf = conf.to_str().unwrap();
    ok(tmp.path(), &["gen-scene", "--config", conf, "--disparity", "0.5", "--velocity", "1,-1", "--frames", "3"]);
    ok(tmp.path(), &["fit", "--config", conf, "--provider", "files", "--frame", "1", "--iterations", "10"]);
    let scene_conf = tmp.path().join("scene.conf");
    ok(tmp.path(), &["fit", "--config", scene_conf.to_str().unwrap(), "--iterations", "10"]);
}

#[test]
fn failures_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_conf(tmp.path());
    let conf = conf.to_str().unwrap();
    let code = |args: &[&str]| lfvid(tmp.path(), args).status.code();

    assert_eq!(code(&["fit", "--no-such-flag"]), Some(2));
    assert_eq!(code(&["gen-scene", "--k", "2", "--disparity", "1"]), Some(2));
    let bad = tmp.path().join("bad.conf");
    std::fs::write(&bad, "lambda_phot = 1\n").unwrap();
    assert_eq!(code(&["fit", "--config", bad.to_str().unwrap()]), Some(2));

    assert_eq!(code(&["fit", "--config", conf, "--scene", tmp.path().join("nowhere").to_str().unwrap()]), Some(3));
    assert_eq!(code(&["synthesize", "--checkpoint", "missing.json"]), Some(3));

    ok(tmp.path(), &["gen-scene", "--config", conf, "--disparity", "1", "--velocity", "1,0", "--frames", "2"]);
    std::fs::write(tmp.path().join("flow/flow_c0000_to_c0001.flo"), b"not a flow file").unwrap();
    let o = lfvid(tmp.path(), &["fit", "--config", conf, "--provider", "files", "--iterations", "5"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8(o.stderr).unwrap();
    let diagnostic: Vec<_> = stderr.lines().filter(|l| l.starts_with("lfvid: error")).collect();
    assert_eq!(diagnostic.len(), 1);

    std::fs::remove_file(tmp.path().join("depth/depth_0000.pfm")).unwrap();
    assert_eq!(code(&["fit", "--config", conf, "--provider", "files", "--iterations", "5"]), Some(3));
}

#[test]
fn help_documents_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let help = ok(tmp.path(), &["--help"]);
    for line in ["0  success", "2  usage", "3  missing input", "4  depth/flow provider failure"] {
        assert!(help.contains(line), "{line}");
    }
}

#[test]
fn training_chain_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("chain.conf");
    std::fs::write(&conf, "angular_res = 3\nepochs = 1\niterations = 10\n").unwrap();
    let conf = conf.to_str().unwrap();
    let ck = |name: &str| tmp.path().join("checkpoints").join(name).to_str().unwrap().to_string();
    ok(tmp.path(), &["gen-scene", "--config", conf, "--k", "2", "--velocity", "1,0", "--frames", "3"]);
    ok(tmp.path(), &["train", "--config", conf]);
    ok(tmp.path(), &["synthesize", "--config", conf, "--checkpoint", &ck("selfsup_last.json")]);
    let pred = tmp.path().join("synth");
    let table = ok(tmp.path(), &["eval", "--config", conf, "--pred", pred.to_str().unwrap()]);
    assert!(table.lines().any(|l| l.starts_with("mean")));
    ok(tmp.path(), &["train-refine", "--config", conf, "--backbone", &ck("selfsup_last.json")]);
    ok(tmp.path(), &["synthesize", "--config", conf, "--checkpoint", &ck("refinement_last.json")]);
    let rows = ok(tmp.path(), &["ablate", "--config", conf, "--refine", &ck("refinement_last.json")]);
    assert!(rows.contains("Proposed"));
    let csv = std::fs::read_to_string(tmp.path().join("ablate/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
