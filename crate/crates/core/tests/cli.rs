mod common;

use std::fs;
use std::path::Path;

use cellclat::cli::{prepare_dataset, run, CHECKPOINT_FILE, CONFIG_FILE, EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use cellclat::config::TrainConfig;
use cellclat::contrastive::Trainer;
use cellclat::diffcore::read_checkpoint;
use cellclat::graph_io::{format_edge_list, write_tu_dataset, Graph};
use common::ring_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["cellclat"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn rings_dir(root: &Path) -> std::path::PathBuf {
    let dir = root.join("RINGS");
    let mut ds = ring_dataset(24, &mut ChaCha8Rng::seed_from_u64(4));
    ds.name = "RINGS".into();
    write_tu_dataset(&ds, &dir).unwrap();
    dir
}

const SMALL: [&str; 8] = ["--layers", "2", "--hidden", "6", "--batch-size", "8", "--set", "proj_dim=8"];

fn pretrain(data: &Path, out: &Path, epochs: &str) -> (i32, String, String) {
    let mut args = vec!["pretrain", "--dataset", p(data), "--out", p(out), "--epochs", epochs];
    args.extend_from_slice(&SMALL);
    cli(&args)
}

#[test]
fn lift_counts_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let tri = tmp.path().join("tri.txt");
    fs::write(&tri, format_edge_list(&Graph::complete(3))).unwrap();
    let (code, out, err) = cli(&["lift", "--input", p(&tri)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.trim(), "graph=0 N0=3 N1=3 N2=1");
    let c7 = tmp.path().join("c7.txt");
    fs::write(&c7, format_edge_list(&Graph::cycle(7))).unwrap();
    let (_, out, _) = cli(&["lift", "--input", p(&c7)]);
    assert_eq!(out.trim(), "graph=0 N0=7 N1=7 N2=0");
    let (_, out, _) = cli(&["lift", "--input", p(&c7), "--ring-size", "7"]);
    assert_eq!(out.trim(), "graph=0 N0=7 N1=7 N2=1");

    let dir = rings_dir(tmp.path());
    let (code, out, err) = cli(&["lift", "--input", p(&dir)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.lines().count(), 24);
    assert!(err.starts_with("total graphs=24 "));
}

#[test]
fn wl_compare_reports_the_cycle_witness() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c7.txt"), format_edge_list(&Graph::cycle(7))).unwrap();
    let split = Graph::cycle(3).disjoint_union(&Graph::cycle(4));
    fs::write(tmp.path().join("c3c4.txt"), format_edge_list(&split)).unwrap();
    fs::write(tmp.path().join("k3.txt"), format_edge_list(&Graph::complete(3))).unwrap();
    let pairs = tmp.path().join("pairs.txt");
    fs::write(&pairs, "# witness\nw c7.txt c3c4.txt\nk3.txt k3.txt\n").unwrap();
    let (code, out, err) = cli(&["wl-compare", "--pairs-file", p(&pairs)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "pair_id\twl_distinguishes\tcwl_distinguishes\titerations");
    assert!(lines[1].starts_with("w\t0\t1\t"), "{}", lines[1]);
    assert!(lines[2].starts_with("1\t0\t0\t"), "{}", lines[2]);
}

#[test]
fn zero_epoch_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = rings_dir(tmp.path());
    let run_dir = tmp.path().join("run0");
    let (code, _, err) = pretrain(&data, &run_dir, "0");
    assert_eq!(code, EXIT_OK, "{err}");
    let file = fs::File::open(run_dir.join(CHECKPOINT_FILE)).unwrap();
    let store = read_checkpoint(std::io::BufReader::new(file)).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.apply_text(&fs::read_to_string(run_dir.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!((cfg.num_layers, cfg.hidden, cfg.proj_dim, cfg.epochs), (2, 6, 8, 0));
    let ds = cellclat::graph_io::parse_tu_dataset(&data, "RINGS").unwrap();
    let prepared = prepare_dataset(&ds, &cfg).unwrap();
    let fresh = Trainer::new(&cfg, prepared[0].feats[0].cols()).unwrap();
    assert_eq!(store, fresh.store);
}

#[test]
fn pretrain_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = rings_dir(tmp.path());
    let run_dir = tmp.path().join("run");
    let (code, _, err) = pretrain(&data, &run_dir, "2");
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(fs::read_to_string(run_dir.join("train.log")).unwrap().lines().count(), 6);

    // Rerunning from the saved config reproduces the checkpoint bit for bit.
    let again = tmp.path().join("again");
    let cfg_file = run_dir.join(CONFIG_FILE);
    let (code, _, err) = cli(&["pretrain", "--dataset", p(&data), "--config", p(&cfg_file), "--out", p(&again)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(
        fs::read(run_dir.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(again.join(CHECKPOINT_FILE)).unwrap()
    );

    let masks = tmp.path().join("masks.txt");
    let (code, out, err) = cli(&["embed", "--dataset", p(&data), "--run", p(&run_dir), "--mask-dump", p(&masks)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 24);
    let width = rows[0].split('\t').count();
    assert!(rows.iter().all(|r| r.split('\t').count() == width));
    assert!(rows[0].starts_with("0\t0\t"));
    assert!(masks.exists());

    let (code, out, err) = cli(&["probe", "--dataset", p(&data), "--run", p(&run_dir), "--set", "probe_seeds=2"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.lines().next(), Some("dataset\tprotocol\tseed\tfold\taccuracy"));
    assert_eq!(out.lines().count(), 1 + 2 * 10);
    assert!(err.contains("accuracy"));

    let (code, out, err) = cli(&[
        "probe",
        "--dataset",
        p(&data),
        "--run",
        p(&run_dir),
        "--protocol",
        "semi-supervised",
        "--set",
        "label_fraction=0.5",
        "--set",
        "probe_seeds=1",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.lines().skip(1).all(|l| l.contains("semi-supervised")), "{out}");

    let args = ["trim-study", "--dataset", p(&data), "--run", p(&run_dir), "--ratios", "0,0.5,1", "--trials", "2", "--set", "probe_seeds=1"];
    let (code, out, err) = cli(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0][2], lines[0][3]);
    assert_eq!(cli(&args).1, out);
}

#[test]
fn checks_pass_on_small_budgets() {
    let (code, out, _) = cli(&["gradcheck", "--samples", "1"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.lines().last().unwrap().starts_with("max_rel_err "));
    let (code, out, _) = cli(&["bilevel-check", "--instances", "10"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.trim_end().ends_with("alpha0_modes_equal true"));
    let (code, _, _) = cli(&["bilevel-check", "--instances", "10", "--tol", "0"]);
    assert_eq!(code, EXIT_CHECK);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(cli(&["lift"]).0, EXIT_USAGE);
    let missing = tmp.path().join("nope.txt");
    let (code, _, err) = cli(&["lift", "--input", p(&missing)]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("error:"));
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "3 2\n0 1\n").unwrap();
    assert_eq!(cli(&["lift", "--input", p(&bad)]).0, EXIT_DATA);

    let data = rings_dir(tmp.path());
    let (code, _, _) = cli(&["pretrain", "--dataset", p(&data), "--out", p(&tmp.path().join("r")), "--set", "zeta=-1"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = cli(&["embed", "--dataset", p(&data), "--run", p(&tmp.path().join("absent"))]);
    assert_eq!(code, EXIT_DATA);
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
}
