//! Contract tests for the command-line layer: configuration precedence,
//! echo round-trips, subcommand artifacts, exit codes, and parity between
//! the in-process and multi-process sweep drivers.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use mmfas_cli::config::{resolve_from, FileConfig, Overrides, Resolved, DATA_ROOT_ENV};
use mmfas_core::checkpoint::{Checkpoint, Provenance};
use mmfas_core::data::{Label, Split};
use mmfas_core::descriptors::{DescriptorConfig, Recipe};
use mmfas_core::image::{read_pgm, read_ppm, write_ppm, PlanarImage};
use mmfas_core::metrics::{evaluate, ScoreRow, ScoreSet};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;

fn mmfas() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmfas"));
    cmd.env_remove(DATA_ROOT_ENV);
    cmd
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn mmfas");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn exit_code(cmd: &mut Command) -> i32 {
    let out = cmd.output().expect("spawn mmfas");
    out.status.code().expect("exit code")
}

/// Every file under `dir` as (relative path, bytes), for tree comparison.
fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Configuration precedence
// ---------------------------------------------------------------------------

struct KeyCase {
    name: &'static str,
    default_v: &'static str,
    file_v: &'static str,
    flag_v: &'static str,
    set_file: fn(&mut FileConfig),
    set_flag: fn(&mut Overrides),
    get: fn(&Resolved) -> String,
}

fn key_cases() -> Vec<KeyCase> {
    fn model(f: &mut FileConfig) -> &mut mmfas_cli::config::ModelSection {
        f.model.get_or_insert_with(Default::default)
    }
    fn adapter(f: &mut FileConfig) -> &mut mmfas_cli::config::AdapterSection {
        f.adapter.get_or_insert_with(Default::default)
    }
    fn descriptors(f: &mut FileConfig) -> &mut mmfas_cli::config::DescriptorSection {
        f.descriptors.get_or_insert_with(Default::default)
    }
    fn pretrain(f: &mut FileConfig) -> &mut mmfas_cli::config::PretrainSection {
        f.pretrain.get_or_insert_with(Default::default)
    }
    fn finetune(f: &mut FileConfig) -> &mut mmfas_cli::config::FinetuneSection {
        f.finetune.get_or_insert_with(Default::default)
    }
    fn data(f: &mut FileConfig) -> &mut mmfas_cli::config::DataSection {
        f.data.get_or_insert_with(Default::default)
    }
    fn metrics(f: &mut FileConfig) -> &mut mmfas_cli::config::MetricsSection {
        f.metrics.get_or_insert_with(Default::default)
    }

    vec![
        KeyCase {
            name: "seed",
            default_v: "42",
            file_v: "7",
            flag_v: "9",
            set_file: |f| f.seed = Some(7),
            set_flag: |o| o.seed = Some(9),
            get: |r| r.seed.to_string(),
        },
        KeyCase {
            name: "model.embed_dim",
            default_v: "64",
            file_v: "96",
            flag_v: "128",
            set_file: |f| model(f).embed_dim = Some(96),
            set_flag: |o| o.embed_dim = Some(128),
            get: |r| r.vit.embed_dim.to_string(),
        },
        KeyCase {
            name: "model.depth",
            default_v: "2",
            file_v: "1",
            flag_v: "3",
            set_file: |f| model(f).depth = Some(1),
            set_flag: |o| o.depth = Some(3),
            get: |r| r.vit.depth.to_string(),
        },
        KeyCase {
            name: "model.patch_size",
            default_v: "16",
            file_v: "32",
            flag_v: "8",
            set_file: |f| model(f).patch_size = Some(32),
            set_flag: |o| o.patch_size = Some(8),
            get: |r| r.vit.patch_size.to_string(),
        },
        KeyCase {
            name: "model.heads",
            default_v: "4",
            file_v: "2",
            flag_v: "8",
            set_file: |f| model(f).heads = Some(2),
            set_flag: |o| o.heads = Some(8),
            get: |r| r.vit.heads.to_string(),
        },
        KeyCase {
            name: "model.modalities",
            default_v: "rgb,ir,depth",
            file_v: "rgb,depth",
            flag_v: "ir",
            set_file: |f| model(f).modalities = Some(vec!["rgb".into(), "depth".into()]),
            set_flag: |o| o.modalities = Some("ir".into()),
            get: |r| {
                r.modalities
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(",")
            },
        },
        KeyCase {
            name: "model.per_modality_pos",
            default_v: "true",
            file_v: "false",
            flag_v: "true",
            set_file: |f| model(f).per_modality_pos = Some(false),
            set_flag: |o| o.per_modality_pos = Some(true),
            get: |r| r.vit.per_modality_pos.to_string(),
        },
        KeyCase {
            name: "adapter.kind",
            default_v: "ama",
            file_v: "conv",
            flag_v: "vanilla_fc",
            set_file: |f| adapter(f).kind = Some("conv".into()),
            set_flag: |o| o.adapter_kind = Some("vanilla_fc".into()),
            get: |r| r.adapter.kind.as_str().to_string(),
        },
        KeyCase {
            name: "adapter.hidden_dim",
            default_v: "16",
            file_v: "8",
            flag_v: "24",
            set_file: |f| adapter(f).hidden_dim = Some(8),
            set_flag: |o| o.adapter_dim = Some(24),
            get: |r| r.adapter.hidden_dim.to_string(),
        },
        KeyCase {
            name: "adapter.position",
            default_v: "mhsa_and_ffn",
            file_v: "mhsa",
            flag_v: "ffn",
            set_file: |f| adapter(f).position = Some("mhsa".into()),
            set_flag: |o| o.adapter_position = Some("ffn".into()),
            get: |r| r.adapter.position.as_str().to_string(),
        },
        KeyCase {
            name: "descriptors.hog_cell_size",
            default_v: "8",
            file_v: "16",
            flag_v: "4",
            set_file: |f| descriptors(f).hog_cell_size = Some(16),
            set_flag: |o| o.hog_cell_size = Some(4),
            get: |r| r.descriptors.hog.cell_size.to_string(),
        },
        KeyCase {
            name: "pretrain.mask_ratio",
            default_v: "0.4",
            file_v: "0.25",
            flag_v: "0.75",
            set_file: |f| pretrain(f).mask_ratio = Some(0.25),
            set_flag: |o| o.mask_ratio = Some(0.75),
            get: |r| r.pretrain.mask_ratio.to_string(),
        },
        KeyCase {
            name: "pretrain.epochs",
            default_v: "20",
            file_v: "3",
            flag_v: "5",
            set_file: |f| pretrain(f).epochs = Some(3),
            set_flag: |o| o.pretrain_epochs = Some(5),
            get: |r| r.pretrain.epochs.to_string(),
        },
        KeyCase {
            name: "finetune.optimizer",
            default_v: "adam",
            file_v: "adam_w",
            flag_v: "adam",
            set_file: |f| finetune(f).optimizer = Some("adam_w".into()),
            set_flag: |o| o.optimizer = Some("adam".into()),
            get: |r| r.finetune.optimizer.as_str().to_string(),
        },
        KeyCase {
            name: "finetune.lr",
            default_v: "0.0002",
            file_v: "0.001",
            flag_v: "0.005",
            set_file: |f| finetune(f).lr = Some(0.001),
            set_flag: |o| o.lr = Some(0.005),
            get: |r| r.finetune.lr.to_string(),
        },
        KeyCase {
            name: "finetune.batch_size",
            default_v: "16",
            file_v: "4",
            flag_v: "32",
            set_file: |f| finetune(f).batch_size = Some(4),
            set_flag: |o| o.batch_size = Some(32),
            get: |r| r.finetune.batch_size.to_string(),
        },
        KeyCase {
            name: "finetune.freeze",
            default_v: "adapters_only",
            file_v: "head_only",
            flag_v: "last_block",
            set_file: |f| finetune(f).freeze = Some("head_only".into()),
            set_flag: |o| o.freeze = Some("last_block".into()),
            get: |r| r.finetune.freeze.as_str().to_string(),
        },
        KeyCase {
            name: "finetune.recipe_ir",
            default_v: "gray_hog_plgf",
            file_v: "lbp",
            flag_v: "hog",
            set_file: |f| finetune(f).recipe_ir = Some("lbp".into()),
            set_flag: |o| o.recipe_ir = Some("hog".into()),
            get: |r| r.finetune.input_policy.ir.name().to_string(),
        },
        KeyCase {
            name: "finetune.grad_clip",
            default_v: "none",
            file_v: "2.5",
            flag_v: "none",
            set_file: |f| finetune(f).grad_clip = Some(2.5),
            set_flag: |o| o.grad_clip = Some(0.0),
            get: |r| match r.finetune.grad_clip {
                Some(c) => c.to_string(),
                None => "none".to_string(),
            },
        },
        KeyCase {
            name: "data.n_per_class",
            default_v: "25",
            file_v: "4",
            flag_v: "6",
            set_file: |f| data(f).n_per_class = Some(4),
            set_flag: |o| o.n_per_class = Some(6),
            get: |r| r.n_per_class.to_string(),
        },
        KeyCase {
            name: "metrics.fpr_target",
            default_v: "0.01",
            file_v: "0.05",
            flag_v: "0.1",
            set_file: |f| metrics(f).fpr_target = Some(0.05),
            set_flag: |o| o.fpr_target = Some(0.1),
            get: |r| r.fpr_target.to_string(),
        },
    ]
}

/// Flags override file keys, file keys override defaults, untouched keys
/// keep their defaults — checked on random key subsets.
#[test]
fn flags_override_file_keys_and_file_keys_override_defaults() {
    let cases = key_cases();
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    for trial in 0..60 {
        let mut file = FileConfig::default();
        let mut flags = Overrides::default();
        // Per key: 0 = default, 1 = file only, 2 = flag only, 3 = both.
        let draws: Vec<u8> = (0..cases.len()).map(|_| rng.gen_range(0..4u8)).collect();
        for (case, &d) in cases.iter().zip(&draws) {
            if d == 1 || d == 3 {
                (case.set_file)(&mut file);
            }
            if d == 2 || d == 3 {
                (case.set_flag)(&mut flags);
            }
        }
        let resolved = resolve_from(Some(&file), &flags)
            .unwrap_or_else(|e| panic!("trial {trial} failed to resolve: {e}"));
        for (case, &d) in cases.iter().zip(&draws) {
            let expect = match d {
                0 => case.default_v,
                1 => case.file_v,
                _ => case.flag_v,
            };
            assert_eq!(
                (case.get)(&resolved),
                expect,
                "trial {trial}, key {}, draw {d}",
                case.name
            );
        }
        // The TOML document must survive a serialize/parse/resolve cycle.
        let echo = resolved.echo();
        let reparsed = FileConfig::parse(&echo).expect("echo parses");
        let again = resolve_from(Some(&reparsed), &Overrides::default())
            .expect("echo resolves");
        assert_eq!(again.echo(), echo, "trial {trial}: echo is not a fixpoint");
    }
}

#[test]
fn selection_rule_validation_rejects_inconsistent_settings() {
    // bpcer_target selection without a target value.
    let mut flags = Overrides::default();
    flags.selection = Some("bpcer_target".into());
    assert!(resolve_from(None, &flags).is_err());

    // A target value alone while the rule stays eer.
    let mut flags = Overrides::default();
    flags.bpcer_target = Some(0.05);
    assert!(resolve_from(None, &flags).is_err());

    // Both together resolve.
    let mut flags = Overrides::default();
    flags.selection = Some("bpcer_target".into());
    flags.bpcer_target = Some(0.05);
    let r = resolve_from(None, &flags).expect("resolves");
    let echo = r.echo();
    assert!(echo.contains("selection = \"bpcer_target\""));
    assert!(echo.contains("bpcer_target = 0.05"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(FileConfig::parse("voodoo = 1\n").is_err());
    assert!(FileConfig::parse("[model]\nwidth = 3\n").is_err());
    assert!(FileConfig::parse("[finetune]\nmodalities = [\"rgb\"]\n").is_err());
}

// ---------------------------------------------------------------------------
// Binary-level contracts
// ---------------------------------------------------------------------------

#[test]
fn gen_data_is_deterministic_across_processes() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run_ok(mmfas().args(["gen-data", "--n", "2", "--size", "32", "--out"]).arg(dir));
    }
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb, "two gen-data runs differ");

    // A different seed must change the pixel data.
    let c = tmp.path().join("c");
    run_ok(mmfas()
        .args(["gen-data", "--n", "2", "--size", "32", "--seed", "7", "--out"])
        .arg(&c));
    assert_ne!(tree_bytes(&c), ta, "seed change left the dataset identical");
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ds");
    assert_eq!(
        exit_code(mmfas().args(["gen-data", "--n", "0", "--out"]).arg(&out)),
        2,
        "n = 0 must be rejected"
    );

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let mut cmd = mmfas();
    cmd.args(["gen-data", "--n", "1", "--out"]).arg(&out);
    cmd.arg("--config").arg(&bad);
    assert_eq!(exit_code(&mut cmd), 2, "unknown config key must be rejected");

    assert_eq!(
        exit_code(mmfas().args(["gradcheck", "--module", "nonsense"])),
        2
    );
    assert_eq!(exit_code(mmfas().arg("evaluate")), 2, "evaluate needs inputs");
    assert_eq!(
        exit_code(mmfas().args(["sweep", "--axis", "nonsense", "--out"]).arg(&out)),
        2
    );
}

#[test]
fn extract_matches_the_library_map_bitwise() {
    let tmp = TempDir::new().unwrap();
    // A seeded random RGB image, written through the 8-bit image format.
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let (h, w) = (32, 32);
    let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let img = PlanarImage { channels: 3, height: h, width: w, data };
    let src = tmp.path().join("input.ppm");
    write_ppm(&src, &img).unwrap();

    let out = tmp.path().join("map.ppm");
    let dump = tmp.path().join("map.hex");
    let mut cmd = mmfas();
    cmd.args(["extract", "--recipe", "gray_hog_plgf"]);
    cmd.arg("--in").arg(&src);
    cmd.arg("--out").arg(&out);
    cmd.arg("--float-dump").arg(&dump);
    run_ok(&mut cmd);

    // The library's own map on the quantized on-disk image.
    let stored = read_ppm(&src).unwrap();
    let expect = Recipe::GrayHogPlgf
        .apply(&stored, &DescriptorConfig::default())
        .unwrap();

    let text = std::fs::read_to_string(&dump).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        format!("{} {} {}", expect.channels, expect.height, expect.width)
    );
    let values: Vec<f64> = lines
        .map(|l| f64::from_bits(u64::from_str_radix(l, 16).expect("hex line")))
        .collect();
    assert_eq!(values.len(), expect.data.len());
    for (i, (got, want)) in values.iter().zip(&expect.data).enumerate() {
        assert_eq!(got.to_bits(), want.to_bits(), "value {i} differs");
    }

    // The rendered PPM is the quantized map.
    let rendered = read_ppm(&out).unwrap();
    assert_eq!(rendered.channels, 3);
    assert_eq!((rendered.height, rendered.width), (h, w));

    // A two-channel recipe splits into per-channel PGM files.
    let out2 = tmp.path().join("two.pgm");
    let mut cmd = mmfas();
    cmd.args(["extract", "--recipe", "hog_plgf"]);
    cmd.arg("--in").arg(&src);
    cmd.arg("--out").arg(&out2);
    run_ok(&mut cmd);
    for c in 0..2 {
        let path = tmp.path().join(format!("two_c{c}.pgm"));
        let gray = read_pgm(&path).unwrap();
        assert_eq!((gray.height, gray.width), (h, w));
    }
}

#[test]
fn evaluate_reports_the_library_metrics_from_score_files() {
    let tmp = TempDir::new().unwrap();
    let row = |id: &str, label, score| ScoreRow { id: id.into(), label, score };
    let dev = ScoreSet::new(
        Split::Dev,
        vec![
            row("d0", Label::BonaFide, 0.9),
            row("d1", Label::BonaFide, 0.8),
            row("d2", Label::BonaFide, 0.3),
            row("d3", Label::Attack, 0.6),
            row("d4", Label::Attack, 0.2),
            row("d5", Label::Attack, 0.1),
        ],
    )
    .unwrap();
    let test = ScoreSet::new(
        Split::Test,
        vec![
            row("t0", Label::BonaFide, 0.95),
            row("t1", Label::BonaFide, 0.7),
            row("t2", Label::BonaFide, 0.5),
            row("t3", Label::Attack, 0.65),
            row("t4", Label::Attack, 0.4),
            row("t5", Label::Attack, 0.05),
        ],
    )
    .unwrap();
    let dev_path = tmp.path().join("dev.csv");
    let test_path = tmp.path().join("test.csv");
    dev.write_csv(&dev_path).unwrap();
    test.write_csv(&test_path).unwrap();

    let mut cmd = mmfas();
    cmd.arg("evaluate");
    cmd.arg("--scores").arg(&test_path);
    cmd.arg("--threshold-from").arg(&dev_path);
    let stdout = run_ok(&mut cmd);

    let report = evaluate(&dev, &test, 0.01).unwrap();
    let expected = [
        format!("threshold {}", report.threshold),
        format!("dev_eer {}", report.dev_eer),
        format!("apcer {}", report.apcer),
        format!("bpcer {}", report.bpcer),
        format!("acer {}", report.acer),
        format!("hter {}", report.hter),
        format!("tpr {} (at fpr {})", report.tpr, report.fpr_target),
    ];
    for line in &expected {
        assert!(
            stdout.lines().any(|l| l == line),
            "missing line {line:?} in output:\n{stdout}"
        );
    }
}

#[test]
fn checkpoint_evaluation_reproduces_the_training_scores() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    run_ok(mmfas()
        .args(["finetune", "--n-per-class", "2", "--max-epochs", "1", "--out"])
        .arg(&run_dir));

    let eval_dir = tmp.path().join("eval");
    let mut cmd = mmfas();
    cmd.arg("evaluate");
    cmd.arg("--checkpoint").arg(run_dir.join("checkpoint.bin"));
    cmd.arg("--out").arg(&eval_dir);
    run_ok(&mut cmd);

    for name in ["scores_dev.csv", "scores_test.csv"] {
        let trained = std::fs::read(run_dir.join(name)).unwrap();
        let rescored = std::fs::read(eval_dir.join(name)).unwrap();
        assert_eq!(trained, rescored, "{name} differs after reloading");
    }
}

#[test]
fn pretrain_writes_checkpoint_losses_and_echo() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("pt");
    run_ok(mmfas()
        .args(["pretrain", "--n-per-class", "1", "--pretrain-epochs", "2", "--out"])
        .arg(&out));

    let ckpt = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.provenance, Provenance::Pretrained);
    assert!(ckpt.tensors.keys().any(|k| k.starts_with("decoder.")));
    assert!(ckpt.tensors.keys().any(|k| k.starts_with("block.")));

    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 3, "one row per epoch");

    // The echoed config must itself be a loadable config document.
    let echo = std::fs::read_to_string(out.join("config.echo")).unwrap();
    FileConfig::parse(&echo).expect("echo parses as a config file");
}

#[test]
fn dump_recon_writes_one_triptych_per_modality() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("recon");
    run_ok(mmfas()
        .args(["dump-recon", "--n-per-class", "1", "--split", "dev", "--index", "0", "--out"])
        .arg(&out));
    for tag in ["input", "masked", "recon"] {
        assert!(out.join(format!("dev_none_0000_rgb_{tag}.ppm")).is_file());
        assert!(out.join(format!("dev_none_0000_ir_{tag}.pgm")).is_file());
        assert!(out.join(format!("dev_none_0000_depth_{tag}.pgm")).is_file());
    }
    assert!(out.join("config.echo").is_file());
}

#[test]
fn data_root_env_var_fills_in_when_no_flag_or_file_names_one() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    run_ok(mmfas().args(["gen-data", "--n", "1", "--out"]).arg(&ds));

    // Finetune via the environment variable; loading fails if it is not
    // honored because the model would train on regenerated data with a
    // different id set than this tiny root provides.
    let missing = tmp.path().join("missing");
    let mut cmd = mmfas();
    cmd.args(["finetune", "--max-epochs", "1", "--out"]);
    cmd.arg(tmp.path().join("run"));
    cmd.env(DATA_ROOT_ENV, &missing);
    assert_eq!(exit_code(&mut cmd), 2, "a bogus env root must fail the load");

    let mut cmd = mmfas();
    cmd.args(["finetune", "--max-epochs", "1", "--out"]);
    cmd.arg(tmp.path().join("run2"));
    cmd.env(DATA_ROOT_ENV, &ds);
    run_ok(&mut cmd);

    // An explicit flag beats the environment variable.
    let mut cmd = mmfas();
    cmd.args(["finetune", "--max-epochs", "1", "--out"]);
    cmd.arg(tmp.path().join("run3"));
    cmd.env(DATA_ROOT_ENV, &missing);
    cmd.arg("--data-root").arg(&ds);
    run_ok(&mut cmd);
}

#[test]
fn parallel_sweep_matches_the_inline_sweep_bytewise() {
    let tmp = TempDir::new().unwrap();
    let (inline_dir, jobs_dir) = (tmp.path().join("inline"), tmp.path().join("jobs"));
    let base_args = [
        "sweep",
        "--axis",
        "freeze_policy",
        "--grid",
        "head_only,last_block,all_blocks",
        "--n-per-class",
        "2",
        "--max-epochs",
        "1",
    ];
    run_ok(mmfas().args(base_args).arg("--out").arg(&inline_dir));
    run_ok(mmfas()
        .args(base_args)
        .args(["--jobs", "2"])
        .arg("--out")
        .arg(&jobs_dir));

    let (ti, tj) = (tree_bytes(&inline_dir), tree_bytes(&jobs_dir));
    assert!(ti.contains_key("summary.csv"));
    assert_eq!(
        ti.keys().collect::<Vec<_>>(),
        tj.keys().collect::<Vec<_>>(),
        "run directories differ"
    );
    for (name, bytes) in &ti {
        assert_eq!(bytes, &tj[name], "{name} differs between drivers");
    }

    let summary = String::from_utf8(ti["summary.csv"].clone()).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "axis,value,selected_epoch,dev_eer,test_apcer,test_bpcer,test_acer,test_hter,tpr"
    );
    assert_eq!(lines.len(), 4, "header plus one row per grid point");
    for (i, value) in ["head_only", "last_block", "all_blocks"].iter().enumerate() {
        assert!(
            lines[i + 1].starts_with(&format!("freeze_policy,{value},")),
            "row {i} out of order: {}",
            lines[i + 1]
        );
    }
}

#[test]
fn finetune_rejects_data_whose_size_mismatches_the_model() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds32");
    run_ok(mmfas().args(["gen-data", "--n", "1", "--size", "32", "--out"]).arg(&ds));
    let mut cmd = mmfas();
    cmd.args(["finetune", "--max-epochs", "1", "--out"]);
    cmd.arg(tmp.path().join("run"));
    cmd.arg("--data-root").arg(&ds);
    assert_eq!(exit_code(&mut cmd), 2, "32px data cannot feed a 64px model");
}
