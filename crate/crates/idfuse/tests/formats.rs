//! Config files, checkpoints, datasets, logs and reports.

use std::path::Path;

use idfuse::checkpoint::Checkpoint;
use idfuse::config_file::{load_config, parse_config, parse_grid, serialize_config};
use idfuse::dataset::{label_of, load_dataset};
use idfuse::imageio::{load_contour, load_rgb, save_png};
use idfuse::logs::{read_loss_log, LossLog};
use idfuse::report::{read_metrics, text_table, write_metrics};
use idfuse::Error;
use idfuse_core::config::{full_profile, toy_profile, AblationFlags, ExperimentConfig, Modality, PAPER_LAMBDAS};
use idfuse_core::data::{build_pairs, procedural_dataset, ContourSpec, ImageTensor};
use idfuse_core::encoder::LatentBundle;
use idfuse_core::generator::Generator;
use idfuse_core::identity::Embedder;
use idfuse_core::losses::{total_loss, LossTerms};
use idfuse_core::metrics::MetricsRow;
use idfuse_core::trainer::{TrainSchedule, Trainer};
use idfuse_core::Tensor;

#[test]
fn empty_file_gives_paper_defaults() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg.lambdas, [0.1, 1.0, 0.5, 0.003]);
    assert_eq!(cfg.lambdas, PAPER_LAMBDAS);
    assert_eq!((cfg.learning_rate, cfg.batch_size), (1e-4, 8));
}

#[test]
fn values_are_echoed_back() {
    let cfg = parse_config("# experiment\nbatch_size=8\nlr=1e-4   # paper value\n\nmodality = sketch\n").unwrap();
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.learning_rate, 1e-4);
    assert_eq!(cfg.modality, Modality::Sketch);
    let text = serialize_config(&cfg);
    assert!(text.contains("batch_size=8\n") && text.contains("learning_rate=0.0001\n"));
}

#[test]
fn serialization_round_trips() {
    let cfg = ExperimentConfig {
        lambdas: [0.3, 1.0 / 3.0, 0.0, 1e-7],
        learning_rate: 2.5e-5,
        ablation: AblationFlags::IFBLOCK,
        seed: u64::MAX,
        modality: Modality::Mask,
        mask_classes: 6,
        dataset: idfuse_core::config::DatasetSource::Path("/data/faces dir".into()),
        scale: full_profile(),
        ..ExperimentConfig::default()
    };
    assert_eq!(parse_config(&serialize_config(&cfg)).unwrap(), cfg);
}

#[test]
fn documented_example_parses() {
    let text = r#"# toy overfit run
scale = toy
lambda1 = 0.1          # l2
lambda2 = 1.0          # perceptual
lambda3 = 0.5          # identity
lambda4 = 0.003        # w-norm
learning_rate = 1e-4
batch_size = 8
refinement_steps = 5
ablation = full        # baseline | ifblock | input_latent | full, or TTF-style letters
modality = lr          # lr | sketch | mask
dataset = procedural:8x8   # or a directory / manifest path
max_train_pairs = 16
train_steps = 500
checkpoint_every = 100
seed = 0
"#;
    let cfg = parse_config(text).unwrap();
    assert_eq!(cfg.lambdas, PAPER_LAMBDAS);
    assert_eq!(
        (cfg.max_train_pairs, cfg.train_steps, cfg.checkpoint_every),
        (16, 500, 100)
    );
    assert_eq!(cfg.ablation, AblationFlags::FULL);
    assert_eq!(cfg.modality, Modality::LowRes);
}

#[test]
fn errors_name_the_field_or_line() {
    let e = parse_config("lambda1=-1").unwrap_err();
    assert!(
        matches!(&e, Error::Core(idfuse_core::Error::Validation { field, .. }) if field == "lambda1"),
        "{e}"
    );
    let e = parse_config("batch_size=8\nbatch_size=eight").unwrap_err().to_string();
    assert!(e.contains("line 2") && e.contains("batch_size"), "{e}");
    let e = parse_config("\nlearning_rat=1").unwrap_err().to_string();
    assert!(e.contains("line 2") && e.contains("learning_rat"), "{e}");
    let e = parse_config("just words").unwrap_err().to_string();
    assert!(e.contains("line 1"), "{e}");
    assert!(parse_config("batch_size=0").is_err());
    assert!(parse_config("refinement_steps=0").is_err());
}

#[test]
fn overrides_win_and_are_validated_last() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.cfg");
    std::fs::write(&path, "lambda1=-1\nseed=4\n").unwrap();
    assert!(load_config(Some(&path), &[]).is_err());
    let cfg = load_config(Some(&path), &["lambda1=0.2".into(), "seed=9".into()]).unwrap();
    assert_eq!((cfg.lambdas[0], cfg.seed), (0.2, 9));
    let e = load_config(None, &["seed".into()]).unwrap_err().to_string();
    assert!(e.contains("--set"), "{e}");
}

#[test]
fn ablation_grid_keeps_order() {
    let grid = parse_grid("full, baseline,TFF,input_latent").unwrap();
    assert_eq!(
        grid,
        [
            AblationFlags::FULL,
            AblationFlags::BASELINE,
            AblationFlags::IFBLOCK,
            AblationFlags::INPUT_LATENT
        ]
    );
    assert!(parse_grid("TT").is_err());
    assert!(parse_grid("").is_err());
}

fn small_trainer(flags: AblationFlags) -> Trainer {
    let p = toy_profile();
    let mut gen = Generator::<f32>::new(&p, 0).unwrap();
    gen.freeze();
    let avg = gen.average_code(128, 0).unwrap();
    gen.set_average_code(avg).unwrap();
    let cfg = ExperimentConfig {
        ablation: flags,
        refinement_steps: 2,
        batch_size: 2,
        ..ExperimentConfig::default()
    };
    Trainer::new(cfg, gen, Embedder::new(&p, 1), None).unwrap()
}

fn train_steps(tr: &mut Trainer, n: u64) {
    let recs = procedural_dataset(3, 2, 64, 0);
    let spec = ContourSpec {
        modality: Modality::LowRes,
        lr_size: 8,
        mask_classes: 4,
    };
    let pairs = build_pairs(&recs, spec, 1, 0).unwrap();
    let schedule = TrainSchedule::new(&pairs, &tr.config).unwrap();
    let until = tr.step + n;
    tr.run(&schedule, until, |_, _| Ok(())).unwrap();
}

fn probe(tr: &Trainer) -> Tensor<f32> {
    let p = &tr.config.scale;
    let bundle = LatentBundle {
        style: Tensor::from_fn(&[2, p.style_layer_count, p.style_dim], |i| {
            ((i % 13) as f32 - 6.0) * 0.1
        }),
        input_latent: Tensor::from_fn(&[2, p.input_latent_channels, 4, 4], |i| ((i % 7) as f32 - 3.0) * 0.2),
    };
    tr.generator.synthesize(&bundle).unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut tr = small_trainer(AblationFlags::INPUT_LATENT);
    train_steps(&mut tr, 2);
    let path = dir.path().join("ck.idf");
    let ck = Checkpoint::capture(&tr).unwrap();
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let mut back = loaded.into_trainer().unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.config, tr.config);
    assert_eq!(probe(&back), probe(&tr));
    let recs = procedural_dataset(2, 1, 64, 3);
    let contour = ContourSpec {
        modality: Modality::LowRes,
        lr_size: 8,
        mask_classes: 4,
    }
    .make(&recs[0])
    .unwrap();
    assert_eq!(
        back.refine(&contour, &recs[1].image, 2, None).unwrap(),
        tr.refine(&contour, &recs[1].image, 2, None).unwrap()
    );
    // Optimizer moments survive: the next update is identical.
    train_steps(&mut tr, 1);
    train_steps(&mut back, 1);
    assert_eq!(back.encoder.params().fingerprint(), tr.encoder.params().fingerprint());
    assert_eq!(back.identity.params().fingerprint(), tr.identity.params().fingerprint());
    assert_eq!(back.loss_history(), tr.loss_history());
}

#[test]
fn checkpoint_from_another_profile_is_a_shape_error() {
    let tr = small_trainer(AblationFlags::IFBLOCK);
    let mut ck = Checkpoint::capture(&tr).unwrap();
    ck.config.scale = full_profile();
    let mut target = small_trainer(AblationFlags::IFBLOCK);
    let e = ck.restore_into(&mut target).unwrap_err();
    assert!(matches!(&e, Error::Core(idfuse_core::Error::Shape { .. })), "{e}");
    assert!(e.to_string().contains("full") && e.to_string().contains("toy"), "{e}");
}

#[test]
fn checkpoint_with_other_flags_names_the_parameters() {
    let ck = Checkpoint::capture(&small_trainer(AblationFlags::BASELINE)).unwrap();
    let mut target = small_trainer(AblationFlags::INPUT_LATENT);
    let e = ck.restore_into(&mut target).unwrap_err().to_string();
    assert!(e.contains("parameter mismatch"), "{e}");
}

#[test]
fn corrupt_or_missing_checkpoints_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Checkpoint::load(&dir.path().join("none.idf")),
        Err(Error::Io { .. })
    ));
    let bytes = Checkpoint::capture(&small_trainer(AblationFlags::BASELINE))
        .unwrap()
        .to_bytes();
    let bad = dir.path().join("bad.idf");
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { .. })));
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(matches!(Checkpoint::load(&bad), Err(Error::Format { .. })));
}

fn write_faces(dir: &Path, names: &[&str], side: usize) {
    for (i, name) in names.iter().enumerate() {
        let img = ImageTensor::from_fn(3, side, side, |c, y, x| ((c + y + x + i) % 5) as f32 / 4.0);
        save_png(&dir.join(name), &img).unwrap();
    }
}

#[test]
fn directory_labels_come_from_file_name_prefixes() {
    assert_eq!(label_of(Path::new("a/bob_001.png")).as_deref(), Some("bob"));
    assert_eq!(label_of(Path::new("alice.png")).as_deref(), Some("alice"));
    let dir = tempfile::tempdir().unwrap();
    write_faces(dir.path(), &["bob_1.png", "alice_2.png", "bob_3.png"], 8);
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.labels, ["alice", "bob"]);
    assert_eq!(ds.records.iter().map(|r| r.label).collect::<Vec<_>>(), [0, 1, 1]);
    let img = load_rgb(&dir.path().join("alice_2.png")).unwrap();
    assert_eq!(ds.records[0].image, img);
}

#[test]
fn manifest_ingestion_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_faces(dir.path(), &["x.png", "y.png"], 8);
    let manifest = dir.path().join("faces.tsv");
    std::fs::write(&manifest, "# label\tpath\nanna\tx.png\nben\ty.png\n").unwrap();
    let ds = load_dataset(&manifest).unwrap();
    assert_eq!(ds.labels, ["anna", "ben"]);
    assert_eq!(ds.records.len(), 2);
    std::fs::write(&manifest, "anna x.png\n").unwrap();
    assert!(load_dataset(&manifest).unwrap_err().to_string().contains("line 1"));
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path()).is_err());
    write_faces(empty.path(), &["a_1.png"], 8);
    save_png(&empty.path().join("a_2.png"), &ImageTensor::filled(3, 8, 6, 0.5)).unwrap();
    assert!(load_dataset(empty.path()).unwrap_err().to_string().contains("square"));
}

#[test]
fn png_and_contour_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::from_fn(3, 4, 4, |c, y, x| ((c * 16 + y * 4 + x) * 5) as f32 / 255.0);
    let path = dir.path().join("img.png");
    save_png(&path, &img).unwrap();
    assert_eq!(load_rgb(&path).unwrap(), img);
    // Masks are saved as a grayscale class encoding.
    let four = ImageTensor::from_fn(4, 4, 4, |c, y, _| if c == y { 1.0 } else { 0.0 });
    save_png(&path, &four).unwrap();
    let back = load_contour(&path, Modality::Mask, 4).unwrap();
    assert_eq!(back.image, four);
    let sketch = ImageTensor::from_fn(1, 4, 4, |_, y, x| if x == y { 1.0 } else { 0.0 });
    save_png(&path, &sketch).unwrap();
    assert_eq!(load_contour(&path, Modality::Sketch, 4).unwrap().image, sketch);
}

#[test]
fn loss_log_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("losses.csv");
    let report = total_loss(
        LossTerms {
            l2: 1.0,
            perceptual: 1.0,
            identity: 1.0,
            wnorm: 1.0,
        },
        PAPER_LAMBDAS,
    );
    let mut log = LossLog::create(&path).unwrap();
    log.write(1, &report).unwrap();
    drop(log);
    LossLog::append(&path).unwrap().write(2, &report).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,l2,perceptual,identity,wnorm,total\n"));
    let rows = read_loss_log(&path).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].0, 2);
    assert!((rows[0].1[4] - 1.603).abs() < 1e-12);
}

#[test]
fn metrics_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let row = MetricsRow {
        tag: "+IFBlock".into(),
        n_samples: 60,
        lpips: 0.25,
        idsim: 0.75,
        fid: 12.5,
    };
    let txt = write_metrics(std::slice::from_ref(&row), &path).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap(), "tag,n_samples,lpips,idsim,fid");
    assert_eq!(read_metrics(&path).unwrap(), std::slice::from_ref(&row));
    let table = std::fs::read_to_string(txt).unwrap();
    assert_eq!(table, text_table(&[row]));
    assert!(table.contains("LPIPS↓") && table.contains("IDSIM↑") && table.contains("FID↓"));
    assert!(write_metrics(&[], &path).is_err());
}
