use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualcurr::dec::{self, ScheduleMode};
use dualcurr::dmc::PseudoLabelAccumulator;
use dualcurr::filter::{self, RoundConfig};
use dualcurr::records::PredictionRecord;
use dualcurr::sim::{SyntheticWorld, WorldSpec};
use dualcurr_cli::commands;
use dualcurr_cli::config::RunConfig;
use dualcurr_cli::main_with_args;
use dualcurr_cli::metrics::HEADER;
use tempfile::TempDir;

struct World {
    dir: TempDir,
    spec: WorldSpec,
    world: SyntheticWorld,
    preds: Vec<PredictionRecord>,
}

impl World {
    fn new(seed: u64, images: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = WorldSpec::standard(seed, images);
        let (world, preds) = commands::cmd_simulate(&spec, &dir.path().join("world")).unwrap();
        World {
            dir,
            spec,
            world,
            preds,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn input(&self, name: &str) -> String {
        self.path("world").join(name).display().to_string()
    }
}

fn run_cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("dualcurr").chain(args.iter().copied()))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn simulate_writes_loadable_world() {
    let w = World::new(4, 50);
    for name in commands::SIMULATED {
        assert!(w.path("world").join(name).is_file(), "{name}");
    }
    let cfg = RunConfig::load(&w.path("world/run.toml")).unwrap();
    let inputs = commands::RunInputs::load(&cfg.inputs).unwrap();
    assert_eq!(inputs.predictions, w.preds);
    let mut gt = inputs.ground_truth.clone();
    let mut want = w.world.ground_truth.clone();
    gt.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    want.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    assert_eq!(gt.len(), want.len());
    for (a, b) in gt.iter().zip(&want) {
        assert_eq!(a.domain_id, b.domain_id);
        let ca: Vec<usize> = a.objects.iter().map(|o| o.class).collect();
        let cb: Vec<usize> = b.objects.iter().map(|o| o.class).collect();
        assert_eq!(ca, cb);
    }
    assert_eq!(cfg.params.seed, Some(w.spec.seed));

    let out = w.path("again");
    let out_s = out.display().to_string();
    assert_eq!(
        run_cli(&["simulate", "--seed", "4", "--images", "50", "--out", &out_s]),
        0
    );
    for name in commands::SIMULATED {
        if name != "run.toml" {
            assert_eq!(
                std::fs::read(out.join(name)).unwrap(),
                std::fs::read(w.path("world").join(name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn similarity_csv_matches_naive_means() {
    let w = World::new(7, 120);
    let out = w.path("stats.csv");
    let code = run_cli(&[
        "similarity",
        "--predictions",
        &w.input("predictions.jsonl"),
        "--catalog",
        &w.input("catalog.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let stats = dec::read_stats_csv(std::fs::File::open(&out).unwrap()).unwrap();
    let mut per_domain: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &w.preds {
        let s = if r.boxes.is_empty() {
            0.0
        } else {
            r.boxes
                .iter()
                .map(|b| b.scores.iter().copied().fold(0.0, f64::max))
                .sum::<f64>()
                / r.boxes.len() as f64
        };
        per_domain.entry(&r.domain_id).or_default().push(s);
    }
    assert_eq!(stats.len(), per_domain.len());
    for s in &stats {
        let v = &per_domain[s.domain_id.as_str()];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((s.similarity - mean).abs() < 1e-12, "{}", s.domain_id);
        assert_eq!(s.image_count, v.len());
    }
}

#[test]
fn schedule_from_stats_and_predictions_agree() {
    let w = World::new(8, 80);
    let stats = w.path("stats.csv");
    let preds = w.input("predictions.jsonl");
    let catalog = w.input("catalog.toml");
    assert_eq!(
        run_cli(&[
            "similarity",
            "--predictions",
            &preds,
            "--catalog",
            &catalog,
            "--out",
            stats.to_str().unwrap()
        ]),
        0
    );
    let a = w.path("a.json");
    let b = w.path("b.json");
    let c = w.path("c.json");
    assert_eq!(
        run_cli(&[
            "schedule",
            "--stats",
            stats.to_str().unwrap(),
            "--catalog",
            &catalog,
            "--out",
            a.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        run_cli(&[
            "schedule",
            "--predictions",
            &preds,
            "--catalog",
            &catalog,
            "--out",
            b.to_str().unwrap()
        ]),
        0
    );
    let from_stats =
        dec::CurriculumSchedule::from_reader(std::fs::File::open(&a).unwrap()).unwrap();
    let from_preds =
        dec::CurriculumSchedule::from_reader(std::fs::File::open(&b).unwrap()).unwrap();
    assert_eq!(from_stats, from_preds);
    assert_eq!(from_stats.phase_count(), 4);
    let units: usize = from_stats.phases.iter().map(Vec::len).sum();
    assert_eq!(units, 8);
    assert!(from_stats
        .phases
        .iter()
        .flatten()
        .all(|d| *d != w.spec.labeled));

    assert_eq!(
        run_cli(&[
            "schedule",
            "--predictions",
            &preds,
            "--catalog",
            &catalog,
            "--mode",
            "image",
            "--phases",
            "3",
            "--out",
            c.to_str().unwrap(),
        ]),
        0
    );
    let images = dec::CurriculumSchedule::from_reader(std::fs::File::open(&c).unwrap()).unwrap();
    assert_eq!(images.mode, ScheduleMode::Image);
    let unlabeled: Vec<PredictionRecord> = w
        .preds
        .iter()
        .filter(|r| r.domain_id != w.spec.labeled)
        .cloned()
        .collect();
    assert_eq!(
        images,
        dec::build_schedule_imagewise(&unlabeled, 3).unwrap()
    );

    // image mode cannot work from domain stats
    assert_eq!(
        run_cli(&[
            "schedule",
            "--stats",
            stats.to_str().unwrap(),
            "--catalog",
            &catalog,
            "--mode",
            "image",
            "--out",
            c.to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn estimate_csv_matches_hand_count() {
    let w = World::new(9, 150);
    let out = w.path("est.csv");
    assert_eq!(
        run_cli(&[
            "estimate",
            "--catalog",
            &w.input("catalog.toml"),
            "--ground-truth",
            &w.input("gt.json"),
            "--sidecar",
            &w.input("sidecar.json"),
            "--predictions",
            &w.input("predictions.jsonl"),
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let classes = w.spec.classes.len();
    let mut prior = vec![0.0; classes];
    for r in w
        .world
        .ground_truth
        .iter()
        .filter(|r| r.domain_id == w.spec.labeled)
    {
        for o in &r.objects {
            prior[o.class] += 1.0;
        }
    }
    let argmax_counts = |domain: &str| {
        let mut n = vec![0.0; classes];
        for r in w.preds.iter().filter(|r| r.domain_id == domain) {
            for b in &r.boxes {
                let (c, _) = b
                    .scores
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::MIN),
                        |best, (i, &s)| {
                            if s > best.1 {
                                (i, s)
                            } else {
                                best
                            }
                        },
                    );
                n[c] += 1.0;
            }
        }
        n
    };
    let labeled = argmax_counts(&w.spec.labeled);
    let text = read(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("domain,class,value"));
    let got: BTreeMap<(String, String), f64> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), f[2].parse().unwrap())
        })
        .collect();
    for d in &w.spec.domains[1..] {
        let unl = argmax_counts(&d.id);
        let raw: Vec<f64> = (0..classes)
            .map(|c| prior[c] * unl[c] / labeled[c])
            .collect();
        let z: f64 = raw.iter().sum();
        for (c, name) in w.spec.classes.iter().enumerate() {
            let v = got[&(d.id.clone(), name.clone())];
            assert!((v - raw[c] / z).abs() < 1e-12, "{} {name}", d.id);
        }
    }
}

#[test]
fn single_phase_run_equals_direct_round() {
    let w = World::new(10, 60);
    let mut cfg = RunConfig::load(&w.path("world/run.toml")).unwrap();
    cfg.params.phases = 1;
    cfg.params.batch_size = 5;
    let run = commands::cmd_run(&cfg, &w.path("run")).unwrap();

    let cat = w.spec.catalogs().unwrap();
    let stats = dec::domain_similarity(&w.preds, &cat.domains, cat.classes.len()).unwrap();
    let unlabeled: Vec<_> = stats
        .iter()
        .filter(|s| s.domain_id != w.spec.labeled)
        .cloned()
        .collect();
    let schedule = dec::build_schedule(&unlabeled, 1).unwrap();
    let ids = cat.domains.unlabeled();
    let mut acc = PseudoLabelAccumulator::new(&ids, cat.classes.len()).unwrap();
    let round = filter::run_round(
        &w.preds,
        &schedule,
        1,
        &mut acc,
        &run.output.estimates,
        &RoundConfig {
            batch_size: 5,
            shuffle_seed: cfg.params.seed,
            ..RoundConfig::default()
        },
    )
    .unwrap();
    assert_eq!(run.output.labels, round.labels);
    assert_eq!(run.output.accumulator, acc);

    let mut buf = Vec::new();
    filter::write_pseudo_labels(&mut buf, &round.labels).unwrap();
    assert_eq!(
        std::fs::read(w.path("run/pseudo_labels.jsonl")).unwrap(),
        buf
    );
    assert_eq!(run.output.estimates.len(), 8);
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let w = World::new(12, 60);
    let config = w.path("world/run.toml");
    let a = w.path("a");
    let b = w.path("b");
    for out in [&a, &b] {
        assert_eq!(
            run_cli(&[
                "run",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
    }
    for name in commands::ARTIFACTS {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    // the echoed config reproduces the run
    let c = w.path("c");
    let echoed = a.join("config.toml");
    let echoed_cfg = RunConfig::load(&echoed).unwrap();
    commands::cmd_run(&echoed_cfg, &c).unwrap();
    assert_eq!(
        std::fs::read(a.join("pseudo_labels.jsonl")).unwrap(),
        std::fs::read(c.join("pseudo_labels.jsonl")).unwrap()
    );
}

#[test]
fn overrides_change_the_run() {
    let w = World::new(13, 60);
    let config = w.path("world/run.toml");
    let out = w.path("o");
    assert_eq!(
        run_cli(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--tau",
            "0.8",
            "--phases",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let echoed = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed.params.tau, 0.8);
    assert_eq!(echoed.params.phases, 2);
    let rounds = read(&out.join("rounds.csv"));
    assert_eq!(rounds.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let w = World::new(14, 20);
    let config = w.path("world/run.toml");
    let config = config.to_str().unwrap();
    let out = w.path("x");
    let out = out.to_str().unwrap();
    assert_eq!(run_cli(&["--help"]), 0);
    assert_eq!(run_cli(&["--version"]), 0);
    assert_eq!(run_cli(&["run", "--bogus"]), 1);
    assert_eq!(
        run_cli(&["run", "--config", config, "--tau", "1.5", "--out", out]),
        1
    );
    assert_eq!(
        run_cli(&["run", "--config", config, "--mu=-1", "--out", out]),
        1
    );
    assert_eq!(
        run_cli(&["run", "--config", config, "--mode", "pixel", "--out", out]),
        1
    );
    assert_eq!(
        run_cli(&["run", "--config", "/nonexistent/run.toml", "--out", out]),
        2
    );

    let bad = w.path("bad.toml");
    std::fs::write(&bad, read(Path::new(config)) + "\n[extra]\nx = 1\n").unwrap();
    assert_eq!(
        run_cli(&["run", "--config", bad.to_str().unwrap(), "--out", out]),
        1
    );

    // a prediction line naming an unknown class count is a validation error
    let preds = w.path("world/predictions.jsonl");
    let mut text = read(&preds);
    text.push_str(
        r#"{"image_id":"z","domain_id":"domain0","boxes":[{"bbox":[0,0,1,1],"scores":[0.5]}]}"#,
    );
    text.push('\n');
    std::fs::write(&preds, text).unwrap();
    assert_eq!(run_cli(&["run", "--config", config, "--out", out]), 1);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let w = World::new(15, 40);
    let config = w.path("world/run.toml");
    let out = w.path("grid");
    assert_eq!(
        run_cli(&[
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--taus",
            "0.6,0.7",
            "--mus",
            "0,0.1,0.2",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let text = read(&out.join("metrics.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HEADER));
    let cells: Vec<(f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    assert_eq!(cells.len(), 6);
    for tau in [0.6, 0.7] {
        for mu in [0.0, 0.1, 0.2] {
            assert!(cells.contains(&(tau, mu)));
        }
    }
}
