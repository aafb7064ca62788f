//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed. Runs without the libtest harness so the
//! lines always reach the output.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use plus_lab::artifacts::load_or_pretrain;
use plus_lab::bench::{train_variant, win_rate_eval, Lab, Trained, TrainLog, Variant};
use plus_lab::cli::{execute, Cli};
use plus_lab::config::RunConfig;
use plus_lab::gradcheck::suite;
use plus_lab::models::ModelConfig;
use plus_lab::params::ParamStore;
use plus_lab::reward::{btl_loss_value, btl_prob, dpl_loss_value, evaluate, train_rm, RewardLearner, RmVariant, SummaryBook, TrainConfig};
use plus_lab::rng::stream;
use plus_lab::world::{make_dataset, Dataset, Population, Split, World};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

struct Setup {
    cfg: RunConfig,
    world: World,
    data: Dataset,
    model: ModelConfig,
    base: ParamStore,
}

impl Setup {
    fn lab(&self) -> Lab<'_> {
        Lab {
            world: &self.world,
            data: &self.data,
            base: Some(&self.base),
            model: &self.model,
            rm: &self.cfg.rm,
            joint: &self.cfg.joint,
            vpl_variational: false,
        }
    }

    fn train(&self, variant: Variant, seed: u64) -> (Trained, TrainLog) {
        train_variant(&self.lab(), variant, seed).unwrap_or_else(|e| panic!("{variant} seed {seed}: {e}"))
    }

    fn accuracy(&self, t: &Trained, split: Split) -> f64 {
        t.evaluate(&self.world, self.data.split(split)).expect("evaluation").accuracy
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks = suite(100, 0).expect("gradient suite");
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let took = t.elapsed();
    Outcome {
        pass: checks.len() == 100 && worst < 1e-3 && took < Duration::from_secs(60),
        detail: format!("{} instances, worst relative error {worst:.2e}, {}", checks.len(), secs(took)),
    }
}

fn closed_forms() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let at_zero = (btl_loss_value(0.0, 0.0) - ln2).abs();
    let mut rng = stream(2, &[]);
    let scores = Normal::new(0.0, 3.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let (a, b): (f64, f64) = (scores.sample(&mut rng), scores.sample(&mut rng));
        // -log sigmoid(a - b) written as a softplus of the reversed margin.
        let softplus = if b - a > 0.0 { (b - a) + (-(b - a)).exp().ln_1p() } else { (b - a).exp().ln_1p() };
        let via_prob = -btl_prob(a, b).ln();
        worst = worst.max((btl_loss_value(a, b) - softplus).abs()).max((via_prob - softplus).abs());
    }
    let mut dpl_worst: f64 = 0.0;
    for _ in 0..1000 {
        let m: f64 = rng.random_range(-5.0..5.0);
        let s: f64 = rng.random_range(0.05..3.0);
        dpl_worst = dpl_worst.max((dpl_loss_value((m, s), (m, s)).unwrap() - ln2).abs());
    }
    Outcome {
        pass: at_zero <= 1e-9 && worst <= 1e-12 && dpl_worst <= 1e-9,
        detail: format!("|btl(0,0) - ln 2| {at_zero:.1e}, two forms differ by at most {worst:.1e}, |dpl sym - ln 2| {dpl_worst:.1e}"),
    }
}

fn btl_bound(s: &Setup) -> Outcome {
    let t = Instant::now();
    let accs: Vec<f64> = SEEDS.iter().map(|&seed| s.accuracy(&s.train(Variant::Btl, seed).0, Split::TestSeen)).collect();
    let took = t.elapsed();
    Outcome {
        pass: accs.iter().all(|a| (0.40..=0.60).contains(a)) && took < Duration::from_secs(300),
        detail: format!("test-seen {accs:.3?}, {}", secs(took)),
    }
}

fn oracle_ceiling(s: &Setup) -> Outcome {
    let t = Instant::now();
    let mut accs = Vec::new();
    for seed in SEEDS {
        let trained = s.train(Variant::Oracle, seed).0;
        accs.push((s.accuracy(&trained, Split::TestSeen), s.accuracy(&trained, Split::TestOod)));
    }
    let took = t.elapsed();
    Outcome {
        pass: accs.iter().all(|&(a, b)| a == 1.0 && b == 1.0) && took < Duration::from_secs(300),
        detail: format!("(seen, ood) {accs:.3?}, {}", secs(took)),
    }
}

fn true_token_book(world: &World, data: &Dataset) -> SummaryBook {
    data.train
        .iter()
        .chain(&data.test_seen)
        .chain(&data.test_ood)
        .map(|r| (r.user_id(), world.oracle_tokens(&r.user)))
        .collect()
}

fn conditioning_pathway(s: &Setup) -> Outcome {
    let t = Instant::now();
    let book = true_token_book(&s.world, &s.data);
    let mut accs = Vec::new();
    for seed in SEEDS {
        let mut l = RewardLearner::new(RmVariant::Summary, &s.model, seed, false);
        l.init_from(&s.base);
        let cfg = TrainConfig { seed, ..s.cfg.rm };
        train_rm(&mut l, &s.world, &s.data.train, &cfg, Some(&book)).expect("summary rm");
        accs.push(evaluate(&l, &s.world, &s.data.test_seen, Some(&book)).expect("eval").accuracy);
    }
    let took = t.elapsed();
    Outcome {
        pass: accs.iter().all(|&a| a >= 0.95) && took < Duration::from_secs(600),
        detail: format!("test-seen {accs:.3?}, {}", secs(took)),
    }
}

struct PlusRuns {
    plus: Vec<(Trained, TrainLog, Duration)>,
    untrained: Vec<Trained>,
    icl: Vec<Trained>,
}

fn plus_learning(s: &Setup, runs: &PlusRuns) -> Outcome {
    let mut seen = Vec::new();
    let mut rising = Vec::new();
    let mut times = Vec::new();
    for (t, log, took) in &runs.plus {
        seen.push(s.accuracy(t, Split::TestSeen));
        let r: Vec<f64> = log.curves.iter().map(|c| c.mean_reward).collect();
        let tenth = (r.len() / 10).max(1);
        let first = r[..tenth].iter().sum::<f64>() / tenth as f64;
        let last = r[r.len() - tenth..].iter().sum::<f64>() / tenth as f64;
        rising.push((first, last));
        times.push(secs(*took));
    }
    let good = seen.iter().filter(|&&a| a >= 0.90).count();
    let halted = runs.plus.iter().any(|(_, l, _)| l.halted.is_some());
    Outcome {
        pass: good >= 2 && rising.iter().all(|(f, l)| l > f) && !halted && runs.plus.iter().all(|r| r.2 <= Duration::from_secs(1800)),
        detail: format!("test-seen {seen:.3?}, reward (first 10%, last 10%) {rising:.4?}, per seed {times:?}"),
    }
}

fn plus_beats_ablation(s: &Setup, runs: &PlusRuns) -> Outcome {
    let gaps: Vec<f64> = runs
        .plus
        .iter()
        .zip(&runs.untrained)
        .map(|((p, _, _), u)| s.accuracy(p, Split::TestSeen) - s.accuracy(u, Split::TestSeen))
        .collect();
    let m = median(gaps.clone());
    Outcome {
        pass: m >= 0.05,
        detail: format!("per-seed gain {gaps:+.3?}, median {m:+.3}"),
    }
}

fn ood_robustness(s: &Setup, runs: &PlusRuns) -> Outcome {
    let plus: Vec<f64> = runs.plus.iter().map(|(p, _, _)| s.accuracy(p, Split::TestOod)).collect();
    let icl: Vec<f64> = runs.icl.iter().map(|t| s.accuracy(t, Split::TestOod)).collect();
    let (mp, mi) = (median(plus.clone()), median(icl.clone()));
    Outcome {
        pass: mp >= 0.75 && mp > mi,
        detail: format!("plus test-ood {plus:.3?} median {mp:.3}; icl {icl:.3?} median {mi:.3}"),
    }
}

fn best_of_n(s: &Setup, runs: &PlusRuns) -> Outcome {
    let spec = &s.cfg.bench;
    let rates: Vec<f64> = runs
        .plus
        .iter()
        .zip(SEEDS)
        .map(|((t, _, _), seed)| match t {
            Trained::Joint(m) => win_rate_eval(&s.world, m, &s.data.test_seen, Population::InDistribution, spec.best_of, spec.win_records, seed)
                .expect("win rate")
                .rate(),
            Trained::Reward(_) => unreachable!("plus trains jointly"),
        })
        .collect();
    let m = median(rates.clone());
    Outcome {
        pass: m >= 0.70,
        detail: format!("best of {}, {} records, win rate {rates:.3?}, median {m:.3}", spec.best_of, spec.win_records),
    }
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let cli = Cli::try_parse_from(std::iter::once("plus-lab").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    execute(cli).map_err(|e| e.to_string())
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let tmp = tempfile::tempdir().unwrap();
    let root = |i: usize| tmp.path().join(format!("run{i}"));
    for i in 0..2 {
        let r = root(i);
        let (data, art, out) = (r.join("data"), r.join("artifacts"), r.join("report"));
        let s = |p: &Path| p.to_str().unwrap().to_string();
        run_cli(&["gen-data", "--config", config, "--out", &s(&data)]).unwrap();
        run_cli(&["train", "--config", config, "--variant", "plus", "--seed", "7", "--data", &s(&data), "--out", &s(&art)]).unwrap();
        run_cli(&["bench", "--config", config, "--data", &s(&data), "--artifacts", &s(&art), "--out", &s(&out)]).unwrap();
        run_cli(&["summarize", "--config", config, "--checkpoint", &s(&art.join("plus/seed-7/pi.ckpt")), "--data", &s(&data), "--out", &s(&out.join("plus7.jsonl"))]).unwrap();
    }
    let (a, b) = (tree(&root(0)), tree(&root(1)));
    let differing: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
    let ckpts = a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "ckpt")).count();
    Outcome {
        pass: a.len() == b.len() && differing.is_empty() && ckpts > 0,
        detail: format!("{} files ({ckpts} checkpoints) compared across two runs, {} differ {differing:?}", a.len(), differing.len()),
    }
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let cfg = RunConfig::default();
    let world = cfg.build_world().unwrap();
    let model = cfg.model_for(&world);
    let data = make_dataset(&world, 0).unwrap();
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
    let t = Instant::now();
    let base = load_or_pretrain(&cache, &world, &model, &cfg.pretrain).expect("pretrained base");
    println!("base ready in {}", secs(t.elapsed()));
    let s = Setup { cfg, world, data, model, base };

    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient soundness", gradients()),
        ("2 closed-form losses", closed_forms()),
        ("3 null-personalization bound", btl_bound(&s)),
        ("4 oracle ceiling", oracle_ceiling(&s)),
        ("5 conditioning pathway", conditioning_pathway(&s)),
    ];
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }

    let runs = PlusRuns {
        plus: SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let (tr, log) = s.train(Variant::Plus, seed);
                (tr, log, t.elapsed())
            })
            .collect(),
        untrained: SEEDS.iter().map(|&seed| s.train(Variant::PlusUntrained, seed).0).collect(),
        icl: SEEDS.iter().map(|&seed| s.train(Variant::Icl, seed).0).collect(),
    };
    let later = [
        ("6 PLUS learning", plus_learning(&s, &runs)),
        ("7 PLUS beats untrained summarizer", plus_beats_ablation(&s, &runs)),
        ("8 OOD robustness", ood_robustness(&s, &runs)),
        ("9 Best-of-N win rate", best_of_n(&s, &runs)),
        ("10 reproducibility", reproducibility()),
    ];
    for (name, o) in &later {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    results.extend(later);
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
