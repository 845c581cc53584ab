//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 data or
//! contract error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::data::{
    build_scenes, gen_synthetic_with, ingest_csv, read_scenes, resample_5hz, split_dataset,
    write_scenes, CsvSchema, SynthKind, SynthParams, Units,
};
use crate::error::{CdsError, Result};
use crate::eval::{evaluate, run_ablation, write_report_csv, write_report_svg, MetricsReport};
use crate::model::{full_pipeline_gradcheck, scene_seed, Ablation};
use crate::training::{train_with, Checkpoint};

const USAGE: &str = "\
cdstraj — multi-agent trajectory prediction

USAGE:
  cdstraj gen-synthetic --kind KIND --count N --seed S --out FILE
                        [--noise-std M] [--n-max N] [--radius M]
  cdstraj ingest        --csv FILE --units feet|meters --out FILE
                        [--radius M] [--n-max N]
  cdstraj train         --config FILE --data FILE --out DIR
                        [--ablation SPEC] [--resume] [--stop-after N]
  cdstraj eval          --checkpoint FILE --data FILE --report-out FILE
  cdstraj predict       --checkpoint FILE --scenes FILE --k K --seed S --out FILE
  cdstraj gradcheck     [--config FILE]
  cdstraj ablate        --config FILE --data FILE --spec SPEC --out DIR

KIND:  constant_velocity | lane_change | braking_interaction
SPEC:  none | diffusion | temporal | spatial | fusion | decoder

The CDSTRAJ_SEED environment variable overrides the config seed.
";

/// Flag words that take a value.
const VALUE_FLAGS: [&str; 15] = [
    "--kind", "--count", "--seed", "--out", "--noise-std", "--n-max", "--radius", "--csv",
    "--units", "--config", "--data", "--checkpoint", "--report-out", "--scenes", "--k",
];
const SWITCH_FLAGS: [&str; 2] = ["--resume", "--ablation"];

struct Args {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

fn parse_args(argv: &[String]) -> std::result::Result<Args, String> {
    let mut values = BTreeMap::new();
    let mut switches = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let flag = &argv[i];
        if !flag.starts_with("--") {
            return Err(format!("unexpected argument '{flag}'"));
        }
        if VALUE_FLAGS.contains(&flag.as_str())
            || ["--ablation", "--spec", "--stop-after"].contains(&flag.as_str())
        {
            let value = argv
                .get(i + 1)
                .ok_or_else(|| format!("flag {flag} needs a value"))?;
            values.insert(flag.clone(), value.clone());
            i += 2;
        } else if SWITCH_FLAGS.contains(&flag.as_str()) {
            switches.push(flag.clone());
            i += 1;
        } else {
            return Err(format!("unknown flag '{flag}'"));
        }
    }
    Ok(Args { values, switches })
}

impl Args {
    fn required(&self, flag: &str) -> std::result::Result<&str, String> {
        self.values
            .get(flag)
            .map(String::as_str)
            .ok_or_else(|| format!("missing required flag {flag}"))
    }

    fn optional(&self, flag: &str) -> Option<&str> {
        self.values.get(flag).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, flag: &str) -> std::result::Result<T, String> {
        let raw = self.required(flag)?;
        raw.parse()
            .map_err(|_| format!("flag {flag}: cannot parse '{raw}'"))
    }

    fn parsed_or<T: std::str::FromStr>(&self, flag: &str, default: T) -> std::result::Result<T, String> {
        match self.optional(flag) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("flag {flag}: cannot parse '{raw}'")),
        }
    }

    fn has(&self, flag: &str) -> bool {
        self.switches.iter().any(|s| s == flag)
    }
}

fn apply_env_seed(cfg: &mut Config) -> Result<()> {
    if let Ok(raw) = std::env::var("CDSTRAJ_SEED") {
        let seed: u64 = raw
            .parse()
            .map_err(|_| CdsError::Config(format!("CDSTRAJ_SEED value '{raw}' is not a u64")))?;
        cfg.seed = seed;
    }
    Ok(())
}

fn load_config(path: &str) -> Result<Config> {
    let mut cfg = Config::load(Path::new(path))?;
    apply_env_seed(&mut cfg)?;
    Ok(cfg)
}

fn print_report(report: &MetricsReport) {
    println!("model: {} ({} scenes)", report.model_tag, report.scene_count);
    println!("horizon_s,rmse_m,min_over_k_rmse_m");
    for h in 0..5 {
        println!(
            "{},{},{}",
            h + 1,
            report.rmse_per_second[h],
            report.min_over_k[h]
        );
    }
}

fn cmd_gen_synthetic(args: &Args) -> Result<()> {
    let kind: SynthKind = args.parsed("--kind").map_err(CdsError::Config)?;
    let count: usize = args.parsed("--count").map_err(CdsError::Config)?;
    let seed: u64 = args.parsed("--seed").map_err(CdsError::Config)?;
    let out = PathBuf::from(args.required("--out").map_err(CdsError::Config)?);
    let params = SynthParams {
        noise_std: args.parsed_or("--noise-std", 0.05).map_err(CdsError::Config)?,
        n_max: args.parsed_or("--n-max", 8).map_err(CdsError::Config)?,
        radius_m: args.parsed_or("--radius", 30.0).map_err(CdsError::Config)?,
    };
    let scenes = gen_synthetic_with(kind, count, seed, params)?;
    write_scenes(&out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_ingest(args: &Args) -> Result<()> {
    let csv = PathBuf::from(args.required("--csv").map_err(CdsError::Config)?);
    let units: Units = args.parsed("--units").map_err(CdsError::Config)?;
    let out = PathBuf::from(args.required("--out").map_err(CdsError::Config)?);
    let radius: f64 = args.parsed_or("--radius", 30.0).map_err(CdsError::Config)?;
    let n_max: usize = args.parsed_or("--n-max", 8).map_err(CdsError::Config)?;

    let trajs = ingest_csv(&csv, CsvSchema { units })?;
    let resampled: Vec<_> = trajs
        .iter()
        .map(resample_5hz)
        .collect::<Result<Vec<_>>>()?;
    let (scenes, report) = build_scenes(&resampled, radius, n_max);
    write_scenes(&out, &scenes)?;
    println!(
        "ingested {} vehicles -> {} scenes ({} short agents skipped, {} partial neighbors dropped)",
        trajs.len(),
        report.scenes_built,
        report.short_agents,
        report.partial_neighbors
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<()> {
    let cfg = load_config(args.required("--config").map_err(CdsError::Config)?)?;
    let data = PathBuf::from(args.required("--data").map_err(CdsError::Config)?);
    let out = PathBuf::from(args.required("--out").map_err(CdsError::Config)?);
    let ablation: Ablation = match args.optional("--ablation") {
        Some(raw) => raw.parse()?,
        None => Ablation::None,
    };
    let stop_after: Option<usize> = match args.optional("--stop-after") {
        Some(raw) => Some(
            raw.parse()
                .map_err(|_| CdsError::Config(format!("--stop-after: cannot parse '{raw}'")))?,
        ),
        None => None,
    };

    let scenes = read_scenes(&data)?;
    let split = split_dataset(scenes, cfg.split_fractions, cfg.seed)?;
    println!(
        "split: {} train / {} val / {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let outcome = train_with(&split, &cfg, ablation, &out, args.has("--resume"), stop_after)?;
    for s in &outcome.stats {
        println!(
            "epoch {} stage {} train_loss {:.6} val_rmse_5s {:.4}",
            s.epoch, s.stage, s.train_loss, s.val_rmse[4]
        );
    }
    println!(
        "best val RMSE@5s {:.4} at epoch {} (checkpoints in {})",
        outcome.best_val_rmse5,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let ck_path = PathBuf::from(args.required("--checkpoint").map_err(CdsError::Config)?);
    let data = PathBuf::from(args.required("--data").map_err(CdsError::Config)?);
    let report_out = PathBuf::from(args.required("--report-out").map_err(CdsError::Config)?);

    let ck = Checkpoint::load(&ck_path)?;
    let mut cfg = ck.config.clone();
    apply_env_seed(&mut cfg)?;
    let ablation: Ablation = ck.ablation.parse()?;
    let scenes = read_scenes(&data)?;
    let report = evaluate(&scenes, &ck.params, &cfg, ablation, &format!("epoch {}", ck.epoch))?;
    write_report_csv(&report, &report_out)?;
    let svg_path = report_out.with_extension("svg");
    write_report_svg(&report, &svg_path)?;
    print_report(&report);
    println!("report: {} / {}", report_out.display(), svg_path.display());
    Ok(())
}

fn cmd_predict(args: &Args) -> Result<()> {
    let ck_path = PathBuf::from(args.required("--checkpoint").map_err(CdsError::Config)?);
    let scenes_path = PathBuf::from(args.required("--scenes").map_err(CdsError::Config)?);
    let k: usize = args.parsed("--k").map_err(CdsError::Config)?;
    let seed: u64 = args.parsed("--seed").map_err(CdsError::Config)?;
    let out = PathBuf::from(args.required("--out").map_err(CdsError::Config)?);

    let ck = Checkpoint::load(&ck_path)?;
    let ablation: Ablation = ck.ablation.parse()?;
    let scenes = read_scenes(&scenes_path)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
    let mut count = 0usize;
    for scene in &scenes {
        let preds = crate::decoder::predict_with(
            scene,
            &ck.params,
            &ck.config,
            ablation,
            k,
            scene_seed(seed, &scene.scene_id),
        )?;
        for p in preds {
            let steps: Vec<[f64; 5]> = p
                .steps
                .iter()
                .map(|s| [s.mu.0, s.mu.1, s.sigma.0, s.sigma.1, s.rho])
                .collect();
            let record = serde_json::json!({
                "sceneId": scene.scene_id,
                "sampleIndex": p.sample_index,
                "steps": steps,
            });
            serde_json::to_writer(&mut file, &record)?;
            file.write_all(b"\n")?;
            count += 1;
        }
    }
    file.flush()?;
    println!("wrote {count} predictions to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<()> {
    let cfg = match args.optional("--config") {
        Some(path) => load_config(path)?,
        None => {
            let mut cfg = Config::gradcheck_tiny();
            apply_env_seed(&mut cfg)?;
            cfg
        }
    };
    let worst = full_pipeline_gradcheck(&cfg)?;
    println!("worst relative gradient error: {worst:.3e}");
    if worst >= 1e-4 {
        return Err(CdsError::Numeric(format!(
            "gradient check failed: worst relative error {worst:.3e} >= 1e-4"
        )));
    }
    Ok(())
}

fn cmd_ablate(args: &Args) -> Result<()> {
    let cfg = load_config(args.required("--config").map_err(CdsError::Config)?)?;
    let data = PathBuf::from(args.required("--data").map_err(CdsError::Config)?);
    let spec: Ablation = args.required("--spec").map_err(CdsError::Config)?.parse()?;
    let out = PathBuf::from(args.required("--out").map_err(CdsError::Config)?);

    let scenes = read_scenes(&data)?;
    let split = split_dataset(scenes, cfg.split_fractions, cfg.seed)?;
    let report = run_ablation(&split, &cfg, spec, &out)?;
    let csv_path = out.join(format!("report_{}.csv", spec.tag()));
    write_report_csv(&report, &csv_path)?;
    write_report_svg(&report, &csv_path.with_extension("svg"))?;
    print_report(&report);
    Ok(())
}

/// Entry point. `argv` excludes the program name.
pub fn cli_main(argv: &[String]) -> i32 {
    let (command, rest) = match argv.split_first() {
        Some(split) => split,
        None => {
            eprint!("{USAGE}");
            return 1;
        }
    };
    let args = match parse_args(rest) {
        Ok(args) => args,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return 1;
        }
    };
    let outcome = match command.as_str() {
        "gen-synthetic" => cmd_gen_synthetic(&args),
        "ingest" => cmd_ingest(&args),
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "predict" => cmd_predict(&args),
        "gradcheck" => cmd_gradcheck(&args),
        "ablate" => cmd_ablate(&args),
        other => {
            eprintln!("error: unknown subcommand '{other}'");
            eprint!("{USAGE}");
            return 1;
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(CdsError::Config(msg)) if msg.starts_with("missing required flag") => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            1
        }
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}
