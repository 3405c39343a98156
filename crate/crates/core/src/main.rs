use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use tempmask::aggregation::{aggregate, binarize, normalize, AggregationParams, ScoredSample};
use tempmask::metrics::DEFAULT_MAX_TIME_DIFF;
use tempmask::pipeline::{annotate, AnnotationConfig};
use tempmask::protocol::{read_mask, SEED_ENV};
use tempmask::sim::{generate_scene, simulate_files, SceneProfile, SceneScript};
use tempmask::{
    ate_rmse, build_count_table, count_masks, parse_trajectory, sample_multiclass, Alignment, MaskSpaceParams,
    UsmParams,
};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

/// Temporal-mask annotation toolkit.
#[derive(Parser)]
#[command(name = "tempmask", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count the masks in E(l, k0, k1).
    Count {
        /// Sequence length.
        #[arg(long)]
        l: usize,
        /// Minimum run of zeros.
        #[arg(long)]
        k0: usize,
        /// Minimum run of ones.
        #[arg(long)]
        k1: usize,
        /// Print JSON.
        #[arg(long)]
        json: bool,
    },
    /// Draw masks uniformly from E(l, k0, k1), one independent column per class.
    Sample {
        #[arg(long)]
        l: usize,
        #[arg(long)]
        k0: usize,
        #[arg(long)]
        k1: usize,
        /// Number of masks.
        #[arg(long, default_value_t = 1)]
        q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',', default_value = "dynamic")]
        classes: Vec<String>,
        /// Write `sample_NNNN.csv` files here instead of printing bit strings.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate scored masks into a score field and binarize it.
    Aggregate {
        /// JSON list of {"mask": <csv path>, "score": <number>}; paths are
        /// relative to this file.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        sigma_a: f64,
        #[arg(long, default_value_t = 0.05)]
        sigma_r: f64,
        /// Binarization threshold on the normalized field.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the binarized mask CSV here (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the field and mask as JSON.
        #[arg(long)]
        json: bool,
    },
    /// ATE RMSE between two TUM trajectory files, in meters.
    Ate {
        /// Ground-truth trajectory.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Estimated trajectory.
        #[arg(long)]
        est: PathBuf,
        #[arg(long, value_enum, default_value_t = AlignArg::Rigid)]
        align: AlignArg,
        /// Largest timestamp difference accepted when associating poses.
        #[arg(long, default_value_t = DEFAULT_MAX_TIME_DIFF)]
        max_diff: f64,
        #[arg(long)]
        json: bool,
    },
    /// Run the synthetic SLAM simulator on a scene under a mask and write a result file.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Result JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Expected sequence id; rejected when it differs from the scene's.
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic scene script.
    GenScene {
        #[arg(long, value_enum)]
        profile: ProfileArg,
        #[arg(long)]
        l: usize,
        #[arg(long, default_value_t = 1)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-axis drift noise in meters.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the full annotation pipeline from a config file.
    Annotate {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of concurrent evaluations.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Override the cache directory.
        #[arg(long, conflicts_with = "no_cache")]
        cache_dir: Option<PathBuf>,
        /// Disable the evaluation cache.
        #[arg(long)]
        no_cache: bool,
        /// Override the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of sampled masks.
        #[arg(long)]
        q: Option<usize>,
        /// Override the evaluator repetitions.
        #[arg(long)]
        repetitions: Option<u32>,
        /// Override the final mask path.
        #[arg(long)]
        out_mask: Option<PathBuf>,
        /// Override the report path.
        #[arg(long)]
        out_report: Option<PathBuf>,
        /// Print the report JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    None,
    Rigid,
    RigidWithScale,
}

impl From<AlignArg> for Alignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::None => Alignment::None,
            AlignArg::Rigid => Alignment::Rigid,
            AlignArg::RigidWithScale => Alignment::RigidWithScale,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    ConsensusInversion,
    ExcessiveMasking,
    Mixed,
    Static,
}

impl From<ProfileArg> for SceneProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::ConsensusInversion => SceneProfile::ConsensusInversion,
            ProfileArg::ExcessiveMasking => SceneProfile::ExcessiveMasking,
            ProfileArg::Mixed => SceneProfile::Mixed,
            ProfileArg::Static => SceneProfile::Static,
        }
    }
}

#[derive(Deserialize)]
struct SampleEntry {
    mask: PathBuf,
    score: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    Ok(if p.is_absolute() { p } else { std::env::current_dir()?.join(p) })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Count { l, k0, k1, json } => {
            let n = count_masks(&MaskSpaceParams::new(l, k0, k1)?);
            if json {
                print_json(&json!({"l": l, "k0": k0, "k1": k1, "count": n.to_string()}));
            } else {
                println!("{n}");
            }
        }
        Command::Sample {
            l,
            k0,
            k1,
            q,
            seed,
            classes,
            out_dir,
            json,
        } => {
            let table = build_count_table(MaskSpaceParams::new(l, k0, k1)?);
            let masks = sample_multiclass(&table, &classes, q, seed)?;
            if let Some(dir) = &out_dir {
                fs::create_dir_all(dir)?;
                for (j, m) in masks.iter().enumerate() {
                    fs::write(dir.join(format!("sample_{j:04}.csv")), m.to_csv())?;
                }
            }
            if json {
                let list: Vec<_> = masks
                    .iter()
                    .map(|m| {
                        let columns: Vec<_> = (0..m.classes())
                            .map(|c| json!({"class": m.class_names()[c], "bits": m.column_bits(c)}))
                            .collect();
                        json!({"digest": m.digest(), "columns": columns})
                    })
                    .collect();
                print_json(&json!(list));
            } else if out_dir.is_none() {
                for m in &masks {
                    let line: Vec<String> = (0..m.classes())
                        .map(|c| match m.classes() {
                            1 => m.column_bits(c),
                            _ => format!("{}={}", m.class_names()[c], m.column_bits(c)),
                        })
                        .collect();
                    println!("{}", line.join(" "));
                }
            }
        }
        Command::Aggregate {
            samples,
            sigma_a,
            sigma_r,
            threshold,
            out,
            json,
        } => {
            let entries: Vec<SampleEntry> = serde_json::from_str(&read(&samples)?)
                .map_err(|e| format!("{}: {e}", samples.display()))?;
            let base = samples.parent().unwrap_or(Path::new(""));
            let scored = entries
                .into_iter()
                .map(|e| {
                    Ok(ScoredSample {
                        mask: read_mask(&base.join(&e.mask))?,
                        score: e.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = AggregationParams::new(sigma_a, sigma_r, vec![threshold])?;
            let raw = aggregate(&scored, &params)?;
            let field = normalize(&raw);
            let mask = binarize(&field, threshold)?;
            match &out {
                Some(path) => fs::write(path, mask.to_csv())?,
                None if !json => print!("{}", mask.to_csv()),
                None => {}
            }
            if json {
                let columns: Vec<_> = (0..mask.classes())
                    .map(|c| {
                        json!({
                            "class": mask.class_names()[c],
                            "field": raw.column(c),
                            "normalized": field.column(c),
                            "bits": mask.column_bits(c),
                        })
                    })
                    .collect();
                print_json(&json!({"degenerate": field.is_degenerate(), "columns": columns}));
            }
        }
        Command::Ate {
            reference,
            est,
            align,
            max_diff,
            json,
        } => {
            let r = parse_trajectory(&read(&reference)?).map_err(|e| format!("{}: {e}", reference.display()))?;
            let e = parse_trajectory(&read(&est)?).map_err(|e| format!("{}: {e}", est.display()))?;
            let ate = ate_rmse(&r, &e, align.into(), max_diff)?;
            if json {
                print_json(&json!({"ate_rmse": ate}));
            } else {
                println!("{ate:.6}");
            }
        }
        Command::Simulate {
            scene,
            mask,
            out,
            sequence,
            seed,
            lambda,
            json,
        } => {
            if let Some(id) = sequence {
                let s = SceneScript::load(&scene)?;
                if s.sequence_id != id {
                    return Err(format!("scene {} is sequence {:?}, not {id:?}", scene.display(), s.sequence_id).into());
                }
            }
            let result = simulate_files(&scene, &mask, &out, seed, &UsmParams::new(lambda)?)?;
            if json {
                print_json(&serde_json::to_value(result)?);
            }
        }
        Command::GenScene {
            profile,
            l,
            p,
            seed,
            noise_sigma,
            out,
            json,
        } => {
            let mut scene = generate_scene(profile.into(), l, p, seed)?;
            scene.noise_sigma = noise_sigma;
            scene.validate()?;
            scene.save(&out)?;
            if json {
                print_json(&json!({
                    "sequence_id": scene.sequence_id,
                    "frames": scene.len(),
                    "class_names": scene.class_names,
                    "path": out,
                }));
            } else {
                println!("{}", scene.sequence_id);
            }
        }
        Command::Annotate {
            config,
            parallelism,
            cache_dir,
            no_cache,
            seed,
            q,
            repetitions,
            out_mask,
            out_report,
            json,
        } => {
            let (mut cfg, base) = AnnotationConfig::load(&config)?;
            if let Some(n) = parallelism {
                cfg.parallelism = n;
            }
            if no_cache {
                cfg.cache_dir = None;
            }
            if let Some(d) = cache_dir {
                cfg.cache_dir = Some(absolute(d)?);
            }
            if let Some(s) = seed {
                cfg.sampling.seed = s;
            }
            if let Some(q) = q {
                cfg.sampling.q = q;
            }
            if let Some(r) = repetitions {
                cfg.evaluator.repetitions = r;
            }
            if let Some(p) = out_mask {
                cfg.output.mask = absolute(p)?;
            }
            if let Some(p) = out_report {
                cfg.output.report = absolute(p)?;
            }
            let a = annotate(&cfg, &base)?;
            if json {
                print!("{}", a.report.to_json());
            } else {
                let s = a.report.final_score;
                println!(
                    "USM {:.6} (ATE {:.6} m, TR {:.4}); mask {}; report {}",
                    s.usm,
                    s.ate_rmse,
                    s.tracking_rate,
                    a.mask_path.display(),
                    a.report_path.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
