use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fin::config::RunConfig;
use fin::dataio::{
    generate_synthetic, ingest_reviews, load_prepared, load_raw, prepare, save_prepared, save_raw,
    PreparedDataset,
};
use fin::model::{auc, run_variant, score_all, train, FinModel, Sample, TrainReport, Variant};
use fin::numeric::ParamStore;
use fin::store::{BehaviorEvent, QueryContext};
use fin::{FinError, Result};

#[derive(Parser)]
#[command(name = "fin", about = "CTR model over spatial-temporal behavior sequences")]
struct Cli {
    /// Path to a key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into data_dir.
    GenData,
    /// Build vocabularies, binner, splits, and id-mapped artifacts.
    Prepare,
    /// Train the configured variant; writes checkpoint and metrics.
    Train,
    /// Score the test split with a checkpoint and report AUC.
    Eval {
        /// Also write a per-meal-period exposure/score table.
        #[arg(long)]
        period_table: bool,
    },
    /// Train and evaluate every variant across ablate.seeds.
    Ablate,
    /// Score a raw samples TSV with a checkpoint.
    Infer {
        /// Samples file in the gen-data samples.tsv format.
        samples: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                FinError::Config(_) => 2,
                FinError::Data(_) | FinError::Format(_) | FinError::Io(_) => 3,
                _ => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Prepare => cmd_prepare(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { period_table } => cmd_eval(&cfg, period_table),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Infer { samples } => cmd_infer(&cfg, &samples),
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.make_run_dir()?;
    let spec = cfg.synthetic_spec()?;
    let data = generate_synthetic(&spec)?;
    let data_dir = PathBuf::from(cfg.get("data_dir")?);
    save_raw(&data.raw, &data_dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(data_dir.join("oracle_scores.txt"))?);
    for s in &data.oracle_scores {
        writeln!(w, "{s}")?;
    }
    println!(
        "generated {} behaviors, {} samples into {}",
        data.raw.behaviors.len(),
        data.raw.samples.len(),
        data_dir.display()
    );
    println!("run dir: {}", run_dir.display());
    Ok(())
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.make_run_dir()?;
    let reviews = cfg.get("input_reviews")?.to_string();
    let raw = if reviews.is_empty() {
        let data_dir = PathBuf::from(cfg.get("data_dir")?);
        load_raw(&data_dir).map_err(|e| {
            FinError::Data(format!(
                "cannot load raw dataset from {} ({e}); run `fin gen-data` first",
                data_dir.display()
            ))
        })?
    } else {
        ingest_reviews(
            &reviews,
            cfg.review_schema()?,
            cfg.get_u64("review_seed")?,
            cfg.get_bool("skip_malformed")?,
        )?
    };
    let prepared = prepare(&raw, &cfg.prepare_config()?)?;
    let out = PathBuf::from(cfg.get("prepared_dir")?);
    save_prepared(&prepared, &out)?;
    println!(
        "prepared {} sequences, {} train / {} test samples into {}",
        prepared.sequences.len(),
        prepared.train.len(),
        prepared.test.len(),
        out.display()
    );
    let o = &prepared.oov;
    println!(
        "test OOV: items {}, categories {}, geokeys {}, users {}",
        o.test_oov_items, o.test_oov_categories, o.test_oov_geokeys, o.test_oov_users
    );
    println!("run dir: {}", run_dir.display());
    Ok(())
}

fn load_prepared_or_hint(cfg: &RunConfig) -> Result<PreparedDataset> {
    let dir = PathBuf::from(cfg.get("prepared_dir")?);
    load_prepared(&dir).map_err(|e| {
        FinError::Data(format!(
            "cannot load prepared artifacts from {} ({e}); run `fin prepare` first",
            dir.display()
        ))
    })
}

fn write_report(dir: &std::path::Path, report: &TrainReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.txt"))?);
    writeln!(w, "seed {}", report.seed)?;
    writeln!(w, "wall_secs {}", report.wall_secs)?;
    if let Some(a) = report.final_auc {
        writeln!(w, "final_auc {a}")?;
    }
    for (i, l) in report.epoch_losses.iter().enumerate() {
        writeln!(w, "epoch_loss {i} {l}")?;
    }
    for (i, l) in report.step_losses.iter().enumerate() {
        writeln!(w, "step_loss {i} {l}")?;
    }
    let summary = serde_json::json!({
        "seed": report.seed,
        "wall_secs": report.wall_secs,
        "final_auc": report.final_auc,
        "epoch_losses": report.epoch_losses,
        "steps": report.step_losses.len(),
    });
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| FinError::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.make_run_dir()?;
    let data = load_prepared_or_hint(cfg)?;
    let mut model = FinModel::new(cfg.fin_config()?, &data.vocab_sizes())?;
    let opts = cfg.train_options()?;
    let mut report = train(&mut model, &data.sequences, &data.train, &opts)?;
    let (scores, labels) = score_all(&model, &data.sequences, &data.test)?;
    report.final_auc = Some(auc(&scores, &labels)?);
    let ckpt = run_dir.join("checkpoint.bin");
    model.store.save(&ckpt)?;
    write_report(&run_dir, &report)?;
    println!(
        "trained {} ({} params) for {} steps in {:.1}s",
        model.cfg.variant.name(),
        model.param_count(),
        report.step_losses.len(),
        report.wall_secs
    );
    println!("test auc {:.6}", report.final_auc.unwrap());
    println!("checkpoint: {}", ckpt.display());
    println!("run dir: {}", run_dir.display());
    Ok(())
}

fn restore_model(cfg: &RunConfig, data: &PreparedDataset) -> Result<FinModel> {
    let path = cfg.get("checkpoint")?.to_string();
    if path.is_empty() {
        return Err(FinError::Config(
            "set checkpoint=<path> (written by `fin train`)".into(),
        ));
    }
    let store = ParamStore::load(&path).map_err(|e| {
        FinError::Data(format!("cannot load checkpoint {path} ({e}); run `fin train` first"))
    })?;
    let mut model = FinModel::new(cfg.fin_config()?, &data.vocab_sizes())?;
    model.restore(store)?;
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, period_table: bool) -> Result<()> {
    let run_dir = cfg.make_run_dir()?;
    let data = load_prepared_or_hint(cfg)?;
    let model = restore_model(cfg, &data)?;
    let (scores, labels) = score_all(&model, &data.sequences, &data.test)?;
    let a = auc(&scores, &labels)?;
    println!("test samples {}", scores.len());
    println!("test auc {a:.6}");
    std::fs::write(run_dir.join("eval.txt"), format!("samples {}\nauc {a}\n", scores.len()))?;
    if period_table {
        // per-meal-period exposure and score statistics over the test split
        let periods = data.binner.period_count() + 1;
        let mut count = vec![0usize; periods];
        let mut pos = vec![0usize; periods];
        let mut score_sum = vec![0.0f64; periods];
        for (s, (&sc, &lb)) in data.test.iter().zip(scores.iter().zip(&labels)) {
            let p = s.query.query_item.period_id as usize;
            count[p] += 1;
            pos[p] += lb as usize;
            score_sum[p] += sc;
        }
        let path = run_dir.join("period_table.tsv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "period\tcount\tpositives\tmean_score")?;
        for p in 0..periods {
            if count[p] == 0 {
                continue;
            }
            writeln!(
                w,
                "{p}\t{}\t{}\t{:.6}",
                count[p],
                pos[p],
                score_sum[p] / count[p] as f64
            )?;
        }
        println!("period table: {}", path.display());
    }
    println!("run dir: {}", run_dir.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.make_run_dir()?;
    let data = load_prepared_or_hint(cfg)?;
    let vocabs = data.vocab_sizes();
    let fin_cfg = cfg.fin_config()?;
    let mut opts = cfg.train_options()?;
    let seeds = cfg.ablate_seeds()?;
    let path = run_dir.join("ablation.tsv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(w, "variant\tseed\tauc\tparam_count\ttrain_secs")?;
    println!("variant\tseed\tauc\tparam_count\ttrain_secs");
    let mut means: Vec<(Variant, f64)> = Vec::new();
    for variant in Variant::ALL {
        let mut sum = 0.0;
        for &seed in &seeds {
            opts.seed = seed;
            let row = run_variant(
                fin_cfg.clone(),
                variant,
                &vocabs,
                &data.sequences,
                &data.train,
                &data.test,
                &opts,
            )?;
            let line = format!(
                "{}\t{}\t{:.6}\t{}\t{:.1}",
                row.variant.name(),
                row.seed,
                row.auc,
                row.param_count,
                row.train_secs
            );
            writeln!(w, "{line}")?;
            w.flush()?;
            println!("{line}");
            sum += row.auc;
        }
        means.push((variant, sum / seeds.len() as f64));
    }
    println!("\nvariant\tmean_auc");
    for (v, m) in &means {
        println!("{}\t{m:.6}", v.name());
    }
    println!("table: {}", path.display());
    println!("run dir: {}", run_dir.display());
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, samples_path: &std::path::Path) -> Result<()> {
    let run_dir = cfg.make_run_dir()?;
    let data = load_prepared_or_hint(cfg)?;
    let model = restore_model(cfg, &data)?;
    let prep = cfg.prepare_config()?;

    // user -> sequence index, as frozen by prepare
    let mut seq_of_user = std::collections::HashMap::new();
    for (i, user) in data.seq_users.iter().enumerate() {
        seq_of_user.insert(user.as_str(), i);
    }
    let empty = fin::store::LifelongSequence::default();

    let text = std::fs::read_to_string(samples_path)?;
    let out_path = run_dir.join("scores.tsv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    writeln!(w, "line\tuser\titem\tscore")?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 6 {
            return Err(FinError::Data(format!(
                "{} line {}: expected at least 6 fields (user item category lat lon timestamp)",
                samples_path.display(),
                i + 1
            )));
        }
        let bad = |what: &str| FinError::Data(format!("line {}: bad {what}", i + 1));
        let spatial = if f[3] == "price" {
            fin::dataio::Spatial::Price(f[4].parse().map_err(|_| bad("price"))?)
        } else {
            fin::dataio::Spatial::Geo {
                lat: f[3].parse().map_err(|_| bad("lat"))?,
                lon: f[4].parse().map_err(|_| bad("lon"))?,
            }
        };
        let timestamp: i64 = f[5].parse().map_err(|_| bad("timestamp"))?;
        let sample = map_raw_query(&data, &prep, f[0], f[1], f[2], &spatial, timestamp)?;
        let seq = match seq_of_user.get(f[0]) {
            Some(&idx) => &data.sequences[idx],
            None => &empty,
        };
        let score = model.predict(seq, &sample)?;
        writeln!(w, "{}\t{}\t{}\t{score:.6}", i + 1, f[0], f[1])?;
    }
    println!("scores: {}", out_path.display());
    println!("run dir: {}", run_dir.display());
    Ok(())
}

fn map_raw_query(
    data: &PreparedDataset,
    prep: &fin::dataio::PrepareConfig,
    user: &str,
    item: &str,
    category: &str,
    spatial: &fin::dataio::Spatial,
    timestamp: i64,
) -> Result<Sample> {
    use fin::stkeys::{bin_of, geohash_encode, GeoPoint, MinuteOfDay};
    let geokey = match spatial {
        fin::dataio::Spatial::Geo { lat, lon } => {
            geohash_encode(GeoPoint::new(*lat, *lon)?, prep.geohash_precision)?.code
        }
        fin::dataio::Spatial::Price(v) => {
            let bounds = data
                .price_boundaries
                .as_ref()
                .ok_or_else(|| FinError::Data("price sample but no fitted price bins".into()))?;
            format!("p{}", bin_of(bounds, *v))
        }
    };
    let minute = MinuteOfDay((timestamp.rem_euclid(fin::store::SECONDS_PER_DAY) / 60) as u16);
    let mut query_item = BehaviorEvent::new(
        data.item_vocab.get(item).unwrap_or(0),
        data.category_vocab.get(category).unwrap_or(0),
        &geokey,
        data.binner.assign_period(minute) as u16,
        timestamp,
    );
    query_item.geohash_id = data.geokey_vocab.get(&geokey).unwrap_or(0);
    Ok(Sample {
        user_vid: data.user_vocab.get(user).unwrap_or(0),
        seq_idx: 0, // sequence resolved by the caller
        query: QueryContext {
            query_item,
            request_time: timestamp,
            short_term_window_days: prep.short_term_window_days,
            long_term_window_days: prep.long_term_window_days,
        },
        label: 0,
    })
}
