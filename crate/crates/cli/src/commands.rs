use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use attnlab::backbone::{InsertionPlan, Model};
use attnlab::blocks::AttentionKind;
use attnlab::checkpoint;
use attnlab::cost::{benchmark_latency, count_macs, CostReport};
use attnlab::data::{generate_synthetic, load_folder_dataset, Dataset, MANIFEST_FILE};
use attnlab::eval::{evaluate_model, RetrievalResult};
use attnlab::nas::{
    derive_rules_report, mean_std, read_trials, run_pipeline, trial_row, write_trials, Search, SearchSpace, SpeedModel,
    TrainingContext, TrialResult,
};
use attnlab::report::{points_from_csv, scatter_svg, to_json};
use attnlab::training::{finetune_two_step, train as train_model, TrainConfig, TrainLog};
use attnlab::SCHEMA_VERSION;
use serde::Serialize;

use crate::config::{Protocol, RunConfig, SpeedSource};
use crate::error::{CliError, Result};

pub struct Context {
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        write_text(&self.path("config.json"), &to_json(cfg))
    }
}

pub struct InitFrom {
    pub path: PathBuf,
    pub finetune: bool,
    pub classifier_epochs: usize,
}

/// A JSON document tagged with the artifact schema version.
#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

fn versioned<T: Serialize>(body: &T) -> String {
    to_json(&Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// CSV with a leading `schema_version` column.
fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h = vec!["schema_version"];
    h.extend(header);
    w.write_record(&h)?;
    for r in rows {
        let mut rec = vec![SCHEMA_VERSION.to_string()];
        rec.extend(r);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_plan(s: &str) -> Result<InsertionPlan> {
    s.parse::<InsertionPlan>().map_err(|e| CliError::Usage(e.to_string()))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.folder {
        Some(root) => {
            let manifest = cfg.data.manifest.clone().unwrap_or_else(|| root.join(MANIFEST_FILE));
            if !manifest.exists() {
                return Err(CliError::Data(format!("manifest {} not found", manifest.display())));
            }
            let data = load_folder_dataset(root, &manifest, cfg.backbone.input_hw, cfg.data.normalization)?;
            for n in &data.notices {
                eprintln!("warning: {n}");
            }
            Ok(data)
        }
        None => {
            if cfg.data.synthetic.hw != cfg.backbone.input_hw {
                return Err(CliError::Usage(format!(
                    "data.synthetic.hw {:?} differs from backbone.input_hw {:?}",
                    cfg.data.synthetic.hw, cfg.backbone.input_hw
                )));
            }
            Ok(generate_synthetic(&cfg.data.synthetic)?)
        }
    }
}

// bench ----------------------------------------------------------------------

pub fn bench(ctx: &Context, cfg: &RunConfig, plans: &[String], deep: bool, timing: bool) -> Result<()> {
    let parsed: Vec<InsertionPlan> = plans.iter().map(|p| parse_plan(p)).collect::<Result<_>>()?;
    ctx.prepare(cfg)?;
    let mut models = Vec::new();
    for plan in parsed {
        models.push(Model::<f32>::new(cfg.backbone.clone(), plan, cfg.seed)?);
    }
    if deep {
        models.push(Model::<f32>::resnet101_reference(&cfg.backbone, cfg.seed)?);
    }
    let bench_cfg = attnlab::cost::BenchConfig {
        seed: cfg.seed,
        ..cfg.bench.clone()
    };
    let mut reports: Vec<CostReport> = Vec::new();
    for m in &models {
        let r = if timing { benchmark_latency(m, &bench_cfg)? } else { count_macs(m) };
        match r.batches_per_second {
            Some(bps) => println!(
                "{}: {} MACs, {} params, {:.2} batches/s ({:.2} ms/batch at batch {})",
                r.config_id, r.total_macs, r.total_params, bps, r.ms_per_batch.unwrap_or(f64::NAN), bench_cfg.batch_size
            ),
            None => println!("{}: {} MACs, {} params", r.config_id, r.total_macs, r.total_params),
        }
        reports.push(r);
    }
    write_csv(&ctx.path("bench.csv"), CostReport::CSV_HEADER, reports.iter().map(CostReport::csv_row))?;
    #[derive(Serialize)]
    struct Reports<'a> {
        reports: &'a [CostReport],
    }
    write_text(&ctx.path("bench.json"), &versioned(&Reports { reports: &reports }))
}

// train ----------------------------------------------------------------------

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    #[serde(rename = "mAP")]
    map: f64,
    rank1: f64,
    rank5: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    config_id: String,
    runs: Vec<SeedSummary>,
    #[serde(rename = "mAP_mean")]
    map_mean: f64,
    #[serde(rename = "mAP_std")]
    map_std: f64,
    rank1_mean: f64,
    rank1_std: f64,
}

fn write_log(dir: &Path, log: &TrainLog, name: &str) -> Result<()> {
    write_csv(&dir.join(format!("{name}.csv")), TrainLog::CSV_HEADER, log.csv_rows())?;
    #[derive(Serialize)]
    struct Log<'a> {
        log: &'a TrainLog,
    }
    write_text(&dir.join(format!("{name}.json")), &versioned(&Log { log }))
}

fn write_eval(dir: &Path, r: &RetrievalResult) -> Result<()> {
    write_csv(&dir.join("eval.csv"), RetrievalResult::CSV_HEADER, [r.csv_row()])?;
    #[derive(Serialize)]
    struct Eval<'a> {
        result: &'a RetrievalResult,
    }
    write_text(&dir.join("eval.json"), &versioned(&Eval { result: r }))
}

pub fn train(ctx: &Context, cfg: &RunConfig, seeds: usize, init: Option<InitFrom>) -> Result<()> {
    let plan = parse_plan(&cfg.plan)?;
    cfg.train.validate()?;
    let data = load_data(cfg)?;
    ctx.prepare(cfg)?;
    let base = match &init {
        Some(i) => Some(checkpoint::load::<f32>(&i.path)?),
        None => None,
    };
    let mut runs = Vec::new();
    for seed in cfg.seed..cfg.seed + seeds as u64 {
        let dir = ctx.path(&format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        let tcfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let model = match (&base, &init) {
            (Some(m), Some(i)) if i.finetune => {
                let mut m = m.clone();
                let step1 = TrainConfig {
                    epochs: i.classifier_epochs,
                    warmup_epochs: 0,
                    lr_milestones: vec![],
                    ..tcfg.clone()
                };
                let log = finetune_two_step(&mut m, &data, &step1, &tcfg)?;
                write_log(&dir, &log.classifier_step, "log_classifier")?;
                write_log(&dir, &log.full_step, "log")?;
                m
            }
            (Some(m), _) => {
                let mut m = m.clone();
                write_log(&dir, &train_model(&mut m, &data, &tcfg)?, "log")?;
                m
            }
            _ => {
                let backbone = attnlab::backbone::BackboneConfig {
                    num_classes: data.num_train_ids(),
                    ..cfg.backbone.clone()
                };
                let mut m = Model::<f32>::new(backbone, plan.clone(), seed)?;
                write_log(&dir, &train_model(&mut m, &data, &tcfg)?, "log")?;
                m
            }
        };
        checkpoint::save(&model, &dir.join("model.ckpt"))?;
        let r = evaluate_model(&model, &data, cfg.eval.metric, cfg.eval.batch_size)?;
        write_eval(&dir, &r)?;
        println!("seed {seed}: mAP {:.4} rank-1 {:.4} rank-5 {:.4}", r.map, r.rank1(), r.rank5());
        runs.push(SeedSummary {
            seed,
            map: r.map,
            rank1: r.rank1(),
            rank5: r.rank5(),
        });
    }
    let (map_mean, map_std) = mean_std(&runs.iter().map(|r| r.map).collect::<Vec<_>>());
    let (rank1_mean, rank1_std) = mean_std(&runs.iter().map(|r| r.rank1).collect::<Vec<_>>());
    println!(
        "{} over {} seed(s): mAP {map_mean:.4} ± {map_std:.4}, rank-1 {rank1_mean:.4} ± {rank1_std:.4}",
        plan,
        runs.len()
    );
    let summary = TrainSummary {
        config_id: plan.to_string(),
        runs,
        map_mean,
        map_std,
        rank1_mean,
        rank1_std,
    };
    write_text(&ctx.path("summary.json"), &versioned(&summary))
}

// eval -----------------------------------------------------------------------

pub fn eval(ctx: &Context, cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let model = checkpoint::load::<f32>(ckpt)?;
    let cfg = RunConfig {
        backbone: model.config.clone(),
        ..cfg.clone()
    };
    let data = load_data(&cfg)?;
    if cfg.eval.protocol == Protocol::RoreasShape {
        data.manifest().check_protocol()?;
    }
    let r = evaluate_model(&model, &data, cfg.eval.metric, cfg.eval.batch_size)?;
    ctx.prepare(&cfg)?;
    println!(
        "{}: mAP {:.4} rank-1 {:.4} rank-5 {:.4} ({} queries)",
        r.config_id,
        r.map,
        r.rank1(),
        r.rank5(),
        r.per_query_ap.len()
    );
    write_eval(&ctx.out, &r)
}

// search ---------------------------------------------------------------------

fn search_space(cfg: &RunConfig) -> Result<SearchSpace> {
    let n = cfg.backbone.num_positions();
    let positions = cfg.search.positions.clone().unwrap_or_else(|| (1..=n).collect());
    if let Some(p) = positions.iter().find(|&&p| p == 0 || p > n) {
        return Err(CliError::Usage(format!("search position {p} outside 1..={n}")));
    }
    if cfg.search.kinds.is_empty() || positions.is_empty() || cfg.search.seeds.is_empty() {
        return Err(CliError::Usage("search needs at least one kind, position and seed".into()));
    }
    let kinds: Vec<AttentionKind> = cfg.search.kinds.clone();
    Ok(SearchSpace {
        candidates: kinds.iter().flat_map(|&k| positions.iter().map(move |&p| (k, p))).collect(),
        max_blocks: cfg.search.max_blocks,
        seeds: cfg.search.seeds.clone(),
        reduction: cfg.search.reduction,
    })
}

pub fn search(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let space = search_space(cfg)?;
    cfg.train.validate()?;
    let data = load_data(cfg)?;
    ctx.prepare(cfg)?;
    let mut runner = TrainingContext::new(cfg.backbone.clone(), data, cfg.train.clone());
    runner.speed = match cfg.search.speed {
        SpeedSource::Analytic => SpeedModel::Analytic {
            macs_per_second: cfg.search.macs_per_second,
            batch_size: cfg.bench.batch_size,
        },
        SpeedSource::Measured => SpeedModel::Measured(cfg.bench.clone()),
    };

    let trials_path = ctx.path("trials.csv");
    let previous: Vec<TrialResult> = if trials_path.exists() {
        read_trials(File::open(&trials_path)?)?
    } else {
        Vec::new()
    };
    if !previous.is_empty() {
        println!("resuming: {} completed trials in {}", previous.len(), trials_path.display());
    }
    // rewrite what was read so that appended rows follow a clean header
    {
        let f = File::create(&trials_path)?;
        write_trials(&previous, f)?;
    }
    let appender = OpenOptions::new().append(true).open(&trials_path)?;
    let mut rows = csv::WriterBuilder::new().has_headers(false).from_writer(appender);
    let mut search = Search::new(&runner, cfg.train.loss, cfg.search.seeds.clone())
        .with_completed(previous)
        .on_trial(move |t| {
            rows.write_record(trial_row(t)).map_err(std::io::Error::other)?;
            rows.flush()?;
            println!("trial {}: mAP {:.4}", t.key(), t.map_mean);
            Ok(())
        });
    search.threads = ctx.threads;

    let outcome = run_pipeline(&space, &mut search, cfg.search.budget);
    let all: Vec<TrialResult> = search.completed.values().cloned().collect();
    let executed = search.executed.len();
    drop(search);
    // canonical order, independent of interruption and resumption
    write_trials(&all, File::create(&trials_path)?)?;
    let result = outcome?;

    let report = derive_rules_report(&all, &cfg.backbone);
    write_text(&ctx.path("rules.json"), &to_json(&report))?;
    write_text(&ctx.path("rules.txt"), &report.to_text())?;
    println!(
        "{} trials ({} executed now); {} kept after pruning, {} combinations",
        all.len(),
        executed,
        result.pruned.split.kept.len(),
        result.combinations.len()
    );
    if let Some(best) = result.combinations.first() {
        println!("best combination: {} mAP {:.4}", best.plan, best.map_mean);
    }
    print!("{}", report.to_text());
    Ok(())
}

// plot -----------------------------------------------------------------------

pub fn plot(ctx: &Context, input: &Path, title: &str) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let points = points_from_csv(&text)?;
    if points.is_empty() {
        eprintln!("warning: {} has no rows; writing an empty plot", input.display());
    }
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.path("plot.svg");
    write_text(&path, &scatter_svg(&points, title))?;
    println!("{} points -> {}", points.len(), path.display());
    Ok(())
}

// synth ----------------------------------------------------------------------

pub fn synth(ctx: &Context, cfg: &RunConfig) -> Result<()> {
    let data = generate_synthetic(&cfg.data.synthetic)?;
    ctx.prepare(cfg)?;
    data.write_folder(&ctx.out)?;
    let counts = data.manifest().counts();
    for (split, n) in &counts {
        println!("{}: {n} images", split.name());
    }
    let mut f = File::create(ctx.path("synth.json"))?;
    #[derive(Serialize)]
    struct Synth<'a> {
        config: &'a attnlab::data::SyntheticConfig,
        counts: std::collections::BTreeMap<&'static str, usize>,
    }
    let body = Synth {
        config: &cfg.data.synthetic,
        counts: counts.iter().map(|(s, n)| (s.name(), *n)).collect(),
    };
    f.write_all(versioned(&body).as_bytes())?;
    Ok(())
}
