mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{io_error, write_run_record, RunConfig};
use engage_core::baselines::birnn::{self, BiRnnConfig};
use engage_core::baselines::svm::{featurize_svm, train_svm, SvmConfig, SvmModel};
use engage_core::corpus::{self, QueryResponsePair};
use engage_core::embedding::{load_backend, BackendKind, EmbeddingBackend, Pooling};
use engage_core::engagement::{self, EngagementModel, LeakageGuard};
use engage_core::relevance::{self, RelevanceModel, RelevanceVariant};
use engage_core::stats::{self, DependentTest, Metric, ScoredPair};
use engage_core::{Error, Result};
use rayon::prelude::*;

const EXIT_INPUT: u8 = 2;
const EXIT_LEAKAGE: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "engage", version, about = "Engagement-aware evaluation of open-domain dialogue responses")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scoring (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    #[arg(long, global = true, value_parser = parse_pooling)]
    pooling: Option<Pooling>,
    /// Primary output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn parse_backend(s: &str) -> std::result::Result<BackendKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<RelevanceVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<DependentTest, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Convai,
    Dailydialog,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Kind {
    Engagement,
    Relevance,
    Svm,
    Birnn,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a corpus into query/response pairs (JSON lines).
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Also write seeded train/valid/test splits next to the output.
        #[arg(long)]
        split: bool,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Relevance training objective.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<RelevanceVariant>,
    },
    /// Continue training an engagement checkpoint on a small target set.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Evaluation pairs that the fine-tuning data must not contain.
        #[arg(long)]
        holdout: Vec<PathBuf>,
    },
    /// Score pairs with relevance, engagement and their combination.
    Score {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        engagement: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
        /// Human ratings (pair_id,annotator_id,rating) for the `human` column.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Training pairs of the models; scoring any of them is refused.
        #[arg(long)]
        training_pairs: Vec<PathBuf>,
    },
    /// Correlate metric columns with human scores and test combined vs relevance.
    Evaluate {
        #[arg(long)]
        scored: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<DependentTest>,
    },
    /// Inter-annotator agreement (mean pairwise kappa and Pearson).
    Agreement {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Scatter plot (SVG) of a metric against human scores, or of an aggregation study.
    Plot {
        #[arg(long, conflicts_with = "aggregation", required_unless_present = "aggregation")]
        scored: Option<PathBuf>,
        #[arg(long, value_parser = parse_metric, default_value = "combined")]
        metric: Metric,
        /// CSV with conversation_id,conversation_score,utterance_score.
        #[arg(long)]
        aggregation: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os("ENGAGE_CACHE_DIR") {
        cfg.cache_dir = Some(PathBuf::from(dir));
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(b) = g.backend {
        cfg.backend = b;
    }
    if let Some(p) = g.pooling {
        cfg.pooling = p;
    }
    Ok(cfg)
}

fn out_path(g: &GlobalArgs) -> CliResult<&Path> {
    g.out.as_deref().ok_or_else(|| Failure::Usage("this command needs --out".into()))
}

fn read_pairs(path: &Path) -> Result<Vec<QueryResponsePair>> {
    corpus::read_pairs_jsonl(path)
}

fn human_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let records = corpus::read_annotations_csv(path)?;
    corpus::aggregate_annotations(&records)?
        .into_iter()
        .map(|(id, mean)| Ok((id, corpus::normalize_rating(mean, 1.0, 5.0)?)))
        .collect()
}

fn histogram_line(hist: &[usize; 6]) -> String {
    hist.iter().enumerate().map(|(s, c)| format!("{s}:{c}")).collect::<Vec<_>>().join(" ")
}

fn sibling(out: &Path, part: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}.{part}{ext}"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io_error(path, e))
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.global)?;
    let mut inputs: Vec<PathBuf> = cli.global.config.iter().cloned().collect();
    match &cli.command {
        Command::Ingest { input, format, split } => {
            let out = out_path(&cli.global)?;
            inputs.push(input.clone());
            let mut outputs = vec![out.to_path_buf()];
            let pairs = match format {
                Format::Convai => {
                    let convs = corpus::parse_convai(input)?;
                    let hist = corpus::score_histogram(convs.iter().filter_map(|c| c.engagement_score));
                    println!("conversations {}: {}", convs.len(), histogram_line(&hist));
                    let propagated = corpus::propagate_scores(&convs);
                    if propagated.skipped > 0 {
                        log::warn!("{} conversations without a score were skipped", propagated.skipped);
                    }
                    let mut pairs = propagated.pairs;
                    corpus::label_pairs(&mut pairs)?;
                    let hist = corpus::score_histogram(pairs.iter().filter_map(|p| p.raw_score));
                    println!("pairs {}: {}", pairs.len(), histogram_line(&hist));
                    pairs
                }
                Format::Dailydialog => {
                    let pairs = corpus::parse_dailydialog(input)?;
                    println!("pairs {}", pairs.len());
                    pairs
                }
            };
            corpus::write_pairs_jsonl(out, &pairs)?;
            if *split {
                let [a, b, c] = cfg.split;
                let s = corpus::make_splits(&pairs, (a, b, c), cfg.seed)?;
                for (name, part) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
                    let path = sibling(out, name);
                    corpus::write_pairs_jsonl(&path, part)?;
                    let labels = part.iter().filter_map(|p| p.label);
                    let ones = labels.clone().filter(|&l| l == 1).count();
                    println!("{name} {}: label0={} label1={ones}", part.len(), labels.count() - ones);
                    outputs.push(path);
                }
            }
            record(out, "ingest", &cfg, &inputs, &outputs)
        }
        Command::Train { kind, train, valid, variant } => {
            let out = out_path(&cli.global)?;
            inputs.push(train.clone());
            inputs.extend(valid.iter().cloned());
            let train_pairs = read_pairs(train)?;
            let valid_pairs = valid.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
            match kind {
                Kind::Svm => {
                    let feats: Vec<_> = train_pairs.iter().map(featurize_svm).collect();
                    let labels = require_labels(&train_pairs)?;
                    let svm_cfg = SvmConfig { c: cfg.svm_c, seed: cfg.seed, ..SvmConfig::default() };
                    let model = train_svm(&feats, &labels, &svm_cfg)?;
                    model.save(out)?;
                    if !valid_pairs.is_empty() {
                        report_svm(&model, &valid_pairs)?;
                    }
                }
                _ => {
                    let spec = cfg.backend_spec()?;
                    let backend = load_backend(&spec)?;
                    let spec = engage_core::embedding::EmbeddingBackendSpec { dimension: backend.dimension(), ..spec };
                    match kind {
                        Kind::Engagement => {
                            let (model, report) = engagement::train(
                                &train_pairs,
                                &valid_pairs,
                                &cfg.train_config(),
                                backend.as_ref(),
                                &spec,
                                cfg.pooling,
                            )?;
                            model.save(out)?;
                            println!(
                                "epochs {} best_epoch {:?} best_valid_balanced_accuracy {:?}",
                                report.epoch_losses.len(),
                                report.best_epoch,
                                report.best_valid_balanced_accuracy
                            );
                        }
                        Kind::Relevance => {
                            let v = variant.unwrap_or(cfg.relevance_variant);
                            let (model, report) = relevance::train_relevance(
                                &train_pairs,
                                &valid_pairs,
                                v,
                                &cfg.relevance_config(),
                                backend.as_ref(),
                                &spec,
                                cfg.pooling,
                            )?;
                            model.save(out)?;
                            println!(
                                "variant {} epochs {} best_epoch {:?} last_valid_score {:?}",
                                v.name(),
                                report.epoch_losses.len(),
                                report.best_epoch,
                                report.valid_scores.last()
                            );
                        }
                        Kind::Birnn => {
                            let mut bcfg = BiRnnConfig {
                                hidden: cfg.birnn_hidden,
                                head_hidden: cfg.birnn_head_hidden,
                                dropout: cfg.birnn_dropout,
                                train: cfg.train_config(),
                            };
                            bcfg.train.learning_rate = cfg.birnn_learning_rate;
                            let (model, report) =
                                birnn::train_birnn(&train_pairs, &valid_pairs, &bcfg, backend.as_ref(), &spec)?;
                            model.save(out)?;
                            println!(
                                "epochs {} best_epoch {:?} best_valid_balanced_accuracy {:?}",
                                report.epoch_losses.len(),
                                report.best_epoch,
                                report.best_valid_balanced_accuracy
                            );
                        }
                        Kind::Svm => unreachable!(),
                    }
                }
            }
            record(out, "train", &cfg, &inputs, &[out.to_path_buf()])
        }
        Command::Finetune { checkpoint, train, valid, holdout } => {
            let out = out_path(&cli.global)?;
            inputs.push(checkpoint.clone());
            inputs.push(train.clone());
            inputs.extend(valid.iter().cloned());
            inputs.extend(holdout.iter().cloned());
            let mut model = EngagementModel::load(checkpoint)?;
            model.backend = cfg.relocate(model.backend);
            let backend = load_backend(&model.backend)?;
            let mut guard = LeakageGuard::new();
            for h in holdout {
                guard.register(&read_pairs(h)?);
            }
            let small = read_pairs(train)?;
            let valid_pairs = valid.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
            let mut tc = cfg.train_config();
            if cfg.learning_rate.is_none() {
                tc.learning_rate = engage_core::nn::TrainConfig::for_pooling(model.pooling).learning_rate;
            }
            let (tuned, report) = engagement::finetune(&model, &small, &valid_pairs, &tc, backend.as_ref(), &guard)?;
            tuned.save(out)?;
            println!("epochs {} best_epoch {:?}", report.epoch_losses.len(), report.best_epoch);
            record(out, "finetune", &cfg, &inputs, &[out.to_path_buf()])
        }
        Command::Score { pairs, engagement: eng_path, relevance: rel_path, annotations, training_pairs } => {
            let out = out_path(&cli.global)?;
            inputs.extend([pairs.clone(), eng_path.clone(), rel_path.clone()]);
            inputs.extend(annotations.iter().cloned());
            inputs.extend(training_pairs.iter().cloned());
            let pairs = read_pairs(pairs)?;
            let mut guard = LeakageGuard::new();
            for t in training_pairs {
                guard.register(&read_pairs(t)?);
            }
            guard.check(&pairs)?;
            let mut eng = EngagementModel::load(eng_path)?;
            eng.backend = cfg.relocate(eng.backend);
            let mut rel = RelevanceModel::load(rel_path)?;
            rel.backend = cfg.relocate(rel.backend);
            let eng_backend = load_backend(&eng.backend)?;
            let rel_backend: Option<Box<dyn EmbeddingBackend>> =
                if rel.backend == eng.backend { None } else { Some(load_backend(&rel.backend)?) };
            let rel_backend = rel_backend.as_deref().unwrap_or(eng_backend.as_ref());
            let human = annotations.as_deref().map(human_scores).transpose()?;

            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .map_err(|e| Failure::Usage(format!("cannot start {} workers: {e}", cfg.jobs)))?;
            let scored: Vec<ScoredPair> = pool.install(|| {
                pairs
                    .par_iter()
                    .map(|p| {
                        let r = relevance::predict_relevance(&rel, rel_backend, &p.query, &p.response)?;
                        let e = engagement::predict_engagement(&eng, eng_backend.as_ref(), &p.query, &p.response)?;
                        let h = human.as_ref().and_then(|m| m.get(&p.pair_id).copied());
                        let mut s = ScoredPair::new(p.pair_id.clone(), Some(r), Some(e), h)?;
                        s.query = p.query.clone();
                        s.response = p.response.clone();
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            stats::write_scored_csv(out, &scored)?;
            println!("scored {} pairs", scored.len());
            record(out, "score", &cfg, &inputs, &[out.to_path_buf()])
        }
        Command::Evaluate { scored, annotations, method } => {
            let out = out_path(&cli.global)?;
            inputs.push(scored.clone());
            inputs.extend(annotations.iter().cloned());
            let mut rows = stats::read_scored_csv(scored)?;
            if let Some(a) = annotations {
                let human = human_scores(a)?;
                for r in rows.iter_mut() {
                    if let Some(&h) = human.get(&r.pair_id) {
                        r.human = Some(h);
                    }
                }
            }
            let missing = rows.iter().filter(|r| r.human.is_none()).count();
            if missing > 0 {
                return Err(Error::Validation(format!("{missing} scored pairs have no human score")).into());
            }
            let available: Vec<Metric> = [Metric::Relevance, Metric::Engagement, Metric::Combined]
                .into_iter()
                .filter(|&m| rows.iter().all(|r| r.metric(m).is_some()))
                .collect();
            if available.is_empty() {
                return Err(Error::Validation("no metric column is filled on every row".into()).into());
            }
            let reports = available.iter().map(|&m| stats::build_report(&rows, m)).collect::<Result<Vec<_>>>()?;
            stats::write_reports_csv(out, &reports)?;
            for r in &reports {
                println!(
                    "{}\tpearson {:.4} (p={:.3e})\tspearman {:.4} (p={:.3e})\tn={}",
                    r.metric, r.pearson_r, r.pearson_p, r.spearman_rho, r.spearman_p, r.n
                );
            }
            let mut outputs = vec![out.to_path_buf()];
            if available.contains(&Metric::Combined) && available.contains(&Metric::Relevance) {
                let m = method.unwrap_or(cfg.dependent_test);
                match stats::compare_metrics(&rows, Metric::Combined, Metric::Relevance, m) {
                    Ok(t) => {
                        println!("combined vs relevance: z={:.4} p={:.4e} n={} method={:?}", t.z, t.p_value, t.n, t.method);
                        let sig = sibling(out, "significance").with_extension("json");
                        write_json(&sig, &t)?;
                        outputs.push(sig);
                    }
                    // A perfect or non-positive-definite correlation triple has no test.
                    Err(e @ (Error::Validation(_) | Error::Undefined(_))) => {
                        println!("combined vs relevance: undefined ({e})");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            record(out, "evaluate", &cfg, &inputs, &outputs)
        }
        Command::Agreement { annotations } => {
            inputs.push(annotations.clone());
            let records = corpus::read_annotations_csv(annotations)?;
            let report = stats::mean_pairwise_agreement(&records)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            if let Some(out) = cli.global.out.as_deref() {
                write_json(out, &report)?;
                record(out, "agreement", &cfg, &inputs, &[out.to_path_buf()])?;
            }
            Ok(())
        }
        Command::Plot { scored, metric, aggregation } => {
            let out = out_path(&cli.global)?;
            let svg = if let Some(path) = aggregation {
                inputs.push(path.clone());
                let convs = read_aggregation_csv(path)?;
                let rows = stats::aggregation_study(&convs)?;
                stats::write_aggregation_table(std::io::stdout().lock(), &rows).map_err(|e| io_error(path, e))?;
                let points: Vec<(f64, f64)> = convs
                    .iter()
                    .map(|c| Ok((c.conversation_score, stats::aggregate(&c.utterance_scores, stats::AggregateMethod::Mean)?)))
                    .collect::<Result<_>>()?;
                plot::Scatter {
                    title: "Mean utterance score vs conversation score",
                    x_label: "conversation-level engagement",
                    y_label: "mean utterance-level engagement",
                    range: (0.0, 5.0),
                    points: &points,
                }
                .to_svg()
            } else {
                let path = scored.as_deref().expect("clap enforces --scored or --aggregation");
                inputs.push(path.to_path_buf());
                let rows = stats::read_scored_csv(path)?;
                let (m, h) = stats::metric_columns(&rows, *metric)?;
                let points: Vec<(f64, f64)> = h.into_iter().zip(m).collect();
                plot::Scatter {
                    title: &format!("{} vs human judgement", metric.name()),
                    x_label: "human score",
                    y_label: metric.name(),
                    range: (0.0, 1.0),
                    points: &points,
                }
                .to_svg()
            };
            fs::write(out, svg).map_err(|e| io_error(out, e))?;
            record(out, "plot", &cfg, &inputs, &[out.to_path_buf()])
        }
    }
}

fn record(out: &Path, command: &str, cfg: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> CliResult<()> {
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    Ok(write_run_record(out, command, cfg, &inputs, &outputs)?)
}

fn require_labels(pairs: &[QueryResponsePair]) -> Result<Vec<u8>> {
    pairs
        .iter()
        .map(|p| p.label.ok_or_else(|| Error::Validation(format!("pair {} has no label", p.pair_id))))
        .collect()
}

fn report_svm(model: &SvmModel, valid: &[QueryResponsePair]) -> Result<()> {
    let labels = require_labels(valid)?;
    let preds: Vec<u8> = valid.iter().map(|p| model.predict_pair(p)).collect();
    println!("valid_balanced_accuracy {:.4}", stats::balanced_accuracy(&labels, &preds)?);
    Ok(())
}

fn read_aggregation_csv(path: &Path) -> Result<Vec<stats::ConversationScores>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut convs: BTreeMap<String, stats::ConversationScores> = BTreeMap::new();
    for (i, row) in csv::Reader::from_path(path)?.deserialize::<(String, f64, f64)>().enumerate() {
        let (id, conv, utt) =
            row.map_err(|e| Error::Parse { record: format!("row {}", i + 1), message: e.to_string() })?;
        let entry = convs.entry(id.clone()).or_insert_with(|| stats::ConversationScores {
            conversation_id: id,
            conversation_score: conv,
            utterance_scores: Vec::new(),
        });
        if entry.conversation_score != conv {
            return Err(Error::Validation(format!(
                "conversation {} has conflicting scores {} and {conv}",
                entry.conversation_id, entry.conversation_score
            )));
        }
        entry.utterance_scores.push(utt);
    }
    Ok(convs.into_values().collect())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Leakage { .. }) { EXIT_LEAKAGE } else { EXIT_INPUT })
        }
    }
}
