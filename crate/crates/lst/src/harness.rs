//! Experiment harness: subcommands, artifact layout, and aggregation.
//!
//! Every subcommand works inside one output directory (`--out`). Producers
//! write versioned checkpoints and metrics files; consumers state exactly
//! which prior subcommand they need when an input is missing.
//!
//! Artifact layout inside `--out`:
//!
//! | file                             | producer          | content |
//! |----------------------------------|-------------------|---------|
//! | `checkpoint-backbone.json`       | `pretrain`        | frozen feature extractor |
//! | `checkpoint-meta-best.json`      | `meta-train`      | best-validation meta-state |
//! | `checkpoint-meta-final.json`     | `meta-train`      | final-iteration meta-state |
//! | `metrics-train-history.csv`      | `meta-train`      | per-iteration batch stats |
//! | `metrics-train-evals.csv`        | `meta-train`      | validation curve |
//! | `metrics-<group>.csv` / `.jsonl` | evaluation subcommands | aggregate records |
//! | `metrics-episodes-<group>.csv`   | evaluation subcommands | per-episode rows |
//! | `metrics-pairs-<group>.csv`      | evaluation subcommands, `report` | paired comparisons |
//! | `metrics.csv` / `metrics.jsonl`  | every evaluation subcommand | merged view of all groups |
//! | `report.txt`                     | `report`          | human-readable summary |
//! | `run-manifest-<subcommand>.txt`  | every subcommand  | config echo, hash, versions |

use crate::checkpoint::{
    load_backbone, load_meta_state, save_backbone, save_meta_state, validate_meta_state,
};
use crate::config::{AblationSetting, TrainConfig};
use crate::episodes::{ClassDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    read_episodes_csv, read_metrics_csv, write_csv_file, write_episodes_csv, write_metrics_csv,
    write_metrics_jsonl, EpisodeRow, MetricsRecord,
};
use crate::model::Backbone;
use crate::selftrain::{
    mean_and_ci95, meta_test, meta_train, stages_for, MetaState, TestReport, TAG_TEST_EPISODE,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Re-training step counts swept by `sweep-retrain` (clamped to `t_steps`).
pub const RETRAIN_SWEEP: [usize; 6] = [0, 2, 5, 10, 20, 40];
/// Distractor-class counts swept by `sweep-distractors` (clamped to the
/// available non-episode classes in the test split).
pub const DISTRACTOR_SWEEP: [usize; 5] = [0, 1, 3, 5, 7];

/// Evaluation groups in merged-file order.
const GROUPS: [&str; 4] = ["meta-test", "ablate", "sweep-retrain", "sweep-distractors"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Pretrain,
    MetaTrain,
    MetaTest,
    Ablate,
    SweepRetrain,
    SweepDistractors,
    Report,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Pretrain => "pretrain",
            Subcommand::MetaTrain => "meta-train",
            Subcommand::MetaTest => "meta-test",
            Subcommand::Ablate => "ablate",
            Subcommand::SweepRetrain => "sweep-retrain",
            Subcommand::SweepDistractors => "sweep-distractors",
            Subcommand::Report => "report",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CliArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub overrides: Vec<String>,
}

/// Resolve the effective config: defaults, then the config file, then
/// `--override k=v` pairs, then the dedicated `--seed` / `--episodes` flags.
pub fn load_config(args: &CliArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(episodes) = args.episodes {
        cfg.test_episodes = episodes;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(sub: Subcommand, args: &CliArgs) -> Result<()> {
    let cfg = load_config(args)?;
    std::fs::create_dir_all(&args.out)?;
    match sub {
        Subcommand::Pretrain => cmd_pretrain(&args.out, &cfg),
        Subcommand::MetaTrain => cmd_meta_train(&args.out, &cfg),
        Subcommand::MetaTest => cmd_meta_test(&args.out, &cfg),
        Subcommand::Ablate => cmd_ablate(&args.out, &cfg),
        Subcommand::SweepRetrain => cmd_sweep_retrain(&args.out, &cfg),
        Subcommand::SweepDistractors => cmd_sweep_distractors(&args.out, &cfg),
        Subcommand::Report => cmd_report(&args.out, &cfg),
    }
}

// ---------------------------------------------------------------------------
// Paths and shared plumbing
// ---------------------------------------------------------------------------

pub fn backbone_path(out: &Path) -> PathBuf {
    out.join("checkpoint-backbone.json")
}

pub fn meta_best_path(out: &Path) -> PathBuf {
    out.join("checkpoint-meta-best.json")
}

pub fn meta_final_path(out: &Path) -> PathBuf {
    out.join("checkpoint-meta-final.json")
}

fn group_csv(out: &Path, group: &str) -> PathBuf {
    out.join(format!("metrics-{group}.csv"))
}

fn group_jsonl(out: &Path, group: &str) -> PathBuf {
    out.join(format!("metrics-{group}.jsonl"))
}

fn group_episodes(out: &Path, group: &str) -> PathBuf {
    out.join(format!("metrics-episodes-{group}.csv"))
}

fn group_pairs(out: &Path, group: &str) -> PathBuf {
    out.join(format!("metrics-pairs-{group}.csv"))
}

fn require_file(path: &Path, sub: Subcommand, produced_by: Subcommand) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "`{}` needs {} — run `{}` first",
            sub.name(),
            path.display(),
            produced_by.name()
        )))
    }
}

fn check_backbone(backbone: &Backbone, cfg: &TrainConfig) -> Result<()> {
    let expect = Backbone::dims(cfg.dim, cfg.hidden, cfg.embed);
    let got: Vec<(usize, usize)> = backbone
        .layers
        .iter()
        .map(|(w, _)| (w.rows(), w.cols()))
        .collect();
    if got != expect {
        return Err(Error::Contract(format!(
            "backbone checkpoint layer shapes {got:?} do not match the configured \
             dim/hidden/embed {expect:?}"
        )));
    }
    Ok(())
}

fn load_pipeline(
    out: &Path,
    cfg: &TrainConfig,
    sub: Subcommand,
) -> Result<(Backbone, MetaState, ClassDataset)> {
    let bpath = backbone_path(out);
    require_file(&bpath, sub, Subcommand::Pretrain)?;
    let (backbone, _) = load_backbone(&bpath)?;
    check_backbone(&backbone, cfg)?;
    let mpath = meta_best_path(out);
    require_file(&mpath, sub, Subcommand::MetaTrain)?;
    let (state, _) = load_meta_state(&mpath)?;
    validate_meta_state(&state, &backbone, cfg)?;
    let ds = ClassDataset::build(cfg.dataset_spec(), cfg.seed)?;
    Ok((backbone, state, ds))
}

fn write_manifest(
    out: &Path,
    sub: Subcommand,
    cfg: &TrainConfig,
    wall: f64,
    artifacts: &[(&str, PathBuf)],
    notes: &[String],
) -> Result<PathBuf> {
    let path = out.join(format!("run-manifest-{}.txt", sub.name()));
    let mut text = String::new();
    text.push_str("[run]\n");
    text.push_str(&format!("subcommand={}\n", sub.name()));
    text.push_str(&format!(
        "package={} {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    ));
    text.push_str(&format!("config_hash={}\n", cfg.hash()));
    text.push_str(&format!("seed={}\n", cfg.seed));
    text.push_str(&format!("wall_clock_seconds={wall}\n"));
    text.push_str("\n[artifacts]\n");
    for (name, p) in artifacts {
        text.push_str(&format!("{name}={}\n", p.display()));
    }
    if !notes.is_empty() {
        text.push_str("\n[notes]\n");
        for n in notes {
            text.push_str(n);
            text.push('\n');
        }
    }
    text.push_str("\n[config]\n");
    text.push_str(&cfg.canonical_text());
    std::fs::write(&path, text)?;
    Ok(path)
}

fn standard_comments(cfg: &TrainConfig, wall: f64) -> Vec<String> {
    vec![
        format!("config_hash={}", cfg.hash()),
        format!("seed={}", cfg.seed),
        format!("wall_clock_seconds={wall}"),
    ]
}

/// Flatten a test report into one aggregate record plus per-episode rows.
fn report_to_records(
    group: &str,
    variant: &str,
    report: &TestReport,
    wall: f64,
    cfg: &TrainConfig,
) -> (MetricsRecord, Vec<EpisodeRow>) {
    let setting = report.setting.tag().to_string();
    let record = MetricsRecord {
        group: group.to_string(),
        setting: setting.clone(),
        variant: variant.to_string(),
        episodes: report.episodes,
        mean_accuracy: report.mean_accuracy,
        ci95: report.ci95,
        mean_query_loss: report.mean_query_loss,
        stage_pl: report.stage_pl_means.clone(),
        stage_selected_pl: report.stage_selected_pl_means.clone(),
        shortfall_classes: report
            .records
            .iter()
            .filter(|r| r.shortfall_classes > 0)
            .count(),
        wall_clock_seconds: wall,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let rows = report
        .records
        .iter()
        .map(|r| EpisodeRow {
            group: group.to_string(),
            setting: setting.clone(),
            variant: variant.to_string(),
            index: r.index,
            seed: r.seed,
            accuracy: r.accuracy,
            query_loss: r.query_loss,
            selected_total: r.selected_total,
            shortfall_classes: r.shortfall_classes,
            stage_pl: r.stage_subset_pl.clone(),
            stage_selected_pl: r.stage_selected_pl.clone(),
            config_hash: cfg.hash(),
        })
        .collect();
    (record, rows)
}

/// Rebuild the merged `metrics.csv` / `metrics.jsonl` from every
/// per-group metrics file present in `out`.
fn rebuild_merged(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let mut merged = Vec::new();
    for group in GROUPS {
        let path = group_csv(out, group);
        if path.exists() {
            merged.extend(read_metrics_csv(&path)?);
        }
    }
    let comments = vec![
        "merged view of all per-subcommand metrics files".to_string(),
        format!("base config_hash={}", cfg.hash()),
        format!("seed={}", cfg.seed),
    ];
    write_metrics_csv(&out.join("metrics.csv"), &merged, &comments)?;
    write_metrics_jsonl(&out.join("metrics.jsonl"), &merged)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Paired aggregation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PairComparison {
    pub group: String,
    /// Row labels being compared (setting tag, or the variant when present).
    pub a: String,
    pub b: String,
    pub episodes: usize,
    /// Mean of per-episode accuracy differences `a - b`.
    pub mean_diff: f64,
    pub ci95_diff: Option<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

pub fn row_label(row: &EpisodeRow) -> String {
    if row.variant.is_empty() {
        row.setting.clone()
    } else {
        row.variant.clone()
    }
}

fn partition_by_label(rows: &[EpisodeRow]) -> Vec<(String, Vec<&EpisodeRow>)> {
    let mut parts: Vec<(String, Vec<&EpisodeRow>)> = Vec::new();
    for row in rows {
        let label = row_label(row);
        match parts.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(row),
            None => parts.push((label, vec![row])),
        }
    }
    parts
}

/// All pairwise paired-episode comparisons within one group of rows.
/// Episodes must line up one-to-one by seed, or the runs were not paired.
pub fn aggregate_pairs(group: &str, rows: &[EpisodeRow]) -> Result<Vec<PairComparison>> {
    let parts = partition_by_label(rows);
    let mut out = Vec::new();
    for i in 0..parts.len() {
        for j in (i + 1)..parts.len() {
            let (la, ra) = &parts[i];
            let (lb, rb) = &parts[j];
            if ra.len() != rb.len() {
                return Err(Error::Pairing(format!(
                    "group '{group}': '{la}' has {} episodes but '{lb}' has {} — \
                     runs are not paired",
                    ra.len(),
                    rb.len()
                )));
            }
            for (x, y) in ra.iter().zip(rb.iter()) {
                if x.seed != y.seed {
                    return Err(Error::Pairing(format!(
                        "group '{group}': episode {} seed {} in '{la}' does not match \
                         seed {} in '{lb}' — runs are not paired",
                        x.index, x.seed, y.seed
                    )));
                }
            }
            let diffs: Vec<f64> = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| x.accuracy - y.accuracy)
                .collect();
            let (mean_diff, ci95_diff) = mean_and_ci95(&diffs);
            out.push(PairComparison {
                group: group.to_string(),
                a: la.clone(),
                b: lb.clone(),
                episodes: diffs.len(),
                mean_diff,
                ci95_diff,
                wins: diffs.iter().filter(|d| **d > 0.0).count(),
                losses: diffs.iter().filter(|d| **d < 0.0).count(),
                ties: diffs.iter().filter(|d| **d == 0.0).count(),
            });
        }
    }
    Ok(out)
}

const PAIR_COLUMNS: [&str; 9] = [
    "group", "a", "b", "episodes", "mean_diff", "ci95_diff", "wins", "losses", "ties",
];

fn write_pairs_csv(path: &Path, pairs: &[PairComparison], comments: &[String]) -> Result<()> {
    let rows = pairs
        .iter()
        .map(|p| {
            vec![
                p.group.clone(),
                p.a.clone(),
                p.b.clone(),
                p.episodes.to_string(),
                format!("{}", p.mean_diff),
                p.ci95_diff.map(|c| format!("{c}")).unwrap_or_default(),
                p.wins.to_string(),
                p.losses.to_string(),
                p.ties.to_string(),
            ]
        })
        .collect();
    write_csv_file(path, &PAIR_COLUMNS, rows, comments)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_pretrain(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let start = Instant::now();
    let ds = ClassDataset::build(cfg.dataset_spec(), cfg.seed)?;
    let (backbone, report) = crate::model::pretrain_backbone(&ds, &cfg.pretrain_config(), cfg.seed)?;
    let bpath = backbone_path(out);
    save_backbone(&bpath, &backbone, cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let manifest = write_manifest(
        out,
        Subcommand::Pretrain,
        cfg,
        wall,
        &[("backbone", bpath.clone())],
        &[
            format!("pretrain_steps={}", report.steps),
            format!("final_loss={}", report.final_loss),
            format!("train_accuracy={}", report.train_accuracy),
            format!("holdout_accuracy={}", report.holdout_accuracy),
        ],
    )?;
    println!(
        "pretrain: {} steps, train acc {:.4}, holdout acc {:.4}",
        report.steps, report.train_accuracy, report.holdout_accuracy
    );
    println!("pretrain: wrote {} and {}", bpath.display(), manifest.display());
    Ok(())
}

fn cmd_meta_train(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let start = Instant::now();
    let bpath = backbone_path(out);
    require_file(&bpath, Subcommand::MetaTrain, Subcommand::Pretrain)?;
    let (backbone, _) = load_backbone(&bpath)?;
    check_backbone(&backbone, cfg)?;
    let ds = ClassDataset::build(cfg.dataset_spec(), cfg.seed)?;
    let init = MetaState::initial(&backbone, cfg);
    let result = meta_train(&backbone, &ds, cfg, init)?;

    let best = meta_best_path(out);
    let final_ = meta_final_path(out);
    save_meta_state(&best, &result.best_state, cfg)?;
    save_meta_state(&final_, &result.state, cfg)?;

    let wall = start.elapsed().as_secs_f64();
    let comments = standard_comments(cfg, wall);
    let history_path = out.join("metrics-train-history.csv");
    let history_rows = result
        .history
        .iter()
        .map(|h| {
            vec![
                h.iteration.to_string(),
                format!("{}", h.beta1),
                format!("{}", h.beta2),
                format!("{}", h.query_accuracy),
                format!("{}", h.query_loss_t),
                format!("{}", h.query_loss_m),
                h.pl_accuracy.map(|p| format!("{p}")).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv_file(
        &history_path,
        &[
            "iteration",
            "beta1",
            "beta2",
            "query_accuracy",
            "query_loss_t",
            "query_loss_m",
            "pl_accuracy",
        ],
        history_rows,
        &comments,
    )?;
    let evals_path = out.join("metrics-train-evals.csv");
    let eval_rows = result
        .evals
        .iter()
        .map(|e| {
            vec![
                e.iteration.to_string(),
                format!("{}", e.val_accuracy),
                e.val_ci95.map(|c| format!("{c}")).unwrap_or_default(),
                e.val_pl_accuracy.map(|p| format!("{p}")).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv_file(
        &evals_path,
        &["iteration", "val_accuracy", "val_ci95", "val_pl_accuracy"],
        eval_rows,
        &comments,
    )?;

    let manifest = write_manifest(
        out,
        Subcommand::MetaTrain,
        cfg,
        wall,
        &[
            ("meta_best", best.clone()),
            ("meta_final", final_.clone()),
            ("train_history", history_path),
            ("train_evals", evals_path),
        ],
        &[
            format!("iterations={}", result.state.iteration),
            format!("best_iteration={}", result.best_iteration),
            format!("best_val_accuracy={}", result.best_val_accuracy),
        ],
    )?;
    println!(
        "meta-train: {} iterations, best val acc {:.4} at iteration {}",
        result.state.iteration, result.best_val_accuracy, result.best_iteration
    );
    println!("meta-train: wrote {} and {}", best.display(), manifest.display());
    Ok(())
}

/// Evaluate one or more (variant, config, setting, stages) cells against the
/// shared meta-state, writing the group's metrics, episode, and pairs files.
fn run_group(
    out: &Path,
    group: &str,
    base_cfg: &TrainConfig,
    cells: &[(String, TrainConfig, AblationSetting, usize)],
    sub: Subcommand,
) -> Result<Vec<MetricsRecord>> {
    let start = Instant::now();
    let (backbone, state, ds) = load_pipeline(out, base_cfg, sub)?;
    let mut records = Vec::new();
    let mut episode_rows = Vec::new();
    for (variant, cfg, setting, stages) in cells {
        let cell_start = Instant::now();
        let report = meta_test(
            &backbone,
            &state,
            &ds,
            cfg,
            Split::MetaTest,
            *setting,
            cfg.test_episodes,
            *stages,
            TAG_TEST_EPISODE,
        )?;
        let wall = cell_start.elapsed().as_secs_f64();
        let (record, rows) = report_to_records(group, variant, &report, wall, cfg);
        let label = if variant.is_empty() {
            record.setting.clone()
        } else {
            variant.clone()
        };
        println!(
            "{group}: {label} -> mean acc {:.4} (ci95 {}) over {} episodes",
            record.mean_accuracy,
            record
                .ci95
                .map(|c| format!("{c:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            record.episodes
        );
        records.push(record);
        episode_rows.extend(rows);
    }
    let wall = start.elapsed().as_secs_f64();
    let comments = standard_comments(base_cfg, wall);
    write_metrics_csv(&group_csv(out, group), &records, &comments)?;
    write_metrics_jsonl(&group_jsonl(out, group), &records)?;
    write_episodes_csv(&group_episodes(out, group), &episode_rows, &comments)?;
    let pairs = aggregate_pairs(group, &episode_rows)?;
    write_pairs_csv(&group_pairs(out, group), &pairs, &comments)?;
    rebuild_merged(out, base_cfg)?;
    let mut artifacts = vec![
        ("metrics", group_csv(out, group)),
        ("metrics_jsonl", group_jsonl(out, group)),
        ("episodes", group_episodes(out, group)),
        ("pairs", group_pairs(out, group)),
        ("merged", out.join("metrics.csv")),
    ];
    artifacts.retain(|(_, p)| p.exists());
    write_manifest(out, sub, base_cfg, wall, &artifacts, &[])?;
    Ok(records)
}

fn cmd_meta_test(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let setting = cfg.ablation;
    let stages = stages_for(setting, cfg);
    let cells = vec![(String::new(), cfg.clone(), setting, stages)];
    run_group(out, "meta-test", cfg, &cells, Subcommand::MetaTest)?;
    Ok(())
}

fn cmd_ablate(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let cells: Vec<_> = AblationSetting::ALL
        .iter()
        .map(|s| (String::new(), cfg.clone(), *s, stages_for(*s, cfg)))
        .collect();
    run_group(out, "ablate", cfg, &cells, Subcommand::Ablate)?;
    Ok(())
}

fn cmd_sweep_retrain(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let mut cells = Vec::new();
    for m in RETRAIN_SWEEP {
        if m > cfg.t_steps {
            continue;
        }
        let mut c = cfg.clone();
        c.m_steps = m;
        c.validate()?;
        let setting = c.ablation;
        let stages = stages_for(setting, &c);
        cells.push((format!("m={m}"), c, setting, stages));
    }
    run_group(out, "sweep-retrain", cfg, &cells, Subcommand::SweepRetrain)?;
    Ok(())
}

fn cmd_sweep_distractors(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let available = cfg.test_classes.saturating_sub(cfg.way);
    let mut cells = Vec::new();
    for d in DISTRACTOR_SWEEP {
        if d > available {
            continue;
        }
        let mut c = cfg.clone();
        c.distractors = d;
        // Sweep cells only evaluate the test split; don't hold them to the
        // validation-split episode constraint.
        c.val_episodes = 0;
        c.validate()?;
        let setting = c.ablation;
        let stages = stages_for(setting, &c);
        cells.push((format!("distractors={d}"), c, setting, stages));
    }
    run_group(out, "sweep-distractors", cfg, &cells, Subcommand::SweepDistractors)?;
    Ok(())
}

fn cmd_report(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let start = Instant::now();
    let mut text = String::new();
    text.push_str("evaluation report\n");
    text.push_str(&format!("base config_hash={} seed={}\n", cfg.hash(), cfg.seed));
    let mut found = false;
    let mut artifacts = Vec::new();
    for group in GROUPS {
        let epath = group_episodes(out, group);
        if !epath.exists() {
            continue;
        }
        found = true;
        let rows = read_episodes_csv(&epath)?;
        text.push_str(&format!("\n[group: {group}]\n"));
        text.push_str(&format!(
            "{:<24} {:>8} {:>12} {:>12}\n",
            "label", "episodes", "mean_acc", "ci95"
        ));
        for (label, part) in partition_by_label(&rows) {
            let accs: Vec<f64> = part.iter().map(|r| r.accuracy).collect();
            let (mean, ci) = mean_and_ci95(&accs);
            text.push_str(&format!(
                "{label:<24} {:>8} {mean:>12.4} {:>12}\n",
                accs.len(),
                ci.map(|c| format!("{c:.4}")).unwrap_or_else(|| "n/a".into()),
            ));
        }
        let pairs = aggregate_pairs(group, &rows)?;
        if !pairs.is_empty() {
            text.push_str("pairwise (paired episodes, diff = a - b):\n");
            for p in &pairs {
                text.push_str(&format!(
                    "  {:<24} vs {:<24} mean_diff {:+.4} ci95 {} wins {} losses {} ties {}\n",
                    p.a,
                    p.b,
                    p.mean_diff,
                    p.ci95_diff
                        .map(|c| format!("{c:.4}"))
                        .unwrap_or_else(|| "n/a".into()),
                    p.wins,
                    p.losses,
                    p.ties
                ));
            }
            let ppath = group_pairs(out, group);
            write_pairs_csv(&ppath, &pairs, &standard_comments(cfg, 0.0))?;
            artifacts.push(("pairs", ppath));
        }
    }
    if !found {
        return Err(Error::Dependency(format!(
            "`report` needs per-episode metrics in {} — run `ablate`, `meta-test`, \
             or a sweep first",
            out.display()
        )));
    }
    let rpath = out.join("report.txt");
    std::fs::write(&rpath, &text)?;
    rebuild_merged(out, cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let mut all_artifacts = vec![("report", rpath.clone()), ("merged", out.join("metrics.csv"))];
    all_artifacts.extend(artifacts);
    write_manifest(out, Subcommand::Report, cfg, wall, &all_artifacts, &[])?;
    print!("{text}");
    println!("report: wrote {}", rpath.display());
    Ok(())
}
