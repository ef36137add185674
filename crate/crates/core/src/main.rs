//! Command-line driver. Each stage reads the artifacts of earlier stages from
//! `--out` and writes its own there:
//!
//! | stage | reads | writes |
//! |---|---|---|
//! | `train-clean` | | `clean.tvck`, `clean_q.tvck`, `train.json` |
//! | `gen-trigger` | `clean.tvck` | `trigger.tvtg`, `trigger.json` |
//! | `insert-trojan` | `clean.tvck`, `trigger.tvtg` | `trojan_q.tvck`, `flips.tvbf`, `attack.json` |
//! | `flip-apply` | `clean_q.tvck`, `flips.tvbf` | `flipped_q.tvck` |
//! | `evaluate` | `clean_q.tvck`, `trojan_q.tvck`, `trigger.tvtg` | `metrics.json` |
//! | `defend` | `clean.tvck`, `trigger.tvtg` | `defense.json` |
//! | `sweep` | | every artifact above plus `report.json`, `timings.json` |
//! | `report` | `report.json` | text tables on stdout |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde::Serialize;

use patchtroj::attack::run_attack;
use patchtroj::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use patchtroj::harness::config::ExperimentConfig;
use patchtroj::harness::pipeline::{
    attack_batch, defense_row, load_data, run_pipeline, summarize_trigger, train_model, trigger_pixels,
};
use patchtroj::harness::report::ExperimentReport;
use patchtroj::metrics::{compute_cda, evaluate, round2, MetricsReport};
use patchtroj::quant::{
    apply_flips, dequantize_params, diff_bits, quantize_params, read_flips, write_flips, QuantizedCheckpoint,
};
use patchtroj::trigger::{generate_trigger, read_trigger, write_trigger, TriggerSpec};
use patchtroj::vit::ModelParams;
use patchtroj::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    TrainClean,
    GenTrigger,
    InsertTrojan,
    FlipApply,
    Evaluate,
    Defend,
    Sweep,
    Report,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::TrainClean => "train-clean",
            Stage::GenTrigger => "gen-trigger",
            Stage::InsertTrojan => "insert-trojan",
            Stage::FlipApply => "flip-apply",
            Stage::Evaluate => "evaluate",
            Stage::Defend => "defend",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

/// Patch-wise trigger and Trojan insertion lab for a tiny Vision Transformer.
#[derive(Debug, Parser)]
#[command(name = "patchtroj", version)]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    command: Option<Stage>,
    /// Same as the positional stage.
    #[arg(long, value_enum, conflicts_with = "command")]
    stage: Option<Stage>,
    /// `key = value` experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_real(out: &Path) -> Result<ModelParams> {
    load_checkpoint(out.join("clean.tvck"))?.into_real()
}

fn load_quant(path: PathBuf) -> Result<QuantizedCheckpoint> {
    load_checkpoint(path)?.into_quantized()
}

fn load_trigger(out: &Path, params: &ModelParams, cfg: &ExperimentConfig) -> Result<TriggerSpec> {
    let mut t = read_trigger(&std::fs::read(out.join("trigger.tvtg"))?, &params.config)?;
    if let Some(layers) = &cfg.layers {
        t.layer_set = layers.clone();
    }
    Ok(t)
}

fn save_attack_artifacts(out: &Path, trojan: &QuantizedCheckpoint, flips: &patchtroj::quant::BitFlipRecord) -> Result<()> {
    save_checkpoint(out.join("trojan_q.tvck"), &Checkpoint::Quantized(trojan.clone()))?;
    std::fs::write(out.join("flips.tvbf"), write_flips(flips)?)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    clean_accuracy: f64,
    deployed_accuracy: f64,
    n_train: usize,
    n_test: usize,
}

#[derive(Serialize)]
struct AttackSummary {
    seed: u64,
    initial_target_weights: usize,
    n_p: usize,
    clean: MetricsReport,
    backdoored: MetricsReport,
}

#[derive(Serialize)]
struct EvalSummary {
    seed: u64,
    clean: MetricsReport,
    backdoored: MetricsReport,
}

fn run_stage(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    match stage {
        Stage::TrainClean => {
            let (train, test) = load_data(cfg)?;
            let clean = train_model(cfg, &train)?;
            let codes = quantize_params(&clean);
            let deployed = dequantize_params(&codes)?;
            save_checkpoint(out.join("clean.tvck"), &Checkpoint::Real(clean.clone()))?;
            save_checkpoint(out.join("clean_q.tvck"), &Checkpoint::Quantized(codes))?;
            write_json(
                &out.join("train.json"),
                &TrainSummary {
                    seed: cfg.seed,
                    clean_accuracy: round2(compute_cda(&clean, &test)?),
                    deployed_accuracy: round2(compute_cda(&deployed, &test)?),
                    n_train: train.len(),
                    n_test: test.len(),
                },
            )
        }
        Stage::GenTrigger => {
            let clean = load_real(out)?;
            let deployed = dequantize_params(&quantize_params(&clean))?;
            let (_, test) = load_data(cfg)?;
            let batch = attack_batch(cfg, &test)?;
            let run = generate_trigger(&deployed, &batch, &cfg.trigger(cfg.lambda))?;
            std::fs::write(out.join("trigger.tvtg"), write_trigger(&run.trigger)?)?;
            write_json(&out.join("trigger.json"), &summarize_trigger(&run))
        }
        Stage::InsertTrojan => {
            let clean = load_real(out)?;
            let trigger = load_trigger(out, &clean, cfg)?;
            let (_, test) = load_data(cfg)?;
            let batch = attack_batch(cfg, &test)?;
            let o = run_attack(&clean, &trigger, trigger_pixels(&trigger), &batch, &test, &cfg.insertion(cfg.threshold))?;
            save_attack_artifacts(out, &o.trojan_codes, &o.diff.record)?;
            write_json(
                &out.join("attack.json"),
                &AttackSummary {
                    seed: cfg.seed,
                    initial_target_weights: o.insertion.initial_count,
                    n_p: o.insertion.n_p,
                    clean: o.clean_metrics,
                    backdoored: o.trojan_metrics,
                },
            )
        }
        Stage::FlipApply => {
            let clean = load_quant(out.join("clean_q.tvck"))?;
            let record = read_flips(&std::fs::read(out.join("flips.tvbf"))?)?;
            let flipped = apply_flips(&clean, &record)?;
            let reference = out.join("trojan_q.tvck");
            if reference.exists() && load_quant(reference)? != flipped {
                return Err(Error::Incompatible(
                    "flip record does not reproduce trojan_q.tvck".into(),
                ));
            }
            save_checkpoint(out.join("flipped_q.tvck"), &Checkpoint::Quantized(flipped))
        }
        Stage::Evaluate => {
            let clean_codes = load_quant(out.join("clean_q.tvck"))?;
            let trojan_codes = load_quant(out.join("trojan_q.tvck"))?;
            let diff = diff_bits(&clean_codes, &trojan_codes)?;
            let clean = dequantize_params(&clean_codes)?;
            let trojaned = dequantize_params(&trojan_codes)?;
            let trigger = load_trigger(out, &clean, cfg)?;
            let (_, test) = load_data(cfg)?;
            let pixels = trigger_pixels(&trigger);
            let mut backdoored = evaluate(&trojaned, &test, &trigger, pixels)?;
            backdoored.tpn = diff.tpn;
            backdoored.tbn = diff.tbn;
            write_json(
                &out.join("metrics.json"),
                &EvalSummary {
                    seed: cfg.seed,
                    clean: evaluate(&clean, &test, &trigger, pixels)?,
                    backdoored,
                },
            )
        }
        Stage::Defend => {
            let clean = load_real(out)?;
            let trigger = load_trigger(out, &clean, cfg)?;
            let (_, test) = load_data(cfg)?;
            let batch = attack_batch(cfg, &test)?;
            let plain = run_attack(&clean, &trigger, trigger_pixels(&trigger), &batch, &test, &cfg.insertion(cfg.threshold))?;
            let row = defense_row(cfg, &clean, &trigger, &batch, &test, &plain)?;
            write_json(&out.join("defense.json"), &row)
        }
        Stage::Sweep => {
            let run = run_pipeline(cfg)?;
            let a = &run.artifacts;
            save_checkpoint(out.join("clean.tvck"), &Checkpoint::Real(a.clean.clone()))?;
            save_checkpoint(out.join("clean_q.tvck"), &Checkpoint::Quantized(a.clean_codes.clone()))?;
            std::fs::write(out.join("trigger.tvtg"), write_trigger(&a.trigger)?)?;
            save_attack_artifacts(out, &a.trojan_codes, &a.flips)?;
            std::fs::write(out.join("report.json"), run.report.to_json() + "\n")?;
            write_json(&out.join("timings.json"), &run.timings)
        }
        Stage::Report => {
            let text = std::fs::read_to_string(out.join("report.json"))?;
            let report: ExperimentReport = serde_json::from_str(&text)?;
            print!("{}", render(&report));
            Ok(())
        }
    }
}

fn render(r: &ExperimentReport) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "seed {}  clean acc {:.2}  deployed acc {:.2}", r.seed, r.clean_accuracy, r.deployed_accuracy);
    let _ = writeln!(
        s,
        "trigger patches {:?}  TAR {:.2}  attention {:.4} -> {:.4}",
        r.trigger.patches, r.trigger.tar, r.trigger.attention_before, r.trigger.attention_after
    );
    let _ = writeln!(
        s,
        "attack  CDA {:.2} -> {:.2}  ASR {:.2} -> {:.2}  n_p {}/{}  TPN {}  TBN {}  flips verified {}",
        r.clean.cda,
        r.backdoored.cda,
        r.clean.asr,
        r.backdoored.asr,
        r.n_p,
        r.initial_target_weights,
        r.backdoored.tpn,
        r.backdoored.tbn,
        r.flips_verified
    );
    if !r.e_sweep.is_empty() {
        let _ = writeln!(s, "\n{:>9} {:>6} {:>6} {:>6} {:>7} {:>7}", "e", "n_p", "TPN", "TBN", "CDA", "ASR");
        for row in &r.e_sweep {
            let _ = writeln!(
                s,
                "{:>9} {:>6} {:>6} {:>6} {:>7.2} {:>7.2}",
                row.threshold, row.n_p, row.tpn, row.tbn, row.cda, row.asr
            );
        }
    }
    if !r.lambda_sweep.is_empty() {
        let _ = writeln!(s, "\n{:>6} {:>10} {:>9} {:>7} {:>7} {:>6}", "lambda", "patches", "trig-only", "ASR", "CDA", "TPN");
        for row in &r.lambda_sweep {
            let _ = writeln!(
                s,
                "{:>6} {:>10} {:>9.2} {:>7.2} {:>7.2} {:>6}",
                row.lambda,
                format!("{:?}", row.patches),
                row.asr_trigger_only,
                row.asr,
                row.cda,
                row.tpn
            );
        }
    }
    if let Some(a) = &r.area_baseline {
        let _ = writeln!(
            s,
            "\narea block {}x{} at ({},{})  ASR {:.2}  vs patch ASR {:.2}",
            a.side, a.side, a.top, a.left, a.area_asr, a.patch_asr
        );
    }
    if let Some(d) = &r.defense {
        let _ = writeln!(
            s,
            "\ndefense {} factors {:?}  ASR {:.2} -> {:.2}  TPN {} -> {}  TBN {} -> {}  CDA {:.2} -> {:.2}",
            d.factors,
            d.inner_dims,
            d.plain.asr,
            d.defended.asr,
            d.plain.tpn,
            d.defended.tpn,
            d.plain.tbn,
            d.defended.tbn,
            d.cda_plain_real,
            d.cda_factored_real
        );
    }
    s
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(stage) = cli.command.or(cli.stage) else {
        eprintln!("error: name a stage, positionally or with --stage");
        return ExitCode::from(2);
    };
    let result = load_config(&cli).and_then(|cfg| run_stage(stage, &cfg, &cli.out).map_err(|e| e.in_stage(stage.name())));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
