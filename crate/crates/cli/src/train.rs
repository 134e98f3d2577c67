//! The train-forecaster subcommand: aggregate a trace into windows,
//! split chronologically, train, and grade one-step predictions on the
//! held-out half.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use lmsim::error::{Error, ForecastError};
use lmsim::forecast::{ForecastModel, SeriesModel};
use lmsim::metrics::{forecast_accuracy, ApeSummary};
use lmsim::trace::{aggregate_windows, load_trace};

use crate::common::FileArg;

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub file: FileArg,
    /// Trace to train on
    #[arg(long)]
    pub trace: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,
    /// Training report output path (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Forecast window length in seconds
    #[arg(long)]
    pub window: Option<f64>,
    /// History windows fed to the model per prediction
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// One-step predictions over the held-out half, always conditioning on
/// true history.
fn rolling_eval(model: &SeriesModel, series: &[f64], history_len: usize, start: usize) -> Vec<f64> {
    (start..series.len())
        .map(|i| model.predict_next(&series[i - history_len..i]))
        .collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = args.file.load()?;
    if let Some(v) = args.window {
        cfg.forecast.window_s = v;
    }
    if let Some(v) = args.history {
        cfg.forecast.history_len = v;
    }
    if let Some(v) = args.hidden {
        cfg.forecast.hidden = v;
    }
    if let Some(v) = args.epochs {
        cfg.forecast.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.forecast.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.forecast.train_seed = v;
    }
    cfg.validate()?;

    let records = load_trace(&args.trace)?;
    let windows = aggregate_windows(&records, cfg.forecast.window_s)?;
    let prefill: Vec<f64> = windows.iter().map(|w| w.prompt_tokens as f64).collect();
    let decode: Vec<f64> = windows.iter().map(|w| w.decode_tokens as f64).collect();

    // Chronological 1:1 split; the later half stays unseen.
    let split = windows.len() / 2;
    let k = cfg.forecast.history_len;
    if split < k + 1 {
        return Err(ForecastError::InsufficientData {
            needed: 2 * (k + 1),
            have: windows.len(),
        }
        .into());
    }

    let fc = cfg.forecast.forecast_config();
    let model = ForecastModel::train(&prefill[..split], &decode[..split], &fc)?;

    let eval = |series: &[f64], sm: &SeriesModel| -> Result<Option<ApeSummary>, Error> {
        let preds = rolling_eval(sm, series, k, split);
        forecast_accuracy(&preds, &series[split..])
    };
    let prefill_ape = eval(&prefill, model.prefill())?;
    let decode_ape = eval(&decode, model.decode())?;

    model.save(&args.out)?;

    let payload = serde_json::json!({
        "trace": args.trace.display().to_string(),
        "window_s": cfg.forecast.window_s,
        "history_len": k,
        "hidden": cfg.forecast.hidden,
        "epochs": cfg.forecast.epochs,
        "seed": cfg.forecast.train_seed,
        "windows_total": windows.len(),
        "windows_train": split,
        "windows_test": windows.len() - split,
        "prefill_ape": prefill_ape,
        "decode_ape": decode_ape,
        "final_loss_prefill": model.prefill().final_loss(),
        "final_loss_decode": model.decode().final_loss(),
    });
    if let Some(path) = &args.report {
        let mut text = serde_json::to_string_pretty(&payload).expect("report serializes");
        text.push('\n');
        fs::write(path, text)?;
    }

    println!(
        "trained on {} windows, held out {}",
        split,
        windows.len() - split
    );
    for (name, ape) in [("prefill", prefill_ape), ("decode", decode_ape)] {
        match ape {
            Some(a) => println!(
                "{name}: mean APE {:.2}%, max APE {:.2}% over {} windows",
                a.mean_ape * 100.0,
                a.max_ape * 100.0,
                a.windows
            ),
            None => println!("{name}: no gradable held-out windows"),
        }
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}
