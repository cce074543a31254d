use std::process::ExitCode;

use glab::config::ExperimentConfig;
use glab::pipeline;

const USAGE: &str = "\
glab - desk-scale gradient inversion laboratory

USAGE:
    glab <train|capture|attack|eval|bench> --config PATH [--set key=value]...

COMMANDS:
    train    generate the sprite dataset, train the classifier and the NCB
    capture  write ground-truth images and per-image gradient captures
    attack   reconstruct images from captures with the configured strategy
    eval     score reconstructions against ground truth (PSNR/SSIM)
    bench    run every strategy in bench.strategies at equal budgets

Config keys and defaults are listed in the README. --set overrides any key.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: &[String]) -> Result<(), String> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        print!("{USAGE}");
        return if args.is_empty() { Err("missing command".into()) } else { Ok(()) };
    }
    let command = args[0].as_str();
    let mut config_path: Option<String> = None;
    let mut sets: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                i += 1;
                config_path =
                    Some(args.get(i).ok_or("--config requires a path")?.clone());
            }
            "--set" => {
                i += 1;
                let kv = args.get(i).ok_or("--set requires key=value")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("--set expects key=value, got {kv:?}"))?;
                sets.push((k.trim().to_string(), v.trim().to_string()));
            }
            other => return Err(format!("unknown argument {other:?}\n\n{USAGE}")),
        }
        i += 1;
    }

    let cfg = match config_path {
        Some(path) => ExperimentConfig::from_file(std::path::Path::new(&path), &sets)
            .map_err(|e| e.to_string())?,
        None => {
            let mut cfg = ExperimentConfig::default();
            for (k, v) in &sets {
                cfg.set(k, v).map_err(|e| e.to_string())?;
            }
            cfg
        }
    };

    let result = match command {
        "train" => pipeline::run_train(&cfg),
        "capture" => pipeline::run_capture(&cfg),
        "attack" => pipeline::run_attack_cmd(&cfg),
        "eval" => pipeline::run_eval(&cfg),
        "bench" => pipeline::run_bench(&cfg).map(|_| ()),
        other => return Err(format!("unknown command {other:?}\n\n{USAGE}")),
    };
    result.map_err(|e| e.to_string())
}
