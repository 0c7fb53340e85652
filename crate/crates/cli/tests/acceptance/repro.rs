//! Every command rerun with the same manifest inputs rewrites identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fasgen_core::dataset::{GridSpec, SynthConfig};

use crate::support::{fasgen, path_str, tempdir, Shared, Verdict};

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        out.insert(name, fs::read(&p).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

pub fn reproducibility(_: &mut Shared) -> Result<Verdict, String> {
    let dir = tempdir()?;
    let root = dir.path();
    let cfg = SynthConfig {
        n_stations: 60,
        n_events: 20,
        stations_per_event: 25,
        grid: GridSpec {
            n_freq: 16,
            ..GridSpec::default()
        },
        ..SynthConfig::default()
    };
    fs::write(root.join("synth.toml"), cfg.to_toml()).map_err(|e| e.to_string())?;
    let p = |name: &str| root.join(name).to_str().expect("utf-8 temp path").to_string();
    let (config, data, fit, model, cal) = (p("synth.toml"), p("data"), p("fit"), p("model"), p("cal"));
    let (ckpt, fit_file) = (p("model/model.ckpt"), p("fit/fit.toml"));
    let (map_cgm, map_gp, validate, density) = (p("map_cgm"), p("map_gp"), p("validate"), p("density"));
    let event = "37.7,-122.1,8";
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("synth", vec!["synth", "--config", &config, "--seed", "5", "--out", &data]),
        ("fit-gp", vec!["fit-gp", "--dataset", &data, "--freqs", "all", "--out", &fit]),
        ("train", vec!["train", "--dataset", &data, "--alpha", "0.1", "--epochs", "3", "--seed", "2", "--out", &model]),
        (
            "train --calibrate",
            vec!["train", "--dataset", &data, "--calibrate", "--alphas", "1e-4,1e-2", "--epochs", "2", "--out", &cal],
        ),
        (
            "predict-map (generative)",
            vec![
                "predict-map", "--model", &ckpt, "--event", event, "--size", "12", "--ensemble", "20", "--seed", "3", "--out",
                &map_cgm,
            ],
        ),
        (
            "predict-map (GP)",
            vec!["predict-map", "--fit", &fit_file, "--dataset", &data, "--event", event, "--size", "12", "--out", &map_gp],
        ),
        (
            "validate",
            vec![
                "validate", "--model", &ckpt, "--fit", &fit_file, "--dataset", &data, "--ensemble", "20", "--out", &validate,
            ],
        ),
        (
            "density",
            vec![
                "density", "--dataset", &data, "--separations", "5,20", "--subsets", "2", "--epochs", "2", "--ensemble", "10",
                "--out", &density,
            ],
        ),
    ];
    let mut checked = Vec::new();
    for (label, args) in &commands {
        let mut args = args.clone();
        let out = Path::new(*args.last().ok_or("empty command")?);
        if *label != "synth" {
            args.extend(["--n-freq", "16"]);
        }
        fasgen(&args)?;
        let first = snapshot(out)?;
        fasgen(&args)?;
        let second = snapshot(out)?;
        if !first.contains_key("manifest.toml") {
            return Ok(Verdict::fail(format!("{label}: no manifest written in {}", path_str(out))));
        }
        if first != second {
            let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
            return Ok(Verdict::fail(format!("{label}: rerun changed {differing:?}")));
        }
        checked.push(format!("{label} ({} files)", first.len()));
    }
    Ok(Verdict::new(true, format!("byte-identical reruns: {}", checked.join(", "))))
}
