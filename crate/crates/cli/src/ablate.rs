use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::ValueEnum;
use deshadow_core::config::Config;
use deshadow_core::data::{load_dataset, DatasetIndex, Split};
use deshadow_core::inference::{evaluate, RemovalModel};
use deshadow_core::trainer::Trainer;
use serde::Serialize;

use crate::common::{apply_overrides, data_root, load_config, new_run_dir, parse_override, usage};
use crate::train::{train_into, training_set};
use crate::{ConfigArgs, DataArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The four generator/remover/refiner connection patterns.
    Detach,
    /// Dilation sizes 0, 5, 15, 50 and 100.
    Tau,
    /// The full objective and each loss term dropped in turn.
    Loss,
}

#[derive(clap::Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    preset: Vec<Preset>,
    /// Extra variant as NAME:KEY=VALUE,KEY=VALUE.
    #[arg(long)]
    variant: Vec<String>,
    /// Variants trained at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Skip scoring on the test split.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

fn variant(name: &str, overrides: &[(&str, &str)]) -> Variant {
    Variant {
        name: name.to_owned(),
        overrides: overrides.iter().map(|(k, v)| ((*k).to_owned(), (*v).to_owned())).collect(),
    }
}

pub fn preset_variants(p: Preset) -> Vec<Variant> {
    const G: &str = "train.detach_g_from_i";
    const I: &str = "train.detach_i_from_r";
    match p {
        Preset::Detach => vec![
            variant("detach-both", &[(G, "true"), (I, "true")]),
            variant("detach-g", &[(G, "true"), (I, "false")]),
            variant("detach-i", &[(G, "false"), (I, "true")]),
            variant("joint", &[(G, "false"), (I, "false")]),
        ],
        Preset::Tau => [0, 5, 15, 50, 100]
            .iter()
            .map(|t| Variant {
                name: format!("tau-{t}"),
                overrides: vec![("train.tau".into(), t.to_string())],
            })
            .collect(),
        Preset::Loss => {
            let mut v: Vec<Variant> = ["gan", "iden", "rem", "full", "area"]
                .iter()
                .map(|t| Variant {
                    name: format!("no-{t}"),
                    overrides: vec![(format!("train.weights.{t}"), "0".into())],
                })
                .collect();
            v.push(variant("all-losses", &[]));
            v
        }
    }
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    let (name, rest) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("variant {s:?} is not NAME:KEY=VALUE,...")))?;
    let name = name.trim();
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(usage(format!("variant name {name:?} is not usable as a directory name")));
    }
    let overrides = rest
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_override(p).map(|(k, v)| (k.to_owned(), v.to_owned())))
        .collect::<Result<_>>()?;
    Ok(Variant {
        name: name.to_owned(),
        overrides,
    })
}

/// One line of the merged comparison table.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub overrides: String,
    pub steps: usize,
    pub final_total: Option<f64>,
    pub rmse_shadow: Option<f64>,
    pub rmse_nonshadow: Option<f64>,
    pub rmse_all: Option<f64>,
    pub psnr_shadow: Option<f64>,
    pub psnr_nonshadow: Option<f64>,
    pub psnr_all: Option<f64>,
    pub ssim_shadow: Option<f64>,
    pub ssim_nonshadow: Option<f64>,
    pub ssim_all: Option<f64>,
    pub run_dir: String,
}

fn run_variant(cfg: Config, v: &Variant, train: &DatasetIndex, test: Option<&DatasetIndex>, dir: &Path) -> Result<AblationRow> {
    let mut trainer = Trainer::new(cfg)?;
    let summary = train_into(&mut trainer, train, dir, None, usize::MAX)?;
    let mut row = AblationRow {
        variant: v.name.clone(),
        overrides: v.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
        steps: trainer.state.step,
        final_total: summary.history.last().map(|r| r.total),
        run_dir: dir.display().to_string(),
        ..AblationRow::default()
    };
    if let Some(test) = test {
        let model = RemovalModel::from_networks(&trainer.nets, trainer.config.eval.test_size);
        let report = evaluate(test, &model, &trainer.config.eval, None)?;
        report.save(&dir.join("metrics.csv"), &dir.join("metrics.json"))?;
        row.rmse_shadow = report.rmse_shadow;
        row.rmse_nonshadow = report.rmse_nonshadow;
        row.rmse_all = report.rmse_all;
        row.psnr_shadow = report.psnr_shadow;
        row.psnr_nonshadow = report.psnr_nonshadow;
        row.psnr_all = report.psnr_all;
        row.ssim_shadow = report.ssim_shadow;
        row.ssim_nonshadow = report.ssim_nonshadow;
        row.ssim_all = report.ssim_all;
    }
    Ok(row)
}

pub fn run(a: AblateArgs) -> Result<()> {
    let mut variants: Vec<Variant> = a.preset.iter().flat_map(|&p| preset_variants(p)).collect();
    for s in &a.variant {
        variants.push(parse_variant(s)?);
    }
    if variants.is_empty() {
        return Err(usage("no variants: pass --preset and/or --variant"));
    }
    let mut names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("variant {} appears twice", w[0])));
    }

    let mut base = load_config(&a.config)?;
    let root = data_root(&a.data, &base)?;
    base.data.root = Some(root.clone());
    // every variant config is checked before any training starts
    let configs = variants
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            let sets: Vec<String> = v.overrides.iter().map(|(k, val)| format!("{k}={val}")).collect();
            apply_overrides(&mut cfg, &sets).with_context(|| format!("variant {}", v.name))?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let train = training_set(&base, &root)?;
    let test = if a.no_eval {
        None
    } else {
        match load_dataset(&root, Split::Test) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("no test split, variants will not be scored: {e}");
                None
            }
        }
    };
    let dir = new_run_dir(&a.out, "ablate", &base.to_toml_string())?;
    fs::write(dir.join("base_config.toml"), base.to_toml_string())?;
    log::info!("{} variants into {}", variants.len(), dir.display());

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..variants.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= variants.len() {
            break;
        }
        let v = &variants[i];
        log::info!("variant {} started", v.name);
        let out = run_variant(configs[i].clone(), v, &train, test.as_ref(), &dir.join(&v.name));
        match &out {
            Ok(r) => log::info!("variant {} done, final total {:?}", v.name, r.final_total),
            Err(e) => log::error!("variant {} failed: {e:#}", v.name),
        }
        rows.lock().expect("no worker panicked")[i] = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, variants.len()) {
            s.spawn(worker);
        }
    });

    let path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut failures = Vec::new();
    for (v, r) in variants.iter().zip(rows.into_inner().expect("no worker panicked")) {
        match r.expect("every variant ran") {
            Ok(row) => w.serialize(row)?,
            Err(e) => failures.push(format!("{}: {e:#}", v.name)),
        }
    }
    w.flush()?;
    println!("{}", dir.display());
    if failures.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("{} variant(s) failed: {}", failures.len(), failures.join("; "))
    }
}
