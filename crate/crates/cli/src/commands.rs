use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use lefm::data::{generate_synthetic, load_dataset, make_split, read_image, save_dataset, DatasetLayout, Rule, SynthConfig};
use lefm::lefm::{ExponentTable, LefmLayer};
use lefm::metrics::{mask_vote_table, one_way_anova, read_runs_csv, write_runs_csv, AnovaVerdict, MetricName, RunReport, RunStatus};
use lefm::train::{
    content_hash, evaluate, model_name, report_coefficients, run_experiment, summarize, Checkpoint, Precision, TrainConfig,
    TrainError,
};
use lefm::{ErrorKind, Tensor, VERSION};

use crate::failure::Failure;
use crate::{AnovaArgs, EvalArgs, ExpandArgs, KappaArgs, ReportArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, Failure>;

/// Wraps a report body with the tool version and an input hash.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    version: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn envelope<T: Serialize>(config_hash: &str, body: T) -> String {
    let e = Envelope {
        version: VERSION,
        config_hash,
        body,
    };
    serde_json::to_string_pretty(&e).expect("report serializes") + "\n"
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let rule: Rule = a.rule.parse().map_err(|e: lefm::data::DataError| Failure::usage(e.to_string()))?;
    let mut config = SynthConfig::new(a.images, a.height, a.width, rule, a.noise, a.seed);
    if let Some(t) = a.threshold {
        config.threshold = t;
    }
    let samples = generate_synthetic(&config)?;
    save_dataset(&a.out, &samples, &DatasetLayout::default())?;
    let pixels: usize = samples.iter().map(|s| s.pixels()).sum();
    let positive: usize = samples.iter().map(|s| s.majority.iter().filter(|&&v| v == 1).count()).sum();
    let hash = content_hash(&serde_json::to_string(&config).expect("config serializes"));
    #[derive(Serialize)]
    struct Body<'a> {
        config: &'a SynthConfig,
        positive_fraction: f64,
    }
    let fraction = positive as f64 / pixels as f64;
    write_file(
        &a.out.join("synth.json"),
        &envelope(&hash, Body {
            config: &config,
            positive_fraction: fraction,
        }),
    )?;
    println!("wrote {} {} images to {} (positive fraction {fraction:.4})", samples.len(), rule.name(), a.out.display());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p).map_err(|e| Failure::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seeds = vec![seed];
    }
    if let Some(m) = &a.m {
        config.set("m", m)?;
    }
    if a.prenormalized {
        config.prenormalized = true;
    }
    config.validate()?;
    Ok(config)
}

fn run_stem(model: &str, seed: u64) -> String {
    format!("{model}_seed{seed}")
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = load_config(&a)?;
    let samples = load_dataset(&a.dataset, &DatasetLayout::default())?;
    let split = make_split(&samples, config.test_fraction, config.val_fraction, config.split_seed)?;
    let pick = |ids: &[String]| samples.iter().filter(|s| ids.binary_search(&s.id).is_ok()).cloned().collect::<Vec<_>>();
    let (train_set, test_set) = (pick(&split.train), pick(&split.test));
    if test_set.is_empty() {
        return Err(Failure::usage("test split is empty; raise test_fraction"));
    }

    let runs_dir = a.out.join("runs");
    let ck_dir = a.out.join("checkpoints");
    create_dir(&runs_dir)?;
    if !a.no_checkpoints {
        create_dir(&ck_dir)?;
    }
    write_file(&a.out.join("config.txt"), &config.to_text())?;
    write_file(&a.out.join("split.json"), &(split.to_json() + "\n"))?;

    let reports = run_experiment(&config, &train_set, &test_set, |outcome| {
        let stem = run_stem(&outcome.report.model, outcome.report.seed);
        let io = |p: &Path, e: std::io::Error| TrainError::Io(format!("{}: {e}", p.display()));
        let path = runs_dir.join(format!("{stem}.json"));
        fs::write(&path, outcome.report.to_json() + "\n").map_err(|e| io(&path, e))?;
        if !a.no_checkpoints {
            outcome.checkpoint.save(&ck_dir.join(format!("{stem}.json")))?;
        }
        Ok(())
    })?;
    for r in reports.iter().filter(|r| r.status == RunStatus::Failed) {
        let path = runs_dir.join(format!("{}.json", run_stem(&r.model, r.seed)));
        write_file(&path, &(r.to_json() + "\n"))?;
    }

    let mut csv = Vec::new();
    write_runs_csv(&mut csv, &reports)?;
    write_file(&a.out.join("runs.csv"), &String::from_utf8(csv).expect("csv is utf-8"))?;
    let mut timings = String::from("model,m,seed,wall_time_s\n");
    for r in &reports {
        timings.push_str(&format!("{},{},{},{:.3}\n", r.model, r.m, r.seed, r.wall_time_s));
    }
    write_file(&a.out.join("timings.csv"), &timings)?;

    let summary = summarize(&config.hash(), &reports);
    write_file(&a.out.join("summary.json"), &(summary.to_json() + "\n"))?;
    let md = summary.to_markdown();
    write_file(&a.out.join("summary.md"), &md)?;
    print!("{md}");
    let failed = reports.iter().filter(|r| r.status == RunStatus::Failed).count();
    if failed == reports.len() {
        return Err(Failure::new(ErrorKind::Numeric, format!("all {failed} runs failed")));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let samples = load_dataset(&a.dataset, &DatasetLayout::default())?;
    let batch = 8;
    let (counts, params) = match ck.precision {
        Precision::F32 => {
            let net = ck.best_network::<f32>()?;
            (evaluate(&net, &samples, ck.patch_size, batch)?, net.parameter_count())
        }
        Precision::F64 => {
            let net = ck.best_network::<f64>()?;
            (evaluate(&net, &samples, ck.patch_size, batch)?, net.parameter_count())
        }
    };
    let mut report = RunReport::from_counts(
        model_name(ck.m),
        ck.m,
        ck.seed,
        counts,
        ck.epoch,
        ck.best_epoch,
        params,
        ck.precision.as_str(),
        &ck.config_hash,
    );
    report.prenormalized = a.prenormalized;
    emit(a.out.as_ref(), &(report.to_json() + "\n"))?;
    eprintln!("BACC {:.4}  F1 {:.4}  PREC {:.4}  SE {:.4}  SP {:.4}", report.bacc, report.f1, report.prec, report.se, report.sp);
    Ok(())
}

pub fn expand(a: ExpandArgs) -> Result<()> {
    let (h, w, rgb) = read_image(&a.image)?;
    let x: Vec<f64> = match a.d {
        3 => rgb.iter().map(|&v| f64::from(v)).collect(),
        1 => rgb.chunks(3).map(|p| p.iter().map(|&v| f64::from(v)).sum::<f64>() / 3.0).collect(),
        d => return Err(Failure::usage(format!("--d must be 1 (gray) or 3 (RGB), got {d}"))),
    };
    let table = Arc::new(ExponentTable::enumerate(a.d, a.m)?);
    let (layer, source) = match &a.checkpoint {
        None => (LefmLayer::with_coefficients(table.clone(), vec![1.0; table.terms()])?, "ones".to_string()),
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let layer = ck
                .best_network::<f64>()?
                .lefm_layer()
                .ok_or_else(|| Failure::usage("checkpoint has no expansion layer"))?;
            if layer.table().as_ref() != table.as_ref() {
                return Err(Failure::usage(format!(
                    "checkpoint expansion is d={}, m={}; requested d={}, m={}",
                    layer.table().inputs(),
                    layer.table().order(),
                    a.d,
                    a.m
                )));
            }
            (layer, format!("checkpoint {}", ck.config_hash))
        }
    };
    let input = Tensor::from_vec(&[h, w, a.d], x).map_err(|e| Failure::new(ErrorKind::Data, e.to_string()))?;
    let out = layer.forward(&input)?;
    let bytes: Vec<u8> = out.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let bin = a.out.with_extension("bin");
    fs::write(&bin, bytes).map_err(|e| Failure::io(&bin, e))?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        data: String,
        shape: [usize; 3],
        layout: &'a str,
        dtype: &'a str,
        byte_order: &'a str,
        d: usize,
        m: usize,
        terms: Vec<String>,
        coefficients: String,
    }
    let terms = table.labels(&table.default_channel_names())?;
    let hash = content_hash(&format!("expand d={} m={} coefficients={source}", a.d, a.m));
    let sidecar = Sidecar {
        data: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        shape: [h, w, table.terms()],
        layout: "HWC",
        dtype: "float32",
        byte_order: "little",
        d: a.d,
        m: a.m,
        terms,
        coefficients: source,
    };
    write_file(&a.out.with_extension("json"), &envelope(&hash, sidecar))?;
    println!("wrote {h}x{w}x{} features to {}", table.terms(), bin.display());
    Ok(())
}

pub fn report_coeffs(a: ReportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = report_coefficients(&ck)?;
    emit(a.out.as_ref(), &(report.to_json() + "\n"))
}

pub fn kappa(a: KappaArgs) -> Result<()> {
    let samples = load_dataset(&a.dataset, &DatasetLayout::default())?;
    #[derive(Serialize)]
    struct ImageKappa {
        id: String,
        kappa: f64,
        pixels: u64,
    }
    #[derive(Serialize)]
    struct Body {
        raters: usize,
        images: Vec<ImageKappa>,
        pooled: f64,
    }
    let mut pooled = None;
    let mut images = Vec::with_capacity(samples.len());
    for s in &samples {
        let masks: Vec<&[u8]> = s.annotations.iter().map(|m| &m[..]).collect();
        let acc = mask_vote_table(&masks)?;
        images.push(ImageKappa {
            id: s.id.clone(),
            kappa: acc.kappa()?,
            pixels: acc.items(),
        });
        match &mut pooled {
            None => pooled = Some(acc),
            Some(p) => p.merge(&acc),
        }
    }
    let pooled = pooled.expect("dataset is non-empty");
    let body = Body {
        raters: samples[0].annotators(),
        pooled: pooled.kappa()?,
        images,
    };
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let hash = content_hash(&format!("kappa raters={} images={}", body.raters, ids.join(",")));
    for img in &body.images {
        eprintln!("{}: κ = {:.4}", img.id, img.kappa);
    }
    println!("κ = {:.4} (pooled over {} images, {} raters)", body.pooled, body.images.len(), body.raters);
    if let Some(out) = &a.out {
        write_file(out, &envelope(&hash, body))?;
    }
    Ok(())
}

pub fn anova(a: AnovaArgs) -> Result<()> {
    let metric: MetricName = a.metric.parse().map_err(|_| Failure::usage(format!("unknown metric {:?}", a.metric)))?;
    let file = fs::File::open(&a.runs).map_err(|e| Failure::io(&a.runs, e))?;
    let reports = read_runs_csv(file)?;
    let group = |name: &str| -> Vec<f64> {
        reports
            .iter()
            .filter(|r| r.model == name && r.status == RunStatus::Ok)
            .map(|r| r.metric(metric))
            .collect()
    };
    let groups = [group(&a.group_a), group(&a.group_b)];
    for (name, g) in [&a.group_a, &a.group_b].iter().zip(&groups) {
        if g.is_empty() {
            return Err(Failure::new(ErrorKind::Data, format!("no successful runs for model {name:?} in {}", a.runs.display())));
        }
    }
    let result = one_way_anova(&groups)?;
    let verdict = AnovaVerdict::new(
        metric,
        vec![a.group_a.clone(), a.group_b.clone()],
        vec![groups[0].len(), groups[1].len()],
        &result,
    );
    let mut hashes: Vec<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let hash = match hashes[..] {
        [one] => one.to_string(),
        _ => content_hash(&hashes.join(",")),
    };
    let f = verdict.f.map_or("inf".to_string(), |f| format!("{f:.4}"));
    println!(
        "{} {} vs {}: F = {f}, p = {:.4}, {}",
        metric.as_str(),
        a.group_a,
        a.group_b,
        verdict.p,
        if verdict.significant { "significant" } else { "not significant" }
    );
    if let Some(out) = &a.out {
        write_file(out, &envelope(&hash, verdict))?;
    }
    Ok(())
}
