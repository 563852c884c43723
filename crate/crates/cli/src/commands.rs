use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;
use tapudd::archive::{Model, ModelArchive, Provenance};
use tapudd::baselines::{fit_kl_matching, fit_tied_mahalanobis, LogitMatrix};
use tapudd::ensemble::{fit_tapudd_parallel, EnsembleConfig, DEFAULT_K_LIST};
use tapudd::gmm::FitConfig;
use tapudd::io::{read_features, read_scores, write_features, write_matrix, write_scores, Encoding, FileKind};
use tapudd::landscape::{landscape_grid, write_landscape};
use tapudd::metrics::{aupr, auroc, fpr_at_tpr};
use tapudd::synth::{far_ood_probes, generate_synthetic, near_ood_probes, SyntheticSpec, Task, DEFAULT_FAR_COUNT, DEFAULT_NEAR_COUNT};
use tapudd::tapmb::fit_tapmb;
use tapudd::tapmos::{fit_tapmos, TrainConfig};
use tapudd::Scorer;

use crate::args::*;
use crate::Failure;

/// What a finished command reports for its manifest.
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub resolved: serde_json::Value,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub const THREADS_ENV: &str = "TAPUDD_THREADS";

fn worker_threads() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn synth(a: &SynthArgs) -> Result<Outcome, Failure> {
    let task = match a.task {
        TaskArg::Binary => Task::Binary,
        TaskArg::Multiclass => Task::Multiclass,
    };
    let mut spec = SyntheticSpec::for_task(task, a.seed);
    if a.count == Some(0) {
        return Err(usage("--count must be positive"));
    }
    let resolved;
    match a.ood {
        None => {
            if let Some(c) = a.count {
                spec = spec.with_count(c);
            }
            let data = generate_synthetic(&spec)?;
            write_features(&data.features, &a.out)?;
            let labels = data.features.labels().expect("generator labels rows");
            println!("wrote {} rows x {} dims to {}", data.features.nrows(), data.features.ncols(), a.out.display());
            for c in 0..spec.clusters.len() {
                let n = labels.iter().filter(|&&l| l == c).count();
                println!("  cluster {c}: {n} rows");
            }
            for r in &data.provenance.repairs {
                println!("  cluster {}: covariance repaired", r.cluster);
            }
            resolved = json!({ "task": task, "synthetic": data.provenance });
        }
        Some(OodArg::Far) => {
            let count = a.count.unwrap_or(DEFAULT_FAR_COUNT);
            let probes = far_ood_probes(&spec, count, a.seed)?;
            write_matrix(&probes, FileKind::OodFar, &a.out, Encoding::for_path(&a.out))?;
            println!("wrote {count} far-OOD probes to {}", a.out.display());
            resolved = json!({ "task": task, "ood": "far", "count": count, "spec": spec });
        }
        Some(OodArg::Near) => {
            if task != Task::Binary {
                return Err(usage("--ood near is only defined for --task binary"));
            }
            let count = a.count.unwrap_or(DEFAULT_NEAR_COUNT);
            let probes = near_ood_probes(&spec, count)?;
            write_matrix(&probes, FileKind::OodNear, &a.out, Encoding::for_path(&a.out))?;
            println!("wrote {count} near-OOD probes to {}", a.out.display());
            resolved = json!({ "task": task, "ood": "near", "count": count, "spec": spec });
        }
    }
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        resolved,
    })
}

fn method_flags(a: &FitArgs) -> Result<(), Failure> {
    let ensemble = a.method == Method::Tapudd;
    let needs_k = matches!(a.method, Method::Tapmb | Method::Tapmos);
    if a.k.is_some() && !needs_k {
        return Err(usage("--k applies only to tapmb and tapmos"));
    }
    if a.k_list.is_some() && !ensemble {
        return Err(usage("--k-list applies only to tapudd"));
    }
    if needs_k && a.k.is_none() {
        return Err(usage("--k is required for tapmb and tapmos"));
    }
    if a.k == Some(0) {
        return Err(usage("--k must be positive"));
    }
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<Outcome, Failure> {
    method_flags(a)?;
    let fit = FitConfig::with_seed(a.seed);
    let ensemble = if a.method == Method::Tapudd {
        let k_list = a.k_list.clone().unwrap_or_else(|| DEFAULT_K_LIST.to_vec());
        Some(EnsembleConfig::new(k_list, a.strategy, a.n_e, a.m).map_err(|e| usage(e.to_string()))?)
    } else {
        None
    };
    let threads = worker_threads()?;

    let features = read_features(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let prov = Provenance::new(Some(a.seed)).with_features(&features);
    let (model, prov) = match a.method {
        Method::Tapudd => {
            let cfg = ensemble.expect("built above");
            let m = fit_tapudd_parallel(&features, &cfg, &fit, threads)?;
            (Model::Tapudd(m), prov.with_fit_config(fit).with_ensemble_config(cfg))
        }
        Method::Tapmb => {
            let m = fit_tapmb(&features, a.k.expect("checked"), &fit)?;
            (Model::Tapmb(m), prov.with_fit_config(fit))
        }
        Method::Tapmos => {
            let train = TrainConfig {
                seed: a.seed,
                ..TrainConfig::default()
            };
            let m = fit_tapmos(&features, a.k.expect("checked"), &fit, &train)?;
            (Model::Tapmos(m), prov.with_fit_config(fit).with_train_config(train))
        }
        Method::TiedMb => {
            let m = fit_tied_mahalanobis(&features, fit.reg_covar)?;
            (Model::TiedMb(m), prov.with_reg(fit.reg_covar))
        }
        Method::Kl => {
            let m = fit_kl_matching(&LogitMatrix::from_features(features))?;
            (Model::KlRefs(m), prov)
        }
    };
    let archive = ModelArchive::new(model, prov);
    archive.save(&a.out)?;
    let members = match archive.model() {
        Model::Tapudd(m) => format!(" with {} members", m.members().len()),
        _ => String::new(),
    };
    println!("saved {} model{members} to {}", archive.model_kind.as_str(), a.out.display());
    Ok(Outcome {
        inputs: vec![a.features.clone()],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        resolved: json!({ "method": a.method, "provenance": archive.provenance, "threads": threads }),
    })
}

pub fn score(a: &ScoreArgs) -> Result<Outcome, Failure> {
    let archive = ModelArchive::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let model = match (a.strategy, archive.model()) {
        (None, m) => m.clone(),
        (Some(s), Model::Tapudd(m)) => Model::Tapudd(m.with_strategy(s)),
        (Some(_), _) => return Err(usage("--strategy applies only to tapudd models")),
    };
    let features = read_features(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    if features.ncols() != model.dim() {
        return Err(anyhow::anyhow!(
            "dimension mismatch: model expects {} columns, {} has {}",
            model.dim(),
            a.features.display(),
            features.ncols()
        )
        .into());
    }
    let scores = model.score_batch(&features)?;
    write_scores(&scores, &a.out)?;
    println!("wrote {} scores to {}", scores.len(), a.out.display());
    let strategy = match &model {
        Model::Tapudd(m) => Some(m.config().strategy()),
        _ => None,
    };
    Ok(Outcome {
        inputs: vec![a.model.clone(), a.features.clone()],
        outputs: vec![a.out.clone()],
        seed: archive.provenance.seed,
        resolved: json!({ "model_kind": archive.model_kind, "strategy": strategy }),
    })
}

/// Fields appear in this order in every format.
#[derive(Serialize)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aupr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fpr95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold_at_tpr95: Option<f64>,
    n_id: usize,
    n_ood: usize,
}

impl EvalOutput {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let opts = [
            ("auroc", self.auroc),
            ("aupr", self.aupr),
            ("fpr95", self.fpr95),
            ("threshold_at_tpr95", self.threshold_at_tpr95),
        ];
        for (name, v) in opts {
            if let Some(v) = v {
                out.push((name, format!("{v:?}")));
            }
        }
        out.push(("n_id", self.n_id.to_string()));
        out.push(("n_ood", self.n_ood.to_string()));
        out
    }
}

pub fn eval(a: &EvalArgs) -> Result<String, Failure> {
    let read = |p: &PathBuf| read_scores(p).with_context(|| format!("reading {}", p.display()));
    let (id, ood) = (read(&a.id_scores)?, read(&a.ood_scores)?);
    let want = |m: MetricArg| a.metrics.contains(&m);
    let fpr = if want(MetricArg::Fpr95) { Some(fpr_at_tpr(&id, &ood, 0.95)?) } else { None };
    let report = EvalOutput {
        auroc: if want(MetricArg::Auroc) { Some(auroc(&id, &ood)?) } else { None },
        aupr: if want(MetricArg::Aupr) { Some(aupr(&id, &ood)?) } else { None },
        fpr95: fpr.map(|f| f.0),
        threshold_at_tpr95: fpr.map(|f| f.1),
        n_id: id.len(),
        n_ood: ood.len(),
    };
    let mut text = String::new();
    match a.format {
        FormatArg::Json => {
            text = serde_json::to_string_pretty(&report).context("encoding report")?;
            text.push('\n');
        }
        FormatArg::Csv => {
            let f = report.fields();
            let names: Vec<&str> = f.iter().map(|(n, _)| *n).collect();
            let values: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
            writeln!(text, "{}\n{}", names.join(","), values.join(",")).expect("string write");
        }
        FormatArg::Table => {
            for (name, value) in report.fields() {
                writeln!(text, "{name:<20}{value}").expect("string write");
            }
        }
    }
    Ok(text)
}

pub fn landscape(a: &LandscapeArgs) -> Result<Outcome, Failure> {
    let archive = ModelArchive::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let res = a.res as usize;
    let grid = landscape_grid(&archive, (a.xmin, a.xmax), (a.ymin, a.ymax), res, res)?;
    write_landscape(&grid, &a.out)?;
    println!("wrote {res}x{res} landscape to {}", a.out.display());
    Ok(Outcome {
        inputs: vec![a.model.clone()],
        outputs: vec![a.out.clone()],
        seed: archive.provenance.seed,
        resolved: json!({ "model_kind": archive.model_kind, "res": res }),
    })
}
