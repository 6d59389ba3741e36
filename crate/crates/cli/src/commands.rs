use rml::checkpoint;
use rml::data::{load_dataset, make_blobs, normalize, save_dataset, DatasetManifest};
use rml::diagnostics::{gradient_suite, SuiteConfig};
use rml::report::{config_hash, Report};
use rml::tasks::{kmeans, train_classifier, ClassifyConfig, KMeansConfig};
use rml::{
    infer, train_self_supervised, Ablation, FusionConfig, FusionModel32, MultiViewDataset,
    PerturbationConfig, Result, RmlError, RngStream, SynthSpec, TrainConfig,
};

use crate::args::{
    ClassifyArgs, ClusterArgs, Component, DataArgs, GradcheckArgs, ModelArgs, SynthArgs, TrainArgs,
};

fn load(data: &DataArgs, seed: u64) -> Result<MultiViewDataset> {
    match &data.data {
        Some(path) => {
            let ds = load_dataset(path)?;
            if DatasetManifest::read(path)?.normalize.is_some() {
                Ok(ds)
            } else {
                Ok(normalize(&ds, data.normalize.into()))
            }
        }
        None => {
            let spec = SynthSpec {
                seed,
                ..SynthSpec::default()
            };
            Ok(normalize(&make_blobs(&spec)?, data.normalize.into()))
        }
    }
}

fn configs(
    ds: &MultiViewDataset,
    m: &ModelArgs,
    ablate: &[Component],
) -> Result<(FusionConfig, PerturbationConfig, TrainConfig)> {
    let mut fusion = FusionConfig::new(ds.dims()).with_dims(m.d_e, m.d);
    fusion.attention = !ablate.contains(&Component::Atten);
    let perturb = PerturbationConfig::new(m.p, m.sigma, m.r)?;
    let train = TrainConfig {
        lr: m.lr,
        batch_size: m.batch,
        epochs: m.epochs,
        tau: m.tau,
        seed: m.seed,
        ablation: Ablation {
            noise: !ablate.contains(&Component::Np),
            unusable: !ablate.contains(&Component::Mp),
        },
        ..TrainConfig::default()
    };
    train.validate()?;
    fusion.validate()?;
    Ok((fusion, perturb, train))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ds = load(&a.data, a.model.seed)?;
    let (fusion, perturb, train) = configs(&ds, &a.model, &a.ablate)?;
    let (model, trace) = train_self_supervised::<f32>(&ds, &fusion, &perturb, &train)?;
    if let Some(path) = &a.out {
        checkpoint::save(&model, path)?;
    }
    if let Some(path) = &a.loss_trace {
        trace.write(path)?;
    }
    let epochs = trace.epoch_means();
    let mut report = Report::new(train.seed, config_hash(&(&fusion, &perturb, &train))?);
    report
        .push("steps", trace.len() as f64)
        .push("first_epoch_loss", epochs.first().copied().unwrap_or(f64::NAN))
        .push("last_epoch_loss", epochs.last().copied().unwrap_or(f64::NAN));
    println!("{report}");
    Ok(())
}

pub fn cluster(a: &ClusterArgs) -> Result<()> {
    let model: FusionModel32 = checkpoint::load(&a.model)?;
    let ds = load(&a.data, a.seed)?;
    if model.config().view_dims != ds.dims() {
        return Err(RmlError::Config(format!(
            "model expects view widths {:?}, dataset has {:?}",
            model.config().view_dims,
            ds.dims()
        )));
    }
    let k = a
        .k
        .or(ds.classes())
        .ok_or_else(|| RmlError::Config("--k is required when the dataset has no class count".into()))?;
    let cfg = KMeansConfig::new(k);
    let z = infer(&model, &ds, Some(256))?.z;
    let mut result = kmeans(&z, &cfg, &mut RngStream::new(a.seed))?;
    let mut report = Report::new(a.seed, config_hash(&(model.config(), &cfg))?);
    if let Some(labels) = ds.labels() {
        result.score(labels)?;
        report.push("acc", result.acc.unwrap_or(f64::NAN));
        report.push("nmi", result.nmi.unwrap_or(f64::NAN));
    }
    report.push("inertia", result.inertia);
    finish(&report, a.records.as_deref())
}

pub fn classify(a: &ClassifyArgs) -> Result<()> {
    let ds = load(&a.data, a.model.seed)?;
    let (fusion, perturb, mut train) = configs(&ds, &a.model, &[])?;
    train.lambda = a.lambda;
    train.validate()?;
    let cls = ClassifyConfig {
        split: a.split,
        noise_rate: a.noise_rate,
        loss: a.loss.into(),
    };
    let run = train_classifier::<f32>(&ds, &cls, &fusion, &perturb, &train)?;
    let mut report = Report::new(train.seed, config_hash(&(&cls, &fusion, &perturb, &train))?);
    report
        .push("acc", run.report.acc)
        .push("precision", run.report.precision)
        .push("f1", run.report.f1)
        .push("flipped", run.labels.flipped_fraction());
    finish(&report, a.records.as_deref())
}

fn finish(report: &Report, records: Option<&std::path::Path>) -> Result<()> {
    if let Some(path) = records {
        report.append_records(path)?;
    }
    println!("{report}");
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        samples: a.samples,
        classes: a.classes,
        dims: a.dims.clone(),
        spread: a.spread.clone(),
        separation: a.separation,
        seed: a.seed,
    };
    let ds = make_blobs(&spec)?;
    let manifest = save_dataset(&ds, &a.out, a.encoding.into())?;
    println!("manifest={}", manifest.display());
    println!("samples={} views={} classes={}", ds.len(), ds.num_views(), a.classes);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = SuiteConfig {
        seed: a.seed,
        ..SuiteConfig::default()
    };
    let cases = gradient_suite(&cfg)?;
    for c in &cases {
        println!(
            "case={} max_rel_err={:.3e} coords={} pass={}",
            c.name, c.report.max_rel_err, c.report.checked, c.report.pass
        );
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.report.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        println!("gradcheck=pass tol={:e}", cfg.tol);
        Ok(())
    } else {
        Err(RmlError::CheckInvalid(format!(
            "relative error above {:e} in {}",
            cfg.tol,
            failed.join(", ")
        )))
    }
}
