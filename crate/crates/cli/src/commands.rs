use std::fmt::Display;
use std::fs;
use std::path::Path;

use cpnet::cloud::{load_cloud, save_cloud, CloudError, CloudFormat, PointCloud, ShapeKind, MIN_SHAPE_POINTS};
use cpnet::data::{build_dataset, substream, Dataset, DatasetSpec, Stream};
use cpnet::disentangle::{disentangle, DisentangleError, Manner};
use cpnet::model::CpNet;
use cpnet::probe::{extract_features, linear_probe_classify, linear_probe_segment, Features, ProbeError, ProbeTask};
use cpnet::train::{
    gradcheck_total_loss, load_checkpoint, save_checkpoint, AugmentConfig, GradCheckSetup, MetricsWriter, TrainError,
    Trainer,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::{DecomposeArgs, Failure, GenArgs, GradcheckArgs, PerturbArgs, PretrainArgs, ProbeArgs};

type Result<T = ()> = std::result::Result<T, Failure>;

pub const INDEX_FILE: &str = "index.csv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.cpnt";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const EPOCHS_FILE: &str = "epochs.csv";

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn cloud_failure(e: CloudError) -> Failure {
    match e {
        CloudError::FileNotFound(_) | CloudError::Io(_) | CloudError::Parse { .. } => Failure::Io(e.to_string()),
        other => usage(other),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Loss(_) | TrainError::Tensor(_) => Failure::Numerical(e.to_string()),
        TrainError::Io(_) | TrainError::VersionMismatch { .. } | TrainError::Format(_) => Failure::Io(e.to_string()),
        TrainError::Cloud(c) => cloud_failure(c),
        other => usage(other),
    }
}

fn disentangle_failure(e: DisentangleError) -> Failure {
    usage(e)
}

fn probe_failure(e: ProbeError) -> Failure {
    usage(e)
}

fn format_of(path: &Path) -> Result<CloudFormat> {
    CloudFormat::from_path(path)
        .ok_or_else(|| usage(format!("{}: unknown cloud format (use .xyz, .off or .ply)", path.display())))
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud(path, format_of(path)?).map_err(cloud_failure)
}

fn write_cloud(cloud: &PointCloud, path: &Path) -> Result {
    let fmt = format_of(path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    save_cloud(cloud, path, fmt).map_err(cloud_failure)
}

fn write_text(path: &Path, text: &str) -> Result {
    fs::write(path, text).map_err(io_at(path))
}

fn parse_kinds(list: &str) -> Result<Vec<ShapeKind>> {
    let kinds = list
        .split(',')
        .map(|s| s.trim().parse::<ShapeKind>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(usage)?;
    if kinds.is_empty() {
        return Err(usage("no shape kinds given"));
    }
    Ok(kinds)
}

fn pose(spec: DatasetSpec, posed: Option<f64>) -> Result<DatasetSpec> {
    match posed {
        Some(s) if !(0.0..1.0).contains(&s) => Err(usage(format!("--posed must lie in [0, 1), got {s}"))),
        Some(s) => Ok(DatasetSpec {
            random_rotation: true,
            scale_jitter: s,
            ..spec
        }),
        None => Ok(spec),
    }
}

fn synthesize(spec: &DatasetSpec) -> Result<Dataset> {
    build_dataset(spec).map_err(cloud_failure)
}

/// Writes one file per cloud and an index with `file,kind,label` rows.
pub fn gen(a: &GenArgs) -> Result {
    if a.n < MIN_SHAPE_POINTS {
        return Err(usage(format!("--n must be at least {MIN_SHAPE_POINTS}, got {}", a.n)));
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(usage(format!("--noise must be finite and non-negative, got {}", a.noise)));
    }
    let fmt: CloudFormat = a.format.parse().map_err(usage)?;
    let spec = pose(
        DatasetSpec {
            kinds: parse_kinds(&a.kind)?,
            per_kind: a.count,
            n_points: a.n,
            noise_std: a.noise,
            seed: a.seed,
            random_rotation: false,
            scale_jitter: 0.0,
        },
        a.posed,
    )?;
    let data = synthesize(&spec)?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let index_path = a.out.join(INDEX_FILE);
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Failure::Io(e.to_string()))?;
    index.write_record(["file", "kind", "label"]).map_err(|e| Failure::Io(e.to_string()))?;
    for (cloud, &label) in data.clouds.iter().zip(&data.labels) {
        let file = format!("{}.{}", cloud.id, fmt.extension());
        write_cloud(cloud, &a.out.join(&file))?;
        index
            .write_record([file.as_str(), data.class_names[label].as_str(), &label.to_string()])
            .map_err(|e| Failure::Io(e.to_string()))?;
    }
    index.flush().map_err(io_at(&index_path))?;
    println!("wrote {} clouds to {}", data.len(), a.out.display());
    Ok(())
}

/// Reads an index written by [`gen`]; file paths are relative to it.
pub fn load_index(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut data = Dataset {
        clouds: Vec::new(),
        labels: Vec::new(),
        class_names: Vec::new(),
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let bad = || Failure::Io(format!("{}: row {} is not `file,kind,label`", path.display(), row + 1));
        let (file, kind, label) = match (rec.get(0), rec.get(1), rec.get(2)) {
            (Some(f), Some(k), Some(l)) => (f, k, l.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        if data.class_names.len() <= label {
            data.class_names.resize(label + 1, String::new());
        }
        data.class_names[label] = kind.to_string();
        data.clouds.push(read_cloud(&dir.join(file))?);
        data.labels.push(label);
    }
    if data.clouds.is_empty() {
        return Err(Failure::Io(format!("{}: no clouds listed", path.display())));
    }
    Ok(data)
}

pub fn decompose(a: &DecomposeArgs) -> Result {
    let cloud = read_cloud(&a.input)?;
    let d = disentangle(&cloud, a.k).map_err(disentangle_failure)?;
    let contour = cloud.select(&d.contour_idx).map_err(cloud_failure)?;
    let content = cloud.select(&d.content_idx).map_err(cloud_failure)?;
    write_cloud(&contour, &a.out_contour)?;
    write_cloud(&content, &a.out_content)?;
    let report = json!({
        "input": a.input.display().to_string(),
        "n": cloud.len(),
        "k_graph": a.k,
        "half": d.half(),
        "contour": d.contour_idx,
        "content": d.content_idx,
        "dropped": d.dropped,
        "scores": d.scores.scores,
    });
    let path = a.report.clone().unwrap_or_else(|| a.out_contour.with_extension("json"));
    write_text(&path, &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")))?;
    println!("contour {} points, content {} points", contour.len(), content.len());
    Ok(())
}

/// Rows are written back in source order, so zero noise reproduces the
/// input and delete manners read as the input minus the deleted points.
pub fn perturb(a: &PerturbArgs) -> Result {
    let manner: Manner = a.manner.parse().map_err(usage)?;
    let cloud = read_cloud(&a.input)?;
    let augment = AugmentConfig {
        manner,
        std: a.std,
        clip: a.clip,
        jitter_count: a.jitter_count,
        k_graph: a.k,
    };
    let d = disentangle(&cloud, a.k).map_err(disentangle_failure)?;
    let p = augment.apply(&d, a.seed).map_err(train_failure)?;
    let mut rows: Vec<usize> = (0..p.len()).collect();
    rows.sort_by_key(|&r| p.origin[r]);
    let origin: Vec<usize> = rows.iter().map(|&r| p.origin[r]).collect();
    let out = cloud
        .select(&origin)
        .and_then(|c| c.with_points(rows.iter().map(|&r| p.points[r]).collect()))
        .map_err(cloud_failure)?;
    write_cloud(&out, &a.out)?;
    println!(
        "manner {manner} ({}): {} of {} points kept, {} jittered",
        manner.description(),
        out.len(),
        cloud.len(),
        p.jittered.len()
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result {
    if a.print_default {
        print!("{}", RunConfig::documented_defaults());
        return Ok(());
    }
    let path = a.config.as_ref().expect("clap requires --config");
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut rc = RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(out) = &a.out {
        rc.out_dir = out.clone();
    }
    let clouds = match &rc.data_index {
        Some(index) => load_index(index)?.clouds,
        None => synthesize(&rc.data)?.clouds,
    };
    let out = rc.out_dir.clone();
    fs::create_dir_all(&out).map_err(io_at(&out))?;
    write_text(&out.join(CONFIG_ECHO), &rc.render())?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path).map_err(train_failure)?;
        log::info!("resuming from epoch {}", ckpt.epoch);
        Trainer::resume(ckpt, rc.train.clone(), &clouds)
    } else {
        Trainer::new(rc.train.clone(), &clouds)
    }
    .map_err(train_failure)?;
    let mut metrics = MetricsWriter::create(&out.join(STEPS_FILE), &out.join(EPOCHS_FILE)).map_err(train_failure)?;
    metrics.write_history(trainer.history()).map_err(train_failure)?;
    let save = |t: &Trainer| save_checkpoint(&t.checkpoint(), &ckpt_path).map_err(train_failure);
    if trainer.epoch() == 0 {
        save(&trainer)?;
    }
    while !trainer.is_done() {
        let seen = trainer.history().steps.len();
        let outcome = trainer.run_epoch();
        for r in &trainer.history().steps[seen..] {
            metrics.write_step(r).map_err(train_failure)?;
        }
        match outcome {
            Ok(s) => {
                metrics.write_epoch(&s).map_err(train_failure)?;
                metrics.flush().map_err(train_failure)?;
                println!("epoch {:>4}  lr {:.3e}  total {:.6}", s.epoch + 1, s.lr, s.total);
                if trainer.epoch() % rc.checkpoint_every == 0 || trainer.is_done() {
                    save(&trainer)?;
                }
            }
            Err(e) => {
                metrics.flush().map_err(train_failure)?;
                return Err(train_failure(e));
            }
        }
    }
    metrics.flush().map_err(train_failure)?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

pub fn probe(a: &ProbeArgs) -> Result {
    let task: ProbeTask = a.task.parse().map_err(usage)?;
    let ckpt = load_checkpoint(&a.ckpt).map_err(train_failure)?;
    let net = CpNet::new(ckpt.config.model.clone()).map_err(usage)?;
    let data = match &a.data {
        Some(index) => load_index(index)?,
        None => {
            let kinds = match (&a.kinds, task) {
                (Some(list), _) => parse_kinds(list)?,
                (None, ProbeTask::Classify) => vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus],
                (None, ProbeTask::Segment) => vec![ShapeKind::Barbell],
            };
            let spec = DatasetSpec {
                kinds,
                per_kind: a.per_kind,
                n_points: a.n.unwrap_or(ckpt.config.model.nominal_points()),
                noise_std: a.noise,
                seed: a.seed,
                random_rotation: false,
                scale_jitter: 0.0,
            };
            synthesize(&pose(spec, a.posed)?)?
        }
    };
    let split_seed = substream(a.seed, Stream::Probe, 0, 0);
    let features = extract_features(&net, &ckpt.store, &data.clouds, task).map_err(probe_failure)?;
    let mut report = match features {
        Features::Global(g) => linear_probe_classify(&g, &data.labels, a.train_fraction, split_seed),
        Features::PointWise(y) => {
            let parts = data
                .clouds
                .iter()
                .map(|c| c.part_labels().map(<[u32]>::to_vec))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| usage("segmentation probing needs part labels (generate with --format ply)"))?;
            linear_probe_segment(&y, &parts, &data.labels, a.train_fraction, split_seed)
        }
    }
    .map_err(probe_failure)?;
    if task == ProbeTask::Classify {
        // name the classes rather than numbering them
        report.per_class = report
            .per_class
            .into_iter()
            .map(|(k, v)| {
                let name = k.parse::<usize>().ok().and_then(|i| data.class_names.get(i)).cloned().unwrap_or(k);
                (name, v)
            })
            .collect();
    }
    let text = format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes"));
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            println!("{} = {:.4}", if task == ProbeTask::Classify { "accuracy" } else { "instance mIoU" }, report.metric());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result {
    if a.n < MIN_SHAPE_POINTS || a.batch == 0 {
        return Err(usage(format!("need --n >= {MIN_SHAPE_POINTS} and --batch >= 1")));
    }
    let setup = GradCheckSetup {
        n_points: a.n,
        batch: a.batch,
        seed: a.seed,
        sample: a.sample,
        ..GradCheckSetup::default()
    };
    let started = std::time::Instant::now();
    let report = gradcheck_total_loss(&setup).map_err(train_failure)?;
    println!("checked entries: {}", report.checked);
    println!("refined entries: {}", report.refined);
    if let Some((param, entry, analytic, numeric)) = &report.worst {
        println!("worst: {param}[{entry}] analytic {analytic:.6e} numeric {numeric:.6e}");
    }
    println!("max relative error: {:.3e}", report.max_rel_error);
    println!("elapsed: {:.1} s", started.elapsed().as_secs_f64());
    if report.max_rel_error < a.tol {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "max relative error {:.3e} is not below {:.1e}",
            report.max_rel_error, a.tol
        )))
    }
}
