use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use partdisc_core::candidates::{
    calibrate_prototypes, candidate_purity, compute_ns, load_prototypes, normalize_rows, save_prototypes,
    select_candidates, Prototypes, PROTO_MAGIC,
};
use partdisc_core::dataset::{generate_synthetic, load_dataset, save_dataset, FeatureDataset, SynthConfig};
use partdisc_core::evaluation::{clustering_acc, AccReport};
use partdisc_core::objectives::{cosine_predictions, gradcheck_suite};
use partdisc_core::parts::{
    filtered_patch_matrix, fit_gmm as fit_mixture, save_gmms, GmmConfig, GmmParams, SelectKConfig,
};
use partdisc_core::trainer::{
    auto_part_count, load_state, predict as predict_classes, save_state, stream_seed, train, TrainConfig, TrainState,
    STATE_MAGIC, TAG_GMM,
};
use partdisc_core::transport::{sinkhorn_adjust, SinkhornConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::tables::{
    read_class_list, read_id_values, read_matrix, to_csv_string, write_matrix, write_rows, write_text,
};
use crate::{
    EvalArgs, FitGmmArgs, GenSynthArgs, GradcheckArgs, PredictArgs, Preset, SelectArgs, SinkhornArgs, TrainToyArgs,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn read_toml(path: &Path) -> CliResult<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>().map_err(|e| CliError::data(path, e))
}

/// Recursively replaces fields of `base` with those of `over`; unknown keys are errors.
fn merge(base: &mut toml::Table, over: &toml::Table, at: &str) -> CliResult<()> {
    for (k, v) in over {
        let slot = base.get_mut(k).ok_or_else(|| CliError::Data(format!("unknown config key `{at}{k}`")))?;
        match (slot, v) {
            (toml::Value::Table(b), toml::Value::Table(o)) => merge(b, o, &format!("{at}{k}."))?,
            (slot, v) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: Option<&toml::Value>, section: &str) -> CliResult<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Data(e.to_string()))?;
    match over {
        None => {}
        Some(toml::Value::Table(o)) => merge(&mut table, o, &format!("{section}."))?,
        Some(_) => return Err(CliError::Data(format!("`{section}` must be a table"))),
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Data(format!("[{section}]: {e}")))
}

fn synth_preset(p: Preset, seed: u64) -> SynthConfig {
    match p {
        Preset::Default => SynthConfig { seed, ..Default::default() },
        Preset::Benchmark => SynthConfig::benchmark(seed),
    }
}

fn parse_preset(v: Option<&toml::Value>) -> CliResult<Preset> {
    match v.map(|v| v.as_str()) {
        None => Ok(Preset::Default),
        Some(Some("default")) => Ok(Preset::Default),
        Some(Some("benchmark")) => Ok(Preset::Benchmark),
        Some(other) => Err(CliError::Data(format!("unknown preset {other:?}"))),
    }
}

fn config_seed(table: &toml::Table) -> CliResult<Option<u64>> {
    match table.get("seed") {
        None => Ok(None),
        Some(toml::Value::Integer(s)) if *s >= 0 => Ok(Some(*s as u64)),
        Some(v) => Err(CliError::Data(format!("seed must be a non-negative integer, got {v}"))),
    }
}

pub fn gen_synth(a: &GenSynthArgs, seed: Option<u64>) -> CliResult<()> {
    let table = a.config.as_deref().map(read_toml).transpose()?.unwrap_or_default();
    let seed = seed.or(config_seed(&table)?).unwrap_or(0);
    let mut over = table.clone();
    over.remove("seed");
    let mut cfg = overlay(&synth_preset(a.preset, seed), Some(&toml::Value::Table(over)), "synth")?;
    cfg.seed = seed;
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &a.out)?;
    eprintln!(
        "wrote {} samples ({} classes, d = {}) to {}",
        ds.len(),
        ds.meta.num_classes,
        ds.meta.dim,
        a.out.display()
    );
    Ok(())
}

pub fn sinkhorn(a: &SinkhornArgs) -> CliResult<()> {
    let p = read_matrix(&a.input)?;
    let cfg = SinkhornConfig { max_iters: a.max_iters, tol: a.tol };
    let out = sinkhorn_adjust(p.view(), &cfg)?;
    write_matrix(&a.out, &out.q)?;
    eprintln!("iterations {} converged {} violation {:e}", out.iterations, out.converged, out.violation);
    Ok(())
}

fn cls_features(ds: &FeatureDataset) -> Array2<f64> {
    ds.cls_matrix().mapv(f64::from)
}

fn has_magic(path: &Path, magic: &[u8; 4]) -> CliResult<bool> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(bytes.get(..4) == Some(&magic[..]))
}

#[derive(Serialize, Deserialize)]
struct CandidatesFile {
    n_s: usize,
    calibrated: bool,
    /// Class id -> sample ids.
    classes: BTreeMap<usize, Vec<u64>>,
    /// Present when every sample carries a ground-truth label.
    purity: Option<PurityJson>,
}

#[derive(Serialize, Deserialize)]
struct PurityJson {
    mean_new: f64,
    per_class: Vec<Option<f64>>,
}

pub fn select(a: &SelectArgs) -> CliResult<()> {
    let ds = load_dataset(&a.features)?;
    let x = cls_features(&ds);
    let (g, w) = if has_magic(&a.proto, &STATE_MAGIC)? {
        let state = load_state(&a.proto)?;
        (state.model.encode(x.view()), state.model.prototypes.clone())
    } else if has_magic(&a.proto, &PROTO_MAGIC)? {
        (x, load_prototypes(&a.proto)?.matrix().mapv(f64::from))
    } else {
        return Err(CliError::data(&a.proto, "neither a prototype file nor a trained state"));
    };
    if w.nrows() != g.ncols() || w.ncols() != ds.meta.num_classes {
        return Err(CliError::Data(format!(
            "prototypes are {}x{}, features need {}x{}",
            w.nrows(),
            w.ncols(),
            g.ncols(),
            ds.meta.num_classes
        )));
    }
    let gn = normalize_rows(g.view());
    let old = &ds.meta.old_classes;
    let n_s = compute_ns(a.gamma, ds.labeled_indices().len(), old.len())?;
    let ranking = if a.raw {
        Prototypes::from_columns(w)?
    } else {
        let p = cosine_predictions(g.view(), w.view(), a.tau)?;
        let sk = sinkhorn_adjust(p.view(), &SinkhornConfig::default())?;
        calibrate_prototypes(sk.q.view(), gn.view(), n_s)?
    };
    let cands = select_candidates(&ranking, gn.view(), &ds.visible_labels(), old, n_s)?;
    let labels: Option<Vec<usize>> = ds.samples.iter().map(|s| s.label).collect();
    let purity = match labels {
        Some(y) => {
            let r = candidate_purity(&cands, &y, old)?;
            Some(PurityJson {
                mean_new: r.mean_new,
                per_class: r.per_class.iter().map(|p| p.is_finite().then_some(*p)).collect(),
            })
        }
        None => None,
    };
    let classes = cands
        .per_class
        .iter()
        .enumerate()
        .map(|(c, members)| (c, members.iter().map(|&i| ds.samples[i].id).collect()))
        .collect();
    let file = CandidatesFile { n_s, calibrated: !a.raw, classes, purity };
    let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&a.out, &json)?;
    if let Some(p) = &file.purity {
        eprintln!("N_s = {n_s}, mean new-class purity {:.4}", p.mean_new);
    }
    Ok(())
}

fn to_f32(g: &GmmParams<f64>) -> GmmParams<f32> {
    GmmParams {
        weights: g.weights.mapv(|v| v as f32),
        means: g.means.mapv(|v| v as f32),
        variances: g.variances.mapv(|v| v as f32),
    }
}

pub fn fit_gmm(a: &FitGmmArgs, seed: u64) -> CliResult<()> {
    let ds = load_dataset(&a.features)?;
    let text = fs::read_to_string(&a.candidates).map_err(|e| CliError::io(&a.candidates, e))?;
    let cands: CandidatesFile = serde_json::from_str(&text).map_err(|e| CliError::data(&a.candidates, e))?;
    let k = match a.k.as_str() {
        "auto" => {
            let r = auto_part_count(&ds, &SelectKConfig::default(), a.normalize, seed)?;
            for (k, s) in &r.scores {
                eprintln!("k = {k}: mean silhouette {s:.4}");
            }
            r.k
        }
        s => match s.parse::<usize>() {
            Ok(k) if k >= 1 => k,
            _ => return Err(CliError::Usage(format!("--k must be `auto` or a positive integer, got {s:?}"))),
        },
    };
    let index: HashMap<u64, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let c = ds.meta.num_classes;
    let mut members = vec![Vec::new(); c];
    for (&class, ids) in &cands.classes {
        if class >= c {
            return Err(CliError::data(&a.candidates, format!("class {class} outside 0..{c}")));
        }
        for id in ids {
            let i = index.get(id).ok_or_else(|| CliError::data(&a.candidates, format!("unknown sample id {id}")))?;
            members[class].push(*i);
        }
    }
    let cfg = GmmConfig::default();
    let gmms: Vec<Option<GmmParams<f32>>> = members
        .par_iter()
        .enumerate()
        .map(|(class, idx)| {
            let pts = filtered_patch_matrix::<f64>(idx.iter().map(|&i| &ds.samples[i]), a.normalize);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_GMM, 0, class as u64));
            match fit_mixture(pts.view(), k, &cfg, &mut rng) {
                Ok(f) => Some(to_f32(&f.params)),
                Err(e) => {
                    log::warn!("class {class}: no mixture: {e}");
                    None
                }
            }
        })
        .collect();
    save_gmms(&gmms, ds.meta.dim, &a.out)?;
    eprintln!("fitted {} of {c} classes with K = {k}", gmms.iter().filter(|g| g.is_some()).count());
    Ok(())
}

/// Everything needed to repeat a training run.
#[derive(Serialize, Deserialize)]
struct ResolvedRun {
    version: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<SynthConfig>,
    train: TrainConfig,
}

fn resolve_run(table: &toml::Table, seed: Option<u64>) -> CliResult<ResolvedRun> {
    for key in table.keys() {
        if !["version", "seed", "data", "preset", "synth", "train"].contains(&key.as_str()) {
            return Err(CliError::Data(format!("unknown config key `{key}`")));
        }
    }
    let seed = seed.or(config_seed(table)?).unwrap_or(0);
    let preset = parse_preset(table.get("preset"))?;
    let data = match table.get("data") {
        None => None,
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => return Err(CliError::Data(format!("data must be a path, got {v}"))),
    };
    if data.is_some() && table.contains_key("synth") {
        return Err(CliError::Data("give either `data` or `[synth]`, not both".into()));
    }
    let synth = match data {
        Some(_) => None,
        None => {
            let mut s = overlay(&synth_preset(preset, seed), table.get("synth"), "synth")?;
            s.seed = seed;
            Some(s)
        }
    };
    let base = match preset {
        Preset::Default => TrainConfig { seed, ..Default::default() },
        Preset::Benchmark => TrainConfig::benchmark(seed),
    };
    let mut train = overlay(&base, table.get("train"), "train")?;
    train.seed = seed;
    train.validate()?;
    Ok(ResolvedRun { version: VERSION.to_string(), seed, data, synth, train })
}

#[derive(Serialize)]
struct IdPred {
    id: u64,
    pred: usize,
}

#[derive(Serialize)]
struct AccRow {
    all: f64,
    old: f64,
    new: f64,
    n_old: usize,
    n_new: usize,
    /// `permutation[cluster] = class`, space separated.
    permutation: String,
}

impl From<&AccReport> for AccRow {
    fn from(r: &AccReport) -> Self {
        AccRow {
            all: r.all,
            old: r.old,
            new: r.new,
            n_old: r.n_old,
            n_new: r.n_new,
            permutation: r.permutation.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        }
    }
}

fn predictions_for(state: &TrainState<f64>, ds: &FeatureDataset, all: bool) -> CliResult<Vec<IdPred>> {
    let preds = predict_classes(state, ds)?;
    let keep: Vec<usize> = if all { (0..ds.len()).collect() } else { ds.unlabeled_indices() };
    Ok(keep.into_iter().map(|i| IdPred { id: ds.samples[i].id, pred: preds[i] }).collect())
}

pub fn train_toy(a: &TrainToyArgs, seed: Option<u64>) -> CliResult<()> {
    let table = a.config.as_deref().map(read_toml).transpose()?.unwrap_or_default();
    let run = resolve_run(&table, seed)?;
    let ds = match (&run.data, &run.synth) {
        (Some(p), _) => {
            // relative paths are taken from the config file's directory
            let base = a.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
            load_dataset(base.join(p))?
        }
        (None, Some(s)) => generate_synthetic(s)?,
        (None, None) => unreachable!("resolve_run fills one of them"),
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let resolved = toml::to_string_pretty(&run).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&a.out.join("config.toml"), &resolved)?;

    let out = train::<f64>(&ds, &run.train)?;
    write_rows(&a.out.join("metrics.csv"), &out.metrics)?;
    if !out.k_scores.is_empty() {
        #[derive(Serialize)]
        struct KScore {
            k: usize,
            silhouette: f64,
        }
        write_rows(&a.out.join("k_scores.csv"), out.k_scores.iter().map(|&(k, silhouette)| KScore { k, silhouette }))?;
    }
    save_state(&out.state, a.out.join("state.bin"))?;
    let w = Prototypes::from_columns(out.state.model.prototypes.mapv(|v| v as f32))?;
    save_prototypes(&w, a.out.join("prototypes.bin"))?;
    write_rows(&a.out.join("predictions.csv"), predictions_for(&out.state, &ds, false)?)?;
    let old: Vec<String> = ds.meta.old_classes.iter().map(usize::to_string).collect();
    write_text(&a.out.join("old_classes.txt"), &(old.join("\n") + "\n"))?;
    if let Some(m) = out.metrics.last() {
        eprintln!(
            "epoch {}: all {:.4} old {:.4} new {:.4} purity {:.4}",
            m.epoch, m.all_acc, m.old_acc, m.new_acc, m.purity
        );
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let state = load_state(&a.state)?;
    let ds = load_dataset(&a.features)?;
    write_rows(&a.out, predictions_for(&state, &ds, a.all)?)
}

fn non_negative(path: &Path, rows: Vec<(u64, i64)>, what: &str) -> CliResult<Vec<(u64, usize)>> {
    rows.into_iter()
        .map(|(id, v)| {
            usize::try_from(v).map(|v| (id, v)).map_err(|_| CliError::data(path, format!("id {id}: {what} {v} < 0")))
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let preds = non_negative(&a.pred, read_id_values(&a.pred, "pred")?, "prediction")?;
    let labels = non_negative(&a.labels, read_id_values(&a.labels, "label")?, "label")?;
    if preds.len() != labels.len() {
        return Err(CliError::Data(format!(
            "{} has {} predictions but {} has {} labels",
            a.pred.display(),
            preds.len(),
            a.labels.display(),
            labels.len()
        )));
    }
    if let Some(r) = preds.iter().zip(&labels).position(|(p, l)| p.0 != l.0) {
        return Err(CliError::Data(format!(
            "row {}: prediction id {} but label id {}",
            r + 1,
            preds[r].0,
            labels[r].0
        )));
    }
    let old = read_class_list(&a.old_classes)?;
    let p: Vec<usize> = preds.iter().map(|r| r.1).collect();
    let y: Vec<usize> = labels.iter().map(|r| r.1).collect();
    let report = clustering_acc(&p, &y, &old)?;
    let table = to_csv_string([AccRow::from(&report)]);
    print!("{table}");
    if let Some(out) = &a.out {
        write_text(out, &table)?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult<()> {
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be positive".into()));
    }
    let rows = gradcheck_suite(seed, a.instances)?;
    let table = to_csv_string(&rows);
    match &a.out {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    eprintln!("{} checks, {failed} failed", rows.len());
    if failed > 0 {
        return Err(
            partdisc_core::Error::Numerical(format!("{failed} of {} gradient checks failed", rows.len())).into()
        );
    }
    Ok(())
}
