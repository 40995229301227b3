//! The pipeline steps behind each subcommand. Every function takes a
//! validated [`RunConfig`] and explicit input/output directories so tests can
//! drive them in-process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use afp_core::metrics::{aggregate, silver_standard_eval, AggregateReport, MetricsReport};
use afp_core::preprocess::{preprocess_pair, PairStats};
use afp_core::segnet::{
    build_segmenter, freeze, train_segmentation, SegCase, SegModel, SegTraining, TappedSegmenter,
    UNetConfig,
};
use afp_core::synth::{
    build_translator, synthesize_volume, train_translation, SynthModel, SynthTraining,
    TranslatorConfig,
};
use afp_core::VolumePair;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{self, load_dataset, CaseEntry, Manifest, Split};
use crate::error::{AppError, Result};
use crate::io::{write_file, Provenance};
use crate::report;

pub const SEGMENTER_KIND: &str = "segmenter";
pub const TRANSLATOR_KIND: &str = "translator";

/// Caps the worker pool at `AFP_NUM_THREADS` when set. Results never
/// depend on the thread count: every parallel loop is per case and
/// collected in case order.
pub fn init_threads() {
    if let Some(n) = std::env::var("AFP_NUM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    Train,
    Val,
    Test,
}

impl Subset {
    fn indices(self, n: usize, cfg: &RunConfig) -> Result<Vec<usize>> {
        if self == Subset::All {
            return Ok((0..n).collect());
        }
        let s = Split::new(n, cfg.split, cfg.seed)?;
        Ok(match self {
            Subset::Train => s.train,
            Subset::Val => s.val,
            _ => s.test,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(
        path,
        &serde_json::to_vec_pretty(value).expect("serializable"),
    )
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    provenance: Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub fn phantom_gen(cfg: &RunConfig, n: usize, out: &Path) -> Result<Manifest> {
    dataset::write_phantoms(
        &cfg.phantom,
        n,
        cfg.seed,
        cfg.format,
        out,
        &cfg.provenance(),
    )
}

pub fn preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Manifest> {
    let (manifest, pairs) = load_dataset(input)?;
    let prov = cfg.provenance();
    let ext = cfg.format.extension();
    let done: Vec<(CaseEntry, PairStats)> = manifest
        .cases
        .par_iter()
        .zip(pairs.par_iter())
        .map(|(entry, pair)| -> Result<_> {
            let (p, stats) = preprocess_pair(pair, &cfg.preprocess)?;
            let id = &entry.id;
            let e = CaseEntry {
                seed: entry.seed,
                mr: Some(format!("{id}_mr.{ext}")),
                ct: Some(format!("{id}_ct.{ext}")),
                labels: p.labels.as_ref().map(|_| format!("{id}_labels.{ext}")),
                ..CaseEntry::new(id)
            };
            dataset::write_pair(out, &e, &p, &prov)?;
            Ok((e, stats))
        })
        .collect::<Result<_>>()?;
    let stats: BTreeMap<String, PairStats> = done.iter().map(|(e, s)| (e.id.clone(), *s)).collect();
    write_json(
        &out.join("stats.json"),
        &Stamped {
            provenance: prov.clone(),
            body: &stats,
        },
    )?;
    let m = Manifest {
        kind: "preprocessed".into(),
        provenance: prov,
        label_names: manifest.label_names,
        cases: done.into_iter().map(|(e, _)| e).collect(),
    };
    m.save(out)?;
    Ok(m)
}

fn seg_cases(
    cfg: &RunConfig,
    manifest: &Manifest,
    pairs: &[VolumePair],
    idx: &[usize],
) -> Result<Vec<SegCase>> {
    let map = cfg.seg_label_map();
    let names: BTreeMap<u32, String> = cfg
        .seg_labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (
                i as u32 + 1,
                manifest
                    .label_names
                    .get(l)
                    .cloned()
                    .unwrap_or_else(|| format!("label{l}")),
            )
        })
        .collect();
    idx.iter()
        .map(|&i| {
            let labels = pairs[i].labels.as_ref().ok_or_else(|| {
                AppError::read(
                    Path::new(dataset::MANIFEST),
                    format!("case {} has no labels", manifest.cases[i].id),
                )
            })?;
            Ok(SegCase {
                image: pairs[i].target.clone(),
                labels: labels.remap(&map, names.clone())?,
            })
        })
        .collect()
}

pub fn train_seg(cfg: &RunConfig, data: &Path, out: &Path) -> Result<SegTraining> {
    let (manifest, pairs) = load_dataset(data)?;
    let split = Split::new(pairs.len(), cfg.split, cfg.seed)?;
    let train = seg_cases(cfg, &manifest, &pairs, &split.train)?;
    let val = seg_cases(cfg, &manifest, &pairs, &split.val)?;
    let opts = afp_core::segnet::SegTrainOptions {
        seed: cfg.seed,
        ..cfg.seg_training.clone()
    };
    let model = build_segmenter::<f32>(&cfg.segmenter, cfg.seed)?;
    let run = train_segmentation(model, &train, &val, &opts)?;
    let prov = cfg.provenance();
    save_checkpoint(
        &run.checkpoint,
        SEGMENTER_KIND,
        &prov,
        &out.join("segmenter.json"),
    )?;
    report::write_seg_curve(&run.curve, &prov, &out.join("seg_curve.csv"))?;
    write_json(
        &out.join("split.json"),
        &Stamped {
            provenance: prov,
            body: &split,
        },
    )?;
    Ok(run)
}

pub fn load_segmenter(path: &Path) -> Result<SegModel<f32>> {
    let (ckpt, _) = load_checkpoint::<UNetConfig>(path, SEGMENTER_KIND)?;
    Ok(freeze(SegModel::from_checkpoint(&ckpt)?))
}

pub fn load_translator(path: &Path) -> Result<SynthModel<f32>> {
    let (ckpt, _) = load_checkpoint::<TranslatorConfig>(path, TRANSLATOR_KIND)?;
    Ok(SynthModel::from_checkpoint(&ckpt)?)
}

pub fn train_synth(
    cfg: &RunConfig,
    data: &Path,
    segmenter: Option<&Path>,
    out: &Path,
) -> Result<SynthTraining> {
    let plan = cfg.training.plan(cfg.seed);
    let seg = match segmenter {
        Some(p) => Some(load_segmenter(p)?),
        None => None,
    };
    if cfg.training.mode.needs_extractor() && seg.is_none() {
        return Err(afp_core::Error::ConfigConflict(format!(
            "mode {:?} needs a segmenter checkpoint (segmenter_checkpoint or --segmenter)",
            cfg.training.mode
        ))
        .into());
    }
    plan.validate(seg.is_some())?;
    let (_, pairs) = load_dataset(data)?;
    let split = Split::new(pairs.len(), cfg.split, cfg.seed)?;
    let train = Split::pick(&split.train, &pairs);
    let val = Split::pick(&split.val, &pairs);
    let ext = seg.as_ref().map(|m| TappedSegmenter {
        model: m,
        taps: &cfg.taps,
    });
    let ext_ref = ext
        .as_ref()
        .map(|e| e as &dyn afp_core::segnet::FeatureExtractor<f32>);
    let model = build_translator::<f32>(&cfg.translator, cfg.seed)?;
    let run = train_translation(model, &train, &val, &plan, ext_ref)?;
    let prov = cfg.provenance();
    save_checkpoint(
        &run.checkpoint,
        TRANSLATOR_KIND,
        &prov,
        &out.join("translator.json"),
    )?;
    if let Some(s1) = &run.stage1_checkpoint {
        save_checkpoint(
            s1,
            TRANSLATOR_KIND,
            &prov,
            &out.join("translator_stage1.json"),
        )?;
    }
    report::write_synth_log(&run.log, &prov, &out.join("synth_log.csv"))?;
    write_json(
        &out.join("split.json"),
        &Stamped {
            provenance: prov,
            body: &split,
        },
    )?;
    Ok(run)
}

pub fn synth(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    subset: Subset,
    out: &Path,
) -> Result<Manifest> {
    let model = load_translator(checkpoint)?;
    let manifest = dataset::Manifest::load(input)?;
    let idx = subset.indices(manifest.cases.len(), cfg)?;
    let prov = cfg.provenance();
    let ext = cfg.format.extension();
    let s = &cfg.synthesis;
    let cases = idx
        .par_iter()
        .map(|&i| -> Result<CaseEntry> {
            let entry = &manifest.cases[i];
            let pair = dataset::load_pair(input, &manifest, entry)?;
            let v = synthesize_volume(&model, &pair.source, s.patch_size, s.tiling, s.blend)?;
            let e = CaseEntry {
                synth_ct: Some(format!("{}_synth.{ext}", entry.id)),
                ..CaseEntry::new(&entry.id)
            };
            crate::io::save_volume(&v, &out.join(e.synth_ct.as_ref().unwrap()), Some(&prov))?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        kind: "synthetic".into(),
        provenance: prov,
        label_names: BTreeMap::new(),
        cases,
    };
    m.save(out)?;
    Ok(m)
}

pub fn eval(
    cfg: &RunConfig,
    real: &Path,
    synth: &Path,
    segmenter: &Path,
    subset: Subset,
    out: &Path,
) -> Result<(Vec<MetricsReport>, AggregateReport)> {
    let seg = load_segmenter(segmenter)?;
    let real_m = Manifest::load(real)?;
    let synth_m = Manifest::load(synth)?;
    let idx = subset.indices(real_m.cases.len(), cfg)?;
    let real_cases: Vec<&CaseEntry> = idx.iter().map(|&i| &real_m.cases[i]).collect();
    let synth_by_id: BTreeMap<&str, &CaseEntry> =
        synth_m.cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let real_ids: std::collections::BTreeSet<&str> =
        real_cases.iter().map(|c| c.id.as_str()).collect();
    let mut unmatched: Vec<String> = real_ids
        .iter()
        .filter(|id| !synth_by_id.contains_key(*id))
        .chain(synth_by_id.keys().filter(|id| !real_ids.contains(*id)))
        .map(|s| s.to_string())
        .collect();
    unmatched.sort();
    if !unmatched.is_empty() {
        return Err(AppError::CaseMismatch(unmatched));
    }
    let reports = real_cases
        .par_iter()
        .map(|entry| -> Result<MetricsReport> {
            let ct = dataset::load_ct(real, entry)?;
            let sct = dataset::load_synth(synth, synth_by_id[entry.id.as_str()])?;
            Ok(silver_standard_eval(
                &entry.id,
                &ct,
                &sct,
                &seg,
                &cfg.metrics,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&reports);
    let prov = cfg.provenance();
    report::write_case_csv(&reports, &prov, &out.join("cases.csv"))?;
    report::write_aggregate_json(&agg, &prov, &out.join("aggregate.json"))?;
    Ok((reports, agg))
}

/// Collects `aggregate.json` from each named evaluation directory into one
/// markdown table.
pub fn report(
    runs: &[(String, PathBuf)],
    label_names: &BTreeMap<u32, String>,
    out: &Path,
) -> Result<String> {
    let rows = runs
        .iter()
        .map(|(name, dir)| {
            Ok((
                name.clone(),
                report::read_aggregate_json(&dir.join("aggregate.json"))?.aggregate,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let md = report::ablation_markdown(&rows, label_names);
    write_file(&out.join("ablation.md"), md.as_bytes())?;
    Ok(md)
}
