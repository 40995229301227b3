//! On-disk case collections described by a `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use afp_core::phantom::{generate_phantom, label_names, split_dataset, PhantomSpec};
use afp_core::rng::derive_seed;
use afp_core::{LabelVolume, Volume, VolumePair};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::{self, read_file, write_file, Format, Provenance};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    /// Generator seed for phantom cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Paths relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_ct: Option<String>,
}

impl CaseEntry {
    pub fn new(id: &str) -> Self {
        CaseEntry {
            id: id.into(),
            seed: None,
            mr: None,
            ct: None,
            labels: None,
            synth_ct: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub provenance: Provenance,
    pub label_names: BTreeMap<u32, String>,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = read_file(&path)?;
        serde_json::from_slice(&text).map_err(|e| AppError::read(&path, e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_file(&dir.join(MANIFEST), &text)
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }
}

/// Case ids are zero-padded so lexical and numeric order agree.
pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

fn resolve(dir: &Path, rel: &Option<String>, what: &str, id: &str) -> Result<PathBuf> {
    rel.as_ref()
        .map(|r| dir.join(r))
        .ok_or_else(|| AppError::read(dir.join(MANIFEST), format!("case {id} has no {what} entry")))
}

/// Writes `n` phantom pairs; case `i` uses seed `derive_seed(seed, i)`.
pub fn write_phantoms(
    spec: &PhantomSpec,
    n: usize,
    seed: u64,
    format: Format,
    dir: &Path,
    prov: &Provenance,
) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| AppError::write(dir, e))?;
    let ext = format.extension();
    let cases: Vec<CaseEntry> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<CaseEntry> {
            let id = case_id(i);
            let case_seed = derive_seed(seed, i as u64);
            let pair = generate_phantom(&PhantomSpec {
                seed: case_seed,
                ..spec.clone()
            })?;
            let entry = CaseEntry {
                seed: Some(case_seed),
                mr: Some(format!("{id}_mr.{ext}")),
                ct: Some(format!("{id}_ct.{ext}")),
                labels: Some(format!("{id}_labels.{ext}")),
                ..CaseEntry::new(&id)
            };
            write_pair(dir, &entry, &pair, prov)?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        kind: "phantoms".into(),
        provenance: prov.clone(),
        label_names: label_names(),
        cases,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

pub fn write_pair(
    dir: &Path,
    entry: &CaseEntry,
    pair: &VolumePair,
    prov: &Provenance,
) -> Result<()> {
    io::save_volume(
        &pair.source,
        &resolve(dir, &entry.mr, "mr", &entry.id)?,
        Some(prov),
    )?;
    io::save_volume(
        &pair.target,
        &resolve(dir, &entry.ct, "ct", &entry.id)?,
        Some(prov),
    )?;
    if let Some(l) = &pair.labels {
        io::save_labels(
            l,
            &resolve(dir, &entry.labels, "labels", &entry.id)?,
            Some(prov),
        )?;
    }
    Ok(())
}

pub fn load_labels(dir: &Path, manifest: &Manifest, entry: &CaseEntry) -> Result<LabelVolume> {
    let l = io::load_labels(&resolve(dir, &entry.labels, "labels", &entry.id)?)?;
    if manifest.label_names.is_empty() {
        return Ok(l);
    }
    Ok(LabelVolume::new(
        l.labels().to_vec(),
        l.shape(),
        *l.geometry(),
        manifest.label_names.clone(),
    )?)
}

pub fn load_pair(dir: &Path, manifest: &Manifest, entry: &CaseEntry) -> Result<VolumePair> {
    let mr = io::load_volume(&resolve(dir, &entry.mr, "mr", &entry.id)?)?;
    let ct = io::load_volume(&resolve(dir, &entry.ct, "ct", &entry.id)?)?;
    let labels = match entry.labels {
        Some(_) => Some(load_labels(dir, manifest, entry)?),
        None => None,
    };
    Ok(VolumePair::new(mr, ct, labels)?)
}

pub fn load_ct(dir: &Path, entry: &CaseEntry) -> Result<Volume> {
    io::load_volume(&resolve(dir, &entry.ct, "ct", &entry.id)?)
}

pub fn load_synth(dir: &Path, entry: &CaseEntry) -> Result<Volume> {
    io::load_volume(&resolve(dir, &entry.synth_ct, "synth_ct", &entry.id)?)
}

/// All cases of a dataset directory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<VolumePair>)> {
    if !dir.join(MANIFEST).is_file() {
        return Err(AppError::read(
            dir.join(MANIFEST),
            "dataset manifest not found",
        ));
    }
    let manifest = Manifest::load(dir)?;
    let pairs = manifest
        .cases
        .par_iter()
        .map(|c| load_pair(dir, &manifest, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}

/// Train / validation / test case indices for a dataset of `n` cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
        let (mut train, mut val, mut test) = split_dataset((0..n).collect(), fractions, seed)?;
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Split { train, val, test })
    }

    pub fn pick<T: Clone>(idx: &[usize], items: &[T]) -> Vec<T> {
        idx.iter().map(|&i| items[i].clone()).collect()
    }
}
