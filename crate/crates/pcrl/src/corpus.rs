//! Synthetic corpora on disk.
//!
//! A corpus archive holds `images` `[N, 1, D, H, W]`, `labels` `[N]` and
//! `masks` (same shape as `images`). The metadata records the generating
//! spec and the `[start, end)` range of each split.

use std::collections::BTreeMap;
use std::path::Path;

use pcrl_core::synthdata::{generate, split_range, Corpus, Split, SynthSpec};
use pcrl_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub spec: SynthSpec,
    pub splits: BTreeMap<String, [usize; 2]>,
}

pub fn save_corpus(dir: &Path, spec: &SynthSpec, corpus: &Corpus<f32>) -> Result<()> {
    let n = corpus.len();
    let splits = Split::ALL
        .iter()
        .map(|&s| {
            let r = split_range(n, s);
            (s.name().to_string(), [r.start, r.end])
        })
        .collect();
    let meta = CorpusMeta {
        spec: spec.clone(),
        splits,
    };
    let mut a = Archive::new(serde_json::to_value(&meta).expect("metadata serializes"));
    a.push("images", corpus.images.clone());
    a.push("labels", Tensor::from_vec(&[n], corpus.labels.iter().map(|&l| l as f32).collect())?);
    a.push("masks", corpus.masks.clone());
    a.save(dir)
}

/// Generates the corpus described by `spec` and writes it to `dir`.
pub fn generate_corpus(dir: &Path, spec: &SynthSpec) -> Result<Corpus<f32>> {
    let corpus = generate(spec)?;
    save_corpus(dir, spec, &corpus)?;
    Ok(corpus)
}

/// The whole corpus and its metadata.
pub fn load_full(dir: &Path) -> Result<(CorpusMeta, Corpus<f32>)> {
    let a = Archive::load(dir)?;
    let corrupt = |reason: String| Error::CorruptArchive {
        path: dir.to_path_buf(),
        reason,
    };
    let meta: CorpusMeta =
        serde_json::from_value(a.metadata.clone()).map_err(|e| corrupt(format!("corpus metadata: {e}")))?;
    let (images, labels, masks) = match (a.get("images"), a.get("labels"), a.get("masks")) {
        (Some(i), Some(l), Some(m)) => (i, l, m),
        _ => return Err(corrupt("corpus needs images, labels and masks".into())),
    };
    let n = labels.numel();
    if images.rank() != 5 || images.shape()[0] != n || images.shape() != masks.shape() {
        return Err(corrupt(format!(
            "images {:?}, masks {:?} and {} labels disagree",
            images.shape(),
            masks.shape(),
            n
        )));
    }
    let labels = labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 {
                Ok(l as usize)
            } else {
                Err(corrupt(format!("label {l} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for s in Split::ALL {
        let r = split_range(n, s);
        if meta.splits.get(s.name()) != Some(&[r.start, r.end]) {
            return Err(corrupt(format!("split {} does not match {} samples", s.name(), n)));
        }
    }
    Ok((
        meta,
        Corpus {
            images: images.clone(),
            labels,
            masks: masks.clone(),
        },
    ))
}

pub fn load_corpus(dir: &Path, split: &str) -> Result<Corpus<f32>> {
    let split = Split::parse(split).ok_or_else(|| Error::UnknownSplit(split.to_string()))?;
    let (_, corpus) = load_full(dir)?;
    Ok(corpus.split(split)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::manifest_digest;

    fn spec() -> SynthSpec {
        SynthSpec {
            count: 100,
            size: [16, 16, 1],
            classes: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn splits_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        generate_corpus(&p, &spec()).unwrap();
        let sizes: Vec<usize> = ["train", "val", "test"]
            .iter()
            .map(|s| load_corpus(&p, s).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![70, 10, 20]);
        let (_, all) = load_full(&p).unwrap();
        assert_eq!(all.labels.iter().filter(|&&l| l == 0).count(), 50);
        assert!(matches!(load_corpus(&p, "holdout"), Err(Error::UnknownSplit(_))));
    }

    #[test]
    fn deterministic_and_resave_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_corpus(&a, &spec()).unwrap();
        generate_corpus(&b, &spec()).unwrap();
        assert_eq!(manifest_digest(&a).unwrap(), manifest_digest(&b).unwrap());
        let (meta, c) = load_full(&a).unwrap();
        save_corpus(&b, &meta.spec, &c).unwrap();
        assert_eq!(manifest_digest(&a).unwrap(), manifest_digest(&b).unwrap());
    }
}
