//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json   spec, per-split sizes and (class, domain) counts,
//!                       measured per-domain imbalance, format version
//! <dir>/train.bin       records: [y: u32 LE][d: u32 LE][pixels: f32 LE x C*H*W]
//! <dir>/val.bin
//! <dir>/test.bin
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, DatasetSplits, Example};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub size: usize,
    /// `counts[c][d]`
    pub counts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
    /// Largest over smallest class count in each domain's training data.
    pub measured_imbalance: Vec<Option<f64>>,
}

impl Manifest {
    pub fn describe(splits: &DatasetSplits) -> Self {
        let summary = |d: &Dataset| SplitSummary {
            size: d.len(),
            counts: d.cell_counts(),
        };
        Manifest {
            format_version: FORMAT_VERSION,
            spec: splits.spec.clone(),
            train: summary(&splits.train),
            val: summary(&splits.val),
            test: summary(&splits.test),
            measured_imbalance: splits.train.imbalance_per_domain(),
        }
    }
}

pub fn write_records(dataset: &Dataset) -> Vec<u8> {
    let per = dataset.channels * dataset.side * dataset.side;
    let mut out = Vec::with_capacity(dataset.len() * (8 + 4 * per));
    for e in &dataset.examples {
        out.extend_from_slice(&(e.y as u32).to_le_bytes());
        out.extend_from_slice(&(e.d as u32).to_le_bytes());
        for p in &e.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub fn read_records(
    bytes: &[u8],
    num_classes: usize,
    num_domains: usize,
    channels: usize,
    side: usize,
) -> Result<Dataset> {
    let per = channels * side * side;
    let record = 8 + 4 * per;
    if bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "record stream of {} bytes is not a multiple of the {record}-byte record size",
            bytes.len()
        )));
    }
    let word = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut examples = Vec::with_capacity(bytes.len() / record);
    for chunk in bytes.chunks_exact(record) {
        let y = word(&chunk[0..4]) as usize;
        let d = word(&chunk[4..8]) as usize;
        if y >= num_classes || d >= num_domains {
            return Err(Error::Format(format!("record with class {y}, domain {d} out of range")));
        }
        let pixels = chunk[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        examples.push(Example { pixels, y, d });
    }
    Ok(Dataset {
        num_classes,
        num_domains,
        channels,
        side,
        examples,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(splits: &DatasetSplits, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::describe(splits);
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    write_file(&dir.join("train.bin"), &write_records(&splits.train))?;
    write_file(&dir.join("val.bin"), &write_records(&splits.val))?;
    write_file(&dir.join("test.bin"), &write_records(&splits.test))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let spec = manifest.spec.clone();
    let load = |name: &str, summary: &SplitSummary| -> Result<Dataset> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ds = read_records(&bytes, spec.num_classes, spec.num_domains, spec.channels, spec.image_side)?;
        if ds.len() != summary.size || ds.cell_counts() != summary.counts {
            return Err(Error::Format(format!("{name} does not match manifest counts")));
        }
        Ok(ds)
    };
    Ok(DatasetSplits {
        train: load("train.bin", &manifest.train)?,
        val: load("val.bin", &manifest.val)?,
        test: load("test.bin", &manifest.test)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;
    use proptest::prelude::*;

    fn tiny() -> DatasetSpec {
        DatasetSpec {
            head_count: 6,
            image_side: 4,
            channels: 2,
            val_per_cell: 1,
            test_per_cell: 2,
            ..DatasetSpec::new(3, 2)
        }
    }

    #[test]
    fn directory_round_trip_is_bit_exact() {
        let splits = generate(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&splits, dir.path()).unwrap();
        assert_eq!(manifest.train.counts.iter().flatten().sum::<usize>(), splits.train.len());
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, splits);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let splits = generate(&tiny()).unwrap();
        let mut bytes = write_records(&splits.train);
        bytes.pop();
        assert!(matches!(read_records(&bytes, 3, 2, 2, 4), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let splits = generate(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&splits, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Version { .. })));
    }

    proptest! {
        #[test]
        fn records_round_trip(pix in proptest::collection::vec(any::<f32>(), 8), y in 0usize..3, d in 0usize..2) {
            let ds = Dataset {
                num_classes: 3,
                num_domains: 2,
                channels: 2,
                side: 2,
                examples: vec![Example { pixels: pix.clone(), y, d }],
            };
            let back = read_records(&write_records(&ds), 3, 2, 2, 2).unwrap();
            let bits: Vec<u32> = back.examples[0].pixels.iter().map(|p| p.to_bits()).collect();
            let orig: Vec<u32> = pix.iter().map(|p| p.to_bits()).collect();
            prop_assert_eq!(bits, orig);
            prop_assert_eq!((back.examples[0].y, back.examples[0].d), (y, d));
        }
    }
}
