//! Dataset persistence: a `key = value` text manifest plus a raw records
//! file of float32 patches.
//!
//! The records file holds the selected triplets back to back, each as three
//! `patch x patch x 3` little-endian f32 images (first, middle, last). The
//! manifest indexes them by byte offset and carries the flow annotations and
//! global statistics.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sepconv_core::datapipe::{augment, flow_percentiles, AugmentedPair, FlowStats, TripletSample};
use sepconv_core::rng::RandomStream;
use sepconv_core::tensor::Tensor;
use sepconv_core::training::SampleSource;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub offset: u64,
    pub mean_flow: f32,
    pub source_id: String,
    pub frame_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub patch: usize,
    pub entries: Vec<ManifestEntry>,
    pub flow_stats: FlowStats,
}

/// `PREFIX.manifest` and `PREFIX.records` for a dataset prefix.
pub fn dataset_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut manifest = prefix.as_os_str().to_owned();
    manifest.push(".manifest");
    let mut records = prefix.as_os_str().to_owned();
    records.push(".records");
    (PathBuf::from(manifest), PathBuf::from(records))
}

fn triplet_bytes(patch: usize) -> u64 {
    (patch * patch * 3 * 4 * 3) as u64
}

/// Writes the manifest + records pair; returns the file paths.
pub fn write_dataset(prefix: &Path, samples: &[TripletSample]) -> CliResult<(PathBuf, PathBuf)> {
    if samples.is_empty() {
        return Err(CliError::Config("refusing to write an empty dataset".into()));
    }
    let patch = samples[0].first.shape()[0];
    let (manifest_path, records_path) = dataset_paths(prefix);

    let file = File::create(&records_path).map_err(|e| CliError::io(&records_path, e))?;
    let mut records = BufWriter::new(file);
    let mut entries = Vec::with_capacity(samples.len());
    let mut offset = 0u64;
    for s in samples {
        for img in [&s.first, &s.middle, &s.last] {
            if img.shape() != [patch, patch, 3] {
                return Err(CliError::Config(format!(
                    "sample patch shape {:?} does not match {patch}",
                    img.shape()
                )));
            }
            for &v in img.data() {
                records
                    .write_all(&v.to_le_bytes())
                    .map_err(|e| CliError::io(&records_path, e))?;
            }
        }
        entries.push(ManifestEntry {
            offset,
            mean_flow: s.mean_flow,
            source_id: s.source_id.clone(),
            frame_index: s.frame_index as u64,
        });
        offset += triplet_bytes(patch);
    }
    records
        .flush()
        .map_err(|e| CliError::io(&records_path, e))?;

    let flows: Vec<f32> = samples.iter().map(|s| s.mean_flow).collect();
    let stats = flow_percentiles(&flows)?;
    let mut text = String::new();
    text.push_str(&format!("patch_size = {patch}\n"));
    text.push_str(&format!("count = {}\n", entries.len()));
    text.push_str(&format!("flow_p90 = {}\n", stats.p90));
    text.push_str(&format!("flow_p95 = {}\n", stats.p95));
    text.push_str(&format!("flow_max = {}\n", stats.max));
    for (i, e) in entries.iter().enumerate() {
        text.push_str(&format!("sample.{i}.offset = {}\n", e.offset));
        text.push_str(&format!("sample.{i}.mean_flow = {}\n", e.mean_flow));
        text.push_str(&format!("sample.{i}.source = {}\n", e.source_id));
        text.push_str(&format!("sample.{i}.frame_index = {}\n", e.frame_index));
    }
    std::fs::write(&manifest_path, text).map_err(|e| CliError::io(&manifest_path, e))?;
    Ok((manifest_path, records_path))
}

pub fn read_manifest(path: &Path) -> CliResult<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut patch = None;
    let mut count = None;
    let mut stats = (None, None, None);
    let mut fields: std::collections::BTreeMap<(usize, String), String> = Default::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "{}: line {lineno}: expected `key = value`",
                path.display()
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad =
            || CliError::Config(format!("{}: line {lineno}: bad value for {key}", path.display()));
        match key {
            "patch_size" => patch = Some(value.parse::<usize>().map_err(|_| bad())?),
            "count" => count = Some(value.parse::<usize>().map_err(|_| bad())?),
            "flow_p90" => stats.0 = Some(value.parse::<f32>().map_err(|_| bad())?),
            "flow_p95" => stats.1 = Some(value.parse::<f32>().map_err(|_| bad())?),
            "flow_max" => stats.2 = Some(value.parse::<f32>().map_err(|_| bad())?),
            _ => {
                let rest = key.strip_prefix("sample.").ok_or_else(|| {
                    CliError::Config(format!(
                        "{}: line {lineno}: unknown key `{key}`",
                        path.display()
                    ))
                })?;
                let (index, field) = rest.split_once('.').ok_or_else(|| {
                    CliError::Config(format!(
                        "{}: line {lineno}: malformed sample key `{key}`",
                        path.display()
                    ))
                })?;
                let index: usize = index.parse().map_err(|_| bad())?;
                fields.insert((index, field.to_string()), value.to_string());
            }
        }
    }
    let patch =
        patch.ok_or_else(|| CliError::Config(format!("{}: missing patch_size", path.display())))?;
    let count =
        count.ok_or_else(|| CliError::Config(format!("{}: missing count", path.display())))?;
    let mut entries = Vec::with_capacity(count);
    let grab = |fields: &std::collections::BTreeMap<(usize, String), String>,
                i: usize,
                f: &str|
     -> CliResult<String> {
        fields.get(&(i, f.to_string())).cloned().ok_or_else(|| {
            CliError::Config(format!("{}: sample {i} missing field {f}", path.display()))
        })
    };
    let mut last_offset: Option<u64> = None;
    for i in 0..count {
        let offset: u64 = grab(&fields, i, "offset")?
            .parse()
            .map_err(|_| CliError::Config(format!("sample {i}: bad offset")))?;
        if let Some(prev) = last_offset {
            if offset <= prev {
                return Err(CliError::Config(format!(
                    "{}: offsets not strictly increasing at sample {i}",
                    path.display()
                )));
            }
        }
        last_offset = Some(offset);
        entries.push(ManifestEntry {
            offset,
            mean_flow: grab(&fields, i, "mean_flow")?
                .parse()
                .map_err(|_| CliError::Config(format!("sample {i}: bad mean_flow")))?,
            source_id: grab(&fields, i, "source")?,
            frame_index: grab(&fields, i, "frame_index")?
                .parse()
                .map_err(|_| CliError::Config(format!("sample {i}: bad frame_index")))?,
        });
    }
    let flow_stats = match stats {
        (Some(p90), Some(p95), Some(max)) => FlowStats { p90, p95, max },
        _ => {
            let flows: Vec<f32> = entries.iter().map(|e| e.mean_flow).collect();
            flow_percentiles(&flows)?
        }
    };
    Ok(Manifest {
        patch,
        entries,
        flow_stats,
    })
}

/// On-disk dataset as a training sample source with on-the-fly augmentation.
pub struct DatasetReader {
    manifest: Manifest,
    records: PathBuf,
    crop: usize,
    max_shift: i32,
}

impl DatasetReader {
    pub fn open(prefix: &Path, crop: usize, max_shift: i32) -> CliResult<Self> {
        let (manifest_path, records_path) = dataset_paths(prefix);
        let manifest = read_manifest(&manifest_path)?;
        if !records_path.exists() {
            return Err(CliError::Io(format!(
                "{}: records file missing",
                records_path.display()
            )));
        }
        let expected = manifest
            .entries
            .last()
            .map(|e| e.offset + triplet_bytes(manifest.patch))
            .unwrap_or(0);
        let actual = std::fs::metadata(&records_path)
            .map_err(|e| CliError::io(&records_path, e))?
            .len();
        if actual < expected {
            return Err(CliError::Integrity(format!(
                "{}: records file is {actual} bytes, manifest expects {expected}",
                records_path.display()
            )));
        }
        Ok(Self {
            manifest,
            records: records_path,
            crop,
            max_shift,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn triplet(&self, index: usize) -> CliResult<TripletSample> {
        let entry = self.manifest.entries.get(index).ok_or_else(|| {
            CliError::Config(format!(
                "sample {index} out of range ({} samples)",
                self.manifest.entries.len()
            ))
        })?;
        let patch = self.manifest.patch;
        let bytes = triplet_bytes(patch) as usize;
        let mut raw = vec![0u8; bytes];
        let mut file = File::open(&self.records).map_err(|e| CliError::io(&self.records, e))?;
        file.seek(SeekFrom::Start(entry.offset))
            .map_err(|e| CliError::io(&self.records, e))?;
        file.read_exact(&mut raw)
            .map_err(|e| CliError::io(&self.records, e))?;
        let plane = patch * patch * 3;
        let mut images = raw.chunks_exact(4).map(|b| {
            f32::from_le_bytes(b.try_into().expect("4 bytes"))
        });
        let mut take_image = || -> CliResult<Tensor<f32>> {
            let data: Vec<f32> = images.by_ref().take(plane).collect();
            Tensor::new(&[patch, patch, 3], data).map_err(CliError::from)
        };
        Ok(TripletSample {
            first: take_image()?,
            middle: take_image()?,
            last: take_image()?,
            mean_flow: entry.mean_flow,
            source_id: entry.source_id.clone(),
            frame_index: entry.frame_index as usize,
        })
    }
}

impl SampleSource<f32> for DatasetReader {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn get(&self, index: usize, rng: &mut RandomStream) -> sepconv_core::Result<AugmentedPair<f32>> {
        let triplet = self
            .triplet(index)
            .map_err(|e| sepconv_core::Error::Parameter(e.to_string()))?;
        augment(&triplet, self.crop, self.max_shift, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sepconv_core::synth;

    fn tmpdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!("sepconv-dataset-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_and_reader() {
        let samples: Vec<TripletSample> = (0..3)
            .map(|i| synth::translating_triplet(100 + i, 150, (1, i as i32)).unwrap())
            .collect();
        let prefix = tmpdir().join("set");
        let (manifest_path, _) = write_dataset(&prefix, &samples).unwrap();
        let manifest = read_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.patch, 150);

        let reader = DatasetReader::open(&prefix, 128, 6).unwrap();
        let back = reader.triplet(1).unwrap();
        for (a, b) in samples[1].middle.data().iter().zip(back.middle.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut rng = RandomStream::new(1);
        let pair = reader.get(2, &mut rng).unwrap();
        assert_eq!(pair.first.shape(), &[128, 128, 3]);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let path = tmpdir().join("bad.manifest");
        std::fs::write(&path, "patch_size = 150\ncount = 0\nwhat = 1\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn manifest_requires_increasing_offsets() {
        let path = tmpdir().join("offsets.manifest");
        let text = "patch_size = 8\ncount = 2\n\
            sample.0.offset = 0\nsample.0.mean_flow = 1\nsample.0.source = a\nsample.0.frame_index = 0\n\
            sample.1.offset = 0\nsample.1.mean_flow = 1\nsample.1.source = a\nsample.1.frame_index = 1\n";
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_manifest(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn short_records_file_is_integrity_error() {
        let samples = vec![synth::translating_triplet(7, 150, (1, 0)).unwrap()];
        let prefix = tmpdir().join("short");
        let (_, records) = write_dataset(&prefix, &samples).unwrap();
        let bytes = std::fs::read(&records).unwrap();
        std::fs::write(&records, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            DatasetReader::open(&prefix, 128, 6),
            Err(CliError::Integrity(_))
        ));
    }
}
