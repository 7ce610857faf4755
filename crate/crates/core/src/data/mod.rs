//! Synthetic chest-film stand-in: images with planted findings, tag labels,
//! template reports, a small textbook corpus, and the on-disk layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! images/<id>.pgm   binary 8-bit graymaps
//! data.jsonl        {"id", "image", "tags": [indices], "report", ...}
//! textbook.txt      one sentence per line
//! tags.json         {"0": name, "1": name, ...}
//! manifest.json     seed, counts and tag histogram
//! ```

mod synth;
mod text;

pub use synth::{
    report_for, split_indices, synth_dataset, synth_textbook, tags_from_report, Shape, SynthSpec, TagInfo, TagKind,
    NO_FINDING, TAG_BANK,
};
pub use text::{detokenize, tokenize};

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::vision::ImageTensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub tags: Vec<bool>,
    pub report: String,
    /// Tight box `[row0, col0, row1, col1]` of the planted finding, in pixels.
    pub region_truth: Option<[usize; 4]>,
}

impl Sample {
    pub fn labels(&self) -> Vec<f64> {
        self.tags.iter().map(|&t| f64::from(t)).collect()
    }
}

/// Sample indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

impl Partition {
    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl Split {
    pub fn get(&self, part: Partition) -> &[usize] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    fn of(&self, index: usize) -> Partition {
        if self.val.contains(&index) {
            Partition::Val
        } else if self.test.contains(&index) {
            Partition::Test
        } else {
            Partition::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tag_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn n_tags(&self) -> usize {
        self.tag_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.samples.first().map_or(0, |s| s.image.height())
    }

    pub fn part(&self, part: Partition) -> impl Iterator<Item = &Sample> {
        self.split.get(part).iter().map(|&i| &self.samples[i])
    }

    /// Positive count per tag.
    pub fn tag_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_tags()];
        for s in &self.samples {
            for (c, &t) in h.iter_mut().zip(&s.tags) {
                *c += usize::from(t);
            }
        }
        h
    }

    /// Keeps only the listed samples, all assigned to every partition.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let all: Vec<usize> = (0..samples.len()).collect();
        Dataset {
            tag_names: self.tag_names.clone(),
            samples,
            split: Split {
                train: all.clone(),
                val: all.clone(),
                test: all,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(alias = "image_path")]
    image: String,
    tags: Vec<usize>,
    report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Partition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_truth: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub counts: BTreeMap<String, usize>,
    pub tag_histogram: Vec<usize>,
    pub textbook_sentences: usize,
}

impl Manifest {
    pub fn new(spec: &SynthSpec, ds: &Dataset, textbook: &[String]) -> Self {
        let counts = [
            ("samples", ds.samples.len()),
            ("train", ds.split.train.len()),
            ("val", ds.split.val.len()),
            ("test", ds.split.test.len()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            spec: spec.clone(),
            counts,
            tag_histogram: ds.tag_histogram(),
            textbook_sentences: textbook.len(),
        }
    }
}

pub fn write_pgm(path: &Path, image: &ImageTensor) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(&image.to_bytes(), image.width() as u32, image.height() as u32, ExtendedColorType::L8)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Loads any grayscale-convertible image, values scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = decoded.to_luma8();
    ImageTensor::from_bytes(gray.height() as usize, gray.width() as usize, gray.as_raw()).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable value")
}

/// Writes images, `data.jsonl`, `tags.json` and `textbook.txt` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset, textbook: &[String]) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut jsonl = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = format!("images/{}.pgm", s.id);
        write_pgm(&dir.join(&rel), &s.image)?;
        let rec = Record {
            id: s.id.clone(),
            image: rel,
            tags: s.tags.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect(),
            report: s.report.clone(),
            split: Some(ds.split.of(i)),
            region_truth: s.region_truth,
        };
        jsonl.push_str(&serde_json::to_string(&rec).expect("record"));
        jsonl.push('\n');
    }
    write_text(&dir.join("data.jsonl"), &jsonl)?;
    let names: BTreeMap<usize, &String> = ds.tag_names.iter().enumerate().collect();
    write_text(&dir.join("tags.json"), &to_json(&names))?;
    let mut book = textbook.join("\n");
    book.push('\n');
    write_text(&dir.join("textbook.txt"), &book)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DataError> {
    write_text(&dir.join("manifest.json"), &to_json(manifest))
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_tag_names(path: &Path) -> Result<Vec<String>, DataError> {
    let text = read_to_string(path)?;
    let fmt = |message: String| DataError::Format {
        path: path.to_path_buf(),
        message,
    };
    if let Ok(list) = serde_json::from_str::<Vec<String>>(&text) {
        return Ok(list);
    }
    let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))?;
    let mut indexed: Vec<(usize, String)> = map
        .into_iter()
        .map(|(k, v)| k.parse::<usize>().map(|i| (i, v)).map_err(|_| fmt(format!("tag key {k:?} is not an index"))))
        .collect::<Result<_, _>>()?;
    indexed.sort();
    if indexed.iter().enumerate().any(|(i, (k, _))| i != *k) {
        return Err(fmt("tag indices must be 0..n without gaps".into()));
    }
    Ok(indexed.into_iter().map(|(_, v)| v).collect())
}

/// Reads a dataset directory. Records without a `split` field are assigned a
/// 7:1:2 split derived from `split_seed`.
pub fn load_dataset(dir: &Path, split_seed: u64) -> Result<Dataset, DataError> {
    let tag_names = read_tag_names(&dir.join("tags.json"))?;
    let data_path = dir.join("data.jsonl");
    let text = read_to_string(&data_path)?;
    let mut samples = Vec::new();
    let mut parts = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Record = serde_json::from_str(line).map_err(|e| DataError::Format {
            path: data_path.clone(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        if let Some(&bad) = rec.tags.iter().find(|&&t| t >= tag_names.len()) {
            return Err(DataError::Format {
                path: data_path.clone(),
                message: format!("line {}: tag index {bad} out of range", lineno + 1),
            });
        }
        let image = read_image(&dir.join(&rec.image))?;
        let mut tags = vec![false; tag_names.len()];
        rec.tags.iter().for_each(|&t| tags[t] = true);
        parts.push(rec.split);
        samples.push(Sample {
            id: rec.id,
            image,
            tags,
            report: rec.report,
            region_truth: rec.region_truth,
        });
    }
    if samples.is_empty() {
        return Err(DataError::Format {
            path: data_path,
            message: "no records".into(),
        });
    }
    let size = (samples[0].image.height(), samples[0].image.width());
    if let Some(s) = samples.iter().find(|s| (s.image.height(), s.image.width()) != size) {
        return Err(DataError::Format {
            path: data_path,
            message: format!("image of {} differs in size from the first image", s.id),
        });
    }
    let split = if parts.iter().all(Option::is_some) {
        let mut split = Split::default();
        for (i, p) in parts.iter().enumerate() {
            match p.expect("checked") {
                Partition::Train => split.train.push(i),
                Partition::Val => split.val.push(i),
                Partition::Test => split.test.push(i),
            }
        }
        split
    } else {
        split_indices(samples.len(), split_seed)
    };
    Ok(Dataset {
        tag_names,
        samples,
        split,
    })
}

/// Non-empty lines of a textbook file.
pub fn read_textbook(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_preserves_quantised_dataset() {
        let spec = SynthSpec {
            n_samples: 12,
            seed: 3,
            abnormal_rate: 0.5,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec).unwrap();
        let book = synth_textbook(&spec);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, &book).unwrap();
        let back = load_dataset(dir.path(), 99).unwrap();
        assert_eq!(back.tag_names, ds.tag_names);
        assert_eq!(back.split, ds.split);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.image.to_bytes(), b.image.to_bytes());
            assert_eq!((&a.id, &a.tags, &a.report, a.region_truth), (&b.id, &b.tags, &b.report, b.region_truth));
        }
        assert_eq!(read_textbook(&dir.path().join("textbook.txt")).unwrap(), book);
        let raw = fs::read(dir.path().join("images/s00000.pgm")).unwrap();
        assert!(raw.starts_with(b"P5"));
    }

    #[test]
    fn user_records_without_split_use_image_path_alias() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("img")).unwrap();
        let mut lines = String::new();
        for i in 0..10 {
            write_pgm(&dir.path().join(format!("img/{i}.pgm")), &ImageTensor::filled(8, 8, 0.5)).unwrap();
            lines.push_str(&format!(
                "{{\"id\": \"u{i}\", \"image_path\": \"img/{i}.pgm\", \"tags\": [1], \"report\": \"ok.\"}}\n"
            ));
        }
        fs::write(dir.path().join("data.jsonl"), lines).unwrap();
        fs::write(dir.path().join("tags.json"), "[\"a\", \"b\"]").unwrap();
        let ds = load_dataset(dir.path(), 1).unwrap();
        assert_eq!(ds.samples.len(), 10);
        assert_eq!(ds.split.train.len() + ds.split.val.len() + ds.split.test.len(), 10);
        assert_eq!(ds.samples[3].tags, vec![false, true]);
    }

    #[test]
    fn corrupt_image_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(read_image(&p), Err(DataError::Decode { .. })));
        assert!(matches!(read_image(&dir.path().join("missing.pgm")), Err(DataError::Io { .. })));
    }
}
