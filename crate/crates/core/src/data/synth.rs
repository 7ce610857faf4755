use serde::{Deserialize, Serialize};

use super::{detokenize, tokenize, DataError, Dataset, Sample, Split};
use crate::tensor::SeededRng;
use crate::vision::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Ring,
    HBar,
    VBar,
    Checker,
    Cross,
    Frame,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    /// Global brightness band; `true` is the bright band.
    Exposure(bool),
    /// Global noise band; `true` is the quiet band.
    Texture(bool),
    Finding(Shape),
}

#[derive(Debug, Clone, Copy)]
pub struct TagInfo {
    pub name: &'static str,
    pub sentence: &'static str,
    pub kind: TagKind,
}

const fn finding(name: &'static str, sentence: &'static str, shape: Shape) -> TagInfo {
    TagInfo {
        name,
        sentence,
        kind: TagKind::Finding(shape),
    }
}

/// Tags in report order: four global properties, then eight localized shapes.
pub const TAG_BANK: [TagInfo; 12] = [
    TagInfo {
        name: "normal exposure",
        sentence: "the film shows normal exposure.",
        kind: TagKind::Exposure(true),
    },
    TagInfo {
        name: "low exposure",
        sentence: "the film shows low exposure.",
        kind: TagKind::Exposure(false),
    },
    TagInfo {
        name: "clear texture",
        sentence: "the lung fields have a clear texture.",
        kind: TagKind::Texture(true),
    },
    TagInfo {
        name: "grainy texture",
        sentence: "the lung fields have a grainy texture.",
        kind: TagKind::Texture(false),
    },
    finding("nodule", "a nodule is seen.", Shape::Disk),
    finding("cavity", "a cavity is seen.", Shape::Ring),
    finding("plate atelectasis", "a plate atelectasis is seen.", Shape::HBar),
    finding("fissural thickening", "a fissural thickening is seen.", Shape::VBar),
    finding("reticular pattern", "a reticular pattern is seen.", Shape::Checker),
    finding("stellate lesion", "a stellate lesion is seen.", Shape::Cross),
    finding("cystic lesion", "a cystic lesion is seen.", Shape::Frame),
    finding("linear scar", "a linear scar is seen.", Shape::Diagonal),
];

pub const NO_FINDING: &str = "no focal abnormality is seen.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_tags: usize,
    pub n_samples: usize,
    /// Probability that a sample carries an abnormal finding.
    pub abnormal_rate: f64,
    /// Guaranteed gap between mean intensity inside a planted disk's box and
    /// the rest of the image.
    pub contrast_margin: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_tags: 12,
            n_samples: 286,
            abnormal_rate: 0.3,
            contrast_margin: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_samples < 10 {
            return Err(DataError::Config(format!("n_samples must be at least 10, got {}", self.n_samples)));
        }
        if !(2..=TAG_BANK.len()).contains(&self.n_tags) {
            return Err(DataError::Config(format!("n_tags must lie in 2..={}, got {}", TAG_BANK.len(), self.n_tags)));
        }
        if !(0.0..=1.0).contains(&self.abnormal_rate) {
            return Err(DataError::Config(format!("abnormal_rate must lie in [0, 1], got {}", self.abnormal_rate)));
        }
        if self.image_size < 32 {
            return Err(DataError::Config(format!("image_size must be at least 32, got {}", self.image_size)));
        }
        if !(0.0..=0.4).contains(&self.contrast_margin) {
            return Err(DataError::Config(format!("contrast_margin must lie in [0, 0.4], got {}", self.contrast_margin)));
        }
        Ok(())
    }

    pub fn tags(&self) -> &'static [TagInfo] {
        &TAG_BANK[..self.n_tags]
    }

    fn delta(&self) -> f64 {
        // a disk covers about π/4 of its box
        self.contrast_margin / 0.6
    }
}

/// Report text for a tag vector: template sentences in tag order, plus the
/// no-finding sentence when no abnormal tag is set.
pub fn report_for(tags: &[bool]) -> String {
    let mut sentences: Vec<&str> = tags
        .iter()
        .zip(TAG_BANK.iter())
        .filter(|(&on, _)| on)
        .map(|(_, t)| t.sentence)
        .collect();
    let abnormal = tags
        .iter()
        .zip(TAG_BANK.iter())
        .any(|(&on, t)| on && matches!(t.kind, TagKind::Finding(_)));
    if !abnormal {
        sentences.push(NO_FINDING);
    }
    sentences.join(" ")
}

/// Inverse of [`report_for`]: tags whose template sentence occurs in `report`.
pub fn tags_from_report(report: &str, n_tags: usize) -> Vec<bool> {
    let norm = detokenize(&tokenize(report));
    TAG_BANK[..n_tags].iter().map(|t| norm.contains(t.sentence)).collect()
}

fn paint(shape: Shape, size: usize, rng: &mut SeededRng) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 2.0;
    let band = size as f64 / 6.0;
    let flip = rng.bernoulli(0.5);
    (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64, (p % size) as f64);
            let d = ((y - c).powi(2) + (x - c).powi(2)).sqrt();
            match shape {
                Shape::Disk => d <= r,
                Shape::Ring => d <= r && d >= 0.55 * r,
                Shape::HBar => (y - c).abs() <= band,
                Shape::VBar => (x - c).abs() <= band,
                Shape::Checker => ((p / size) / 3 + (p % size) / 3).is_multiple_of(2),
                Shape::Cross => (y - c).abs() <= band / 2.0 + 0.5 || (x - c).abs() <= band / 2.0 + 0.5,
                Shape::Frame => (y - c).abs().max((x - c).abs()) >= c - 2.0,
                Shape::Diagonal => {
                    let off = if flip { y - x } else { y + x - 2.0 * c };
                    off.abs() <= band
                }
            }
        })
        .collect()
}

fn render(spec: &SynthSpec, tags: &[bool], rng: &mut SeededRng) -> (ImageTensor, Option<[usize; 4]>) {
    let n = spec.image_size;
    let mut base = 0.45;
    let mut sigma = 0.045;
    for (on, info) in tags.iter().zip(spec.tags()) {
        match (info.kind, on) {
            (TagKind::Exposure(true), true) => base = rng.range(0.5, 0.6),
            (TagKind::Exposure(false), true) => base = rng.range(0.22, 0.32),
            (TagKind::Texture(true), true) => sigma = rng.range(0.015, 0.025),
            (TagKind::Texture(false), true) => sigma = rng.range(0.06, 0.08),
            _ => {}
        }
    }
    let mut values: Vec<f64> = (0..n * n).map(|_| base + sigma * rng.normal()).collect();
    let finding = tags.iter().zip(spec.tags()).find_map(|(&on, info)| match info.kind {
        TagKind::Finding(shape) if on => Some(shape),
        _ => None,
    });
    let mut truth = None;
    if let Some(shape) = finding {
        let scale = n as f64 / 64.0;
        let size = ((rng.range(10.0, 17.0) * scale) as usize).max(4);
        let margin = (6.0 * scale) as usize;
        let col = rng.index(margin, n - margin - size + 1);
        let row = rng.index(margin, n - margin - size + 1);
        let mask = paint(shape, size, rng);
        let delta = spec.delta();
        let (mut r0, mut c0, mut r1, mut c1) = (n, n, 0, 0);
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (y, x) = (row + p / size, col + p % size);
            values[y * n + x] += delta;
            r0 = r0.min(y);
            c0 = c0.min(x);
            r1 = r1.max(y);
            c1 = c1.max(x);
        }
        truth = Some([r0, c0, r1, c1]);
    }
    (ImageTensor::new(n, n, values).expect("square image"), truth)
}

fn draw_tags(spec: &SynthSpec, rng: &mut SeededRng) -> Vec<bool> {
    let mut tags = vec![false; spec.n_tags];
    let bright = rng.bernoulli(0.6);
    let quiet = rng.bernoulli(0.6);
    for (i, info) in spec.tags().iter().enumerate() {
        tags[i] = match info.kind {
            TagKind::Exposure(b) => b == bright,
            TagKind::Texture(q) => q == quiet,
            TagKind::Finding(_) => false,
        };
    }
    let abnormal: Vec<usize> = (0..spec.n_tags)
        .filter(|&i| matches!(TAG_BANK[i].kind, TagKind::Finding(_)))
        .collect();
    if !abnormal.is_empty() && rng.bernoulli(spec.abnormal_rate) {
        tags[abnormal[rng.index(0, abnormal.len())]] = true;
    }
    tags
}

/// Deterministic 7:1:2 split of `n` indices.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derive(seed, 0x5911).shuffle(&mut order);
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).max(1).min(n - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = SeededRng::derive(spec.seed, i as u64);
            let tags = draw_tags(spec, &mut rng);
            let (image, region_truth) = render(spec, &tags, &mut rng);
            Sample {
                id: format!("s{i:05}"),
                image,
                report: report_for(&tags),
                tags,
                region_truth,
            }
        })
        .collect();
    Ok(Dataset {
        tag_names: spec.tags().iter().map(|t| t.name.to_string()).collect(),
        samples,
        split: split_indices(spec.n_samples, spec.seed),
    })
}

fn describe(kind: TagKind) -> &'static str {
    match kind {
        TagKind::Exposure(true) => "an evenly bright film",
        TagKind::Exposure(false) => "a uniformly dark film",
        TagKind::Texture(true) => "a smooth quiet background",
        TagKind::Texture(false) => "a noisy speckled background",
        TagKind::Finding(Shape::Disk) => "a round bright spot",
        TagKind::Finding(Shape::Ring) => "a bright ring around a darker centre",
        TagKind::Finding(Shape::HBar) => "a horizontal bright band",
        TagKind::Finding(Shape::VBar) => "a vertical bright band",
        TagKind::Finding(Shape::Checker) => "a grid of small bright squares",
        TagKind::Finding(Shape::Cross) => "two bright bands crossing at right angles",
        TagKind::Finding(Shape::Frame) => "a bright square outline",
        TagKind::Finding(Shape::Diagonal) => "a slanted bright band",
    }
}

/// Sentences about every tag: its report template plus descriptive
/// variations, shuffled with the spec seed.
pub fn synth_textbook(spec: &SynthSpec) -> Vec<String> {
    let mut lines = Vec::new();
    for info in spec.tags() {
        let (n, d) = (info.name, describe(info.kind));
        lines.push(info.sentence.to_string());
        match info.kind {
            TagKind::Finding(_) => {
                lines.push(format!("a {n} appears as {d}."));
                lines.push(format!("the {n} is a focal finding in the lung."));
                lines.push(format!("when a {n} is present the report mentions it."));
                lines.push(format!("a {n} should be compared with prior films."));
                lines.push(format!("radiologists describe a {n} in the findings."));
            }
            _ => {
                lines.push(format!("{n} means the film has {d}."));
                lines.push(format!("a film with {n} shows {d}."));
                lines.push(format!("{n} is a global property of the film."));
                lines.push(format!("the report states {n} when it is observed."));
                lines.push(format!("{n} does not point to a focal lesion."));
            }
        }
    }
    for _ in 0..3 {
        lines.push(NO_FINDING.to_string());
    }
    SeededRng::derive(spec.seed, 0x7e47).shuffle(&mut lines);
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(n: usize, rate: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_samples: n,
            abnormal_rate: rate,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn too_few_samples_is_a_config_error() {
        assert!(matches!(synth_dataset(&spec(9, 0.3, 1)), Err(DataError::Config(_))));
    }

    #[test]
    fn zero_rate_has_only_normal_sentences() {
        let ds = synth_dataset(&spec(40, 0.0, 2)).unwrap();
        for s in &ds.samples {
            assert!(s.report.ends_with(NO_FINDING));
            assert!(s.region_truth.is_none());
            assert!(s.tags[4..].iter().all(|&t| !t));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_dataset(&spec(30, 0.5, 3)).unwrap();
        let b = synth_dataset(&spec(30, 0.5, 3)).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&spec(30, 0.5, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let s = split_indices(286, 5);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (200, 29, 57));
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        assert_eq!(all.len(), 286);
    }

    #[test]
    fn disk_box_is_brighter_by_margin() {
        let sp = spec(200, 1.0, 6);
        let ds = synth_dataset(&sp).unwrap();
        let mut checked = 0;
        for s in ds.samples.iter().filter(|s| s.tags[4]) {
            let [r0, c0, r1, c1] = s.region_truth.unwrap();
            let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if (r0..=r1).contains(&y) && (c0..=c1).contains(&x) {
                        inside += s.image.get(y, x);
                        n_in += 1;
                    } else {
                        outside += s.image.get(y, x);
                        n_out += 1;
                    }
                }
            }
            assert!(inside / n_in as f64 - outside / n_out as f64 >= sp.contrast_margin);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn findings_keep_clear_of_the_border() {
        let ds = synth_dataset(&spec(100, 1.0, 7)).unwrap();
        for s in &ds.samples {
            let [r0, c0, r1, c1] = s.region_truth.unwrap();
            assert!(r0 >= 6 && c0 >= 6 && r1 < 58 && c1 < 58, "{:?}", s.region_truth);
        }
    }

    #[test]
    fn reports_recover_tags() {
        let ds = synth_dataset(&spec(60, 0.5, 8)).unwrap();
        for s in &ds.samples {
            assert_eq!(tags_from_report(&s.report, 12), s.tags);
        }
    }

    #[test]
    fn normal_positives_dominate() {
        let ds = synth_dataset(&spec(286, 0.3, 9)).unwrap();
        let normal: usize = ds.samples.iter().map(|s| s.tags[..4].iter().filter(|&&t| t).count()).sum();
        let abnormal: usize = ds.samples.iter().map(|s| s.tags[4..].iter().filter(|&&t| t).count()).sum();
        assert!(normal >= 3 * abnormal, "{normal} vs {abnormal}");
    }

    #[test]
    fn textbook_contracts() {
        let sp = SynthSpec::default();
        let book = synth_textbook(&sp);
        for t in sp.tags() {
            let distinct: BTreeSet<&String> = book.iter().filter(|l| l.contains(t.name)).collect();
            assert!(distinct.len() >= 5, "{}", t.name);
        }
        assert!(book.iter().all(|l| tokenize(l).len() + 2 <= 300));
        let book_vocab: BTreeSet<String> = book.iter().flat_map(|l| tokenize(l)).collect();
        let ds = synth_dataset(&spec(100, 0.5, 10)).unwrap();
        for s in &ds.samples {
            for tok in tokenize(&s.report) {
                assert!(book_vocab.contains(&tok), "{tok}");
            }
        }
    }

    #[test]
    fn templates_round_trip_through_tokenizer() {
        for t in TAG_BANK {
            assert_eq!(detokenize(&tokenize(t.sentence)), t.sentence);
        }
        assert_eq!(detokenize(&tokenize(NO_FINDING)), NO_FINDING);
    }
}
