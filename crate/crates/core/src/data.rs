//! Synthetic expression/AU data, its text file format, and the
//! subject-independent fold splitter.
//!
//! Each expression maps to a fixed multi-hot AU template. A sample's AU
//! labels are its expression's template with independent bit flips, and its
//! features are a seeded linear mixing of per-AU intensities plus a
//! per-subject offset and isotropic noise. With flips disabled the AU labels
//! are a deterministic function of the expression, which is what lets an
//! expression-trained backbone carry over to AU recognition.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses_metrics::BinaryMatrix;
use crate::seeds::{self, stream};

pub const DATA_HEADER: &str = "AUTRANSFER-DATA v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: u32,
    pub expression: Option<usize>,
    pub au_labels: Option<Vec<u8>>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_aus: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(input_dim: usize, num_aus: usize) -> Self {
        Dataset {
            input_dim,
            num_aus,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.expression.is_none() && sample.au_labels.is_none() {
            return Err(Error::contract("sample carries neither expression nor AU labels"));
        }
        if sample.features.len() != self.input_dim {
            return Err(Error::dim("dataset", &[self.input_dim], &[sample.features.len()]));
        }
        if let Some(au) = &sample.au_labels {
            if au.len() != self.num_aus || au.iter().any(|&b| b > 1) {
                return Err(Error::contract(format!(
                    "AU labels must be {} binary values",
                    self.num_aus
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn indices_of_subjects(&self, subjects: &BTreeSet<u32>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| subjects.contains(&self.samples[i].subject_id))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            input_dim: self.input_dim,
            num_aus: self.num_aus,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn features(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::contract("empty dataset has no feature matrix"));
        }
        let data = self
            .samples
            .iter()
            .flat_map(|s| s.features.iter().copied())
            .collect();
        Tensor::matrix(self.len(), self.input_dim, data)
    }

    pub fn expression_labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.expression
                    .ok_or_else(|| Error::contract(format!("sample {i} has no expression label")))
            })
            .collect()
    }

    pub fn au_matrix(&self) -> Result<BinaryMatrix> {
        let mut data = Vec::with_capacity(self.len() * self.num_aus);
        for (i, s) in self.samples.iter().enumerate() {
            let au = s
                .au_labels
                .as_ref()
                .ok_or_else(|| Error::contract(format!("sample {i} has no AU labels")))?;
            data.extend_from_slice(au);
        }
        BinaryMatrix::new(self.len(), self.num_aus, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub num_expressions: usize,
    pub num_aus: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub subject_offset_sigma: f64,
    pub au_flip_prob: f64,
    /// Expression priors are proportional to `exp(-skew · class)`; 0 is uniform.
    pub imbalance_skew: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_subjects: 40,
            samples_per_subject: 50,
            num_expressions: 6,
            num_aus: 12,
            input_dim: 64,
            noise_sigma: 0.3,
            subject_offset_sigma: 0.5,
            au_flip_prob: 0.05,
            imbalance_skew: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_subjects", self.num_subjects),
            ("samples_per_subject", self.samples_per_subject),
            ("num_expressions", self.num_expressions),
            ("num_aus", self.num_aus),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("subject_offset_sigma", self.subject_offset_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.au_flip_prob) {
            return Err(Error::contract("au_flip_prob must lie in [0, 1]"));
        }
        if !self.imbalance_skew.is_finite() {
            return Err(Error::contract("imbalance_skew must be finite"));
        }
        Ok(())
    }

    pub fn expression_priors(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.num_expressions)
            .map(|e| (-self.imbalance_skew * e as f64).exp())
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

/// Expression names for the default six-class set, in label order.
pub const EXPRESSIONS: [&str; 6] = ["neutral", "smile", "surprise", "squint", "disgust", "scream"];

/// FACS codes of the default twelve AU columns, in column order.
pub const AU_CODES: [u32; 12] = [1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26];

// Active AU columns per default expression. No non-empty template contains
// another, so every class is linearly separable in intensity space.
const DEFAULT_TEMPLATES: [&[usize]; 6] = [
    &[],
    &[3, 6, 10],
    &[0, 1, 10, 11],
    &[3, 4, 8],
    &[2, 5, 7, 9],
    &[2, 4, 5, 10, 11],
];

const TEMPLATE_SEED: u64 = 0x00FA_C5AC;

/// Multi-hot AU template for every expression class.
///
/// The 6×12 default is fixed; other sizes are drawn from a constant seed so
/// they do not vary between runs.
pub fn expression_templates(num_expressions: usize, num_aus: usize) -> Result<Vec<Vec<u8>>> {
    if num_expressions == EXPRESSIONS.len() && num_aus == AU_CODES.len() {
        return Ok(DEFAULT_TEMPLATES
            .iter()
            .map(|cols| {
                let mut t = vec![0u8; num_aus];
                cols.iter().for_each(|&j| t[j] = 1);
                t
            })
            .collect());
    }
    if num_aus < 64 && num_expressions as u128 > 1u128 << num_aus {
        return Err(Error::contract(format!(
            "{num_expressions} distinct templates do not fit in {num_aus} AUs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(num_expressions);
    let mut attempts = 0usize;
    while out.len() < num_expressions {
        attempts += 1;
        let t: Vec<u8> = if out.is_empty() {
            vec![0; num_aus]
        } else {
            (0..num_aus).map(|_| u8::from(rng.random_bool(0.35))).collect()
        };
        if seen.insert(t.clone()) {
            out.push(t);
        } else if attempts > 100_000 {
            return Err(Error::contract("could not draw distinct AU templates"));
        }
    }
    Ok(out)
}

pub fn generate_synthetic(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let templates = expression_templates(config.num_expressions, config.num_aus)?;
    let (d, a) = (config.input_dim, config.num_aus);

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seeds::rng(config.seed, stream::MIXING);
    let scale = 2.0 / (a as f64).sqrt();
    let mixing: Vec<f64> = (0..d * a).map(|_| std_normal.sample(&mut rng) * scale).collect();

    let mut rng = seeds::rng(config.seed, stream::SUBJECTS);
    let offsets: Vec<Vec<f64>> = (0..config.num_subjects)
        .map(|_| {
            (0..d)
                .map(|_| std_normal.sample(&mut rng) * config.subject_offset_sigma)
                .collect()
        })
        .collect();

    let priors = WeightedIndex::new(config.expression_priors())
        .map_err(|e| Error::contract(format!("expression priors: {e}")))?;
    let intensity = Uniform::new_inclusive(0.5, 1.0).expect("valid range");
    let mut rng = seeds::rng(config.seed, stream::SAMPLES);
    let mut ds = Dataset::new(d, a);
    for (subject, offset) in offsets.iter().enumerate() {
        for _ in 0..config.samples_per_subject {
            let expression = priors.sample(&mut rng);
            let labels: Vec<u8> = templates[expression]
                .iter()
                .map(|&bit| {
                    let flip = rng.random_bool(config.au_flip_prob);
                    bit ^ u8::from(flip)
                })
                .collect();
            let levels: Vec<f64> = labels
                .iter()
                .map(|&bit| {
                    let level = intensity.sample(&mut rng);
                    if bit == 1 {
                        level
                    } else {
                        0.0
                    }
                })
                .collect();
            let features = (0..d)
                .map(|r| {
                    let mixed: f64 = mixing[r * a..(r + 1) * a]
                        .iter()
                        .zip(&levels)
                        .map(|(m, l)| m * l)
                        .sum();
                    mixed + offset[r] + std_normal.sample(&mut rng) * config.noise_sigma
                })
                .collect();
            ds.push(Sample {
                subject_id: subject as u32,
                expression: Some(expression),
                au_labels: Some(labels),
                features,
            })?;
        }
    }
    Ok(ds)
}

/// Renders a dataset in the line-oriented text format.
pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = format!("{DATA_HEADER},{},{}\n", ds.input_dim, ds.num_aus);
    for s in &ds.samples {
        let expr = s.expression.map_or(-1, |e| e as i64);
        let _ = write!(out, "{},{}", s.subject_id, expr);
        match &s.au_labels {
            Some(au) => au.iter().for_each(|b| {
                let _ = write!(out, ",{b}");
            }),
            None => (0..ds.num_aus).for_each(|_| out.push_str(",-1")),
        }
        for v in &s.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let bad_header = || Error::Parse {
        line: 1,
        msg: format!("expected `{DATA_HEADER},<input_dim>,<num_aus>`"),
    };
    let mut parts = header.split(',').map(str::trim);
    if parts.next() != Some(DATA_HEADER) {
        return Err(bad_header());
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(bad_header)
    };
    let (input_dim, num_aus) = (dim()?, dim()?);
    if parts.next().is_some() {
        return Err(bad_header());
    }

    let mut ds = Dataset::new(input_dim, num_aus);
    for (line, body) in lines {
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        let want = 2 + num_aus + input_dim;
        if fields.len() != want {
            return Err(Error::Format(format!(
                "line {line}: expected {want} fields for input_dim {input_dim} and {num_aus} AUs, found {}",
                fields.len()
            )));
        }
        let perr = |msg: String| Error::Parse { line, msg };
        let subject_id = fields[0]
            .parse::<u32>()
            .map_err(|_| perr(format!("bad subject id `{}`", fields[0])))?;
        let expression = match fields[1].parse::<i64>() {
            Ok(-1) => None,
            Ok(e) if e >= 0 => Some(e as usize),
            _ => return Err(perr(format!("bad expression `{}`", fields[1]))),
        };
        let au_fields = &fields[2..2 + num_aus];
        let au_labels = if au_fields.iter().all(|f| *f == "-1") {
            None
        } else {
            Some(
                au_fields
                    .iter()
                    .map(|f| match *f {
                        "0" => Ok(0),
                        "1" => Ok(1),
                        other => Err(perr(format!("bad AU label `{other}`"))),
                    })
                    .collect::<Result<Vec<u8>>>()?,
            )
        };
        let features = fields[2 + num_aus..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(format!("bad feature value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        ds.push(Sample {
            subject_id,
            expression,
            au_labels,
            features,
        })
        .map_err(|e| perr(e.to_string()))?;
    }
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_dataset(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

/// Subject-disjoint folds with per-fold sample index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    /// Subject ids held out by each fold.
    pub folds: Vec<Vec<u32>>,
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

/// Shuffles the distinct subjects and deals them round-robin into `k` folds.
pub fn split_subject_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    let mut subjects = ds.subjects();
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {k}")));
    }
    if subjects.len() < k {
        return Err(Error::contract(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut seeds::rng(seed, stream::FOLDS));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in subjects.into_iter().enumerate() {
        folds[i % k].push(s);
    }

    let mut train = Vec::with_capacity(k);
    let mut validation = Vec::with_capacity(k);
    for fold in &folds {
        let held: BTreeSet<u32> = fold.iter().copied().collect();
        let (val, tr): (Vec<usize>, Vec<usize>) =
            (0..ds.len()).partition(|&i| held.contains(&ds.samples[i].subject_id));
        validation.push(val);
        train.push(tr);
    }
    Ok(FoldSplit {
        folds,
        train,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(num_subjects: usize, per: usize) -> GenConfig {
        GenConfig {
            num_subjects,
            samples_per_subject: per,
            input_dim: 8,
            seed: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_templates_are_distinct_antichain() {
        let t = expression_templates(6, 12).unwrap();
        let sets: Vec<BTreeSet<usize>> = t
            .iter()
            .map(|r| (0..12).filter(|&j| r[j] == 1).collect())
            .collect();
        for i in 0..6 {
            for j in 0..6 {
                if i != j && !sets[i].is_empty() {
                    assert!(!sets[i].is_subset(&sets[j]), "{i} ⊆ {j}");
                }
            }
        }
        // every AU column is used by some expression
        assert!((0..12).all(|j| t.iter().any(|r| r[j] == 1)));
    }

    #[test]
    fn generic_templates_are_distinct_and_fixed() {
        let a = expression_templates(5, 7).unwrap();
        assert_eq!(a, expression_templates(5, 7).unwrap());
        let set: BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 5);
        assert!(expression_templates(5, 2).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let c = tiny(4, 6);
        let a = generate_synthetic(&c).unwrap();
        assert_eq!(a, generate_synthetic(&c).unwrap());
        assert_eq!(a.len(), 24);
        assert_eq!(a.subjects(), vec![0, 1, 2, 3]);
        let other = generate_synthetic(&GenConfig { seed: 6, ..c }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_flip_labels_follow_templates() {
        let c = GenConfig {
            au_flip_prob: 0.0,
            ..tiny(3, 20)
        };
        let ds = generate_synthetic(&c).unwrap();
        let t = expression_templates(6, 12).unwrap();
        for s in &ds.samples {
            assert_eq!(s.au_labels.as_ref().unwrap(), &t[s.expression.unwrap()]);
        }
    }

    #[test]
    fn gen_config_validation() {
        assert!(GenConfig { num_subjects: 0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { noise_sigma: -0.1, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { au_flip_prob: 1.5, ..GenConfig::default() }.validate().is_err());
        let p = GenConfig { imbalance_skew: 0.0, ..GenConfig::default() }.expression_priors();
        assert!(p.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn hand_written_file_parses() {
        let text = "AUTRANSFER-DATA v1,2,3\n\
                    4,2,1,0,1,0.5,-1.25\n\
                    7,-1,0,0,1,3,1e-3\n";
        let ds = parse_dataset(text).unwrap();
        assert_eq!(
            ds.samples,
            vec![
                Sample {
                    subject_id: 4,
                    expression: Some(2),
                    au_labels: Some(vec![1, 0, 1]),
                    features: vec![0.5, -1.25],
                },
                Sample {
                    subject_id: 7,
                    expression: None,
                    au_labels: Some(vec![0, 0, 1]),
                    features: vec![3.0, 0.001],
                },
            ]
        );
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let ds = parse_dataset("AUTRANSFER-DATA v1,4,12\n").unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.input_dim, ds.num_aus), (4, 12));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad = "AUTRANSFER-DATA v1,2,1\n1,0,1,0.5,0.5\n1,0,2,0.5,0.5\n";
        match parse_dataset(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let wide = "AUTRANSFER-DATA v1,2,1\n1,0,1,0.5,0.5,0.5\n";
        assert!(matches!(parse_dataset(wide), Err(Error::Format(_))));
        let unlabeled = "AUTRANSFER-DATA v1,1,1\n1,-1,-1,0.5\n";
        assert!(matches!(parse_dataset(unlabeled), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_dataset("nope\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_dataset(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ten_subjects_five_folds() {
        let ds = generate_synthetic(&tiny(10, 3)).unwrap();
        let split = split_subject_folds(&ds, 5, 1).unwrap();
        assert!(split.folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = split.validation.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn seven_subjects_deal_two_two_one_one_one() {
        let ds = generate_synthetic(&tiny(7, 2)).unwrap();
        let split = split_subject_folds(&ds, 5, 3).unwrap();
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn too_few_subjects_is_contract_error() {
        let ds = generate_synthetic(&tiny(3, 2)).unwrap();
        assert!(matches!(split_subject_folds(&ds, 5, 0), Err(Error::Contract(_))));
        assert!(matches!(split_subject_folds(&ds, 1, 0), Err(Error::Contract(_))));
    }
}
