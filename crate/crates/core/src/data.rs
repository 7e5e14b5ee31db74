//! Synthetic datasets, label noise, clean subsets and the `.rlab` text format.
//!
//! Labels are stored as class indices `0..C`. The binary theory path maps
//! class 1 to `+1` and class 0 to `-1` (see [`signed_label`]).

use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Norm slack tolerated before an input is rescaled into the unit ball.
const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    CleanSubset,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::CleanSubset => "clean_subset",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "clean_subset" => Ok(SplitTag::CleanSubset),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// `+1` for class 1, `-1` for class 0.
pub fn signed_label(class: usize) -> f64 {
    if class == 1 {
        1.0
    } else {
        -1.0
    }
}

pub fn class_from_signed(y: f64) -> usize {
    usize::from(y > 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub ids: Vec<u64>,
    pub x: Vec<Vec<f64>>,
    pub observed: Vec<usize>,
    /// Latent true labels.
    pub clean: Vec<usize>,
    /// `true` iff the observed label differs from the latent one.
    pub noise_mask: Vec<bool>,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl ExampleSet {
    /// Builds a set, deriving the noise mask and rescaling any input whose
    /// norm exceeds one.
    pub fn new(
        ids: Vec<u64>,
        mut x: Vec<Vec<f64>>,
        observed: Vec<usize>,
        clean: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        let n = ids.len();
        for (what, len) in [("inputs", x.len()), ("observed labels", observed.len()), ("clean labels", clean.len())] {
            if len != n {
                return Err(Error::Dimension { what, expected: n, got: len });
            }
        }
        if num_classes == 0 {
            return Err(Error::config("number of classes must be positive"));
        }
        if let Some(bad) = observed.iter().chain(&clean).find(|&&c| c >= num_classes) {
            return Err(Error::config(format!("label {bad} outside 0..{num_classes}")));
        }
        if let Some(first) = x.first() {
            let d = first.len();
            if let Some(row) = x.iter().find(|r| r.len() != d) {
                return Err(Error::Dimension { what: "feature row", expected: d, got: row.len() });
            }
        }
        for (id, row) in ids.iter().zip(x.iter_mut()) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 + NORM_SLACK {
                log::warn!("example {id}: input norm {norm:.6} exceeds 1, rescaling");
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let noise_mask = observed.iter().zip(&clean).map(|(o, c)| o != c).collect();
        Ok(ExampleSet { ids, x, observed, clean, noise_mask, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn signed_observed(&self) -> Vec<f64> {
        self.observed.iter().map(|&c| signed_label(c)).collect()
    }

    pub fn signed_clean(&self) -> Vec<f64> {
        self.clean.iter().map(|&c| signed_label(c)).collect()
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.noise_mask.iter().filter(|m| **m).count() as f64 / self.len() as f64
    }

    pub fn observed_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.observed {
            counts[c] += 1;
        }
        counts
    }

    /// Examples at `indices`, in that order, tagged `split`.
    pub fn select(&self, indices: &[usize], split: SplitTag) -> ExampleSet {
        ExampleSet {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            observed: indices.iter().map(|&i| self.observed[i]).collect(),
            clean: indices.iter().map(|&i| self.clean[i]).collect(),
            noise_mask: indices.iter().map(|&i| self.noise_mask[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Clean-subset precondition: no noisy labels and equal class counts.
    pub fn check_balanced_clean(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyCleanSet);
        }
        if self.noise_mask.iter().any(|m| *m) {
            return Err(Error::Imbalanced("clean subset contains noisy labels".into()));
        }
        let counts = self.observed_class_counts();
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass { class });
        }
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(Error::Imbalanced(format!("class counts {counts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Symmetric { rate: f64 },
    Asymmetric { rate: f64, class_map: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { kind: NoiseKind::None, seed: 0 }
    }

    pub fn rate(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Symmetric { rate } | NoiseKind::Asymmetric { rate, .. } => rate,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        let rate = self.rate();
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("noise rate {rate} outside [0, 1)")));
        }
        match &self.kind {
            NoiseKind::Symmetric { .. } if num_classes < 2 && rate > 0.0 => {
                Err(Error::config("symmetric noise needs at least two classes"))
            }
            NoiseKind::Asymmetric { class_map, .. } => {
                if class_map.len() != num_classes {
                    return Err(Error::config(format!(
                        "class map has {} entries for {num_classes} classes",
                        class_map.len()
                    )));
                }
                if let Some(bad) = class_map.iter().find(|&&c| c >= num_classes) {
                    return Err(Error::config(format!("class map target {bad} out of range")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn header_value(&self) -> String {
        match &self.kind {
            NoiseKind::None => "none".to_string(),
            NoiseKind::Symmetric { rate } => format!("symmetric {rate}"),
            NoiseKind::Asymmetric { rate, class_map } => {
                let map: Vec<String> = class_map.iter().map(usize::to_string).collect();
                format!("asymmetric {rate} {}", map.join(","))
            }
        }
    }

    fn parse_header(value: &str, seed: u64, line: usize) -> Result<Self> {
        let parts: Vec<&str> = value.split_whitespace().collect();
        let parse_rate =
            |s: &str| s.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("noise rate `{s}`: {e}") });
        let kind = match parts.as_slice() {
            ["none"] => NoiseKind::None,
            ["symmetric", rate] => NoiseKind::Symmetric { rate: parse_rate(rate)? },
            ["asymmetric", rate, map] => NoiseKind::Asymmetric {
                rate: parse_rate(rate)?,
                class_map: map
                    .split(',')
                    .map(|c| {
                        c.parse::<usize>().map_err(|e| Error::Parse { line, msg: format!("class map `{c}`: {e}") })
                    })
                    .collect::<Result<_>>()?,
            },
            _ => return Err(Error::Parse { line, msg: format!("bad noise spec `{value}`") }),
        };
        Ok(NoiseSpec { kind, seed })
    }
}

/// Gaussian clusters around the vertices of a regular simplex centered at
/// the origin, with pairwise vertex distance `separation` and isotropic
/// noise of unit expected radius. Each example is labeled by its nearest
/// vertex, and the whole set is scaled by one common factor so every input
/// lies in the unit ball.
pub fn gen_clusters(n: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Result<ExampleSet> {
    if classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config(format!("separation must be positive, got {separation}")));
    }
    if classes > dim {
        return Err(Error::config(format!(
            "infeasible packing: a {classes}-vertex simplex does not fit in dimension {dim}"
        )));
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            for (k, v) in m.iter_mut().enumerate().take(classes) {
                *v = scale * (f64::from(u8::from(k == c)) - 1.0 / classes as f64);
            }
            m
        })
        .collect();
    let noise = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
    let mut rng = seed::rng(seed);
    let mut x = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // round-robin centers keep the classes balanced up to boundary flips
        let c = i % classes;
        let point: Vec<f64> = means[c].iter().map(|m| m + noise.sample(&mut rng)).collect();
        let nearest = means
            .iter()
            .enumerate()
            .map(|(k, m)| (k, m.iter().zip(&point).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("at least two classes");
        labels.push(nearest);
        x.push(point);
    }
    let max_norm = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    if max_norm > 1.0 {
        for row in &mut x {
            row.iter_mut().for_each(|v| *v /= max_norm);
        }
    }
    ExampleSet::new((0..n as u64).collect(), x, labels.clone(), labels, classes, SplitTag::Train)
}

/// Replaces observed labels by corrupted copies of the latent labels.
pub fn inject_noise(set: &ExampleSet, spec: &NoiseSpec) -> Result<ExampleSet> {
    spec.validate(set.num_classes)?;
    let mut rng = seed::rng(spec.seed);
    let c = set.num_classes;
    let observed: Vec<usize> = set
        .clean
        .iter()
        .map(|&y| match &spec.kind {
            NoiseKind::None => y,
            NoiseKind::Symmetric { rate } => {
                if rng.random::<f64>() < *rate {
                    let k = rng.random_range(0..c - 1);
                    if k >= y {
                        k + 1
                    } else {
                        k
                    }
                } else {
                    y
                }
            }
            NoiseKind::Asymmetric { rate, class_map } => {
                if rng.random::<f64>() < *rate {
                    class_map[y]
                } else {
                    y
                }
            }
        })
        .collect();
    ExampleSet::new(set.ids.clone(), set.x.clone(), observed, set.clean.clone(), c, set.split)
}

/// Draws a balanced clean subset of size `m` (exactly `m / C` per class)
/// from unflipped examples; returns `(clean_subset, remaining_train)`.
pub fn take_clean_subset(set: &ExampleSet, m: usize, seed: u64) -> Result<(ExampleSet, ExampleSet)> {
    let c = set.num_classes;
    if m == 0 {
        return Err(Error::EmptyCleanSet);
    }
    if !m.is_multiple_of(c) {
        return Err(Error::config(format!("clean subset size {m} is not divisible by {c} classes")));
    }
    let per_class = m / c;
    let mut rng = seed::rng(seed);
    let mut chosen = Vec::with_capacity(m);
    for class in 0..c {
        let mut candidates: Vec<usize> = (0..set.len())
            .filter(|&i| !set.noise_mask[i] && set.clean[i] == class && set.observed[i] == class)
            .collect();
        if candidates.len() < per_class {
            return Err(Error::InsufficientClean { class, needed: per_class, available: candidates.len() });
        }
        candidates.shuffle(&mut rng);
        chosen.extend_from_slice(&candidates[..per_class]);
    }
    chosen.sort_unstable();
    let mut taken = vec![false; set.len()];
    for &i in &chosen {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..set.len()).filter(|&i| !taken[i]).collect();
    Ok((set.select(&chosen, SplitTag::CleanSubset), set.select(&rest, SplitTag::Train)))
}

/// A collection of splits sharing class count, dimension and noise spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim: usize,
    pub noise: NoiseSpec,
    pub splits: Vec<ExampleSet>,
}

const MAGIC: &str = "rlab 1";

struct Lines<R: BufRead> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self, expect: &str) -> Result<(usize, String)> {
        self.line += 1;
        match self.inner.next() {
            Some(line) => Ok((self.line, line?)),
            None => Err(Error::Parse { line: self.line, msg: format!("unexpected end of file, expected {expect}") }),
        }
    }

    fn header(&mut self, key: &str) -> Result<(usize, String)> {
        let (no, line) = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((no, v.to_string())),
            _ => Err(Error::Parse { line: no, msg: format!("expected header `{key}`, found `{line}`") }),
        }
    }
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> Option<&ExampleSet> {
        self.splits.iter().find(|s| s.split == tag)
    }

    pub fn total_len(&self) -> usize {
        self.splits.iter().map(ExampleSet::len).sum()
    }

    /// Serializes to the `.rlab` text format. Floats use the shortest
    /// representation that parses back to the same value, so a
    /// read/write cycle reproduces the bytes exactly.
    pub fn to_rlab_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "n {}", self.total_len());
        let _ = writeln!(out, "d {}", self.dim);
        let _ = writeln!(out, "classes {}", self.num_classes);
        let _ = writeln!(out, "noise {}", self.noise.header_value());
        let _ = writeln!(out, "noise_seed {}", self.noise.seed);
        let mut columns = String::from("columns id label_observed label_clean noise_flag");
        for k in 0..self.dim {
            let _ = write!(columns, " x{k}");
        }
        let _ = writeln!(out, "{columns}");
        for split in &self.splits {
            let _ = writeln!(out, "split {} {}", split.split, split.len());
            for i in 0..split.len() {
                let _ = write!(
                    out,
                    "{} {} {} {}",
                    split.ids[i],
                    split.observed[i],
                    split.clean[i],
                    u8::from(split.noise_mask[i])
                );
                for v in &split.x[i] {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_rlab<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_rlab_string().as_bytes())?;
        Ok(())
    }

    pub fn read_rlab<R: BufRead>(r: R) -> Result<Dataset> {
        let mut lines = Lines { inner: r.lines(), line: 0 };
        let (no, magic) = lines.next("header")?;
        if magic.trim_end() != MAGIC {
            return Err(Error::Parse { line: no, msg: format!("expected `{MAGIC}`, found `{magic}`") });
        }
        let header = |lines: &mut Lines<R>, key: &str| lines.header(key);
        let parse_usize = |(no, v): (usize, String)| -> Result<usize> {
            v.trim().parse().map_err(|e| Error::Parse { line: no, msg: format!("`{v}`: {e}") })
        };
        let total = parse_usize(header(&mut lines, "n")?)?;
        let dim = parse_usize(header(&mut lines, "d")?)?;
        let num_classes = parse_usize(header(&mut lines, "classes")?)?;
        let (noise_line, noise_value) = header(&mut lines, "noise")?;
        let (seed_line, seed_value) = header(&mut lines, "noise_seed")?;
        let noise_seed: u64 =
            seed_value.trim().parse().map_err(|e| Error::Parse { line: seed_line, msg: format!("noise seed: {e}") })?;
        let noise = NoiseSpec::parse_header(&noise_value, noise_seed, noise_line)?;
        let (cols_line, columns) = header(&mut lines, "columns")?;
        let expected_cols = 4 + dim;
        if columns.split_whitespace().count() != expected_cols {
            return Err(Error::Parse {
                line: cols_line,
                msg: format!("expected {expected_cols} columns for d = {dim}"),
            });
        }

        let mut splits = Vec::new();
        let mut seen = 0;
        while seen < total {
            let (no, line) = header(&mut lines, "split")?;
            let (tag, count) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse { line: no, msg: "split needs a tag and a count".into() })?;
            let tag: SplitTag = tag.parse()?;
            let count: usize =
                count.trim().parse().map_err(|e| Error::Parse { line: no, msg: format!("split count: {e}") })?;
            let mut ids = Vec::with_capacity(count);
            let mut x = Vec::with_capacity(count);
            let mut observed = Vec::with_capacity(count);
            let mut clean = Vec::with_capacity(count);
            let mut flags = Vec::with_capacity(count);
            for _ in 0..count {
                let (no, row) = lines.next("example row")?;
                let fields: Vec<&str> = row.split(' ').collect();
                if fields.len() != expected_cols {
                    return Err(Error::Parse {
                        line: no,
                        msg: format!("expected {expected_cols} fields, found {}", fields.len()),
                    });
                }
                let perr = |what: &str, e: &dyn fmt::Display| Error::Parse { line: no, msg: format!("{what}: {e}") };
                ids.push(fields[0].parse::<u64>().map_err(|e| perr("id", &e))?);
                observed.push(fields[1].parse::<usize>().map_err(|e| perr("label_observed", &e))?);
                clean.push(fields[2].parse::<usize>().map_err(|e| perr("label_clean", &e))?);
                flags.push(match fields[3] {
                    "0" => false,
                    "1" => true,
                    other => return Err(perr("noise_flag", &format!("`{other}` is not 0/1"))),
                });
                let row: Vec<f64> = fields[4..]
                    .iter()
                    .map(|f| f.parse::<f64>().map_err(|e| perr("feature", &e)))
                    .collect::<Result<_>>()?;
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(perr("feature", &"non-finite value"));
                }
                x.push(row);
            }
            let set = ExampleSet::new(ids, x, observed, clean, num_classes, tag)?;
            if set.noise_mask != flags {
                return Err(Error::Parse {
                    line: no,
                    msg: format!("noise flags of split `{tag}` disagree with its labels"),
                });
            }
            seen += count;
            splits.push(set);
        }
        if seen != total {
            return Err(Error::Parse { line: 0, msg: format!("header declares {total} rows, found {seen}") });
        }
        Ok(Dataset { num_classes, dim, noise, splits })
    }
}
