//! Class-stratified partitioning and minority oversampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{binary_label, Dataset, LesionRecord, TaskId, TaskSpec};
use crate::nn::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Validation,
    Test,
    Spare,
}

impl Partition {
    /// Allocation and tie-break order.
    pub const ALL: [Partition; 4] = [
        Partition::Train,
        Partition::Validation,
        Partition::Test,
        Partition::Spare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
            Partition::Spare => "spare",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown partition `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub spare: f64,
}

/// Fractions are quantised to this denominator so that largest-remainder
/// comparisons are exact integer comparisons.
const FRACTION_SCALE: u128 = 1_000_000_000;

impl SplitFractions {
    /// 67.5 / 7.5 / 15, with the remaining 10% kept as an explicit spare holdout.
    pub const STANDARD: SplitFractions = SplitFractions {
        train: 0.675,
        validation: 0.075,
        test: 0.15,
        spare: 0.10,
    };

    pub fn new(train: f64, validation: f64, test: f64, spare: f64) -> Result<Self> {
        let f = SplitFractions {
            train,
            validation,
            test,
            spare,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.train, self.validation, self.test, self.spare]
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidArgument(format!("split fractions {parts:?} must be >= 0")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {parts:?} sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Fractions as integers over [`FRACTION_SCALE`], summing exactly to it.
    fn quantised(&self) -> [u128; 4] {
        let parts = self.as_array();
        let mut q = parts.map(|f| (f * FRACTION_SCALE as f64).round() as u128);
        let total: u128 = q.iter().sum();
        let largest = (0..4).max_by(|&a, &b| q[a].cmp(&q[b]).then(b.cmp(&a))).unwrap_or(0);
        q[largest] = q[largest] + FRACTION_SCALE - total.min(FRACTION_SCALE + q[largest]);
        q
    }
}

/// Largest-remainder allocation of `n` items; ties on the remainder go to
/// the earlier partition (train > validation > test > spare).
pub fn largest_remainder(n: usize, fractions: &SplitFractions) -> [usize; 4] {
    let q = fractions.quantised();
    let mut counts = [0usize; 4];
    let mut rems = [0u128; 4];
    for i in 0..4 {
        let quota = n as u128 * q[i];
        counts[i] = (quota / FRACTION_SCALE) as usize;
        rems[i] = quota % FRACTION_SCALE;
    }
    let left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub assignment: BTreeMap<String, Partition>,
    pub seed: u64,
    pub task: TaskId,
    pub fractions: SplitFractions,
}

impl SplitPlan {
    pub fn partition_of(&self, image_id: &str) -> Option<Partition> {
        self.assignment.get(image_id).copied()
    }

    /// Records of `dataset` in `partition`, in dataset (image_id) order.
    pub fn records<'a>(&self, dataset: &'a Dataset, partition: Partition) -> Vec<&'a LesionRecord> {
        dataset
            .records()
            .iter()
            .filter(|r| self.partition_of(&r.image_id) == Some(partition))
            .collect()
    }

    pub fn ids(&self, partition: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == partition)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// `(negatives, positives)` per partition under `task`.
    pub fn class_counts(&self, dataset: &Dataset, task: TaskSpec) -> BTreeMap<Partition, (usize, usize)> {
        let mut counts: BTreeMap<Partition, (usize, usize)> =
            Partition::ALL.iter().map(|&p| (p, (0, 0))).collect();
        for r in dataset.records() {
            if let Some(p) = self.partition_of(&r.image_id) {
                let c = counts.entry(p).or_default();
                if binary_label(r, task) == 1 {
                    c.1 += 1;
                } else {
                    c.0 += 1;
                }
            }
        }
        counts
    }

    /// Comment line, header, then one `image_id,partition` row per record in
    /// image_id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let f = self.fractions;
        writeln!(
            out,
            "# seed={} fractions={},{},{},{} task={}",
            self.seed, f.train, f.validation, f.test, f.spare, self.task
        )
        .map_err(io)?;
        writeln!(out, "image_id,partition").map_err(io)?;
        for (id, p) in &self.assignment {
            writeln!(out, "{id},{p}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<SplitPlan> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut lines = BufReader::new(file).lines();
        let mut next = |n: u64| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::parse(&name, n, "unexpected end of file"))?
                .map_err(|e| Error::io(path, e))
        };
        let comment = next(1)?;
        let meta = comment
            .trim_end()
            .strip_prefix("# ")
            .ok_or_else(|| Error::parse(&name, 1, "missing plan comment line"))?;
        let mut seed = None;
        let mut fractions = None;
        let mut task = None;
        for field in meta.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(&name, 1, format!("bad field `{field}`")))?;
            match k {
                "seed" => seed = v.parse::<u64>().ok(),
                "task" => task = v.parse::<TaskId>().ok(),
                "fractions" => {
                    let parts: Vec<f64> = v.split(',').filter_map(|x| x.parse().ok()).collect();
                    if let [a, b, c, d] = parts[..] {
                        fractions = SplitFractions::new(a, b, c, d).ok();
                    }
                }
                _ => {}
            }
        }
        let (Some(seed), Some(fractions), Some(task)) = (seed, fractions, task) else {
            return Err(Error::parse(&name, 1, "plan comment needs seed, fractions and task"));
        };
        let header = next(2)?;
        if header.trim_end() != "image_id,partition" {
            return Err(Error::parse(&name, 2, format!("bad header `{header}`")));
        }
        let mut assignment = BTreeMap::new();
        let mut line_no = 2;
        for line in lines {
            line_no += 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let (id, p) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(&name, line_no, "expected `image_id,partition`"))?;
            let p: Partition = p.parse().map_err(|e: Error| Error::parse(&name, line_no, e.to_string()))?;
            if assignment.insert(id.to_string(), p).is_some() {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        Ok(SplitPlan {
            assignment,
            seed,
            task,
            fractions,
        })
    }
}

/// Shuffles each class (negatives first, then positives) with one seeded
/// stream and cuts it into partitions by [`largest_remainder`].
pub fn stratified_split(
    dataset: &Dataset,
    fractions: SplitFractions,
    task: TaskSpec,
    seed: u64,
) -> Result<SplitPlan> {
    fractions.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut rng = Rng::new(seed);
    let mut assignment = BTreeMap::new();
    for label in [0u8, 1] {
        let mut ids: Vec<&str> = dataset
            .records()
            .iter()
            .filter(|r| binary_label(r, task) == label)
            .map(|r| r.image_id.as_str())
            .collect();
        rng.shuffle(&mut ids);
        let counts = largest_remainder(ids.len(), &fractions);
        let mut rest = ids.as_slice();
        for (partition, count) in Partition::ALL.into_iter().zip(counts) {
            let (chunk, tail) = rest.split_at(count);
            for id in chunk {
                assignment.insert(id.to_string(), partition);
            }
            rest = tail;
        }
    }
    Ok(SplitPlan {
        assignment,
        seed,
        task: task.id,
        fractions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OversampleConfig {
    /// Total copies of each minority record.
    pub factor: usize,
}

impl Default for OversampleConfig {
    fn default() -> Self {
        OversampleConfig { factor: 3 }
    }
}

/// Repeats every record of the strict minority class `factor` times in
/// place; majority records and the relative order are kept. With equal class
/// counts nothing is repeated.
pub fn oversample_minority<R>(train: &[R], task: TaskSpec, config: OversampleConfig) -> Result<Vec<R>>
where
    R: Clone + std::borrow::Borrow<LesionRecord>,
{
    if config.factor < 1 {
        return Err(Error::InvalidArgument("oversampling factor must be >= 1".into()));
    }
    let positives = train
        .iter()
        .filter(|r| binary_label(r.borrow(), task) == 1)
        .count();
    let negatives = train.len() - positives;
    let minority = match positives.cmp(&negatives) {
        std::cmp::Ordering::Less => Some(1u8),
        std::cmp::Ordering::Greater => Some(0u8),
        std::cmp::Ordering::Equal => None,
    };
    let mut out = Vec::with_capacity(train.len() + (config.factor - 1) * positives.min(negatives));
    for r in train {
        let copies = if Some(binary_label(r.borrow(), task)) == minority {
            config.factor
        } else {
            1
        };
        for _ in 0..copies {
            out.push(r.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LeakageReport {
    /// Held-out ids found in the training list, with their partition.
    pub violations: Vec<(String, Partition)>,
}

impl LeakageReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every validation/test/spare id that shows up in `train`.
pub fn verify_leakage<R: std::borrow::Borrow<LesionRecord>>(plan: &SplitPlan, train: &[R]) -> LeakageReport {
    let mut seen = BTreeSet::new();
    let mut violations = Vec::new();
    for r in train {
        let id = &r.borrow().image_id;
        match plan.partition_of(id) {
            Some(p @ (Partition::Validation | Partition::Test | Partition::Spare)) => {
                if seen.insert(id.clone()) {
                    violations.push((id.clone(), p));
                }
            }
            _ => {}
        }
    }
    LeakageReport { violations }
}
