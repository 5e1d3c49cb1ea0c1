//! Ground-truth and clinical metadata ingestion.
//!
//! Ground truth is a comma-separated table with header
//! `image_id,melanoma,seborrheic_keratosis`, each indicator being exactly
//! `0`/`1` once parsed as a decimal. Metadata uses `image_id,age_approximate,sex`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

pub const GROUND_TRUTH_HEADER: [&str; 3] = ["image_id", "melanoma", "seborrheic_keratosis"];
pub const METADATA_HEADER: [&str; 3] = ["image_id", "age_approximate", "sex"];

/// Image file extensions tried, in order, when resolving an image path.
pub const IMAGE_EXTENSIONS: [&str; 6] = ["ppm", "pgm", "png", "jpg", "jpeg", "JPG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnosis {
    Melanoma,
    Nevus,
    SeborrheicKeratosis,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [
        Diagnosis::Melanoma,
        Diagnosis::Nevus,
        Diagnosis::SeborrheicKeratosis,
    ];
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::Melanoma => "melanoma",
            Diagnosis::Nevus => "nevus",
            Diagnosis::SeborrheicKeratosis => "seborrheic_keratosis",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Sex {
    Male,
    Female,
    #[default]
    Unknown,
}

impl Sex {
    fn parse(token: &str) -> Option<Sex> {
        match token.trim().to_ascii_lowercase().as_str() {
            "male" => Some(Sex::Male),
            "female" => Some(Sex::Female),
            "" | "unknown" => Some(Sex::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub diagnosis: Diagnosis,
    pub age_years: Option<f64>,
    pub sex: Sex,
}

impl LesionRecord {
    pub fn new(image_id: impl Into<String>, diagnosis: Diagnosis) -> Self {
        let image_id = image_id.into();
        LesionRecord {
            image_path: PathBuf::from(&image_id),
            image_id,
            diagnosis,
            age_years: None,
            sex: Sex::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Task1,
    Task2,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::Task1, TaskId::Task2];

    pub fn spec(self) -> TaskSpec {
        match self {
            TaskId::Task1 => TaskSpec::TASK1,
            TaskId::Task2 => TaskSpec::TASK2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Task1 => "task1",
            TaskId::Task2 => "task2",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "task1" | "1" => Ok(TaskId::Task1),
            "task2" | "2" => Ok(TaskId::Task2),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

/// A binary task: one diagnosis against the other two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub positive_class: Diagnosis,
}

impl TaskSpec {
    /// Melanoma vs nevus and seborrheic keratosis.
    pub const TASK1: TaskSpec = TaskSpec {
        id: TaskId::Task1,
        positive_class: Diagnosis::Melanoma,
    };
    /// Seborrheic keratosis vs nevus and melanoma.
    pub const TASK2: TaskSpec = TaskSpec {
        id: TaskId::Task2,
        positive_class: Diagnosis::SeborrheicKeratosis,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Train,
    Validation,
    Test,
    External,
}

/// Records sorted by `image_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<LesionRecord>,
    pub origin: Origin,
}

impl Dataset {
    /// Sorts by `image_id` and rejects empty or duplicate ids.
    pub fn new(mut records: Vec<LesionRecord>, origin: Origin) -> Result<Self> {
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for pair in records.windows(2) {
            if pair[0].image_id == pair[1].image_id {
                return Err(Error::DuplicateId(pair[0].image_id.clone()));
            }
        }
        if let Some(r) = records.iter().find(|r| r.image_id.is_empty()) {
            return Err(Error::Consistency(format!(
                "empty image_id (diagnosis {})",
                r.diagnosis
            )));
        }
        Ok(Dataset { records, origin })
    }

    pub fn records(&self) -> &[LesionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&LesionRecord> {
        self.records
            .binary_search_by(|r| r.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn class_counts(&self) -> BTreeMap<Diagnosis, usize> {
        let mut counts: BTreeMap<Diagnosis, usize> = Diagnosis::ALL.iter().map(|&d| (d, 0)).collect();
        for r in &self.records {
            *counts.entry(r.diagnosis).or_default() += 1;
        }
        counts
    }

    /// Points every record at `<dir>/<image_id>.<ext>` for the first
    /// extension in [`IMAGE_EXTENSIONS`] that exists.
    pub fn resolve_images(&mut self, dir: &Path) -> Result<()> {
        for r in &mut self.records {
            let found = IMAGE_EXTENSIONS
                .iter()
                .map(|ext| dir.join(format!("{}.{ext}", r.image_id)))
                .find(|p| p.is_file());
            r.image_path = found.ok_or_else(|| {
                Error::Missing(format!("image file for `{}` in {}", r.image_id, dir.display()))
            })?;
        }
        Ok(())
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<File>, path: &Path, want: &[&str]) -> Result<()> {
    let file = path.display().to_string();
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(&file, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got.len() < want.len() || got[..want.len()] != *want {
        return Err(Error::parse(
            file,
            1,
            format!("expected header `{}`, found `{}`", want.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_indicator(token: &str, file: &str, line: u64, column: &str) -> Result<bool> {
    match token.parse::<f64>() {
        Ok(v) if v == 1.0 => Ok(true),
        Ok(v) if v == 0.0 => Ok(false),
        _ => Err(Error::parse(
            file,
            line,
            format!("{column} indicator `{token}` is not 0 or 1"),
        )),
    }
}

/// Reads a ground-truth table into a dataset sorted by `image_id`.
pub fn load_ground_truth(path: &Path) -> Result<Dataset> {
    let file = path.display().to_string();
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &GROUND_TRUTH_HEADER)?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(&file, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 {
            return Err(Error::parse(&file, line, format!("expected 3 fields, found {}", row.len())));
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(Error::parse(&file, line, "empty image_id"));
        }
        let mel = parse_indicator(&row[1], &file, line, "melanoma")?;
        let sk = parse_indicator(&row[2], &file, line, "seborrheic_keratosis")?;
        let diagnosis = match (mel, sk) {
            (true, true) => {
                return Err(Error::Consistency(format!(
                    "{file}:{line}: `{id}` marked both melanoma and seborrheic keratosis"
                )))
            }
            (true, false) => Diagnosis::Melanoma,
            (false, true) => Diagnosis::SeborrheicKeratosis,
            (false, false) => Diagnosis::Nevus,
        };
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(Error::DuplicateId(format!("{id} (lines {first} and {line})")));
        }
        records.push(LesionRecord::new(id, diagnosis));
    }
    Dataset::new(records, Origin::External)
}

pub fn write_ground_truth(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", GROUND_TRUTH_HEADER.join(",")).map_err(io)?;
    for r in dataset.records() {
        let mel = if r.diagnosis == Diagnosis::Melanoma { "1.0" } else { "0.0" };
        let sk = if r.diagnosis == Diagnosis::SeborrheicKeratosis { "1.0" } else { "0.0" };
        writeln!(out, "{},{mel},{sk}", r.image_id).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Outcome of merging a metadata table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetadataMerge {
    pub matched: usize,
    /// Metadata rows whose id is not in the dataset; they are ignored.
    pub unmatched: usize,
}

/// Merges age and sex onto the records of `dataset`. Records without a
/// metadata row keep `age = None`, `sex = Unknown`.
pub fn load_metadata(dataset: Dataset, path: &Path) -> Result<(Dataset, MetadataMerge)> {
    let file = path.display().to_string();
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &METADATA_HEADER)?;
    let mut dataset = dataset;
    let mut stats = MetadataMerge::default();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(&file, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 {
            return Err(Error::parse(&file, line, format!("expected 3 fields, found {}", row.len())));
        }
        let age_token = &row[1];
        let age = if age_token.is_empty() || age_token.eq_ignore_ascii_case("unknown") {
            None
        } else {
            match age_token.parse::<f64>() {
                Ok(a) if (0.0..=130.0).contains(&a) => Some(a),
                Ok(a) => return Err(Error::parse(&file, line, format!("age {a} outside [0, 130]"))),
                Err(_) => {
                    return Err(Error::parse(&file, line, format!("non-numeric age `{age_token}`")))
                }
            }
        };
        let sex = Sex::parse(&row[2])
            .ok_or_else(|| Error::parse(&file, line, format!("unknown sex token `{}`", &row[2])))?;
        let id = &row[0];
        match dataset.records.binary_search_by(|r| r.image_id.as_str().cmp(id)) {
            Ok(i) => {
                dataset.records[i].age_years = age;
                dataset.records[i].sex = sex;
                stats.matched += 1;
            }
            Err(_) => stats.unmatched += 1,
        }
    }
    Ok((dataset, stats))
}

pub fn write_metadata(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", METADATA_HEADER.join(",")).map_err(io)?;
    for r in dataset.records() {
        let age = r.age_years.map(|a| a.to_string()).unwrap_or_default();
        let sex = match r.sex {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        };
        writeln!(out, "{},{age},{sex}", r.image_id).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// 1 iff the record carries the task's positive diagnosis.
pub fn binary_label(record: &LesionRecord, task: TaskSpec) -> u8 {
    u8::from(record.diagnosis == task.positive_class)
}

pub fn class_prevalence(dataset: &Dataset, task: TaskSpec) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("prevalence of an empty dataset".into()));
    }
    let positives = dataset
        .records()
        .iter()
        .filter(|r| binary_label(r, task) == 1)
        .count();
    Ok(positives as f64 / dataset.len() as f64)
}
