use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// One image with its metadata. `target` is 1 for malignant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_name: String,
    pub patient_id: String,
    pub sex: Option<Sex>,
    pub age_approx: Option<f64>,
    pub anatom_site: Option<String>,
    pub diagnosis: Option<String>,
    pub benign_malignant: Option<String>,
    pub target: u8,
}

pub const COLUMNS: [&str; 8] = [
    "image_name",
    "patient_id",
    "sex",
    "age_approx",
    "anatom_site_general_challenge",
    "diagnosis",
    "benign_malignant",
    "target",
];

/// Ordered records with unique image names and a patient index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    patients: BTreeMap<String, Vec<usize>>,
}

/// Outcome of [`Manifest::remove_duplicates`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub requested: usize,
    pub removed: usize,
    /// Listed ids not present in the manifest.
    pub absent: Vec<String>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut patients: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.image_name.as_str()) {
                return Err(Error::ManifestRow {
                    row: i + 1,
                    reason: format!("duplicate image_name {}", r.image_name),
                });
            }
            if r.target > 1 {
                return Err(Error::ManifestRow {
                    row: i + 1,
                    reason: format!("target {} is not 0 or 1", r.target),
                });
            }
            patients.entry(r.patient_id.clone()).or_default().push(i);
        }
        Ok(Manifest { records, patients })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    /// Parses the ISIC 2020 training CSV layout. Only `image_name`,
    /// `patient_id` and `target` are required; other columns may be absent
    /// or empty. Reported row numbers are file line numbers.
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let image = col("image_name").ok_or(Error::MissingColumn("image_name"))?;
        let patient = col("patient_id").ok_or(Error::MissingColumn("patient_id"))?;
        let target = col("target").ok_or(Error::MissingColumn("target"))?;
        let sex = col("sex");
        let age = col("age_approx");
        let site = col("anatom_site_general_challenge");
        let diagnosis = col("diagnosis");
        let bm = col("benign_malignant");

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: String| Error::ManifestRow { row: line, reason };
            let get = |c: Option<usize>| c.and_then(|c| row.get(c)).filter(|s| !s.is_empty());

            let image_name = get(Some(image)).ok_or_else(|| bad("empty image_name".into()))?.to_string();
            let patient_id = get(Some(patient)).ok_or_else(|| bad("empty patient_id".into()))?.to_string();
            let target = match get(Some(target)) {
                Some("0") => 0,
                Some("1") => 1,
                other => return Err(bad(format!("target {other:?} is not 0 or 1"))),
            };
            let sex = match get(sex) {
                None => None,
                Some("male") => Some(Sex::Male),
                Some("female") => Some(Sex::Female),
                Some(s) => return Err(bad(format!("unknown sex {s:?}"))),
            };
            let age_approx = match get(age) {
                None => None,
                Some(s) => Some(s.parse::<f64>().map_err(|_| bad(format!("age_approx {s:?} is not a number")))?),
            };
            if !seen.insert(image_name.clone()) {
                return Err(bad(format!("duplicate image_name {image_name}")));
            }
            records.push(SampleRecord {
                image_name,
                patient_id,
                sex,
                age_approx,
                anatom_site: get(site).map(str::to_string),
                diagnosis: get(diagnosis).map(str::to_string),
                benign_malignant: get(bm).map(str::to_string),
                target,
            });
        }
        Self::new(records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(file)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(COLUMNS)?;
        for r in &self.records {
            let sex = match r.sex {
                Some(Sex::Male) => "male",
                Some(Sex::Female) => "female",
                None => "",
            };
            let age = r.age_approx.map(|a| a.to_string()).unwrap_or_default();
            let target = r.target.to_string();
            w.write_record([
                r.image_name.as_str(),
                r.patient_id.as_str(),
                sex,
                age.as_str(),
                r.anatom_site.as_deref().unwrap_or(""),
                r.diagnosis.as_deref().unwrap_or(""),
                r.benign_malignant.as_deref().unwrap_or(""),
                target.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn malignant_count(&self) -> usize {
        self.records.iter().filter(|r| r.target == 1).count()
    }

    pub fn benign_count(&self) -> usize {
        self.len() - self.malignant_count()
    }

    /// Patient id → record indices, ordered by patient id.
    pub fn patients(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.patients
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.target).collect()
    }

    /// Keeps the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Manifest {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records).expect("subset of a valid manifest")
    }

    /// Drops every record whose image name is listed, preserving order.
    pub fn remove_duplicates<S: AsRef<str>>(&self, ids: &[S]) -> (Manifest, DedupReport) {
        let listed: HashSet<&str> = ids.iter().map(|s| s.as_ref()).collect();
        let present: HashSet<&str> = self.records.iter().map(|r| r.image_name.as_str()).collect();
        let mut absent: Vec<String> = listed.iter().filter(|id| !present.contains(*id)).map(|s| s.to_string()).collect();
        absent.sort();
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !listed.contains(self.records[i].image_name.as_str()))
            .collect();
        let report = DedupReport {
            requested: listed.len(),
            removed: self.len() - keep.len(),
            absent,
        };
        (self.subset(&keep), report)
    }
}

/// Reads a newline-delimited list of image names. Blank lines and a leading
/// header line starting with `image_name` are skipped; on lines with commas
/// the last field is taken, so a two-column "original,duplicate" table
/// yields the duplicates.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_id_list(&text))
}

pub fn parse_id_list(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("image_name")) {
            continue;
        }
        let id = line.rsplit(',').next().unwrap_or(line).trim();
        if !id.is_empty() {
            out.push(id.to_string());
        }
    }
    out
}
