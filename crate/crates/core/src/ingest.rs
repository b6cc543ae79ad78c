//! Corpus loading, source normalization, deduplication and train/test splits.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VulnType {
    Reentrancy,
    Timestamp,
    InfiniteLoop,
}

impl VulnType {
    pub fn as_str(self) -> &'static str {
        match self {
            VulnType::Reentrancy => "reentrancy",
            VulnType::Timestamp => "timestamp",
            VulnType::InfiniteLoop => "infinite_loop",
        }
    }
}

impl fmt::Display for VulnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VulnType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reentrancy" => Ok(VulnType::Reentrancy),
            "timestamp" => Ok(VulnType::Timestamp),
            "infinite_loop" => Ok(VulnType::InfiniteLoop),
            other => Err(Error::Corpus(format!("unknown vulnerability type `{other}`"))),
        }
    }
}

/// One labeled contract. `label` is 1 for vulnerable, 0 for safe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledContract {
    pub id: String,
    pub source: String,
    pub vuln_type: VulnType,
    pub label: u8,
}

impl LabeledContract {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        vuln_type: VulnType,
        label: u8,
    ) -> Result<Self> {
        let contract = LabeledContract {
            id: id.into(),
            source: source.into(),
            vuln_type,
            label,
        };
        contract.validate()?;
        Ok(contract)
    }

    fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidLabel(self.label as i64));
        }
        if self.source.trim().is_empty() {
            return Err(Error::Corpus(format!("contract `{}` has an empty source", self.id)));
        }
        Ok(())
    }
}

/// An ordered collection of contracts sharing one vulnerability type.
///
/// `vuln_type` is `None` only for an empty corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    vuln_type: Option<VulnType>,
    contracts: Vec<LabeledContract>,
}

impl Corpus {
    pub fn new(contracts: Vec<LabeledContract>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(contracts.len());
        let mut vuln_type = None;
        for c in &contracts {
            c.validate()?;
            if !seen.insert(c.id.as_str()) {
                return Err(Error::DuplicateId(c.id.clone()));
            }
            match vuln_type {
                None => vuln_type = Some(c.vuln_type),
                Some(t) if t != c.vuln_type => {
                    return Err(Error::MixedVulnTypes(t.to_string(), c.vuln_type.to_string()))
                }
                Some(_) => {}
            }
        }
        Ok(Corpus {
            vuln_type,
            contracts,
        })
    }

    pub fn vuln_type(&self) -> Option<VulnType> {
        self.vuln_type
    }

    pub fn contracts(&self) -> &[LabeledContract] {
        &self.contracts
    }

    pub fn into_contracts(self) -> Vec<LabeledContract> {
        self.contracts
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.contracts.iter().map(|c| c.label).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledContract> {
        self.contracts.iter()
    }

    // Subsets of a valid corpus are valid, so no revalidation.
    fn from_valid(vuln_type: Option<VulnType>, contracts: Vec<LabeledContract>) -> Self {
        let vuln_type = if contracts.is_empty() { None } else { vuln_type };
        Corpus {
            vuln_type,
            contracts,
        }
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a LabeledContract;
    type IntoIter = std::slice::Iter<'a, LabeledContract>;

    fn into_iter(self) -> Self::IntoIter {
        self.contracts.iter()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    id: String,
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    source: Option<String>,
    vuln_type: String,
    label: i64,
}

#[derive(Debug, Serialize)]
struct InlineManifestRow<'a> {
    id: &'a str,
    source: &'a str,
    vuln_type: VulnType,
    label: u8,
}

/// Loads a JSON-lines manifest. Relative `path` fields resolve against the
/// manifest's directory.
pub fn load_manifest(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    load_manifest_filtered(manifest_path, None)
}

/// Like [`load_manifest`], keeping only rows of `vuln_type` when given.
pub fn load_manifest_filtered(
    manifest_path: impl AsRef<Path>,
    vuln_type: Option<VulnType>,
) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut contracts = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let row_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row_err = |message: String| Error::ManifestRow {
            row: row_no,
            message,
        };
        let row: ManifestRow =
            serde_json::from_str(line).map_err(|e| row_err(format!("malformed JSON: {e}")))?;
        let label = match row.label {
            0 => 0u8,
            1 => 1u8,
            other => return Err(row_err(format!("label {other} is not 0 or 1"))),
        };
        let row_type: VulnType = row.vuln_type.parse().map_err(|e: Error| row_err(e.to_string()))?;
        let source = match (&row.path, row.source) {
            (Some(p), None) => {
                let full = base.join(p);
                fs::read_to_string(&full).map_err(|e| {
                    row_err(format!("cannot read referenced file {}: {e}", full.display()))
                })?
            }
            (None, Some(s)) => s,
            _ => return Err(row_err("exactly one of `path` or `source` is required".into())),
        };
        if !seen.insert(row.id.clone()) {
            return Err(row_err(format!("duplicate id `{}`", row.id)));
        }
        if vuln_type.is_some_and(|t| t != row_type) {
            continue;
        }
        let contract = LabeledContract {
            id: row.id,
            source,
            vuln_type: row_type,
            label,
        };
        contract.validate().map_err(|e| row_err(e.to_string()))?;
        contracts.push(contract);
    }
    Corpus::new(contracts)
}

/// Writes `corpus` as a self-contained manifest (sources inlined).
pub fn write_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for c in corpus {
        let row = InlineManifestRow {
            id: &c.id,
            source: &c.source,
            vuln_type: c.vuln_type,
            label: c.label,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Strips `//` and `/* */` comments and collapses whitespace runs to one space.
///
/// Comment markers inside string literals are left alone. An unterminated
/// block comment runs to the end of the input.
pub fn normalize_source(source: &str) -> String {
    let mut stripped = String::with_capacity(source.len());
    let mut chars = source.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '/' if chars.peek() == Some(&'/') => {
                for c in chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
                stripped.push(' ');
            }
            '/' if chars.peek() == Some(&'*') => {
                chars.next();
                let mut prev = '\0';
                for c in chars.by_ref() {
                    if prev == '*' && c == '/' {
                        break;
                    }
                    prev = c;
                }
                stripped.push(' ');
            }
            '"' | '\'' => {
                stripped.push(c);
                while let Some(s) = chars.next() {
                    stripped.push(s);
                    if s == '\\' {
                        if let Some(escaped) = chars.next() {
                            stripped.push(escaped);
                        }
                    } else if s == c {
                        break;
                    }
                }
            }
            _ => stripped.push(c),
        }
    }
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A set of contracts whose normalized sources coincide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub survivor: String,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input_count: usize,
    pub output_count: usize,
    pub groups: Vec<DuplicateGroup>,
}

/// Collapses contracts with byte-identical normalized sources to their first
/// occurrence.
pub fn dedup_corpus(corpus: &Corpus) -> Result<Corpus> {
    dedup_with_report(corpus).map(|(c, _)| c)
}

pub fn dedup_with_report(corpus: &Corpus) -> Result<(Corpus, DedupReport)> {
    // normalized source -> index into `groups`
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, c) in corpus.iter().enumerate() {
        let key = normalize_source(&c.source);
        match index.get(&key) {
            Some(&g) => groups[g].push(i),
            None => {
                index.insert(key, groups.len());
                groups.push(vec![i]);
            }
        }
    }

    let contracts = corpus.contracts();
    let mut survivors = Vec::with_capacity(groups.len());
    let mut report_groups = Vec::new();
    for members in &groups {
        let first = &contracts[members[0]];
        if members.iter().any(|&m| contracts[m].label != first.label) {
            return Err(Error::ConflictingLabels {
                ids: members.iter().map(|&m| contracts[m].id.clone()).collect(),
            });
        }
        survivors.push(members[0]);
        if members.len() > 1 {
            report_groups.push(DuplicateGroup {
                survivor: first.id.clone(),
                removed: members[1..].iter().map(|&m| contracts[m].id.clone()).collect(),
            });
        }
    }
    // groups are created in first-occurrence order, so survivors are sorted
    let out: Vec<LabeledContract> = survivors.iter().map(|&i| contracts[i].clone()).collect();
    let report = DedupReport {
        input_count: corpus.len(),
        output_count: out.len(),
        groups: report_groups,
    };
    Ok((Corpus::from_valid(corpus.vuln_type(), out), report))
}

/// Seeded random partition into `(train, test)` with
/// `|train| = floor(train_fraction * n)`.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Corpus(format!(
            "cannot split a corpus of {n} contract(s) into train and test"
        )));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Corpus(format!(
            "train fraction {train_fraction} leaves one split empty for {n} contracts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let pick = |idx: &[usize]| {
        let cs = idx.iter().map(|&i| corpus.contracts()[i].clone()).collect();
        Corpus::from_valid(corpus.vuln_type(), cs)
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
