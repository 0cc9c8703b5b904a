//! Fact records, category manifests, validation and dataset statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Soft maximum for the length of a full fact, in words.
pub const SOFT_WORD_LIMIT: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    #[serde(default, deserialize_with = "string_or_number")]
    pub known_id: Option<String>,
    pub full_fact: String,
    pub subject: String,
    pub attribute: String,
    pub prediction: String,
    pub prompt: String,
    pub group: String,
    #[serde(default, deserialize_with = "string_or_number")]
    pub relation_id: Option<String>,
    #[serde(default, deserialize_with = "string_or_number")]
    pub template: Option<String>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(serde::de::Error::custom(format!(
            "expected string, number or null, found {other}"
        ))),
    }
}

const REQUIRED_FIELDS: [&str; 6] = ["full_fact", "subject", "attribute", "prediction", "prompt", "group"];
const OPTIONAL_FIELDS: [&str; 3] = ["known_id", "relation_id", "template"];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("line {line}: field {field}: {message}")]
pub struct SchemaError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedFacts {
    /// Records with their 1-based line numbers.
    pub records: Vec<(usize, FactRecord)>,
    pub errors: Vec<SchemaError>,
}

impl ParsedFacts {
    pub fn into_records(self) -> Vec<FactRecord> {
        self.records.into_iter().map(|(_, r)| r).collect()
    }
}

/// Parses JSON lines. Malformed lines are reported and skipped; blank lines
/// are ignored. A read error ends the stream and is reported on the line
/// where it happened.
pub fn parse_facts<R: BufRead>(reader: R) -> ParsedFacts {
    let mut out = ParsedFacts::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.errors.push(SchemaError {
                    line: line_no,
                    field: "<io>".into(),
                    message: e.to_string(),
                });
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match parse_fact_line(&line, line_no) {
            Ok(r) => out.records.push((line_no, r)),
            Err(e) => out.errors.push(e),
        }
    }
    out
}

pub fn parse_facts_str(text: &str) -> ParsedFacts {
    parse_facts(text.as_bytes())
}

fn parse_fact_line(line: &str, line_no: usize) -> Result<FactRecord, SchemaError> {
    let err = |field: &str, message: String| SchemaError {
        line: line_no,
        field: field.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err("<json>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("<json>", "expected an object".into()))?;
    for field in REQUIRED_FIELDS {
        match obj.get(field) {
            None => return Err(err(field, "missing".into())),
            Some(Value::String(_)) => {}
            Some(other) => return Err(err(field, format!("expected string, found {other}"))),
        }
    }
    for field in OPTIONAL_FIELDS {
        if let Some(v) = obj.get(field) {
            if !(v.is_null() || v.is_string() || v.is_number()) {
                return Err(err(field, format!("expected string, number or null, found {v}")));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| err("<json>", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    EmptyField { field: &'static str },
    SubjectNotInPrompt,
    PromptNotPrefix,
    WordLimitExceeded { words: usize },
}

impl Issue {
    /// Warnings leave the record usable.
    pub fn is_warning(&self) -> bool {
        matches!(self, Issue::WordLimitExceeded { .. })
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::EmptyField { field } => write!(f, "field {field} is empty"),
            Issue::SubjectNotInPrompt => f.write_str("subject does not occur in prompt"),
            Issue::PromptNotPrefix => f.write_str("full_fact does not start with prompt"),
            Issue::WordLimitExceeded { words } => {
                write!(f, "full_fact has {words} words (soft limit {SOFT_WORD_LIMIT})")
            }
        }
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn validate_fact(record: &FactRecord) -> Vec<Issue> {
    let mut issues = Vec::new();
    let fields: [(&'static str, &str); 6] = [
        ("full_fact", &record.full_fact),
        ("subject", &record.subject),
        ("attribute", &record.attribute),
        ("prediction", &record.prediction),
        ("prompt", &record.prompt),
        ("group", &record.group),
    ];
    for (name, value) in fields {
        if value.trim().is_empty() {
            issues.push(Issue::EmptyField { field: name });
        }
    }
    if !record.subject.trim().is_empty() && !record.prompt.contains(record.subject.as_str()) {
        issues.push(Issue::SubjectNotInPrompt);
    }
    if !normalize_whitespace(&record.full_fact).starts_with(&normalize_whitespace(&record.prompt)) {
        issues.push(Issue::PromptNotPrefix);
    }
    let words = record.full_fact.split_whitespace().count();
    if words > SOFT_WORD_LIMIT {
        issues.push(Issue::WordLimitExceeded { words });
    }
    issues
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Taxonomic,
    Meronomic,
    /// Unrelated known facts traced for comparison; no hierarchy.
    Baseline,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Taxonomic => "Taxonomic",
            RelationKind::Meronomic => "Meronomic",
            RelationKind::Baseline => "Baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubcategorySpec {
    pub name: String,
    /// Terms identifying subjects of this subcategory.
    #[serde(default)]
    pub exclusions: Vec<String>,
}

/// A category and its subcategories. For taxonomic categories the list runs
/// from the most specific level to the most general.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryManifest {
    pub category: String,
    pub relation: RelationKind,
    pub subcategories: Vec<SubcategorySpec>,
}

pub const TAXONOMY_LEVELS: usize = 8;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("taxonomic category {category} has {found} levels, expected {TAXONOMY_LEVELS}")]
    LevelCount { category: String, found: usize },
    #[error("category {category} lists subcategory {name} twice")]
    DuplicateSubcategory { category: String, name: String },
    #[error("category {0} has no subcategories")]
    Empty(String),
}

impl CategoryManifest {
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let m: CategoryManifest = serde_json::from_str(text)?;
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), ManifestError> {
        if self.subcategories.is_empty() {
            return Err(ManifestError::Empty(self.category.clone()));
        }
        if self.relation == RelationKind::Taxonomic && self.subcategories.len() != TAXONOMY_LEVELS {
            return Err(ManifestError::LevelCount {
                category: self.category.clone(),
                found: self.subcategories.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.subcategories {
            if !seen.insert(s.name.as_str()) {
                return Err(ManifestError::DuplicateSubcategory {
                    category: self.category.clone(),
                    name: s.name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.subcategories.iter().map(|s| s.name.as_str())
    }

    pub fn level_of(&self, subcategory: &str) -> Option<usize> {
        self.subcategories.iter().position(|s| s.name == subcategory)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub subcategory: String,
    pub level: usize,
    /// Index into the fact slice that was checked.
    pub fact_index: usize,
    pub subject: String,
    pub term: String,
    pub term_subcategory: String,
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// True when the words of `term` occur contiguously in `text`, ignoring case.
pub fn contains_term(text: &str, term: &str) -> bool {
    let t = words(term);
    if t.is_empty() {
        return false;
    }
    words(text).windows(t.len()).any(|w| w == t.as_slice())
}

/// Facts at one level whose subject names a term of another level they must
/// exclude: every more specific level for taxonomies, every other
/// subcategory for meronomies. Facts from groups outside the manifest are
/// ignored.
pub fn check_mutual_exclusivity(facts: &[FactRecord], manifest: &CategoryManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, fact) in facts.iter().enumerate() {
        let Some(level) = manifest.level_of(&fact.group) else {
            continue;
        };
        let others: Box<dyn Iterator<Item = &SubcategorySpec>> = match manifest.relation {
            RelationKind::Taxonomic => Box::new(manifest.subcategories[..level].iter()),
            RelationKind::Meronomic => Box::new(
                manifest
                    .subcategories
                    .iter()
                    .enumerate()
                    .filter(move |(j, _)| *j != level)
                    .map(|(_, s)| s),
            ),
            RelationKind::Baseline => Box::new(std::iter::empty()),
        };
        for spec in others {
            if let Some(term) = spec.exclusions.iter().find(|t| contains_term(&fact.subject, t)) {
                out.push(Violation {
                    subcategory: fact.group.clone(),
                    level,
                    fact_index: i,
                    subject: fact.subject.clone(),
                    term: term.clone(),
                    term_subcategory: spec.name.clone(),
                });
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubcategorySummary {
    pub name: String,
    pub facts: usize,
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategorySummary {
    pub category: String,
    pub relation: RelationKind,
    pub concepts: usize,
    pub total_facts: usize,
    pub subcategories: Vec<SubcategorySummary>,
    /// Correct predictions over traced-or-filtered facts, when joined.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub categories: Vec<CategorySummary>,
    /// Facts whose group is not listed in any manifest.
    pub unassigned: usize,
}

/// Per-category and per-subcategory counts. `correct` optionally maps a
/// subcategory name to its number of correctly predicted facts.
pub fn summarize(
    facts: &[FactRecord],
    manifests: &[CategoryManifest],
    correct: Option<&HashMap<String, usize>>,
) -> DatasetSummary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for f in facts {
        *counts.entry(f.group.as_str()).or_default() += 1;
    }
    let mut assigned: BTreeMap<&str, ()> = BTreeMap::new();
    let categories = manifests
        .iter()
        .map(|m| {
            let subcategories: Vec<SubcategorySummary> = m
                .subcategories
                .iter()
                .map(|s| {
                    assigned.insert(s.name.as_str(), ());
                    SubcategorySummary {
                        name: s.name.clone(),
                        facts: counts.get(s.name.as_str()).copied().unwrap_or(0),
                        correct: correct.map(|c| c.get(&s.name).copied().unwrap_or(0)),
                    }
                })
                .collect();
            let total_facts = subcategories.iter().map(|s| s.facts).sum();
            let accuracy = correct.and_then(|_| {
                let right: usize = subcategories.iter().filter_map(|s| s.correct).sum();
                (total_facts > 0).then(|| right as f64 / total_facts as f64)
            });
            CategorySummary {
                category: m.category.clone(),
                relation: m.relation,
                concepts: m.subcategories.len(),
                total_facts,
                subcategories,
                accuracy,
            }
        })
        .collect();
    let unassigned = counts
        .iter()
        .filter(|(g, _)| !assigned.contains_key(*g))
        .map(|(_, n)| n)
        .sum();
    DatasetSummary { categories, unassigned }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BRONCHI: &str = r#"{"known_id": "NONE", "full_fact": "The first bronchi to branch from the trachea are the right and left main bronchi", "subject": "bronchi", "attribute": "bronchi", "prediction": "bronchi", "prompt": "The first bronchi to branch from the trachea are the right and left main", "group": "Respiratory", "relation_id": "NONE", "template": "NONE"}"#;

    fn fact(group: &str, subject: &str) -> FactRecord {
        FactRecord {
            known_id: None,
            full_fact: format!("{subject} is a thing"),
            subject: subject.into(),
            attribute: "thing".into(),
            prediction: "thing".into(),
            prompt: format!("{subject} is a"),
            group: group.into(),
            relation_id: None,
            template: None,
        }
    }

    #[test]
    fn bronchi_record_parses_and_validates() {
        let parsed = parse_facts_str(BRONCHI);
        assert!(parsed.errors.is_empty());
        let r = &parsed.records[0].1;
        assert_eq!(r.subject, "bronchi");
        assert_eq!(r.prediction, "bronchi");
        assert_eq!(r.known_id.as_deref(), Some("NONE"));
        assert!(validate_fact(r).is_empty());
    }

    #[test]
    fn missing_field_is_named() {
        let line = BRONCHI.replace("\"prompt\"", "\"prompt_\"");
        let parsed = parse_facts_str(&format!("{BRONCHI}\n{line}\n"));
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.errors[0].line, 2);
        assert_eq!(parsed.errors[0].field, "prompt");
    }

    #[test]
    fn numeric_known_id_is_accepted() {
        let line = BRONCHI.replace("\"known_id\": \"NONE\"", "\"known_id\": 17");
        let parsed = parse_facts_str(&line);
        assert_eq!(parsed.records[0].1.known_id.as_deref(), Some("17"));
    }

    #[test]
    fn validation_issues() {
        let mut r = fact("X", "Oslo");
        r.prompt = "The capital is".into();
        let issues = validate_fact(&r);
        assert!(issues.contains(&Issue::SubjectNotInPrompt));
        assert!(issues.contains(&Issue::PromptNotPrefix));

        let mut r = fact("X", "Oslo");
        r.full_fact = format!("{}   {}", r.prompt, "a b c d e f g h i j k l m n o p q");
        let issues = validate_fact(&r);
        assert_eq!(issues, vec![Issue::WordLimitExceeded { words: 20 }]);
        assert!(issues[0].is_warning());

        let mut r = fact("X", "Oslo");
        r.prediction = " ".into();
        assert_eq!(validate_fact(&r), vec![Issue::EmptyField { field: "prediction" }]);
    }

    #[test]
    fn term_matching_is_word_based() {
        assert!(contains_term("The American crow", "american crow"));
        assert!(contains_term("crows and crow", "Crow"));
        assert!(!contains_term("crowbar", "crow"));
        assert!(!contains_term("anything", ""));
    }

    fn birds() -> CategoryManifest {
        let levels = [
            ("Am. Crow", vec!["American crow"]),
            ("Corvus", vec!["Corvus", "raven"]),
            ("Corvidae", vec!["jay", "magpie"]),
            ("Passeriformes", vec!["sparrow"]),
            ("Aves", vec!["eagle"]),
            ("Chordata (Birds)", vec!["shark"]),
            ("Anamalia", vec!["sponge"]),
            ("Eukaryota", vec!["yeast"]),
        ];
        CategoryManifest {
            category: "Birds".into(),
            relation: RelationKind::Taxonomic,
            subcategories: levels
                .into_iter()
                .map(|(n, t)| SubcategorySpec {
                    name: n.into(),
                    exclusions: t.into_iter().map(String::from).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn chordata_fact_about_crow_violates() {
        let m = birds();
        m.check().unwrap();
        let facts = vec![
            fact("Chordata (Birds)", "American crow"),
            fact("Am. Crow", "American crow"),
            fact("Eukaryota", "yeast"),
            fact("Eukaryota", "magpie"),
        ];
        let v = check_mutual_exclusivity(&facts, &m);
        assert_eq!(v.len(), 2);
        assert_eq!((v[0].fact_index, v[0].term_subcategory.as_str()), (0, "Am. Crow"));
        assert_eq!((v[1].fact_index, v[1].term.as_str()), (3, "magpie"));
    }

    #[test]
    fn taxonomy_needs_eight_levels() {
        let mut m = birds();
        m.subcategories.pop();
        assert!(matches!(m.check(), Err(ManifestError::LevelCount { found: 7, .. })));
    }

    #[test]
    fn summary_of_empty_dataset_is_zero() {
        let s = summarize(&[], &[birds()], None);
        assert_eq!(s.categories[0].concepts, 8);
        assert_eq!(s.categories[0].total_facts, 0);
        assert_eq!(s.unassigned, 0);
        assert!(s.categories[0].accuracy.is_none());
    }

    #[test]
    fn summary_joins_accuracy() {
        let facts = vec![fact("Corvus", "raven"), fact("Corvus", "rook"), fact("Other", "x")];
        let correct = HashMap::from([("Corvus".to_string(), 1usize)]);
        let s = summarize(&facts, &[birds()], Some(&correct));
        let c = &s.categories[0];
        assert_eq!(c.total_facts, 2);
        assert_eq!(c.subcategories[1].correct, Some(1));
        assert_eq!(c.accuracy, Some(0.5));
        assert_eq!(s.unassigned, 1);
    }
}
