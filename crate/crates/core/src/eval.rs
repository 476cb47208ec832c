//! TREC-style evaluation: qrels, ranked runs and the P@k, nDCG@k, MAP and
//! RR metrics. Every metric averages over the union of run and qrels
//! queries; unjudged documents count as irrelevant.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Graded judgments on the 0..=3 scale.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u8>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, doc_id: impl Into<String>, grade: i64) -> Result<()> {
        let (qid, doc_id) = (qid.into(), doc_id.into());
        if !(0..=3).contains(&grade) {
            return Err(Error::invalid(format!(
                "grade {grade} for ({qid}, {doc_id}) outside 0..=3"
            )));
        }
        let docs = self.grades.entry(qid.clone()).or_default();
        if docs.insert(doc_id.clone(), grade as u8).is_some() {
            return Err(Error::invalid(format!("duplicate judgment for ({qid}, {doc_id})")));
        }
        Ok(())
    }

    pub fn from_entries<I, Q, D>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Q, D, i64)>,
        Q: Into<String>,
        D: Into<String>,
    {
        let mut q = Qrels::new();
        for (qid, doc, g) in entries {
            q.insert(qid, doc, g)?;
        }
        Ok(q)
    }

    /// Grade of a document, 0 when unjudged.
    pub fn grade(&self, qid: &str, doc_id: &str) -> u8 {
        self.grades.get(qid).and_then(|d| d.get(doc_id)).copied().unwrap_or(0)
    }

    pub fn judged(&self, qid: &str) -> impl Iterator<Item = (&str, u8)> {
        self.grades
            .get(qid)
            .into_iter()
            .flat_map(|d| d.iter().map(|(k, &g)| (k.as_str(), g)))
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    /// `(qid, doc_id, grade)` in qid then doc id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, u8)> {
        self.grades
            .iter()
            .flat_map(|(q, d)| d.iter().map(move |(doc, &g)| (q.as_str(), doc.as_str(), g)))
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Grades 2 and 3 are relevant; 0 and 1 are not.
pub const RELEVANT_GRADE: u8 = 2;

/// Relevant-document sets per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BinaryQrels {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

pub fn binarize_qrels(q: &Qrels) -> BinaryQrels {
    let mut relevant: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for qid in q.queries() {
        let set = q
            .judged(qid)
            .filter(|&(_, g)| g >= RELEVANT_GRADE)
            .map(|(d, _)| d.to_string())
            .collect();
        relevant.insert(qid.to_string(), set);
    }
    BinaryQrels { relevant }
}

impl BinaryQrels {
    pub fn relevant(&self, qid: &str) -> impl Iterator<Item = &str> {
        self.relevant
            .get(qid)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }
}

/// Binary relevance view shared by graded and binarized qrels.
pub trait Judgments {
    fn is_relevant(&self, qid: &str, doc_id: &str) -> bool;
    fn num_relevant(&self, qid: &str) -> usize;
    fn judged_queries(&self) -> Vec<&str>;
}

impl Judgments for BinaryQrels {
    fn is_relevant(&self, qid: &str, doc_id: &str) -> bool {
        self.relevant.get(qid).is_some_and(|s| s.contains(doc_id))
    }

    fn num_relevant(&self, qid: &str) -> usize {
        self.relevant.get(qid).map_or(0, BTreeSet::len)
    }

    fn judged_queries(&self) -> Vec<&str> {
        self.relevant.keys().map(String::as_str).collect()
    }
}

impl Judgments for Qrels {
    fn is_relevant(&self, qid: &str, doc_id: &str) -> bool {
        self.grade(qid, doc_id) >= RELEVANT_GRADE
    }

    fn num_relevant(&self, qid: &str) -> usize {
        self.judged(qid).filter(|&(_, g)| g >= RELEVANT_GRADE).count()
    }

    fn judged_queries(&self) -> Vec<&str> {
        self.queries().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Sorts by score descending, ties by doc id ascending, and assigns ranks.
pub fn rank_candidates<S: AsRef<str>>(scores: &[(S, f64)]) -> Result<Vec<RankedEntry>> {
    let mut seen = HashSet::new();
    for (d, s) in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("score {s} for document {}", d.as_ref())));
        }
        if !seen.insert(d.as_ref()) {
            return Err(Error::invalid(format!("duplicate candidate {}", d.as_ref())));
        }
    }
    let mut v: Vec<(&str, f64)> = scores.iter().map(|(d, s)| (d.as_ref(), *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(v.into_iter()
        .enumerate()
        .map(|(i, (d, s))| RankedEntry {
            doc_id: d.to_string(),
            score: s,
            rank: i + 1,
        })
        .collect())
}

/// Ranked lists per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedRun {
    lists: BTreeMap<String, Vec<RankedEntry>>,
}

impl RankedRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a query's list after checking ranks run 1, 2, …, scores do not
    /// increase and doc ids are unique.
    pub fn insert(&mut self, qid: impl Into<String>, entries: Vec<RankedEntry>) -> Result<()> {
        let qid = qid.into();
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::invalid(format!(
                    "query {qid}: rank {} at position {}",
                    e.rank,
                    i + 1
                )));
            }
            if i > 0 && e.score > entries[i - 1].score {
                return Err(Error::invalid(format!("query {qid}: score rises at rank {}", e.rank)));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::invalid(format!("query {qid}: duplicate doc {}", e.doc_id)));
            }
        }
        if self.lists.insert(qid.clone(), entries).is_some() {
            return Err(Error::invalid(format!("query {qid} ranked twice")));
        }
        Ok(())
    }

    pub fn insert_scores<S: AsRef<str>>(&mut self, qid: impl Into<String>, scores: &[(S, f64)]) -> Result<()> {
        let ranked = rank_candidates(scores)?;
        self.insert(qid, ranked)
    }

    pub fn get(&self, qid: &str) -> &[RankedEntry] {
        self.lists.get(qid).map_or(&[], Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.lists.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[RankedEntry])> {
        self.lists.iter().map(|(q, v)| (q.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gain {
    /// `2^rel − 1`
    #[default]
    Exp,
    /// `rel`
    Linear,
}

impl Gain {
    pub fn apply(self, grade: u8) -> f64 {
        match self {
            Gain::Exp => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => grade as f64,
        }
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp" => Ok(Gain::Exp),
            "linear" => Ok(Gain::Linear),
            _ => Err(Error::invalid(format!("unknown gain {s:?}; expected exp or linear"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

impl MetricReport {
    fn from_values(name: String, per_query: BTreeMap<String, f64>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::invalid(format!("{name}: no queries to evaluate")));
        }
        let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
        Ok(MetricReport { name, per_query, mean })
    }
}

fn query_union<'a>(run: &'a RankedRun, judged: Vec<&'a str>) -> BTreeSet<&'a str> {
    let known: HashSet<&str> = judged.iter().copied().collect();
    for q in run.queries().filter(|q| !known.contains(q)) {
        log::info!("query {q} has no judgments; counted with zero relevant documents");
    }
    run.queries().chain(judged).collect()
}

fn per_query<J, F>(name: String, run: &RankedRun, qrels: &J, f: F) -> Result<MetricReport>
where
    J: Judgments + ?Sized,
    F: Fn(&str, &[RankedEntry]) -> f64,
{
    let values = query_union(run, qrels.judged_queries())
        .into_iter()
        .map(|q| (q.to_string(), f(q, run.get(q))))
        .collect();
    MetricReport::from_values(name, values)
}

/// Relevant documents in the top k, divided by k.
pub fn precision_at_k<J: Judgments + ?Sized>(run: &RankedRun, qrels: &J, k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::invalid("precision cutoff must be at least 1"));
    }
    per_query(format!("P@{k}"), run, qrels, |q, list| {
        let hits = list.iter().take(k).filter(|e| qrels.is_relevant(q, &e.doc_id)).count();
        hits as f64 / k as f64
    })
}

/// DCG@k over graded judgments, normalized by the ideal ordering of all
/// judged documents under the same gain.
pub fn ndcg_at_k(run: &RankedRun, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::invalid("nDCG cutoff must be at least 1"));
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    per_query(format!("nDCG@{k}"), run, qrels, |q, list| {
        let dcg: f64 = list
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, e)| gain.apply(qrels.grade(q, &e.doc_id)) / discount(i))
            .sum();
        let mut ideal: Vec<u8> = qrels.judged(q).map(|(_, g)| g).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain.apply(g) / discount(i))
            .sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    })
}

/// Mean over queries of average precision at full run depth.
pub fn mean_average_precision<J: Judgments + ?Sized>(run: &RankedRun, qrels: &J) -> Result<MetricReport> {
    per_query("MAP".to_string(), run, qrels, |q, list| {
        let total = qrels.num_relevant(q);
        if total == 0 {
            log::debug!("query {q} has no relevant documents; AP = 0");
            return 0.0;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (i, e) in list.iter().enumerate() {
            if qrels.is_relevant(q, &e.doc_id) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / total as f64
    })
}

pub fn mean_reciprocal_rank<J: Judgments + ?Sized>(run: &RankedRun, qrels: &J) -> Result<MetricReport> {
    per_query("RR".to_string(), run, qrels, |q, list| {
        list.iter()
            .position(|e| qrels.is_relevant(q, &e.doc_id))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// The four headline metrics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub precision: MetricReport,
    pub ndcg: MetricReport,
    pub map: MetricReport,
    pub rr: MetricReport,
}

pub fn evaluate(run: &RankedRun, qrels: &Qrels, k: usize, gain: Gain) -> Result<Evaluation> {
    let binary = binarize_qrels(qrels);
    Ok(Evaluation {
        precision: precision_at_k(run, &binary, k)?,
        ndcg: ndcg_at_k(run, qrels, k, gain)?,
        map: mean_average_precision(run, &binary)?,
        rr: mean_reciprocal_rank(run, &binary)?,
    })
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in [&self.precision, &self.ndcg, &self.map, &self.rr] {
            writeln!(f, "{}\tall\t{:.4}", m.name, m.mean)?;
        }
        Ok(())
    }
}
