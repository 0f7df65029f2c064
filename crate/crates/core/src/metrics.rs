//! BLEU-1..4, ROUGE-L and CIDEr over whitespace-tokenized stories.
//!
//! CIDEr follows the consensus definition: for each n in 1..=4 the candidate
//! and every reference become tf-idf weighted n-gram vectors, the per-n score
//! is the mean cosine similarity against the references, and the final score
//! is the mean over n multiplied by 10.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;
/// ROUGE-L recall weight (beta), as in the reference evaluation code.
pub const ROUGE_BETA: f64 = 1.2;
pub const IDF_SCHEMA: &str = "vidstory.idf/v1";

/// Lowercase, punctuation-free tokens. Never contains empty tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenizedText(Vec<String>);

impl TokenizedText {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a TokenizedText>) -> TokenizedText {
        TokenizedText(parts.into_iter().flat_map(|p| p.0.iter().cloned()).collect())
    }
    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
/// Apostrophes are dropped without splitting ("don't" -> "dont").
pub fn tokenize(text: &str) -> TokenizedText {
    let cleaned: String = text
        .chars()
        .filter(|c| *c != '\'')
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    TokenizedText(cleaned.split_whitespace().map(str::to_owned).collect())
}

type NgramCounts = HashMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> NgramCounts {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

/// BLEU-1..=`max_n` of one candidate against a reference set: clipped n-gram
/// precision, geometric mean over orders, brevity penalty against the
/// closest reference length (ties take the shorter one).
pub fn bleu(candidate: &TokenizedText, references: &[TokenizedText], max_n: usize) -> Result<Vec<f64>> {
    if references.is_empty() {
        return Err(Error::Empty("BLEU references".into()));
    }
    if candidate.is_empty() {
        return Ok(vec![0.0; max_n]);
    }
    let c_len = candidate.len();
    let r_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c_len), l))
        .expect("nonempty");
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };

    let mut log_sum = 0.0;
    let mut scores = Vec::with_capacity(max_n);
    let mut dead = false;
    for n in 1..=max_n {
        let cand = ngrams(candidate.tokens(), n);
        let total: usize = cand.values().sum();
        let mut max_ref: NgramCounts = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r.tokens(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        if total == 0 || clipped == 0 {
            dead = true;
        }
        if dead {
            scores.push(0.0);
            continue;
        }
        log_sum += (clipped as f64 / total as f64).ln();
        scores.push(bp * (log_sum / n as f64).exp());
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, maximized over references.
pub fn rouge_l(candidate: &TokenizedText, references: &[TokenizedText]) -> f64 {
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            if candidate.is_empty() || r.is_empty() {
                return 0.0;
            }
            let l = lcs_len(candidate.tokens(), r.tokens()) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .fold(0.0, f64::max)
}

/// Inverse document frequencies for n = 1..=4 over a declared corpus, one
/// document per story: `idf = ln((D + 1) / (1 + df))`, which is never
/// negative. N-grams absent from the corpus get `ln(D + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIdf {
    schema: String,
    documents: usize,
    /// Index `n - 1`; keys are n-grams joined with single spaces.
    weights: Vec<HashMap<String, f64>>,
    unseen: f64,
}

impl CorpusIdf {
    pub fn build(documents: &[TokenizedText]) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Empty("CIDEr idf corpus".into()));
        }
        let d = documents.len() as f64;
        let mut weights = Vec::with_capacity(MAX_NGRAM);
        for n in 1..=MAX_NGRAM {
            let mut df: HashMap<String, usize> = HashMap::new();
            for doc in documents {
                for g in ngrams(doc.tokens(), n).into_keys() {
                    *df.entry(g.join(" ")).or_insert(0) += 1;
                }
            }
            weights.push(df.into_iter().map(|(g, c)| (g, ((d + 1.0) / (1.0 + c as f64)).ln())).collect());
        }
        Ok(CorpusIdf {
            schema: IDF_SCHEMA.to_owned(),
            documents: documents.len(),
            weights,
            unseen: (d + 1.0).ln(),
        })
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn weight(&self, gram: &[String]) -> f64 {
        let n = gram.len();
        if n == 0 || n > self.weights.len() {
            return 0.0;
        }
        self.weights[n - 1].get(&gram.join(" ")).copied().unwrap_or(self.unseen)
    }

    /// Every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> CorpusIdf {
        CorpusIdf {
            schema: self.schema.clone(),
            documents: self.documents,
            weights: self
                .weights
                .iter()
                .map(|m| m.iter().map(|(k, v)| (k.clone(), v * c)).collect())
                .collect(),
            unseen: self.unseen * c,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let idf: CorpusIdf = serde_json::from_str(&s).map_err(|e| Error::json(path.display().to_string(), e))?;
        if idf.schema != IDF_SCHEMA {
            return Err(Error::validation("schema", format!("expected {IDF_SCHEMA}, found {}", idf.schema)));
        }
        if idf.weights.len() != MAX_NGRAM {
            return Err(Error::validation("weights", format!("expected {MAX_NGRAM} n-gram orders")));
        }
        Ok(idf)
    }

    fn vector(&self, tokens: &[String], n: usize) -> HashMap<Vec<String>, f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let w = self.weight(&g);
                (g, c as f64 * w)
            })
            .collect()
    }
}

fn sparse_cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// CIDEr in `[0, 10]`.
pub fn cider(candidate: &TokenizedText, references: &[TokenizedText], idf: &CorpusIdf) -> Result<f64> {
    if idf.documents == 0 || idf.weights.len() != MAX_NGRAM {
        return Err(Error::InvalidConfig("CIDEr needs an idf table built over a nonempty corpus".into()));
    }
    if references.is_empty() {
        return Err(Error::Empty("CIDEr references".into()));
    }
    let mut total = 0.0;
    for n in 1..=MAX_NGRAM {
        let c = idf.vector(candidate.tokens(), n);
        let per_ref: f64 = references.iter().map(|r| sparse_cosine(&c, &idf.vector(r.tokens(), n))).sum();
        total += per_ref / references.len() as f64;
    }
    Ok(CIDER_SCALE * total / MAX_NGRAM as f64)
}

/// Scores of one generated story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// `cider * 100`, the scale of published result tables.
    pub cider_percent: f64,
}

impl MetricReport {
    pub fn zeros() -> Self {
        MetricReport {
            bleu1: 0.0,
            bleu2: 0.0,
            bleu3: 0.0,
            bleu4: 0.0,
            rouge_l: 0.0,
            cider: 0.0,
            cider_percent: 0.0,
        }
    }

    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::zeros();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            bleu1: avg(|r| r.bleu1),
            bleu2: avg(|r| r.bleu2),
            bleu3: avg(|r| r.bleu3),
            bleu4: avg(|r| r.bleu4),
            rouge_l: avg(|r| r.rouge_l),
            cider: avg(|r| r.cider),
            cider_percent: avg(|r| r.cider_percent),
        }
    }
}

/// Whether stories are scored as one concatenated token stream or sentence
/// by sentence (position `i` of the candidate against position `i` of each
/// reference, averaged).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    #[default]
    Story,
    PerSentence,
}

fn score_tokens(candidate: &TokenizedText, refs: &[TokenizedText], idf: &CorpusIdf) -> Result<MetricReport> {
    let b = bleu(candidate, refs, MAX_NGRAM)?;
    let c = cider(candidate, refs, idf)?;
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(candidate, refs),
        cider: c,
        cider_percent: c * 100.0,
    })
}

/// Scores a generated story (list of sentences) against reference stories.
pub fn score_story(generated: &[TokenizedText], references: &[Vec<TokenizedText>], idf: &CorpusIdf) -> Result<MetricReport> {
    score_story_with(generated, references, idf, ScoringMode::Story)
}

pub fn score_story_with(
    generated: &[TokenizedText],
    references: &[Vec<TokenizedText>],
    idf: &CorpusIdf,
    mode: ScoringMode,
) -> Result<MetricReport> {
    if references.is_empty() {
        return Err(Error::Empty("reference stories".into()));
    }
    match mode {
        ScoringMode::Story => {
            let cand = TokenizedText::concat(generated);
            let refs: Vec<TokenizedText> = references.iter().map(TokenizedText::concat).collect();
            score_tokens(&cand, &refs, idf)
        }
        ScoringMode::PerSentence => {
            if generated.is_empty() {
                return score_tokens(&TokenizedText(vec![]), &[TokenizedText(vec![])], idf);
            }
            let mut parts = Vec::with_capacity(generated.len());
            for (i, sent) in generated.iter().enumerate() {
                let refs: Vec<TokenizedText> = references.iter().filter_map(|r| r.get(i).cloned()).collect();
                if refs.is_empty() {
                    parts.push(MetricReport::zeros());
                } else {
                    parts.push(score_tokens(sent, &refs, idf)?);
                }
            }
            Ok(MetricReport::mean(&parts))
        }
    }
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub video_id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

pub fn write_reports_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "cider_percent"])?;
    for r in rows {
        let m = &r.report;
        w.write_record([
            r.video_id.clone(),
            m.bleu1.to_string(),
            m.bleu2.to_string(),
            m.bleu3.to_string(),
            m.bleu4.to_string(),
            m.rouge_l.to_string(),
            m.cider.to_string(),
            m.cider_percent.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> TokenizedText {
        tokenize(s)
    }

    fn corpus() -> CorpusIdf {
        CorpusIdf::build(&[
            t("the cat sat on the mat today"),
            t("a dog runs across the park quickly"),
            t("people cut the birthday cake at home"),
        ])
        .unwrap()
    }

    #[test]
    fn tokenize_rule() {
        assert_eq!(t("A dog runs.").tokens(), &["a", "dog", "runs"]);
        assert!(t("").is_empty());
        let clean = t("the cat sat");
        assert_eq!(tokenize(&clean.join()), clean);
        assert!(t("  Hello,  WORLD!! ").tokens().iter().all(|w| !w.is_empty()));
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        let c = t("the cat sat on the mat");
        assert_eq!(bleu(&c, std::slice::from_ref(&c), 4).unwrap(), vec![1.0; 4]);
        assert_eq!(bleu(&c, &[t("dogs bark loudly")], 4).unwrap(), vec![0.0; 4]);
        assert_eq!(bleu(&t(""), std::slice::from_ref(&c), 4).unwrap(), vec![0.0; 4]);
        assert!(bleu(&c, &[], 4).is_err());
    }

    #[test]
    fn bleu_brevity_fixture() {
        // p1 = 3/3, p2 = 2/2, p3 = 1/1, no 4-grams; BP = exp(1 - 4/3)
        let b = bleu(&t("the cat sat"), &[t("the cat sat down")], 4).unwrap();
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        assert!((b[0] - bp).abs() < 1e-12);
        assert!((b[1] - bp).abs() < 1e-12);
        assert!((b[2] - bp).abs() < 1e-12);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn bleu_clipping() {
        // "the the the" vs "the cat": clipped unigram count 1 of 3
        let b = bleu(&t("the the the"), &[t("the cat")], 1).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_fixture() {
        assert_eq!(rouge_l(&t("a b c"), &[t("a b c")]), 1.0);
        assert_eq!(rouge_l(&t("a b c"), &[t("x y")]), 0.0);
        // LCS 3, P = 3/4, R = 1
        let (p, r, b2) = (0.75, 1.0, 1.44);
        let f = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&t("a b c d"), &[t("a c d")]) - f).abs() < 1e-12);
    }

    #[test]
    fn cider_cases() {
        let idf = corpus();
        let c = t("the cat sat on the mat today");
        assert!((cider(&c, std::slice::from_ref(&c), &idf).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(cider(&t("zebra xylophone"), std::slice::from_ref(&c), &idf).unwrap(), 0.0);
        let empty = CorpusIdf {
            schema: IDF_SCHEMA.into(),
            documents: 0,
            weights: vec![HashMap::new(); 4],
            unseen: 0.0,
        };
        assert!(cider(&c, std::slice::from_ref(&c), &empty).is_err());
        assert!(CorpusIdf::build(&[]).is_err());
    }

    /// Independent tf-idf recomputation over a two-story corpus.
    #[test]
    fn cider_matches_scratch_oracle() {
        let docs = [t("a b a c"), t("b c d")];
        let idf = CorpusIdf::build(&docs).unwrap();
        let cand = t("a b c");
        let refs = [t("a b a c"), t("b c d")];

        fn grams(s: &[String], n: usize) -> Vec<String> {
            if s.len() < n {
                return vec![];
            }
            (0..=s.len() - n).map(|i| s[i..i + n].join(" ")).collect()
        }
        let df = |g: &str, n: usize| docs.iter().filter(|d| grams(d.tokens(), n).iter().any(|x| x == g)).count();
        let vecf = |s: &TokenizedText, n: usize| {
            let mut m: std::collections::BTreeMap<String, f64> = Default::default();
            for g in grams(s.tokens(), n) {
                *m.entry(g).or_default() += 1.0;
            }
            for (g, v) in m.iter_mut() {
                *v *= (3.0f64 / (1.0 + df(g, n) as f64)).ln();
            }
            m
        };
        let mut total = 0.0;
        for n in 1..=4 {
            let c = vecf(&cand, n);
            let mut acc = 0.0;
            for r in &refs {
                let rv = vecf(r, n);
                let dot: f64 = c.iter().map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0)).sum();
                let nc = c.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    acc += dot / (nc * nr);
                }
            }
            total += acc / 2.0;
        }
        let oracle = 10.0 * total / 4.0;
        assert!((cider(&cand, &refs, &idf).unwrap() - oracle).abs() < 1e-12);
        assert!(oracle > 0.0);
    }

    #[test]
    fn story_scoring() {
        let idf = corpus();
        let story = vec![t("the cat sat on"), t("the mat today")];
        let refs = vec![story.clone(), vec![t("a dog runs across the park")]];
        let rep = score_story(&story, &refs, &idf).unwrap();
        assert_eq!(rep.bleu1, 1.0);
        assert_eq!(rep.rouge_l, 1.0);
        assert!(rep.cider > 0.0);
        let solo = score_story(&story, &refs[..1], &idf).unwrap();
        assert!((solo.cider - 10.0).abs() < 1e-9);
        assert!((solo.cider_percent - 1000.0).abs() < 1e-8);
        let empty = score_story(&[], &refs, &idf).unwrap();
        assert_eq!(empty, MetricReport::zeros());
        assert!(score_story(&story, &[], &idf).is_err());
        let per = score_story_with(&story, &refs[..1], &idf, ScoringMode::PerSentence).unwrap();
        assert_eq!(per.bleu1, 1.0);
    }

    #[test]
    fn idf_file_round_trip() {
        let idf = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("idf.json");
        idf.save(&p).unwrap();
        assert_eq!(CorpusIdf::load(&p).unwrap(), idf);
    }

    #[test]
    fn csv_output() {
        let rows = vec![MetricRow {
            video_id: "v1".into(),
            report: MetricReport::zeros(),
        }];
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("video_id,bleu1"));
        assert!(s.contains("v1,0,0"));
    }

    fn sentence() -> impl Strategy<Value = TokenizedText> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "d", "e", "cat", "dog"], 1..10)
            .prop_map(|w| TokenizedText(w.into_iter().collect()))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn metric_invariants(cand in sentence(), mut refs in proptest::collection::vec(sentence(), 1..4), scale in 0.1f64..10.0) {
            let idf = CorpusIdf::build(&refs).unwrap();
            let b = bleu(&cand, &refs, 4).unwrap();
            let r = rouge_l(&cand, &refs);
            let c = cider(&cand, &refs, &idf).unwrap();
            for v in &b { prop_assert!((0.0..=1.0 + 1e-12).contains(v)); }
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
            prop_assert!((0.0..=10.0 + 1e-9).contains(&c));

            let c_scaled = cider(&cand, &refs, &idf.scaled(scale)).unwrap();
            prop_assert!((c - c_scaled).abs() < 1e-9);

            refs.reverse();
            prop_assert_eq!(bleu(&cand, &refs, 4).unwrap(), b.clone());
            prop_assert!((rouge_l(&cand, &refs) - r).abs() < 1e-12);
            prop_assert!((cider(&cand, &refs, &idf).unwrap() - c).abs() < 1e-9);
        }

        #[test]
        fn exact_copy_reference_never_hurts(cand in sentence(), refs in proptest::collection::vec(sentence(), 1..4)) {
            let idf = CorpusIdf::build(&refs).unwrap();
            let b = bleu(&cand, &refs, 4).unwrap();
            let r = rouge_l(&cand, &refs);
            let mut more = refs.clone();
            more.push(cand.clone());
            let b2 = bleu(&cand, &more, 4).unwrap();
            for (x, y) in b.iter().zip(&b2) { prop_assert!(y + 1e-12 >= *x); }
            prop_assert!(rouge_l(&cand, &more) + 1e-12 >= r);
            let c = cider(&cand, &refs, &idf).unwrap();
            prop_assert!(cider(&cand, &more, &idf).unwrap() + 1e-12 >= c);
        }
    }
}
