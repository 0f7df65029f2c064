//! Storytelling by retrieval: a pool of training sentences, nearest-sentence
//! lookup, duplicate-free kNN assignment and ranking evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Span, VideoRecord};
use crate::embedding::{EmbeddingModel, TrainingSet};
use crate::error::{Error, Result};
use crate::linalg::{unit_normalize, Vector};
use crate::metrics::{tokenize, TokenizedText};
use crate::resbrnn::{context_embed_clips, context_embed_matrices};

pub const DEFAULT_K: usize = 4;

/// Distinct candidate sentences with their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePool {
    texts: Vec<String>,
    tokens: Vec<TokenizedText>,
    /// Unit-normalised sentence embeddings.
    embeddings: Vec<Vector>,
    /// Videos whose stories contain the sentence.
    sources: Vec<BTreeSet<String>>,
}

impl SentencePool {
    /// Embeds every distinct sentence of `set`, in first-occurrence order.
    pub fn from_training_set(model: &EmbeddingModel, set: &TrainingSet) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut texts: Vec<String> = Vec::new();
        let mut sources: Vec<BTreeSet<String>> = Vec::new();
        for story in &set.stories {
            for t in &story.texts {
                let i = *index.entry(t.as_str()).or_insert_with(|| {
                    texts.push(t.clone());
                    sources.push(BTreeSet::new());
                    texts.len() - 1
                });
                sources[i].insert(story.video_id.clone());
            }
        }
        let embeddings = texts.iter().map(|t| model.embed_sentence(t)).collect::<Result<Vec<_>>>()?;
        SentencePool::from_parts(texts, embeddings, sources)
    }

    pub fn from_parts(texts: Vec<String>, embeddings: Vec<Vector>, sources: Vec<BTreeSet<String>>) -> Result<Self> {
        if texts.len() != embeddings.len() || texts.len() != sources.len() {
            return Err(Error::dims("SentencePool", texts.len(), embeddings.len()));
        }
        let embeddings = embeddings.iter().map(|e| unit_normalize(e)).collect::<Result<Vec<_>>>()?;
        let tokens = texts.iter().map(|t| tokenize(t)).collect();
        Ok(SentencePool {
            texts,
            tokens,
            embeddings,
            sources,
        })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn tokens(&self, i: usize) -> &TokenizedText {
        &self.tokens[i]
    }

    pub fn embedding(&self, i: usize) -> &Vector {
        &self.embeddings[i]
    }

    pub fn sources(&self, i: usize) -> &BTreeSet<String> {
        &self.sources[i]
    }

    pub fn position(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text)
    }

    /// Cosine similarity of `m` with every pool sentence.
    pub fn similarities(&self, m: &[f64]) -> Result<Vec<f64>> {
        let q = unit_normalize(m)?;
        self.embeddings.iter().map(|e| q.dot(e)).collect()
    }
}

/// Index of the most similar pool sentence; ties go to the lowest index.
pub fn nearest_sentence(m: &[f64], pool: &SentencePool) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Empty("sentence pool".into()));
    }
    let sims = pool.similarities(m)?;
    let mut best = 0;
    for (j, &s) in sims.iter().enumerate().skip(1) {
        if s > sims[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Indices of the `k` most similar pool sentences, best first, ties by index.
pub fn k_nearest(sims: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Minimum-cost assignment of every row to a distinct column. `None`
/// entries are forbidden. Requires `rows <= cols`; returns the column of
/// each row, or `None` when no assignment avoids forbidden entries.
pub fn min_cost_assignment(cost: &[Vec<Option<f64>>]) -> Result<Option<Vec<usize>>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Some(Vec::new()));
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::validation("cost matrix", "rows differ in length"));
    }
    if n > m {
        return Err(Error::validation(
            "cost matrix",
            format!("{n} rows cannot be matched to {m} columns"),
        ));
    }
    if cost.iter().flatten().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // Shortest augmenting paths with potentials; index 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                if let Some(c) = cost[i0 - 1][j - 1] {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if delta == inf {
                return Ok(None);
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(Some(assignment))
}

/// A retrieved story: one pool sentence per clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub entries: Vec<StoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryEntry {
    pub pool_index: usize,
    pub text: String,
    pub similarity: f64,
    pub span: Option<Span>,
}

impl Story {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenizedText> {
        self.entries.iter().map(|e| tokenize(&e.text)).collect()
    }

    /// Sum of `1 - cosine` over the story.
    pub fn total_distance(&self) -> f64 {
        self.entries.iter().map(|e| 1.0 - e.similarity).sum()
    }
}

/// Duplicate-free retrieval: each clip draws from its `k` nearest sentences
/// and the selection with minimum total distance is returned. When the
/// lists admit no duplicate-free selection `k` is doubled.
pub fn knn_story(m: &[Vector], pool: &SentencePool, k: usize) -> Result<Story> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if pool.len() < m.len() {
        return Err(Error::validation(
            "sentence pool",
            format!("{} sentences cannot cover {} clips without duplicates", pool.len(), m.len()),
        ));
    }
    let sims = m.iter().map(|q| pool.similarities(q)).collect::<Result<Vec<_>>>()?;
    let mut k = k;
    loop {
        let lists: Vec<Vec<usize>> = sims.iter().map(|s| k_nearest(s, k)).collect();
        let columns: Vec<usize> = lists.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let cost: Vec<Vec<Option<f64>>> = lists
            .iter()
            .zip(&sims)
            .map(|(l, s)| columns.iter().map(|&j| l.contains(&j).then(|| 1.0 - s[j])).collect())
            .collect();
        let solved = if columns.len() >= m.len() {
            min_cost_assignment(&cost)?
        } else {
            None
        };
        if let Some(assign) = solved {
            let entries = assign
                .iter()
                .zip(&sims)
                .map(|(&c, s)| {
                    let j = columns[c];
                    StoryEntry {
                        pool_index: j,
                        text: pool.text(j).to_owned(),
                        similarity: s[j],
                        span: None,
                    }
                })
                .collect();
            return Ok(Story { entries });
        }
        if k >= pool.len() {
            // unreachable: with every sentence allowed the pool covers all clips
            return Err(Error::validation("sentence pool", "no duplicate-free selection exists"));
        }
        k = (2 * k).min(pool.len());
    }
}

/// Context-aware embeddings of `spans`, then duplicate-free retrieval.
pub fn tell_story(model: &EmbeddingModel, pool: &SentencePool, video: &VideoRecord, spans: &[Span], k: usize) -> Result<Story> {
    if spans.is_empty() {
        return Ok(Story { entries: Vec::new() });
    }
    let m = context_embed_clips(&model.encoders, &model.context, video, spans)?;
    let mut story = knn_story(&m, pool, k)?;
    for (e, s) in story.entries.iter_mut().zip(spans) {
        e.span = Some(*s);
    }
    Ok(story)
}

/// Rank (1-based) of `target` when the pool is sorted by similarity, with
/// ties ordered by index.
pub fn rank_of(sims: &[f64], target: usize) -> usize {
    let t = sims[target];
    1 + sims.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < target)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub ranks: Vec<usize>,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub median_rank: f64,
}

impl RankingReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Empty("no queries to rank".into()));
        }
        let n = ranks.len() as f64;
        let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        let mid = sorted.len() / 2;
        let median_rank = if sorted.len() % 2 == 1 {
            sorted[mid] as f64
        } else {
            (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
        };
        Ok(RankingReport {
            recall_at_1: recall(1),
            recall_at_5: recall(5),
            recall_at_10: recall(10),
            median_rank,
            ranks,
        })
    }
}

/// Which clip embeddings rank the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Clip encoder only.
    Local,
    /// Clip encoder followed by the context network over the story.
    Context,
}

/// Pool entries counted as correct for each clip of `set`: the paired
/// sentence, plus every sentence of the same video (any annotator) whose
/// span overlaps the clip's span in at least one frame.
pub fn ground_truth(set: &TrainingSet, pool: &SentencePool) -> Result<Vec<Vec<BTreeSet<usize>>>> {
    let lookup = |text: &str| {
        pool.position(text)
            .ok_or_else(|| Error::UnknownId(format!("sentence {text:?} is not in the pool")))
    };
    let mut by_video: BTreeMap<&str, Vec<(Span, &str)>> = BTreeMap::new();
    for story in &set.stories {
        let entry = by_video.entry(story.video_id.as_str()).or_default();
        entry.extend(story.spans.iter().copied().zip(story.texts.iter().map(String::as_str)));
    }
    set.stories
        .iter()
        .map(|story| {
            story
                .texts
                .iter()
                .enumerate()
                .map(|(c, text)| {
                    let mut gt = BTreeSet::from([lookup(text)?]);
                    if let Some(span) = story.spans.get(c) {
                        for (other, t) in &by_video[story.video_id.as_str()] {
                            if other.start < span.end && span.start < other.end {
                                gt.insert(lookup(t)?);
                            }
                        }
                    }
                    Ok(gt)
                })
                .collect()
        })
        .collect()
}

/// Rank of the best-ranked correct sentence (see [`ground_truth`]) for every
/// clip of `set`.
pub fn clip_to_sentence_ranks(
    model: &EmbeddingModel,
    set: &TrainingSet,
    pool: &SentencePool,
    kind: EmbeddingKind,
) -> Result<Vec<Vec<usize>>> {
    let truth = ground_truth(set, pool)?;
    let mut out = Vec::with_capacity(set.stories.len());
    for (story, gt) in set.stories.iter().zip(&truth) {
        let emb = match kind {
            EmbeddingKind::Local => story.clips.iter().map(|c| model.embed_clip(c)).collect::<Result<Vec<_>>>()?,
            EmbeddingKind::Context => context_embed_matrices(&model.encoders, &model.context, &story.clips)?,
        };
        let mut ranks = Vec::with_capacity(emb.len());
        for (m, targets) in emb.iter().zip(gt) {
            let sims = pool.similarities(m)?;
            ranks.push(targets.iter().map(|&t| rank_of(&sims, t)).min().unwrap_or(usize::MAX));
        }
        out.push(ranks);
    }
    Ok(out)
}

pub fn evaluate_retrieval(model: &EmbeddingModel, set: &TrainingSet, pool: &SentencePool, kind: EmbeddingKind) -> Result<RankingReport> {
    RankingReport::from_ranks(clip_to_sentence_ranks(model, set, pool, kind)?.into_iter().flatten().collect())
}

/// One line of a story file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub video_id: String,
    pub index: usize,
    pub text: String,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub score: f64,
}

impl StoryRecord {
    pub fn from_story(video_id: &str, story: &Story) -> Vec<StoryRecord> {
        story
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| StoryRecord {
                video_id: video_id.to_owned(),
                index: i,
                text: e.text.clone(),
                start: e.span.map(|s| s.start),
                end: e.span.map(|s| s.end),
                score: e.similarity,
            })
            .collect()
    }
}

pub fn write_story_records(path: &Path, records: &[StoryRecord]) -> Result<()> {
    crate::data::write_jsonl(path, records)
}

pub fn read_story_records(path: &Path) -> Result<Vec<StoryRecord>> {
    crate::data::read_jsonl(path)
}

/// Plain-text rendering, one sentence per line with its span.
pub fn render_story<W: Write>(mut out: W, video_id: &str, story: &Story) -> std::io::Result<()> {
    writeln!(out, "{video_id}:")?;
    for e in &story.entries {
        match e.span {
            Some(s) => writeln!(out, "  [{:>4}, {:>4})  {}", s.start, s.end, e.text)?,
            None => writeln!(out, "  {}", e.text)?,
        }
    }
    Ok(())
}
