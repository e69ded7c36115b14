//! Train/test leakage analysis: exact image duplicates via MD5 of canonical
//! PPM bytes, and lexical near-duplicates via Jaccard similarity of word
//! 3-gram sets over detail captions.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{canonical_ppm_bytes, words_of, DataError, SampleRecord};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LeakageConfig {
    /// Flag test/train caption pairs at or above this Jaccard similarity.
    pub jaccard_threshold: f64,
    /// Shingle width in words.
    pub ngram: usize,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        LeakageConfig {
            jaccard_threshold: 0.8,
            ngram: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexicalPair {
    pub test_id: String,
    pub train_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageReport {
    /// (test id, train id) pairs whose canonical image bytes share an MD5.
    pub exact_duplicate_pairs: Vec<(String, String)>,
    pub lexical_pairs_over_threshold: Vec<LexicalPair>,
    pub jaccard_threshold: f64,
    pub ngram: usize,
    pub pairs_checked: usize,
    pub max_lexical_score: f64,
    pub mean_lexical_score: f64,
}

impl LeakageReport {
    pub fn clean(&self) -> bool {
        self.exact_duplicate_pairs.is_empty()
    }
}

fn shingles(text: &str, n: usize) -> BTreeSet<String> {
    let words = words_of(text);
    if words.len() < n {
        return words.into_iter().collect();
    }
    words.windows(n).map(|w| w.join(" ")).collect()
}

pub(crate) fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn image_digest(record: &SampleRecord, base_dir: &Path) -> Result<[u8; 16], DataError> {
    let image = record.load_image(base_dir)?;
    Ok(md5::compute(canonical_ppm_bytes(&image)).0)
}

/// Cross-check every test record against every train record.
pub fn leakage_check(
    train: &[SampleRecord],
    train_dir: &Path,
    test: &[SampleRecord],
    test_dir: &Path,
    cfg: &LeakageConfig,
) -> Result<LeakageReport, DataError> {
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Config(
            "leakage check needs nonempty train and test sets".into(),
        ));
    }
    let mut train_digests: HashMap<[u8; 16], Vec<&str>> = HashMap::new();
    for record in train {
        train_digests
            .entry(image_digest(record, train_dir)?)
            .or_default()
            .push(&record.id);
    }
    let mut exact_duplicate_pairs = Vec::new();
    for record in test {
        if let Some(train_ids) = train_digests.get(&image_digest(record, test_dir)?) {
            for train_id in train_ids {
                exact_duplicate_pairs.push((record.id.clone(), train_id.to_string()));
            }
        }
    }
    exact_duplicate_pairs.sort();

    let train_shingles: Vec<BTreeSet<String>> = train
        .iter()
        .map(|r| shingles(&r.detail_caption, cfg.ngram))
        .collect();
    let mut lexical_pairs = Vec::new();
    let mut pairs_checked = 0usize;
    let mut max_score: f64 = 0.0;
    let mut sum_score = 0.0;
    for test_record in test {
        let test_sh = shingles(&test_record.detail_caption, cfg.ngram);
        for (train_record, train_sh) in train.iter().zip(&train_shingles) {
            let score = jaccard(&test_sh, train_sh);
            pairs_checked += 1;
            sum_score += score;
            max_score = max_score.max(score);
            if score >= cfg.jaccard_threshold {
                lexical_pairs.push(LexicalPair {
                    test_id: test_record.id.clone(),
                    train_id: train_record.id.clone(),
                    score,
                });
            }
        }
    }
    lexical_pairs.sort_by(|a, b| {
        (&a.test_id, &a.train_id).cmp(&(&b.test_id, &b.train_id))
    });

    Ok(LeakageReport {
        exact_duplicate_pairs,
        lexical_pairs_over_threshold: lexical_pairs,
        jaccard_threshold: cfg.jaccard_threshold,
        ngram: cfg.ngram,
        pairs_checked,
        max_lexical_score: max_score,
        mean_lexical_score: if pairs_checked == 0 {
            0.0
        } else {
            sum_score / pairs_checked as f64
        },
    })
}
