//! Word count with a put/get shuffle: k mappers each put one partition per
//! reducer, r reducers each gather their k partitions.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::future::try_join_all;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::handlers::{from_json, sha256_hex, to_json, RefList, WC_MAP, WC_REDUCE};
use super::BenchError;
use crate::refcrypto::XdtReference;
use crate::sdk::{Sdk, SdkError};

const VOCABULARY: usize = 2000;

/// Deterministic text of at most `bytes` bytes; words follow a skewed
/// distribution so counts are interesting.
pub fn corpus(seed: u64, bytes: usize) -> String {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes);
    let mut line = 0;
    loop {
        let rank = (rng.gen::<f64>().powi(3) * VOCABULARY as f64) as usize;
        let word = word_for(rank);
        if out.len() + word.len() + 1 > bytes {
            break;
        }
        out.push_str(&word);
        line += 1;
        out.push(if line % 12 == 0 { '\n' } else { ' ' });
    }
    out
}

fn word_for(rank: usize) -> String {
    const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "be", "do", "fu", "ga", "hi", "jo", "pa", "se"];
    let mut n = rank;
    let mut w = String::new();
    loop {
        w.push_str(SYLLABLES[n % 16]);
        n /= 16;
        if n == 0 {
            return w;
        }
    }
}

pub fn count_words(text: &str) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for w in text.split_whitespace() {
        *counts.entry(w.to_owned()).or_insert(0) += 1;
    }
    counts
}

/// `word\tcount\n` lines in word order.
pub fn render(counts: &BTreeMap<String, u64>) -> String {
    counts.iter().map(|(w, c)| format!("{w}\t{c}\n")).collect()
}

fn parse(text: &str) -> Result<BTreeMap<String, u64>, SdkError> {
    let mut counts = BTreeMap::new();
    for line in text.lines() {
        let (w, c) = line.split_once('\t').ok_or_else(|| SdkError::BadRequest(format!("bad count line `{line}`")))?;
        let c: u64 = c.parse().map_err(|_| SdkError::BadRequest(format!("bad count in `{line}`")))?;
        *counts.entry(w.to_owned()).or_insert(0) += c;
    }
    Ok(counts)
}

/// Stable reducer assignment for a word.
pub fn partition_of(word: &str, reducers: u32) -> usize {
    let h = Sha256::digest(word.as_bytes());
    (u64::from_be_bytes(h[..8].try_into().expect("8 bytes")) % reducers.max(1) as u64) as usize
}

/// The mapper's output partitions, rendered.
pub fn map_partitions(text: &str, reducers: u32) -> Vec<String> {
    let mut parts = vec![BTreeMap::new(); reducers.max(1) as usize];
    for (w, c) in count_words(text) {
        parts[partition_of(&w, reducers)].insert(w, c);
    }
    parts.iter().map(render).collect()
}

/// Splits at whitespace into `k` pieces of roughly equal size.
pub fn split_corpus(text: &str, k: usize) -> Vec<&str> {
    let k = k.max(1);
    let mut pieces = Vec::with_capacity(k);
    let mut rest = text;
    for i in 0..k {
        if i == k - 1 {
            pieces.push(rest);
            break;
        }
        let target = (rest.len() / (k - i)).min(rest.len());
        let cut = rest[target..].find(char::is_whitespace).map_or(rest.len(), |p| target + p);
        let (head, tail) = rest.split_at(cut);
        pieces.push(head);
        rest = tail;
    }
    pieces
}

/// Mapper request: reducer count (4 bytes, big-endian) followed by the text.
pub fn map_request(reducers: u32, text: &str) -> Bytes {
    let mut b = Vec::with_capacity(4 + text.len());
    b.extend_from_slice(&reducers.to_be_bytes());
    b.extend_from_slice(text.as_bytes());
    Bytes::from(b)
}

pub(crate) async fn map_handler(req: Bytes, sdk: Sdk) -> Result<Bytes, SdkError> {
    if req.len() < 4 {
        return Err(SdkError::BadRequest("map request too short".into()));
    }
    let reducers = u32::from_be_bytes(req[..4].try_into().expect("4 bytes"));
    if reducers == 0 {
        return Err(SdkError::BadRequest("need at least one reducer".into()));
    }
    let text = std::str::from_utf8(&req[4..]).map_err(|e| SdkError::BadRequest(e.to_string()))?;
    let mut refs = Vec::with_capacity(reducers as usize);
    for part in map_partitions(text, reducers) {
        refs.push(sdk.put(part.into_bytes(), 1).await?.into_string());
    }
    Ok(to_json(&RefList { refs }))
}

pub(crate) async fn reduce_handler(req: Bytes, sdk: Sdk) -> Result<Bytes, SdkError> {
    let list: RefList = from_json(&req)?;
    let gets = list.refs.into_iter().map(|t| {
        let sdk = sdk.clone();
        async move { sdk.get(&XdtReference::from_token(t)).await }
    });
    let mut counts = BTreeMap::new();
    for part in try_join_all(gets).await? {
        let text = std::str::from_utf8(&part).map_err(|e| SdkError::BadRequest(e.to_string()))?;
        for (w, c) in parse(text)? {
            *counts.entry(w).or_insert(0) += c;
        }
    }
    Ok(Bytes::from(render(&counts)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordcountSpec {
    pub mappers: u32,
    pub reducers: u32,
    pub corpus_bytes: usize,
    pub seed: u64,
}

impl Default for WordcountSpec {
    fn default() -> Self {
        Self { mappers: 4, reducers: 2, corpus_bytes: 1 << 20, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordcountOutcome {
    pub output: String,
    pub output_hash: String,
    pub latency: Duration,
    /// Mapper partition bytes as computed in-process from the corpus.
    pub shuffle_bytes_expected: u64,
}

/// Runs the workflow from a driver. The output is the concatenation of all
/// reducer outputs in word order.
pub async fn run(sdk: &Sdk, spec: &WordcountSpec) -> Result<WordcountOutcome, BenchError> {
    if spec.mappers == 0 || spec.reducers == 0 {
        return Err(BenchError::Config("word count needs at least one mapper and one reducer".into()));
    }
    let text = corpus(spec.seed, spec.corpus_bytes);
    let pieces = split_corpus(&text, spec.mappers as usize);
    let shuffle_bytes_expected = pieces
        .iter()
        .flat_map(|p| map_partitions(p, spec.reducers))
        .map(|p| p.len() as u64)
        .sum();

    let started = Instant::now();
    let maps = pieces.iter().map(|p| {
        let (sdk, req) = (sdk.clone(), map_request(spec.reducers, p));
        async move { sdk.invoke(WC_MAP, req).await.and_then(|b| from_json::<RefList>(&b)) }
    });
    let mapped = try_join_all(maps).await?;
    let mut columns = vec![Vec::with_capacity(mapped.len()); spec.reducers as usize];
    for m in mapped {
        if m.refs.len() != spec.reducers as usize {
            return Err(BenchError::Verification(format!("mapper returned {} partitions, expected {}", m.refs.len(), spec.reducers)));
        }
        for (r, t) in m.refs.into_iter().enumerate() {
            columns[r].push(t);
        }
    }
    let reduces = columns.into_iter().map(|refs| {
        let sdk = sdk.clone();
        async move { sdk.invoke(WC_REDUCE, to_json(&RefList { refs })).await }
    });
    let outputs = try_join_all(reduces).await?;
    let latency = started.elapsed();

    let mut merged = BTreeMap::new();
    for out in &outputs {
        let text = std::str::from_utf8(out).map_err(|e| BenchError::Verification(e.to_string()))?;
        for (w, c) in parse(text).map_err(|e| BenchError::Verification(e.to_string()))? {
            if merged.insert(w.clone(), c).is_some() {
                return Err(BenchError::Verification(format!("word `{w}` emitted by two reducers")));
            }
        }
    }
    let output = render(&merged);
    Ok(WordcountOutcome { output_hash: sha256_hex(output.as_bytes()), output, latency, shuffle_bytes_expected })
}

/// Single-process reference answer.
pub fn brute_force(spec: &WordcountSpec) -> String {
    render(&count_words(&corpus(spec.seed, spec.corpus_bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corpus_is_deterministic_and_bounded() {
        let a = corpus(1, 10_000);
        assert_eq!(a, corpus(1, 10_000));
        assert_ne!(a, corpus(2, 10_000));
        assert!(a.len() <= 10_000 && a.len() > 9_000);
        assert!(corpus(1, 0).is_empty());
    }

    #[test]
    fn render_parse_round_trip() {
        let counts = count_words("b a b c  a\nb");
        assert_eq!(render(&counts), "a\t2\nb\t3\nc\t1\n");
        assert_eq!(parse(&render(&counts)).unwrap(), counts);
    }

    #[test]
    fn empty_text_maps_to_empty_partitions() {
        assert_eq!(map_partitions("", 3), vec![String::new(); 3]);
    }

    proptest! {
        #[test]
        fn split_preserves_text_and_words(seed in 0u64..1000, len in 0usize..5000, k in 1usize..9) {
            let text = corpus(seed, len);
            let pieces = split_corpus(&text, k);
            prop_assert_eq!(pieces.len(), k);
            prop_assert_eq!(pieces.concat(), text.clone());
            let mut merged = BTreeMap::new();
            for p in &pieces {
                for (w, c) in count_words(p) {
                    *merged.entry(w).or_insert(0) += c;
                }
            }
            prop_assert_eq!(merged, count_words(&text));
        }

        #[test]
        fn partitions_are_disjoint_and_complete(seed in 0u64..1000, r in 1u32..6) {
            let text = corpus(seed, 3000);
            let parts = map_partitions(&text, r);
            let mut merged = BTreeMap::new();
            for p in &parts {
                for (w, c) in parse(p).unwrap() {
                    prop_assert!(merged.insert(w, c).is_none());
                }
            }
            prop_assert_eq!(merged, count_words(&text));
        }
    }
}
