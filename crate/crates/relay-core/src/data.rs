//! Parallel corpora: file ingestion, deterministic synthetic language pairs
//! with an exact translation oracle, and nested subsetting.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: String,
    pub tgt: String,
}

/// Line-aligned sentence pairs for one split.
#[derive(Clone, Debug, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub provenance: String,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        let mut src = String::new();
        let mut tgt = String::new();
        for p in &self.pairs {
            src.push_str(&p.src);
            src.push('\n');
            tgt.push_str(&p.tgt);
            tgt.push('\n');
        }
        std::fs::write(src_path, src)?;
        std::fs::write(tgt_path, tgt)?;
        Ok(())
    }
}

fn read_utf8_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let text = match String::from_utf8(bytes) {
        Ok(t) => t,
        Err(e) => {
            return Err(Error::data(format!(
                "{} is not valid UTF-8 at byte offset {}",
                path.display(),
                e.utf8_error().valid_up_to()
            )))
        }
    };
    Ok(text.lines().map(|l| l.trim_end().to_string()).collect())
}

/// Line i of each file forms pair i.
pub fn load_parallel(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    let src = read_utf8_lines(src_path)?;
    let tgt = read_utf8_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::data(format!(
            "line counts differ: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        if s.is_empty() || t.is_empty() {
            return Err(Error::data(format!(
                "empty sentence at line {} of {} / {}",
                i + 1,
                src_path.display(),
                tgt_path.display()
            )));
        }
        pairs.push(Pair { src: s, tgt: t });
    }
    Ok(ParallelCorpus {
        pairs,
        provenance: format!("{}|{}", src_path.display(), tgt_path.display()),
    })
}

/// Uniform sample without replacement; subsets under one seed are nested.
pub fn subset(corpus: &ParallelCorpus, n: usize, seed: u64) -> Result<ParallelCorpus> {
    if n == 0 || n > corpus.len() {
        return Err(Error::data(format!(
            "subset of {n} from a corpus of {}",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut substream(seed, "subset"));
    let pairs = order[..n].iter().map(|&i| corpus.pairs[i].clone()).collect();
    Ok(ParallelCorpus {
        pairs,
        provenance: format!("{}#subset({n},{seed})", corpus.provenance),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReorderRule {
    None,
    SwapAdjacentPairs,
}

/// A latent-symbol language pair: source renders symbol i as "a<i>", target
/// renders the permuted symbol after reordering as "b<pi(i)>". Translation
/// is exact and deterministic, giving a free evaluation oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLangSpec {
    pub n_symbols: usize,
    pub permutation: Vec<usize>,
    pub reorder: ReorderRule,
    pub len_range: (usize, usize),
    pub seed: u64,
}

impl SyntheticLangSpec {
    pub fn with_random_permutation(
        n_symbols: usize,
        len_range: (usize, usize),
        reorder: ReorderRule,
        seed: u64,
    ) -> Result<Self> {
        if n_symbols < 2 {
            return Err(Error::config("n_symbols must be at least 2"));
        }
        if len_range.0 > len_range.1 || len_range.0 == 0 {
            return Err(Error::config(format!(
                "invalid sentence length range {:?}",
                len_range
            )));
        }
        let mut permutation: Vec<usize> = (0..n_symbols).collect();
        permutation.shuffle(&mut substream(seed, "permutation"));
        Ok(Self {
            n_symbols,
            permutation,
            reorder,
            len_range,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.len_range.0 > self.len_range.1 || self.len_range.0 == 0 {
            return Err(Error::config(format!(
                "invalid sentence length range {:?}",
                self.len_range
            )));
        }
        let mut seen = vec![false; self.n_symbols];
        if self.permutation.len() != self.n_symbols {
            return Err(Error::config("permutation length != n_symbols"));
        }
        for &p in &self.permutation {
            if p >= self.n_symbols || seen[p] {
                return Err(Error::config("permutation is not a bijection"));
            }
            seen[p] = true;
        }
        Ok(())
    }

    fn apply_reorder(&self, latent: &[usize]) -> Vec<usize> {
        match self.reorder {
            ReorderRule::None => latent.to_vec(),
            ReorderRule::SwapAdjacentPairs => {
                let mut out = latent.to_vec();
                let mut i = 0;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
                out
            }
        }
    }

    pub fn render_src(&self, latent: &[usize]) -> String {
        latent
            .iter()
            .map(|s| format!("a{s}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn render_tgt(&self, latent: &[usize]) -> String {
        self.apply_reorder(latent)
            .iter()
            .map(|s| format!("b{}", self.permutation[*s]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Exact translation of a rendered source sentence.
    pub fn oracle_translate(&self, src: &str) -> Result<String> {
        let mut latent = Vec::new();
        for tok in src.split_whitespace() {
            let sym: usize = tok
                .strip_prefix('a')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(format!("not a source symbol: {tok:?}")))?;
            if sym >= self.n_symbols {
                return Err(Error::data(format!("symbol {sym} out of alphabet")));
            }
            latent.push(sym);
        }
        Ok(self.render_tgt(&latent))
    }

    fn sample_latent(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.gen_range(self.len_range.0..=self.len_range.1);
        (0..len).map(|_| rng.gen_range(0..self.n_symbols)).collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCounts {
    pub train: usize,
    pub heldout: usize,
    pub test: usize,
    pub mono_a: usize,
    pub mono_b: usize,
}

/// Everything one experiment needs: splits, monolingual corpora, the spec.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticLangSpec,
    pub train: ParallelCorpus,
    pub heldout: ParallelCorpus,
    pub test: ParallelCorpus,
    pub mono_a: Vec<String>,
    pub mono_b: Vec<String>,
}

/// Latent sequences are sampled uniformly and deduplicated globally, so the
/// monolingual corpora and every parallel split are pairwise disjoint draws.
pub fn gen_synthetic_pair(spec: &SyntheticLangSpec, counts: &SampleCounts) -> Result<SyntheticData> {
    spec.validate()?;
    if counts.train == 0 || counts.heldout == 0 || counts.test == 0 {
        return Err(Error::config("all parallel split counts must be positive"));
    }
    let mut rng = substream(spec.seed, "latent");
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw_unique = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        loop {
            let latent = spec.sample_latent(rng);
            if seen.insert(latent.clone()) {
                return latent;
            }
        }
    };

    let mut take_pairs = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, tag: &str| {
        let pairs = (0..n)
            .map(|_| {
                let latent = draw_unique(rng);
                Pair {
                    src: spec.render_src(&latent),
                    tgt: spec.render_tgt(&latent),
                }
            })
            .collect();
        ParallelCorpus {
            pairs,
            provenance: format!("synthetic(seed={}):{tag}", spec.seed),
        }
    };

    let train = take_pairs(&mut rng, counts.train, "train");
    let heldout = take_pairs(&mut rng, counts.heldout, "heldout");
    let test = take_pairs(&mut rng, counts.test, "test");
    let mono_a: Vec<String> = (0..counts.mono_a)
        .map(|_| spec.render_src(&draw_unique(&mut rng)))
        .collect();
    let mono_b: Vec<String> = (0..counts.mono_b)
        .map(|_| spec.render_tgt(&draw_unique(&mut rng)))
        .collect();

    Ok(SyntheticData {
        spec: spec.clone(),
        train,
        heldout,
        test,
        mono_a,
        mono_b,
    })
}
