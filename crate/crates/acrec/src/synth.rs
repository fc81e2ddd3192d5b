//! Deterministic synthetic interaction logs with a known recommender
//! influence, used as ground truth for end-to-end tests.
//!
//! Organic navigation: the catalog is partitioned into clusters (item v →
//! cluster v mod n_clusters) with Zipf popularity by item id. The next
//! organic item stays in the current cluster with probability `p_intra`,
//! otherwise jumps to a uniformly chosen other cluster; within a cluster,
//! items are drawn by popularity.
//!
//! Recommender events: with probability `rec_rate` a step carries a slate of
//! `slate_size` distinct items drawn (popularity-weighted, without
//! replacement) from the *neighboring* cluster. With probability `p_follow`
//! the next item is uniform over that slate. Because slates point across
//! clusters and vary per event, a followed slate is not predictable from
//! organic dynamics alone — which is exactly what an action-conditional
//! model can exploit and a navigation-only model cannot.

use crate::datapipe::{RawEvent, RawSession};
use crate::error::{Error, Result};
use crate::numkernel::Rng;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Catalog size V.
    pub catalog: usize,
    pub n_sessions: usize,
    /// Inclusive session length bounds.
    pub len_range: (usize, usize),
    /// Popularity exponent; 0 = uniform.
    pub zipf_s: f64,
    pub n_clusters: usize,
    /// Probability the next organic item stays in the current cluster.
    pub p_intra: f64,
    /// Probability a step (with a successor) carries a slate.
    pub rec_rate: f64,
    pub slate_size: usize,
    /// Probability the next item is drawn from the slate when one is shown.
    pub p_follow: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            catalog: 1000,
            n_sessions: 20_000,
            len_range: (3, 10),
            zipf_s: 1.1,
            n_clusters: 10,
            p_intra: 0.85,
            rec_rate: 0.1,
            slate_size: 5,
            p_follow: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.catalog < 2 {
            return bad("catalog", "needs at least 2 items".into());
        }
        if self.n_clusters < 1 || self.n_clusters > self.catalog {
            return bad("n_clusters", format!("must lie in [1, catalog], got {}", self.n_clusters));
        }
        if self.slate_size < 1 || self.slate_size > 5 {
            return bad("slate_size", format!("must lie in [1, 5], got {}", self.slate_size));
        }
        if self.slate_size > self.catalog {
            return bad("slate_size", format!("{} exceeds catalog {}", self.slate_size, self.catalog));
        }
        // every cluster must be able to fill a slate
        let min_cluster = self.catalog / self.n_clusters;
        if self.slate_size > min_cluster {
            return bad(
                "slate_size",
                format!("{} exceeds smallest cluster size {min_cluster}", self.slate_size),
            );
        }
        if self.n_sessions < 1 {
            return bad("n_sessions", "needs at least 1 session".into());
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return bad("len_range", format!("invalid bounds {:?}", self.len_range));
        }
        for (field, v) in
            [("p_intra", self.p_intra), ("rec_rate", self.rec_rate), ("p_follow", self.p_follow)]
        {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("probability out of [0, 1]: {v}"));
            }
        }
        if self.zipf_s < 0.0 {
            return bad("zipf_s", format!("must be non-negative, got {}", self.zipf_s));
        }
        Ok(())
    }
}

/// Per-session, per-step latent flags: true when the step's successor was
/// drawn from the slate by the generator. A true flag implies the step
/// carried a slate. Step t describes the transition to item t+1, so each
/// session of length L holds L−1 flags.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub driven: Vec<Vec<bool>>,
}

impl SynthTruth {
    /// One line per session: space-separated indices of recommender-driven
    /// steps (possibly empty).
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for flags in &self.driven {
            let idx: Vec<String> = flags
                .iter()
                .enumerate()
                .filter_map(|(i, &f)| f.then(|| i.to_string()))
                .collect();
            out.push_str(&idx.join(" "));
            out.push('\n');
        }
        out
    }
}

struct Catalog {
    n_clusters: usize,
    /// items per cluster, ascending id (= descending popularity)
    members: Vec<Vec<usize>>,
    /// per-cluster cumulative Zipf weights, aligned with `members`
    cum: Vec<Vec<f64>>,
}

impl Catalog {
    fn new(cfg: &SynthConfig) -> Catalog {
        let mut members = vec![Vec::new(); cfg.n_clusters];
        for v in 0..cfg.catalog {
            members[v % cfg.n_clusters].push(v);
        }
        let cum = members
            .iter()
            .map(|items| {
                let mut acc = 0.0;
                items
                    .iter()
                    .map(|&v| {
                        acc += ((v + 1) as f64).powf(-cfg.zipf_s);
                        acc
                    })
                    .collect()
            })
            .collect();
        Catalog { n_clusters: cfg.n_clusters, members, cum }
    }

    fn cluster_of(&self, item: usize) -> usize {
        item % self.n_clusters
    }

    /// Popularity-weighted draw within a cluster.
    fn pick(&self, cluster: usize, rng: &mut Rng) -> usize {
        let cum = &self.cum[cluster];
        let x = rng.next_f64() * cum[cum.len() - 1];
        let i = cum.partition_point(|&c| c <= x).min(cum.len() - 1);
        self.members[cluster][i]
    }

    /// `n` distinct items from a cluster, popularity-weighted without
    /// replacement.
    fn pick_distinct(&self, cluster: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
        let items = &self.members[cluster];
        let cum = &self.cum[cluster];
        let weight = |i: usize| if i == 0 { cum[0] } else { cum[i] - cum[i - 1] };
        let mut taken = vec![false; items.len()];
        let mut remaining: f64 = cum[cum.len() - 1];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = rng.next_f64() * remaining;
            let mut chosen = items.len() - 1;
            for i in 0..items.len() {
                if taken[i] {
                    continue;
                }
                let w = weight(i);
                if x < w {
                    chosen = i;
                    break;
                }
                x -= w;
            }
            // numeric fallback: walk back to the last free slot
            while taken[chosen] {
                chosen -= 1;
            }
            taken[chosen] = true;
            remaining -= weight(chosen);
            out.push(items[chosen]);
        }
        out
    }
}

fn item_id(v: usize) -> String {
    format!("i{v}")
}

/// Generate the corpus. Deterministic given the seed: each session draws
/// from its own derived stream, so the output does not depend on generation
/// order.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<RawSession>, SynthTruth)> {
    cfg.validate()?;
    let catalog = Catalog::new(cfg);
    let root = Rng::new(cfg.seed);

    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    let mut truth = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let mut rng = root.derive(s as u64);
        let len = cfg.len_range.0 + rng.below(cfg.len_range.1 - cfg.len_range.0 + 1);

        let mut cur = catalog.pick(rng.below(cfg.n_clusters), &mut rng);
        let mut events = Vec::with_capacity(len);
        let mut driven = Vec::with_capacity(len.saturating_sub(1));
        for t in 0..len {
            // the final event never influences a successor, so it carries no slate
            let slate = if t + 1 < len && rng.next_f64() < cfg.rec_rate {
                let neighbor = (catalog.cluster_of(cur) + 1) % cfg.n_clusters;
                Some(catalog.pick_distinct(neighbor, cfg.slate_size, &mut rng))
            } else {
                None
            };
            events.push(RawEvent {
                item: item_id(cur),
                recs: slate.iter().flatten().map(|&v| item_id(v)).collect(),
            });
            if t + 1 == len {
                break;
            }

            let followed = match &slate {
                Some(items) if rng.next_f64() < cfg.p_follow => {
                    cur = items[rng.below(items.len())];
                    true
                }
                _ => {
                    let c = catalog.cluster_of(cur);
                    let target = if cfg.n_clusters == 1 || rng.next_f64() < cfg.p_intra {
                        c
                    } else {
                        let other = rng.below(cfg.n_clusters - 1);
                        if other >= c {
                            other + 1
                        } else {
                            other
                        }
                    };
                    cur = catalog.pick(target, &mut rng);
                    false
                }
            };
            driven.push(followed);
        }
        sessions.push(RawSession { user_id: format!("u{s}"), events });
        truth.push(driven);
    }
    Ok((sessions, SynthTruth { driven: truth }))
}

/// Serialize sessions in the log format (one JSON record per line).
pub fn to_jsonl(sessions: &[RawSession]) -> String {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s).expect("session serialization"));
        out.push('\n');
    }
    out
}
