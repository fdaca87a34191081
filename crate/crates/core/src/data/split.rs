//! Class and domain partitions for the three retrieval protocols.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, DomainId};
use crate::{Error, Result};

/// Absorbs representation error in `fraction * count` before flooring.
const FLOOR_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Unseen query classes, query domain seen during training.
    #[serde(rename = "UcCDR")]
    UcCdr,
    /// Seen query classes, query domain held out from training.
    #[serde(rename = "UdCDR")]
    UdCdr,
    /// Both the query class and the query domain are unseen.
    #[serde(rename = "UCDR")]
    Ucdr,
}

impl Protocol {
    pub fn needs_held_out_domain(self) -> bool {
        matches!(self, Protocol::UdCdr | Protocol::Ucdr)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::UcCdr => "uccdr",
            Protocol::UdCdr => "udcdr",
            Protocol::Ucdr => "ucdr",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uccdr" => Ok(Protocol::UcCdr),
            "udcdr" => Ok(Protocol::UdCdr),
            "ucdr" => Ok(Protocol::Ucdr),
            other => Err(Error::InvalidArgument(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSetMode {
    /// Only the query classes appear in the search set.
    UnseenOnly,
    /// Seen and unseen classes appear in the search set.
    SeenPlusUnseen,
}

impl fmt::Display for SearchSetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchSetMode::UnseenOnly => "unseen_only",
            SearchSetMode::SeenPlusUnseen => "seen_plus_unseen",
        })
    }
}

impl FromStr for SearchSetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unseen_only" => Ok(SearchSetMode::UnseenOnly),
            "seen_plus_unseen" => Ok(SearchSetMode::SeenPlusUnseen),
            other => Err(Error::InvalidArgument(format!("unknown search-set mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub unseen: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, unseen: f64) -> Self {
        Self { train, val, unseen }
    }

    /// Class counts: floor for train and val, remainder to unseen.
    pub fn counts(&self, num_classes: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.train, self.val, self.unseen];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Split(format!("fractions must be non-negative: {self:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions sum to {total}, expected 1")));
        }
        let n = num_classes as f64;
        let train = (self.train * n + FLOOR_EPSILON).floor() as usize;
        let val = ((self.val * n + FLOOR_EPSILON).floor() as usize).min(num_classes - train);
        Ok((train, val, num_classes - train - val))
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::new(0.6, 0.15, 0.25)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub protocol: Protocol,
    pub held_out_domain: Option<DomainId>,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub search_domain: DomainId,
    pub search_set_mode: SearchSetMode,
}

impl SplitRequest {
    pub fn new(protocol: Protocol, held_out_domain: Option<DomainId>) -> Self {
        Self {
            protocol,
            held_out_domain,
            fractions: SplitFractions::default(),
            seed: 0,
            search_domain: 0,
            search_set_mode: SearchSetMode::UnseenOnly,
        }
    }
}

/// A resolved protocol split. All id lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    pub seen_classes: Vec<ClassId>,
    pub val_classes: Vec<ClassId>,
    pub unseen_classes: Vec<ClassId>,
    pub train_domains: Vec<DomainId>,
    pub held_out_domain: Option<DomainId>,
    pub search_domain: DomainId,
    pub search_set_mode: SearchSetMode,
}

impl SplitSpec {
    pub fn with_mode(&self, mode: SearchSetMode) -> Self {
        Self {
            search_set_mode: mode,
            ..self.clone()
        }
    }

    /// Domains queries are drawn from at test time.
    pub fn query_domains(&self) -> Vec<DomainId> {
        match self.held_out_domain {
            Some(d) => vec![d],
            None => self
                .train_domains
                .iter()
                .copied()
                .filter(|&d| d != self.search_domain)
                .collect(),
        }
    }

    /// Classes queries are drawn from at test time.
    pub fn query_classes(&self) -> &[ClassId] {
        match self.protocol {
            Protocol::UdCdr => &self.seen_classes,
            Protocol::UcCdr | Protocol::Ucdr => &self.unseen_classes,
        }
    }

    /// Classes admitted to the search set under the current mode.
    pub fn search_classes(&self) -> Vec<ClassId> {
        match self.search_set_mode {
            SearchSetMode::UnseenOnly => self.query_classes().to_vec(),
            SearchSetMode::SeenPlusUnseen => {
                let set: BTreeSet<ClassId> = self
                    .seen_classes
                    .iter()
                    .chain(&self.unseen_classes)
                    .copied()
                    .collect();
                set.into_iter().collect()
            }
        }
    }

    /// Checks the structural invariants against the dataset shape.
    pub fn check(&self, num_classes: usize, num_domains: usize) -> Result<()> {
        let seen: BTreeSet<_> = self.seen_classes.iter().collect();
        let val: BTreeSet<_> = self.val_classes.iter().collect();
        let unseen: BTreeSet<_> = self.unseen_classes.iter().collect();
        if seen.len() != self.seen_classes.len()
            || val.len() != self.val_classes.len()
            || unseen.len() != self.unseen_classes.len()
        {
            return Err(Error::Split("duplicate class id in a partition".into()));
        }
        if !seen.is_disjoint(&val) || !seen.is_disjoint(&unseen) || !val.is_disjoint(&unseen) {
            return Err(Error::Split("class partitions overlap".into()));
        }
        let all = self
            .seen_classes
            .iter()
            .chain(&self.val_classes)
            .chain(&self.unseen_classes);
        if let Some(c) = all.clone().find(|&&c| c >= num_classes) {
            return Err(Error::Split(format!("class {c} out of range")));
        }
        if let Some(d) = self.train_domains.iter().find(|&&d| d >= num_domains) {
            return Err(Error::Split(format!("domain {d} out of range")));
        }
        if self.search_domain >= num_domains || !self.train_domains.contains(&self.search_domain) {
            return Err(Error::Split(format!(
                "search domain {} must be a training domain",
                self.search_domain
            )));
        }
        match (self.protocol, self.held_out_domain) {
            (Protocol::UcCdr, Some(d)) => {
                return Err(Error::Split(format!("UcCDR keeps every domain seen, got held-out domain {d}")))
            }
            (Protocol::UdCdr | Protocol::Ucdr, None) => {
                return Err(Error::Split(format!("{} requires a held-out domain", self.protocol)))
            }
            (_, Some(d)) if self.train_domains.contains(&d) || d >= num_domains => {
                return Err(Error::Split(format!("held-out domain {d} must be in range and not trained on")))
            }
            _ => {}
        }
        if self.protocol == Protocol::UdCdr && !self.unseen_classes.is_empty() {
            return Err(Error::Split("UdCDR has no unseen classes".into()));
        }
        Ok(())
    }
}

/// Partitions classes and domains for `req.protocol`. Deterministic in `req.seed`.
pub fn build_split(num_classes: usize, num_domains: usize, req: &SplitRequest) -> Result<SplitSpec> {
    if num_domains < 2 {
        return Err(Error::Split(format!("need at least 2 domains, got {num_domains}")));
    }
    if req.search_domain >= num_domains {
        return Err(Error::Split(format!("search domain {} out of range", req.search_domain)));
    }
    match (req.protocol, req.held_out_domain) {
        (Protocol::UcCdr, Some(d)) => {
            return Err(Error::Split(format!("UcCDR does not hold out a domain (got {d})")));
        }
        (Protocol::UdCdr | Protocol::Ucdr, None) => {
            return Err(Error::Split(format!("{} requires a held-out domain", req.protocol)));
        }
        (_, Some(d)) if d >= num_domains => {
            return Err(Error::Split(format!("held-out domain {d} out of range")));
        }
        (_, Some(d)) if d == req.search_domain => {
            return Err(Error::Split(format!("held-out domain {d} is the search domain")));
        }
        _ => {}
    }

    let (n_train, n_val, n_unseen) = req.fractions.counts(num_classes)?;
    let mut classes: Vec<ClassId> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    classes.shuffle(&mut rng);

    let mut seen = classes[..n_train].to_vec();
    let mut val = classes[n_train..n_train + n_val].to_vec();
    let mut unseen = classes[n_train + n_val..].to_vec();
    if req.protocol == Protocol::UdCdr {
        // Query classes are the seen classes; the unseen share joins them.
        seen.append(&mut unseen);
    } else if n_unseen == 0 {
        return Err(Error::Split(format!("{} needs at least one unseen class", req.protocol)));
    }
    if seen.len() < 2 {
        return Err(Error::Split(format!("need at least 2 seen classes, got {}", seen.len())));
    }
    seen.sort_unstable();
    val.sort_unstable();
    unseen.sort_unstable();

    let train_domains = (0..num_domains)
        .filter(|d| Some(*d) != req.held_out_domain)
        .collect();
    let spec = SplitSpec {
        protocol: req.protocol,
        seen_classes: seen,
        val_classes: val,
        unseen_classes: unseen,
        train_domains,
        held_out_domain: req.held_out_domain,
        search_domain: req.search_domain,
        search_set_mode: req.search_set_mode,
    };
    spec.check(num_classes, num_domains)?;
    Ok(spec)
}

/// Sample indices of a test-time query set and its search set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySearchSets {
    pub queries: Vec<usize>,
    pub search: Vec<usize>,
}

pub fn query_and_search_sets(ds: &Dataset, split: &SplitSpec) -> Result<QuerySearchSets> {
    split.check(ds.num_classes, ds.num_domains)?;
    let query_domains: BTreeSet<DomainId> = split.query_domains().into_iter().collect();
    let query_classes: BTreeSet<ClassId> = split.query_classes().iter().copied().collect();
    let search_classes: BTreeSet<ClassId> = split.search_classes().into_iter().collect();
    let sets = collect_sets(ds, &query_domains, &query_classes, split.search_domain, &search_classes);
    if sets.queries.is_empty() {
        return Err(Error::Empty("query set".into()));
    }
    if sets.search.is_empty() {
        return Err(Error::Empty("search set".into()));
    }
    Ok(sets)
}

/// Validation queries and search set: validation classes, queried from each
/// training domain other than the search domain.
pub fn validation_sets(ds: &Dataset, split: &SplitSpec) -> Result<QuerySearchSets> {
    let query_domains: BTreeSet<DomainId> = split
        .train_domains
        .iter()
        .copied()
        .filter(|&d| d != split.search_domain)
        .collect();
    let classes: BTreeSet<ClassId> = split.val_classes.iter().copied().collect();
    let sets = collect_sets(ds, &query_domains, &classes, split.search_domain, &classes);
    if sets.queries.is_empty() {
        return Err(Error::Empty("validation query set".into()));
    }
    if sets.search.is_empty() {
        return Err(Error::Empty("validation search set".into()));
    }
    Ok(sets)
}

/// Training samples: seen classes from training domains.
pub fn training_indices(ds: &Dataset, split: &SplitSpec) -> Vec<usize> {
    let classes: BTreeSet<ClassId> = split.seen_classes.iter().copied().collect();
    let domains: BTreeSet<DomainId> = split.train_domains.iter().copied().collect();
    ds.samples
        .iter()
        .enumerate()
        .filter(|(_, s)| classes.contains(&s.class_id) && domains.contains(&s.domain_id))
        .map(|(i, _)| i)
        .collect()
}

fn collect_sets(
    ds: &Dataset,
    query_domains: &BTreeSet<DomainId>,
    query_classes: &BTreeSet<ClassId>,
    search_domain: DomainId,
    search_classes: &BTreeSet<ClassId>,
) -> QuerySearchSets {
    let mut queries = Vec::new();
    let mut search = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if s.domain_id == search_domain {
            if search_classes.contains(&s.class_id) {
                search.push(i);
            }
        } else if query_domains.contains(&s.domain_id) && query_classes.contains(&s.class_id) {
            queries.push(i);
        }
    }
    QuerySearchSets { queries, search }
}
