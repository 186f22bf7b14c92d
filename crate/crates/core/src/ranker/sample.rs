use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::RankerError;
use crate::graph::{NodeKey, NodeKind, SemanticGraph};

pub const REJECTION_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Positive,
    Scramble,
    Swap,
}

/// Two coded terms followed by `2s` predicate keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateSample {
    pub kind: SampleKind,
    pub elements: Vec<NodeKey>,
}

impl PredicateSample {
    pub fn terms(&self) -> (&NodeKey, &NodeKey) {
        (&self.elements[0], &self.elements[1])
    }

    pub fn predicates(&self) -> &[NodeKey] {
        &self.elements[2..]
    }
}

/// Per-term predicate neighbourhoods plus the term and predicate pools used
/// for negatives, extracted once from a graph.
#[derive(Debug, Clone)]
pub struct SampleContext {
    gammas: BTreeMap<NodeKey, BTreeSet<NodeKey>>,
    term_pool: Vec<NodeKey>,
    predicate_pool: Vec<NodeKey>,
}

impl SampleContext {
    /// Term pool: coded terms with at least one predicate.
    pub fn new(graph: &SemanticGraph) -> Self {
        let gammas: BTreeMap<NodeKey, BTreeSet<NodeKey>> = graph
            .nodes_of_kind(NodeKind::CodedTerm)
            .map(|t| (t.clone(), graph.gamma(t).unwrap_or_default()))
            .collect();
        let term_pool = gammas
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(t, _)| t.clone())
            .collect();
        let predicate_pool = graph.nodes_of_kind(NodeKind::Predicate).cloned().collect();
        Self {
            gammas,
            term_pool,
            predicate_pool,
        }
    }

    pub fn gamma(&self, term: &NodeKey) -> Option<&BTreeSet<NodeKey>> {
        self.gammas.get(term)
    }

    pub fn term_pool(&self) -> &[NodeKey] {
        &self.term_pool
    }

    pub fn predicate_pool(&self) -> &[NodeKey] {
        &self.predicate_pool
    }

    fn known(&self, term: &NodeKey) -> Result<&BTreeSet<NodeKey>, RankerError> {
        self.gammas
            .get(term)
            .ok_or_else(|| RankerError::UnknownTerm(term.clone()))
    }

    fn disjoint(&self, x: &NodeKey, y: &NodeKey) -> bool {
        match (self.gammas.get(x), self.gammas.get(y)) {
            (Some(a), Some(b)) => a.is_disjoint(b),
            _ => true,
        }
    }
}

/// `s` draws with replacement from `gamma(a) - gamma(b)`, or `a` itself
/// repeated when the difference is empty.
fn side_draws<R: Rng>(ctx: &SampleContext, a: &NodeKey, b: &NodeKey, s: usize, rng: &mut R) -> Result<Vec<NodeKey>, RankerError> {
    let ga = ctx.known(a)?;
    let gb = ctx.known(b)?;
    let diff: Vec<&NodeKey> = ga.difference(gb).collect();
    if diff.is_empty() {
        return Ok(vec![a.clone(); s]);
    }
    Ok((0..s).map(|_| (*diff.choose(rng).expect("nonempty")).clone()).collect())
}

fn structured<R: Rng>(
    kind: SampleKind,
    ctx: &SampleContext,
    alpha: &NodeKey,
    beta: &NodeKey,
    s: usize,
    rng: &mut R,
) -> Result<PredicateSample, RankerError> {
    let mut elements = vec![alpha.clone(), beta.clone()];
    elements.extend(side_draws(ctx, alpha, beta, s, rng)?);
    elements.extend(side_draws(ctx, beta, alpha, s, rng)?);
    Ok(PredicateSample { kind, elements })
}

fn check_term(term: &NodeKey) -> Result<(), RankerError> {
    if term.kind() != NodeKind::CodedTerm {
        return Err(RankerError::UnknownTerm(term.clone()));
    }
    Ok(())
}

pub fn build_positive<R: Rng>(
    alpha: &NodeKey,
    beta: &NodeKey,
    ctx: &SampleContext,
    s: usize,
    rng: &mut R,
) -> Result<PredicateSample, RankerError> {
    check_term(alpha)?;
    check_term(beta)?;
    if alpha == beta {
        return Err(RankerError::SameTerm(alpha.clone()));
    }
    structured(SampleKind::Positive, ctx, alpha, beta, s, rng)
}

fn disjoint_pair<R: Rng>(ctx: &SampleContext, pool: &[NodeKey], rng: &mut R) -> Result<(NodeKey, NodeKey), RankerError> {
    if pool.len() < 2 {
        return Err(RankerError::PoolTooSmall(pool.len()));
    }
    for _ in 0..REJECTION_ATTEMPTS {
        let x = pool.choose(rng).expect("nonempty");
        let y = pool.choose(rng).expect("nonempty");
        if x != y && ctx.disjoint(x, y) {
            return Ok((x.clone(), y.clone()));
        }
    }
    Err(RankerError::RejectionExhausted(REJECTION_ATTEMPTS))
}

/// Unrelated terms with `2s` predicates drawn from the whole predicate pool.
pub fn build_scramble<R: Rng>(
    term_pool: &[NodeKey],
    predicate_pool: &[NodeKey],
    ctx: &SampleContext,
    s: usize,
    rng: &mut R,
) -> Result<PredicateSample, RankerError> {
    if predicate_pool.is_empty() && s > 0 {
        return Err(RankerError::PoolTooSmall(0));
    }
    let (x, y) = disjoint_pair(ctx, term_pool, rng)?;
    let mut elements = vec![x, y];
    elements.extend((0..2 * s).map(|_| predicate_pool.choose(rng).expect("nonempty").clone()));
    Ok(PredicateSample {
        kind: SampleKind::Scramble,
        elements,
    })
}

/// Unrelated terms with predicates drawn from their own neighbourhoods.
pub fn build_swap<R: Rng>(term_pool: &[NodeKey], ctx: &SampleContext, s: usize, rng: &mut R) -> Result<PredicateSample, RankerError> {
    let (x, y) = disjoint_pair(ctx, term_pool, rng)?;
    structured(SampleKind::Swap, ctx, &x, &y, s, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn c(name: &str) -> NodeKey {
        NodeKey::new(NodeKind::CodedTerm, name)
    }

    fn link(g: &mut SemanticGraph, subj: &str, obj: &str) -> NodeKey {
        let p = NodeKey::new(NodeKind::Predicate, format!("{subj}:rel:{obj}"));
        g.declare_term(c(subj), "gngm");
        g.declare_term(c(obj), "dsyn");
        g.add_edge(p.clone(), c(subj)).unwrap();
        g.add_edge(p.clone(), c(obj)).unwrap();
        p
    }

    #[test]
    fn forced_draws_and_degenerate_s() {
        let mut g = SemanticGraph::new();
        let only = link(&mut g, "a", "x");
        link(&mut g, "b", "y");
        link(&mut g, "b", "z");
        let ctx = SampleContext::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = build_positive(&c("a"), &c("b"), &ctx, 15, &mut rng).unwrap();
        assert_eq!(s.elements.len(), 32);
        assert!(s.elements[2..17].iter().all(|p| p == &only));
        let s0 = build_positive(&c("a"), &c("b"), &ctx, 0, &mut rng).unwrap();
        assert_eq!(s0.elements, vec![c("a"), c("b")]);
        assert!(matches!(
            build_positive(&c("a"), &c("a"), &ctx, 3, &mut rng),
            Err(RankerError::SameTerm(_))
        ));
        assert!(matches!(
            build_positive(&c("a"), &c("ghost"), &ctx, 3, &mut rng),
            Err(RankerError::UnknownTerm(_))
        ));
    }

    #[test]
    fn empty_difference_pads_with_term() {
        let mut g = SemanticGraph::new();
        link(&mut g, "a", "b");
        let ctx = SampleContext::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = build_positive(&c("a"), &c("b"), &ctx, 4, &mut rng).unwrap();
        assert_eq!(&s.elements[2..6], &[c("a"), c("a"), c("a"), c("a")]);
        assert_eq!(&s.elements[6..], &[c("b"), c("b"), c("b"), c("b")]);
    }

    #[test]
    fn positive_draws_are_uniform() {
        let mut g = SemanticGraph::new();
        let preds: Vec<NodeKey> = (0..5).map(|i| link(&mut g, "a", &format!("t{i}"))).collect();
        link(&mut g, "b", "u");
        let ctx = SampleContext::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: HashMap<NodeKey, usize> = HashMap::new();
        for _ in 0..10_000 {
            let s = build_positive(&c("a"), &c("b"), &ctx, 1, &mut rng).unwrap();
            *counts.entry(s.elements[2].clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        assert!(preds.iter().all(|p| counts.contains_key(p)));
        let chi2: f64 = counts.values().map(|n| (*n as f64 - 2000.0).powi(2) / 2000.0).sum();
        // 99th percentile of chi-squared with 4 degrees of freedom.
        assert!(chi2 < 13.277, "chi2 {chi2}");
    }

    #[test]
    fn scramble_rejection() {
        let mut g = SemanticGraph::new();
        g.declare_term(c("lonely1"), "dsyn");
        g.declare_term(c("lonely2"), "dsyn");
        let ctx = SampleContext::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = vec![c("lonely1"), c("lonely2")];
        let p = vec![NodeKey::new(NodeKind::Predicate, "q")];
        let s = build_scramble(&pool, &p, &ctx, 2, &mut rng).unwrap();
        assert_eq!(s.elements.len(), 6);

        let mut g = SemanticGraph::new();
        link(&mut g, "a", "b");
        let ctx = SampleContext::new(&g);
        let pool = vec![c("a"), c("b")];
        assert!(matches!(
            build_scramble(&pool, &p, &ctx, 2, &mut rng),
            Err(RankerError::RejectionExhausted(_))
        ));
        assert!(matches!(build_swap(&pool, &ctx, 2, &mut rng), Err(RankerError::RejectionExhausted(_))));
    }

    fn large_graph() -> SemanticGraph {
        let mut g = SemanticGraph::new();
        for i in 0..60 {
            for j in 0..3 {
                link(&mut g, &format!("g{i}"), &format!("d{}", (i * 7 + j * 13) % 60));
            }
        }
        g
    }

    fn structural(ctx: &SampleContext, s: &PredicateSample) -> bool {
        let (x, y) = s.terms();
        let gx = ctx.gamma(x).unwrap();
        let gy = ctx.gamma(y).unwrap();
        s.predicates().iter().all(|p| gx.contains(p) || gy.contains(p))
    }

    #[test]
    fn scrambles_lack_structure_swaps_have_it() {
        let g = large_graph();
        let ctx = SampleContext::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = 15;
        // Each terms' neighbourhood holds at most 6 of 180 predicates, so a
        // scramble keeps the structure with probability at most (12/180)^30.
        let mut structured_scrambles = 0;
        for _ in 0..1000 {
            let sc = build_scramble(ctx.term_pool(), ctx.predicate_pool(), &ctx, s, &mut rng).unwrap();
            assert!(ctx.gamma(sc.terms().0).unwrap().is_disjoint(ctx.gamma(sc.terms().1).unwrap()));
            if structural(&ctx, &sc) {
                structured_scrambles += 1;
            }
            let sw = build_swap(ctx.term_pool(), &ctx, s, &mut rng).unwrap();
            assert!(structural(&ctx, &sw));
            assert_eq!(sw.elements.len(), 2 + 2 * s);
        }
        assert_eq!(structured_scrambles, 0);
    }

    #[test]
    fn swap_draws_match_positive_draws_for_pair() {
        let g = large_graph();
        let ctx = SampleContext::new(&g);
        let (x, y) = (c("g0"), c("g1"));
        assert!(ctx.gamma(&x).unwrap().is_disjoint(ctx.gamma(&y).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pos: HashMap<(bool, NodeKey), usize> = HashMap::new();
        let mut swp: HashMap<(bool, NodeKey), usize> = HashMap::new();
        let n = 4000;
        for _ in 0..n {
            let p = build_positive(&x, &y, &ctx, 3, &mut rng).unwrap();
            for (i, e) in p.predicates().iter().enumerate() {
                *pos.entry((i < 3, e.clone())).or_default() += 1;
            }
        }
        let pool = [x.clone(), y.clone()];
        let mut got = 0;
        while got < n {
            let sw = build_swap(&pool, &ctx, 3, &mut rng).unwrap();
            if sw.terms() != (&x, &y) {
                continue;
            }
            got += 1;
            for (i, e) in sw.predicates().iter().enumerate() {
                *swp.entry((i < 3, e.clone())).or_default() += 1;
            }
        }
        let keys: BTreeSet<_> = pos.keys().chain(swp.keys()).cloned().collect();
        for k in keys {
            let a = *pos.get(&k).unwrap_or(&0) as f64 / (3 * n) as f64;
            let b = *swp.get(&k).unwrap_or(&0) as f64 / (3 * n) as f64;
            assert!(a > 0.0 && b > 0.0, "{k:?}");
            assert!((a - b).abs() < 0.03, "{k:?}: {a} vs {b}");
        }
    }
}
