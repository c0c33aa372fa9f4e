//! State-aware item scoring `w_t(v) = e_v·(W₁ s_t + b₁)` and its adaptation loss.

use rand::Rng;

use crate::catalog::{Catalog, EmbeddingTable};
use crate::dialogue::rank_items;
use crate::encoder::{encode, EmbeddingVars};
use crate::error::{ensure, Error, Result};
use crate::numerics::{sgd_step, Bound, Graph, ParamSet, Tensor, Var};
use crate::simulator::Episode;

pub fn init_recommender<R: Rng>(dim: usize, rng: &mut R) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.init_normal("rec.w1", &[dim, dim], 1.0 / (dim as f64).sqrt(), rng);
    ps.insert("rec.b1", Tensor::zeros(&[dim]));
    ps
}

/// Scores of `candidates` given the encoded state `s`.
pub fn score_items(g: &mut Graph, p: &Bound, emb: &EmbeddingVars, s: Var, candidates: &[usize]) -> Result<Var> {
    ensure!(!candidates.is_empty(), Contract, "no candidates to score");
    let q = g.linear(p.var("rec.w1")?, p.var("rec.b1")?, s)?;
    let rows = g.gather(emb.items, candidates)?;
    g.matvec(rows, q)
}

/// Best `k` items by score, ties to the lower id.
pub fn rank_topk(items: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut ranked = rank_items(items, scores);
    ranked.truncate(k);
    ranked
}

/// Scores recorded on one turn: the candidate set `V⁺_t` and its score vector.
#[derive(Clone, Debug)]
pub struct TurnScores {
    pub candidates: Vec<usize>,
    pub scores: Var,
}

/// Cross-entropy of the accepted item over every recorded turn of a
/// successful episode, `−(1/max(k,1)) Σ_{t=0}^{k} log softmax(w_t)[v_s]`,
/// where `k` is the zero-based index of the accepting turn. `None` for
/// failed episodes (zero loss, nothing to differentiate).
pub fn recommendation_loss(
    g: &mut Graph,
    turns: &[TurnScores],
    accepted: usize,
    success_turns: Option<usize>,
) -> Result<Option<Var>> {
    let Some(turns_used) = success_turns else {
        return Ok(None);
    };
    ensure!(
        turns.len() == turns_used,
        Contract,
        "{} scored turns for a {turns_used}-turn success",
        turns.len()
    );
    let k = turns_used - 1;
    let mut terms = Vec::with_capacity(turns.len());
    for (t, turn) in turns.iter().enumerate() {
        let idx = turn.candidates.iter().position(|&v| v == accepted).ok_or_else(|| {
            Error::Invariant(format!("accepted item {accepted} missing from candidates at turn {t}"))
        })?;
        let lp = g.log_softmax(turn.scores)?;
        terms.push(g.pick(lp, idx)?);
    }
    let total = g.add_scalars(&terms)?;
    Ok(Some(g.scale(total, -1.0 / k.max(1) as f64)?))
}

/// Per-episode SGD on the recommendation loss with the encoder frozen.
/// Episodes are replayed from their turn records.
pub fn adapt_recommender(
    rec: &ParamSet,
    enc: &ParamSet,
    table: &EmbeddingTable,
    catalog: &Catalog,
    episodes: &[Episode],
    max_turns: usize,
    lr: f64,
) -> Result<ParamSet> {
    let mut rec = rec.clone();
    for ep in episodes {
        if let Some((_, grads)) = recommendation_loss_and_grad(&rec, enc, table, catalog, ep, max_turns)? {
            sgd_step(&mut rec, &grads, lr)?;
        }
    }
    Ok(rec)
}

/// Loss value and gradient w.r.t. the recommender for one recorded episode.
pub fn recommendation_loss_and_grad(
    rec: &ParamSet,
    enc: &ParamSet,
    table: &EmbeddingTable,
    catalog: &Catalog,
    episode: &Episode,
    max_turns: usize,
) -> Result<Option<(f64, ParamSet)>> {
    if !episode.succeeded() {
        return Ok(None);
    }
    let states = episode.states(catalog, max_turns)?;
    let mut g = Graph::new();
    let rb = g.bind(rec, true);
    let eb = g.bind(enc, false);
    let emb = EmbeddingVars::bind(&mut g, table, false);
    let mut turns = Vec::with_capacity(states.len());
    for st in &states {
        let s = encode(&mut g, &eb, &emb, st)?.s;
        let scores = score_items(&mut g, &rb, &emb, s, st.candidates())?;
        turns.push(TurnScores {
            candidates: st.candidates().to_vec(),
            scores,
        });
    }
    let Some(loss) = recommendation_loss(&mut g, &turns, episode.target, episode.success_turns())? else {
        return Ok(None);
    };
    let value = g.scalar(loss);
    g.backward(loss)?;
    Ok(Some((value, g.collect_grads(&rb, rec)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_weights_zero_scores() {
        let mut g = Graph::new();
        let mut ps = init_recommender(3, &mut stream(0, &[]));
        ps.scale(0.0);
        let b = g.bind(&ps, false);
        let t = EmbeddingTable {
            users: Tensor::filled(&[1, 3], 1.0),
            items: Tensor::filled(&[4, 3], 1.0),
            attrs: Tensor::filled(&[1, 3], 1.0),
        };
        let emb = EmbeddingVars::bind(&mut g, &t, false);
        let s = g.constant_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let sc = score_items(&mut g, &b, &emb, s, &[0, 3]).unwrap();
        assert_eq!(g.value(sc).data(), &[0.0, 0.0]);
        assert!(score_items(&mut g, &b, &emb, s, &[]).is_err());
    }

    #[test]
    fn two_candidates_equal_scores_fixture() {
        let mut g = Graph::new();
        let turns: Vec<TurnScores> = (0..2)
            .map(|_| TurnScores {
                candidates: vec![4, 9],
                scores: g.constant_vec(vec![0.3, 0.3]).unwrap(),
            })
            .collect();
        let loss = recommendation_loss(&mut g, &turns, 9, Some(2)).unwrap().unwrap();
        assert!((g.scalar(loss) - 1.3863).abs() < 1e-4);
        assert!((g.scalar(loss) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn failed_or_single_candidate() {
        let mut g = Graph::new();
        let one = TurnScores {
            candidates: vec![2],
            scores: g.constant_vec(vec![5.0]).unwrap(),
        };
        assert!(recommendation_loss(&mut g, std::slice::from_ref(&one), 2, None).unwrap().is_none());
        let l = recommendation_loss(&mut g, &[one.clone(), one], 2, Some(2)).unwrap().unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn missing_target_is_invariant_violation() {
        let mut g = Graph::new();
        let t = TurnScores {
            candidates: vec![1, 2],
            scores: g.constant_vec(vec![0.0, 0.0]).unwrap(),
        };
        assert!(matches!(
            recommendation_loss(&mut g, &[t], 7, Some(1)),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn topk_ties_and_truncation() {
        assert_eq!(rank_topk(&[5, 3, 8], &[1.0, 1.0, 1.0], 2), vec![3, 5]);
        assert_eq!(rank_topk(&[5, 3], &[0.0, 1.0], 10), vec![3, 5]);
    }
}
