//! Conversation state, feedback application and per-turn action spaces.

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Action {
    Ask { attr: usize },
    Recommend { items: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Confirm,
    Dismiss,
    Accept,
    Reject,
}

impl Feedback {
    pub fn as_str(self) -> &'static str {
        match self {
            Feedback::Confirm => "confirm",
            Feedback::Dismiss => "dismiss",
            Feedback::Accept => "accept",
            Feedback::Reject => "reject",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Ongoing,
    /// `turns` counts the turns used, including the accepting one.
    Success { turns: usize },
    Quit,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Outcome::Ongoing)
    }
}

/// `S_t = {P⁺, V⁺, P⁻, V⁻}` plus the turn counter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    accepted_attrs: Vec<usize>,
    rejected_attrs: Vec<usize>,
    /// Sorted ascending.
    candidates: Vec<usize>,
    rejected_items: Vec<usize>,
    turn: usize,
    max_turns: usize,
    outcome: Outcome,
}

impl DialogueState {
    pub fn new(n_items: usize, max_turns: usize) -> Result<Self> {
        ensure!(max_turns >= 1, Contract, "max turns must be at least 1");
        ensure!(n_items >= 1, Contract, "no items to converse about");
        Ok(Self {
            accepted_attrs: Vec::new(),
            rejected_attrs: Vec::new(),
            candidates: (0..n_items).collect(),
            rejected_items: Vec::new(),
            turn: 0,
            max_turns,
            outcome: Outcome::Ongoing,
        })
    }

    pub fn accepted_attrs(&self) -> &[usize] {
        &self.accepted_attrs
    }

    pub fn rejected_attrs(&self) -> &[usize] {
        &self.rejected_attrs
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn rejected_items(&self) -> &[usize] {
        &self.rejected_items
    }

    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn is_terminal(&self) -> bool {
        self.outcome.is_terminal()
    }

    pub fn is_candidate(&self, item: usize) -> bool {
        self.candidates.binary_search(&item).is_ok()
    }

    pub fn attr_asked(&self, attr: usize) -> bool {
        self.accepted_attrs.contains(&attr) || self.rejected_attrs.contains(&attr)
    }

    /// Next state after the user answers `action` with `feedback`.
    pub fn apply_feedback(&self, catalog: &Catalog, action: &Action, feedback: Feedback) -> Result<Self> {
        ensure!(!self.is_terminal(), Contract, "feedback on a finished conversation");
        let mut next = self.clone();
        match (action, feedback) {
            (Action::Ask { attr }, Feedback::Confirm) => {
                ensure!(*attr < catalog.n_attrs(), Contract, "unknown attribute {attr}");
                ensure!(!self.attr_asked(*attr), Contract, "attribute {attr} already asked");
                next.accepted_attrs.push(*attr);
                next.candidates.retain(|&v| catalog.item_has_attr(v, *attr));
            }
            (Action::Ask { attr }, Feedback::Dismiss) => {
                ensure!(*attr < catalog.n_attrs(), Contract, "unknown attribute {attr}");
                ensure!(!self.attr_asked(*attr), Contract, "attribute {attr} already asked");
                next.rejected_attrs.push(*attr);
            }
            (Action::Recommend { items }, Feedback::Accept) => {
                ensure!(!items.is_empty(), Contract, "empty recommendation slate");
                next.outcome = Outcome::Success { turns: self.turn + 1 };
            }
            (Action::Recommend { items }, Feedback::Reject) => {
                ensure!(!items.is_empty(), Contract, "empty recommendation slate");
                for &v in items {
                    ensure!(v < catalog.n_items(), Contract, "unknown item {v}");
                    if let Ok(i) = next.candidates.binary_search(&v) {
                        next.candidates.remove(i);
                    }
                    if !next.rejected_items.contains(&v) {
                        next.rejected_items.push(v);
                    }
                }
            }
            (a, f) => {
                return Err(Error::Contract(format!("feedback {} does not answer {a:?}", f.as_str())));
            }
        }
        next.turn += 1;
        if next.outcome == Outcome::Ongoing && next.turn >= next.max_turns {
            next.outcome = Outcome::Quit;
        }
        Ok(next)
    }

    /// Structural invariants of the state; `Invariant` error on the first violation.
    pub fn check_invariants(&self, catalog: &Catalog) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        if let Some(p) = self.accepted_attrs.iter().find(|p| self.rejected_attrs.contains(p)) {
            return fail(format!("attribute {p} both accepted and rejected"));
        }
        if let Some(v) = self.rejected_items.iter().find(|v| self.is_candidate(**v)) {
            return fail(format!("item {v} both candidate and rejected"));
        }
        for &v in &self.candidates {
            if let Some(p) = self.accepted_attrs.iter().find(|&&p| !catalog.item_has_attr(v, p)) {
                return fail(format!("candidate {v} lacks accepted attribute {p}"));
            }
        }
        if self.turn > self.max_turns {
            return fail(format!("turn {} exceeds limit {}", self.turn, self.max_turns));
        }
        Ok(())
    }
}

/// Binary entropy of the fraction of candidates carrying each attribute;
/// zero for attributes already asked.
pub fn attribute_entropy(state: &DialogueState, catalog: &Catalog) -> Vec<f64> {
    let mut counts = vec![0usize; catalog.n_attrs()];
    for &v in state.candidates() {
        for &p in catalog.item_attrs(v) {
            counts[p] += 1;
        }
    }
    let n = state.candidates().len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            if state.attr_asked(p) || n == 0.0 {
                return 0.0;
            }
            binary_entropy(c as f64 / n)
        })
        .collect()
}

pub fn binary_entropy(f: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    term(f) + term(1.0 - f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Candidate {
    Attr(usize),
    Item(usize),
}

/// Actions the policy may choose from this turn: attributes first, then items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub attrs: Vec<usize>,
    pub items: Vec<usize>,
}

impl ActionSpace {
    pub fn len(&self) -> usize {
        self.attrs.len() + self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Option<Candidate> {
        if index < self.attrs.len() {
            Some(Candidate::Attr(self.attrs[index]))
        } else {
            self.items.get(index - self.attrs.len()).map(|&v| Candidate::Item(v))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Candidate> + '_ {
        self.attrs
            .iter()
            .map(|&p| Candidate::Attr(p))
            .chain(self.items.iter().map(|&v| Candidate::Item(v)))
    }

    pub fn position(&self, c: Candidate) -> Option<usize> {
        self.iter().position(|x| x == c)
    }
}

/// Items sorted by descending score, ties to the lower id.
pub fn rank_items(items: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    order.into_iter().map(|i| items[i]).collect()
}

/// Top `k_a` unasked attributes by entropy and top `k_i` candidates by score.
/// `ranked_candidates` is `V⁺` ordered by the recommender.
pub fn build_action_space(
    state: &DialogueState,
    catalog: &Catalog,
    ranked_candidates: &[usize],
    k_a: usize,
    k_i: usize,
) -> Result<ActionSpace> {
    ensure!(!state.is_terminal(), Contract, "action space requested for a finished conversation");
    let entropy = attribute_entropy(state, catalog);
    let mut attrs: Vec<usize> = (0..catalog.n_attrs()).filter(|&p| !state.attr_asked(p)).collect();
    attrs.sort_by(|&a, &b| entropy[b].total_cmp(&entropy[a]).then(a.cmp(&b)));
    attrs.truncate(k_a);
    let items: Vec<usize> = ranked_candidates
        .iter()
        .copied()
        .filter(|v| !state.rejected_items.contains(v))
        .take(k_i)
        .collect();
    Ok(ActionSpace { attrs, items })
}

/// The chosen item followed by the next best-ranked candidates, `k_rec` in total.
pub fn slate_for(item: usize, ranked_candidates: &[usize], k_rec: usize) -> Vec<usize> {
    let mut slate = vec![item];
    slate.extend(ranked_candidates.iter().copied().filter(|&v| v != item).take(k_rec.saturating_sub(1)));
    slate
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub turn: usize,
    pub action: Action,
    pub feedback: Feedback,
    pub reward: f64,
    pub candidates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Catalog {
        // 6 items over attributes 0..6
        Catalog::new(
            1,
            6,
            vec![vec![0, 2], vec![1, 2], vec![2, 5], vec![3], vec![0, 5], vec![4, 2]],
            vec![(0, 0)],
        )
        .unwrap()
    }

    #[test]
    fn fresh_state() {
        let s = DialogueState::new(6, 10).unwrap();
        assert_eq!(s.candidates().len(), 6);
        assert_eq!(s.turn(), 0);
        s.check_invariants(&fixture()).unwrap();
        assert!(DialogueState::new(6, 0).is_err());
    }

    #[test]
    fn single_turn_episode() {
        let c = fixture();
        let s = DialogueState::new(6, 1).unwrap();
        let s = s.apply_feedback(&c, &Action::Ask { attr: 1 }, Feedback::Dismiss).unwrap();
        assert_eq!(s.outcome(), Outcome::Quit);
    }

    #[test]
    fn confirm_filters_candidates() {
        let c = fixture();
        let s = DialogueState::new(6, 10).unwrap();
        let s = s.apply_feedback(&c, &Action::Ask { attr: 2 }, Feedback::Confirm).unwrap();
        assert_eq!(s.candidates(), &[0, 1, 2, 5]);
        assert_eq!(s.accepted_attrs(), &[2]);
    }

    #[test]
    fn dismiss_keeps_candidates() {
        let c = fixture();
        let s0 = DialogueState::new(6, 10).unwrap();
        let s = s0.apply_feedback(&c, &Action::Ask { attr: 5 }, Feedback::Dismiss).unwrap();
        assert_eq!(s.candidates(), s0.candidates());
        assert_eq!(s.rejected_attrs(), &[5]);
    }

    #[test]
    fn reject_moves_slate() {
        let c = Catalog::new(1, 1, vec![vec![0]; 12], vec![(0, 0)]).unwrap();
        let s = DialogueState::new(12, 10).unwrap();
        let s = s
            .apply_feedback(&c, &Action::Recommend { items: vec![7, 9] }, Feedback::Reject)
            .unwrap();
        assert_eq!(s.rejected_items(), &[7, 9]);
        assert!(!s.is_candidate(7) && !s.is_candidate(9));
        s.check_invariants(&c).unwrap();
    }

    #[test]
    fn terminal_outcomes() {
        let c = fixture();
        let mut s = DialogueState::new(6, 10).unwrap();
        for p in 0..2 {
            s = s.apply_feedback(&c, &Action::Ask { attr: p }, Feedback::Dismiss).unwrap();
            assert_eq!(s.outcome(), Outcome::Ongoing);
        }
        let won = s
            .apply_feedback(&c, &Action::Recommend { items: vec![3] }, Feedback::Accept)
            .unwrap();
        assert_eq!(won.outcome(), Outcome::Success { turns: 3 });
        assert!(won
            .apply_feedback(&c, &Action::Ask { attr: 4 }, Feedback::Dismiss)
            .is_err());
        let mut q = DialogueState::new(6, 10).unwrap();
        for _ in 0..10 {
            let items = vec![q.turn() % 6];
            q = q.apply_feedback(&c, &Action::Recommend { items }, Feedback::Reject).unwrap();
        }
        assert_eq!(q.outcome(), Outcome::Quit);
    }

    #[test]
    fn mismatched_feedback_is_contract_error() {
        let c = fixture();
        let s = DialogueState::new(6, 10).unwrap();
        assert!(matches!(
            s.apply_feedback(&c, &Action::Ask { attr: 0 }, Feedback::Accept),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lone_item_with_all_attributes_asked() {
        let c = Catalog::new(1, 2, vec![vec![0, 1]], vec![(0, 0)]).unwrap();
        let mut s = DialogueState::new(1, 10).unwrap();
        s = s.apply_feedback(&c, &Action::Ask { attr: 0 }, Feedback::Confirm).unwrap();
        s = s.apply_feedback(&c, &Action::Ask { attr: 1 }, Feedback::Confirm).unwrap();
        let space = build_action_space(&s, &c, &[0], 10, 10).unwrap();
        assert_eq!(space.iter().collect::<Vec<_>>(), vec![Candidate::Item(0)]);
    }

    #[test]
    fn entropy_ranking_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let item_attrs: Vec<Vec<usize>> = (0..20)
            .map(|_| {
                let mut a: Vec<usize> = (0..8).filter(|_| rng.gen_bool(0.35)).collect();
                if a.is_empty() {
                    a.push(rng.gen_range(0..8));
                }
                a
            })
            .collect();
        let c = Catalog::new(1, 8, item_attrs.clone(), vec![(0, 0)]).unwrap();
        let s = DialogueState::new(20, 10).unwrap();
        let space = build_action_space(&s, &c, &[], 4, 10).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..8)
            .map(|p| {
                let f = item_attrs.iter().filter(|a| a.contains(&p)).count() as f64 / 20.0;
                let h = if f == 0.0 || f == 1.0 {
                    0.0
                } else {
                    -(f * f.ln() + (1.0 - f) * (1.0 - f).ln())
                };
                (h, p)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = oracle.iter().take(4).map(|x| x.1).collect();
        assert_eq!(space.attrs, expected);
    }

    #[test]
    fn action_space_skips_asked_and_rejected() {
        let c = fixture();
        let s = DialogueState::new(6, 10).unwrap();
        let s = s.apply_feedback(&c, &Action::Ask { attr: 0 }, Feedback::Dismiss).unwrap();
        let s = s
            .apply_feedback(&c, &Action::Recommend { items: vec![1] }, Feedback::Reject)
            .unwrap();
        let space = build_action_space(&s, &c, s.candidates(), 10, 10).unwrap();
        assert!(!space.attrs.contains(&0));
        assert!(!space.items.contains(&1));
        assert_eq!(space.len(), 5 + 5);
    }

    #[test]
    fn ranking_and_slates() {
        assert_eq!(rank_items(&[4, 2, 9], &[0.0, 0.0, 0.0]), vec![2, 4, 9]);
        assert_eq!(rank_items(&[4, 2, 9], &[1.0, 0.5, 2.0]), vec![9, 4, 2]);
        assert_eq!(slate_for(4, &[9, 4, 2], 2), vec![4, 9]);
        assert_eq!(slate_for(2, &[9, 4, 2], 10), vec![2, 9, 4]);
    }

    #[test]
    fn trace_record_json_shape() {
        let r = TurnRecord {
            turn: 0,
            action: Action::Ask { attr: 3 },
            feedback: Feedback::Dismiss,
            reward: -0.1,
            candidates: 500,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"turn":0,"action":{"kind":"ask","attr":3},"feedback":"dismiss","reward":-0.1,"candidates":500}"#
        );
    }
}
