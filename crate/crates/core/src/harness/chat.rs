//! Interactive conversations where a person answers in place of the simulator.

use std::io::{BufRead, Write};

use crate::catalog::Dataset;
use crate::dialogue::{Action, DialogueState, Feedback};
use crate::encoder::EmbeddingVars;
use crate::error::{Error, Result};
use crate::metalearn::{MetaConfig, MetaParams};
use crate::numerics::Graph;
use crate::policy::{rollout, Chooser, Nets, Responder, SampleMode};
use crate::rng::stream;
use crate::simulator::{Episode, EpisodeKind, RewardSpec};

use super::trace::{render_action, render_feedback, render_header, render_outcome};

fn io_err(e: std::io::Error) -> Error {
    Error::io("<terminal>", e)
}

/// Reads answers from `input`; the transcript goes to `out`, prompts and
/// corrections to `prompt`.
pub struct HumanResponder<'a> {
    pub input: &'a mut dyn BufRead,
    pub out: &'a mut dyn Write,
    pub prompt: &'a mut dyn Write,
    pub rewards: &'a RewardSpec,
}

fn parse_answer(action: &Action, line: &str) -> Option<Feedback> {
    let word = line.trim().to_ascii_lowercase();
    match (action, word.as_str()) {
        (Action::Ask { .. }, "confirm" | "c" | "yes" | "y") => Some(Feedback::Confirm),
        (Action::Ask { .. }, "dismiss" | "d" | "no" | "n") => Some(Feedback::Dismiss),
        (Action::Recommend { .. }, "accept" | "a" | "yes" | "y") => Some(Feedback::Accept),
        (Action::Recommend { .. }, "reject" | "r" | "no" | "n") => Some(Feedback::Reject),
        _ => None,
    }
}

impl Responder for HumanResponder<'_> {
    fn respond(&mut self, state: &DialogueState, action: &Action) -> Result<(Feedback, f64)> {
        writeln!(self.out, "{}", render_action(state.turn(), action)).map_err(io_err)?;
        self.out.flush().map_err(io_err)?;
        let choices = match action {
            Action::Ask { .. } => "confirm/dismiss",
            Action::Recommend { .. } => "accept/reject",
        };
        loop {
            write!(self.prompt, "({choices}) > ").map_err(io_err)?;
            self.prompt.flush().map_err(io_err)?;
            let mut line = String::new();
            if self.input.read_line(&mut line).map_err(io_err)? == 0 {
                return Err(Error::Contract("input ended before the conversation finished".into()));
            }
            match parse_answer(action, &line) {
                Some(fb) => {
                    writeln!(self.out, "{}", render_feedback(state.turn(), fb)).map_err(io_err)?;
                    return Ok((fb, self.rewards.reward(fb, state)));
                }
                None => writeln!(self.prompt, "Please answer {choices}.").map_err(io_err)?,
            }
        }
    }
}

/// Runs `conversations` greedy conversations of the meta policy against a
/// person, carrying the hidden state from one to the next.
#[allow(clippy::too_many_arguments)]
pub fn chat_repl(
    ds: &Dataset,
    cfg: &MetaConfig,
    params: &MetaParams,
    conversations: usize,
    user: usize,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    prompt: &mut dyn Write,
) -> Result<Vec<Episode>> {
    let mut h = vec![0.0; cfg.policy.hidden];
    let mut episodes = Vec::with_capacity(conversations);
    for i in 0..conversations {
        writeln!(out, "{}", render_header(i, user, EpisodeKind::Query)).map_err(io_err)?;
        let mut g = Graph::new();
        let nets = Nets {
            policy: g.bind(&params.policy, false),
            rec: g.bind(&params.rec, false),
            enc: g.bind(&params.enc, false),
            emb: EmbeddingVars::bind(&mut g, &ds.embeddings, false),
            train_users: None,
        };
        let mut responder = HumanResponder {
            input: &mut *input,
            out: &mut *out,
            prompt: &mut *prompt,
            rewards: &cfg.rewards,
        };
        let mut rng = stream(cfg.seed, &[]);
        let r = rollout(
            &mut g,
            &nets,
            &ds.catalog,
            &mut responder,
            (user, EpisodeKind::Query, 0),
            &h,
            &cfg.rollout,
            Chooser::Policy {
                rng: &mut rng,
                mode: SampleMode::Greedy,
            },
            None,
        )?;
        writeln!(out, "{}", render_outcome(r.episode.outcome)).map_err(io_err)?;
        h = r.h_final;
        episodes.push(r.episode);
    }
    Ok(episodes)
}
